"""Object-centric generative model: posterior encoder, action-conditioned transition
and likelihood decoder over diagonal-Gaussian latent beliefs."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

LOGVAR_LIMIT = 10.0
ACTION_DIM = 9


class ModelIOError(ValueError):
    """Shape mismatch between inputs or checkpoints and the model architecture."""


@dataclass(frozen=True)
class GaussianBelief:
    """Diagonal Gaussian over the latent state; tensors share shape (..., D)."""

    mean: Tensor
    logvar: Tensor

    def __post_init__(self) -> None:
        if self.mean.shape != self.logvar.shape:
            raise ValueError(f"mean {tuple(self.mean.shape)} and logvar {tuple(self.logvar.shape)} differ")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def var(self) -> Tensor:
        return self.logvar.exp()

    def __getitem__(self, idx) -> GaussianBelief:
        return GaussianBelief(self.mean[idx], self.logvar[idx])

    def detach(self) -> GaussianBelief:
        return GaussianBelief(self.mean.detach(), self.logvar.detach())


def soft_clamp(x: Tensor, limit: float = LOGVAR_LIMIT) -> Tensor:
    """Smooth clamp into (-limit, limit); keeps gradients alive near the bounds."""
    return limit * torch.tanh(x / limit)


def reparameterized_sample(b: GaussianBelief, noise: Tensor) -> Tensor:
    return b.mean + torch.exp(0.5 * b.logvar) * noise


def kl_divergence(q: GaussianBelief, p: GaussianBelief) -> Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the last dimension."""
    if q.dim != p.dim:
        raise ValueError(f"dimension mismatch: {q.dim} vs {p.dim}")
    return 0.5 * torch.sum(
        torch.exp(q.logvar - p.logvar)
        + (p.mean - q.mean) ** 2 * torch.exp(-p.logvar)
        - 1.0
        + p.logvar
        - q.logvar,
        dim=-1,
    )


def _gaussian_head(h: Tensor) -> GaussianBelief:
    mean, raw = h.chunk(2, dim=-1)
    return GaussianBelief(mean, soft_clamp(raw))


class GenerativeModel(nn.Module):
    """Encoder q_phi, transition p_chi and decoder p_psi.

    The encoder is four stride-2 convolutions plus a dense head; the decoder
    mirrors it with transposed convolutions and a sigmoid output; the transition
    is a three-layer MLP on ``concat(state, action)``.
    """

    def __init__(
        self,
        latent_dim: int = 16,
        resolution: int = 32,
        channels: Sequence[int] = (16, 32, 64, 64),
        hidden: int = 256,
        transition_hidden: int = 128,
    ) -> None:
        super().__init__()
        if resolution % 16 or resolution < 16:
            raise ModelIOError(f"resolution must be a multiple of 16, got {resolution}")
        self.latent_dim = int(latent_dim)
        self.resolution = int(resolution)
        self.channels = tuple(int(c) for c in channels)
        self.hidden = int(hidden)
        self.transition_hidden = int(transition_hidden)
        if len(self.channels) != 4:
            raise ModelIOError("encoder needs exactly four conv stages")

        side = resolution // 16
        flat = self.channels[-1] * side * side
        layers: list[nn.Module] = []
        c_in = 3
        for c in self.channels:
            layers += [nn.Conv2d(c_in, c, 4, stride=2, padding=1), nn.SiLU()]
            c_in = c
        self.encoder = nn.Sequential(
            *layers,
            nn.Flatten(),
            nn.Linear(flat, hidden),
            nn.SiLU(),
            nn.Linear(hidden, 2 * latent_dim),
        )
        self.transition_net = nn.Sequential(
            nn.Linear(latent_dim + ACTION_DIM, transition_hidden),
            nn.SiLU(),
            nn.Linear(transition_hidden, transition_hidden),
            nn.SiLU(),
            nn.Linear(transition_hidden, 2 * latent_dim),
        )
        dec: list[nn.Module] = [
            nn.Linear(latent_dim, hidden),
            nn.SiLU(),
            nn.Linear(hidden, flat),
            nn.SiLU(),
            nn.Unflatten(1, (self.channels[-1], side, side)),
        ]
        rev = list(self.channels[::-1]) + [3]
        for a, b in zip(rev[:-1], rev[1:]):
            dec += [nn.ConvTranspose2d(a, b, 4, stride=2, padding=1), nn.SiLU()]
        dec[-1] = nn.Sigmoid()
        self.decoder = nn.Sequential(*dec)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        """He-normal weights, zero biases.

        The framework's default uniform init shrinks activations layer by layer,
        which leaves the decoder stuck predicting the mean image.
        """
        for mod in self.modules():
            if isinstance(mod, (nn.Linear, nn.Conv2d, nn.ConvTranspose2d)):
                mode = "fan_out" if isinstance(mod, nn.ConvTranspose2d) else "fan_in"
                nn.init.kaiming_normal_(mod.weight, mode=mode, nonlinearity="relu")
                nn.init.zeros_(mod.bias)

    @property
    def fingerprint(self) -> str:
        ch = ",".join(map(str, self.channels))
        return (
            f"enc=conv4s2[{ch}]+dense{self.hidden};"
            f"trans=mlp3[{self.transition_hidden}];"
            f"dec=convT4s2[{','.join(map(str, self.channels[::-1]))},3]+sigmoid;"
            f"act=silu;D={self.latent_dim};res={self.resolution}"
        )

    def config(self) -> dict:
        return {
            "latent_dim": self.latent_dim,
            "resolution": self.resolution,
            "channels": list(self.channels),
            "hidden": self.hidden,
            "transition_hidden": self.transition_hidden,
        }

    def _check_images(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != self.resolution or x.shape[3] != self.resolution:
            raise ModelIOError(
                f"expected images (B, 3, {self.resolution}, {self.resolution}), got {tuple(x.shape)}"
            )

    def _check_latent(self, s: Tensor) -> None:
        if s.shape[-1] != self.latent_dim:
            raise ModelIOError(f"latent has dim {s.shape[-1]}, model expects {self.latent_dim}")

    def encode(self, x: Tensor) -> GaussianBelief:
        """Posterior belief for a (B, 3, R, R) image batch."""
        self._check_images(x)
        return _gaussian_head(self.encoder(x))

    def transition(self, s: Tensor, a: Tensor) -> GaussianBelief:
        self._check_latent(s)
        if a.shape[-1] != ACTION_DIM or a.shape[:-1] != s.shape[:-1]:
            raise ModelIOError(f"action batch {tuple(a.shape)} does not match state batch {tuple(s.shape)}")
        return _gaussian_head(self.transition_net(torch.cat([s, a], dim=-1)))

    def decode(self, s: Tensor) -> Tensor:
        self._check_latent(s)
        return self.decoder(s)


def images_to_tensor(images, dtype: torch.dtype = torch.float32) -> Tensor:
    """(N, H, W, 3) array or list of Observations to a (N, 3, H, W) tensor."""
    if isinstance(images, (list, tuple)):
        images = np.stack([getattr(o, "pixels", o) for o in images])
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.as_tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)), dtype=dtype)


def free_energy_loss(
    model: GenerativeModel,
    o_prev: Tensor,
    action: Tensor,
    o_next: Tensor,
    beta: float,
    noise: tuple[Tensor, Tensor] | None = None,
    generator: torch.Generator | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Batch-averaged ``(loss, accuracy, complexity)`` with loss = accuracy + beta * complexity.

    accuracy: squared error ||o_next - o_hat||^2 summed over pixels and channels.
    complexity: KL(encode(o_next) || transition(sample(encode(o_prev)), action)).
    ``noise`` is the pair of unit-normal draws for the two sampling steps.
    """
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    q_prev = model.encode(o_prev)
    q_next = model.encode(o_next)
    if noise is None:
        shape = q_prev.mean.shape
        noise = (
            torch.randn(shape, generator=generator, dtype=q_prev.mean.dtype),
            torch.randn(shape, generator=generator, dtype=q_prev.mean.dtype),
        )
    s_prev = reparameterized_sample(q_prev, noise[0])
    prior = model.transition(s_prev, action)
    s_hat = reparameterized_sample(prior, noise[1])
    o_hat = model.decode(s_hat)
    accuracy = ((o_hat - o_next) ** 2).flatten(1).sum(dim=1).mean()
    complexity = kl_divergence(q_next, prior).mean()
    return accuracy + beta * complexity, accuracy, complexity


# checkpoint I/O ------------------------------------------------------------

MANIFEST = "manifest.json"


def save_checkpoint(model: GenerativeModel, out_dir: str | Path, extra: dict | None = None) -> Path:
    """Write ``manifest.json`` plus one raw little-endian float32 file per parameter."""
    out = Path(out_dir)
    (out / "params").mkdir(parents=True, exist_ok=True)
    arrays = {}
    for name, tensor in model.state_dict().items():
        fname = f"params/{name}.f32"
        arr = tensor.detach().cpu().numpy().astype("<f4")
        (out / fname).write_bytes(arr.tobytes(order="C"))
        arrays[name] = {"file": fname, "shape": list(arr.shape), "dtype": "<f4"}
    manifest = {
        "fingerprint": model.fingerprint,
        "architecture": model.config(),
        "latent_dim": model.latent_dim,
        "resolution": model.resolution,
        "arrays": arrays,
    }
    manifest.update(extra or {})
    tmp = out / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    tmp.replace(out / MANIFEST)
    return out


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    f = path / MANIFEST
    if not f.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {f}")
    return json.loads(f.read_text())


def load_checkpoint(path: str | Path) -> tuple[GenerativeModel, dict]:
    path = Path(path)
    manifest = read_manifest(path)
    model = GenerativeModel(**manifest["architecture"])
    if model.fingerprint != manifest["fingerprint"]:
        raise ModelIOError(
            f"fingerprint mismatch: manifest {manifest['fingerprint']!r} vs rebuilt {model.fingerprint!r}"
        )
    state = model.state_dict()
    if set(state) != set(manifest["arrays"]):
        raise ModelIOError("checkpoint parameter names do not match the architecture")
    loaded = {}
    for name, info in manifest["arrays"].items():
        expected = tuple(state[name].shape)
        if tuple(info["shape"]) != expected:
            raise ModelIOError(f"{name}: checkpoint shape {info['shape']} vs model {list(expected)}")
        raw = (path / info["file"]).read_bytes()
        if len(raw) != 4 * math.prod(expected):
            raise ModelIOError(f"{name}: file holds {len(raw)} bytes, expected {4 * math.prod(expected)}")
        loaded[name] = torch.from_numpy(np.frombuffer(raw, dtype="<f4").reshape(expected).copy())
    model.load_state_dict(loaded)
    model.eval()
    return model, manifest
