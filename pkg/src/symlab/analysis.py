"""Evaluation of trained models: complexity, latent symmetry exploitation,
PCA eigen-spectrum of posterior means, and posterior-collapse detection."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from numpy.typing import NDArray

from symlab.geometry import relative_action_vectors
from symlab.model import GaussianBelief, GenerativeModel, images_to_tensor, kl_divergence, reparameterized_sample
from symlab.renderer import Dataset, ObjectSpec, render, sample_pair_indices, symmetry_orbit

EVAL_PAIRS = 900
PCA_OBSERVATIONS = 900
FIXED_THRESHOLD = 300.0
CALIBRATION_QUANTILE = 5.0
COLLAPSE_EPS_FRACTION = 1e-4
COLLAPSE_EXPLOITATION_PCT = 99.0
_BATCH = 256


@dataclass
class EvalPairs:
    """Batched evaluation pairs: images (N, H, W, 3) and actions (N, 9)."""

    first: NDArray[np.float32]
    actions: NDArray[np.float64]
    second: NDArray[np.float32]

    def __len__(self) -> int:
        return len(self.actions)


def dataset_pairs(ds: Dataset, count: int = EVAL_PAIRS, seed: int = 0) -> EvalPairs:
    """Random distinct pairs of records and the action between them."""
    rng = np.random.default_rng(seed)
    idx = sample_pair_indices(len(ds), count, rng)
    imgs = ds.images()
    mats = ds.pose_matrices()
    return EvalPairs(imgs[idx[:, 0]], relative_action_vectors(mats[idx[:, 0]], mats[idx[:, 1]]), imgs[idx[:, 1]])


def orbit_pairs(ds: Dataset, obj: ObjectSpec, count: int = EVAL_PAIRS, seed: int = 0, orbit_size: int = 8) -> EvalPairs:
    """Pairs whose second view is a symmetry-group image of the first."""
    rng = np.random.default_rng(seed)
    firsts, seconds, acts = [], [], []
    for i in rng.integers(0, len(ds), size=count):
        rec = ds.records[int(i)]
        orbit = symmetry_orbit(obj, rec.viewpoint, orbit_size)
        other = orbit[int(rng.integers(0, len(orbit)))]
        img = render(obj, other, ds.width, ds.height, ds.fov_deg).quantized()
        firsts.append(rec.observation.pixels)
        seconds.append(img.pixels)
        acts.append(relative_action_vectors(rec.viewpoint.matrix()[None], other.matrix()[None])[0])
    return EvalPairs(np.stack(firsts), np.stack(acts), np.stack(seconds))


@torch.no_grad()
def encode_images(model: GenerativeModel, images) -> GaussianBelief:
    x = images_to_tensor(images)
    means, logvars = [], []
    for s in range(0, len(x), _BATCH):
        b = model.encode(x[s : s + _BATCH])
        means.append(b.mean)
        logvars.append(b.logvar)
    return GaussianBelief(torch.cat(means), torch.cat(logvars))


@dataclass
class ComplexityReport:
    values: list[float]
    median: float
    beta: float | None = None
    object_id: str | None = None
    sampled_prior: bool = True

    @property
    def pair_count(self) -> int:
        return len(self.values)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pair_count"] = self.pair_count
        return d


@torch.no_grad()
def complexity_values(model: GenerativeModel, pairs: EvalPairs, seed: int = 0, sampled: bool = True) -> NDArray[np.float64]:
    """Per-pair KL(encode(o_b) || transition(sample(encode(o_a)), action))."""
    q_a = encode_images(model, pairs.first)
    q_b = encode_images(model, pairs.second)
    if sampled:
        gen = torch.Generator().manual_seed(seed)
        s_a = reparameterized_sample(q_a, torch.randn(q_a.mean.shape, generator=gen))
    else:
        s_a = q_a.mean
    act = torch.as_tensor(pairs.actions, dtype=torch.float32)
    prior = model.transition(s_a, act)
    return kl_divergence(q_b, prior).double().numpy()


def evaluate_complexity(
    model: GenerativeModel,
    pairs: EvalPairs,
    beta: float | None = None,
    object_id: str | None = None,
    seed: int = 0,
    sampled: bool = True,
) -> ComplexityReport:
    if len(pairs) < 2:
        raise ValueError("complexity needs at least two pairs")
    vals = complexity_values(model, pairs, seed=seed, sampled=sampled)
    return ComplexityReport(vals.tolist(), float(np.median(vals)), beta, object_id, sampled)


@torch.no_grad()
def symmetry_score(model: GenerativeModel, o_a, o_b) -> float:
    """KL between the posterior encodings of two observations (a relative to b)."""
    q = encode_images(model, [o_a, o_b])
    return float(kl_divergence(q[0], q[1]))


@torch.no_grad()
def symmetry_scores(model: GenerativeModel, first, second) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Both KL directions for batched pairs: (a->b, b->a)."""
    q_a = encode_images(model, first)
    q_b = encode_images(model, second)
    return kl_divergence(q_a, q_b).double().numpy(), kl_divergence(q_b, q_a).double().numpy()


@dataclass
class SymmetryReport:
    scores: list[float]
    reverse_scores: list[float]
    threshold: float
    beta: float | None = None
    object_id: str | None = None

    @property
    def percentage(self) -> float:
        return exploitation_percentage(np.asarray(self.scores), self.threshold)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["percentage"] = self.percentage
        return d


def exploitation_percentage(scores: NDArray[np.float64], threshold: float) -> float:
    scores = np.asarray(scores)
    return float(np.count_nonzero(scores < threshold) / len(scores) * 100.0)


def symmetry_exploitation(
    model: GenerativeModel,
    pairs: EvalPairs,
    threshold: float,
    beta: float | None = None,
    object_id: str | None = None,
) -> SymmetryReport:
    """Share of pairs whose a->b posterior KL falls below ``threshold`` (in %)."""
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    fwd, rev = symmetry_scores(model, pairs.first, pairs.second)
    return SymmetryReport(fwd.tolist(), rev.tolist(), float(threshold), beta, object_id)


def calibrate_threshold(scores: NDArray[np.float64], quantile: float = CALIBRATION_QUANTILE) -> float:
    """Invariance threshold as a low percentile of reference symmetry scores."""
    t = float(np.percentile(np.asarray(scores), quantile))
    return max(t, np.finfo(np.float64).tiny)


@dataclass
class EigenSpectrum:
    eigenvalues: list[float]
    ratios: list[float]
    count: int
    warnings: list[str] = field(default_factory=list)

    @property
    def total_variance(self) -> float:
        return float(sum(self.eigenvalues))

    def top_ratio(self, k: int) -> float:
        return float(sum(self.ratios[:k]))

    def components_for(self, fraction: float = 0.9) -> int:
        """Smallest number of leading components explaining ``fraction`` of variance."""
        cum = np.cumsum(self.ratios)
        return int(np.searchsorted(cum, fraction - 1e-12) + 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total_variance"] = self.total_variance
        return d


def spectrum_from_latents(latents: NDArray[np.float64]) -> EigenSpectrum:
    """Covariance eigen-decomposition of row-stacked latent vectors."""
    M = np.asarray(latents, dtype=np.float64)
    n, d = M.shape
    warnings = []
    if n < d:
        warnings.append(f"rank-deficient: {n} observations for {d} latent dimensions")
    centered = M - M.mean(axis=0)
    cov = centered.T @ centered / max(n - 1, 1)
    vals = np.linalg.eigvalsh(cov)[::-1]
    vals = np.where(vals < 0, 0.0, vals)
    total = vals.sum()
    ratios = vals / total if total > 0 else np.full(d, 1.0 / d)
    return EigenSpectrum(vals.tolist(), ratios.tolist(), n, warnings)


def posterior_means(model: GenerativeModel, observations) -> NDArray[np.float64]:
    return encode_images(model, observations).mean.double().numpy()


def pca_spectrum(model: GenerativeModel, observations) -> EigenSpectrum:
    return spectrum_from_latents(posterior_means(model, observations))


def project_latents_2d(latents: NDArray[np.float64]) -> NDArray[np.float64]:
    M = np.asarray(latents, dtype=np.float64)
    centered = M - M.mean(axis=0)
    _, vecs = np.linalg.eigh(centered.T @ centered)
    axes = vecs[:, ::-1][:, :2]
    # fix the sign so projections are reproducible across platforms
    signs = np.sign(axes[np.abs(axes).argmax(axis=0), [0, 1]])
    signs[signs == 0] = 1.0
    return centered @ (axes * signs)


def project_2d(model: GenerativeModel, observations, labels: NDArray[np.float64] | None = None):
    """Posterior means projected onto the top-2 principal axes.

    Returns ``(points (N, 2), labels)``; labels are passed through (typically
    azimuth/elevation per observation) for plotting.
    """
    return project_latents_2d(posterior_means(model, observations)), labels


@dataclass
class CollapseVerdict:
    collapsed: bool
    rationale: str
    total_variance: float
    eps_var: float
    exploitation: float
    exploitation_floor: float


def detect_collapse(
    spectrum: EigenSpectrum,
    symmetry: SymmetryReport,
    eps_var: float,
    exploitation_floor: float = COLLAPSE_EXPLOITATION_PCT,
) -> CollapseVerdict:
    """Collapsed iff latent variance < eps_var and nearly every pair counts as symmetric."""
    tv = spectrum.total_variance
    pct = symmetry.percentage
    low_var = tv < eps_var
    saturated = pct >= exploitation_floor
    parts = [
        f"total variance {tv:.3g} {'<' if low_var else '>='} eps_var {eps_var:.3g}",
        f"exploitation {pct:.1f}% {'>=' if saturated else '<'} {exploitation_floor:.1f}%",
    ]
    return CollapseVerdict(low_var and saturated, "; ".join(parts), tv, eps_var, pct, exploitation_floor)


@torch.no_grad()
def reconstruction_mse(model: GenerativeModel, images, seed: int = 0) -> float:
    """Per-pixel MSE of decode(sample(encode(o))) against o."""
    q = encode_images(model, images)
    gen = torch.Generator().manual_seed(seed)
    s = reparameterized_sample(q, torch.randn(q.mean.shape, generator=gen))
    x = images_to_tensor(images)
    out = torch.cat([model.decode(s[i : i + _BATCH]) for i in range(0, len(s), _BATCH)])
    return float(((out - x) ** 2).mean())


@torch.no_grad()
def prediction_mse(model: GenerativeModel, pairs: EvalPairs, seed: int = 0) -> float:
    """Per-pixel MSE of the novel-view prediction through the transition model."""
    q_a = encode_images(model, pairs.first)
    gen = torch.Generator().manual_seed(seed)
    s = reparameterized_sample(q_a, torch.randn(q_a.mean.shape, generator=gen))
    prior = model.transition(s, torch.as_tensor(pairs.actions, dtype=torch.float32))
    s_hat = reparameterized_sample(prior, torch.randn(prior.mean.shape, generator=gen))
    out = torch.cat([model.decode(s_hat[i : i + _BATCH]) for i in range(0, len(s_hat), _BATCH)])
    return float(((out - images_to_tensor(pairs.second)) ** 2).mean())


def circular_resultant(angles: NDArray[np.float64]) -> float:
    return float(math.hypot(np.cos(angles).mean(), np.sin(angles).mean()))


def trend_inversions(values, increasing: bool) -> list[tuple[int, float]]:
    """Adjacent violations of a monotone trend as ``(index, relative size)``."""
    v = np.asarray(values, dtype=np.float64)
    out = []
    for i in range(len(v) - 1):
        a, b = v[i], v[i + 1]
        bad = b < a if increasing else b > a
        if bad:
            out.append((i, abs(b - a) / max(abs(a), np.finfo(np.float64).tiny)))
    return out


def trend_holds(values, increasing: bool, rel_slack: float = 0.10, max_inversions: int = 1) -> bool:
    """Monotone up to at most ``max_inversions`` adjacent inversions, each within ``rel_slack``."""
    inv = trend_inversions(values, increasing)
    return len(inv) <= max_inversions and all(r <= rel_slack for _, r in inv)
