"""Pair-based free-energy training loop."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from symlab.geometry import relative_action_vectors
from symlab.model import GenerativeModel, free_energy_loss, images_to_tensor, save_checkpoint
from symlab.renderer import Dataset, SymmetryKind, generate_dataset, load_dataset, sample_pair_indices

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, terms: dict[str, float]) -> None:
        self.step = step
        self.terms = terms
        detail = ", ".join(f"{k}={v:.6g}" for k, v in terms.items())
        super().__init__(f"non-finite training state at step {step}: {detail}")


@dataclass
class TrainConfig:
    beta: float = 1.0
    steps: int = 20000
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    dataset: str | None = None
    eval_interval: int = 500
    latent_dim: int = 16
    out: str | None = None
    deterministic: bool = True
    eval_pairs: int = 256
    lr_schedule: str = "cosine"
    kl_warmup: float = 0.25
    self_pair_fraction: float = 0.0

    def __post_init__(self) -> None:
        if not 0.01 <= self.beta <= 1000:
            raise ValueError(f"beta must lie in [0.01, 1000], got {self.beta}")
        for name in ("steps", "batch_size", "eval_interval", "latent_dim", "eval_pairs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.kl_warmup < 1.0:
            raise ValueError("kl_warmup is a fraction of steps in [0, 1)")
        if not 0.0 <= self.self_pair_fraction < 1.0:
            raise ValueError("self_pair_fraction must lie in [0, 1)")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def parse_config_text(text: str) -> TrainConfig:
    """Parse the flat ``key = value`` config format (``#`` starts a comment)."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(fields[key].type, val)
    return TrainConfig(**values)


def _coerce(kind, val: str):
    kind = str(kind)
    if kind.startswith("float"):
        return float(val)
    if kind.startswith("int"):
        return int(val)
    if kind.startswith("bool"):
        if val.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {val!r}")
        return val.lower() in ("true", "1", "yes")
    if val.lower() in ("", "none"):
        return None
    return val


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        lines.append(f"{k} = {'none' if v is None else v}")
    return "\n".join(lines) + "\n"


def load_config(path: str | Path) -> TrainConfig:
    return parse_config_text(Path(path).read_text())


@dataclass
class TrainingCurve:
    steps: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)
    complexity: list[float] = field(default_factory=list)

    def append(self, step: int, loss: float, accuracy: float, complexity: float) -> None:
        if self.steps and step <= self.steps[-1]:
            raise ValueError("curve steps must be strictly increasing")
        self.steps.append(step)
        self.loss.append(loss)
        self.accuracy.append(accuracy)
        self.complexity.append(complexity)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def set_deterministic(enabled: bool = True, threads: int | None = None) -> None:
    """Single-threaded, deterministic torch kernels for bit-exact replay."""
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    elif threads:
        torch.set_num_threads(threads)


def _lr_at(cfg: TrainConfig, step: int) -> float:
    if cfg.lr_schedule == "constant":
        return cfg.lr
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * step / cfg.steps))


def _beta_at(cfg: TrainConfig, step: int) -> float:
    """Linear KL warm-up over the first ``kl_warmup`` fraction of steps."""
    ramp = cfg.kl_warmup * cfg.steps
    if ramp <= 0 or step >= ramp:
        return cfg.beta
    return cfg.beta * max(step, 1) / ramp


def train(
    config: TrainConfig,
    dataset: Dataset | None = None,
    model: GenerativeModel | None = None,
) -> tuple[GenerativeModel, TrainingCurve]:
    """Minimise the beta-weighted free energy over random pairs from a dataset.

    Pair sampling, latent noise and initialisation are all derived from
    ``config.seed``. A checkpoint is written when ``config.out`` is set.
    """
    if dataset is None:
        if config.dataset is None:
            raise ValueError("no dataset given (config.dataset is unset)")
        dataset = load_dataset(config.dataset)
    if dataset.width != dataset.height:
        raise ValueError("training requires square images")
    threads = os.environ.get("SYMLAB_THREADS")
    set_deterministic(config.deterministic, int(threads) if threads else None)

    torch.manual_seed(config.seed)
    if model is None:
        model = GenerativeModel(latent_dim=config.latent_dim, resolution=dataset.width)
    elif model.resolution != dataset.width:
        raise ValueError(f"dataset resolution {dataset.width} does not match model {model.resolution}")
    images = images_to_tensor(dataset.images())
    mats = dataset.pose_matrices()
    n = len(dataset)

    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed + 1)
    eval_rng = np.random.default_rng(config.seed + 2)
    eval_idx = sample_pair_indices(n, config.eval_pairs, eval_rng)
    eval_act = torch.as_tensor(relative_action_vectors(mats[eval_idx[:, 0]], mats[eval_idx[:, 1]]), dtype=torch.float32)
    eval_gen = torch.Generator().manual_seed(config.seed + 3)
    eval_noise = tuple(torch.randn(config.eval_pairs, model.latent_dim, generator=eval_gen) for _ in range(2))

    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    curve = TrainingCurve()

    def evaluate(step: int) -> None:
        model.eval()
        with torch.no_grad():
            loss, acc, comp = free_energy_loss(
                model, images[eval_idx[:, 0]], eval_act, images[eval_idx[:, 1]], config.beta, eval_noise
            )
        model.train()
        curve.append(step, float(loss), float(acc), float(comp))
        log.info("step %d loss %.4f accuracy %.4f complexity %.4f", step, float(loss), float(acc), float(comp))

    evaluate(0)
    for step in range(1, config.steps + 1):
        idx = sample_pair_indices(n, config.batch_size, rng)
        if config.self_pair_fraction > 0:
            same = rng.random(config.batch_size) < config.self_pair_fraction
            idx[same, 1] = idx[same, 0]
        act = torch.as_tensor(relative_action_vectors(mats[idx[:, 0]], mats[idx[:, 1]]), dtype=torch.float32)
        for g in opt.param_groups:
            g["lr"] = _lr_at(config, step - 1)
        loss, acc, comp = free_energy_loss(
            model, images[idx[:, 0]], act, images[idx[:, 1]], _beta_at(config, step - 1), generator=gen
        )
        terms = {"loss": loss.item(), "accuracy": acc.item(), "complexity": comp.item()}
        if not math.isfinite(terms["loss"]):
            raise NonFiniteLossError(step, terms)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if not all(torch.isfinite(p).all() for p in model.parameters()):
            raise NonFiniteLossError(step, terms)
        if step % config.eval_interval == 0 or step == config.steps:
            evaluate(step)

    model.eval()
    if config.out is not None:
        save_checkpoint(
            model,
            config.out,
            extra={
                "beta": config.beta,
                "seed": config.seed,
                "training_config": config.to_dict(),
                "dataset_radius": dataset.radius,
                "object": dataset.object.name,
                "curve": curve.to_dict(),
            },
        )
    return model, curve


# beta sweeps ---------------------------------------------------------------

SWEEP_COLUMNS = ("beta", "median_complexity", "symmetry_pct", "top2_variance_ratio", "recon_mse")


@dataclass
class SweepRow:
    beta: float
    status: str = "ok"
    median_complexity: float = math.nan
    symmetry_pct: float = math.nan
    orbit_symmetry_pct: float = math.nan
    top2_variance_ratio: float = math.nan
    components_90: int = 0
    total_variance: float = math.nan
    recon_mse: float = math.nan
    collapsed: bool = False
    collapse_rationale: str = ""
    checkpoint: str | None = None
    eigenvalues: list[float] = field(default_factory=list)
    complexity_values: list[float] = field(default_factory=list)
    symmetry_scores: list[float] = field(default_factory=list)
    reverse_symmetry_scores: list[float] = field(default_factory=list)
    orbit_symmetry_scores: list[float] = field(default_factory=list)
    curve: dict = field(default_factory=dict)


@dataclass
class SweepReport:
    object_id: str
    betas: list[float]
    threshold: float
    threshold_source: str
    eps_var: float
    seed: int
    rows: list[SweepRow]
    settings: dict = field(default_factory=dict)

    def ok_rows(self) -> list[SweepRow]:
        return [r for r in self.rows if r.status == "ok"]

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.rows]

    def first_collapse(self) -> int | None:
        for i, r in enumerate(self.rows):
            if r.collapsed:
                return i
        return None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in self.rows:
            w.writerow([repr(float(getattr(r, c))) for c in SWEEP_COLUMNS])
        return buf.getvalue()

    def save(self, out_dir: str | Path) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = out / "sweep.json", out / "sweep.csv"
        for path, text in zip(paths, (self.to_json(), self.to_csv())):
            tmp = path.with_suffix(path.suffix + ".tmp")
            tmp.write_text(text)
            tmp.replace(path)
        return paths

    @classmethod
    def load(cls, path: str | Path) -> SweepReport:
        d = json.loads(Path(path).read_text())
        d["rows"] = [SweepRow(**r) for r in d["rows"]]
        return cls(**d)


def beta_sweep(
    obj,
    betas,
    base: TrainConfig,
    out: str | Path | None = None,
    train_views: int = 2000,
    eval_views: int = 900,
    resolution: int = 32,
    threshold: float | str = "sweep",
    orbit_pairs_too: bool = True,
) -> SweepReport:
    """Train one model per beta on the same data and evaluate each.

    ``threshold`` picks the symmetry-invariance threshold: ``"sweep"`` calibrates
    one value for the whole sweep from the lowest-beta model's pair scores,
    ``"fixed"`` uses the literal constant, and a number is used as given.
    A beta whose training fails gets a row with its error and the sweep goes on.
    """
    from symlab import analysis as an

    betas = [float(b) for b in betas]
    if len(betas) < 2 or any(b2 <= b1 for b1, b2 in zip(betas, betas[1:])):
        raise ValueError("need at least two strictly ascending beta values")
    train_ds = generate_dataset(obj, train_views, seed=base.seed, width=resolution)
    eval_ds = generate_dataset(obj, eval_views, seed=base.seed + 1, width=resolution)
    pairs = an.dataset_pairs(eval_ds, an.EVAL_PAIRS, seed=base.seed + 2)
    symmetric = obj.symmetry.kind is not SymmetryKind.TRIVIAL
    opairs = an.orbit_pairs(eval_ds, obj, an.EVAL_PAIRS, seed=base.seed + 3) if orbit_pairs_too and symmetric else None
    eval_images = eval_ds.images()

    rows: list[SweepRow] = []
    spectra: dict[int, an.EigenSpectrum] = {}
    for k, beta in enumerate(betas):
        cfg = base.replace(beta=beta, out=None if out is None else str(Path(out) / f"beta_{beta:g}"))
        row = SweepRow(beta=beta, checkpoint=cfg.out)
        try:
            model, curve = train(cfg, train_ds)
        except (NonFiniteLossError, RuntimeError, ValueError) as err:
            log.warning("beta %g failed: %s", beta, err)
            row.status = f"failed: {err}"
            row.checkpoint = None
            rows.append(row)
            continue
        row.curve = curve.to_dict()
        cr = an.evaluate_complexity(model, pairs, beta, obj.name, seed=base.seed)
        row.complexity_values = cr.values
        row.median_complexity = cr.median
        fwd, rev = an.symmetry_scores(model, pairs.first, pairs.second)
        row.symmetry_scores, row.reverse_symmetry_scores = fwd.tolist(), rev.tolist()
        if opairs is not None:
            row.orbit_symmetry_scores = an.symmetry_scores(model, opairs.first, opairs.second)[0].tolist()
        sp = an.pca_spectrum(model, eval_images)
        spectra[k] = sp
        row.eigenvalues = sp.eigenvalues
        row.total_variance = sp.total_variance
        row.top2_variance_ratio = sp.top_ratio(2)
        row.components_90 = sp.components_for(0.9)
        row.recon_mse = an.reconstruction_mse(model, eval_images, seed=base.seed)
        rows.append(row)
        log.info("beta %g: complexity %.4g top2 %.3f recon %.4g", beta, cr.median, row.top2_variance_ratio, row.recon_mse)

    ok = [r for r in rows if r.status == "ok"]
    if isinstance(threshold, str):
        if threshold == "fixed":
            thr, source = an.FIXED_THRESHOLD, "fixed"
        elif threshold == "sweep":
            if not ok:
                thr, source = an.FIXED_THRESHOLD, "fixed (no trained model to calibrate on)"
            else:
                thr = an.calibrate_threshold(np.asarray(ok[0].symmetry_scores))
                source = f"p{an.CALIBRATION_QUANTILE:g} of beta={ok[0].beta:g} pair scores"
        else:
            raise ValueError(f"unknown threshold mode {threshold!r}")
    else:
        thr, source = float(threshold), "given"
    eps_var = an.COLLAPSE_EPS_FRACTION * ok[0].total_variance if ok else 0.0

    for k, row in enumerate(rows):
        if row.status != "ok":
            continue
        rep = an.SymmetryReport(row.symmetry_scores, row.reverse_symmetry_scores, thr, row.beta, obj.name)
        row.symmetry_pct = rep.percentage
        if row.orbit_symmetry_scores:
            row.orbit_symmetry_pct = an.exploitation_percentage(np.asarray(row.orbit_symmetry_scores), thr)
        verdict = an.detect_collapse(spectra[k], rep, eps_var)
        row.collapsed = verdict.collapsed
        row.collapse_rationale = verdict.rationale

    report = SweepReport(
        object_id=obj.name,
        betas=betas,
        threshold=thr,
        threshold_source=source,
        eps_var=eps_var,
        seed=base.seed,
        rows=rows,
        settings={
            "train_views": train_views,
            "eval_views": eval_views,
            "resolution": resolution,
            "eval_pairs": len(pairs),
            "base_config": base.to_dict(),
        },
    )
    if out is not None:
        report.save(out)
    return report
