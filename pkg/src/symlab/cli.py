"""Command-line entry point: datasets, training, sweeps, analysis and planning.

Every artifact-producing command writes ``experiment.json`` next to its outputs.
Relative ``--out`` paths resolve under ``$SYMLAB_OUT_ROOT`` when it is set;
``$SYMLAB_THREADS`` sets the torch thread count outside deterministic mode.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np

log = logging.getLogger("symlab")

MANIFEST_NAME = "experiment.json"


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


@dataclass
class ExperimentManifest:
    command: str
    argv: list[str]
    config: dict
    seed: int | None
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    duration_s: float = 0.0
    tool_version: str = field(default_factory=tool_version)

    def write(self, out_dir: Path) -> Path:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / MANIFEST_NAME
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        tmp.replace(path)
        return path


def hash_path(path: str | Path) -> str:
    """sha256 of a file, or of every file under a directory (names included)."""
    path = Path(path)
    h = hashlib.sha256()
    if path.is_file():
        h.update(path.read_bytes())
    elif path.is_dir():
        for f in sorted(p for p in path.rglob("*") if p.is_file()):
            h.update(f.relative_to(path).as_posix().encode())
            h.update(f.read_bytes())
    else:
        raise FileNotFoundError(f"input not found: {path}")
    return h.hexdigest()


def resolve_out(path: str) -> Path:
    p = Path(path)
    root = os.environ.get("SYMLAB_OUT_ROOT")
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def name_list(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def angle_pair(text: str) -> tuple[float, float]:
    vals = float_list(text)
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"expected AZ,EL in radians, got {text!r}")
    return vals[0], vals[1]


def threshold_arg(text: str) -> float | str:
    if text in ("sweep", "fixed"):
        return text
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("threshold is 'sweep', 'fixed' or a positive number") from None
    if not v > 0:
        raise argparse.ArgumentTypeError("threshold must be positive")
    return v


def _configure_threads(deterministic: bool) -> None:
    from symlab.trainer import set_deterministic

    threads = os.environ.get("SYMLAB_THREADS")
    set_deterministic(deterministic, int(threads) if threads else None)


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    tmp.replace(path)
    return path


# commands ------------------------------------------------------------------


def cmd_generate_dataset(args, m: ExperimentManifest) -> None:
    from symlab.renderer import generate_dataset, get_object, save_dataset

    obj = get_object(args.object)
    ds = generate_dataset(obj, args.count, radius=args.radius, seed=args.seed, width=args.resolution)
    out = save_dataset(ds, args.out)
    m.outputs.append(str(out))


def cmd_train(args, m: ExperimentManifest) -> None:
    from symlab.trainer import load_config, train

    cfg = load_config(args.config)
    m.inputs[str(args.config)] = hash_path(args.config)
    changes = {}
    if args.out is not None:
        changes["out"] = str(args.out)
    if args.dataset is not None:
        changes["dataset"] = args.dataset
    if args.deterministic is not None:
        changes["deterministic"] = args.deterministic
    cfg = cfg.replace(**changes)
    if cfg.out is None:
        raise ValueError("config has no 'out' and --out was not given")
    if cfg.dataset is None:
        raise ValueError("config has no 'dataset' and --dataset was not given")
    m.inputs[cfg.dataset] = hash_path(cfg.dataset)
    if args.out is None:
        cfg = cfg.replace(out=str(resolve_out(cfg.out)))
    args.out = Path(cfg.out)
    m.config = cfg.to_dict()
    m.seed = cfg.seed
    _, curve = train(cfg)
    _write_json(args.out / "curve.json", curve.to_dict())
    m.outputs += [cfg.out, str(args.out / "curve.json")]


def _base_config(args):
    from symlab.trainer import TrainConfig

    return TrainConfig(
        steps=args.steps,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=args.seed,
        eval_interval=args.eval_interval,
        latent_dim=args.latent_dim,
        deterministic=args.deterministic,
        self_pair_fraction=args.self_pair_fraction,
    )


def cmd_sweep(args, m: ExperimentManifest) -> None:
    from symlab.renderer import get_object
    from symlab.trainer import beta_sweep

    base = _base_config(args)
    m.config = {"base": base.to_dict(), "object": args.object, "betas": args.betas}
    rep = beta_sweep(
        get_object(args.object),
        args.betas,
        base,
        out=args.out,
        train_views=args.train_views,
        eval_views=args.eval_views,
        resolution=args.resolution,
        threshold=args.threshold,
    )
    m.outputs += [str(args.out / "sweep.json"), str(args.out / "sweep.csv")]
    m.outputs += [r.checkpoint for r in rep.rows if r.checkpoint]
    print(rep.to_csv(), end="")


def _load_model_and_data(args, m: ExperimentManifest):
    from symlab.model import load_checkpoint
    from symlab.renderer import load_dataset

    ds = load_dataset(args.dataset)
    model, manifest = load_checkpoint(args.model)
    m.inputs[str(args.model)] = hash_path(args.model)
    m.inputs[str(args.dataset)] = hash_path(args.dataset)
    if ds.width != model.resolution:
        raise ValueError(f"dataset resolution {ds.width} does not match model resolution {model.resolution}")
    return model, manifest, ds


def cmd_eval_complexity(args, m: ExperimentManifest) -> None:
    from symlab.analysis import dataset_pairs, evaluate_complexity

    model, manifest, ds = _load_model_and_data(args, m)
    pairs = dataset_pairs(ds, args.pairs, seed=args.seed)
    rep = evaluate_complexity(model, pairs, manifest.get("beta"), ds.object.name, seed=args.seed, sampled=not args.mean_prior)
    path = _write_json(args.out / "complexity.json", rep.to_dict())
    m.outputs.append(str(path))
    print(f"median complexity {rep.median:.6g} over {rep.pair_count} pairs")


def cmd_eval_symmetry(args, m: ExperimentManifest) -> None:
    from symlab.analysis import FIXED_THRESHOLD, dataset_pairs, orbit_pairs, symmetry_exploitation

    model, manifest, ds = _load_model_and_data(args, m)
    pairs = orbit_pairs(ds, ds.object, args.pairs, seed=args.seed) if args.orbit else dataset_pairs(ds, args.pairs, seed=args.seed)
    thr = FIXED_THRESHOLD if args.threshold == "fixed" else float(args.threshold)
    rep = symmetry_exploitation(model, pairs, thr, manifest.get("beta"), ds.object.name)
    path = _write_json(args.out / "symmetry.json", rep.to_dict())
    m.outputs.append(str(path))
    print(f"symmetry exploitation {rep.percentage:.2f}% at threshold {thr:.6g}")


def cmd_pca(args, m: ExperimentManifest) -> None:
    from symlab.analysis import pca_spectrum, project_2d
    from symlab.plotting import plot_eigenvalues, plot_projection

    model, _, ds = _load_model_and_data(args, m)
    images = ds.images()
    sp = pca_spectrum(model, images)
    angles = ds.angles()
    pts, _ = project_2d(model, images, angles)
    out = args.out
    paths = [_write_json(out / "spectrum.json", sp.to_dict())]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pc1", "pc2", "azimuth", "elevation"])
    for p, a in zip(pts, angles):
        w.writerow([repr(float(p[0])), repr(float(p[1])), repr(float(a[0])), repr(float(a[1]))])
    (out / "projection.csv").write_text(buf.getvalue())
    paths.append(out / "projection.csv")
    paths.append(plot_eigenvalues({ds.object.name: sp.ratios}, out / "eigenvalues.png"))
    paths.append(plot_projection(pts, angles[:, 1], out / "projection.png"))
    m.outputs += [str(p) for p in paths]
    print(f"top-2 ratio {sp.top_ratio(2):.4f}; components for 90%: {sp.components_for(0.9)}")


def cmd_plan_grasp(args, m: ExperimentManifest) -> None:
    from symlab.geometry import SphericalCoord, viewpoint_from_spherical
    from symlab.model import load_checkpoint
    from symlab.planner import PlannerConfig, orbit_spread, plan
    from symlab.plotting import plot_grasp_sphere
    from symlab.renderer import get_object, load_image

    model, manifest = load_checkpoint(args.model)
    m.inputs[str(args.model)] = hash_path(args.model)
    for p in (args.current, args.goal):
        m.inputs[str(p)] = hash_path(p)
    o_cur, o_goal = load_image(args.current), load_image(args.goal)
    radius = args.radius if args.radius is not None else manifest.get("dataset_radius")
    if radius is None:
        raise ValueError("checkpoint records no dataset radius; pass --radius")
    current = viewpoint_from_spherical(SphericalCoord(*args.current_view, radius))
    goal = viewpoint_from_spherical(SphericalCoord(*args.goal_view, radius)) if args.goal_view else None
    cfg = PlannerConfig(candidates=args.candidates, top_k=args.topk, mode=args.mode, unit_variance=args.unit_variance)
    m.config.update(radius=radius)
    res = plan(model, o_cur, current, o_goal, cfg, np.random.default_rng(args.seed), radius, goal)
    d = res.to_dict()
    if goal is not None and manifest.get("object"):
        sp = orbit_spread(res, get_object(manifest["object"]), goal)
        d["orbit_distance"] = sp.mean_orbit_distance
        d["axial_spread"] = sp.axial_spread
    paths = [_write_json(args.out / "plan.json", d)]
    goal_pos = goal.translation if goal is not None else res.poses[0].translation
    paths.append(
        plot_grasp_sphere(goal_pos, [p.translation for p in res.poses], args.out / "grasp.png", current.translation)
    )
    m.outputs += [str(p) for p in paths]
    for r in res.ranked:
        print(f"{r.score:.6g}\t" + " ".join(f"{x:.4f}" for x in r.pose.translation))


def cmd_plot(args, m: ExperimentManifest) -> None:
    from symlab.plotting import plot_complexity_vs_beta, plot_eigenvalues, plot_exploitation_vs_beta
    from symlab.trainer import SweepReport

    reports = []
    for p in args.sweep:
        m.inputs[str(p)] = hash_path(p)
        reports.append(SweepReport.load(p))
    spectra = {}
    for rep in reports:
        for r in rep.ok_rows():
            tot = sum(r.eigenvalues)
            spectra[f"{rep.object_id} b={r.beta:g}"] = [e / tot for e in r.eigenvalues] if tot > 0 else r.eigenvalues
    paths = [
        plot_complexity_vs_beta(reports, args.out / "complexity_vs_beta.png"),
        plot_exploitation_vs_beta(reports, args.out / "exploitation_vs_beta.png"),
        plot_eigenvalues(spectra, args.out / "eigenvalues.png"),
    ]
    m.outputs += [str(p) for p in paths]


def mid_beta_index(betas) -> int:
    """Lower median of the sweep grid."""
    return (len(betas) - 1) // 2


def cmd_reproduce_figures(args, m: ExperimentManifest) -> None:
    from symlab.analysis import project_2d
    from symlab.model import load_checkpoint
    from symlab.plotting import plot_complexity_vs_beta, plot_eigenvalues, plot_exploitation_vs_beta, plot_projection
    from symlab.renderer import generate_dataset, get_object
    from symlab.trainer import beta_sweep

    base = _base_config(args)
    m.config = {
        "base": base.to_dict(),
        "objects": args.objects,
        "betas": args.betas,
        "train_views": args.train_views,
        "eval_views": args.eval_views,
        "resolution": args.resolution,
        "threshold": args.threshold,
    }
    reports = []
    for name in args.objects:
        rep = beta_sweep(
            get_object(name),
            args.betas,
            base,
            out=args.out / name,
            train_views=args.train_views,
            eval_views=args.eval_views,
            resolution=args.resolution,
            threshold=args.threshold,
        )
        reports.append(rep)
        m.outputs += [str(args.out / name / "sweep.json"), str(args.out / name / "sweep.csv")]

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["object", "beta", "median_complexity", "symmetry_pct", "top2_variance_ratio", "recon_mse", "collapsed"])
    for rep in reports:
        for r in rep.rows:
            vals = [r.beta, r.median_complexity, r.symmetry_pct, r.top2_variance_ratio, r.recon_mse]
            w.writerow([rep.object_id, *(repr(float(v)) for v in vals), int(r.collapsed)])
    (args.out / "sweep.csv").write_text(buf.getvalue())

    mid = mid_beta_index(args.betas)
    spectra = {}
    for rep in reports:
        r = rep.rows[mid]
        if r.status == "ok":
            tot = sum(r.eigenvalues)
            spectra[f"{rep.object_id} b={r.beta:g}"] = [e / tot for e in r.eigenvalues] if tot > 0 else r.eigenvalues
    paths = [
        args.out / "sweep.csv",
        plot_complexity_vs_beta(reports, args.out / "complexity_vs_beta.png"),
        plot_exploitation_vs_beta(reports, args.out / "exploitation_vs_beta.png"),
        plot_eigenvalues(spectra, args.out / "eigenvalues.png"),
    ]
    first = reports[0].rows[mid]
    if first.checkpoint:
        model, _ = load_checkpoint(first.checkpoint)
        ds = generate_dataset(get_object(reports[0].object_id), args.eval_views, seed=base.seed + 1, width=args.resolution)
        pts, angles = project_2d(model, ds.images(), ds.angles())
        paths.append(plot_projection(pts, angles[:, 1], args.out / "projection.png"))
    m.outputs += [str(p) for p in paths]
    print(buf.getvalue(), end="")


# parser --------------------------------------------------------------------


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps", type=int, default=3000, help="optimizer steps per model (default 3000)")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-interval", type=int, default=500)
    p.add_argument("--latent-dim", type=int, default=16)
    p.add_argument("--self-pair-fraction", type=float, default=0.5, help="share of zero-action pairs per batch (default 0.5)")
    p.add_argument("--train-views", type=int, default=2000, help="training dataset size")
    p.add_argument("--eval-views", type=int, default=900, help="held-out views for PCA and reconstruction")
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--threshold", type=threshold_arg, default="sweep", help="'sweep' (calibrated), 'fixed' (300) or a number")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True,
                   help="single-threaded deterministic kernels (default on)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="symlab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("generate-dataset", help="render a viewpoint dataset for one catalog object")
    p.add_argument("--object", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--radius", type=float, default=None, help="camera distance (default 2.5x bounding radius)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate_dataset)

    p = sub.add_parser("train", help="train one model from a key = value config file")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", default=None, help="override the config's dataset path")
    p.add_argument("--out", default=None, help="override the config's output directory")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="train and evaluate one model per beta")
    p.add_argument("--object", required=True)
    p.add_argument("--betas", type=float_list, required=True, help="ascending, comma separated")
    p.add_argument("--out", required=True)
    _add_training_flags(p)
    p.set_defaults(func=cmd_sweep)

    for name, func, helptext in (
        ("eval-complexity", cmd_eval_complexity, "median posterior-vs-prior KL over random pairs"),
        ("eval-symmetry", cmd_eval_symmetry, "share of pairs with posterior KL under a threshold"),
        ("pca", cmd_pca, "eigen-spectrum and 2-D projection of posterior means"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--model", required=True, help="checkpoint directory")
        p.add_argument("--dataset", required=True, help="dataset directory")
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=0)
        if name != "pca":
            p.add_argument("--pairs", type=int, default=900)
        if name == "eval-complexity":
            p.add_argument("--mean-prior", action="store_true", help="transition the posterior mean instead of a sample")
        if name == "eval-symmetry":
            p.add_argument("--threshold", default="fixed", help="number or 'fixed' (300)")
            p.add_argument("--orbit", action="store_true", help="pair each view with a symmetry image of itself")
        p.set_defaults(func=func)

    p = sub.add_parser("plan-grasp", help="rank viewpoint changes towards a goal image by expected free energy")
    p.add_argument("--model", required=True)
    p.add_argument("--current", required=True, help="current observation (PNG)")
    p.add_argument("--goal", required=True, help="goal observation (PNG)")
    p.add_argument("--current-view", type=angle_pair, default=(0.0, 0.0), help="AZ,EL of the current camera (radians)")
    p.add_argument("--goal-view", type=angle_pair, default=None, help="AZ,EL of the goal camera, for orbit metrics")
    p.add_argument("--radius", type=float, default=None, help="default: the training dataset radius")
    p.add_argument("--candidates", type=int, default=900)
    p.add_argument("--topk", type=int, default=10)
    p.add_argument("--mode", choices=["neg-log-prob", "risk-plus-ambiguity"], default="neg-log-prob")
    p.add_argument("--unit-variance", action="store_true", help="score against unit goal variances")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plan_grasp)

    p = sub.add_parser("plot", help="plots from one or more sweep.json files")
    p.add_argument("--sweep", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("reproduce-figures", help="sweeps over several objects plus the summary CSV and plots")
    p.add_argument("--objects", type=name_list, default=["cylinder", "cube"])
    p.add_argument("--betas", type=float_list, default=[0.25, 1.0, 10.0, 100.0])
    p.add_argument("--out", required=True)
    _add_training_flags(p)
    p.set_defaults(func=cmd_reproduce_figures)
    return parser


def run_command(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    args.out = resolve_out(args.out) if args.out is not None else None
    config = {k: v for k, v in vars(args).items() if k not in ("func",)}
    config = json.loads(json.dumps(config, default=str))
    m = ExperimentManifest(args.command, argv, config, getattr(args, "seed", None))
    start = time.perf_counter()
    try:
        if args.command != "generate-dataset":
            _configure_threads(getattr(args, "deterministic", None) is not False)
        args.func(args, m)
    except (FileNotFoundError, ValueError, KeyError, RuntimeError, OSError) as err:
        print(f"symlab {args.command}: error: {err}", file=sys.stderr)
        return 1
    m.duration_s = round(time.perf_counter() - start, 3)
    if args.out is not None:
        m.write(Path(args.out))
    return 0


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
