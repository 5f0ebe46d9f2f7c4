"""Expected-free-energy action selection over sampled viewpoint changes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import torch
from numpy.typing import NDArray

from symlab.analysis import circular_resultant, encode_images
from symlab.geometry import (
    Action,
    Pose,
    geodesic_distance,
    relative_action,
    relative_action_vectors,
    viewpoint_from_spherical,
)
from symlab.model import GaussianBelief, GenerativeModel, kl_divergence
from symlab.renderer import DEFAULT_ELEVATION_BAND, Dataset, ObjectSpec, SymmetryKind, render, sample_spherical

LOG_2PI = math.log(2 * math.pi)


class ScoringMode(str, Enum):
    NEG_LOG_PROB = "neg-log-prob"
    RISK_PLUS_AMBIGUITY = "risk-plus-ambiguity"


@dataclass
class PlannerConfig:
    candidates: int = 900
    top_k: int = 10
    gamma: float = 1.0
    mode: ScoringMode = ScoringMode.NEG_LOG_PROB
    unit_variance: bool = False
    elevation_band: tuple[float, float] = DEFAULT_ELEVATION_BAND

    def __post_init__(self) -> None:
        self.mode = ScoringMode(self.mode)
        if not self.candidates >= self.top_k >= 1:
            raise ValueError("need candidates >= top_k >= 1")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")


@dataclass
class RankedAction:
    action: Action
    pose: Pose
    score: float


@dataclass
class PlanResult:
    ranked: list[RankedAction]
    mode: ScoringMode
    goal_pose: Pose | None = None
    current_pose: Pose | None = None
    all_scores: NDArray[np.float64] = field(default_factory=lambda: np.empty(0))
    candidate_poses: list[Pose] = field(default_factory=list)

    @property
    def scores(self) -> list[float]:
        return [r.score for r in self.ranked]

    @property
    def poses(self) -> list[Pose]:
        return [r.pose for r in self.ranked]

    def to_dict(self) -> dict:
        def pose(p: Pose | None):
            return None if p is None else p.matrix().tolist()

        return {
            "mode": self.mode.value,
            "goal_pose": pose(self.goal_pose),
            "current_pose": pose(self.current_pose),
            "ranked": [
                {"score": r.score, "action": r.action.vector().tolist(), "pose": pose(r.pose)} for r in self.ranked
            ],
        }


def sample_candidate_actions(
    current: Pose,
    n: int,
    radius: float,
    rng: np.random.Generator,
    target=(0.0, 0.0, 0.0),
    elevation_band: tuple[float, float] = DEFAULT_ELEVATION_BAND,
) -> list[tuple[Action, Pose]]:
    """``n`` random target viewpoints on the viewing sphere and the actions reaching them."""
    if n < 1:
        raise ValueError("n must be at least 1")
    out = []
    for c in sample_spherical(rng, n, radius, elevation_band):
        pose = viewpoint_from_spherical(c, target)
        out.append((relative_action(current, pose), pose))
    return out


def neg_log_prob(point: torch.Tensor, goal: GaussianBelief, unit_variance: bool = False) -> torch.Tensor:
    """-log N(point; goal.mean, goal.var) summed over latent dimensions."""
    logvar = torch.zeros_like(goal.logvar) if unit_variance else goal.logvar
    return 0.5 * torch.sum(LOG_2PI + logvar + (point - goal.mean) ** 2 * torch.exp(-logvar), dim=-1)


def ambiguity_constant(model: GenerativeModel) -> float:
    """Expected likelihood entropy; constant under the fixed-variance Gaussian
    likelihood (variance 1/2 per pixel) implied by the squared-error accuracy."""
    n = 3 * model.resolution**2
    return 0.5 * n * math.log(math.pi * math.e)


@torch.no_grad()
def efe_scores(
    model: GenerativeModel,
    current: GaussianBelief,
    actions: NDArray[np.float64],
    goal: GaussianBelief,
    mode: ScoringMode | str = ScoringMode.NEG_LOG_PROB,
    unit_variance: bool = False,
) -> NDArray[np.float64]:
    """Expected free energy of each action (lower is better).

    The current belief is propagated through its mean.
    """
    mode = ScoringMode(mode)
    acts = torch.as_tensor(np.atleast_2d(actions), dtype=current.mean.dtype)
    s = current.mean.reshape(1, -1).expand(len(acts), -1)
    trans = model.transition(s, acts)
    goal_b = GaussianBelief(goal.mean.reshape(1, -1), goal.logvar.reshape(1, -1))
    if mode is ScoringMode.NEG_LOG_PROB:
        out = neg_log_prob(trans.mean, goal_b, unit_variance)
    else:
        out = kl_divergence(trans, goal_b) + ambiguity_constant(model)
    return out.double().numpy()


def efe_score(
    model: GenerativeModel,
    current: GaussianBelief,
    action: Action,
    goal: GaussianBelief,
    mode: ScoringMode | str = ScoringMode.NEG_LOG_PROB,
    unit_variance: bool = False,
) -> float:
    return float(efe_scores(model, current, action.vector()[None], goal, mode, unit_variance)[0])


def top_k_indices(scores: NDArray[np.float64], k: int) -> NDArray[np.int64]:
    """Indices of the ``k`` smallest scores, ascending (stable on ties)."""
    scores = np.asarray(scores)
    k = min(k, len(scores))
    kth = np.partition(scores, k - 1)[k - 1]
    below = np.flatnonzero(scores < kth)
    tied = np.flatnonzero(scores == kth)[: k - len(below)]
    part = np.concatenate([below, tied])
    return part[np.lexsort((part, scores[part]))]


def plan(
    model: GenerativeModel,
    o_current,
    current_pose: Pose,
    o_goal,
    cfg: PlannerConfig,
    rng: np.random.Generator,
    radius: float,
    goal_pose: Pose | None = None,
    target=(0.0, 0.0, 0.0),
) -> PlanResult:
    """Rank ``cfg.candidates`` random viewpoint changes by expected free energy
    against the posterior of the goal observation; keep the ``cfg.top_k`` best."""
    beliefs = encode_images(model, [o_current, o_goal])
    current, goal = beliefs[0], beliefs[1]
    cands = sample_candidate_actions(current_pose, cfg.candidates, radius, rng, target, cfg.elevation_band)
    poses = [p for _, p in cands]
    mats = np.stack([p.matrix() for p in poses])
    vecs = relative_action_vectors(np.repeat(current_pose.matrix()[None], len(poses), axis=0), mats)
    scores = efe_scores(model, current, vecs, goal, cfg.mode, cfg.unit_variance)
    idx = top_k_indices(scores, cfg.top_k)
    ranked = [RankedAction(cands[i][0], cands[i][1], float(scores[i])) for i in idx]
    return PlanResult(ranked, cfg.mode, goal_pose, current_pose, scores, poses)


def softmax_probabilities(scores: NDArray[np.float64], gamma: float) -> NDArray[np.float64]:
    """P(a) = softmax(-gamma * G(a))."""
    s = np.asarray(scores, dtype=np.float64)
    if gamma < 0 or not np.all(np.isfinite(s)):
        raise ValueError("gamma must be >= 0 and scores finite")
    z = -gamma * (s - s.min())
    w = np.exp(z - z.max())
    return w / w.sum()


def sample_action_softmax(scores: NDArray[np.float64], gamma: float, rng: np.random.Generator) -> int:
    return int(rng.choice(len(scores), p=softmax_probabilities(scores, gamma)))


@dataclass
class OrbitSpread:
    mean_orbit_distance: float
    axial_spread: float
    distances: list[float]


def _axis_basis(axis) -> NDArray[np.float64]:
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    helper = np.array([1.0, 0.0, 0.0]) if abs(k[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(helper, k)
    e1 /= np.linalg.norm(e1)
    return np.stack([e1, np.cross(k, e1), k], axis=1)


def distance_to_orbit(pose: Pose, goal: Pose, obj: ObjectSpec) -> float:
    """Smallest rotation angle between ``pose`` and any symmetry image of ``goal``."""
    sym = obj.symmetry
    if sym.kind is SymmetryKind.TRIVIAL:
        return geodesic_distance(pose.rotation, goal.rotation)
    if sym.kind is SymmetryKind.DISCRETE_CYCLIC:
        return min(
            geodesic_distance(pose.rotation, sym.element(2 * math.pi * k / sym.order).rotation @ goal.rotation)
            for k in range(sym.order)
        )
    # max over theta of trace(Rz(theta) M), M = R_goal R_pose^T in the axis frame
    B = _axis_basis(sym.axis)
    M = B.T @ goal.rotation @ pose.rotation.T @ B
    best = math.hypot(M[0, 0] + M[1, 1], M[0, 1] - M[1, 0]) + M[2, 2]
    return float(math.acos(max(-1.0, min(1.0, (best - 1.0) / 2.0))))


def axial_angles(poses: list[Pose], axis=(0.0, 0.0, 1.0), target=(0.0, 0.0, 0.0)) -> NDArray[np.float64]:
    B = _axis_basis(axis)
    local = (np.stack([p.translation for p in poses]) - np.asarray(target)) @ B
    return np.arctan2(local[:, 1], local[:, 0])


def orbit_spread(result: PlanResult | list[Pose], obj: ObjectSpec, goal: Pose) -> OrbitSpread:
    """(i) mean distance of selected poses to the goal's symmetry orbit;
    (ii) axial coverage 1 - R, R the mean resultant length of the poses' angles
    about the symmetry axis (0 = all coincide, near 1 = spread around the axis)."""
    poses = result.poses if isinstance(result, PlanResult) else list(result)
    d = [distance_to_orbit(p, goal, obj) for p in poses]
    spread = 1.0 - circular_resultant(axial_angles(poses, obj.symmetry.axis))
    return OrbitSpread(float(np.mean(d)), float(spread), d)


@dataclass
class GraspEvaluation:
    mean_orbit_distance: float
    mean_axial_spread: float
    selection_correct: bool
    trials: list[dict]


def evaluate_grasp_generalization(
    model: GenerativeModel,
    ds: Dataset,
    cfg: PlannerConfig,
    trials: int = 20,
    seed: int = 0,
) -> GraspEvaluation:
    """Plan from random current views to random goal views of ``ds.object``;
    average the orbit distance and axial spread of the selected poses."""
    rng = np.random.default_rng(seed)
    obj = ds.object
    rows = []
    correct = True
    for _ in range(trials):
        i, j = rng.choice(len(ds), size=2, replace=False)
        cur, goal = ds.records[int(i)], ds.records[int(j)]
        res = plan(model, cur.observation, cur.viewpoint, goal.observation, cfg, rng, ds.radius, goal.viewpoint)
        oracle = np.sort(res.all_scores)[: cfg.top_k]
        correct &= bool(np.array_equal(np.asarray(res.scores), oracle))
        sp = orbit_spread(res, obj, goal.viewpoint)
        rows.append({"current": int(i), "goal": int(j), "orbit_distance": sp.mean_orbit_distance, "axial_spread": sp.axial_spread})
    return GraspEvaluation(
        float(np.mean([r["orbit_distance"] for r in rows])),
        float(np.mean([r["axial_spread"] for r in rows])),
        correct,
        rows,
    )


def render_goal(obj: ObjectSpec, pose: Pose, resolution: int):
    return render(obj, pose, resolution, resolution).quantized()
