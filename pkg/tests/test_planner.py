import math

import numpy as np
import pytest
import torch
from scipy import stats

from symlab.geometry import (
    Pose,
    SphericalCoord,
    apply_action,
    compose,
    geodesic_distance,
    random_rotation,
    rotation_about_axis,
    spherical_from_position,
    viewpoint_from_spherical,
)
from symlab.model import GaussianBelief, GenerativeModel
from symlab.planner import (
    LOG_2PI,
    PlannerConfig,
    ScoringMode,
    ambiguity_constant,
    distance_to_orbit,
    efe_score,
    efe_scores,
    evaluate_grasp_generalization,
    neg_log_prob,
    orbit_spread,
    plan,
    sample_action_softmax,
    sample_candidate_actions,
    softmax_probabilities,
    top_k_indices,
)
from symlab.renderer import generate_dataset, get_object, render


def cam(az, el, r=2.0):
    return viewpoint_from_spherical(SphericalCoord(az, el, r))


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return GenerativeModel(latent_dim=4, resolution=16, channels=(4, 4, 8, 8), hidden=16, transition_hidden=8).eval()


class FixedTransition:
    """Stand-in model whose transition returns a chosen belief."""

    resolution = 16

    def __init__(self, means, logvar):
        self.means = torch.as_tensor(means, dtype=torch.float32)
        self.logvar = torch.as_tensor(logvar, dtype=torch.float32)

    def transition(self, s, a):
        return GaussianBelief(self.means, self.logvar.expand_as(self.means))


def test_config_validation():
    with pytest.raises(ValueError):
        PlannerConfig(candidates=5, top_k=10)
    with pytest.raises(ValueError):
        PlannerConfig(top_k=0)
    with pytest.raises(ValueError):
        PlannerConfig(mode="greedy")
    assert PlannerConfig(mode="risk-plus-ambiguity").mode is ScoringMode.RISK_PLUS_AMBIGUITY


def test_candidates_reach_targets_and_are_reproducible():
    cur = cam(0.3, 0.2)
    cands = sample_candidate_actions(cur, 50, 2.0, np.random.default_rng(3))
    for a, p in cands:
        assert apply_action(cur, a).allclose(p, atol=1e-5)
        assert abs(np.linalg.norm(p.translation) - 2.0) < 1e-9
    again = sample_candidate_actions(cur, 50, 2.0, np.random.default_rng(3))
    assert all(p.allclose(q, atol=0) for (_, p), (_, q) in zip(cands, again))
    with pytest.raises(ValueError):
        sample_candidate_actions(cur, 0, 2.0, np.random.default_rng(0))


def test_candidate_azimuth_uniform_chi2():
    cands = sample_candidate_actions(cam(0, 0), 900, 2.0, np.random.default_rng(11))
    az = [spherical_from_position(p.translation).azimuth for _, p in cands]
    counts, _ = np.histogram(az, bins=12, range=(0, 2 * math.pi))
    assert stats.chisquare(counts).pvalue > 0.01


def test_neg_log_prob_closed_form():
    D = 16
    goal = GaussianBelief(torch.randn(D), torch.zeros(D))
    assert float(neg_log_prob(goal.mean, goal)) == pytest.approx(D / 2 * LOG_2PI, rel=1e-6)
    goal_v = GaussianBelief(goal.mean, torch.full((D,), 1.5))
    assert float(neg_log_prob(goal.mean, goal_v, unit_variance=True)) == pytest.approx(D / 2 * LOG_2PI, rel=1e-6)


def test_neg_log_prob_grows_away_from_goal():
    goal = GaussianBelief(torch.zeros(3), torch.tensor([0.0, 1.0, -1.0]))
    for axis in range(3):
        prev = -math.inf
        for t in np.linspace(0, 3, 7):
            x = torch.zeros(3)
            x[axis] = float(t)
            v = float(neg_log_prob(x, goal))
            assert v > prev
            prev = v


def test_efe_scores_modes():
    goal = GaussianBelief(torch.tensor([0.5, -0.5]), torch.tensor([0.2, -0.3]))
    stub = FixedTransition([[0.5, -0.5], [1.5, -0.5]], [0.2, -0.3])
    cur = GaussianBelief(torch.zeros(2), torch.zeros(2))
    acts = np.zeros((2, 9))
    risk = efe_scores(stub, cur, acts, goal, "risk-plus-ambiguity")
    assert risk[0] == pytest.approx(ambiguity_constant(stub), abs=1e-3)  # risk term is 0
    assert risk[1] > risk[0]
    nlp = efe_scores(stub, cur, acts, goal)
    assert nlp[0] < nlp[1]
    assert ambiguity_constant(stub) == pytest.approx(0.5 * 3 * 16 * 16 * math.log(math.pi * math.e))


def test_efe_score_scalar_matches_batch(model):
    cur = GaussianBelief(torch.randn(4), torch.zeros(4))
    goal = GaussianBelief(torch.randn(4), torch.full((4,), -0.5))
    cands = sample_candidate_actions(cam(0, 0), 5, 2.0, np.random.default_rng(0))
    vecs = np.stack([a.vector() for a, _ in cands])
    batch = efe_scores(model, cur, vecs, goal)
    for k, (a, _) in enumerate(cands):
        assert efe_score(model, cur, a, goal) == pytest.approx(batch[k], rel=1e-5)


def test_top_k_matches_full_sort():
    rng = np.random.default_rng(0)
    for _ in range(50):
        s = rng.integers(0, 20, size=rng.integers(1, 60)).astype(float)
        k = int(rng.integers(1, len(s) + 1))
        idx = top_k_indices(s, k)
        assert np.array_equal(s[idx], np.sort(s)[:k])
        assert np.array_equal(idx, np.argsort(s, kind="stable")[:k])


def test_plan_selection_and_determinism(model):
    obj = get_object("cylinder")
    r = obj.default_radius()
    cur, goal = cam(0.2, 0.1, r), cam(2.0, -0.3, r)
    o_cur, o_goal = render(obj, cur, 16, 16).quantized(), render(obj, goal, 16, 16).quantized()
    cfg = PlannerConfig(candidates=120, top_k=10)
    res = plan(model, o_cur, cur, o_goal, cfg, np.random.default_rng(4), r, goal)
    assert len(res.ranked) == 10 and len(res.all_scores) == 120
    assert res.scores == sorted(res.scores)
    assert np.array_equal(np.asarray(res.scores), np.sort(res.all_scores)[:10])
    again = plan(model, o_cur, cur, o_goal, cfg, np.random.default_rng(4), r, goal)
    assert again.scores == res.scores
    d = res.to_dict()
    assert d["mode"] == "neg-log-prob" and len(d["ranked"]) == 10


def test_softmax_uniform_at_zero_gamma():
    rng = np.random.default_rng(0)
    scores = np.array([1.0, 5.0, -2.0, 0.3])
    draws = np.bincount([sample_action_softmax(scores, 0.0, rng) for _ in range(100_000)], minlength=4)
    p = 0.25
    sigma = math.sqrt(100_000 * p * (1 - p))
    assert np.all(np.abs(draws - 100_000 * p) < 3 * sigma)


def test_softmax_limits_and_shift_invariance():
    scores = np.array([3.0, 1.0, 2.0])
    rng = np.random.default_rng(1)
    picks = [sample_action_softmax(scores, 1e4, rng) for _ in range(5000)]
    assert np.mean(np.asarray(picks) == 1) > 0.999
    assert np.allclose(softmax_probabilities(scores, 0.7), softmax_probabilities(scores + 123.0, 0.7))
    with pytest.raises(ValueError):
        softmax_probabilities(np.array([1.0, np.inf]), 1.0)
    with pytest.raises(ValueError):
        softmax_probabilities(scores, -1.0)


def test_distance_to_orbit_continuous_matches_grid():
    obj = get_object("cylinder")
    rng = np.random.default_rng(0)
    thetas = np.linspace(0, 2 * math.pi, 4000, endpoint=False)
    for _ in range(20):
        p = Pose(random_rotation(rng), np.zeros(3))
        g = Pose(random_rotation(rng), np.zeros(3))
        grid = min(geodesic_distance(p.rotation, rotation_about_axis([0, 0, 1], t) @ g.rotation) for t in thetas)
        assert distance_to_orbit(p, g, obj) == pytest.approx(grid, abs=2e-3)


def test_distance_to_orbit_members_are_zero():
    g = cam(0.4, 0.3)
    cyl = get_object("cylinder")
    for t in (0.5, 2.0, 4.0):
        moved = compose(Pose(rotation_about_axis([0, 0, 1], t), np.zeros(3)), g)
        assert distance_to_orbit(moved, g, cyl) < 1e-6
    c4 = get_object("cube_c4")
    (gen,) = c4.symmetry.generators
    assert distance_to_orbit(compose(gen, g), g, c4) < 1e-6
    cube = get_object("cube")
    assert distance_to_orbit(compose(gen, g), g, cube) == pytest.approx(math.pi / 2, abs=1e-6)


def test_orbit_spread_constructed():
    obj = get_object("cylinder")
    g = cam(1.0, 0.2)
    same = orbit_spread([g] * 10, obj, g)
    assert same.mean_orbit_distance < 1e-6 and same.axial_spread < 1e-9
    ring = [cam(a, 0.2) for a in np.linspace(0, 2 * math.pi, 10, endpoint=False)]
    wide = orbit_spread(ring, obj, g)
    assert wide.axial_spread == pytest.approx(1.0, abs=1e-9)
    assert wide.mean_orbit_distance < 1e-6


def test_evaluate_grasp_generalization_runs(model):
    ds = generate_dataset(get_object("cylinder"), 20, seed=0, width=16)
    ev = evaluate_grasp_generalization(model, ds, PlannerConfig(candidates=60, top_k=10), trials=3, seed=1)
    assert ev.selection_correct and len(ev.trials) == 3
    assert 0 <= ev.mean_axial_spread <= 1 and ev.mean_orbit_distance >= 0
