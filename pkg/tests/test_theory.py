import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import pareto_ref, tv_equal_variance
from vca.core_math import SeededRng, spectral_norm
from vca.errors import ConfigError, DegenerateInputError
from vca.rewards import RewardSchedule, weights_at
from vca.theory import (
    CandidateSet,
    ConvergenceConfig,
    _sim_denoiser,
    equal_weight_probe,
    gaussian_tv_1d,
    pareto_front,
    random_candidates,
    run_convergence,
    scalarization_argmax,
    tv_between_rounds,
    weight_path_scan,
)

FOUR = [(1, 0, 0), (0, 1, 0), (0, 0, 1), (0.4, 0.4, 0.4)]


def test_tv_anchors():
    assert gaussian_tv_1d(0.3, 1.2, 0.3, 1.2) == 0.0
    assert gaussian_tv_1d(0, 1, 1, 1) == pytest.approx(0.38292, abs=1e-4)
    assert gaussian_tv_1d(0, 1, 1, 1) == pytest.approx(0.3829249225480262, abs=1e-8)
    assert gaussian_tv_1d(0, 1, 100, 1) == pytest.approx(1.0, abs=1e-8)
    with pytest.raises(ValueError):
        gaussian_tv_1d(0, 0, 1, 1)


def test_tv_matches_equal_variance_closed_form():
    rng = SeededRng(0)
    for _ in range(100):
        mu1, mu2 = rng.uniform(-5, 5, size=2)
        s = float(rng.uniform(0.05, 5))
        assert abs(gaussian_tv_1d(mu1, s, mu2, s) - tv_equal_variance(mu1, mu2, s)) <= 1e-6


@given(st.floats(-10, 10), st.floats(0.05, 10), st.floats(-10, 10), st.floats(0.05, 10))
def test_tv_symmetric_and_bounded(m1, s1, m2, s2):
    a = gaussian_tv_1d(m1, s1, m2, s2)
    assert 0.0 <= a <= 1.0
    assert a == pytest.approx(gaussian_tv_1d(m2, s2, m1, s1), abs=1e-8)


def test_tv_unequal_variance_against_crossing_formula():
    # N(0,1) vs N(0,2): densities cross at +-x0, TV = 2 (Phi(x0) - Phi(x0 / 2))
    x0 = math.sqrt(8 * math.log(2) / 3)
    phi = lambda x: 0.5 * (1 + math.erf(x / math.sqrt(2)))
    assert gaussian_tv_1d(0, 1, 0, 2) == pytest.approx(2 * (phi(x0) - phi(x0 / 2)), abs=1e-8)


def test_tv_between_rounds_markers_and_stationary():
    laws = [([0.0, 1.0], [1.0, 2.0])] * 5
    assert tv_between_rounds(laws) == [None, 0.0, 0.0, 0.0, 0.0]
    laws = [([0.0], [1.0]), ([0.0], [0.0]), ([1.0], [1.0])]
    assert tv_between_rounds(laws) == [None, None, None]


def test_pareto_examples():
    assert pareto_front(FOUR) == [0, 1, 2, 3]
    assert pareto_front([(1, 1, 1), (0, 0, 0)]) == [0]
    assert pareto_front([(1, 2, 3), (1, 2, 3), (0, 0, 0)]) == [0, 1]
    assert scalarization_argmax(FOUR, (1, 1, 1)) == 3
    assert np.asarray(FOUR[3]) @ np.ones(3) == pytest.approx(1.2)
    assert scalarization_argmax([(5, -1, 2)], (0.1, 2, 3)) == 0
    assert scalarization_argmax([(1, 1, 1), (1, 1, 1)], (1, 2, 3)) == 0
    with pytest.raises(ValueError):
        scalarization_argmax(FOUR, (1, 0, 1))
    with pytest.raises(DegenerateInputError):
        pareto_front(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        CandidateSet([(1, 2, float("nan"))])


def test_scalarization_fuzz_against_brute_force():
    rng = SeededRng(1)
    for _ in range(1000):
        n = int(rng.integers(1, 50))
        pts = random_candidates(rng, n)
        w = rng.uniform(1e-3, 1.0, size=3)
        front = pareto_ref(pts.tolist())
        assert pareto_front(pts) == front
        assert scalarization_argmax(pts, w) in front


def test_weight_path_switches_at_crossing():
    cands = [(1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.2, 0.2, 0.2)]
    grid = np.round(np.arange(0, 20.0001, 0.01), 10)
    path, changes = weight_path_scan(RewardSchedule(), cands, grid)
    assert path[0].index == 0 and not path[0].weights_positive
    assert all(p.weights_positive for p in path[1:])
    assert all(p.on_front for p in path)
    assert changes == [pytest.approx(5.63)]
    assert path[-1].index == 1
    # single Pareto point: constant path
    path, changes = weight_path_scan(RewardSchedule(), [(1, 1, 1), (0, 0.5, 1)], grid)
    assert changes == [] and {p.index for p in path} == {0}


def test_equal_weight_probe_defaults():
    probe = equal_weight_probe(RewardSchedule())
    assert probe.t0 is None
    assert probe.crossings["div=mi"] == pytest.approx(math.log(2) / 0.075, abs=1e-9)
    assert abs(probe.crossings["div=mi"] - 9.242) < 1e-3
    assert weights_at(RewardSchedule(), probe.crossings["div=mi"])[1] == pytest.approx(0.60315, abs=1e-5)
    assert probe.crossings["div=cons"] == pytest.approx(5.6239914864592, abs=1e-9)
    assert probe.residual > 0.1


def test_equal_weight_probe_finds_constructed_coincidence():
    # all three weights equal 0.4 at t = 1
    s = RewardSchedule(-math.log(0.4), -math.log(0.6), -math.log(0.8))
    probe = equal_weight_probe(s)
    assert probe.t0 == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(weights_at(s, 1.0), (0.4, 0.4, 0.4), atol=1e-15)


def test_convergence_defaults():
    rep = run_convergence(ConvergenceConfig(), SeededRng(0))
    assert rep.rounds == 200 and not rep.violation_run
    assert all(rep.assumptions.values())
    assert rep.mean_error[-1] < 1e-3 and rep.w2[-1] < 2e-3
    assert rep.passes()
    for e, s, w in zip(rep.mean_error, rep.sigma, rep.w2):
        assert w == pytest.approx(math.sqrt(e * e + 8 * s * s), rel=1e-15)
    tv = [x for x in rep.tv_successive if x is not None]
    assert all(0 <= x <= 1 for x in tv) and tv[-1] < 0.01
    assert rep.eventually_monotone()


def error_bound(cfg, rng_seed):
    """Closed-form bound on the trial-mean error, from the triangle inequality and Jensen.

    e_t <= beta (e_{t-1} + sigma_{t-1} sqrt(d)) + |C| alpha^t gap, with
    e_0 = E|z_0 - z*| <= sqrt(d + |z*|^2) for z_0 ~ N(0, I).
    """
    rng = SeededRng(rng_seed)
    den = _sim_denoiser(cfg, rng.child("denoiser"))
    psi_star = rng.child("psi_star").normal(cfg.m)
    z_star = den.fixed_point(psi_star)
    c_norm = spectral_norm(den.prompt_block)
    e = math.sqrt(cfg.d + float(z_star @ z_star))
    prev_sigma = 0.0
    out = []
    for t in range(1, cfg.rounds + 1):
        e = cfg.beta_dm * (e + prev_sigma * math.sqrt(cfg.d)) + c_norm * cfg.alpha_p**t * cfg.prompt_gap
        out.append(e)
        prev_sigma = cfg.sigma0 * t ** (-cfg.p)
    return out


def test_convergence_within_recursion_bound():
    cfg = ConvergenceConfig(rounds=60)
    rep = run_convergence(cfg, SeededRng(4))
    bound = error_bound(cfg, 4)
    # Monte Carlo slack on the realised noise norms
    assert all(e <= 1.25 * b for e, b in zip(rep.mean_error, bound))
    assert rep.mean_error[-1] < 0.1 * rep.mean_error[0]


def test_pure_contraction_ratio():
    # 20 rounds keeps the error well above the roundoff floor of z*
    rep = run_convergence(ConvergenceConfig(sigma0=0.0, prompt_gap=0.0, rounds=20), SeededRng(2))
    ratios = [b / a for a, b in zip(rep.mean_error, rep.mean_error[1:])]
    assert all(abs(r - 0.5) < 1e-9 for r in ratios)
    assert rep.sigma == [0.0] * 20


@pytest.mark.parametrize("override,name", [
    ({"beta_dm": 1.05}, "contraction"),
    ({"alpha_p": 1.0}, "prompt convergence"),
    ({"p": 0.5}, "noise decay"),
])
def test_violation_runs_fail(override, name):
    with pytest.raises(ConfigError, match=name):
        ConvergenceConfig(**override).check()
    rep = run_convergence(ConvergenceConfig(allow_violation=True, **override), SeededRng(0))
    assert rep.violation_run
    assert not rep.passes()
    assert not all(rep.assumptions.values())
    if "beta_dm" in override:
        assert rep.mean_error[-1] > rep.mean_error[0]
