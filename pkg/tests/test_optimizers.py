import math
from dataclasses import replace

import numpy as np
import pytest

from compsvrg.core import ProblemConstants
from compsvrg.optimizers import (
    Algorithm,
    DivergenceError,
    RunConfig,
    Schedule,
    corollary1_params,
    corollary2_params,
    run,
)
from compsvrg.problems import closed_form_solution, make_mean_variance
from compsvrg.validation import measure_contraction

from conftest import identity_half_norm


def consts(**kw):
    base = dict(mu_f=1.0, L_f=1.0, L_F=1.0, L_G=1.0, B_G=1.0, B_F=1.0)
    base.update(kw)
    return ProblemConstants(**base)


# -- parameter calculators ---------------------------------------------------------

def test_corollary1_unit_constants():
    assert corollary1_params(consts()) == (1 / 32, 512, 512)


def test_corollary1_mu_two():
    gamma, A, K = corollary1_params(consts(mu_f=2.0, L_f=2.0))
    assert (gamma, A, K) == (1 / 64, 128, 512)


def test_corollary1_scaling():
    g1, A1, K1 = corollary1_params(consts(mu_f=0.5, L_f=3.0, L_F=2.0, B_G=1.5))
    g2, A2, K2 = corollary1_params(consts(mu_f=0.5, L_f=6.0, L_F=2.0, B_G=1.5))
    assert g2 == pytest.approx(g1 / 4)  # gamma = mu/(32 L_f^2)
    assert K2 == 4 * K1 and A2 == A1


def test_corollary2_unit_constants():
    assert corollary2_params(consts()) == (1 / 320, 5120, 1024, 7)


def test_corollary2_mu_two():
    gamma, K, A, B = corollary2_params(consts(mu_f=2.0))
    # 1024 B_G^4 L_F^2 / mu_f^2 = 256 dominates 32/(5 mu_f L_f) = 3.2
    assert (K, A, B) == (2560, 256, 4)


@pytest.mark.parametrize("seed", range(5))
def test_corollary2_active_branch(seed):
    rng = np.random.default_rng(seed)
    c = consts(**{k: float(rng.uniform(0.01, 5)) for k in ("mu_f", "L_f", "L_F", "B_G")})
    _, _, A, _ = corollary2_params(c)
    b1 = 1024 * c.B_G**4 * c.L_F**2 / c.mu_f**2
    b2 = 32 * c.B_G**4 * c.L_F**2 / (5 * c.mu_f * c.L_f)
    assert A == math.ceil(max(b1, b2) - 1e-9)
    assert (b1 >= b2) == (c.L_f * 160 >= c.mu_f)


def test_corollary2_affine_inner_keeps_one_jacobian_sample():
    assert corollary2_params(consts(L_G=0.0))[3] == 1


def test_calculators_reject_degenerate_constants():
    with pytest.raises(ValueError):
        corollary1_params(consts(B_G=0.0))
    with pytest.raises(ValueError):
        corollary1_params((1, 1, 1, 1, 1, 1))


# -- configuration ------------------------------------------------------------------

def test_run_config_validation():
    with pytest.raises(ValueError):
        RunConfig("csvrg2", gamma=0.1)
    with pytest.raises(ValueError):
        RunConfig("gd", gamma=0.0)
    with pytest.raises(ValueError):
        RunConfig("gd", gamma=0.1, epoch_point="middle")
    with pytest.raises(ValueError):
        RunConfig("nope", gamma=0.1)
    assert RunConfig("csvrg1", gamma=0.1, K=3, S=4).iterations == 12


# -- audits -------------------------------------------------------------------------

@pytest.mark.parametrize("alg", ["csvrg1", "csvrg2", "svrg"])
def test_epoch_query_audit(small_mv, alg):
    p, K, A, B = small_mv, 7, 3, 2
    _, trace = run(p, RunConfig(alg, gamma=1e-3, K=K, S=3, A=A, B=B, seed=2), np.zeros(p.dim_x))
    m, n = p.m, p.n
    want = {
        "csvrg1": m + (2 * m + n) + K * (2 * A + 4),
        "csvrg2": 2 * m + (2 * m + n) + K * (2 * A + 2 * B + 2),
        "svrg": (2 * m + n) + K * 2 * (2 * m + 1),
    }[alg]
    assert np.all(np.diff(trace.epoch_queries) == want)


def test_per_iteration_audits(small_mv):
    p = small_mv
    _, tr = run(p, RunConfig("gd", gamma=1e-3, K=5, S=1), np.zeros(p.dim_x))
    assert np.all(np.diff(tr.queries) == 2 * p.m + p.n)
    for alg in ("scgd", "ascgd"):
        _, tr = run(p, RunConfig(alg, gamma=1e-3, K=5, S=1), np.zeros(p.dim_x))
        assert np.all(np.diff(tr.queries) == 3)


# -- fixed points and simple dynamics ---------------------------------------------------

@pytest.mark.parametrize("alg", ["gd", "svrg", "csvrg1", "csvrg2"])
def test_fixed_point(tiny, alg):
    x_star, f_star = closed_form_solution(tiny)
    cfg = RunConfig(alg, gamma=0.05, K=5, S=3, A=tiny.m, B=tiny.m, seed=1)
    _, trace = run(tiny, cfg, x_star, x_star, f_star)
    assert np.all(np.sqrt(trace.dist_sq) <= 1e-9)


@pytest.mark.parametrize("alg", ["scgd", "ascgd"])
def test_fixed_point_compositional_sgd(alg):
    # the inner value is only exact with a single inner component and beta = 1
    p = identity_half_norm(2)
    cfg = RunConfig(alg, gamma=0.05, K=20, S=1, seed=1, schedule=Schedule(c_beta=1.0, q=0.0))
    _, trace = run(p, cfg, np.zeros(2), np.zeros(2), 0.0)
    assert np.all(np.sqrt(trace.dist_sq) <= 1e-9)


def test_gd_one_step_on_half_norm():
    p = identity_half_norm(2)
    x, _ = run(p, RunConfig("gd", gamma=1.0, K=1, S=1), np.array([3.0, 4.0]))
    np.testing.assert_allclose(x, 0.0, atol=1e-15)


def test_gd_contraction_is_exact_on_scalar_quadratic(tiny):
    x_star, f_star = closed_form_solution(tiny)
    stats = measure_contraction(tiny, RunConfig("gd", gamma=0.25, K=1, S=10), x_star, f_star,
                                seeds=1, x0=np.array([5.0]), metric="gap")
    np.testing.assert_allclose(stats.ratios, (1 - 0.25 * 2.0) ** 2, rtol=1e-9)


def test_svrg_single_component_is_gradient_descent():
    p = make_mean_variance([[1.0, 2.0]])
    # n = 1 has a singular covariance; f = -r.x is linear so the iterates can be compared exactly
    x0 = np.array([0.3, -0.1])
    xs, _ = run(p, RunConfig("svrg", gamma=0.1, K=4, S=2, seed=0, epoch_point="last_iterate"), x0)
    xg, _ = run(p, RunConfig("gd", gamma=0.1, K=8, S=1), x0)
    np.testing.assert_allclose(xs, xg, atol=1e-14)


def test_svrg_gap_decreases_per_epoch_on_average(quad):
    x_star, f_star = closed_form_solution(quad)
    curves = []
    for s in range(50):
        _, tr = run(quad, RunConfig("svrg", gamma=0.02, K=20, S=4, seed=s), np.ones(3), x_star, f_star)
        curves.append([g for g, e, it in zip(tr.gap, tr.epoch, tr.iteration) if it == 0 and e >= 1])
    mean = np.mean(curves, axis=0)
    assert np.all(np.diff(mean) < 0)


def test_scgd_full_correction_uses_exact_inner_value():
    p = make_mean_variance([[2.0]])
    cfg = RunConfig("scgd", gamma=0.1, K=1, S=1, schedule=Schedule(c_beta=1.0, q=0.0))
    x0 = np.array([1.5])
    x, _ = run(p, cfg, x0)
    y = p.inner_value(0, x0)
    np.testing.assert_allclose(x, x0 - 0.1 * p.jacobian_t_dot(0, x0, p.outer_gradient(0, y)))


def test_ascgd_first_step_matches_scgd(small_mv):
    x0 = np.ones(small_mv.dim_x)
    a, _ = run(small_mv, RunConfig("scgd", gamma=0.01, K=1, S=1, seed=3), x0)
    b, _ = run(small_mv, RunConfig("ascgd", gamma=0.01, K=1, S=1, seed=3,
                                   schedule=Schedule(q=2 / 3)), x0)
    np.testing.assert_array_equal(a, b)


def test_ascgd_without_extrapolation_is_scgd(small_mv):
    x0 = np.ones(small_mv.dim_x)
    _, a = run(small_mv, RunConfig("scgd", gamma=0.01, K=50, S=1, seed=3), x0)
    _, b = run(small_mv, RunConfig("ascgd", gamma=0.01, K=50, S=1, seed=3,
                                   schedule=Schedule(q=2 / 3, eta=1.0)), x0)
    assert a.objective == b.objective and a.queries == b.queries


def test_scgd_sublinear_slope(tiny):
    """One million iterations; log-log slope over the last decade lies in [-1, -0.4]."""
    x_star, f_star = closed_form_solution(tiny)
    cfg = RunConfig("scgd", gamma=0.25, K=10**6, S=1, seed=0, record_every=1000)
    _, tr = run(tiny, cfg, np.zeros(1), x_star, f_star)
    it = np.array(tr.iteration, dtype=float)
    sel = it >= it[-1] / 10
    slope = np.polyfit(np.log10(it[sel]), np.log10(np.array(tr.gap)[sel]), 1)[0]
    assert -1.0 <= slope <= -0.4


# -- control flow ----------------------------------------------------------------------

def test_runs_are_deterministic(small_mv):
    x_star, f_star = closed_form_solution(small_mv)
    cfg = RunConfig("csvrg2", gamma=0.01, K=10, S=3, A=2, B=2, seed=9)
    _, a = run(small_mv, cfg, np.zeros(small_mv.dim_x), x_star, f_star)
    _, b = run(small_mv, cfg, np.zeros(small_mv.dim_x), x_star, f_star)
    assert a.gap == b.gap and a.queries == b.queries
    _, c = run(small_mv, replace(cfg, seed=10), np.zeros(small_mv.dim_x), x_star, f_star)
    assert a.gap != c.gap


def test_divergence_carries_partial_trace(small_mv):
    cfg = RunConfig("csvrg1", gamma=1e3, K=50, S=50, A=1, seed=0)
    with pytest.raises(DivergenceError) as err:
        run(small_mv, cfg, np.ones(small_mv.dim_x))
    tr = err.value.trace
    assert tr.stop_reason == "diverged" and len(tr) > 1


@pytest.mark.parametrize("alg", list(Algorithm))
def test_budget_stops_within_one_iteration(small_mv, alg):
    p, budget = small_mv, 1000
    cfg = RunConfig(alg, gamma=1e-3, K=10, S=10**6, A=2, B=1, seed=0, max_queries=budget)
    _, tr = run(p, cfg, np.zeros(p.dim_x))
    step = {"gd": 2 * p.m + p.n, "svrg": 2 * (2 * p.m + 1) + 2 * p.m + p.n,
            "csvrg1": 3 * p.m + p.n + 8, "csvrg2": 4 * p.m + p.n + 8}.get(alg.value, 3)
    assert tr.stop_reason == "budget"
    assert budget <= tr.queries[-1] < budget + step
    assert all(b > a for a, b in zip(tr.queries, tr.queries[1:]))


def test_random_epoch_point_is_uniform_over_first_k_iterates(tiny):
    K, counts = 4, np.zeros(5, dtype=int)
    x_star, f_star = closed_form_solution(tiny)
    for seed in range(400):
        _, tr = run(tiny, RunConfig("csvrg1", gamma=0.05, K=K, S=1, A=1, seed=seed),
                    np.array([3.0]), x_star, f_star)
        d = float((tr.epoch_points[1][0] - x_star[0]) ** 2)
        iterate_d = tr.dist_sq[1:]  # epoch boundary record, then iterates 1..K
        counts[int(np.argmin(np.abs(np.array(iterate_d) - d)))] += 1
    assert counts[K] == 0
    assert np.all(np.abs(counts[:K] - 100) <= 3 * np.sqrt(400 * 0.25 * 0.75))


def test_warm_start_runs_scgd_first(small_mv):
    cfg = RunConfig("csvrg1", gamma=1e-3, K=5, S=2, A=2, seed=0, warm_start_iters=100)
    _, tr = run(small_mv, cfg, np.zeros(small_mv.dim_x))
    assert tr.metadata["warm_start_iters"] == 100
    assert tr.epoch_queries[0] == 300
