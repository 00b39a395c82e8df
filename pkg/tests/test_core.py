import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from compsvrg.core import (
    ContractViolation,
    DiscardLedger,
    ProblemConstants,
    QueryLedger,
    component_gradient,
    full_gradient,
    full_inner,
    full_jacobian,
    objective,
)
from compsvrg.problems import FunctionalProblem, make_mean_variance
from compsvrg.validation import finite_diff_gradient

from conftest import identity_half_norm


def test_ledger_counts_and_rejects_negative():
    led = QueryLedger()
    led.charge(3)
    led.charge(0)
    assert led.count == 3
    with pytest.raises(ValueError):
        led.charge(-1)
    with pytest.raises(ValueError):
        QueryLedger(-2)


def test_discard_ledger_ignores_charges():
    led = DiscardLedger()
    led.charge(10)
    assert led.count == 0


def test_full_inner_identity_single_component():
    p = identity_half_norm(2)
    led = QueryLedger()
    np.testing.assert_array_equal(full_inner(p, [1.0, 2.0], led), [1.0, 2.0])
    assert led.count == 1


def test_full_inner_averages_components():
    p = FunctionalProblem([lambda x: x, lambda x: 2 * x], [lambda x: np.eye(1)] * 2,
                          [lambda y: 0.0], [lambda y: np.zeros(1)], 1, 1)
    led = QueryLedger()
    np.testing.assert_allclose(full_inner(p, [1.0], led), [1.5])
    assert led.count == 2


def test_mean_variance_inner_value(tiny):
    np.testing.assert_allclose(full_inner(tiny, [2.0], QueryLedger()), [2.0, 4.0])


def test_full_gradient_identity():
    p = identity_half_norm(2)
    led = QueryLedger()
    np.testing.assert_allclose(full_gradient(p, [3.0, 4.0], led), [3.0, 4.0])
    assert led.count == 2 * p.m + p.n


def test_full_gradient_mean_variance_at_zero(tiny):
    np.testing.assert_allclose(full_gradient(tiny, [0.0], QueryLedger()), [-2.0])


@pytest.mark.parametrize("seed", range(10))
def test_full_gradient_matches_finite_differences(small_mv, seed):
    x = np.random.default_rng(seed).standard_normal(small_mv.dim_x)
    g = full_gradient(small_mv, x, QueryLedger())
    fd = finite_diff_gradient(small_mv, x, 1e-5)
    assert np.linalg.norm(g - fd) <= 1e-6 * np.linalg.norm(fd)


def test_objective_examples(tiny):
    assert objective(identity_half_norm(2), [0.0, 0.0], QueryLedger()) == 0.0
    one = make_mean_variance([[1.0]])
    assert objective(one, [2.0], QueryLedger()) == pytest.approx(-2.0)
    led = QueryLedger()
    assert objective(tiny, [0.5], led) == pytest.approx(-2 * 0.5 + 0.25)
    assert led.count == tiny.m + tiny.n


def test_jacobian_and_component_costs(small_mv):
    led = QueryLedger()
    full_jacobian(small_mv, np.zeros(small_mv.dim_x), led)
    assert led.count == small_mv.m
    component_gradient(small_mv, 0, np.zeros(small_mv.dim_x), led)
    assert led.count == small_mv.m + 2 * small_mv.m + 1


def test_component_gradients_average_to_full_gradient(small_mv):
    x = np.linspace(-1, 1, small_mv.dim_x)
    comps = [component_gradient(small_mv, i, x, DiscardLedger()) for i in range(small_mv.n)]
    np.testing.assert_allclose(np.mean(comps, axis=0), full_gradient(small_mv, x, DiscardLedger()),
                               atol=1e-13)


def test_contract_violations(tiny):
    with pytest.raises(ContractViolation):
        full_gradient(tiny, [1.0, 2.0], QueryLedger())
    with pytest.raises(ContractViolation):
        component_gradient(tiny, 2, [1.0], QueryLedger())
    with pytest.raises(ContractViolation):
        component_gradient(tiny, -1, [1.0], QueryLedger())


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from(["inner", "jac", "grad", "obj"]), max_size=12))
def test_query_exactness(calls):
    p = make_mean_variance([[1.0, 0.5], [3.0, 1.0], [2.0, 2.0]])
    led = QueryLedger()
    cost = {"inner": p.m, "jac": p.m, "grad": 2 * p.m + p.n, "obj": p.m + p.n}
    fn = {"inner": full_inner, "jac": full_jacobian, "grad": full_gradient, "obj": objective}
    for c in calls:
        fn[c](p, np.ones(2), led)
    assert led.count == sum(cost[c] for c in calls)


def test_problem_constants_validation():
    c = ProblemConstants(mu_f=1, L_f=4, L_F=1, L_G=0, B_G=1, B_F=0)
    assert c.kappa == 4
    with pytest.raises(ValueError):
        ProblemConstants(mu_f=0, L_f=1, L_F=1, L_G=1, B_G=1, B_F=1)
    with pytest.raises(ValueError):
        ProblemConstants(mu_f=1, L_f=1, L_F=-1, L_G=1, B_G=1, B_F=1)
    with pytest.raises(ValueError):
        ProblemConstants(mu_f=1, L_f=float("inf"), L_F=1, L_G=1, B_G=1, B_F=1)
