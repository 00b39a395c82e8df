"""Independent reference computations used to check the solvers.

Nothing here goes through the estimator functions: enumerations rebuild the
estimates from single-component oracle calls in plain loops, and gradients
are checked against central differences of the objective value. All oracle
calls are unmetered.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import CompositionProblem, DiscardLedger, objective
from .estimators import EpochState
from .optimizers import Algorithm, DivergenceError, Monitor, RunConfig, run

__all__ = [
    "BiasReport",
    "ContractionStats",
    "EnumerationBudgetError",
    "MeasurementError",
    "ENUMERATION_BUDGET",
    "finite_diff_gradient",
    "reference_gradient",
    "enumeration_size",
    "enumerate_estimator_mean",
    "measure_contraction",
]

ENUMERATION_BUDGET = 10**6
FULL = "full"


class EnumerationBudgetError(ValueError):
    pass


class MeasurementError(RuntimeError):
    pass


def finite_diff_gradient(p: CompositionProblem, x, h: float = 1e-5) -> np.ndarray:
    """Central differences of f along each coordinate."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = p.check_x(x)
    ledger = DiscardLedger()
    out = np.empty(p.dim_x)
    for d in range(p.dim_x):
        e = np.zeros(p.dim_x)
        e[d] = h
        out[d] = (objective(p, x + e, ledger) - objective(p, x - e, ledger)) / (2 * h)
    return out


# single-component oracles, one call each
def _G(p, j, x):
    return p.inner_values(np.array([j]), x)[0]


def _dG(p, j, x):
    return p.inner_jacobians(np.array([j]), x)[0]


def _dF(p, i, y):
    return p.outer_gradients(np.array([i]), y)[0]


def _mean(terms):
    terms = list(terms)
    return sum(terms[1:], terms[0].copy()) / len(terms)


def reference_gradient(p: CompositionProblem, x) -> np.ndarray:
    """grad f(x) from explicit sums over components."""
    G = _mean(_G(p, j, x) for j in range(p.m))
    J = _mean(_dG(p, j, x) for j in range(p.m))
    return J.T @ _mean(_dF(p, i, G) for i in range(p.n))


@dataclass
class BiasReport:
    x: np.ndarray
    estimator: str
    mean: np.ndarray
    true_gradient: np.ndarray
    bias_norm: float
    size: int
    weight_sum: float


def _batches(m: int, size):
    """All equally likely batches: ordered tuples of draws, or the single full pass."""
    if size == FULL or size is None:
        return [tuple(range(m))]
    return list(itertools.product(range(m), repeat=int(size)))


def enumeration_size(p: CompositionProblem, estimator: str, A=None, B=None) -> int:
    nb = lambda s: 1 if s in (FULL, None) else p.m ** int(s)  # noqa: E731
    est = Algorithm(estimator)
    if est is Algorithm.SVRG:
        return p.n
    if est is Algorithm.CSVRG1:
        return p.n * p.m * nb(A)
    if est is Algorithm.CSVRG2:
        return p.n * nb(A) * nb(B)
    raise ValueError(f"no stochastic gradient estimator for {estimator!r}")


def enumerate_estimator_mean(p: CompositionProblem, state: EpochState, x, estimator: str,
                             A=FULL, B=FULL, budget: int = ENUMERATION_BUDGET) -> BiasReport:
    """Exact expectation of a gradient estimator by visiting every outcome once.

    ``A``/``B`` are minibatch sizes (all ordered draws with replacement) or
    ``"full"`` for a single pass over every inner index. Only ``state.x_ref``
    is used; the cached reference quantities are recomputed here.
    """
    est = Algorithm(estimator)
    size = enumeration_size(p, est, A, B)
    if size > budget:
        raise EnumerationBudgetError(
            f"{est.value} enumeration needs {size} outcomes, budget is {budget}")
    x = p.check_x(x)
    xr = np.asarray(state.x_ref, dtype=float)
    m, n = p.m, p.n

    G_ref = _mean(_G(p, j, xr) for j in range(m))
    J_ref = _mean(_dG(p, j, xr) for j in range(m))
    f_ref = J_ref.T @ _mean(_dF(p, i, G_ref) for i in range(n))
    G_x = _mean(_G(p, j, x) for j in range(m))
    J_x = _mean(_dG(p, j, x) for j in range(m))
    true_grad = J_x.T @ _mean(_dF(p, i, G_x) for i in range(n))

    dG_val = [_G(p, j, xr) - _G(p, j, x) for j in range(m)]
    dG_jac = [_dG(p, j, xr) - _dG(p, j, x) for j in range(m)]

    def g_hat(batch):
        return G_ref - sum(dG_val[a] for a in batch) / len(batch)

    def jac_hat(batch):
        return J_ref - sum(dG_jac[b] for b in batch) / len(batch)

    total = np.zeros(p.dim_x)
    weights = []
    w = 1.0 / size
    if est is Algorithm.SVRG:
        for i in range(n):
            cur = J_x.T @ _dF(p, i, G_x)
            ref = J_ref.T @ _dF(p, i, G_ref)
            total += w * (f_ref - ref + cur)
            weights.append(w)
    elif est is Algorithm.CSVRG1:
        Jx = [_dG(p, j, x) for j in range(m)]
        Jr = [_dG(p, j, xr) for j in range(m)]
        ref_terms = {(i, j): Jr[j].T @ _dF(p, i, G_ref) for i in range(n) for j in range(m)}
        for batch in _batches(m, A):
            gh = g_hat(batch)
            grads = [_dF(p, i, gh) for i in range(n)]
            for i in range(n):
                for j in range(m):
                    total += w * (Jx[j].T @ grads[i] - ref_terms[i, j] + f_ref)
                    weights.append(w)
    else:
        ref_terms = [J_ref.T @ _dF(p, i, G_ref) for i in range(n)]
        jacs = [jac_hat(b) for b in _batches(m, B)]
        for batch in _batches(m, A):
            gh = g_hat(batch)
            grads = [_dF(p, i, gh) for i in range(n)]
            for jh in jacs:
                for i in range(n):
                    total += w * (jh.T @ grads[i] - ref_terms[i] + f_ref)
                    weights.append(w)
    return BiasReport(
        x=x.copy(), estimator=est.value, mean=total, true_gradient=true_grad,
        bias_norm=float(np.linalg.norm(total - true_grad)), size=len(weights),
        weight_sum=math.fsum(weights),
    )


@dataclass
class ContractionStats:
    metric: str
    mean: float
    stderr: float
    ratios: np.ndarray = field(repr=False)
    runs: int
    diverged: int


def measure_contraction(p: CompositionProblem, cfg: RunConfig, x_star, f_star, seeds: int,
                        x0=None, metric: str | None = None) -> ContractionStats:
    """Per-epoch contraction ratios over ``seeds`` independent runs.

    Epochal methods compare consecutive reference points; the others compare
    consecutive trace records. The metric is the squared distance to x*
    (``"dist"``) or the objective gap (``"gap"``, default for CSVRG2).
    Diverged runs are excluded and counted; more than 10% fails.
    """
    if metric is None:
        metric = "gap" if cfg.algorithm is Algorithm.CSVRG2 else "dist"
    if metric not in ("dist", "gap"):
        raise ValueError("metric must be 'dist' or 'gap'")
    x_star = np.asarray(x_star, dtype=float)
    x0 = np.zeros(p.dim_x) if x0 is None else np.asarray(x0, dtype=float)
    monitor = Monitor(p, x_star, f_star)
    value = monitor.dist_sq if metric == "dist" else monitor.gap

    ratios, diverged = [], 0
    for s in range(seeds):
        try:
            _, trace = run(p, replace(cfg, seed=cfg.seed + s), x0, x_star, f_star)
        except DivergenceError:
            diverged += 1
            continue
        if cfg.algorithm.epochal:
            vals = [value(x) for x in trace.epoch_points]
        else:
            vals = trace.dist_sq if metric == "dist" else trace.gap
        ratios += [b / a for a, b in zip(vals[:-1], vals[1:]) if a > 0]
    if diverged > 0.1 * seeds:
        raise MeasurementError(f"{diverged} of {seeds} runs diverged")
    r = np.asarray(ratios)
    if r.size == 0:
        raise MeasurementError("no ratios measured")
    stderr = float(r.std(ddof=1) / math.sqrt(r.size)) if r.size > 1 else 0.0
    return ContractionStats(metric, float(r.mean()), stderr, r, seeds - diverged, diverged)
