"""Minibatch inner/Jacobian estimates and the three variance-reduced gradient estimators.

All estimators are metered: each charges the ledger for the component calls
it represents. Minibatches are multisets drawn with replacement; a multiset
is stored as distinct indices plus multiplicities, so duplicated elements are
evaluated once but still charged once per element.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .core import (
    CompositionProblem,
    ContractViolation,
    QueryLedger,
    component_gradient,
    full_gradient,
    full_inner,
    full_jacobian,
)

__all__ = [
    "EpochState",
    "MiniBatch",
    "make_epoch_state",
    "sample_minibatch",
    "full_batch",
    "estimate_inner",
    "estimate_jacobian",
    "grad_est_svrg",
    "grad_est_csvrg1",
    "grad_est_csvrg2",
]


@dataclass(frozen=True)
class EpochState:
    """Reference point and the quantities cached at it for one epoch."""

    x_ref: np.ndarray
    g_ref: np.ndarray | None
    grad_ref: np.ndarray
    jac_ref: np.ndarray | None = None


def make_epoch_state(p: CompositionProblem, x_ref, ledger: QueryLedger,
                     with_inner: bool = True, with_jacobian: bool = False) -> EpochState:
    """Cache G(x_ref), optionally dG(x_ref), then grad f(x_ref).

    Costs m (+ m) + (2m + n) queries, in that order. Classical SVRG only needs
    the reference gradient (``with_inner=False``).
    """
    x_ref = np.array(p.check_x(x_ref), dtype=float)
    g_ref = full_inner(p, x_ref, ledger) if with_inner else None
    jac_ref = full_jacobian(p, x_ref, ledger) if with_jacobian else None
    grad_ref = full_gradient(p, x_ref, ledger)
    for arr in (x_ref, g_ref, grad_ref, jac_ref):
        if arr is not None:
            arr.setflags(write=False)
    return EpochState(x_ref, g_ref, grad_ref, jac_ref)


@dataclass(frozen=True)
class MiniBatch:
    """Multiset of inner indices stored as (sorted distinct index, multiplicity)."""

    unique: np.ndarray
    counts: np.ndarray

    def __len__(self) -> int:
        return int(self.counts.sum())

    @property
    def indices(self) -> np.ndarray:
        """The multiset expanded into a sorted index array."""
        return np.repeat(self.unique, self.counts)

    @classmethod
    def from_indices(cls, indices) -> "MiniBatch":
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size == 0:
            raise ValueError("a minibatch needs at least one element")
        unique, counts = np.unique(idx, return_counts=True)
        return cls(unique, counts)


@lru_cache(maxsize=32)
def _uniform(m: int) -> np.ndarray:
    return np.full(m, 1.0 / m)


def sample_minibatch(m: int, size: int, rng: np.random.Generator) -> MiniBatch:
    """``size`` i.i.d. uniform draws from {0, ..., m-1}, with replacement.

    The multiplicities are drawn jointly from the multinomial distribution,
    which is equivalent in law to ``size`` independent draws and costs O(m)
    instead of O(size) random numbers.
    """
    if m < 1:
        raise ValueError("m must be positive")
    if size < 1:
        raise ValueError("minibatch size must be positive")
    counts = rng.multinomial(size, _uniform(m))
    keep = np.flatnonzero(counts)
    return MiniBatch(keep, counts[keep])


def full_batch(m: int) -> MiniBatch:
    """Every index exactly once; the estimates below then telescope to exact values."""
    return MiniBatch(np.arange(m), np.ones(m, dtype=np.int64))


def _check_batch(p: CompositionProblem, batch: MiniBatch) -> None:
    if batch.unique.size == 0 or batch.unique[0] < 0 or batch.unique[-1] >= p.m:
        raise ContractViolation(f"minibatch index outside [0, {p.m})")


def estimate_inner(state: EpochState, x, batch: MiniBatch, p: CompositionProblem,
                   ledger: QueryLedger) -> np.ndarray:
    """G~ - (1/A) sum_a (G_a(x~) - G_a(x)); costs 2A queries."""
    x = p.check_x(x)
    _check_batch(p, batch)
    size = len(batch)
    ledger.charge(2 * size)
    diff = (p.inner_values(batch.unique, state.x_ref) - p.inner_values(batch.unique, x))
    return state.g_ref - (batch.counts @ diff) / size


def estimate_jacobian(state: EpochState, x, batch: MiniBatch, p: CompositionProblem,
                      ledger: QueryLedger) -> np.ndarray:
    """G~' - (1/B) sum_b (dG_b(x~) - dG_b(x)); costs 2B queries."""
    if state.jac_ref is None:
        raise ContractViolation("epoch state carries no reference Jacobian")
    x = p.check_x(x)
    _check_batch(p, batch)
    size = len(batch)
    ledger.charge(2 * size)
    diff = (p.inner_jacobians(batch.unique, state.x_ref) - p.inner_jacobians(batch.unique, x))
    k = batch.counts.size
    correction = (batch.counts @ diff.reshape(k, -1)).reshape(diff.shape[1:])
    return state.jac_ref - correction / size


def grad_est_svrg(state: EpochState, x, i: int, p: CompositionProblem,
                  ledger: QueryLedger) -> np.ndarray:
    """Classical SVRG estimate with F_i o G as the i-th component; costs 2(2m + 1)."""
    i = p.check_outer_index(i)
    x = p.check_x(x)
    ref = component_gradient(p, i, state.x_ref, ledger)
    cur = component_gradient(p, i, x, ledger)
    return state.grad_ref + (cur - ref)


def grad_est_csvrg1(state: EpochState, x, i: int, j: int, g_hat, p: CompositionProblem,
                    ledger: QueryLedger) -> np.ndarray:
    """(dG_j(x))^T grad F_i(G^) - (dG_j(x~))^T grad F_i(G~) + f~'; costs 4 queries."""
    i = p.check_outer_index(i)
    j = p.check_inner_index(j)
    x = p.check_x(x)
    ledger.charge(4)
    cur = p.jacobian_t_dot(j, x, p.outer_gradient(i, g_hat))
    ref = p.jacobian_t_dot(j, state.x_ref, p.outer_gradient(i, state.g_ref))
    return (cur - ref) + state.grad_ref


def grad_est_csvrg2(state: EpochState, x, i: int, g_hat, jac_hat, p: CompositionProblem,
                    ledger: QueryLedger) -> np.ndarray:
    """(G^')^T grad F_i(G^) - (G~')^T grad F_i(G~) + f~'; costs 2 queries."""
    if state.jac_ref is None:
        raise ContractViolation("epoch state carries no reference Jacobian")
    i = p.check_outer_index(i)
    p.check_x(x)
    ledger.charge(2)
    cur = jac_hat.T @ p.outer_gradient(i, g_hat)
    ref = state.jac_ref.T @ p.outer_gradient(i, state.g_ref)
    return (cur - ref) + state.grad_ref
