"""Problem abstraction, oracle metering and full (deterministic) evaluations.

A finite-sum composition problem is

    f(x) = (1/n) sum_i F_i( (1/m) sum_j G_j(x) ),

with inner maps ``G_j: R^N -> R^M`` and outer functions ``F_i: R^M -> R``.
Component indices are 0-based throughout the Python API.

Every call to one of the four component oracles (G_j, its Jacobian, F_i, the
gradient of F_i) costs one query. Problems expose *unmetered* vectorised
oracles; metering happens in the functions of this module and in the
estimators, which charge a :class:`QueryLedger` for every component call.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class ContractViolation(ValueError):
    """An argument breaks an operation's precondition (dimension, index range)."""


class NoUniqueMinimizer(ValueError):
    """The quadratic form of a problem is singular or indefinite."""


class QueryLedger:
    """Monotone counter of component-oracle calls."""

    __slots__ = ("_count",)

    def __init__(self, count: int = 0):
        if count < 0:
            raise ValueError("ledger count must be nonnegative")
        self._count = int(count)

    @property
    def count(self) -> int:
        return self._count

    def charge(self, k: int) -> None:
        if k < 0:
            raise ValueError("cannot charge a negative number of queries")
        self._count += int(k)

    def __repr__(self) -> str:
        return f"QueryLedger(count={self._count})"


class DiscardLedger(QueryLedger):
    """Ledger that ignores charges; used by validation code and trace monitors."""

    __slots__ = ()

    def charge(self, k: int) -> None:
        pass


@dataclass(frozen=True)
class ProblemConstants:
    """Moduli used by the parameter calculators.

    ``mu_f`` and ``L_f`` must be strictly positive. The remaining moduli may be
    zero, which is exact for affine inner maps (``L_G``) and linear outer
    functions (``L_F``, ``B_F``).
    """

    mu_f: float
    L_f: float
    L_F: float
    L_G: float
    B_G: float
    B_F: float

    def __post_init__(self):
        for name in ("mu_f", "L_f", "L_F", "L_G", "B_G", "B_F"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and nonnegative, got {v!r}")
        if self.mu_f <= 0 or self.L_f <= 0:
            raise ValueError("mu_f and L_f must be strictly positive")

    @property
    def kappa(self) -> float:
        return self.L_f / self.mu_f


class CompositionProblem:
    """Oracle bundle for ``f = F o G``.

    Subclasses implement the four batched oracles below. ``idx`` is an integer
    array of component indices, ``weights`` a matching array of multiplicities.
    The ``*_sum`` methods return weighted sums (not means) so that a single
    component with weight one is reproduced exactly; the defaults loop over the
    batched oracles and may be overridden with closed forms.
    """

    m: int
    n: int
    dim_x: int
    dim_y: int

    # -- raw oracles (unmetered) -------------------------------------------
    def inner_values(self, idx: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Stacked G_j(x), shape (len(idx), M)."""
        raise NotImplementedError

    def inner_jacobians(self, idx: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Stacked Jacobians of G_j at x, shape (len(idx), M, N)."""
        raise NotImplementedError

    def outer_values(self, idx: np.ndarray, y: np.ndarray) -> np.ndarray:
        """F_i(y), shape (len(idx),)."""
        raise NotImplementedError

    def outer_gradients(self, idx: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Stacked gradients of F_i at y, shape (len(idx), M)."""
        raise NotImplementedError

    # -- weighted sums ------------------------------------------------------
    def inner_value_sum(self, idx, weights, x):
        return np.asarray(weights, dtype=float) @ self.inner_values(idx, x)

    def inner_jacobian_sum(self, idx, weights, x):
        return np.tensordot(np.asarray(weights, dtype=float),
                            self.inner_jacobians(idx, x), axes=1)

    def outer_value_sum(self, idx, weights, y):
        return float(np.asarray(weights, dtype=float) @ self.outer_values(idx, y))

    def outer_gradient_sum(self, idx, weights, y):
        return np.asarray(weights, dtype=float) @ self.outer_gradients(idx, y)

    # -- single components (hot loops) ----------------------------------------
    def inner_value(self, j: int, x: np.ndarray) -> np.ndarray:
        return self.inner_values(np.array([j]), x)[0]

    def outer_gradient(self, i: int, y: np.ndarray) -> np.ndarray:
        return self.outer_gradients(np.array([i]), y)[0]

    def jacobian_t_dot(self, j: int, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """(dG_j(x))^T v for a single inner component."""
        return self.inner_jacobians(np.array([j]), x)[0].T @ v

    # -- optional closed form -----------------------------------------------
    def quadratic_form(self):
        """(H, g, c) with f(x) = x^T H x / 2 + g^T x + c, or None if f is not quadratic."""
        return None

    # -- checks ---------------------------------------------------------------
    def check_x(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim_x,):
            raise ContractViolation(f"expected x of shape ({self.dim_x},), got {x.shape}")
        return x

    def check_inner_index(self, j: int) -> int:
        if not 0 <= j < self.m:
            raise ContractViolation(f"inner index {j} outside [0, {self.m})")
        return int(j)

    def check_outer_index(self, i: int) -> int:
        if not 0 <= i < self.n:
            raise ContractViolation(f"outer index {i} outside [0, {self.n})")
        return int(i)

    @property
    def all_inner(self) -> np.ndarray:
        return np.arange(self.m)

    @property
    def all_outer(self) -> np.ndarray:
        return np.arange(self.n)


def _ones(k: int) -> np.ndarray:
    return np.ones(k)


def full_inner(p: CompositionProblem, x, ledger: QueryLedger) -> np.ndarray:
    """G(x) = (1/m) sum_j G_j(x); costs m queries."""
    x = p.check_x(x)
    ledger.charge(p.m)
    return p.inner_value_sum(p.all_inner, _ones(p.m), x) / p.m


def full_jacobian(p: CompositionProblem, x, ledger: QueryLedger) -> np.ndarray:
    """dG(x) = (1/m) sum_j dG_j(x); costs m queries."""
    x = p.check_x(x)
    ledger.charge(p.m)
    return p.inner_jacobian_sum(p.all_inner, _ones(p.m), x) / p.m


def full_gradient(p: CompositionProblem, x, ledger: QueryLedger) -> np.ndarray:
    """grad f(x) = dG(x)^T grad F(G(x)); costs 2m + n queries."""
    x = p.check_x(x)
    g = full_inner(p, x, ledger)
    jac = full_jacobian(p, x, ledger)
    ledger.charge(p.n)
    outer = p.outer_gradient_sum(p.all_outer, _ones(p.n), g) / p.n
    return jac.T @ outer


def objective(p: CompositionProblem, x, ledger: QueryLedger) -> float:
    """f(x); costs m + n queries."""
    g = full_inner(p, x, ledger)
    ledger.charge(p.n)
    return p.outer_value_sum(p.all_outer, _ones(p.n), g) / p.n


def component_gradient(p: CompositionProblem, i: int, x, ledger: QueryLedger) -> np.ndarray:
    """Gradient of the composed component F_i o G at x; costs 2m + 1 queries."""
    i = p.check_outer_index(i)
    x = p.check_x(x)
    g = full_inner(p, x, ledger)
    jac = full_jacobian(p, x, ledger)
    ledger.charge(1)
    return jac.T @ p.outer_gradients(np.array([i]), g)[0]
