"""Concrete composition problems, reward generation and the instance file format."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import linalg
from scipy.stats import ortho_group

from .core import (
    CompositionProblem,
    DiscardLedger,
    NoUniqueMinimizer,
    ProblemConstants,
    full_gradient,
    full_inner,
    objective,
)

__all__ = [
    "RewardMatrix",
    "FunctionalProblem",
    "MeanVarianceProblem",
    "QuadCompProblem",
    "sampling_covariance",
    "gen_rewards",
    "make_mean_variance",
    "make_quadcomp",
    "make_toy_nonlinear",
    "closed_form_solution",
    "estimate_constants",
    "InstanceFormatError",
    "write_instance",
    "read_instance",
]


@dataclass(frozen=True)
class RewardMatrix:
    """n reward vectors of N assets (one per row), all entries nonnegative."""

    rewards: np.ndarray
    kappa_cov: float = 1.0
    seed: int = 0

    def __post_init__(self):
        r = np.asarray(self.rewards, dtype=float)
        if r.ndim != 2 or r.shape[0] < 1 or r.shape[1] < 1:
            raise ValueError(f"rewards must be a nonempty (n, N) array, got shape {r.shape}")
        if not np.all(np.isfinite(r)):
            raise ValueError("rewards must be finite")
        if np.any(r < 0):
            raise ValueError("rewards must be nonnegative")
        r.setflags(write=False)
        object.__setattr__(self, "rewards", r)

    @property
    def n(self) -> int:
        return self.rewards.shape[0]

    @property
    def dim(self) -> int:
        return self.rewards.shape[1]


class FunctionalProblem(CompositionProblem):
    """Problem assembled from per-component Python callables.

    Convenient for small test instances; every batched oracle loops in Python.
    """

    def __init__(self, inner, inner_jac, outer, outer_grad, dim_x, dim_y):
        if len(inner) != len(inner_jac) or len(outer) != len(outer_grad):
            raise ValueError("oracle lists must pair up")
        if not inner or not outer:
            raise ValueError("need at least one inner and one outer component")
        self._G, self._dG = list(inner), list(inner_jac)
        self._F, self._dF = list(outer), list(outer_grad)
        self.m, self.n = len(self._G), len(self._F)
        self.dim_x, self.dim_y = int(dim_x), int(dim_y)

    def inner_values(self, idx, x):
        return np.array([np.asarray(self._G[j](x), dtype=float).reshape(self.dim_y)
                         for j in idx]).reshape(len(idx), self.dim_y)

    def inner_jacobians(self, idx, x):
        return np.array([np.asarray(self._dG[j](x), dtype=float).reshape(self.dim_y, self.dim_x)
                         for j in idx]).reshape(len(idx), self.dim_y, self.dim_x)

    def outer_values(self, idx, y):
        return np.array([float(self._F[i](y)) for i in idx])

    def outer_gradients(self, idx, y):
        return np.array([np.asarray(self._dF[i](y), dtype=float).reshape(self.dim_y)
                         for i in idx]).reshape(len(idx), self.dim_y)

    def jacobian_t_dot(self, j, x, v):
        return np.asarray(self._dG[j](x), dtype=float).reshape(self.dim_y, self.dim_x).T @ v


class MeanVarianceProblem(CompositionProblem):
    """Mean-variance portfolio objective written as a composition.

    With reward rows r_t, ``G_j(x) = (x; <r_j, x>)`` and
    ``F_i(y) = -y[N] + (<r_i, y[:N]> - y[N])**2`` so that
    ``f(x) = -rbar^T x + x^T Sigma x`` with the (1/n-normalised) empirical
    covariance ``Sigma``. Minimising f maximises mean return minus variance.
    """

    def __init__(self, rewards: RewardMatrix):
        self.rewards = rewards
        self.R = rewards.rewards
        self.n = self.m = rewards.n
        self.dim_x = rewards.dim
        self.dim_y = rewards.dim + 1
        self.rbar = self.R.mean(axis=0)
        centered = self.R - self.rbar
        self.cov = centered.T @ centered / self.n
        self._eye = np.eye(self.dim_x)

    def inner_values(self, idx, x):
        idx = np.asarray(idx)
        out = np.empty((len(idx), self.dim_y))
        out[:, :-1] = x
        out[:, -1] = self.R[idx] @ x
        return out

    def inner_jacobians(self, idx, x):
        idx = np.asarray(idx)
        out = np.zeros((len(idx), self.dim_y, self.dim_x))
        out[:, :-1, :] = self._eye
        out[:, -1, :] = self.R[idx]
        return out

    def inner_value_sum(self, idx, weights, x):
        w = np.asarray(weights, dtype=float)
        out = np.empty(self.dim_y)
        out[:-1] = w.sum() * x
        out[-1] = (w @ self.R[idx]) @ x
        return out

    def inner_jacobian_sum(self, idx, weights, x):
        w = np.asarray(weights, dtype=float)
        out = np.zeros((self.dim_y, self.dim_x))
        out[:-1, :] = w.sum() * self._eye
        out[-1, :] = w @ self.R[idx]
        return out

    def _residuals(self, idx, y):
        return self.R[idx] @ y[:-1] - y[-1]

    def outer_values(self, idx, y):
        e = self._residuals(np.asarray(idx), y)
        return -y[-1] + e * e

    def outer_gradients(self, idx, y):
        idx = np.asarray(idx)
        e = self._residuals(idx, y)
        out = np.empty((len(idx), self.dim_y))
        out[:, :-1] = 2.0 * e[:, None] * self.R[idx]
        out[:, -1] = -1.0 - 2.0 * e
        return out

    def outer_gradient_sum(self, idx, weights, y):
        idx = np.asarray(idx)
        w = np.asarray(weights, dtype=float)
        e = self._residuals(idx, y)
        out = np.empty(self.dim_y)
        out[:-1] = (2.0 * w * e) @ self.R[idx]
        out[-1] = -w.sum() - 2.0 * (w @ e)
        return out

    def inner_value(self, j, x):
        out = np.empty(self.dim_y)
        out[:-1] = x
        out[-1] = self.R[j] @ x
        return out

    def outer_gradient(self, i, y):
        r = self.R[i]
        e = r @ y[:-1] - y[-1]
        out = np.empty(self.dim_y)
        out[:-1] = (2.0 * e) * r
        out[-1] = -1.0 - 2.0 * e
        return out

    def jacobian_t_dot(self, j, x, v):
        return v[:-1] + self.R[j] * v[-1]

    def quadratic_form(self):
        return 2.0 * self.cov, -self.rbar, 0.0

    def reduced_objective(self, x) -> float:
        """-rbar^T x + x^T Sigma x, evaluated without the oracles."""
        x = np.asarray(x, dtype=float)
        return float(-self.rbar @ x + x @ self.cov @ x)

    def analytic_constants(self, center=None, radius: float = 1.0) -> ProblemConstants:
        """Exact moduli for this problem; B_F is the bound over the ball around ``center``.

        The inner maps are affine, so L_G = 0. The Jacobians ``[I; r_j^T]`` have
        spectral norm sqrt(1 + |r_j|^2), the outer Hessians are
        ``2 (r_i, -1)(r_i, -1)^T`` and the component chain-rule terms differ by
        rank-one maps of norm ``2 |r_i - r_j| |r_i - rbar|``.
        """
        sq = np.einsum("ij,ij->i", self.R, self.R)
        B_G = math.sqrt(1.0 + sq.max())
        L_F = 2.0 * (1.0 + float(sq.max()))
        gram = self.R @ self.R.T
        pair_sq = np.maximum(sq[:, None] + sq[None, :] - 2.0 * gram, 0.0)
        dev = np.linalg.norm(self.R - self.rbar, axis=1)
        L_f = 2.0 * float(np.max(np.sqrt(pair_sq.max(axis=1)) * dev))
        lam = np.linalg.eigvalsh(self.cov)
        mu_f = max(2.0 * float(lam[0]), 1e-12)
        center = np.zeros(self.dim_x) if center is None else np.asarray(center, dtype=float)
        # |<r_i - rbar, x>| over the ball bounds every residual at y = G(x)
        e_max = dev * (np.linalg.norm(center) + radius)
        B_F = float(np.max(np.sqrt(4.0 * e_max**2 * sq + (1.0 + 2.0 * e_max) ** 2)))
        return ProblemConstants(mu_f=mu_f, L_f=max(L_f, mu_f), L_F=L_F, L_G=0.0,
                                B_G=B_G, B_F=B_F)


class QuadCompProblem(CompositionProblem):
    """Affine inner maps ``G_j(x) = A_j x + b_j`` and quadratic outer functions
    ``F_i(y) = y^T Q_i y / 2 + c_i^T y`` with symmetric PSD ``Q_i``."""

    def __init__(self, A, b, Q, c):
        self.A = np.asarray(A, dtype=float)
        self.b = np.asarray(b, dtype=float)
        self.Q = np.asarray(Q, dtype=float)
        self.c = np.asarray(c, dtype=float)
        self.m, self.dim_y, self.dim_x = self.A.shape
        self.n = self.Q.shape[0]
        if self.b.shape != (self.m, self.dim_y):
            raise ValueError("b must have shape (m, M)")
        if self.Q.shape != (self.n, self.dim_y, self.dim_y) or self.c.shape != (self.n, self.dim_y):
            raise ValueError("Q must be (n, M, M) and c must be (n, M)")
        if not np.allclose(self.Q, np.swapaxes(self.Q, 1, 2)):
            raise ValueError("every Q_i must be symmetric")

    def inner_values(self, idx, x):
        idx = np.asarray(idx)
        return self.A[idx] @ x + self.b[idx]

    def inner_jacobians(self, idx, x):
        return self.A[np.asarray(idx)].copy()

    def inner_value_sum(self, idx, weights, x):
        idx = np.asarray(idx)
        w = np.asarray(weights, dtype=float)
        return np.tensordot(w, self.A[idx], axes=1) @ x + w @ self.b[idx]

    def inner_jacobian_sum(self, idx, weights, x):
        return np.tensordot(np.asarray(weights, dtype=float), self.A[np.asarray(idx)], axes=1)

    def outer_values(self, idx, y):
        idx = np.asarray(idx)
        return 0.5 * np.einsum("j,ijk,k->i", y, self.Q[idx], y) + self.c[idx] @ y

    def outer_gradients(self, idx, y):
        idx = np.asarray(idx)
        return self.Q[idx] @ y + self.c[idx]

    def jacobian_t_dot(self, j, x, v):
        return self.A[j].T @ v

    def quadratic_form(self):
        A = self.A.mean(axis=0)
        b = self.b.mean(axis=0)
        Q = self.Q.mean(axis=0)
        c = self.c.mean(axis=0)
        H = A.T @ Q @ A
        H = 0.5 * (H + H.T)
        g = A.T @ (Q @ b + c)
        const = 0.5 * b @ Q @ b + c @ b
        return H, g, float(const)


def sampling_covariance(dim: int, kappa_cov: float, rng: np.random.Generator) -> np.ndarray:
    """Covariance with eigenvalues geometrically spaced on [1, kappa_cov] in a random basis."""
    if kappa_cov < 1 or not math.isfinite(kappa_cov):
        raise ValueError(f"kappa_cov must be a finite number >= 1, got {kappa_cov!r}")
    if dim == 1:
        if kappa_cov != 1:
            raise ValueError("a one-dimensional covariance has condition number 1")
        return np.ones((1, 1))
    eig = np.geomspace(1.0, kappa_cov, dim)
    eig[0], eig[-1] = 1.0, float(kappa_cov)
    Q = ortho_group.rvs(dim, random_state=rng)
    C = (Q * eig) @ Q.T
    return 0.5 * (C + C.T)


_MAX_RETRIES = 3


def gen_rewards(n: int, dim: int, kappa_cov: float, seed: int) -> RewardMatrix:
    """Draw n absolute-valued Gaussian reward vectors with covariance condition number kappa_cov.

    The Gaussian has mean zero. If the empirical covariance of the draw is not
    positive definite the draw is repeated with a derived seed (at most three
    retries).
    """
    if n < dim:
        raise ValueError(f"need n >= dim for a positive definite covariance, got n={n}, dim={dim}")
    if dim < 1:
        raise ValueError("dim must be positive")
    if kappa_cov < 1:
        raise ValueError(f"kappa_cov must be >= 1, got {kappa_cov!r}")
    for attempt in range(_MAX_RETRIES + 1):
        rng = np.random.default_rng([seed, attempt]) if attempt else np.random.default_rng(seed)
        C = sampling_covariance(dim, kappa_cov, rng)
        root = linalg.cholesky(C, lower=True)
        z = rng.standard_normal((n, dim)) @ root.T
        r = np.abs(z)
        centered = r - r.mean(axis=0)
        if np.linalg.eigvalsh(centered.T @ centered / n)[0] > 0:
            return RewardMatrix(r, kappa_cov=float(kappa_cov), seed=int(seed))
    raise RuntimeError(f"empirical covariance singular after {_MAX_RETRIES} retries (seed={seed})")


def make_mean_variance(rewards) -> MeanVarianceProblem:
    if not isinstance(rewards, RewardMatrix):
        arr = np.asarray(rewards, dtype=float)
        if arr.size == 0:
            raise ValueError("rewards must be nonempty")
        if arr.ndim == 1:
            arr = arr[:, None]
        rewards = RewardMatrix(arr)
    return MeanVarianceProblem(rewards)


def make_quadcomp(m: int, n: int, dim_x: int, dim_y: int, seed: int) -> QuadCompProblem:
    """Random affine/quadratic composition with a positive definite average Hessian."""
    if dim_y < dim_x:
        raise ValueError("dim_y >= dim_x is needed for a strongly convex instance")
    rng = np.random.default_rng(seed)
    base = np.eye(dim_y, dim_x)
    A = base + 0.3 * rng.standard_normal((m, dim_y, dim_x))
    b = rng.standard_normal((m, dim_y))
    P = rng.standard_normal((n, dim_y, dim_y)) / math.sqrt(dim_y)
    Q = P @ np.swapaxes(P, 1, 2) + 0.5 * np.eye(dim_y)
    c = rng.standard_normal((n, dim_y))
    return QuadCompProblem(A, b, Q, c)


def make_toy_nonlinear() -> FunctionalProblem:
    """m = n = 2 instance with a squared coordinate inside G and a non-quadratic F.

    With a quadratic F the compositional estimators are unbiased (the inner
    estimate enters linearly), so F carries a softplus term.
    """
    def G1(x):
        return np.array([x[0] + 0.5 * x[1] ** 2, x[1]])

    def dG1(x):
        return np.array([[1.0, x[1]], [0.0, 1.0]])

    def G2(x):
        return np.array([x[0] - x[1], x[0] ** 2 + x[1]])

    def dG2(x):
        return np.array([[1.0, -1.0], [2.0 * x[0], 1.0]])

    a = (np.array([2.0, -1.0]), np.array([1.0, 3.0]))
    ctr = (np.array([0.5, -0.5]), np.array([-1.0, 1.0]))

    def make_F(k):
        def F(y):
            t = a[k] @ y
            return np.logaddexp(0.0, t) + 0.5 * np.sum((y - ctr[k]) ** 2)

        def dF(y):
            t = a[k] @ y
            return a[k] / (1.0 + np.exp(-t)) + (y - ctr[k])

        return F, dF

    (F1, dF1), (F2, dF2) = make_F(0), make_F(1)
    return FunctionalProblem([G1, G2], [dG1, dG2], [F1, F2], [dF1, dF2], dim_x=2, dim_y=2)


def closed_form_solution(p: CompositionProblem):
    """(x*, f*) for a problem whose objective is a quadratic form.

    Solves the normal equations by Cholesky and applies one refinement step
    with the oracle gradient.
    """
    form = p.quadratic_form()
    if form is None:
        raise NoUniqueMinimizer("problem does not expose a quadratic form")
    H, g, _ = form
    try:
        factor = linalg.cho_factor(H, lower=True)
    except linalg.LinAlgError as exc:
        raise NoUniqueMinimizer("quadratic form is not positive definite") from exc
    if np.min(np.diag(factor[0])) <= 1e-14 * max(1.0, np.abs(np.diag(H)).max()) ** 0.5:
        raise NoUniqueMinimizer("quadratic form is numerically singular")
    x = linalg.cho_solve(factor, -g)
    ledger = DiscardLedger()
    x = x - linalg.cho_solve(factor, full_gradient(p, x, ledger))
    return x, objective(p, x, ledger)


def _ball_points(center, radius, samples, rng):
    d = center.shape[0]
    u = rng.standard_normal((samples, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    scale = radius * rng.random(samples) ** (1.0 / d)
    return center + u * scale[:, None]


def _subset(k: int, cap: int, rng) -> np.ndarray:
    return np.arange(k) if k <= cap else np.sort(rng.choice(k, size=cap, replace=False))


def estimate_constants(p: CompositionProblem, region_radius: float, x_center, samples: int,
                       seed: int, max_components: int = 64, fd_step: float = 1e-4) -> ProblemConstants:
    """Sampled lower estimates of the moduli over a ball around ``x_center``.

    Every supremum is replaced by a maximum over ``samples`` seeded points (and
    at most ``max_components`` component indices per point), so each value is
    a lower bound of the true regional modulus. ``mu_f`` is the smallest
    eigenvalue of a central-difference Hessian of f at the centre.
    """
    if samples < 2:
        raise ValueError("samples must be >= 2")
    if region_radius <= 0:
        raise ValueError("region_radius must be positive")
    center = p.check_x(x_center)
    rng = np.random.default_rng(seed)
    pts = _ball_points(center, region_radius, samples, rng)
    ledger = DiscardLedger()
    jdx = _subset(p.m, max_components, rng)
    idx = _subset(p.n, max_components, rng)

    B_G = B_F = L_F = L_G = L_f = 0.0
    prev = None
    for x in pts:
        y = full_inner(p, x, ledger)
        jac = p.inner_jacobians(jdx, x)
        outer = p.outer_gradients(idx, y)
        # (dG_j(x))^T grad F_i(G(x)) for every sampled (i, j) pair
        chain = np.einsum("jmn,im->ijn", jac, outer)
        B_G = max(B_G, float(np.linalg.norm(jac, ord=2, axis=(1, 2)).max()))
        B_F = max(B_F, float(np.linalg.norm(outer, axis=1).max()))
        if prev is not None:
            px, py, pjac, pouter, pchain = prev
            dx = np.linalg.norm(x - px)
            dy = np.linalg.norm(y - py)
            if dy > 0:
                L_F = max(L_F, float(np.linalg.norm(outer - pouter, axis=1).max()) / dy)
            if dx > 0:
                L_G = max(L_G, float(np.linalg.norm(jac - pjac, ord=2, axis=(1, 2)).max()) / dx)
                L_f = max(L_f, float(np.linalg.norm(chain - pchain, axis=2).max()) / dx)
        prev = (x, y, jac, outer, chain)

    H = np.empty((p.dim_x, p.dim_x))
    for d in range(p.dim_x):
        e = np.zeros(p.dim_x)
        e[d] = fd_step
        H[:, d] = (full_gradient(p, center + e, ledger) - full_gradient(p, center - e, ledger)) / (2 * fd_step)
    mu_f = max(float(np.linalg.eigvalsh(0.5 * (H + H.T))[0]), 1e-12)
    return ProblemConstants(mu_f=mu_f, L_f=max(L_f, mu_f), L_F=L_F, L_G=L_G, B_G=B_G, B_F=B_F)


# -- instance files ------------------------------------------------------------

FORMAT_TAG = "compsvrg-instance-v1"


class InstanceFormatError(ValueError):
    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path, self.lineno = path, lineno


def write_instance(path, rewards: RewardMatrix) -> None:
    """Write a mean-variance instance as ``key: value`` lines plus a row-major reward block."""
    lines = [
        "# mean-variance instance; one reward vector per line after 'rewards:'",
        f"format: {FORMAT_TAG}",
        f"n: {rewards.n}",
        f"dim: {rewards.dim}",
        f"kappa_cov: {rewards.kappa_cov:.17g}",
        f"seed: {rewards.seed}",
        "rewards:",
    ]
    lines += [" ".join(f"{v:.17g}" for v in row) for row in rewards.rewards]
    Path(path).write_text("\n".join(lines) + "\n")


def read_instance(path) -> RewardMatrix:
    text = Path(path).read_text()
    header: dict[str, tuple[int, str]] = {}
    rows: list[list[float]] = []
    in_rewards = False
    n = dim = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if in_rewards:
            try:
                rows.append([float(tok) for tok in line.split()])
            except ValueError:
                raise InstanceFormatError(path, lineno, f"non-numeric reward entry: {line!r}") from None
            if len(rows[-1]) != dim:
                raise InstanceFormatError(path, lineno, f"expected {dim} values, found {len(rows[-1])}")
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise InstanceFormatError(path, lineno, f"expected 'key: value', got {line!r}")
        key, value = key.strip(), value.strip()
        if key == "rewards":
            for k in ("format", "n", "dim", "kappa_cov", "seed"):
                if k not in header:
                    raise InstanceFormatError(path, lineno, f"missing header key {k!r} before rewards")
            if header["format"][1] != FORMAT_TAG:
                raise InstanceFormatError(path, header["format"][0], f"unknown format {header['format'][1]!r}")
            try:
                n, dim = int(header["n"][1]), int(header["dim"][1])
            except ValueError:
                raise InstanceFormatError(path, lineno, "n and dim must be integers") from None
            in_rewards = True
            continue
        header[key] = (lineno, value)
    if not in_rewards:
        raise InstanceFormatError(path, len(text.splitlines()), "missing 'rewards:' block")
    if len(rows) != n:
        raise InstanceFormatError(path, len(text.splitlines()), f"expected {n} reward rows, found {len(rows)}")
    try:
        kappa = float(header["kappa_cov"][1])
        seed = int(header["seed"][1])
    except ValueError as exc:
        raise InstanceFormatError(path, header["kappa_cov"][0], str(exc)) from None
    try:
        return RewardMatrix(np.array(rows, dtype=float), kappa_cov=kappa, seed=seed)
    except ValueError as exc:
        raise InstanceFormatError(path, 0, str(exc)) from None
