"""Optimization loops and the parameter calculators for the compositional SVRG methods."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    CompositionProblem,
    DiscardLedger,
    ProblemConstants,
    QueryLedger,
    full_gradient,
    objective,
)
from .estimators import (
    estimate_inner,
    estimate_jacobian,
    grad_est_csvrg1,
    grad_est_csvrg2,
    grad_est_svrg,
    make_epoch_state,
    sample_minibatch,
)

__all__ = [
    "Algorithm",
    "Schedule",
    "RunConfig",
    "Trace",
    "Monitor",
    "DivergenceError",
    "make_rng",
    "run",
    "run_gd",
    "run_scgd",
    "run_ascgd",
    "run_svrg",
    "run_csvrg1",
    "run_csvrg2",
    "corollary1_params",
    "corollary2_params",
]

DIVERGENCE_NORM = 1e12


class Algorithm(str, enum.Enum):
    GD = "gd"
    SCGD = "scgd"
    ASCGD = "ascgd"
    SVRG = "svrg"
    CSVRG1 = "csvrg1"
    CSVRG2 = "csvrg2"

    @property
    def epochal(self) -> bool:
        return self in (Algorithm.SVRG, Algorithm.CSVRG1, Algorithm.CSVRG2)


EPOCH_POINTS = ("random_iterate", "last_iterate")


@dataclass(frozen=True)
class Schedule:
    """Power schedules ``gamma_k = c_gamma (k+1+k0)^-p`` and ``beta_k = min(1, c_beta (k+1)^-q)``.

    ``c_gamma=None`` takes the run's ``gamma``; ``q=None`` picks 2/3 for SCGD and
    4/5 for the accelerated variant. ``eta`` is the extrapolation weight of the
    accelerated variant (``None`` uses ``beta_k``).
    """

    c_gamma: float | None = None
    p: float = 1.0
    c_beta: float = 1.0
    q: float | None = None
    eta: float | None = None
    k0: float = 0.0


@dataclass(frozen=True)
class RunConfig:
    algorithm: Algorithm
    gamma: float
    K: int = 1
    S: int = 1
    A: int = 1
    B: int | None = None
    seed: int = 0
    schedule: Schedule = field(default_factory=Schedule)
    epoch_point: str = "random_iterate"
    warm_start_iters: int = 0
    max_queries: int | None = None
    record_every: int = 1

    def __post_init__(self):
        object.__setattr__(self, "algorithm", Algorithm(self.algorithm))
        if not (self.gamma > 0 and math.isfinite(self.gamma)):
            raise ValueError(f"gamma must be positive, got {self.gamma!r}")
        if self.K < 1 or self.S < 1:
            raise ValueError("K and S must be >= 1")
        if self.A < 1:
            raise ValueError("A must be >= 1")
        if self.algorithm is Algorithm.CSVRG2 and (self.B is None or self.B < 1):
            raise ValueError("CSVRG2 needs a Jacobian batch size B >= 1")
        if self.epoch_point not in EPOCH_POINTS:
            raise ValueError(f"epoch_point must be one of {EPOCH_POINTS}")
        if self.warm_start_iters < 0 or self.record_every < 1:
            raise ValueError("warm_start_iters must be >= 0 and record_every >= 1")
        if self.max_queries is not None and self.max_queries < 1:
            raise ValueError("max_queries must be positive")

    @property
    def iterations(self) -> int:
        """Iteration count of the non-epochal methods."""
        return self.K * self.S


class Monitor:
    """Unmetered objective, gap and distance evaluation for trace records.

    Quadratic problems are evaluated through their closed form, which keeps
    gaps accurate far below the rounding level of f itself.
    """

    def __init__(self, p: CompositionProblem, x_star=None, f_star=None):
        self.p = p
        self.x_star = None if x_star is None else np.asarray(x_star, dtype=float)
        self.f_star = f_star
        self.form = p.quadratic_form()
        self._ledger = DiscardLedger()

    def objective(self, x) -> float:
        if self.form is not None:
            H, g, c = self.form
            return float(0.5 * x @ H @ x + g @ x + c)
        return objective(self.p, x, self._ledger)

    def gap(self, x) -> float | None:
        if self.x_star is not None and self.form is not None:
            d = x - self.x_star
            return float(0.5 * d @ self.form[0] @ d)
        if self.f_star is not None:
            return self.objective(x) - self.f_star
        return None

    def dist_sq(self, x) -> float | None:
        if self.x_star is None:
            return None
        d = x - self.x_star
        return float(d @ d)


@dataclass
class Trace:
    """One record per inner iteration plus one per epoch boundary."""

    epoch: list = field(default_factory=list)
    iteration: list = field(default_factory=list)
    queries: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    gap: list = field(default_factory=list)
    dist_sq: list = field(default_factory=list)
    epoch_points: list = field(default_factory=list)
    epoch_queries: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    stop_reason: str = "completed"

    def __len__(self) -> int:
        return len(self.queries)

    def add(self, monitor: Monitor, epoch: int, iteration: int, queries: int, x) -> None:
        self.epoch.append(epoch)
        self.iteration.append(iteration)
        self.queries.append(int(queries))
        self.objective.append(monitor.objective(x))
        self.gap.append(monitor.gap(x))
        self.dist_sq.append(monitor.dist_sq(x))

    @property
    def final_gap(self) -> float | None:
        return self.gap[-1] if self.gap else None


class DivergenceError(RuntimeError):
    """Iterates left the ball of radius 1e12 (or became non-finite)."""

    def __init__(self, trace: Trace, where: str):
        super().__init__(f"iterate diverged ({where})")
        self.trace = trace


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based stream owned by one run."""
    return np.random.Generator(np.random.Philox(int(seed) % 2**64))


class _Run:
    """Shared state of one run: ledger, RNG, trace and stopping rules."""

    def __init__(self, p, cfg, x0, x_star, f_star):
        self.p, self.cfg = p, cfg
        self.x = np.array(p.check_x(x0), dtype=float)
        self.ledger = QueryLedger()
        self.rng = make_rng(cfg.seed)
        self.monitor = Monitor(p, x_star, f_star)
        self.trace = Trace(metadata={
            "algorithm": cfg.algorithm.value,
            "seed": cfg.seed,
            "warm_start_iters": cfg.warm_start_iters,
        })
        self.trace.add(self.monitor, 0, 0, 0, self.x)

    def out_of_budget(self) -> bool:
        b = self.cfg.max_queries
        return b is not None and self.ledger.count >= b

    def guard(self, x, where):
        # NaN fails the comparison as well
        if not float(x @ x) <= DIVERGENCE_NORM**2:
            self.trace.stop_reason = "diverged"
            raise DivergenceError(self.trace, where)

    def record(self, epoch, k, x, force=False):
        if force or k % self.cfg.record_every == 0:
            self.trace.add(self.monitor, epoch, k, self.ledger.count, x)

    def finish(self, x, epoch, k):
        if self.trace.iteration[-1] != k or self.trace.epoch[-1] != epoch \
                or self.trace.queries[-1] != self.ledger.count:
            self.record(epoch, k, x, force=True)
        return x, self.trace


def _scgd_loop(run: _Run, x, iterations: int, accelerated: bool, epoch_of=lambda k: 0):
    """Two-timescale compositional SGD; returns (x, completed iterations).

    Per iteration: y <- (1 - beta) y + beta G_j(z), then
    x <- x - gamma (dG_j'(x))^T grad F_i(y), with z = x for the basic method and
    the extrapolated point x + (1/eta - 1)(x - x_prev) for the accelerated one.
    Costs three queries per iteration.
    """
    p, cfg, rng, ledger = run.p, run.cfg, run.rng, run.ledger
    sch = cfg.schedule
    c_gamma = cfg.gamma if sch.c_gamma is None else sch.c_gamma
    q = sch.q if sch.q is not None else (0.8 if accelerated else 2.0 / 3.0)
    y = np.zeros(p.dim_y)
    x_prev = x
    for k in range(iterations):
        gamma_k = c_gamma * (k + 1 + sch.k0) ** (-sch.p)
        beta_k = min(1.0, sch.c_beta * (k + 1) ** (-q))
        if accelerated:
            eta = beta_k if sch.eta is None else sch.eta
            z = x + (1.0 / eta - 1.0) * (x - x_prev)
        else:
            z = x
        j = int(rng.integers(p.m))
        jp = int(rng.integers(p.m))
        i = int(rng.integers(p.n))
        ledger.charge(3)
        y = (1.0 - beta_k) * y + beta_k * p.inner_value(j, z)
        direction = p.jacobian_t_dot(jp, x, p.outer_gradient(i, y))
        x_prev, x = x, x - gamma_k * direction
        run.guard(x, f"compositional SGD iteration {k}")
        run.record(epoch_of(k), k + 1, x, force=k + 1 == iterations)
        if run.out_of_budget():
            run.trace.stop_reason = "budget"
            run.finish(x, epoch_of(k), k + 1)
            return x, k + 1
    return x, iterations


def run_gd(p, cfg: RunConfig, x0, x_star=None, f_star=None):
    """Full gradient descent, 2m + n queries per iteration."""
    run = _Run(p, cfg, x0, x_star, f_star)
    x = run.x
    for k in range(cfg.iterations):
        x = x - cfg.gamma * full_gradient(p, x, run.ledger)
        run.guard(x, f"gradient descent iteration {k}")
        run.record(k // cfg.K, k + 1, x, force=k + 1 == cfg.iterations)
        if run.out_of_budget():
            run.trace.stop_reason = "budget"
            return run.finish(x, k // cfg.K, k + 1)
    return x, run.trace


def run_scgd(p, cfg: RunConfig, x0, x_star=None, f_star=None):
    run = _Run(p, cfg, x0, x_star, f_star)
    x, k = _scgd_loop(run, run.x, cfg.iterations, False, lambda k: k // cfg.K)
    return x, run.trace


def run_ascgd(p, cfg: RunConfig, x0, x_star=None, f_star=None):
    run = _Run(p, cfg, x0, x_star, f_star)
    x, k = _scgd_loop(run, run.x, cfg.iterations, True, lambda k: k // cfg.K)
    return x, run.trace


def _svrg_family(p, cfg: RunConfig, x0, x_star, f_star, inner_step, with_inner, with_jacobian):
    run = _Run(p, cfg, x0, x_star, f_star)
    x_tilde = run.x
    if cfg.warm_start_iters:
        x_tilde, done = _scgd_loop(run, x_tilde, cfg.warm_start_iters, False)
        if run.out_of_budget():
            return x_tilde, run.trace
    run.trace.epoch_points.append(x_tilde.copy())
    run.trace.epoch_queries.append(run.ledger.count)
    K = cfg.K
    for s in range(1, cfg.S + 1):
        if run.out_of_budget():
            run.trace.stop_reason = "budget"
            break
        state = make_epoch_state(p, x_tilde, run.ledger, with_inner=with_inner,
                                 with_jacobian=with_jacobian)
        run.record(s, 0, x_tilde, force=True)
        iterates = np.empty((K + 1, p.dim_x))
        iterates[0] = x = x_tilde
        for k in range(K):
            x = x - cfg.gamma * inner_step(run, state, x)
            run.guard(x, f"epoch {s}, iteration {k}")
            iterates[k + 1] = x
            run.record(s, k + 1, x, force=k + 1 == K)
            if run.out_of_budget():
                run.trace.stop_reason = "budget"
                return run.finish(x, s, k + 1)
        if cfg.epoch_point == "random_iterate":
            x_tilde = iterates[int(run.rng.integers(K))].copy()
        else:
            x_tilde = x.copy()
        run.trace.epoch_points.append(x_tilde)
        run.trace.epoch_queries.append(run.ledger.count)
    return x_tilde, run.trace


def _svrg_step(run, state, x):
    i = int(run.rng.integers(run.p.n))
    return grad_est_svrg(state, x, i, run.p, run.ledger)


def _csvrg1_step(run, state, x):
    p, rng = run.p, run.rng
    batch = sample_minibatch(p.m, run.cfg.A, rng)
    i = int(rng.integers(p.n))
    j = int(rng.integers(p.m))
    g_hat = estimate_inner(state, x, batch, p, run.ledger)
    return grad_est_csvrg1(state, x, i, j, g_hat, p, run.ledger)


def _csvrg2_step(run, state, x):
    p, rng = run.p, run.rng
    batch_a = sample_minibatch(p.m, run.cfg.A, rng)
    batch_b = sample_minibatch(p.m, run.cfg.B, rng)
    i = int(rng.integers(p.n))
    g_hat = estimate_inner(state, x, batch_a, p, run.ledger)
    jac_hat = estimate_jacobian(state, x, batch_b, p, run.ledger)
    return grad_est_csvrg2(state, x, i, g_hat, jac_hat, p, run.ledger)


def run_svrg(p, cfg: RunConfig, x0, x_star=None, f_star=None):
    """SVRG over the composed components F_i o G."""
    return _svrg_family(p, cfg, x0, x_star, f_star, _svrg_step, False, False)


def run_csvrg1(p, cfg: RunConfig, x0, x_star=None, f_star=None):
    """Compositional SVRG with a minibatch estimate of the inner value."""
    return _svrg_family(p, cfg, x0, x_star, f_star, _csvrg1_step, True, False)


def run_csvrg2(p, cfg: RunConfig, x0, x_star=None, f_star=None):
    """Compositional SVRG with minibatch estimates of the inner value and its Jacobian."""
    return _svrg_family(p, cfg, x0, x_star, f_star, _csvrg2_step, True, True)


_RUNNERS = {
    Algorithm.GD: run_gd,
    Algorithm.SCGD: run_scgd,
    Algorithm.ASCGD: run_ascgd,
    Algorithm.SVRG: run_svrg,
    Algorithm.CSVRG1: run_csvrg1,
    Algorithm.CSVRG2: run_csvrg2,
}


def run(p, cfg: RunConfig, x0, x_star=None, f_star=None):
    """Dispatch on ``cfg.algorithm``; returns (final point, trace)."""
    return _RUNNERS[cfg.algorithm](p, cfg, x0, x_star, f_star)


def _ceil(v: float) -> int:
    # absorb rounding noise such as 5120000.000000001
    c = math.ceil(v)
    if c - v > 1.0 - 1e-12 * max(1.0, abs(v)):
        c -= 1
    return max(int(c), 1)


def _check_for_calculator(c: ProblemConstants):
    if not isinstance(c, ProblemConstants):
        raise ValueError("expected ProblemConstants")


def corollary1_params(c: ProblemConstants):
    """(gamma, A, K) with contraction factor 7/8 per epoch in squared distance."""
    _check_for_calculator(c)
    if c.B_G <= 0 or c.L_F <= 0:
        raise ValueError("B_G and L_F must be positive")
    gamma = c.mu_f / (32.0 * c.L_f**2)
    A = _ceil(512.0 * c.B_G**4 * c.L_F**2 / c.mu_f**2)
    K = _ceil(512.0 * c.L_f**2 / c.mu_f**2)
    return gamma, A, K


def corollary2_params(c: ProblemConstants):
    """(gamma, K, A, B) with contraction factor 9/17 per epoch in objective gap.

    ``B`` is at least 1 even when ``L_G = 0`` (affine inner maps).
    """
    _check_for_calculator(c)
    gamma = 1.0 / (320.0 * c.L_f)
    K = _ceil(5120.0 * c.L_f / c.mu_f)
    bg4lf2 = c.B_G**4 * c.L_F**2
    A = _ceil(max(1024.0 * bg4lf2 / c.mu_f**2, 32.0 * bg4lf2 / (5.0 * c.mu_f * c.L_f)))
    B = _ceil(32.0 * c.B_F**2 * c.L_G**2 / (5.0 * c.mu_f * c.L_f))
    return gamma, K, A, B
