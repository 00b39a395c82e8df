"""Command-line front end: ``generate``, ``run``, ``bench`` and ``check``.

Exit codes are stable: 0 success, 1 usage error, 2 I/O or parse error,
3 divergence, 4 failed check.

Hyperparameters the source experiment leaves open are filled in from the
instance's analytic constants (see :func:`default_settings`); they are
artifact defaults, not values taken from any published experiment.
"""
from __future__ import annotations

import argparse
import math
import sys
import time
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import DiscardLedger, ProblemConstants, full_gradient
from .estimators import (
    estimate_inner,
    estimate_jacobian,
    grad_est_csvrg1,
    grad_est_csvrg2,
    grad_est_svrg,
    make_epoch_state,
    sample_minibatch,
)
from .optimizers import (
    EPOCH_POINTS,
    Algorithm,
    DivergenceError,
    RunConfig,
    Schedule,
    Trace,
    corollary1_params,
    corollary2_params,
    run,
)
from .problems import (
    InstanceFormatError,
    MeanVarianceProblem,
    closed_form_solution,
    gen_rewards,
    make_mean_variance,
    read_instance,
    write_instance,
)
from .validation import finite_diff_gradient, measure_contraction

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED, EXIT_CHECK = 0, 1, 2, 3, 4

TRACE_HEADER = "run_id,algorithm,epoch,iteration,queries,objective,gap,dist_sq"
DEFAULT_BENCH_ALGORITHMS = ("csvrg1", "csvrg2", "scgd", "ascgd", "gd")
DEFAULT_WARM_START = 10000
BENCH_EPOCHS = 30
SUITES = ("gradients", "estimators", "queries", "contraction")


class UsageError(Exception):
    pass


# -- defaults derived from the instance ----------------------------------------

@dataclass(frozen=True)
class Settings:
    """Artifact-default hyperparameters for one instance.

    gamma = 1/L_f and K = ceil(L_f/mu_f) for the SVRG family and GD; the
    compositional SGD baselines use gamma_k = (1/mu_f)/(k + 1 + K), which
    starts at about 1/L_f and decays like 1/(mu_f k).
    """

    constants: ProblemConstants
    gamma: float
    K: int
    schedule: Schedule
    A: int = 5
    B: int = 1


def default_settings(p: MeanVarianceProblem, x_star=None) -> Settings:
    c = p.analytic_constants(x_star, 1.0)
    K = max(1, math.ceil(c.L_f / c.mu_f))
    return Settings(constants=c, gamma=1.0 / c.L_f, K=K,
                    schedule=Schedule(c_gamma=1.0 / c.mu_f, k0=float(K)))


def epoch_cost(p, algorithm: Algorithm, K: int, A: int, B: int = 1) -> int:
    """Closed-form query count of one epoch (one iteration for GD, SCGD, ASCGD)."""
    m, n = p.m, p.n
    full = 2 * m + n
    if algorithm is Algorithm.CSVRG1:
        return m + full + K * (2 * A + 4)
    if algorithm is Algorithm.CSVRG2:
        return 2 * m + full + K * (2 * A + 2 * B + 2)
    if algorithm is Algorithm.SVRG:
        return full + K * 2 * (2 * m + 1)
    if algorithm is Algorithm.GD:
        return full
    return 3


def bench_budget(p, settings: Settings, warm_start: int, epochs: int = BENCH_EPOCHS) -> int:
    """Warm-start cost plus ``epochs`` CSVRG1 epochs."""
    return 3 * warm_start + epochs * epoch_cost(p, Algorithm.CSVRG1, settings.K, settings.A)


def algorithm_seed(seed: int, algorithm) -> int:
    """Per-run stream: the bench seed XOR a stable tag of the algorithm name."""
    return int(seed) ^ zlib.crc32(Algorithm(algorithm).value.encode())


def bench_config(algorithm, settings: Settings, budget: int, seed: int, warm_start: int,
                 epoch_point: str = "random_iterate") -> RunConfig:
    alg = Algorithm(algorithm)
    K = settings.K
    # the budget, not S, ends every bench run
    if alg.epochal:
        return RunConfig(alg, gamma=settings.gamma, K=K, S=10**9, A=settings.A, B=settings.B,
                         seed=algorithm_seed(seed, alg), schedule=settings.schedule,
                         epoch_point=epoch_point, warm_start_iters=warm_start,
                         max_queries=budget, record_every=K)
    every = K if alg is Algorithm.GD else 500
    return RunConfig(alg, gamma=settings.gamma, K=1, S=10**9, seed=algorithm_seed(seed, alg),
                     schedule=settings.schedule, max_queries=budget, record_every=every)


# -- trace files ----------------------------------------------------------------

def _num(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.17g}"


def format_trace(run_id: str, trace: Trace, metadata: dict) -> str:
    """TraceFile text: ``# key=value`` metadata lines, header, one row per record."""
    lines = [f"# {k}={v}" for k, v in metadata.items()]
    lines.append(f"# stop_reason={trace.stop_reason}")
    lines.append(TRACE_HEADER)
    alg = metadata.get("algorithm", trace.metadata.get("algorithm", ""))
    last = -1
    for e, it, q, obj, gap, d2 in zip(trace.epoch, trace.iteration, trace.queries,
                                       trace.objective, trace.gap, trace.dist_sq):
        if q <= last:
            continue
        last = q
        lines.append(",".join([run_id, alg, str(e), str(it), str(q), _num(obj), _num(gap), _num(d2)]))
    return "\n".join(lines) + "\n"


def write_trace(path, run_id: str, trace: Trace, metadata: dict) -> int:
    text = format_trace(run_id, trace, metadata)
    Path(path).write_text(text)
    return sum(1 for line in text.splitlines() if line.startswith("#")) + 1


def read_trace(path) -> tuple[dict, list[dict]]:
    """Parse a TraceFile back into (metadata, rows)."""
    meta, rows, header = {}, [], None
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            k, _, v = line[1:].strip().partition("=")
            meta[k] = v
        elif header is None:
            header = line.split(",")
        else:
            rows.append(dict(zip(header, line.split(","))))
    return meta, rows


def _metadata(cfg: RunConfig, extra: dict | None = None) -> dict:
    meta = {
        "format": "compsvrg-trace-v1",
        "algorithm": cfg.algorithm.value,
        "seed": cfg.seed,
        "gamma": _num(cfg.gamma),
        "K": cfg.K,
        "S": cfg.S,
        "A": cfg.A,
        "B": "" if cfg.B is None else cfg.B,
        "epoch_point": cfg.epoch_point,
        "warm_start_iters": cfg.warm_start_iters,
        "budget": "" if cfg.max_queries is None else cfg.max_queries,
        "schedule": (f"c_gamma={_num(cfg.schedule.c_gamma)};p={_num(cfg.schedule.p)};"
                     f"c_beta={_num(cfg.schedule.c_beta)};q={_num(cfg.schedule.q)};"
                     f"k0={_num(cfg.schedule.k0)}"),
    }
    meta.update(extra or {})
    return meta


# -- bench ----------------------------------------------------------------------

@dataclass
class BenchResult:
    algorithms: list
    seeds: list
    budget: int
    settings: Settings
    final_gaps: dict = field(default_factory=dict)   # algorithm -> array over seeds
    traces: dict = field(default_factory=dict)       # (algorithm, seed) -> Trace
    configs: dict = field(default_factory=dict)      # (algorithm, seed) -> RunConfig


def run_bench(p, algorithms, budget: int | None = None, seeds: int = 1, seed: int = 0,
              warm_start: int = DEFAULT_WARM_START, epoch_point: str = "random_iterate",
              settings: Settings | None = None, x_star=None, f_star=None) -> BenchResult:
    """Every algorithm from x0 = 0 under one query budget, for ``seeds`` seeds.

    Seed s of algorithm a uses the stream ``(seed + s) XOR tag(a)``, so the
    runs of one algorithm do not depend on which other algorithms are present.
    """
    algs = [Algorithm(a) for a in algorithms]
    if not algs:
        raise UsageError("empty algorithm list")
    if x_star is None:
        x_star, f_star = closed_form_solution(p)
    settings = settings or default_settings(p, x_star)
    if budget is None:
        budget = bench_budget(p, settings, warm_start)
    for a in algs:
        need = epoch_cost(p, a, settings.K, settings.A, settings.B)
        if budget < need:
            raise UsageError(f"budget {budget} is below one {a.value} epoch ({need} queries)")
    x0 = np.zeros(p.dim_x)
    result = BenchResult([a.value for a in algs], list(range(seed, seed + seeds)), budget, settings)
    for a in algs:
        gaps = []
        for s in result.seeds:
            cfg = bench_config(a, settings, budget, s, warm_start if a.epochal else 0, epoch_point)
            try:
                _, trace = run(p, cfg, x0, x_star, f_star)
                gaps.append(trace.final_gap)
            except DivergenceError as exc:
                trace = exc.trace
                gaps.append(math.inf)
            result.traces[a.value, s] = trace
            result.configs[a.value, s] = cfg
        result.final_gaps[a.value] = np.array(gaps, dtype=float)
    return result


def gnuplot_script(entries: list[tuple[str, str, int]], title: str) -> str:
    """Log gap against query count; ``entries`` are (label, file, lines to skip)."""
    lines = [
        "# gnuplot script: objective gap against oracle queries",
        "set datafile separator ','",
        "set logscale y",
        "set format y '10^{%L}'",
        "set xlabel 'number of oracle queries'",
        "set ylabel 'f(x) - f*'",
        f"set title '{title}'",
        "set key top right",
        "set terminal pngcairo size 800,600",
        "set output 'convergence.png'",
    ]
    plots = [f"'{f}' skip {skip} using 5:7 with lines title '{label}'" for label, f, skip in entries]
    lines.append("plot " + ", \\\n     ".join(plots))
    return "\n".join(lines) + "\n"


def write_bench(result: BenchResult, out_dir, instance_label: str = "") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plots = []
    summary = ["algorithm,seed,run_seed,queries,final_gap,stop_reason"]
    for a in result.algorithms:
        for k, s in enumerate(result.seeds):
            trace, cfg = result.traces[a, s], result.configs[a, s]
            name = f"trace_{a}_s{s}.csv"
            skip = write_trace(out / name, f"{a}-s{s}", trace, _metadata(cfg))
            if k == 0:
                plots.append((a, name, skip))
            summary.append(",".join([a, str(s), str(cfg.seed), str(trace.queries[-1]),
                                     _num(result.final_gaps[a][k]), trace.stop_reason]))
    (out / "summary.csv").write_text("\n".join(summary) + "\n")
    title = f"{instance_label} budget={result.budget}".strip()
    (out / "plot.gp").write_text(gnuplot_script(plots, title))


# -- check suites -----------------------------------------------------------------

def _report(lines: list, ok: bool, name: str, detail: str) -> bool:
    lines.append(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return ok


def check_gradients(p, points: int = 10, seed: int = 0, tol: float = 1e-5) -> tuple[bool, list]:
    rng = np.random.default_rng(seed)
    lines, ok = [], True
    for t in range(points):
        x = rng.standard_normal(p.dim_x)
        g = full_gradient(p, x, DiscardLedger())
        fd = finite_diff_gradient(p, x, 1e-5)
        rel = float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12))
        ok &= _report(lines, rel <= tol, f"gradient point {t}", f"relative error {rel:.2e}")
    return ok, lines


def check_estimators(p, draws: int = 100, seed: int = 0, tol: float = 1e-14) -> tuple[bool, list]:
    """Every estimator returns the reference gradient at the reference point."""
    rng = np.random.default_rng(seed)
    ledger = DiscardLedger()
    x_ref = rng.standard_normal(p.dim_x)
    state = make_epoch_state(p, x_ref, ledger, with_inner=True, with_jacobian=True)
    scale = max(1.0, float(np.abs(state.grad_ref).max()))
    worst = {"svrg": 0.0, "csvrg1": 0.0, "csvrg2": 0.0}
    for _ in range(draws):
        i, j = int(rng.integers(p.n)), int(rng.integers(p.m))
        a = sample_minibatch(p.m, int(rng.integers(1, 6)), rng)
        g_hat = estimate_inner(state, x_ref, a, p, ledger)
        jac = estimate_jacobian(state, x_ref, a, p, ledger)
        ests = {
            "svrg": grad_est_svrg(state, x_ref, i, p, ledger),
            "csvrg1": grad_est_csvrg1(state, x_ref, i, j, g_hat, p, ledger),
            "csvrg2": grad_est_csvrg2(state, x_ref, i, g_hat, jac, p, ledger),
        }
        for k, v in ests.items():
            worst[k] = max(worst[k], float(np.abs(v - state.grad_ref).max()) / scale)
    lines, ok = [], True
    for k, v in worst.items():
        ok &= _report(lines, v <= tol, f"{k} reference collapse", f"max deviation {v:.1e} over {draws} draws")
    return ok, lines


def check_queries(p, seed: int = 0) -> tuple[bool, list]:
    """One epoch of each SVRG-type method; ledger deltas against closed forms."""
    rng = np.random.default_rng(seed)
    lines, ok = [], True
    x0 = np.zeros(p.dim_x)
    for t in range(3):
        K, A, B = int(rng.integers(1, 20)), int(rng.integers(1, 8)), int(rng.integers(1, 8))
        for alg in (Algorithm.CSVRG1, Algorithm.CSVRG2, Algorithm.SVRG):
            cfg = RunConfig(alg, gamma=1e-3, K=K, S=2, A=A, B=B, seed=t)
            _, trace = run(p, cfg, x0)
            deltas = np.diff(trace.epoch_queries)
            want = epoch_cost(p, alg, K, A, B)
            good = bool(np.all(deltas == want))
            ok &= _report(lines, good, f"{alg.value} K={K} A={A} B={B}",
                          f"epoch deltas {deltas.tolist()} expected {want}")
    return ok, lines


def check_contraction(p, seeds: int = 100, seed: int = 0, epochs: tuple = (2, 1)) -> tuple[bool, list]:
    """Corollary parameters from the analytic constants; 7/8 and 9/17 per-epoch bounds."""
    x_star, f_star = closed_form_solution(p)
    c = p.analytic_constants(x_star, 1.0)
    lines, ok = [], True
    gamma, A, K = corollary1_params(c)
    cfg = RunConfig("csvrg1", gamma=gamma, K=K, S=epochs[0], A=A, seed=seed, record_every=K)
    st = measure_contraction(p, cfg, x_star, f_star, seeds, metric="dist")
    ok &= _report(lines, st.mean <= 7 / 8 + 0.05, "first corollary",
                  f"mean squared-distance ratio {st.mean:.4f} (bound {7 / 8 + 0.05:.4f}, "
                  f"gamma={gamma:.3g} K={K} A={A})")
    gamma, K, A, B = corollary2_params(c)
    cfg = RunConfig("csvrg2", gamma=gamma, K=K, S=epochs[1], A=A, B=B, seed=seed, record_every=K)
    st = measure_contraction(p, cfg, x_star, f_star, seeds, metric="gap")
    ok &= _report(lines, st.mean <= 9 / 17 + 0.05, "second corollary",
                  f"mean gap ratio {st.mean:.4f} (bound {9 / 17 + 0.05:.4f}, "
                  f"gamma={gamma:.3g} K={K} A={A} B={B})")
    return ok, lines


CHECKS = {
    "gradients": check_gradients,
    "estimators": check_estimators,
    "queries": check_queries,
    "contraction": check_contraction,
}


# -- argument parsing ---------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _algorithms(text: str) -> list[str]:
    names = [t.strip() for t in text.split(",") if t.strip()]
    valid = [a.value for a in Algorithm]
    if not names:
        raise argparse.ArgumentTypeError("empty algorithm list")
    for name in names:
        if name not in valid:
            raise argparse.ArgumentTypeError(f"unknown algorithm {name!r}; valid: {', '.join(valid)}")
    return names


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="compsvrg", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a mean-variance instance file")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--dim", type=int, required=True)
    g.add_argument("--kappa-cov", type=float, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    def common(sp):
        sp.add_argument("instance")
        sp.add_argument("--gamma", type=float, help="step size (default 1/L_f)")
        sp.add_argument("--inner-iters", type=int, help="K (default ceil(L_f/mu_f))")
        sp.add_argument("--batch-a", type=int, default=5)
        sp.add_argument("--batch-b", type=int, default=1)
        sp.add_argument("--budget", type=int, help="stop once this many queries are spent")
        sp.add_argument("--epoch-point", choices=EPOCH_POINTS, default="random_iterate",
                        help="last_iterate is a practical variant, not the analysed method")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--c-gamma", type=float, help="SCGD step constant (default 1/mu_f)")
        sp.add_argument("--k0", type=float, help="SCGD step offset (default K)")

    r = sub.add_parser("run", help="one run, written as a TraceFile")
    common(r)
    r.add_argument("--algorithm", required=True, choices=[a.value for a in Algorithm])
    r.add_argument("--epochs", type=int, default=BENCH_EPOCHS,
                   help="S; non-epochal methods run K*S iterations")
    r.add_argument("--warm-start", type=int, default=0)
    r.add_argument("--record-every", type=int, default=1)
    r.add_argument("--out", required=True)

    b = sub.add_parser("bench", help="all algorithms under a shared query budget")
    common(b)
    b.add_argument("--algorithms", type=_algorithms, default=list(DEFAULT_BENCH_ALGORITHMS))
    b.add_argument("--seeds", type=int, default=1)
    b.add_argument("--warm-start", type=int, default=DEFAULT_WARM_START)
    b.add_argument("--out", required=True)

    c = sub.add_parser("check", help="run a validation suite")
    c.add_argument("instance")
    c.add_argument("--suite", required=True, choices=SUITES)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--seeds", type=int, default=100, help="runs for the contraction suite")
    return ap


def _load(path):
    return make_mean_variance(read_instance(path))


def _settings(p, args, x_star) -> Settings:
    """Instance defaults overridden by whatever flags were given."""
    s = default_settings(p, x_star)
    K = s.K if args.inner_iters is None else args.inner_iters
    sch = replace(s.schedule,
                  c_gamma=s.schedule.c_gamma if args.c_gamma is None else args.c_gamma,
                  k0=float(K) if args.k0 is None else args.k0)
    return replace(s, gamma=s.gamma if args.gamma is None else args.gamma, K=K,
                   schedule=sch, A=args.batch_a, B=args.batch_b)


def cmd_generate(args) -> int:
    rewards = gen_rewards(args.n, args.dim, args.kappa_cov, args.seed)
    write_instance(args.out, rewards)
    p = make_mean_variance(rewards)
    lam = np.linalg.eigvalsh(p.cov)
    print(f"wrote {args.out}: n={args.n} dim={args.dim} kappa_cov={args.kappa_cov:g} seed={args.seed}")
    print(f"empirical covariance eigenvalues: min {lam[0]:.6g} max {lam[-1]:.6g}")
    print(f"mu_f = 2 lambda_min = {2 * lam[0]:.6g}")
    return EXIT_OK


def cmd_run(args) -> int:
    p = _load(args.instance)
    x_star, f_star = closed_form_solution(p)
    s = _settings(p, args, x_star)
    cfg = RunConfig(args.algorithm, gamma=s.gamma, K=s.K, S=args.epochs, A=s.A, B=s.B,
                    seed=args.seed, schedule=s.schedule, epoch_point=args.epoch_point,
                    warm_start_iters=args.warm_start, max_queries=args.budget,
                    record_every=args.record_every)
    start = time.perf_counter()
    code = EXIT_OK
    try:
        _, trace = run(p, cfg, np.zeros(p.dim_x), x_star, f_star)
    except DivergenceError as exc:
        trace, code = exc.trace, EXIT_DIVERGED
    write_trace(args.out, f"{cfg.algorithm.value}-s{args.seed}", trace, _metadata(cfg))
    elapsed = time.perf_counter() - start
    # wall time goes to stderr so that trace files stay byte-identical
    print(f"{cfg.algorithm.value}: {trace.stop_reason}, queries={trace.queries[-1]}, "
          f"final gap={_num(trace.final_gap)}, wall_time={elapsed:.2f}s", file=sys.stderr)
    return code


def cmd_bench(args) -> int:
    p = _load(args.instance)
    x_star, f_star = closed_form_solution(p)
    settings = _settings(p, args, x_star)
    result = run_bench(p, args.algorithms, args.budget, args.seeds, args.seed, args.warm_start,
                       args.epoch_point, settings, x_star, f_star)
    label = f"n={p.n} N={p.dim_x} kappa_cov={p.rewards.kappa_cov:g}"
    write_bench(result, args.out, label)
    print(f"bench on {label}, budget {result.budget} queries, {len(result.seeds)} seed(s)")
    print("hyperparameters are artifact defaults derived from analytic constants")
    print(f"{'algorithm':<10} {'median gap':>12} {'max gap':>12}")
    for a in result.algorithms:
        g = result.final_gaps[a]
        print(f"{a:<10} {np.median(g):>12.3e} {np.max(g):>12.3e}")
    diverged = any(np.isinf(g).any() for g in result.final_gaps.values())
    return EXIT_DIVERGED if diverged else EXIT_OK


def cmd_check(args) -> int:
    p = _load(args.instance)
    if args.suite == "contraction":
        ok, lines = check_contraction(p, seeds=args.seeds, seed=args.seed)
    else:
        ok, lines = CHECKS[args.suite](p, seed=args.seed)
    print(f"suite {args.suite} on {args.instance}")
    print("\n".join(lines))
    print("all checks passed" if ok else "some checks FAILED")
    return EXIT_OK if ok else EXIT_CHECK


COMMANDS = {"generate": cmd_generate, "run": cmd_run, "bench": cmd_bench, "check": cmd_check}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InstanceFormatError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        name = exc.filename if exc.filename is not None else ""
        print(f"I/O error: {name}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
