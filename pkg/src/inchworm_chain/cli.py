"""Command line driver: ``run``, ``cost-scan`` and ``oracle`` subcommands.

Exit status is 0 on success, 1 when a check fails or a computation errors,
and 2 for usage or configuration errors.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import resummation
from .bath import dump_table_csv, table_for
from .config import IDENTITY, SIGMA_Z, ConfigError, load_config, spin_classes
from .inchworm import solve_all, store_bytes
from .oracle import bare_diagram_sum, bath_refinement, exact_closed_chain
from .resummation import StoreCache, run_chain, write_csv, write_plot_script
from .spin_algebra import SpinClass

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

DISTRIBUTIVE_TOL = 1e-12
CLOSED_CHAIN_TOL = 1e-2


@dataclass
class RunReport:
    solve_seconds: float
    resum_seconds: float
    influence_evals: int
    kernel_evals: int
    memory_bytes: int
    output: Path | None

    def lines(self) -> list[str]:
        return [
            f"inchworm solve     {self.solve_seconds:10.3f} s",
            f"resummation        {self.resum_seconds:10.3f} s",
            f"L_b^c evaluations  {self.influence_evals}",
            f"kernel evaluations {self.kernel_evals}",
            f"store memory       {self.memory_bytes / 2**20:.1f} MiB",
            f"output             {self.output if self.output else '-'}",
        ]


def _threads(args) -> int | None:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("SIM_THREADS")
    return int(env) if env else None


def _parse_target(raw: str, n_spins: int) -> list[int]:
    if raw == "all":
        return list(range(n_spins))
    try:
        k = int(raw)
    except ValueError:
        raise ConfigError("--target", f"expected a spin number or 'all', got {raw!r}") from None
    if not 1 <= k <= n_spins:
        raise ConfigError("--target", f"spin {k} outside 1..{n_spins}")
    return [k - 1]


def _dense_estimate(cfg, observables: int) -> int:
    n = cfg.numerics
    dense = sum(1 for members in spin_classes(cfg) if cfg.spins[members[0]][1].xi > 0)
    return dense * observables * store_bytes(n.n_steps, n.n_bar)


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    threads = _threads(args)
    targets = _parse_target(args.target, cfg.n_spins) if args.target else [cfg.observable_spin]
    out = Path(args.out) if args.out else Path(args.config).with_suffix(".csv")
    observables = 1 if cfg.n_spins == 1 else 2
    print(f"estimated store memory {_dense_estimate(cfg, observables) / 2**20:.1f} MiB "
          f"({len(spin_classes(cfg))} spin class(es))", flush=True)
    if args.dump_bath_table:
        for c, members in enumerate(spin_classes(cfg)):
            path = Path(args.dump_bath_table)
            if len(spin_classes(cfg)) > 1:
                path = path.with_name(f"{path.stem}-class{c}{path.suffix}")
            dump_table_csv(table_for(cfg.spins[members[0]][1], cfg.grid), path)
            print(f"bath table -> {path}")
    cache = StoreCache(cfg, threads, checkpoint_dir=args.checkpoint)
    result = run_chain(cfg, targets=targets, threads=threads, cache=cache)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(result, out)
    if args.emit_plot_script:
        script = out.with_suffix(".gp")
        write_plot_script(out, script, result.targets)
        print(f"plot script -> {script}")
    if args.plot:
        from .plotting import plot_trajectories

        png = plot_trajectories(result, out.with_suffix(".png"), title=Path(args.config).stem)
        print(f"figure -> {png}")
    report = RunReport(result.solve_seconds, result.resum_seconds, result.influence_evals,
                       result.kernel_evals, result.memory_bytes, out)
    print("\n".join(report.lines()))
    if cache.loaded:
        print(f"stores loaded from checkpoint: {cache.loaded}")
    print(f"max |Im<sigma_z>| {result.max_imag:.3e}")
    return EXIT_OK


def cost_scan(cfg, steps, m_bar: int, n_bar: int, threads: int | None = None):
    """Influence-evaluation counts of a single-spin solve for each step count."""
    spin_params, bath = cfg.spins[0]
    rows = []
    for L in steps:
        grid = replace(cfg.grid, n_steps=L)
        spin = SpinClass.build(replace(spin_params, observable=SIGMA_Z), grid)
        table = table_for(bath, grid)
        if table.is_zero:
            raise ConfigError("spins[0].bath.xi", "cost scan needs a nonzero bath")
        t0 = time.perf_counter()
        store = solve_all(spin, table, m_bar, n_bar, threads)
        rows.append((L, store.stats.influence_evals, store.stats.kernel_evals,
                     time.perf_counter() - t0))
        del store
    return rows


def log2_ratios(counts) -> list[float]:
    return [math.log2(b / a) for a, b in zip(counts, counts[1:])]


def cmd_cost_scan(args) -> int:
    cfg = load_config(args.config)
    if cfg.n_spins != 1:
        print("note: cost scan uses the first spin only", file=sys.stderr)
    n = cfg.numerics
    m_bar = args.m_bar if args.m_bar is not None else n.m_bar
    n_bar = args.n_bar if args.n_bar is not None else n.n_bar
    if m_bar < 1 or m_bar % 2 == 0:
        raise ConfigError("--m-bar", "m_bar must be odd and >= 1")
    rows = cost_scan(cfg, args.steps, m_bar, n_bar, _threads(args))
    ratios = [float("nan")] + log2_ratios([r[1] for r in rows])
    print(f"# m_bar={m_bar} n_bar={n_bar} expected slope {m_bar + n_bar + 2}")
    print(f"{'L':>6} {'L_b^c evals':>16} {'kernel evals':>14} {'log2 ratio':>11} {'seconds':>9}")
    for (L, count, kernels, secs), ratio in zip(rows, ratios):
        print(f"{L:>6} {count:>16} {kernels:>14} {ratio:>11.3f} {secs:>9.2f}")
    if args.out:
        out = Path(args.out)
        with open(out, "w") as fh:
            fh.write("L,influence_evals,kernel_evals,log2_ratio,seconds\n")
            for (L, count, kernels, secs), ratio in zip(rows, ratios):
                fh.write(f"{L},{count},{kernels},{ratio:.17g},{secs:.6g}\n")
        if args.plot:
            from .plotting import plot_cost_scan

            plot_cost_scan([r[0] for r in rows], [r[1] for r in rows], out.with_suffix(".png"),
                           slope=m_bar + n_bar + 2)
    return EXIT_OK


def oracle_checks(cfg, threads: int | None = None) -> list[tuple[str, bool, float]]:
    """Distributive law, closed chain at xi=0 and bath refinement; ``(name, ok, deviation)``."""
    checks = []
    small = cfg.with_numerics(n_steps=min(cfg.numerics.n_steps, 2))
    cache = StoreCache(small, threads)
    result = run_chain(small, targets=[small.observable_spin], threads=threads, cache=cache)
    obs = [SIGMA_Z if k == small.observable_spin else IDENTITY for k in range(small.n_spins)]
    stores = [cache.store(k, tuple(obs[k])) for k in range(small.n_spins)]
    dev = max(abs(bare_diagram_sum(stores, small, l) - result.values[l - 1, 0])
              for l in range(1, small.numerics.n_steps + 1))
    checks.append(("distributive law vs explicit bond sum", dev <= DISTRIBUTIVE_TOL, dev))

    closed = replace(cfg, spins=tuple((sp, replace(b, xi=0.0)) for sp, b in cfg.spins))
    res = run_chain(closed, targets=range(closed.n_spins), threads=threads)
    exact = exact_closed_chain(closed, res.times)
    dev = float(np.max(np.abs(res.values - exact)))
    checks.append(("closed chain (xi=0) vs exact propagation", dev <= CLOSED_CHAIN_TOL, dev))

    bath = cfg.spins[0][1]
    lags = np.arange(2 * cfg.numerics.n_steps + 1) * cfg.numerics.dt
    devs = bath_refinement(bath, lags)
    seq = [devs[n] for n in sorted(devs)]
    ok = bath.xi == 0 or all(b < a for a, b in zip(seq, seq[1:]))
    checks.append(("bath refinement shrinks monotonically", ok, seq[0]))
    return checks


def cmd_oracle(args) -> int:
    cfg = load_config(args.config)
    if args.corrupt_weights is not None:
        resummation._WEIGHT_SCALE = args.corrupt_weights
    try:
        checks = oracle_checks(cfg, _threads(args))
    finally:
        resummation._WEIGHT_SCALE = 1.0
    for name, ok, dev in checks:
        print(f"{'PASS' if ok else 'FAIL'}  {name}  max dev {dev:.3e}")
    return EXIT_OK if all(ok for _, ok, _ in checks) else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="inchworm-chain",
                                     description="Ising chain with one harmonic bath per spin.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON configuration file")
    common.add_argument("--threads", type=int, help="worker threads (default: SIM_THREADS or config)")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", parents=[common], help="simulate and write a trajectory CSV")
    run.add_argument("--out", help="CSV path (default: config path with .csv)")
    run.add_argument("--target", help="1-based spin number or 'all' (default: config observable_spin)")
    run.add_argument("--checkpoint", metavar="DIR", help="load/save solved propagator stores here")
    run.add_argument("--emit-plot-script", action="store_true", help="write a gnuplot script")
    run.add_argument("--dump-bath-table", metavar="PATH", help="write the bath correlation table")
    run.add_argument("--plot", action=argparse.BooleanOptionalAction, default=True,
                     help="render a PNG next to the CSV")
    run.set_defaults(func=cmd_run)

    scan = sub.add_parser("cost-scan", parents=[common], help="count L_b^c evaluations against L")
    scan.add_argument("--m-bar", type=int)
    scan.add_argument("--n-bar", type=int)
    scan.add_argument("--steps", type=int, nargs="+", default=[16, 32, 64, 128])
    scan.add_argument("--out", help="optional CSV of the scan")
    scan.add_argument("--plot", action=argparse.BooleanOptionalAction, default=True)
    scan.set_defaults(func=cmd_cost_scan)

    orc = sub.add_parser("oracle", parents=[common], help="run the reference checks")
    orc.add_argument("--corrupt-weights", type=float, help=argparse.SUPPRESS)
    orc.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
