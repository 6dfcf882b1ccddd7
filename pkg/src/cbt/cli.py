"""Command-line front end.

Subcommands::

    cbt analytic   closed-form latencies for one parameter set
    cbt sim        Monte Carlo latency for one etiquette
    cbt fig4       gossip delay against the success proportion gamma
    cbt fig5       normalized latency against n_r for several span lengths
    cbt fig6       normalized latency against the population size n
    cbt crossing   smallest n_r at which CBT is no slower than LBT

Exit status is 0 on success, 1 on usage or configuration errors and 2 on
runtime errors.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import tempfile
from typing import Callable, Sequence, TextIO

from . import __version__
from .access import (
    Etiquette,
    ScenarioConfig,
    fmt_real,
    simulate,
    sweep,
    write_sweep,
)
from .analytic import (
    CbtParams,
    Divergent,
    LbtParams,
    ParameterError,
    cbt_latency,
    crossing_point,
    gossip_dissemination_delay,
    lbt_convergence_threshold,
    lbt_fixed_point,
    lbt_latency,
)
from .gossip import Mode, SlotCapExceeded, Timing, run_dissemination, write_trace
from .protocol import Aggregation, ConsensusPolicy, Normalization, Scheduling

COMMANDS = ("analytic", "sim", "fig4", "fig5", "fig6", "crossing")

FIG4_GAMMAS = [0.9, 0.95, 0.99, 0.995, 0.996, 0.997, 0.998, 0.999, 0.9995, 0.9999, 1.0]
FIG5_MUS = [1000, 5000, 10000]
FIG5_NR = list(range(2, 41))
FIG6_NS = [100, 200, 500, 1000, 2000, 5000, 10000]

DEFAULTS = {
    "n": 1000,
    "n_r": 10,
    "n_v": 100,
    "mu": 1000,
    "phi": 1,
    "gamma": 0.999,
    "policy": "ffs",
    "aggregation": "mean",
    "mean_norm": "count",
    "exclude_observer": True,
    "etiquette": "lbt",
    "runs": 10000,
    "warmup": 20,
    "spans": 200,
    "seed": None,
    "output": None,
    "format": "csv",
    "trace": None,
    "timing": "async",
    "jobs": 1,
    "values": None,
    "analytic_only": False,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits 2 by default
        raise UsageError(message)


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.replace(";", ",").split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}")


def _add_flags(p: argparse.ArgumentParser) -> None:
    s = argparse.SUPPRESS
    p.add_argument("--n", type=int, default=s, help="number of users (default 1000)")
    p.add_argument("--n-r", type=int, default=s, help="requests per span (default 10)")
    p.add_argument("--n-v", type=int, default=s, help="vacant blocks per span (default 100)")
    p.add_argument("--mu", type=int, default=s, help="span length in slots (default 1000)")
    p.add_argument("--phi", type=int, default=s, help="gossip fan-out (default 1)")
    p.add_argument("--gamma", type=float, default=s, help="gossip success proportion (default 0.999)")
    p.add_argument("--policy", choices=["ffs", "fair"], default=s)
    p.add_argument("--aggregation", choices=["mean", "median"], default=s)
    p.add_argument("--mean-norm", choices=["count", "n"], default=s)
    p.add_argument("--exclude-observer", type=_bool, default=s, metavar="{true,false}")
    p.add_argument("--etiquette", choices=["lbt", "cbt"], default=s)
    p.add_argument("--runs", type=int, default=s, help="Monte Carlo runs per point (default 10000)")
    p.add_argument("--warmup", type=int, default=s, help="discarded spans (default 20)")
    p.add_argument("--spans", type=int, default=s, help="measured spans (default 200)")
    p.add_argument("--seed", type=int, default=s, help="base seed (default $CBT_SEED or 0)")
    p.add_argument("--output", default=s, help="output file (default stdout)")
    p.add_argument("--config", default=s, help="file of 'key = value' lines")
    p.add_argument("--format", choices=["csv", "tsv"], default=s)
    p.add_argument("--trace", default=s, help="write per-run trace CSV to this file")
    p.add_argument("--timing", choices=["async", "sync"], default=s, help="gossip timing model")
    p.add_argument("--jobs", type=int, default=s, help="worker processes")
    p.add_argument("--values", type=_floats, default=s, help="override the sweep values")
    p.add_argument(
        "--analytic-only", nargs="?", const=True, type=_bool, default=s, help="skip simulation"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cbt", description="Consensus-Before-Talk latency experiments")
    parser.add_argument("--version", action="version", version=f"cbt {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for name in COMMANDS:
        _add_flags(sub.add_parser(name))
    return parser


def _flag_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="config", add_help=False)
    _add_flags(p)
    return p


def load_config(path: str) -> dict[str, object]:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise UsageError(f"--config: cannot read {path}: {exc.strerror}")
    parser = _flag_parser()
    out: dict[str, object] = {}
    for no, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{no}: expected 'key = value'")
        key, value = (x.strip() for x in line.split("=", 1))
        dest = key.replace("-", "_")
        if dest not in DEFAULTS:
            raise UsageError(f"{path}:{no}: unknown key {key!r}")
        try:
            ns = parser.parse_args([f"--{dest.replace('_', '-')}", value])
        except UsageError as exc:
            raise UsageError(f"{path}:{no}: {exc}")
        out[dest] = getattr(ns, dest)
    return out


def resolve(argv: Sequence[str]) -> argparse.Namespace:
    """Defaults, then the config file, then explicit flags."""
    ns = build_parser().parse_args(argv)
    given = vars(ns)
    flags = {k: v for k, v in given.items() if k != "config"}
    filed = load_config(given["config"]) if "config" in given else {}
    merged = {**DEFAULTS, **filed, **flags}
    # presets only fill values the user left unset
    merged["explicit"] = frozenset(filed) | frozenset(flags)
    if merged["seed"] is None:
        env = os.environ.get("CBT_SEED")
        try:
            merged["seed"] = int(env) if env else 0
        except ValueError:
            raise UsageError(f"CBT_SEED: expected an integer, got {env!r}")
    return argparse.Namespace(**merged)


_CHECKS: list[tuple[str, Callable[[object], bool], str]] = [
    ("n", lambda v: v >= 2, "must be >= 2"),
    ("n_r", lambda v: v >= 0, "must be >= 0"),
    ("n_v", lambda v: v >= 2, "must be >= 2"),
    ("mu", lambda v: v >= 1, "must be >= 1"),
    ("phi", lambda v: v >= 1, "must be >= 1"),
    ("gamma", lambda v: 0 < v <= 1, "must lie in (0, 1]"),
    ("runs", lambda v: v >= 1, "must be >= 1"),
    ("warmup", lambda v: v >= 0, "must be >= 0"),
    ("spans", lambda v: v >= 1, "must be >= 1"),
    ("seed", lambda v: v >= 0, "must be >= 0"),
    ("jobs", lambda v: v >= 1, "must be >= 1"),
]


def _flag(dest: str) -> str:
    return "--" + dest.replace("_", "-")


def validate(a: argparse.Namespace) -> None:
    for dest, ok, msg in _CHECKS:
        if not ok(getattr(a, dest)):
            raise UsageError(f"{_flag(dest)} {msg} (got {getattr(a, dest)})")
    if a.n_r > a.n:
        raise UsageError(f"--n-r must not exceed --n (got {a.n_r} > {a.n})")
    if a.command == "sim" and a.n_r < 1:
        raise UsageError(f"--n-r must be >= 1 for a simulation (got {a.n_r})")
    if a.command in ("analytic", "crossing") and a.gamma >= 1:
        raise UsageError(f"--gamma must be < 1 for the closed forms (got {a.gamma})")
    if a.command == "analytic" and a.n_r < 1:
        raise UsageError(f"--n-r must be >= 1 (got {a.n_r})")
    if a.command == "analytic" and a.n_r > a.n_v:
        raise UsageError(f"--n-r must not exceed --n-v (got {a.n_r} > {a.n_v})")
    if a.command == "sim" and a.etiquette == "cbt" and a.timing == "sync" and a.phi > a.n - 1:
        raise UsageError("--phi must be below --n")


def scenario(a: argparse.Namespace, **over) -> ScenarioConfig:
    policy = ConsensusPolicy(
        aggregation=Aggregation(a.aggregation),
        exclude_observer=a.exclude_observer,
        scheduling=Scheduling(a.policy),
        normalization=Normalization(a.mean_norm),
    )
    kw = dict(
        n=a.n,
        n_r=a.n_r,
        n_v=a.n_v,
        mu=a.mu,
        phi=a.phi,
        gamma=a.gamma,
        policy=policy,
        etiquette=Etiquette(a.etiquette),
        runs=a.runs,
        warmup_spans=a.warmup,
        measure_spans=a.spans,
        seed=a.seed,
        timing=Timing(a.timing),
    )
    kw.update(over)
    return ScenarioConfig(**kw)


def _header(a: argparse.Namespace) -> list[str]:
    keys = [k for k in DEFAULTS if k not in ("seed", "output", "trace", "jobs", "format")]
    lines = [f"cbt {__version__} {a.command}", f"seed={a.seed}"]
    for k in keys:
        v = getattr(a, k)
        if isinstance(v, (list, tuple)):
            v = ",".join(fmt_real(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k}={v}")
    return lines


def _emit(path: str | None, write: Callable[[TextIO], None]) -> None:
    """Write to stdout, or atomically to ``path`` (temp file then rename)."""
    if path is None:
        write(sys.stdout)
        return
    target = os.path.abspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(target), prefix=".cbt-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            write(fh)
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _delim(a: argparse.Namespace) -> str:
    return "\t" if a.format == "tsv" else ","


def cmd_analytic(a: argparse.Namespace) -> None:
    lp = LbtParams(a.n_r, a.n_v, a.mu)
    cp = CbtParams(a.n, a.n_r, a.phi, a.gamma, a.mu)
    lbt = lbt_latency(lp)
    cbt = cbt_latency(cp)
    try:
        fixed = fmt_real(lbt_fixed_point(lp))
    except Divergent:
        fixed = "inf"
    rows = [
        ("lbt threshold", fmt_real(lbt_convergence_threshold(a.n_v))),
        ("lbt fixed_point", fixed),
        ("lbt latency", fmt_real(lbt.value)),
        ("lbt normalized", fmt_real(lbt.normalized)),
        ("lbt divergent", "true" if lbt.divergent else "false"),
        ("gossip delay", fmt_real(gossip_dissemination_delay(cp))),
        ("gossip delay_exact", fmt_real(gossip_dissemination_delay(cp, exact=True))),
        ("cbt latency", fmt_real(cbt.value)),
        ("cbt normalized", fmt_real(cbt.normalized)),
    ]

    def write(fh: TextIO) -> None:
        for k, v in rows:
            fh.write(f"{k} {v}\n")

    _emit(a.output, write)


def cmd_sim(a: argparse.Namespace) -> None:
    cfg = scenario(a)
    rep = simulate(cfg, jobs=a.jobs, keep_runs=a.trace is not None)
    ana = rep.analytic
    d = _delim(a)

    def write(fh: TextIO) -> None:
        for line in _header(a):
            fh.write(f"# {line}\n")
        fh.write(d.join(["run", "samples", "mean", "normalized_mean", "divergent"]) + "\n")
        for i, m in enumerate(rep.run_means):
            fh.write(d.join([str(i), "", fmt_real(m), fmt_real(m / cfg.mu), ""]) + "\n")
        fh.write(
            d.join(
                [
                    "all",
                    str(rep.samples.size),
                    fmt_real(rep.mean),
                    fmt_real(rep.normalized_mean),
                    "true" if rep.divergent else "false",
                ]
            )
            + "\n"
        )
        fh.write(f"# analytic_normalized={fmt_real(ana.normalized if ana else None)}\n")
        fh.write(f"# divergent_runs={rep.divergent_runs}\n")
        if cfg.etiquette is Etiquette.CBT:
            fh.write(f"# collisions={rep.collisions}\n")
            fh.write(f"# mean_round_delay={fmt_real(rep.mean_round_delay)}\n")

    _emit(a.output, write)
    if a.trace is not None:

        def trace(fh: TextIO) -> None:
            fh.write(d.join(["run", "generated", "served", "latency", "block"]) + "\n")
            for i, r in enumerate(rep.runs):
                if cfg.etiquette is Etiquette.CBT:
                    for rec in r.records:
                        fh.write(
                            d.join(
                                str(x)
                                for x in (
                                    i,
                                    rec.generated_at,
                                    rec.served_at,
                                    rec.served_at - rec.generated_at,
                                    rec.block,
                                )
                            )
                            + "\n"
                        )
                else:
                    for lat in r.samples:
                        fh.write(d.join([str(i), "", "", fmt_real(lat), ""]) + "\n")

        _emit(a.trace, trace)


def cmd_fig4(a: argparse.Namespace) -> None:
    gammas = a.values or FIG4_GAMMAS
    for g in gammas:
        if not 0 < g <= 1:
            raise UsageError(f"--values: gamma must lie in (0, 1] (got {g})")
    records: list | None = [] if a.trace is not None else None
    stats = run_dissemination(
        a.n, a.phi, Mode.PUSH, gammas, a.runs, a.seed, Timing(a.timing), records=records
    )
    d = _delim(a)

    def closed(g: float, exact: bool) -> float:
        if g >= 1:
            return math.inf
        return gossip_dissemination_delay(CbtParams(a.n, 1, a.phi, g), exact=exact)

    def write(fh: TextIO) -> None:
        for line in _header(a):
            fh.write(f"# {line}\n")
        cols = ["gamma", "holders", "sim_mean", "sim_std", "analytic", "analytic_exact", "runs", "seed"]
        fh.write(d.join(cols) + "\n")
        for s in stats:
            row = [
                fmt_real(s.gamma),
                str(s.holders),
                fmt_real(s.mean),
                fmt_real(s.std),
                fmt_real(closed(s.gamma, False)),
                fmt_real(closed(s.gamma, True)),
                str(s.runs),
                str(a.seed),
            ]
            fh.write(d.join(row) + "\n")

    _emit(a.output, write)
    if records is not None:
        _emit(a.trace, lambda fh: write_trace(records, fh))


def _sweep_table(a: argparse.Namespace, axis: str, groups: list[tuple[ScenarioConfig, list]], extra) -> None:
    rows = []
    for base, values in groups:
        rows += sweep(base, axis, values, simulate_runs=not a.analytic_only, jobs=a.jobs)
    _emit(
        a.output,
        lambda fh: write_sweep(rows, fh, delimiter=_delim(a), comments=_header(a), extra=extra),
    )


def _ints(a: argparse.Namespace, values: list[float] | None, default: list[int], flag: str) -> list[int]:
    if values is None:
        return default
    out = [int(v) for v in values]
    if any(v != w for v, w in zip(out, values)):
        raise UsageError(f"--values: {flag} values must be integers")
    return out


def cmd_fig5(a: argparse.Namespace) -> None:
    nrs = _ints(a, a.values, FIG5_NR, "n_r")
    for v in nrs:
        if not 0 <= v <= a.n:
            raise UsageError(f"--values: n_r must lie in [0, n] (got {v})")
    mus = [a.mu] if "mu" in a.explicit else FIG5_MUS
    a.mu = mus
    groups = [(scenario(a, mu=mu), nrs) for mu in mus]
    _sweep_table(a, "n_r", groups, extra=[("mu", "mu")])


def cmd_fig6(a: argparse.Namespace) -> None:
    ns = _ints(a, a.values, FIG6_NS, "n")
    for v in ns:
        if v < max(2, a.n_r):
            raise UsageError(f"--values: n must be >= max(2, n_r) (got {v})")
    for k, v in (("n_r", 10), ("mu", 2500)):
        if k not in a.explicit:
            setattr(a, k, v)
    base = scenario(a, n=max(ns))
    _sweep_table(a, "n", [(base, ns)], extra=[])


def cmd_crossing(a: argparse.Namespace) -> None:
    mus = _ints(a, a.values, FIG5_MUS, "mu")
    hi = min(40, a.n_v)
    d = _delim(a)

    def write(fh: TextIO) -> None:
        for line in _header(a):
            fh.write(f"# {line}\n")
        fh.write(d.join(["mu", "crossing_n_r", "lbt_threshold", "range_lo", "range_hi"]) + "\n")
        for mu in mus:
            x = crossing_point(a.n, a.n_v, a.phi, a.gamma, mu, (1, hi))
            row = [str(mu), "none" if x is None else str(x), fmt_real(lbt_convergence_threshold(a.n_v)), "1", str(hi)]
            fh.write(d.join(row) + "\n")

    _emit(a.output, write)


HANDLERS = {
    "analytic": cmd_analytic,
    "sim": cmd_sim,
    "fig4": cmd_fig4,
    "fig5": cmd_fig5,
    "fig6": cmd_fig6,
    "crossing": cmd_crossing,
}


def run_cli(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        a = resolve(argv)
        validate(a)
        HANDLERS[a.command](a)
    except UsageError as exc:
        print(f"cbt: error: {exc}", file=sys.stderr)
        return 1
    except ParameterError as exc:
        print(f"cbt: error: {exc}", file=sys.stderr)
        return 1
    except SlotCapExceeded as exc:
        print(f"cbt: runtime error: {exc} (seed {exc.seed})", file=sys.stderr)
        return 2
    except (OSError, ArithmeticError, RuntimeError) as exc:
        print(f"cbt: runtime error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run_cli())


__all__ = ["run_cli", "main", "load_config", "build_parser", "resolve", "UsageError"]
