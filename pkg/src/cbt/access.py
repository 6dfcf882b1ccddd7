"""End-to-end access simulation of LBT and CBT, and parameter sweeps.

LBT
    ``n_r`` requests are generated per span at uniform slots.  At every span
    boundary all pending requests pick one of ``n_v`` blocks; a request
    succeeds when nobody else picked its block, otherwise it backs off one
    span and retries.

CBT
    The requests generated in span ``i`` form a batch that is frozen at the
    boundary ``(i+1) mu``.  The batch is gossiped one SAT after another, each
    SAT taking a dissemination round (receivers stamp their verification
    slot) and a confirmation round that carries the stamps to ``gamma n``
    users.  Batches queue behind each other on this sequential channel.
    Once the batch is confirmed every user computes consensus timestamps,
    enqueues the SATs, and the SAQ head is served on distinct blocks, at most
    ``n_v`` per span.  Service is driven by a reference user's ledger; with
    ``track_ledgers`` every user keeps a ledger and disagreements with the
    reference order are counted.
"""

from __future__ import annotations

import csv
import enum
import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, NamedTuple, Sequence, TextIO

import numpy as np

from .analytic import (
    CbtParams,
    LatencyOutcome,
    LbtParams,
    ParameterError,
    cbt_latency,
    gossip_dissemination_delay,
    lbt_latency,
)
from .gossip import (
    SlotCapExceeded,
    Timing,
    async_round_time,
    required_holders,
    spread,
    sync_spread,
)
from .protocol import (
    ConsensusPolicy,
    DistributedSpectrumLedger,
    KeyedHashScheme,
    LedgerHeader,
    SatId,
    SpectrumAccessTransaction,
    check_signature,
    generate_sat,
)

__all__ = [
    "Etiquette",
    "ScenarioConfig",
    "BlockAssignment",
    "BlockCollision",
    "SatRecord",
    "RunResult",
    "LatencyReport",
    "SweepRow",
    "SWEEP_AXES",
    "SWEEP_COLUMNS",
    "lbt_attempt",
    "lbt_run",
    "cbt_run",
    "simulate",
    "simulate_lbt",
    "simulate_cbt",
    "sweep",
    "write_sweep",
    "fmt_real",
]

DIVERGENCE_WINDOW = 50


class Etiquette(enum.Enum):
    LBT = "lbt"
    CBT = "cbt"


@dataclass(frozen=True)
class ScenarioConfig:
    n: int = 1000
    n_r: int = 10
    n_v: int = 100
    mu: int = 1000
    phi: int = 1
    gamma: float = 0.999
    policy: ConsensusPolicy = ConsensusPolicy()
    etiquette: Etiquette = Etiquette.LBT
    runs: int = 100
    warmup_spans: int = 20
    measure_spans: int = 200
    seed: int = 0
    timing: Timing = Timing.ASYNC
    track_ledgers: bool = False
    reference: int = 0

    def __post_init__(self) -> None:
        checks = [
            (self.n >= 2, "n must be >= 2"),
            (0 <= self.n_r <= self.n, "n_r must lie in [0, n]"),
            (self.n_v >= 1, "n_v must be >= 1"),
            (self.mu >= 1, "mu must be >= 1"),
            (self.phi >= 1, "phi must be >= 1"),
            (0.0 < self.gamma <= 1.0, "gamma must lie in (0, 1]"),
            (self.runs >= 1, "runs must be >= 1"),
            (self.warmup_spans >= 0, "warmup_spans must be >= 0"),
            (self.measure_spans >= 1, "measure_spans must be >= 1"),
            (0 <= self.reference < self.n, "reference must be a user id"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ParameterError(msg)

    @property
    def spans(self) -> int:
        return self.warmup_spans + self.measure_spans

    def analytic(self) -> LatencyOutcome | None:
        """Closed-form latency for this etiquette, or None outside the model's domain."""
        try:
            if self.etiquette is Etiquette.LBT:
                return lbt_latency(LbtParams(self.n_r, self.n_v, self.mu))
            return cbt_latency(CbtParams(self.n, self.n_r, self.phi, self.gamma, self.mu))
        except ParameterError:
            return None


class BlockCollision(RuntimeError):
    pass


@dataclass
class BlockAssignment:
    """Owners of the resource blocks of one span."""

    epoch: int
    n_v: int
    blocks: dict[int, int] = field(default_factory=dict)

    def assign(self, block: int, user: int) -> None:
        if not 0 <= block < self.n_v:
            raise BlockCollision(f"block {block} outside [0, {self.n_v}) in span {self.epoch}")
        if block in self.blocks:
            raise BlockCollision(
                f"block {block} of span {self.epoch} already held by user {self.blocks[block]}"
            )
        self.blocks[block] = user


class SatRecord(NamedTuple):
    sat_id: SatId
    generated_at: int
    consensus_at: float
    served_at: int  # -1 while unserved
    block: int


@dataclass
class RunResult:
    samples: np.ndarray
    backlog: list[int]
    divergent: bool
    generated: int
    unresolved: int = 0
    collisions: int = 0
    order_disagreements: int = 0
    round_delays: list[float] = field(default_factory=list)
    records: list[SatRecord] = field(default_factory=list)
    assignments: dict[int, BlockAssignment] = field(default_factory=dict)
    served_orders: list[list[SatId]] | None = None
    sats: list[SpectrumAccessTransaction] | None = None


def _diverging(backlog: Sequence[int], n_v: int, measured_spans: int) -> bool:
    if not backlog:
        return False
    if backlog[-1] > 10 * n_v * measured_spans:
        return True
    if len(backlog) <= DIVERGENCE_WINDOW:
        return False
    w = np.asarray(backlog[-(DIVERGENCE_WINDOW + 1) :])
    return bool(np.all(np.diff(w) >= 0) and w[-1] > w[0])


def lbt_attempt(m: int, n_v: int, rng: np.random.Generator) -> np.ndarray:
    """``m`` simultaneous contenders each pick a block; True where the pick is unshared."""
    blocks = rng.integers(0, n_v, size=m)
    return np.bincount(blocks, minlength=n_v)[blocks] == 1


def lbt_run(cfg: ScenarioConfig, rng: np.random.Generator) -> RunResult:
    mu, n_r = cfg.mu, cfg.n_r
    horizon = cfg.spans
    lo, hi = cfg.warmup_spans * mu, horizon * mu
    pending = np.empty(0, dtype=np.int64)
    samples, backlog = [], []
    span = 0
    while True:
        # arrivals keep coming after the horizon so late measured requests see normal contention
        fresh = span * mu + rng.integers(0, mu, size=n_r)
        contenders = np.concatenate([pending, fresh])
        won = lbt_attempt(contenders.size, cfg.n_v, rng)
        g = contenders[won]
        samples.append((span + 1) * mu - g[(g >= lo) & (g < hi)])
        pending = contenders[~won]
        span += 1
        if span <= horizon:
            backlog.append(int(pending.size))
        if span >= horizon:
            left = int(np.count_nonzero((pending >= lo) & (pending < hi)))
            if left == 0 or span >= horizon + cfg.measure_spans:
                break
    return RunResult(
        samples=np.concatenate(samples).astype(float),
        backlog=backlog,
        divergent=_diverging(backlog, cfg.n_v, cfg.measure_spans),
        generated=n_r * horizon,
        unresolved=left,
    )


def _round_time(cfg: ScenarioConfig, target: int, rng: np.random.Generator) -> float:
    if cfg.timing is Timing.ASYNC:
        return async_round_time(cfg.n, cfg.phi, target, rng)
    origin = int(rng.integers(cfg.n))
    return float(len(sync_spread(cfg.n, cfg.phi, origin, target, rng)[2]) - 1)


def cbt_run(
    cfg: ScenarioConfig, rng: np.random.Generator, scheme: KeyedHashScheme | None = None
) -> RunResult:
    n, n_r, mu, n_v = cfg.n, cfg.n_r, cfg.mu, cfg.n_v
    scheme = scheme or KeyedHashScheme()
    target = required_holders(cfg.gamma, n)
    header = LedgerHeader(n_v, mu)
    ref = DistributedSpectrumLedger(cfg.reference, header, cfg.policy)
    ledgers = (
        [DistributedSpectrumLedger(u, header, cfg.policy) for u in range(n)]
        if cfg.track_ledgers
        else []
    )

    # dissemination pipeline
    batches: list[tuple[float, list[SpectrumAccessTransaction]]] = []
    round_delays: list[float] = []
    free = 0.0
    for span in range(cfg.spans if n_r else 0):
        users = rng.choice(n, size=n_r, replace=False)
        offsets = rng.integers(0, mu, size=n_r)
        t = max(float((span + 1) * mu), free)
        sats = []
        for i in np.lexsort((users, offsets)):
            u = int(users[i])
            sat = generate_sat(u, span * mu + int(offsets[i]), scheme)
            # all honest receivers reach the same verdict, so check once
            check_signature(sat, scheme)
            receivers, times = spread(n, cfg.phi, u, target, rng, cfg.timing)
            sat.record_many(receivers, np.floor(t + times))
            d1 = float(times[-1]) if times.size else 0.0
            d2 = _round_time(cfg, target, rng)
            round_delays += [d1, d2]
            t += d1 + d2
            sats.append(sat)
        free = t
        batches.append((t, sats))

    # service
    consensus_at: dict[SatId, float] = {}
    served: dict[SatId, tuple[int, int]] = {}
    used: Counter[int] = Counter()
    assignments: dict[int, BlockAssignment] = {}
    collisions = disagreements = 0
    orders: list[list[SatId]] = [[] for _ in ledgers]

    def serve(slot: int) -> None:
        nonlocal collisions, disagreements
        s = slot // mu
        room = n_v - used[s]
        if room <= 0 or not ref.saq:
            return
        ids = ref.serve(slot, room, first_block=used[s])
        sheet = assignments.setdefault(s, BlockAssignment(s, n_v))
        for entry in ref.sah[-len(ids) :]:
            try:
                sheet.assign(entry.block, entry.origin)
            except BlockCollision:
                collisions += 1
            served[entry.sat_id] = (slot, entry.block)
        used[s] += len(ids)
        for led, order in zip(ledgers, orders):
            mine = led.serve(slot, len(ids))
            order.extend(mine)
            disagreements += mine != ids

    next_b = mu
    for c, sats in batches:
        slot = math.ceil(c)
        while ref.saq and next_b <= slot:
            serve(next_b)
            next_b += mu
        for sat in sats:
            consensus_at[sat.sat_id] = c
            ref.admit(sat, n)
            for led in ledgers:
                led.admit(sat, n)
        serve(slot)
        next_b = (slot // mu + 1) * mu
    while ref.saq:
        serve(next_b)
        next_b += mu

    records = []
    lo, hi = cfg.warmup_spans * mu, cfg.spans * mu
    samples = []
    for _, sats in batches:
        for sat in sats:
            sid = sat.sat_id
            slot, block = served[sid]
            records.append(SatRecord(sid, sat.generated_at, consensus_at[sid], slot, block))
            if lo <= sat.generated_at < hi:
                samples.append(slot - sat.generated_at)

    gen = np.sort([r.generated_at for r in records]) if records else np.empty(0)
    done = np.sort([r.served_at for r in records]) if records else np.empty(0)
    bounds = np.arange(1, cfg.spans + 1) * mu
    backlog = (np.searchsorted(gen, bounds) - np.searchsorted(done, bounds)).tolist()

    return RunResult(
        samples=np.asarray(samples, dtype=float),
        backlog=backlog,
        divergent=_diverging(backlog, n_v, cfg.measure_spans),
        generated=len(records),
        collisions=collisions,
        order_disagreements=disagreements,
        round_delays=round_delays,
        records=records,
        assignments=assignments,
        served_orders=orders if ledgers else None,
        sats=[s for _, b in batches for s in b] if ledgers else None,
    )


@dataclass
class LatencyReport:
    etiquette: Etiquette
    mu: int
    samples: np.ndarray
    mean: float
    normalized_mean: float
    divergent: bool
    runs_completed: int
    seed: int
    divergent_runs: int = 0
    run_means: list[float] = field(default_factory=list)
    collisions: int = 0
    order_disagreements: int = 0
    mean_round_delay: float = math.nan
    analytic: LatencyOutcome | None = None
    runs: list[RunResult] = field(default_factory=list, repr=False)


def _run_one(args: tuple[ScenarioConfig, np.random.SeedSequence, int]) -> RunResult:
    cfg, ss, index = args
    rng = np.random.default_rng(ss)
    try:
        if cfg.etiquette is Etiquette.LBT:
            return lbt_run(cfg, rng)
        return cbt_run(cfg, rng)
    except SlotCapExceeded as exc:
        raise SlotCapExceeded(str(exc), seed=(cfg.seed, index)) from exc


def _seeds(cfg: ScenarioConfig, rng: np.random.Generator | None) -> list[np.random.SeedSequence]:
    if rng is None:
        return [np.random.SeedSequence(cfg.seed, spawn_key=(r,)) for r in range(cfg.runs)]
    base = np.random.SeedSequence(int(rng.integers(2**63)))
    return base.spawn(cfg.runs)


def simulate(
    cfg: ScenarioConfig,
    rng: np.random.Generator | None = None,
    jobs: int = 1,
    keep_runs: bool = False,
) -> LatencyReport:
    """Run ``cfg.runs`` independent runs and aggregate them.

    Per-run streams derive from ``cfg.seed`` (or from ``rng`` when given), so
    results do not depend on ``jobs``.  The report is divergent when most
    runs are; its mean is then infinite.
    """
    work = [(cfg, ss, i) for i, ss in enumerate(_seeds(cfg, rng))]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, work, chunksize=max(1, len(work) // (4 * jobs))))
    else:
        results = [_run_one(w) for w in work]

    samples = np.concatenate([r.samples for r in results]) if results else np.empty(0)
    div_runs = sum(r.divergent for r in results)
    divergent = 2 * div_runs > len(results)
    mean = math.inf if divergent else (float(samples.mean()) if samples.size else math.nan)
    delays = [d for r in results for d in r.round_delays]
    return LatencyReport(
        etiquette=cfg.etiquette,
        mu=cfg.mu,
        samples=samples,
        mean=mean,
        normalized_mean=mean / cfg.mu,
        divergent=divergent,
        runs_completed=len(results),
        seed=cfg.seed,
        divergent_runs=div_runs,
        run_means=[float(r.samples.mean()) if r.samples.size else math.nan for r in results],
        collisions=sum(r.collisions for r in results),
        order_disagreements=sum(r.order_disagreements for r in results),
        mean_round_delay=float(np.mean(delays)) if delays else math.nan,
        analytic=cfg.analytic(),
        runs=results if keep_runs else [],
    )


def simulate_lbt(cfg: ScenarioConfig, rng: np.random.Generator | None = None, jobs: int = 1) -> LatencyReport:
    if cfg.etiquette is not Etiquette.LBT:
        raise ParameterError("simulate_lbt needs etiquette=LBT")
    return simulate(cfg, rng, jobs)


def simulate_cbt(cfg: ScenarioConfig, rng: np.random.Generator | None = None, jobs: int = 1) -> LatencyReport:
    if cfg.etiquette is not Etiquette.CBT:
        raise ParameterError("simulate_cbt needs etiquette=CBT")
    return simulate(cfg, rng, jobs)


SWEEP_AXES = ("n_r", "n", "mu", "gamma")
SWEEP_COLUMNS = (
    "axis_value",
    "lbt_norm_sim",
    "lbt_norm_analytic",
    "cbt_norm_sim",
    "cbt_norm_analytic",
    "lbt_divergent",
    "runs",
    "seed",
)


@dataclass
class SweepRow:
    value: float
    config: ScenarioConfig
    lbt: LatencyReport | None
    cbt: LatencyReport | None
    lbt_analytic: LatencyOutcome | None
    cbt_analytic: LatencyOutcome | None
    gossip_delay_analytic: float

    @property
    def lbt_divergent(self) -> bool:
        if self.lbt is not None:
            return self.lbt.divergent
        return self.lbt_analytic is not None and self.lbt_analytic.divergent


def sweep(
    base: ScenarioConfig,
    axis: str,
    values: Iterable[float],
    simulate_runs: bool = True,
    jobs: int = 1,
) -> list[SweepRow]:
    """One row per axis value with LBT/CBT simulation and closed-form columns."""
    if axis not in SWEEP_AXES:
        raise ParameterError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    rows = []
    for v in values:
        cfg = replace(base, **{axis: v})
        lbt_cfg = replace(cfg, etiquette=Etiquette.LBT)
        cbt_cfg = replace(cfg, etiquette=Etiquette.CBT)
        try:
            gd = gossip_dissemination_delay(CbtParams(cfg.n, 1, cfg.phi, cfg.gamma, cfg.mu))
        except ParameterError:
            gd = math.inf
        rows.append(
            SweepRow(
                value=v,
                config=cfg,
                lbt=simulate(lbt_cfg, jobs=jobs) if simulate_runs and cfg.n_r else None,
                cbt=simulate(cbt_cfg, jobs=jobs) if simulate_runs else None,
                lbt_analytic=lbt_cfg.analytic(),
                cbt_analytic=cbt_cfg.analytic(),
                gossip_delay_analytic=gd,
            )
        )
    return rows


def fmt_real(x: float | None) -> str:
    """Six significant digits; ``inf``/``nan`` spelled out, None as empty."""
    if x is None:
        return ""
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.6g}"


def _norm(x: LatencyReport | LatencyOutcome | None) -> float | None:
    if x is None:
        return None
    if isinstance(x, LatencyReport):
        return x.normalized_mean
    return x.normalized


def write_sweep(
    rows: Sequence[SweepRow],
    fh: TextIO,
    delimiter: str = ",",
    comments: Sequence[str] = (),
    extra: Sequence[tuple[str, str]] = (),
) -> None:
    """Write sweep rows with the fixed column set.

    ``extra`` appends ``(column, ScenarioConfig attribute)`` pairs, e.g. ``("mu", "mu")``.
    """
    for line in comments:
        fh.write(f"# {line}\n")
    w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
    w.writerow(list(SWEEP_COLUMNS) + [c for c, _ in extra])
    for r in rows:
        runs = r.config.runs if (r.lbt or r.cbt) else 0
        w.writerow(
            [
                fmt_real(float(r.value)),
                fmt_real(_norm(r.lbt)),
                fmt_real(_norm(r.lbt_analytic)),
                fmt_real(_norm(r.cbt)),
                fmt_real(_norm(r.cbt_analytic)),
                "true" if r.lbt_divergent else "false",
                runs,
                r.config.seed,
            ]
            + [fmt_real(float(getattr(r.config, a))) for _, a in extra]
        )

