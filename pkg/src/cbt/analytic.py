"""Closed-form latency model for LBT and CBT.

LBT: every span, ``n_r`` fresh requesters plus the backed-off ones pick one of
``n_v`` blocks uniformly; a collision costs a whole span of ``mu`` slots.  The
mean contender count follows a monotone recursion whose fixed point fixes the
per-attempt success probability.

CBT: a push gossip spreads each access transaction following a logistic
curve; consensus needs two dissemination rounds per transaction and the
``n_r`` transactions of a span are disseminated one after another.

All functions are pure.  Divergence of LBT is returned as a value
(``LatencyOutcome.divergent``) rather than raised, except by
:func:`lbt_fixed_point`, which has no root to return.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

__all__ = [
    "ParameterError",
    "Divergent",
    "LbtParams",
    "CbtParams",
    "LatencyOutcome",
    "lbt_backlog_sequence",
    "lbt_convergence_threshold",
    "lbt_fixed_point",
    "lbt_latency",
    "gossip_fraction",
    "gossip_dissemination_delay",
    "cbt_latency",
    "crossing_point",
    "DEFAULT_TOL",
]

DEFAULT_TOL = 1e-9


class ParameterError(ValueError):
    """Raised for parameters outside the model's domain."""


class Divergent(ArithmeticError):
    """The LBT backlog recursion has no stationary value for these parameters."""


def _positive_int(name: str, value: int, minimum: int = 1) -> None:
    if isinstance(value, bool) or int(value) != value or value < minimum:
        raise ParameterError(f"{name} must be an integer >= {minimum}, got {value!r}")


@dataclass(frozen=True)
class LbtParams:
    n_r: int
    n_v: int
    mu: int

    def __post_init__(self) -> None:
        _positive_int("n_r", self.n_r)
        _positive_int("n_v", self.n_v, 2)
        _positive_int("mu", self.mu)
        if self.n_r > self.n_v:
            raise ParameterError(f"n_r={self.n_r} exceeds n_v={self.n_v}")

    @property
    def q(self) -> float:
        """Probability that one other contender misses a given block."""
        return 1.0 - 1.0 / self.n_v


@dataclass(frozen=True)
class CbtParams:
    n: int
    n_r: int
    phi: int = 1
    gamma: float = 0.999
    mu: int = 1000

    def __post_init__(self) -> None:
        _positive_int("n", self.n, 2)
        _positive_int("n_r", self.n_r, 0)
        _positive_int("phi", self.phi)
        _positive_int("mu", self.mu)
        if not 0.0 < self.gamma < 1.0:
            raise ParameterError(f"gamma must lie in (0, 1), got {self.gamma!r}")


@dataclass(frozen=True)
class LatencyOutcome:
    """End-to-end latency in slots; ``value`` is ``inf`` when divergent."""

    value: float
    mu: int

    @classmethod
    def divergent_for(cls, mu: int) -> "LatencyOutcome":
        return cls(math.inf, mu)

    @property
    def divergent(self) -> bool:
        return math.isinf(self.value)

    @property
    def normalized(self) -> float:
        return self.value / self.mu


def lbt_backlog_sequence(p: LbtParams, steps: int) -> list[float]:
    """Mean number of contenders at the first ``steps`` span boundaries."""
    _positive_int("steps", steps)
    q = p.q
    x = float(p.n_r)
    out = [x]
    for _ in range(steps - 1):
        x = p.n_r + x * (1.0 - q ** (x - 1.0))
        out.append(x)
    return out


def lbt_convergence_threshold(n_v: int) -> float:
    """Largest ``n_r`` for which the backlog recursion settles."""
    _positive_int("n_v", n_v, 2)
    q = 1.0 - 1.0 / n_v
    return -1.0 / (math.e * q * math.log(q))


def _throughput_argmax(n_v: int) -> float:
    # maximiser of x * q**(x - 1)
    return 1.0 - 1.0 / math.log(1.0 - 1.0 / n_v)


def lbt_fixed_point(p: LbtParams, tol: float = DEFAULT_TOL) -> float:
    """Smallest root of ``x q^(x-1) = n_r`` found by bisection.

    The root lies between ``n_r`` (where the left side is at most ``n_r``) and
    the maximiser of ``x q^(x-1)``.  Raises :class:`Divergent` when ``n_r``
    exceeds the convergence threshold.
    """
    if not tol > 0:
        raise ParameterError(f"tol must be positive, got {tol!r}")
    if p.n_r > lbt_convergence_threshold(p.n_v):
        raise Divergent(f"n_r={p.n_r} exceeds the LBT threshold for n_v={p.n_v}")
    q = p.q

    def residual(x: float) -> float:
        return x * q ** (x - 1.0) - p.n_r

    lo, hi = float(p.n_r), _throughput_argmax(p.n_v)
    if abs(residual(lo)) < tol:
        return lo
    if residual(hi) <= 0.0:
        # n_r sits on the threshold up to rounding: the double root is the maximiser
        return hi
    mid = lo
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        r = residual(mid)
        if abs(r) < tol or hi - lo < 1e-15 * hi:
            break
        if r < 0.0:
            lo = mid
        else:
            hi = mid
    return mid


def lbt_latency(p: LbtParams, tol: float = DEFAULT_TOL) -> LatencyOutcome:
    try:
        x_hat = lbt_fixed_point(p, tol)
    except Divergent:
        return LatencyOutcome.divergent_for(p.mu)
    success = p.q ** (x_hat - 1.0)
    return LatencyOutcome(p.mu / success - p.mu / 2.0, p.mu)


def gossip_fraction(t: float, t0: float, c: CbtParams) -> float:
    """Fraction of users holding a transaction ``t - t0`` slots after its birth."""
    if t < t0:
        raise ParameterError(f"t={t!r} precedes t0={t0!r}")
    return 1.0 / (1.0 + (c.n - 1) * math.exp(-c.phi * (t - t0)))


def gossip_dissemination_delay(c: CbtParams, exact: bool = False) -> float:
    """Slots until a fraction ``gamma`` of the users hold a transaction.

    The default uses ``1 + (n-1) gamma`` in the numerator of the log.  With
    ``exact=True`` the logistic curve is inverted exactly, which replaces the
    numerator by ``(n-1) gamma``; the two differ by O(1/n).
    """
    g = c.gamma
    num = g * (c.n - 1) if exact else 1.0 + (c.n - 1) * g
    return math.log(num / (1.0 - g)) / c.phi


def cbt_latency(c: CbtParams, exact: bool = False) -> LatencyOutcome:
    """Two dissemination rounds for each of the span's ``n_r`` requests, plus ``mu/2``."""
    rounds = 2 * c.n_r * gossip_dissemination_delay(c, exact=exact)
    return LatencyOutcome(rounds + c.mu / 2.0, c.mu)


def crossing_point(
    n: int,
    n_v: int,
    phi: int,
    gamma: float,
    mu: int,
    n_r_range: tuple[int, int],
) -> int | None:
    """Smallest ``n_r`` in the inclusive range where CBT is no slower than LBT."""
    lo, hi = n_r_range
    if lo > hi or lo < 1 or hi > n_v:
        raise ParameterError(f"n_r range {n_r_range!r} must be non-empty and within [1, {n_v}]")
    for n_r in range(lo, hi + 1):
        lbt = lbt_latency(LbtParams(n_r, n_v, mu))
        cbt = cbt_latency(CbtParams(n, n_r, phi, gamma, mu))
        if lbt.divergent or cbt.value <= lbt.value:
            return n_r
    return None
