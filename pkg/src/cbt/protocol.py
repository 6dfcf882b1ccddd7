"""Spectrum access transactions, per-user ledgers and consensus policies.

A transaction (SAT) carries its origin's generation timestamp, a signature
over a canonical encoding, and the timestamps at which other users verified
it.  Each user folds those timestamps into a consensus timestamp and keeps
its spectrum access queue (SAQ) sorted by the scheduling rule; served entries
move to the append-only spectrum access history (SAH).

Canonical signing payload: three unsigned 64-bit big-endian integers
``origin, generated_at, sequence`` (24 bytes).
"""

from __future__ import annotations

import bisect
import enum
import hashlib
import hmac
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Protocol

import numpy as np

__all__ = [
    "ProtocolError",
    "InvalidSignature",
    "DuplicateSat",
    "SequencingError",
    "SatId",
    "SpectrumAccessTransaction",
    "SignatureScheme",
    "KeyedHashScheme",
    "Aggregation",
    "Scheduling",
    "Normalization",
    "ConsensusPolicy",
    "LedgerHeader",
    "SaqEntry",
    "SahEntry",
    "DistributedSpectrumLedger",
    "encode_sat",
    "sat_to_bytes",
    "sat_from_bytes",
    "generate_sat",
    "verify_sat",
    "consensus_timestamp",
    "enqueue_sat",
    "serve_epoch",
    "format_dump_line",
    "parse_dump_line",
]

_PAYLOAD = struct.Struct(">QQQ")
_PAIR = struct.Struct(">QQ")
_COUNTS = struct.Struct(">II")


class ProtocolError(Exception):
    pass


class InvalidSignature(ProtocolError):
    """A SAT failed signature verification and must not be admitted."""


class DuplicateSat(ProtocolError):
    pass


class SequencingError(ProtocolError):
    """An operation was invoked at the wrong point of the span cycle."""


class SatId(NamedTuple):
    origin: int
    generated_at: int
    sequence: int

    def __str__(self) -> str:
        return f"{self.origin}:{self.generated_at}:{self.sequence}"

    @classmethod
    def parse(cls, text: str) -> "SatId":
        a, b, c = text.split(":")
        return cls(int(a), int(b), int(c))


@dataclass
class SpectrumAccessTransaction:
    """One spectrum access request.

    ``verifications`` maps verifier id to the slot at which it verified the
    SAT.  The record is shared by every holder in the simulators, so it is
    mutated in place; entries are only ever added.
    """

    origin: int
    generated_at: int
    sequence: int
    signature: bytes
    verifications: dict[int, int] = field(default_factory=dict)

    @property
    def sat_id(self) -> SatId:
        return SatId(self.origin, self.generated_at, self.sequence)

    def record(self, verifier: int, now: int) -> bool:
        """Add one verification; returns False if ``verifier`` already recorded."""
        if verifier == self.origin:
            raise ProtocolError("the origin cannot verify its own SAT")
        if verifier in self.verifications:
            return False
        if now < self.generated_at:
            raise ProtocolError(
                f"verification at {now} precedes generation at {self.generated_at}"
            )
        self.verifications[verifier] = int(now)
        return True

    def record_many(self, verifiers: np.ndarray, stamps: np.ndarray) -> None:
        """Bulk form of :meth:`record` for simulator hot paths.

        Verifiers that already hold an entry keep it.
        """
        verifiers = np.asarray(verifiers, dtype=np.int64)
        stamps = np.asarray(stamps, dtype=np.int64)
        if verifiers.size == 0:
            return
        if np.any(verifiers == self.origin):
            raise ProtocolError("the origin cannot verify its own SAT")
        if stamps.min() < self.generated_at:
            raise ProtocolError("verification precedes generation")
        fresh = dict(zip(verifiers.tolist(), stamps.tolist()))
        fresh.update(self.verifications)
        self.verifications = fresh

    def timestamps(self) -> list[int]:
        """Generation timestamp followed by verifications in verifier order."""
        return [self.generated_at] + [self.verifications[k] for k in sorted(self.verifications)]


class SignatureScheme(Protocol):
    def keypair(self, user: int) -> tuple[bytes, bytes]: ...

    def sign(self, private_key: bytes, message: bytes) -> bytes: ...

    def verify(self, public_key: bytes, message: bytes, signature: bytes) -> bool: ...

    def next_nonce(self, user: int) -> int: ...


class KeyedHashScheme:
    """Deterministic HMAC-SHA256 stand-in for a public-key signature.

    Each user's key is derived from ``master`` and the user id; the "public"
    key equals the private one, so this offers no security.  It exists to
    exercise the validity path quickly and reproducibly.  The scheme also
    hands out per-user nonces used as SAT sequence numbers.
    """

    def __init__(self, master: bytes = b"cbt") -> None:
        self._master = master
        self._keys: dict[int, bytes] = {}
        self._nonces: Counter[int] = Counter()

    def keypair(self, user: int) -> tuple[bytes, bytes]:
        key = self._keys.get(user)
        if key is None:
            key = hashlib.sha256(self._master + struct.pack(">Q", user)).digest()
            self._keys[user] = key
        return key, key

    def sign(self, private_key: bytes, message: bytes) -> bytes:
        return hmac.new(private_key, message, hashlib.sha256).digest()

    def verify(self, public_key: bytes, message: bytes, signature: bytes) -> bool:
        return hmac.compare_digest(self.sign(public_key, message), signature)

    def next_nonce(self, user: int) -> int:
        n = self._nonces[user]
        self._nonces[user] = n + 1
        return n


def encode_sat(origin: int, generated_at: int, sequence: int) -> bytes:
    return _PAYLOAD.pack(origin, generated_at, sequence)


def sat_to_bytes(sat: SpectrumAccessTransaction) -> bytes:
    """Full binary form: payload, signature length and verification count, signature, pairs."""
    pairs = sorted(sat.verifications.items())
    out = [
        encode_sat(sat.origin, sat.generated_at, sat.sequence),
        _COUNTS.pack(len(sat.signature), len(pairs)),
        sat.signature,
    ]
    out.extend(_PAIR.pack(k, v) for k, v in pairs)
    return b"".join(out)


def sat_from_bytes(data: bytes) -> SpectrumAccessTransaction:
    origin, generated_at, sequence = _PAYLOAD.unpack_from(data, 0)
    off = _PAYLOAD.size
    sig_len, count = _COUNTS.unpack_from(data, off)
    off += _COUNTS.size
    signature = bytes(data[off : off + sig_len])
    off += sig_len
    verifications = {}
    for _ in range(count):
        k, v = _PAIR.unpack_from(data, off)
        off += _PAIR.size
        verifications[k] = v
    if off != len(data):
        raise ValueError(f"{len(data) - off} trailing bytes after SAT record")
    return SpectrumAccessTransaction(origin, generated_at, sequence, signature, verifications)


def generate_sat(
    user: int, now: int, scheme: SignatureScheme, sequence: int | None = None
) -> SpectrumAccessTransaction:
    if sequence is None:
        sequence = scheme.next_nonce(user)
    _, private = scheme.keypair(user)
    signature = scheme.sign(private, encode_sat(user, now, sequence))
    return SpectrumAccessTransaction(user, int(now), sequence, signature)


def check_signature(sat: SpectrumAccessTransaction, scheme: SignatureScheme) -> None:
    public, _ = scheme.keypair(sat.origin)
    payload = encode_sat(sat.origin, sat.generated_at, sat.sequence)
    if not scheme.verify(public, payload, sat.signature):
        raise InvalidSignature(f"SAT {sat.sat_id} carries an invalid signature")


def verify_sat(
    verifier: int, sat: SpectrumAccessTransaction, now: int, scheme: SignatureScheme
) -> SpectrumAccessTransaction:
    """Check the origin's signature, then stamp ``now`` for ``verifier``.

    Re-receipt by a verifier already on record leaves the SAT unchanged.
    """
    if verifier == sat.origin:
        raise ProtocolError("the origin cannot verify its own SAT")
    check_signature(sat, scheme)
    sat.record(verifier, now)
    return sat


class Aggregation(enum.Enum):
    MEAN = "mean"
    MEDIAN = "median"


class Scheduling(enum.Enum):
    FIRST_VERIFIED_FIRST_SERVED = "ffs"
    FAIRNESS = "fair"


class Normalization(enum.Enum):
    BY_COUNT = "count"
    BY_N = "n"


@dataclass(frozen=True)
class ConsensusPolicy:
    aggregation: Aggregation = Aggregation.MEAN
    exclude_observer: bool = True
    scheduling: Scheduling = Scheduling.FIRST_VERIFIED_FIRST_SERVED
    normalization: Normalization = Normalization.BY_COUNT
    include_generated: bool = True
    # spans of history counted by the fairness rule; None counts everything
    fairness_window: int | None = None


def consensus_timestamp(
    sat: SpectrumAccessTransaction, observer: int, policy: ConsensusPolicy, n: int
) -> float:
    """Aggregate the SAT's timestamps as seen by ``observer``.

    The median is the lower median.  ``Normalization.BY_N`` divides the sum
    by the population size ``n`` regardless of how many timestamps are
    present.
    """
    values = [
        t
        for k, t in sat.verifications.items()
        if not (policy.exclude_observer and k == observer)
    ]
    if policy.include_generated:
        values.append(sat.generated_at)
    if not values:
        raise ValueError(f"no timestamps visible to observer {observer} for SAT {sat.sat_id}")
    if policy.aggregation is Aggregation.MEDIAN:
        arr = np.asarray(values, dtype=np.int64)
        k = (arr.size - 1) // 2
        return float(np.partition(arr, k)[k])
    total = float(sum(values))
    if policy.normalization is Normalization.BY_N:
        return total / n
    return total / len(values)


@dataclass(frozen=True)
class LedgerHeader:
    n_v: int
    mu: int
    epoch: int = 0

    def __post_init__(self) -> None:
        if self.n_v < 1 or self.mu < 1:
            raise ValueError("header needs n_v >= 1 and mu >= 1")


class SaqEntry(NamedTuple):
    key: tuple
    sat_id: SatId
    t_hat: float
    sat: SpectrumAccessTransaction | None


class SahEntry(NamedTuple):
    sat_id: SatId
    origin: int
    served_at: int
    block: int


class DistributedSpectrumLedger:
    """One user's replica: header, SAQ, SAH and consensus policy."""

    def __init__(self, owner: int, header: LedgerHeader, policy: ConsensusPolicy | None = None):
        self.owner = owner
        self.header = header
        self.policy = policy or ConsensusPolicy()
        self.saq: list[SaqEntry] = []
        self.sah: list[SahEntry] = []
        self._known: set[SatId] = set()
        self._served: Counter[int] = Counter()

    def __len__(self) -> int:
        return len(self.saq)

    def __contains__(self, sat_id: SatId) -> bool:
        return sat_id in self._known

    def served_count(self, origin: int) -> int:
        w = self.policy.fairness_window
        if w is None:
            return self._served[origin]
        since = (self.header.epoch - w) * self.header.mu
        return sum(1 for e in self.sah if e.origin == origin and e.served_at >= since)

    def _key(self, sat_id: SatId, t_hat: float) -> tuple:
        if self.policy.scheduling is Scheduling.FAIRNESS:
            return (self.served_count(sat_id.origin), t_hat, sat_id.origin, sat_id)
        return (t_hat, sat_id.origin, sat_id)

    def enqueue(
        self, sat_id: SatId, t_hat: float, sat: SpectrumAccessTransaction | None = None
    ) -> None:
        if sat_id in self._known:
            raise DuplicateSat(f"SAT {sat_id} already known to ledger {self.owner}")
        entry = SaqEntry(self._key(sat_id, t_hat), sat_id, float(t_hat), sat)
        bisect.insort(self.saq, entry, key=lambda e: e.key)
        self._known.add(sat_id)

    def admit(self, sat: SpectrumAccessTransaction, n: int, scheme: SignatureScheme | None = None) -> float:
        """Validate (when a scheme is given), compute the local consensus timestamp, enqueue."""
        if scheme is not None:
            check_signature(sat, scheme)
        t_hat = consensus_timestamp(sat, self.owner, self.policy, n)
        self.enqueue(sat.sat_id, t_hat, sat)
        return t_hat

    def serve(
        self, served_at: Iterable[int] | int, limit: int | None = None, first_block: int = 0
    ) -> list[SatId]:
        """Pop up to ``limit`` (default ``n_v``) head entries into the SAH.

        ``served_at`` is either a single slot for every served entry or one
        slot per block in queue order.  Blocks are numbered from
        ``first_block``.  Fairness keys are refreshed after the pops.
        """
        cap = self.header.n_v if limit is None else min(limit, self.header.n_v)
        k = min(cap, len(self.saq))
        if isinstance(served_at, (int, np.integer)):
            slots = [int(served_at)] * k
        else:
            slots = [int(s) for s in served_at][:k]
            if len(slots) < k:
                raise ValueError("fewer service slots than served entries")
        if self.sah and slots and slots[0] < self.sah[-1].served_at:
            raise SequencingError("service slots must not precede earlier service")
        head, self.saq = self.saq[:k], self.saq[k:]
        out = []
        for block, (entry, slot) in enumerate(zip(head, slots), start=first_block):
            self.sah.append(SahEntry(entry.sat_id, entry.sat_id.origin, slot, block))
            self._served[entry.sat_id.origin] += 1
            out.append(entry.sat_id)
        if self.policy.scheduling is Scheduling.FAIRNESS and self.saq:
            self.saq = sorted(
                (e._replace(key=self._key(e.sat_id, e.t_hat)) for e in self.saq),
                key=lambda e: e.key,
            )
        return out

    def advance_epoch(self) -> None:
        h = self.header
        self.header = LedgerHeader(h.n_v, h.mu, h.epoch + 1)

    def update_header(self, n_v: int, now: int) -> None:
        """Replace the accessible block count; only allowed on a span boundary."""
        if now % self.header.mu:
            raise SequencingError(f"header update at slot {now} is off the span boundary")
        self.header = LedgerHeader(n_v, self.header.mu, self.header.epoch)

    def check_invariants(self) -> None:
        keys = [e.key for e in self.saq]
        assert keys == sorted(keys), "SAQ out of order"
        ids = [e.sat_id for e in self.saq] + [e.sat_id for e in self.sah]
        assert len(ids) == len(set(ids)), "SAT present twice"
        times = [e.served_at for e in self.sah]
        assert times == sorted(times), "SAH served_at decreases"

    def dump(self) -> str:
        """Line-oriented dump of the SAQ; see :func:`format_dump_line`."""
        lines = []
        for e in self.saq:
            if e.sat is None:
                raise ValueError(f"SAQ entry {e.sat_id} has no SAT attached")
            lines.append(format_dump_line(e.sat, e.t_hat))
        return "".join(line + "\n" for line in lines)


def format_dump_line(sat: SpectrumAccessTransaction, t_hat: float) -> str:
    """``sat_id origin generated_at verifier@slot,... t_hat`` separated by spaces."""
    pairs = ",".join(f"{k}@{v}" for k, v in sorted(sat.verifications.items())) or "-"
    return f"{sat.sat_id} {sat.origin} {sat.generated_at} {pairs} {t_hat!r}"


def parse_dump_line(line: str) -> tuple[SatId, int, int, dict[int, int], float]:
    sid, origin, gen, pairs, t_hat = line.split()
    verifications = {}
    if pairs != "-":
        for item in pairs.split(","):
            k, v = item.split("@")
            verifications[int(k)] = int(v)
    return SatId.parse(sid), int(origin), int(gen), verifications, float(t_hat)


def enqueue_sat(
    dsl: DistributedSpectrumLedger, sat_id: SatId, t_hat: float
) -> DistributedSpectrumLedger:
    dsl.enqueue(sat_id, t_hat)
    return dsl


def serve_epoch(dsl: DistributedSpectrumLedger, now: int, rng: np.random.Generator | None = None) -> list[SatId]:
    """Serve one span's worth of the SAQ at the boundary ``now``.

    The k-th served entry takes block k.  Service slots are distinct slots of
    the span in queue order: evenly spaced by block index, or a sorted
    uniform draw when ``rng`` is given.
    """
    h = dsl.header
    if now % h.mu:
        raise SequencingError(f"slot {now} is not a span boundary (mu={h.mu})")
    k = min(h.n_v, len(dsl.saq))
    if rng is None:
        slots = [now + (b * h.mu) // h.n_v for b in range(k)]
    else:
        slots = sorted((now + rng.choice(h.mu, size=k, replace=False)).tolist())
    served = dsl.serve(slots)
    dsl.advance_epoch()
    return served
