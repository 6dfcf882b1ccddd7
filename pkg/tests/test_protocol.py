import dataclasses
import statistics

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cbt.protocol import (
    Aggregation,
    ConsensusPolicy,
    DistributedSpectrumLedger,
    DuplicateSat,
    InvalidSignature,
    KeyedHashScheme,
    LedgerHeader,
    Normalization,
    ProtocolError,
    SatId,
    Scheduling,
    SequencingError,
    SpectrumAccessTransaction,
    consensus_timestamp,
    encode_sat,
    enqueue_sat,
    format_dump_line,
    generate_sat,
    parse_dump_line,
    sat_from_bytes,
    sat_to_bytes,
    serve_epoch,
    verify_sat,
)

MEDIAN = ConsensusPolicy(aggregation=Aggregation.MEDIAN)
MEDIAN_ALL = ConsensusPolicy(aggregation=Aggregation.MEDIAN, exclude_observer=False)
ALICE, BOB, CAROL, DAVID, EVE = range(5)


@pytest.fixture
def scheme():
    return KeyedHashScheme(b"test")


def _sat(origin, gen, verifications, seq=0):
    return SpectrumAccessTransaction(origin, gen, seq, b"", dict(verifications))


class TestSat:
    def test_generate(self, scheme):
        sat = generate_sat(1, 0, scheme)
        assert (sat.origin, sat.generated_at, sat.verifications) == (1, 0, {})

    def test_distinct_ids_same_slot(self, scheme):
        a, b = generate_sat(1, 7, scheme), generate_sat(1, 7, scheme)
        assert a.sat_id != b.sat_id

    def test_signature_round_trip(self, scheme):
        sat = generate_sat(3, 11, scheme)
        pub, _ = scheme.keypair(3)
        assert scheme.verify(pub, encode_sat(3, 11, sat.sequence), sat.signature)
        assert not scheme.verify(pub, encode_sat(3, 12, sat.sequence), sat.signature)

    def test_encoding_layout(self):
        assert encode_sat(1, 2, 3) == bytes(7) + b"\x01" + bytes(7) + b"\x02" + bytes(7) + b"\x03"

    def test_verify_and_idempotence(self, scheme):
        sat = generate_sat(1, 0, scheme)
        verify_sat(2, sat, 3, scheme)
        assert sat.verifications == {2: 3}
        verify_sat(2, sat, 5, scheme)
        assert sat.verifications == {2: 3}

    def test_tampered_timestamp_rejected(self, scheme):
        sat = generate_sat(1, 0, scheme)
        forged = dataclasses.replace(sat, generated_at=5)
        with pytest.raises(InvalidSignature):
            verify_sat(2, forged, 6, scheme)

    def test_origin_cannot_verify(self, scheme):
        sat = generate_sat(1, 0, scheme)
        with pytest.raises(ProtocolError):
            verify_sat(1, sat, 1, scheme)

    def test_verification_not_before_generation(self, scheme):
        sat = generate_sat(1, 10, scheme)
        verify_sat(2, sat, 10, scheme)  # same slot is allowed
        with pytest.raises(ProtocolError):
            verify_sat(3, sat, 9, scheme)

    def test_bulk_record_keeps_existing(self, scheme):
        sat = generate_sat(0, 0, scheme)
        sat.record(4, 2)
        sat.record_many(np.array([3, 4, 5]), np.array([1, 9, 1]))
        assert sat.verifications == {3: 1, 4: 2, 5: 1}

    def test_binary_round_trip(self, scheme):
        sat = generate_sat(9, 4, scheme)
        for v, t in [(2, 6), (1, 5), (7, 9)]:
            verify_sat(v, sat, t, scheme)
        back = sat_from_bytes(sat_to_bytes(sat))
        assert back == sat
        verify_sat(3, back, 10, scheme)

    def test_dump_line_round_trip(self, scheme):
        sat = generate_sat(2, 0, scheme)
        verify_sat(5, sat, 4, scheme)
        verify_sat(1, sat, 3, scheme)
        line = format_dump_line(sat, 2.5)
        assert line == f"2:0:{sat.sequence} 2 0 1@3,5@4 2.5"
        assert parse_dump_line(line) == (sat.sat_id, 2, 0, {1: 3, 5: 4}, 2.5)


class TestConsensusTimestamp:
    """Alice/Bob/Carol/David: SAT_a verified at 2 by B, C, D; SAT_b at 1 by C, D and 98 by a cheating Alice."""

    sat_a = _sat(ALICE, 0, {BOB: 2, CAROL: 2, DAVID: 2})
    sat_b = _sat(BOB, 0, {CAROL: 1, DAVID: 1, ALICE: 98})

    def test_median_vector(self):
        assert consensus_timestamp(self.sat_a, EVE, MEDIAN, 5) == 2
        assert consensus_timestamp(self.sat_b, EVE, MEDIAN, 5) == 1

    def test_mean_is_manipulated(self):
        no_gen = ConsensusPolicy(include_generated=False)
        assert consensus_timestamp(self.sat_b, EVE, no_gen, 5) == pytest.approx(100 / 3)
        assert consensus_timestamp(self.sat_b, EVE, ConsensusPolicy(), 5) == 25.0
        assert consensus_timestamp(self.sat_a, EVE, ConsensusPolicy(), 5) == 1.5

    def test_observer_exclusion(self):
        sat = _sat(0, 0, {1: 4, 2: 8})
        assert consensus_timestamp(sat, 1, ConsensusPolicy(), 3) == 4.0
        assert consensus_timestamp(sat, 1, ConsensusPolicy(exclude_observer=False), 3) == 4.0
        assert consensus_timestamp(sat, 2, ConsensusPolicy(), 3) == 2.0
        by_n = ConsensusPolicy(normalization=Normalization.BY_N)
        assert consensus_timestamp(sat, 2, by_n, 3) == pytest.approx(4 / 3)

    def test_lower_median(self):
        sat = _sat(0, 0, {1: 1, 2: 2, 3: 3})
        assert consensus_timestamp(sat, 9, MEDIAN, 4) == 1

    def test_empty_rejected(self):
        no_gen = ConsensusPolicy(include_generated=False)
        with pytest.raises(ValueError):
            consensus_timestamp(_sat(0, 0, {1: 1}), 1, no_gen, 2)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 10**6))
    def test_median_cheat_tolerance(self, inflation):
        cheated = _sat(BOB, 0, {CAROL: 1, DAVID: 1, ALICE: inflation})
        for obs in (EVE, CAROL):
            b = consensus_timestamp(cheated, obs, MEDIAN_ALL, 5)
            a = consensus_timestamp(self.sat_a, obs, MEDIAN_ALL, 5)
            assert b < a

    @settings(max_examples=100, deadline=None)
    @given(
        st.integers(0, 500),
        st.lists(st.integers(0, 400), min_size=2, max_size=60),
    )
    def test_by_n_agreement_bound(self, gen, offsets):
        n = len(offsets) + 1
        sat = _sat(0, gen, {k + 1: gen + d for k, d in enumerate(offsets)})
        pol = ConsensusPolicy(normalization=Normalization.BY_N)
        stamps = sat.timestamps()
        spread = (max(stamps) - min(stamps)) / n
        views = [consensus_timestamp(sat, j, pol, n) for j in sat.verifications]
        assert max(views) - min(views) <= spread + 1e-9

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 1000), min_size=1, max_size=40), st.integers(0, 50))
    def test_full_view_median_agrees(self, offsets, gen):
        sat = _sat(0, gen, {k + 1: gen + d for k, d in enumerate(offsets)})
        views = {consensus_timestamp(sat, j, MEDIAN_ALL, 50) for j in range(len(offsets) + 2)}
        assert views == {statistics.median_low(sat.timestamps())}


def _ledger(policy=None, n_v=100, mu=10):
    return DistributedSpectrumLedger(0, LedgerHeader(n_v, mu), policy)


class TestLedger:
    def test_sorted_insert(self):
        dsl = _ledger()
        enqueue_sat(dsl, SatId(1, 0, 0), 5.0)
        enqueue_sat(dsl, SatId(2, 0, 0), 3.0)
        assert [e.t_hat for e in dsl.saq] == [3.0, 5.0]

    def test_tie_break_by_origin(self):
        dsl = _ledger()
        enqueue_sat(dsl, SatId(7, 0, 0), 4.0)
        enqueue_sat(dsl, SatId(2, 1, 0), 4.0)
        assert [e.sat_id.origin for e in dsl.saq] == [2, 7]

    def test_duplicate(self):
        dsl = _ledger()
        enqueue_sat(dsl, SatId(1, 0, 0), 1.0)
        with pytest.raises(DuplicateSat):
            enqueue_sat(dsl, SatId(1, 0, 0), 2.0)
        serve_epoch(dsl, 0)
        with pytest.raises(DuplicateSat):
            enqueue_sat(dsl, SatId(1, 0, 0), 2.0)

    def test_fairness_key_dominates(self):
        dsl = _ledger(ConsensusPolicy(scheduling=Scheduling.FAIRNESS))
        for s in range(3):
            enqueue_sat(dsl, SatId(1, s, 0), float(s))
        serve_epoch(dsl, 0)
        enqueue_sat(dsl, SatId(1, 50, 0), 50.0)
        enqueue_sat(dsl, SatId(2, 90, 0), 90.0)
        assert [e.sat_id.origin for e in dsl.saq] == [2, 1]

    def test_fairness_rekeys_after_service(self):
        dsl = _ledger(ConsensusPolicy(scheduling=Scheduling.FAIRNESS), n_v=1)
        enqueue_sat(dsl, SatId(1, 0, 0), 1.0)
        enqueue_sat(dsl, SatId(1, 0, 1), 2.0)
        enqueue_sat(dsl, SatId(2, 0, 0), 3.0)
        assert serve_epoch(dsl, 0) == [SatId(1, 0, 0)]
        assert [e.sat_id.origin for e in dsl.saq] == [2, 1]
        dsl.check_invariants()

    def test_fairness_window(self):
        pol = ConsensusPolicy(scheduling=Scheduling.FAIRNESS, fairness_window=1)
        dsl = _ledger(pol, n_v=5, mu=10)
        enqueue_sat(dsl, SatId(1, 0, 0), 0.0)
        serve_epoch(dsl, 0)
        assert dsl.served_count(1) == 1
        serve_epoch(dsl, 10)
        serve_epoch(dsl, 20)
        assert dsl.served_count(1) == 0

    @pytest.mark.parametrize("size,served,left", [(3, 3, 0), (150, 100, 50), (0, 0, 0)])
    def test_serve_epoch(self, size, served, left):
        dsl = _ledger(n_v=100, mu=1000)
        for k in range(size):
            enqueue_sat(dsl, SatId(k, 0, 0), float(size - k))
        before = [e.sat_id for e in dsl.saq]
        out = serve_epoch(dsl, 2000)
        assert out == before[:served]
        assert [e.sat_id for e in dsl.saq] == before[served:]
        assert dsl.header.epoch == 1
        assert [e.block for e in dsl.sah] == list(range(served))
        assert all(2000 <= e.served_at < 3000 for e in dsl.sah)
        dsl.check_invariants()

    def test_serve_epoch_random_slots(self):
        dsl = _ledger(n_v=20, mu=50)
        for k in range(20):
            enqueue_sat(dsl, SatId(k, 0, 0), float(k))
        serve_epoch(dsl, 100, np.random.default_rng(3))
        slots = [e.served_at for e in dsl.sah]
        assert slots == sorted(set(slots)) and all(100 <= s < 150 for s in slots)

    def test_off_boundary(self):
        with pytest.raises(SequencingError):
            serve_epoch(_ledger(mu=10), 5)
        with pytest.raises(SequencingError):
            _ledger(mu=10).update_header(50, 3)

    def test_admit_rejects_invalid(self, scheme):
        dsl = _ledger()
        sat = generate_sat(1, 0, scheme)
        bad = dataclasses.replace(sat, signature=b"x" * 32)
        with pytest.raises(InvalidSignature):
            dsl.admit(bad, 10, scheme)
        assert len(dsl) == 0
        dsl.admit(sat, 10, scheme)
        assert sat.sat_id in dsl

    def test_dump(self, scheme):
        dsl = _ledger()
        sats = [generate_sat(u, u, scheme) for u in (3, 1)]
        for s in sats:
            verify_sat(0 if s.origin else 2, s, s.generated_at + 1, scheme)
            dsl.admit(s, 4, scheme)
        lines = dsl.dump().splitlines()
        assert [parse_dump_line(x)[0] for x in lines] == [sats[1].sat_id, sats[0].sat_id]

    @settings(max_examples=60, deadline=None)
    @given(
        st.lists(
            st.tuples(st.integers(0, 9), st.floats(0, 100, allow_nan=False), st.booleans()),
            max_size=60,
        ),
        st.sampled_from(list(Scheduling)),
    )
    def test_invariants_under_random_ops(self, ops, sched):
        dsl = _ledger(ConsensusPolicy(scheduling=sched), n_v=3, mu=10)
        now, seq, enq = 0, 0, 0
        for origin, t_hat, serve in ops:
            if serve:
                serve_epoch(dsl, now)
                now += 10
            else:
                enqueue_sat(dsl, SatId(origin, 0, seq), t_hat)
                seq += 1
                enq += 1
            dsl.check_invariants()
        assert len(dsl.saq) + len(dsl.sah) == enq
