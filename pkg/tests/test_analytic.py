import math

import mpmath as mp
import pytest
from hypothesis import given, settings, strategies as st

from cbt.analytic import (
    CbtParams,
    Divergent,
    LbtParams,
    ParameterError,
    cbt_latency,
    crossing_point,
    gossip_dissemination_delay,
    gossip_fraction,
    lbt_backlog_sequence,
    lbt_convergence_threshold,
    lbt_fixed_point,
    lbt_latency,
)

# Frozen from a 40-digit mpmath evaluation (threshold, findroot on the
# fixed-point equation, closed forms).  See tests/oracles.py.
THRESHOLD_100 = 36.97343059368595
THRESHOLD_2 = 1.0614756908460860
FIXED_POINT_10 = 11.064436675943106
LBT_10_100_1000 = 606.44366759431070
DELAY_1000_0999 = 13.814511058631191
DELAY_1000_099 = 11.502885230075813
CBT_10_2500 = 1526.2902211726238
CBT_34_1000 = 1439.3867519869210


def _mp_fixed_point(n_r, n_v):
    mp.mp.dps = 40
    q = 1 - mp.mpf(1) / n_v
    xmax = 1 - 1 / mp.log(q)
    return mp.findroot(lambda x: x * q ** (x - 1) - n_r, (n_r, xmax), solver="anderson")


class TestBacklogSequence:
    def test_single_requester_never_collides(self):
        assert lbt_backlog_sequence(LbtParams(1, 100, 1000), 5) == [1, 1, 1, 1, 1]

    def test_converges_to_fixed_point(self):
        seq = lbt_backlog_sequence(LbtParams(10, 100, 1000), 2000)
        assert seq[-1] == pytest.approx(FIXED_POINT_10, abs=1e-9)
        assert seq[-1] == pytest.approx(lbt_fixed_point(LbtParams(10, 100, 1000)), abs=1e-6)

    def test_above_threshold_keeps_growing(self):
        seq = lbt_backlog_sequence(LbtParams(40, 100, 1000), 200)
        assert all(b > a for a, b in zip(seq, seq[1:]))
        assert seq[-1] > 1000

    def test_steps_must_be_positive(self):
        with pytest.raises(ParameterError):
            lbt_backlog_sequence(LbtParams(1, 100, 1000), 0)

    @settings(max_examples=60, deadline=None)
    @given(n_v=st.integers(2, 400), frac=st.floats(0.0, 1.0), steps=st.integers(1, 300))
    def test_non_decreasing(self, n_v, frac, steps):
        n_r = max(1, round(frac * n_v))
        seq = lbt_backlog_sequence(LbtParams(n_r, n_v, 10), steps)
        assert all(b >= a for a, b in zip(seq, seq[1:]))


class TestThreshold:
    def test_values(self):
        assert lbt_convergence_threshold(100) == pytest.approx(THRESHOLD_100, rel=1e-12)
        assert lbt_convergence_threshold(2) == pytest.approx(THRESHOLD_2, rel=1e-12)

    def test_grows_with_block_pool(self):
        assert lbt_convergence_threshold(1000) > lbt_convergence_threshold(100)

    @pytest.mark.parametrize("n_v", [1, 0, -3])
    def test_rejects_small_pool(self, n_v):
        with pytest.raises(ParameterError):
            lbt_convergence_threshold(n_v)


class TestFixedPoint:
    def test_trivial(self):
        assert lbt_fixed_point(LbtParams(1, 100, 1)) == 1.0

    def test_against_mpmath(self):
        assert lbt_fixed_point(LbtParams(10, 100, 1)) == pytest.approx(FIXED_POINT_10, abs=1e-8)

    @pytest.mark.parametrize("n_r", [2, 5, 17, 30, 34, 36])
    def test_residual_and_root_below_argmax(self, n_r):
        x = lbt_fixed_point(LbtParams(n_r, 100, 1))
        assert abs(x * 0.99 ** (x - 1) - n_r) < 1e-9
        assert n_r <= x < 1 - 1 / math.log(0.99)
        assert x == pytest.approx(float(_mp_fixed_point(n_r, 100)), abs=1e-7)

    def test_divergent(self):
        with pytest.raises(Divergent):
            lbt_fixed_point(LbtParams(37, 100, 1))

    def test_tolerance_must_be_positive(self):
        with pytest.raises(ParameterError):
            lbt_fixed_point(LbtParams(3, 100, 1), tol=0)

    @settings(max_examples=80, deadline=None)
    @given(n_v=st.integers(2, 2000), frac=st.floats(0.0, 1.0))
    def test_residual_property(self, n_v, frac):
        thr = lbt_convergence_threshold(n_v)
        n_r = max(1, min(n_v, math.floor(frac * thr)))
        if n_r > thr:
            return
        x = lbt_fixed_point(LbtParams(n_r, n_v, 1))
        q = 1 - 1 / n_v
        assert abs(x * q ** (x - 1) - n_r) < 1e-9
        assert x >= n_r


class TestLbtLatency:
    def test_lone_requester(self):
        out = lbt_latency(LbtParams(1, 100, 1000))
        assert out.value == 500.0 and not out.divergent

    def test_moderate_load(self):
        out = lbt_latency(LbtParams(10, 100, 1000))
        assert out.value == pytest.approx(LBT_10_100_1000, rel=1e-9)
        assert out.normalized == out.value / 1000

    def test_divergent(self):
        out = lbt_latency(LbtParams(40, 100, 1000))
        assert out.divergent and math.isinf(out.normalized)

    def test_non_decreasing_in_n_r(self):
        vals = [lbt_latency(LbtParams(k, 100, 1000)).value for k in range(1, 37)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))

    def test_rejects_n_r_above_n_v(self):
        with pytest.raises(ParameterError):
            LbtParams(11, 10, 100)


class TestGossipCurve:
    c = CbtParams(n=1000, n_r=1, phi=1, gamma=0.999)

    def test_initial_condition(self):
        assert gossip_fraction(3.0, 3.0, self.c) == pytest.approx(1 / 1000, rel=1e-15)

    def test_at_dissemination_delay(self):
        # numerator 1 + (n-1)gamma lands a hair above gamma
        assert gossip_fraction(DELAY_1000_0999, 0.0, self.c) == pytest.approx(0.999001, abs=1e-9)

    def test_limit(self):
        assert gossip_fraction(1e4, 0.0, self.c) == 1.0

    def test_rejects_past(self):
        with pytest.raises(ParameterError):
            gossip_fraction(0.0, 1.0, self.c)

    def test_delay_values(self):
        assert gossip_dissemination_delay(self.c) == pytest.approx(DELAY_1000_0999, rel=1e-12)
        assert gossip_dissemination_delay(CbtParams(1000, 1, 1, 0.99)) == pytest.approx(
            DELAY_1000_099, rel=1e-12
        )
        assert gossip_dissemination_delay(CbtParams(1000, 1, 2, 0.999)) == pytest.approx(
            DELAY_1000_0999 / 2, rel=1e-12
        )
        assert gossip_dissemination_delay(CbtParams(2, 1, 1, 0.5)) == pytest.approx(
            math.log(3), rel=1e-12
        )

    @pytest.mark.parametrize("gamma", [1.0, 1.5, 0.0])
    def test_gamma_domain(self, gamma):
        with pytest.raises(ParameterError):
            CbtParams(1000, 1, 1, gamma)

    @settings(max_examples=100, deadline=None)
    @given(n=st.integers(100, 10**6), gamma=st.floats(0.5, 0.99999), phi=st.integers(1, 8))
    def test_printed_form_close_to_exact_inversion(self, n, gamma, phi):
        c = CbtParams(n, 1, phi, gamma)
        printed = gossip_dissemination_delay(c)
        exact = gossip_dissemination_delay(c, exact=True)
        assert exact == pytest.approx(math.log(gamma * (n - 1) / (1 - gamma)) / phi)
        assert abs(printed - exact) / exact < 0.01
        # exact inversion really inverts the curve
        assert gossip_fraction(exact, 0.0, c) == pytest.approx(gamma, rel=1e-9)


class TestCbtLatency:
    def test_no_requests(self):
        assert cbt_latency(CbtParams(1000, 0, 1, 0.999, 2500)).value == 1250.0

    def test_values(self):
        out = cbt_latency(CbtParams(1000, 10, 1, 0.999, 2500))
        assert out.value == pytest.approx(CBT_10_2500, rel=1e-12)
        assert out.normalized == pytest.approx(0.6105160884690495, rel=1e-12)
        assert cbt_latency(CbtParams(1000, 34, 1, 0.999, 1000)).value == pytest.approx(
            CBT_34_1000, rel=1e-12
        )

    def test_monotone(self):
        vals = [cbt_latency(CbtParams(1000, k, 1, 0.999, 1000)).value for k in range(0, 50)]
        assert all(b > a for a, b in zip(vals, vals[1:]))
        by_n = [cbt_latency(CbtParams(n, 10, 1, 0.999, 1000)).value for n in (10, 100, 10**4)]
        assert by_n[0] < by_n[1] < by_n[2]


class TestCrossingPoint:
    def test_near_34(self):
        # LBT 1385.8 < CBT 1439.4 at 34; LBT 1502.2 > CBT 1467.0 at 35
        assert crossing_point(1000, 100, 1, 0.999, 1000, (1, 40)) == 35

    def test_long_span(self):
        # at n_r=1 LBT is exactly mu/2 while CBT adds two dissemination rounds
        assert crossing_point(1000, 100, 1, 0.999, 10000, (1, 40)) == 2
        assert crossing_point(1000, 100, 1, 0.999, 10000, (2, 40)) == 2

    def test_no_crossing(self):
        assert crossing_point(1000, 100, 1, 0.999, 1000, (1, 30)) is None

    @pytest.mark.parametrize("rng", [(5, 4), (0, 3), (1, 101)])
    def test_bad_range(self, rng):
        with pytest.raises(ParameterError):
            crossing_point(1000, 100, 1, 0.999, 1000, rng)
