import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from melink.engine import DriveConfig, WaveformTrace, init_state, run
from melink.timing import (DetectionError, TdcCode, ZcdConfig,
                           calibrate_period, detect_zero_crossing,
                           en_scee_pulses, quarter_delay, tdc_decode,
                           tdc_encode, three_quarter_delay)
from melink.transducer import resonance_frequencies
from oracles import make_sine_trace, quarter_error_table

F0 = 331e3
T0 = 1.0 / F0
DT = T0 / 200
STEP = 15e-9


def sine_trace(f=F0, cycles=10, fs=None, **kw):
    fs = fs or (200 * f)
    t, v = make_sine_trace(f, fs, int(cycles * fs / f), **kw)
    return WaveformTrace(t=t, data={"v_cp": v}, dt=1.0 / fs)


class TestTdcCode:
    def test_ranges(self):
        TdcCode(0, 0)
        TdcCode(31, 7)
        with pytest.raises(ValueError):
            TdcCode(32, 0)
        with pytest.raises(ValueError):
            TdcCode(0, 8)
        with pytest.raises(ValueError):
            TdcCode(-1, 0)

    def test_thermometer_convention(self):
        # bit k set iff the stage count exceeds k: three ones is 0000111
        assert TdcCode(0, 3).thermometer == (1, 1, 1, 0, 0, 0, 0)
        assert TdcCode(0, 7).thermometer == (1, 1, 1, 1, 1, 1, 1)
        assert TdcCode(0, 0).thermometer == (0, 0, 0, 0, 0, 0, 0)

    def test_total_steps(self):
        assert TdcCode(25, 1).total_steps == 201
        assert TdcCode(5, 5).total_steps == 45


class TestEncodeDecode:
    def test_examples(self):
        assert tdc_encode(3.021e-6, STEP) == TdcCode(25, 1)
        assert tdc_encode(0.0, STEP) == TdcCode(0, 0)
        assert tdc_encode(45 * STEP, STEP) == TdcCode(5, 5)

    def test_decode_examples(self):
        assert tdc_decode(TdcCode(5, 5), STEP) == pytest.approx(45 * STEP)
        assert tdc_decode(TdcCode(0, 0), STEP) == 0.0

    def test_range_errors(self):
        with pytest.raises(ValueError):
            tdc_encode(256 * STEP, STEP)
        with pytest.raises(ValueError):
            tdc_encode(-1e-9, STEP)
        with pytest.raises(ValueError):
            tdc_encode(1e-6, 0.0)

    def test_roundtrip_floors_within_one_step(self):
        for x in np.linspace(0.0, 256 * STEP, 10001)[:-1]:
            dec = tdc_decode(tdc_encode(x, STEP), STEP)
            assert dec <= x * (1 + 1e-12) + 1e-21
            assert x < dec + STEP * (1 + 1e-12)

    @given(st.floats(min_value=0.0, max_value=255.999))
    @settings(max_examples=200, deadline=None)
    def test_roundtrip_property(self, u):
        x = u * STEP
        dec = tdc_decode(tdc_encode(x, STEP), STEP)
        assert dec <= x * (1 + 1e-9) + 1e-21
        assert x < dec + STEP * (1 + 1e-9)


class TestShiftArithmetic:
    def test_quarter_examples(self):
        assert quarter_delay(TdcCode(5, 5)) == 11  # exact value 11.25
        assert quarter_delay(TdcCode(1, 0)) == 2   # exact: period of 8 steps
        assert quarter_delay(TdcCode(0, 7)) == 1   # exact 1.75, worst code

    def test_quarter_error_bound_exhaustive(self):
        # the cycle part divides exactly; the thermometer bit contributes at
        # most 3/4 step, at stage counts 3 and 7 only
        table = quarter_error_table()
        worst = max(table.values())
        assert worst == pytest.approx(0.75, abs=1e-12)
        argmax = {k for k, v in table.items() if v > 0.75 - 1e-12}
        assert argmax == {(c, s) for c in range(32) for s in (3, 7)}
        for (c, s), err in table.items():
            code = TdcCode(c, s)
            assert quarter_delay(code) == pytest.approx(
                code.total_steps / 4.0, abs=0.75)
            assert abs(quarter_delay(code) - code.total_steps / 4.0) \
                == pytest.approx(err, abs=1e-12)

    def test_three_quarter_examples(self):
        assert three_quarter_delay(TdcCode(1, 0)) == 4
        assert quarter_delay(TdcCode(1, 0)) + three_quarter_delay(TdcCode(1, 0)) == 6
        assert three_quarter_delay(TdcCode(0, 0)) == 0

    def test_combined_error_exhaustive(self):
        # incremental reading: quarter + printed form lands near 3T/4 with at
        # most 1.75 steps of error, attained at stage count 5
        errs = {}
        for c in range(32):
            for s in range(8):
                code = TdcCode(c, s)
                second = quarter_delay(code) + three_quarter_delay(code)
                errs[(c, s)] = abs(second - 0.75 * code.total_steps)
        worst = max(errs.values())
        assert worst == pytest.approx(1.75, abs=1e-12)
        argmax = {k for k, v in errs.items() if v > 1.75 - 1e-12}
        assert argmax == {(c, 5) for c in range(32)}

    def test_absolute_reading_is_far_worse(self):
        # taken as an absolute delay the printed form sits near T/2
        worst_abs = 0.0
        for c in range(32):
            for s in range(8):
                code = TdcCode(c, s)
                worst_abs = max(worst_abs, abs(three_quarter_delay(code)
                                               - 0.75 * code.total_steps))
        assert worst_abs > 10 * 1.75


class TestZeroCrossing:
    def test_ideal_sine_origin(self):
        tr = sine_trace()
        assert detect_zero_crossing(tr, 0.0) == pytest.approx(0.0, abs=1e-15)

    def test_fixed_delay_added(self):
        tr = sine_trace()
        cfg = ZcdConfig(base_delay=30e-9)
        assert detect_zero_crossing(tr, 0.0, cfg) == pytest.approx(30e-9, abs=1e-15)

    def test_adaptive_compensation_clamps_at_zero(self):
        tr = sine_trace()
        cfg = ZcdConfig(base_delay=30e-9, adaptive_coeff=1.0)
        d0 = detect_zero_crossing(tr, 0.0, cfg, cycle_index=0)
        d1 = detect_zero_crossing(tr, 0.0, cfg, cycle_index=1)
        d9 = detect_zero_crossing(tr, 0.0, cfg, cycle_index=9)
        assert d0 == pytest.approx(30e-9, abs=1e-15)
        assert d1 == pytest.approx(15e-9, abs=1e-15)
        assert d9 == pytest.approx(0.0, abs=1e-15)

    def test_interpolation_accuracy_on_offset_sine(self):
        tr = sine_trace(phase=-0.3)
        want = 0.3 / (2 * math.pi * F0)
        got = detect_zero_crossing(tr, 0.0)
        assert got == pytest.approx(want, abs=DT / 100)

    def test_no_crossing_raises(self):
        fs = 200 * F0
        t = np.arange(1000) / fs
        tr = WaveformTrace(t=t, data={"v_cp": np.ones(1000)}, dt=1 / fs)
        with pytest.raises(DetectionError):
            detect_zero_crossing(tr, 0.0)

    def test_t_from_beyond_end(self):
        tr = sine_trace(cycles=2)
        with pytest.raises(DetectionError):
            detect_zero_crossing(tr, 1.0)

    def test_ringdown_period_matches_open_circuit(self, ref1):
        state = init_state(ref1, 0)
        state.i_l[0] = 1e-3
        tr = run(ref1, DriveConfig.off(), [], DT, 20 * T0, initial_state=state)
        c1 = detect_zero_crossing(tr, 0.0)
        c2 = detect_zero_crossing(tr, c1 + tr.dt)
        f_oc = resonance_frequencies(ref1)[0][1]
        assert abs((c2 - c1) - 1.0 / f_oc) / (1.0 / f_oc) < 0.002


class TestCalibration:
    def test_code_matches_measured_interval(self, ref1):
        state = init_state(ref1, 0)
        state.i_l[0] = 1e-3
        tr = run(ref1, DriveConfig.off(), [], DT, 20 * T0, initial_state=state)
        zc0, code, interval = calibrate_period(tr, 0.0)
        assert code.total_steps == math.floor(interval / STEP)
        f_oc = resonance_frequencies(ref1)[0][1]
        assert interval == pytest.approx(1.0 / f_oc, rel=2e-3)


class TestPulses:
    def test_frozen_example(self):
        code = TdcCode(25, 1)  # 201 steps = 3.015 us at the 15 ns step
        pulses = en_scee_pulses(0.0, code, STEP, 4)
        assert len(pulses) == 8
        # quarter arithmetic: 50 steps; incremental three-quarter: 100 steps
        assert pulses[0] == pytest.approx(50 * STEP, rel=1e-12)
        assert pulses[0] == pytest.approx(0.750e-6, rel=1e-12)
        # eighth pulse: 3 periods plus both delays = (3*201 + 150) steps
        assert pulses[-1] == pytest.approx(753 * STEP, rel=1e-12)
        assert pulses[-1] == pytest.approx(11.295e-6, rel=1e-12)

    def test_strictly_increasing_and_counts(self):
        code = TdcCode(25, 1)
        for n in (1, 2, 4, 6):
            p = en_scee_pulses(0.0, code, STEP, n)
            assert len(p) == 2 * n
            assert np.all(np.diff(p) > 0)

    def test_phases_alternate(self):
        code = TdcCode(25, 1)
        p = en_scee_pulses(1e-6, code, STEP, 4)
        period = tdc_decode(code, STEP)
        t_q = STEP * quarter_delay(code)
        for i in range(4):
            frac_a = (p[2 * i] - 1e-6 - i * period)
            frac_b = (p[2 * i + 1] - 1e-6 - i * period)
            assert frac_a == pytest.approx(t_q, rel=1e-12)
            assert frac_b / period == pytest.approx(0.75, abs=0.05)

    def test_validation(self):
        with pytest.raises(ValueError):
            en_scee_pulses(0.0, TdcCode(25, 1), STEP, 0)
        with pytest.raises(ValueError):
            en_scee_pulses(0.0, TdcCode(25, 1), STEP, 4, mode="sideways")

    def test_absolute_mode_places_second_pulse_near_half_period(self):
        code = TdcCode(24, 0)
        p = en_scee_pulses(0.0, code, STEP, 1, mode="absolute")
        period = tdc_decode(code, STEP)
        assert p[1] / period == pytest.approx(0.5, abs=0.05)

    def test_pulses_hit_ringdown_peaks(self, ref1):
        # drive 24 cycles, ring down, calibrate, fire: every pulse within 1%
        # of a carrier period from a true envelope peak
        drive = DriveConfig(amplitude=1.0, f_drive=F0, t_start=0.0,
                            t_stop=24 * T0)
        tr = run(ref1, drive, [], DT, 50 * T0)
        zc0, code, _ = calibrate_period(tr, 24 * T0 + 0.05 * T0)
        zc = detect_zero_crossing(tr, 27 * T0)
        pulses = en_scee_pulses(zc, code, STEP, 4)
        v = np.abs(tr["v_cp"])
        peaks = []
        for k in range(1, len(v) - 1):
            if v[k] >= v[k - 1] and v[k] > v[k + 1] and v[k] > 0.1:
                # parabolic refinement of the sample-domain peak
                d = 0.5 * (v[k - 1] - v[k + 1]) / (v[k - 1] - 2 * v[k] + v[k + 1])
                peaks.append(tr.t[k] + d * DT)
        peaks = np.array(peaks)
        for p in pulses:
            assert np.min(np.abs(peaks - p)) < 0.01 * T0
