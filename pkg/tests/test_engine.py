import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import melink.engine as eng
from melink import _kernel_py
from melink.engine import (ConfigurationError, DriveConfig, connect_fly,
                           init_state, open_all, run, short_terminal, step,
                           total_energy, mechanical_energy)
from melink.scee import SceeBank, build_scee_schedule
from melink.timing import calibrate_period, detect_zero_crossing, en_scee_pulses
from melink.transducer import reference_model
from oracles import share_pair

F0 = 331e3
T0 = 1.0 / F0
DT = T0 / 200


def ringdown_trace(model, cycles=30, i0=1e-3, probes=("v_cp",), dt=DT):
    state = init_state(model, 0)
    state.i_l[0] = i0
    return run(model, DriveConfig.off(), [], dt, cycles * T0, probes=probes,
               initial_state=state)


def rising_crossings(t, v):
    idx = np.nonzero((v[:-1] <= 0) & (v[1:] > 0))[0]
    frac = -v[idx] / (v[idx + 1] - v[idx])
    return t[idx] + frac * (t[idx + 1] - t[idx])


def scee_frame(model, n_fly=4, trigger_cycle=3,
               probes=("v_cp", "i_b0", "e_mech", "e_total", "e_diss", "e_src")):
    """Excitation, ringdown, and a full 8-flip extraction."""
    bank = SceeBank(n_fly=n_fly)
    drive = DriveConfig(amplitude=1.0, f_drive=F0, t_start=0.0, t_stop=24 * T0)
    t_end = 60 * T0
    ref = run(model, drive, [], DT, t_end, probes=probes,
              n_fly=bank.n_fly, c_fly_each=bank.c_each)
    _, code, _ = calibrate_period(ref, 24 * T0 + 0.05 * T0)
    zc = detect_zero_crossing(ref, (24 + trigger_cycle) * T0)
    pulses = en_scee_pulses(zc, code, 15e-9, 4)
    sched = build_scee_schedule(bank, list(pulses),
                                [+1 if i % 2 == 0 else -1 for i in range(8)])
    tr = run(model, drive, list(sched.events), DT, t_end, probes=probes,
             n_fly=bank.n_fly, c_fly_each=bank.c_each)
    return tr, sched, drive


class TestState:
    def test_init_state_zero(self, ref3):
        st4 = init_state(ref3, 4)
        assert st4.v_cp == 0.0 and st4.t == 0.0
        assert np.all(st4.i_l == 0) and np.all(st4.v_c == 0)
        assert len(st4.v_fly) == 4 and len(st4.c_fly) == 4
        st0 = init_state(ref3, 0)
        assert len(st0.v_fly) == 0
        assert total_energy(st4, ref3) == 0.0

    def test_init_state_rejects_negative(self, ref3):
        with pytest.raises(ValueError):
            init_state(ref3, -1)

    def test_total_energy_terms(self, ref1):
        state = init_state(ref1, 0)
        state.v_cp = 1.0
        assert total_energy(state, ref1) == pytest.approx(0.5e-9, rel=1e-12)
        assert mechanical_energy(state, ref1) == 0.0
        state.v_fly = np.array([2.0])
        state.c_fly = np.array([0.3e-9])
        assert total_energy(state, ref1) == pytest.approx(
            0.5e-9 + 0.5 * 0.3e-9 * 4.0, rel=1e-12)


class TestChargeShare:
    def test_connect_equalizes(self, ref1):
        state = init_state(ref1, 1)
        state.v_cp = 2.0
        new, loss = eng.apply_charge_share(ref1, state, connect_fly(0.0, 0, +1))
        v_eq, loss_ref = share_pair(1e-9, 2.0, 0.3e-9, 0.0)
        assert new.v_cp == pytest.approx(2.0 / 1.3, rel=1e-12)
        assert new.v_cp == pytest.approx(v_eq, rel=1e-15)
        assert loss == pytest.approx(loss_ref, rel=1e-15)
        assert loss == pytest.approx(0.4615e-9, rel=1e-3)
        # charge on the pair is conserved
        q_before = 1e-9 * 2.0
        q_after = 1e-9 * new.v_cp + 0.3e-9 * new.v_fly[0]
        assert q_after == pytest.approx(q_before, rel=1e-12)

    def test_connect_negative_polarity(self, ref1):
        state = init_state(ref1, 1)
        state.v_cp = 2.0
        state.v_fly[0] = 1.0
        new, loss = eng.apply_charge_share(ref1, state, connect_fly(0.0, 0, -1))
        v_eq, loss_ref = share_pair(1e-9, 2.0, 0.3e-9, -1.0)
        assert new.v_cp == pytest.approx(v_eq, rel=1e-15)
        assert new.v_fly[0] == pytest.approx(-v_eq, rel=1e-15)
        assert loss == pytest.approx(loss_ref, rel=1e-15)

    def test_connect_equal_voltage_noop(self, ref1):
        state = init_state(ref1, 1)
        state.v_cp = 1.5
        state.v_fly[0] = 1.5
        new, loss = eng.apply_charge_share(ref1, state, connect_fly(0.0, 0, +1))
        assert new.v_cp == pytest.approx(1.5, rel=1e-15)
        assert loss == pytest.approx(0.0, abs=1e-24)

    def test_short_terminal(self, ref1):
        state = init_state(ref1, 0)
        state.v_cp = 1.0
        new, loss = eng.apply_charge_share(ref1, state, short_terminal(0.0))
        assert new.v_cp == 0.0
        assert loss == pytest.approx(0.5e-9, rel=1e-12)

    def test_open_all_noop(self, ref1):
        state = init_state(ref1, 0)
        state.v_cp = 1.0
        new, loss = eng.apply_charge_share(ref1, state, open_all(0.0))
        assert new.v_cp == 1.0 and loss == 0.0

    def test_unknown_index(self, ref1):
        state = init_state(ref1, 1)
        with pytest.raises(ValueError):
            eng.apply_charge_share(ref1, state, connect_fly(0.0, 3, +1))

    @given(v1=st.floats(-10, 10), v2=st.floats(-10, 10),
           pol=st.sampled_from([+1, -1]))
    @settings(max_examples=100, deadline=None)
    def test_charge_conserved_and_loss_nonnegative(self, v1, v2, pol):
        model = reference_model(order=1)
        state = init_state(model, 1)
        state.v_cp = v1
        state.v_fly[0] = v2
        new, loss = eng.apply_charge_share(model, state, connect_fly(0.0, 0, pol))
        q_before = model.c_p * v1 + 0.3e-9 * pol * v2
        q_after = model.c_p * new.v_cp + 0.3e-9 * pol * new.v_fly[0]
        assert abs(q_after - q_before) <= 1e-9 * (abs(q_before) + 1e-12)
        e_scale = 0.5 * model.c_p * v1**2 + 0.5 * 0.3e-9 * v2**2
        assert loss >= -1e-12 * (e_scale + 1e-15)


class TestStep:
    def test_equilibrium_stays_zero(self, ref3):
        state = init_state(ref3, 0)
        for _ in range(20):
            state = step(ref3, state, DT, DriveConfig.off())
        assert state.v_cp == 0.0
        assert np.all(state.i_l == 0) and np.all(state.v_c == 0)

    def test_dt_cap(self, ref1):
        state = init_state(ref1, 0)
        with pytest.raises(ConfigurationError):
            step(ref1, state, T0 / 50, DriveConfig.off())
        with pytest.raises(ConfigurationError):
            run(ref1, DriveConfig.off(), [], T0 / 50, 10 * T0)

    def test_step_matches_run(self, ref3):
        drive = DriveConfig(amplitude=1.0, f_drive=F0, t_start=0.0, t_stop=1e-3)
        state = init_state(ref3, 0)
        for _ in range(7):
            state = step(ref3, state, DT, drive)
        tr = run(ref3, drive, [], DT, 7 * DT, probes=("v_cp", "i_b0"))
        assert tr["v_cp"][-1] == pytest.approx(state.v_cp, rel=1e-12, abs=1e-18)
        assert tr["i_b0"][-1] == pytest.approx(state.i_l[0], rel=1e-12, abs=1e-18)


class TestRingdown:
    def test_frequency_matches_open_circuit_resonance(self, ref1):
        from melink.transducer import resonance_frequencies
        tr = ringdown_trace(ref1, cycles=30)
        cross = rising_crossings(tr.t, tr["v_cp"])
        period = np.diff(cross).mean()
        f_oc = resonance_frequencies(ref1)[0][1]
        assert abs(1.0 / period - f_oc) / f_oc < 1e-3

    def test_frequency_from_charged_compliance(self, ref1):
        # a charged compliance capacitor rings around a DC offset (the series
        # charge is conserved); the oscillation frequency is still f_oc
        from melink.transducer import resonance_frequencies
        state = init_state(ref1, 0)
        state.v_c[0] = 1.0
        tr = run(ref1, DriveConfig.off(), [], DT, 30 * T0,
                 initial_state=state)
        v = tr["v_cp"] - tr["v_cp"][len(tr.t) // 2:].mean()
        cross = rising_crossings(tr.t, v)
        period = np.diff(cross).mean()
        f_oc = resonance_frequencies(ref1)[0][1]
        assert abs(1.0 / period - f_oc) / f_oc < 1e-3

    def test_envelope_decay_rate(self, ref1):
        tr = ringdown_trace(ref1, cycles=30)
        cross = rising_crossings(tr.t, tr["v_cp"])
        peaks = np.array([np.abs(tr["v_cp"][(tr.t >= a) & (tr.t < b)]).max()
                          for a, b in zip(cross[:-1], cross[1:])])
        ratios = peaks[2:14] / peaks[1:13]
        assert np.allclose(ratios, math.exp(-math.pi / 150.0), rtol=0.05)

    def test_convergence_under_dt_halving(self, ref1):
        def final_envelope(dt):
            tr = ringdown_trace(ref1, cycles=20, dt=dt)
            sel = tr.t >= 19 * T0
            return np.abs(tr["v_cp"][sel]).max()

        e1 = final_envelope(DT)
        e2 = final_envelope(DT / 2)
        assert abs(e1 - e2) / e2 < 0.01


class TestRun:
    def test_drive_envelope_grows_then_decays(self, ref3):
        drive = DriveConfig(amplitude=1.0, f_drive=F0, t_start=0.0,
                            t_stop=24 * T0)
        tr = run(ref3, drive, [], DT, 50 * T0)
        v = np.abs(tr["v_cp"])
        peaks = np.array([v[(tr.t >= k * T0) & (tr.t < (k + 1) * T0)].max()
                          for k in range(50)])
        assert np.all(np.diff(peaks[1:23]) > 0)
        assert np.all(np.diff(peaks[26:48]) < 0)

    def test_short_rebound(self, ref1):
        # a bare terminal short leaves the resonator ringing: the envelope
        # rebounds well above a quarter of its pre-short value
        tr0 = ringdown_trace(ref1, cycles=12)
        t_short = 6 * T0
        state = init_state(ref1, 0)
        state.i_l[0] = 1e-3
        tr = run(ref1, DriveConfig.off(), [short_terminal(t_short)], DT,
                 12 * T0, initial_state=state)
        k = int(round(t_short / DT))
        assert tr["v_cp"][k] == 0.0
        pre = np.abs(tr["v_cp"][(tr.t >= t_short - T0) & (tr.t < t_short)]).max()
        post = np.abs(tr["v_cp"][(tr.t >= t_short + T0)
                                 & (tr.t < t_short + 3 * T0)]).max()
        assert post > 0.25 * pre

    def test_determinism(self, ref3):
        tr1, s1, _ = scee_frame(ref3)
        tr2, s2, _ = scee_frame(ref3)
        assert np.array_equal(tr1.t, tr2.t)
        for name in tr1.probes:
            assert np.array_equal(tr1[name], tr2[name])

    def test_schedule_must_be_ordered(self, ref1):
        events = [short_terminal(2 * T0), short_terminal(1 * T0)]
        with pytest.raises(ValueError, match="ordered"):
            run(ref1, DriveConfig.off(), events, DT, 5 * T0)

    def test_event_outside_window(self, ref1):
        with pytest.raises(ValueError, match="outside"):
            run(ref1, DriveConfig.off(), [short_terminal(10 * T0)], DT, 5 * T0)

    def test_unknown_probe(self, ref1):
        with pytest.raises(ValueError, match="probe"):
            run(ref1, DriveConfig.off(), [], DT, T0, probes=("bogus",))

    def test_fly_index_needs_bank(self, ref1):
        with pytest.raises(ValueError, match="out of range"):
            run(ref1, DriveConfig.off(), [connect_fly(T0, 0, +1)], DT, 2 * T0,
                n_fly=0)

    def test_event_snapping_metadata(self, ref1):
        ev = short_terminal(0.3 * DT)
        tr = run(ref1, DriveConfig.off(), [ev], DT, T0)
        rec = tr.meta["events"][0]
        assert rec["step"] == 0
        assert rec["t_snapped"] == 0.0
        assert abs(rec["t_requested"] - rec["t_snapped"]) <= tr.meta["snap_error_max"]


class TestEnergyAccounting:
    def test_passivity_and_exact_audit(self, ref3):
        tr, sched, drive = scee_frame(ref3)
        t = tr.t
        e_tot = tr["e_total"]
        scale = e_tot.max()
        # drive off: stored energy never increases, event losses included
        off = t >= drive.t_stop
        diffs = np.diff(e_tot[off])
        assert np.all(diffs <= 1e-12 * scale)
        # total audit with the source term is exact at float precision
        ev_cum = np.zeros_like(e_tot)
        for rec in tr.meta["events"]:
            ev_cum[rec["step"]:] += rec["e_loss"]
        balance = e_tot[0] + tr["e_src"] - tr["e_diss"] - ev_cum
        assert np.max(np.abs(e_tot - balance)) < 1e-9 * scale

    def test_event_losses_nonnegative(self, ref3):
        tr, _, _ = scee_frame(ref3)
        for rec in tr.meta["events"]:
            assert rec["e_loss"] >= -1e-30

    def test_charge_conservation_per_event(self, ref3):
        tr, _, _ = scee_frame(ref3)
        connects = [r for r in tr.meta["events"] if r["kind"] == "connect_fly"]
        assert len(connects) == 64
        for rec in connects:
            scale = max(abs(rec["q_before"]), 1e-15)
            assert abs(rec["q_after"] - rec["q_before"]) <= 1e-9 * scale

    def test_drive_off_energy_monotone_no_events(self, ref1):
        tr = ringdown_trace(ref1, cycles=20, probes=("v_cp", "e_total"))
        diffs = np.diff(tr["e_total"])
        assert np.all(diffs <= 1e-12 * tr["e_total"][0])


class TestBackends:
    def test_python_kernel_matches_selected_backend(self, ref3):
        tr, sched, drive = scee_frame(ref3)
        import melink.engine as engine_mod
        orig = engine_mod._kernel
        engine_mod._kernel = _kernel_py
        try:
            tr_py, _, _ = scee_frame(ref3)
        finally:
            engine_mod._kernel = orig
        for name in ("v_cp", "i_b0", "e_mech"):
            np.testing.assert_allclose(tr_py[name], tr[name], rtol=1e-9,
                                       atol=1e-12 * np.abs(tr[name]).max())
        for a, b in zip(tr.meta["events"], tr_py.meta["events"]):
            assert a["e_loss"] == pytest.approx(b["e_loss"], rel=1e-9, abs=1e-24)


class TestTraceCsv:
    def test_roundtrip_bit_exact(self, ref1, tmp_path):
        tr = ringdown_trace(ref1, cycles=3, probes=("v_cp", "i_b0"))
        path = tmp_path / "trace.csv"
        tr.to_csv(path)
        back = eng.WaveformTrace.from_csv(path)
        assert np.array_equal(back.t, tr.t)
        for name in tr.probes:
            assert np.array_equal(back[name], tr[name])
