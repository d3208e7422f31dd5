"""Pure-numpy stepping kernel for the transducer circuit.

Same contract as the compiled extension ``melink._kernel``; used as the
fallback when the extension is unavailable (or when MELINK_FORCE_PY is set).

The continuous dynamics between switch events are linear and time invariant,
so one step is x <- M x + p * (u_k + u_{k+1}) with a precomputed trapezoidal
propagator M.  Switch events are instantaneous charge redistributions applied
at step boundaries, before the boundary sample is recorded.

State layout: x = [v_cp, i_0, v_0, i_1, v_1, ...] with one (current, voltage)
pair per branch.  Flying-capacitor voltages live outside x; they only change
at events.
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"

EV_CONNECT = 0
EV_SHORT = 1
EV_OPEN = 2


def run_lti(m_step, p_in, x0, u, ev_step, ev_kind, ev_idx, ev_pol,
            c_p, c_fly, v_fly0, r_branch, dt):
    """Advance the circuit over len(u)-1 steps, applying switch events.

    Arguments are plain float64/intp arrays; events must be sorted by step.
    Returns (xs, vfly, e_diss, e_src, ev_loss, ev_qb, ev_qa):

    - xs[k], vfly[k]: state and flying-cap voltages at boundary k (after any
      events at that boundary)
    - e_diss[k]: cumulative resistive dissipation, exact under the trapezoid
      discrete energy identity (midpoint currents)
    - e_src[k]: cumulative energy injected by the drive source
    - ev_loss[j]: energy dissipated by event j
    - ev_qb/ev_qa[j]: charge on the connected capacitor pair before/after a
      connect event (NaN for short/open events)
    """
    n_steps = u.shape[0] - 1
    dim = x0.shape[0]
    n_fly = c_fly.shape[0]
    n_ev = ev_step.shape[0]

    xs = np.empty((n_steps + 1, dim))
    vfly = np.empty((n_steps + 1, n_fly))
    e_diss = np.empty(n_steps + 1)
    e_src = np.empty(n_steps + 1)
    ev_loss = np.zeros(n_ev)
    ev_qb = np.full(n_ev, np.nan)
    ev_qa = np.full(n_ev, np.nan)

    x = x0.copy()
    vf = v_fly0.copy()
    diss = 0.0
    src = 0.0
    cur = slice(1, dim, 2)

    j = 0
    for k in range(n_steps + 1):
        while j < n_ev and ev_step[j] == k:
            kind = ev_kind[j]
            if kind == EV_CONNECT:
                i = ev_idx[j]
                pol = float(ev_pol[j])
                cf = c_fly[i]
                q_before = c_p * x[0] + cf * pol * vf[i]
                e_before = 0.5 * c_p * x[0] ** 2 + 0.5 * cf * vf[i] ** 2
                v_eq = q_before / (c_p + cf)
                x[0] = v_eq
                vf[i] = pol * v_eq
                ev_loss[j] = e_before - 0.5 * (c_p + cf) * v_eq**2
                ev_qb[j] = q_before
                ev_qa[j] = (c_p + cf) * v_eq
            elif kind == EV_SHORT:
                ev_loss[j] = 0.5 * c_p * x[0] ** 2
                x[0] = 0.0
            # EV_OPEN: switches are momentary, nothing to restore
            j += 1

        xs[k] = x
        vfly[k] = vf
        e_diss[k] = diss
        e_src[k] = src

        if k < n_steps:
            x_new = m_step @ x + p_in * (u[k] + u[k + 1])
            i_mid = 0.5 * (x[cur] + x_new[cur])
            diss += dt * float(r_branch @ (i_mid * i_mid))
            src += -dt * float(i_mid[0]) * 0.5 * (u[k] + u[k + 1])
            x = x_new

    return xs, vfly, e_diss, e_src, ev_loss, ev_qb, ev_qa
