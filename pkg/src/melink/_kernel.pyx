# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled stepping kernel for the transducer circuit.

Mirrors melink._kernel_py (same contract, same arithmetic); see that module
for the layout and the discrete energy bookkeeping.
"""

import numpy as np

BACKEND = "cython"

EV_CONNECT = 0
EV_SHORT = 1
EV_OPEN = 2


def run_lti(double[:, ::1] m_step, double[::1] p_in, double[::1] x0,
            double[::1] u, Py_ssize_t[::1] ev_step, int[::1] ev_kind,
            int[::1] ev_idx, signed char[::1] ev_pol,
            double c_p, double[::1] c_fly, double[::1] v_fly0,
            double[::1] r_branch, double dt):
    cdef Py_ssize_t n_steps = u.shape[0] - 1
    cdef Py_ssize_t dim = x0.shape[0]
    cdef Py_ssize_t n_fly = c_fly.shape[0]
    cdef Py_ssize_t n_ev = ev_step.shape[0]
    cdef Py_ssize_t n_br = r_branch.shape[0]

    xs_arr = np.empty((n_steps + 1, dim))
    vfly_arr = np.empty((n_steps + 1, n_fly))
    e_diss_arr = np.empty(n_steps + 1)
    e_src_arr = np.empty(n_steps + 1)
    ev_loss_arr = np.zeros(n_ev)
    ev_qb_arr = np.full(n_ev, np.nan)
    ev_qa_arr = np.full(n_ev, np.nan)

    cdef double[:, ::1] xs = xs_arr
    cdef double[:, ::1] vfly = vfly_arr
    cdef double[::1] e_diss = e_diss_arr
    cdef double[::1] e_src = e_src_arr
    cdef double[::1] ev_loss = ev_loss_arr
    cdef double[::1] ev_qb = ev_qb_arr
    cdef double[::1] ev_qa = ev_qa_arr

    x_arr = np.array(x0, dtype=np.float64, copy=True)
    xn_arr = np.empty(dim)
    vf_arr = np.array(v_fly0, dtype=np.float64, copy=True)
    cdef double[::1] x = x_arr
    cdef double[::1] xn = xn_arr
    cdef double[::1] vf = vf_arr

    cdef double diss = 0.0
    cdef double src = 0.0
    cdef double acc, i_mid, u_mid, q, e_before, v_eq, cf, pol
    cdef Py_ssize_t k, r, c, b, i
    cdef Py_ssize_t j = 0
    cdef int kind

    for k in range(n_steps + 1):
        while j < n_ev and ev_step[j] == k:
            kind = ev_kind[j]
            if kind == EV_CONNECT:
                i = ev_idx[j]
                pol = <double>ev_pol[j]
                cf = c_fly[i]
                q = c_p * x[0] + cf * pol * vf[i]
                e_before = 0.5 * c_p * x[0] * x[0] + 0.5 * cf * vf[i] * vf[i]
                v_eq = q / (c_p + cf)
                x[0] = v_eq
                vf[i] = pol * v_eq
                ev_loss[j] = e_before - 0.5 * (c_p + cf) * v_eq * v_eq
                ev_qb[j] = q
                ev_qa[j] = (c_p + cf) * v_eq
            elif kind == EV_SHORT:
                ev_loss[j] = 0.5 * c_p * x[0] * x[0]
                x[0] = 0.0
            j += 1

        for c in range(dim):
            xs[k, c] = x[c]
        for c in range(n_fly):
            vfly[k, c] = vf[c]
        e_diss[k] = diss
        e_src[k] = src

        if k < n_steps:
            u_mid = u[k] + u[k + 1]
            for r in range(dim):
                acc = 0.0
                for c in range(dim):
                    acc += m_step[r, c] * x[c]
                xn[r] = acc + p_in[r] * u_mid
            for b in range(n_br):
                i_mid = 0.5 * (x[1 + 2 * b] + xn[1 + 2 * b])
                diss += dt * r_branch[b] * i_mid * i_mid
            i_mid = 0.5 * (x[1] + xn[1])
            src += -dt * i_mid * 0.5 * u_mid
            for c in range(dim):
                x[c] = xn[c]

    return xs_arr, vfly_arr, e_diss_arr, e_src_arr, ev_loss_arr, ev_qb_arr, ev_qa_arr
