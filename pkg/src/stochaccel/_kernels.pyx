# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot loops: the phase-randomized wave micro-integrator and the
two-channel wave SDE steppers.

Each function mirrors its numpy twin in stochaccel.models / stochaccel.sde:
same formulas, same domain guards, same per-path failure semantics, and
randomness is always generated on the Python side and passed in, so the
backends agree to floating-point roundoff.
"""
import numpy as np

cimport numpy as cnp
from libc.math cimport cos, fabs, floor, isfinite, sin, sqrt

cdef double TWO_PI = 6.283185307179586476925286766559
cdef double RESCALE = 1e250
cdef int MAX_TABLE = 256


cdef void _bessel_table_c(double u, int nmax, int start, double* J) noexcept nogil:
    """J_0..J_nmax at u by backward recurrence; mirror of bessel_j_table."""
    cdef double jp = 0.0
    cdef double jc = 1e-30
    cdef double jm, norm = 0.0, inv
    cdef int k, km
    if u == 0.0:
        J[0] = 1.0
        for k in range(1, nmax + 1):
            J[k] = 0.0
        return
    if start % 2 == 0:
        norm += 2.0 * jc
    for k in range(start, 0, -1):
        jm = (2.0 * k / u) * jc - jp
        jp = jc
        jc = jm
        km = k - 1
        if km <= nmax:
            J[km] = jc
        if km % 2 == 0:
            if km == 0:
                norm += jc
            else:
                norm += 2.0 * jc
        if fabs(jc) > RESCALE:
            inv = 1.0 / RESCALE
            jc *= inv
            jp *= inv
            norm *= inv
            for km in range(nmax + 1):
                J[km] *= inv
    inv = 1.0 / norm
    for k in range(nmax + 1):
        J[k] *= inv


cdef double _dEdI_c(double u, int n_lo, int L, const double* g,
                    const double* table) noexcept nogil:
    """d/dI of the secular series given a filled Bessel table."""
    cdef double acc = 0.0
    cdef double J, Jp, dt, n2, sn, sm, sp
    cdef int k, n, an, am, ap
    for k in range(L):
        n = n_lo + k
        an = n if n >= 0 else -n
        am = n - 1 if n - 1 >= 0 else 1 - n
        ap = n + 1 if n + 1 >= 0 else -n - 1
        sn = -1.0 if (n < 0 and an % 2 == 1) else 1.0
        sm = -1.0 if (n - 1 < 0 and am % 2 == 1) else 1.0
        sp = -1.0 if (n + 1 < 0 and ap % 2 == 1) else 1.0
        J = sn * table[an]
        Jp = 0.5 * (sm * table[am] - sp * table[ap])
        n2 = (<double> n) * (<double> n)
        dt = (Jp * Jp - (1.0 - n2 / (u * u)) * J * J) / u - 2.0 * J * Jp / (u * u)
        acc += (<double> n) * g[k] * dt
    return -(3.14159265358979323846 / u) * acc


cdef bint _wave_fields_c(double theta, double I,
                         int n0, double noise_coef, double drift_scale,
                         int n_lo, int L, const double* g,
                         int table_start, int table_nmax,
                         double i_min, double i_max,
                         double* a_th, double* b1_th, double* b1_I,
                         double* b2_th, double* b2_I, double* table) noexcept nogil:
    """Drift and noise coefficients of the wave model at (theta, I)."""
    cdef double u, J, Jp, cn, sn
    if not isfinite(I) or I < i_min or I > i_max:
        return False
    u = sqrt(2.0 * I)
    _bessel_table_c(u, table_nmax, table_start, table)
    J = table[n0]
    Jp = 0.5 * (table[n0 - 1] - table[n0 + 1])
    cn = cos(n0 * theta)
    sn = sin(n0 * theta)
    a_th[0] = 1.0 + drift_scale * _dEdI_c(u, n_lo, L, g, table)
    b1_th[0] = noise_coef * (Jp / u) * cn
    b1_I[0] = noise_coef * n0 * J * sn
    b2_th[0] = noise_coef * (Jp / u) * sn
    b2_I[0] = -noise_coef * n0 * J * cn
    return True


def karney_sde_block(double[:, ::1] Z, double[:, :, ::1] dW, double h,
                     int scheme, double tol, int max_iter,
                     int n0, double noise_coef, double drift_scale,
                     long long n_lo, double[::1] g_list,
                     int table_start, int table_nmax,
                     double i_min, double u_max,
                     long long[::1] failed, long long step_offset,
                     long long[::1] rec_cols, double[:, :, ::1] records):
    """Advance a block of steps of the wave SDE in place.

    scheme 0 is Euler-Heun, 1 is implicit midpoint (fixed point, per-path
    stopping).  Paths that leave [i_min, i_max], go non-finite, or fail to
    converge are frozen at their last good state with the failing global
    step index written to `failed`.
    """
    cdef Py_ssize_t N = Z.shape[0]
    cdef Py_ssize_t S = dW.shape[1]
    cdef Py_ssize_t i, s
    cdef int it
    cdef double i_max = 0.5 * u_max * u_max
    cdef int L = <int> g_list.shape[0]
    cdef const double* g = &g_list[0]
    cdef double table[256]
    cdef double th, I, a0, b1t0, b1i0, b2t0, b2i0
    cdef double a1, b1t1, b1i1, b2t1, b2i1
    cdef double pth, pI, nth, nI, cth, cI, mth, mI, d1, d2, delta, scale
    cdef double w1, w2
    cdef bint ok, stopped
    if table_nmax + 1 >= MAX_TABLE or n0 + 1 > table_nmax:
        raise ValueError("bessel table size out of kernel bounds")

    with nogil:
        for i in range(N):
            th = Z[i, 0]
            I = Z[i, 1]
            for s in range(S):
                if failed[i] < 0:
                    w1 = dW[i, s, 0]
                    w2 = dW[i, s, 1]
                    ok = _wave_fields_c(th, I, n0, noise_coef, drift_scale,
                                        <int> n_lo, L, g, table_start, table_nmax,
                                        i_min, i_max,
                                        &a0, &b1t0, &b1i0, &b2t0, &b2i0, table)
                    if not ok:
                        failed[i] = step_offset + s
                    elif scheme == 0:
                        pth = th + h * a0 + w1 * b1t0 + w2 * b2t0
                        pI = I + w1 * b1i0 + w2 * b2i0
                        ok = _wave_fields_c(pth, pI, n0, noise_coef, drift_scale,
                                            <int> n_lo, L, g, table_start, table_nmax,
                                            i_min, i_max,
                                            &a1, &b1t1, &b1i1, &b2t1, &b2i1, table)
                        if not ok:
                            failed[i] = step_offset + s
                        else:
                            nth = th + 0.5 * h * (a0 + a1) \
                                + 0.5 * w1 * (b1t0 + b1t1) + 0.5 * w2 * (b2t0 + b2t1)
                            nI = I + 0.5 * w1 * (b1i0 + b1i1) + 0.5 * w2 * (b2i0 + b2i1)
                            if isfinite(nth) and isfinite(nI):
                                th = nth
                                I = nI
                            else:
                                failed[i] = step_offset + s
                    else:
                        # fixed-point midpoint from the Euler-Maruyama predictor
                        cth = th + h * a0 + w1 * b1t0 + w2 * b2t0
                        cI = I + w1 * b1i0 + w2 * b2i0
                        scale = 1.0 + max(fabs(th), fabs(I))
                        stopped = False
                        for it in range(max_iter):
                            mth = 0.5 * (th + cth)
                            mI = 0.5 * (I + cI)
                            ok = _wave_fields_c(mth, mI, n0, noise_coef, drift_scale,
                                                <int> n_lo, L, g, table_start,
                                                table_nmax, i_min, i_max,
                                                &a1, &b1t1, &b1i1, &b2t1, &b2i1, table)
                            if not ok:
                                break
                            nth = th + h * a1 + w1 * b1t1 + w2 * b2t1
                            nI = I + w1 * b1i1 + w2 * b2i1
                            d1 = fabs(nth - cth)
                            d2 = fabs(nI - cI)
                            delta = d1 if d1 > d2 else d2
                            cth = nth
                            cI = nI
                            if not isfinite(delta) or delta <= tol * scale:
                                stopped = True
                                break
                        if stopped and ok and isfinite(cth) and isfinite(cI):
                            th = cth
                            I = cI
                        else:
                            failed[i] = step_offset + s
                if rec_cols[s] >= 0:
                    records[i, rec_cols[s], 0] = th
                    records[i, rec_cols[s], 1] = I
            Z[i, 0] = th
            Z[i, 1] = I


cdef inline double _mrhs_t(double th, double I, double s, double eta,
                           double eps, double nu) noexcept nogil:
    cdef double u = sqrt(2.0 * I)
    return 1.0 - eps * cos(u * sin(th) - nu * s - eta) * sin(th) / u


cdef inline double _mrhs_i(double th, double I, double s, double eta,
                           double eps, double nu) noexcept nogil:
    cdef double u = sqrt(2.0 * I)
    return eps * cos(u * sin(th) - nu * s - eta) * u * cos(th)


def karney_micro(double[:, ::1] Z, double[:, ::1] etas, double eps, double nu,
                 int steps_per_period, double i_min,
                 double[:, :, ::1] records, long long[::1] failed):
    """Phase-randomized micro integrator: per period draw the supplied eta,
    RK4 the canonical equations with 2 pi / steps_per_period steps, wrap the
    angle, and record the state.  Mirror of the numpy period loop."""
    cdef Py_ssize_t N = Z.shape[0]
    cdef Py_ssize_t P = etas.shape[1]
    cdef Py_ssize_t i, p
    cdef int s
    cdef double hh = TWO_PI / steps_per_period
    cdef double th, I, eta, t
    cdef double k1t, k1i, k2t, k2i, k3t, k3i, k4t, k4i

    with nogil:
        for i in range(N):
            th = Z[i, 0]
            I = Z[i, 1]
            for p in range(P):
                if failed[i] < 0:
                    eta = etas[i, p]
                    t = 0.0
                    for s in range(steps_per_period):
                        k1t = _mrhs_t(th, I, t, eta, eps, nu)
                        k1i = _mrhs_i(th, I, t, eta, eps, nu)
                        k2t = _mrhs_t(th + 0.5 * hh * k1t, I + 0.5 * hh * k1i, t + 0.5 * hh, eta, eps, nu)
                        k2i = _mrhs_i(th + 0.5 * hh * k1t, I + 0.5 * hh * k1i, t + 0.5 * hh, eta, eps, nu)
                        k3t = _mrhs_t(th + 0.5 * hh * k2t, I + 0.5 * hh * k2i, t + 0.5 * hh, eta, eps, nu)
                        k3i = _mrhs_i(th + 0.5 * hh * k2t, I + 0.5 * hh * k2i, t + 0.5 * hh, eta, eps, nu)
                        k4t = _mrhs_t(th + hh * k3t, I + hh * k3i, t + hh, eta, eps, nu)
                        k4i = _mrhs_i(th + hh * k3t, I + hh * k3i, t + hh, eta, eps, nu)
                        th = th + (hh / 6.0) * (k1t + 2.0 * k2t + 2.0 * k3t + k4t)
                        I = I + (hh / 6.0) * (k1i + 2.0 * k2i + 2.0 * k3i + k4i)
                        t += hh
                    th = th - TWO_PI * floor(th / TWO_PI)
                    if (not isfinite(I)) or I < i_min:
                        failed[i] = p
                        th = records[i, p, 0]
                        I = records[i, p, 1]
                records[i, p + 1, 0] = th
                records[i, p + 1, 1] = I
