# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled solver kernels. Same signatures and semantics as _pykernels."""
import numpy as np

from libc.math cimport exp, log, log2, sqrt, INFINITY
from scipy.linalg.cython_lapack cimport zheev

ctypedef double complex dc

cdef double LN2 = log(2.0)
cdef double NULL_EIG_RTOL = 1e-10


cdef inline double abs2(dc z) noexcept nogil:
    return z.real * z.real + z.imag * z.imag


cdef inline dc cdot_h(const dc[:, ::1] h, Py_ssize_t k, const dc[:, ::1] w, Py_ssize_t i,
                      Py_ssize_t n) noexcept nogil:
    # h_k^H w_i
    cdef double re = 0.0, im = 0.0
    cdef Py_ssize_t j
    cdef dc a, b
    for j in range(n):
        a = h[k, j]
        b = w[i, j]
        re += a.real * b.real + a.imag * b.imag
        im += a.real * b.imag - a.imag * b.real
    return re + 1j * im


def utilities_batch(h, noise, cands, double circuit_power):
    cdef const dc[:, ::1] H = np.ascontiguousarray(h, dtype=np.complex128)
    cdef const double[::1] nz = np.ascontiguousarray(noise, dtype=np.float64)
    cdef const dc[:, :, ::1] C = np.ascontiguousarray(cands, dtype=np.complex128)
    cdef Py_ssize_t n = C.shape[0], K = C.shape[1], N = C.shape[2]
    out = np.empty((n, 3))
    cdef double[:, ::1] O = out
    cdef Py_ssize_t b, k, i, j
    cdef double re, im, a, sig, tot, r, sr, mr, pw
    cdef dc x, y
    with nogil:
        for b in range(n):
            sr = 0.0
            mr = INFINITY
            pw = 0.0
            for k in range(K):
                tot = nz[k]
                sig = 0.0
                for i in range(K):
                    re = 0.0
                    im = 0.0
                    for j in range(N):
                        x = H[k, j]
                        y = C[b, i, j]
                        re += x.real * y.real + x.imag * y.imag
                        im += x.real * y.imag - x.imag * y.real
                    a = re * re + im * im
                    if i == k:
                        sig = a
                    else:
                        tot += a
                r = log2(1.0 + sig / tot)
                sr += r
                if r < mr:
                    mr = r
                for j in range(N):
                    pw += abs2(C[b, k, j])
            O[b, 0] = sr / (pw + circuit_power)
            O[b, 1] = sr
            O[b, 2] = mr
    return out


cdef double objective(const dc[:, ::1] H, const double[::1] nz, dc[:, ::1] W, double price,
                      Py_ssize_t K, Py_ssize_t N) noexcept nogil:
    cdef double sr = 0.0, pw = 0.0, sig, tot, a
    cdef Py_ssize_t k, i, j
    for k in range(K):
        tot = nz[k]
        sig = 0.0
        for i in range(K):
            a = abs2(cdot_h(H, k, W, i, N))
            tot += a
            if i == k:
                sig = a
        sr += log2(tot / (tot - sig))
        for j in range(N):
            pw += abs2(W[k, j])
    return sr - price * pw


cdef double power_at(const double[::1] lam, const double[::1] s, double mu,
                     Py_ssize_t N) noexcept nogil:
    cdef double p = 0.0, d
    cdef Py_ssize_t n
    for n in range(N):
        if s[n] > 0.0:
            d = lam[n] + mu
            p += s[n] / (d * d)
    return p


cdef double bisect_multiplier(const double[::1] lam, const double[::1] s, double base,
                              double p_max, double tol, Py_ssize_t N) noexcept nogil:
    cdef double lo = 0.0, hi, mid, lam_max = lam[0]
    cdef Py_ssize_t n
    if power_at(lam, s, base, N) <= p_max:
        return 0.0
    for n in range(N):
        if lam[n] > lam_max:
            lam_max = lam[n]
    hi = lam_max * 1e-6
    if hi < 1e-12:
        hi = 1e-12
    while power_at(lam, s, base + hi, N) > p_max:
        lo = hi
        hi = 2.0 * hi
    while hi - lo > tol * (hi if hi > 1.0 else 1.0):
        mid = 0.5 * (lo + hi)
        if power_at(lam, s, base + mid, N) > p_max:
            lo = mid
        else:
            hi = mid
    return hi


def wmmse(h, noise, double p_max, w0, double price=0.0, double tol=1e-4, int max_iters=500,
          double bisect_tol=1e-10):
    cdef const dc[:, ::1] H = np.ascontiguousarray(h, dtype=np.complex128)
    cdef const double[::1] nz = np.ascontiguousarray(noise, dtype=np.float64)
    v_arr = np.array(w0, dtype=np.complex128, order="C")
    cdef dc[:, ::1] V = v_arr
    cdef int K = H.shape[0], N = H.shape[1]
    cdef dc[::1] cov = np.zeros(N * N, dtype=np.complex128)  # column-major
    cdef dc[:, ::1] proj = np.zeros((K, N), dtype=np.complex128)
    cdef dc[::1] u = np.zeros(K, dtype=np.complex128)
    cdef double[::1] weight = np.zeros(K), c = np.zeros(K)
    cdef double[::1] lam = np.zeros(N), s = np.zeros(N)
    cdef int lwork = 64 * N, info = 0
    cdef dc[::1] work = np.zeros(lwork, dtype=np.complex128)
    cdef double[::1] rwork = np.zeros(max(1, 3 * N - 2))
    trace_arr = np.zeros(max_iters + 1)
    cdef double[::1] trace = trace_arr
    cdef double price_ln = price * LN2
    cdef double obj, new, tot, sig, a, lam_max, mu, d, pw, scale
    cdef dc g, b, acc
    cdef int it, k, i, m, n, count = 0
    cdef bint converged = False
    cdef char jobz = b'V', uplo = b'U'

    with nogil:
        obj = objective(H, nz, V, price, K, N)
        trace[0] = obj
        for it in range(max_iters):
            for k in range(K):
                tot = nz[k]
                sig = 0.0
                for i in range(K):
                    a = abs2(cdot_h(H, k, V, i, N))
                    tot += a
                    if i == k:
                        sig = a
                g = cdot_h(H, k, V, k, N)
                u[k] = g / tot
                weight[k] = tot / (tot - sig)
                c[k] = weight[k] * abs2(u[k])
            for n in range(N):
                for m in range(N):
                    acc = 0.0
                    for i in range(K):
                        acc = acc + c[i] * H[i, m] * H[i, n].conjugate()
                    cov[m + n * N] = acc
            zheev(&jobz, &uplo, &N, &cov[0], &N, &lam[0], &work[0], &lwork, &rwork[0], &info)
            lam_max = lam[N - 1] if lam[N - 1] > 0.0 else 0.0
            for n in range(N):
                s[n] = 0.0
            for k in range(K):
                b = weight[k] * u[k]
                for n in range(N):
                    acc = 0.0
                    for m in range(N):
                        acc = acc + cov[m + n * N].conjugate() * b * H[k, m]
                    if lam[n] <= NULL_EIG_RTOL * lam_max:
                        acc = 0.0
                    proj[k, n] = acc
                    s[n] += abs2(acc)
            for n in range(N):
                if lam[n] <= NULL_EIG_RTOL * lam_max:
                    lam[n] = 0.0
            mu = bisect_multiplier(lam, s, price_ln, p_max, bisect_tol, N)
            pw = 0.0
            for k in range(K):
                for m in range(N):
                    acc = 0.0
                    for n in range(N):
                        if s[n] > 0.0:
                            d = lam[n] + price_ln + mu
                            acc = acc + cov[m + n * N] * proj[k, n] / d
                    V[k, m] = acc
                    pw += abs2(acc)
            if pw > p_max:
                scale = sqrt(p_max / pw)
                for k in range(K):
                    for m in range(N):
                        V[k, m] = V[k, m] * scale
            new = objective(H, nz, V, price, K, N)
            count += 1
            trace[count] = new
            if fabs_(new - obj) < tol:
                converged = True
                break
            obj = new
    if info != 0:
        raise np.linalg.LinAlgError(f"zheev failed with info={info}")
    return v_arr, trace_arr[:count + 1].copy(), bool(converged)


cdef inline double fabs_(double x) noexcept nogil:
    return -x if x < 0 else x


cdef double smooth_min(const dc[:, ::1] H, const double[::1] nz, dc[:, ::1] W, double tau,
                       int K, int N, double[::1] r, dc[:, ::1] grad, dc[:, ::1] G,
                       double[::1] tot, double[::1] itf, double[::1] pi,
                       bint need_grad) noexcept nogil:
    cdef int k, i, j
    cdef double a, m = -INFINITY, z, esum = 0.0, f, coef
    cdef dc acc
    for k in range(K):
        tot[k] = nz[k]
        for i in range(K):
            G[k, i] = cdot_h(H, k, W, i, N)
            a = abs2(G[k, i])
            tot[k] += a
            if i == k:
                itf[k] = -a
        itf[k] += tot[k]
        r[k] = log2(tot[k]) - log2(itf[k])
        z = -r[k] / tau
        if z > m:
            m = z
    for k in range(K):
        pi[k] = exp(-r[k] / tau - m)
        esum += pi[k]
    f = -tau * (m + log(esum))
    if not need_grad:
        return f
    for k in range(K):
        pi[k] /= esum
    for i in range(K):
        for j in range(N):
            grad[i, j] = 0.0
        for k in range(K):
            coef = pi[k] / LN2 * (1.0 / tot[k] - (0.0 if i == k else 1.0 / itf[k]))
            acc = 2.0 * coef * G[k, i]
            for j in range(N):
                grad[i, j] = grad[i, j] + acc * H[k, j]
    return f


cdef void project(dc[:, ::1] W, double p_max, int K, int N) noexcept nogil:
    cdef double pw = 0.0, scale
    cdef int k, j
    for k in range(K):
        for j in range(N):
            pw += abs2(W[k, j])
    if pw > p_max:
        scale = sqrt(p_max / pw)
        for k in range(K):
            for j in range(N):
                W[k, j] = W[k, j] * scale


cdef double minimum(double[::1] r, int K) noexcept nogil:
    cdef double m = r[0]
    cdef int k
    for k in range(1, K):
        if r[k] < m:
            m = r[k]
    return m


def maxmin_pga(h, noise, double p_max, w0, double tau_start=1.0, double tau_end=0.01,
               int rounds=8, int steps=200, double tol=1e-4):
    cdef const dc[:, ::1] H = np.ascontiguousarray(h, dtype=np.complex128)
    cdef const double[::1] nz = np.ascontiguousarray(noise, dtype=np.float64)
    cdef int K = H.shape[0], N = H.shape[1]
    w_arr = np.array(w0, dtype=np.complex128, order="C")
    best_arr = np.empty_like(w_arr)
    cand_arr = np.empty_like(w_arr)
    cdef dc[:, ::1] W = w_arr, best_w = best_arr, cand = cand_arr
    cdef dc[:, ::1] grad = np.zeros((K, N), dtype=np.complex128)
    cdef dc[:, ::1] G = np.zeros((K, K), dtype=np.complex128)
    cdef double[::1] r = np.zeros(K), r_new = np.zeros(K), tot = np.zeros(K)
    cdef double[::1] itf = np.zeros(K), pi = np.zeros(K)
    taus_arr = np.array([tau_start]) if rounds == 1 else np.geomspace(tau_start, tau_end, rounds)
    cdef double[::1] taus = taus_arr
    trace_arr = np.zeros(len(taus_arr) + 1)
    cdef double[::1] trace = trace_arr
    cdef double best, step = 1.0, tau, f, f_new, gnorm2, lin, gain
    cdef int ri, it, k, j
    cdef bint converged = False, stalled

    with nogil:
        project(W, p_max, K, N)
        smooth_min(H, nz, W, 1.0, K, N, r, grad, G, tot, itf, pi, False)
        best = minimum(r, K)
        best_w[:, :] = W
        trace[0] = best
        for ri in range(taus.shape[0]):
            tau = taus[ri]
            f = smooth_min(H, nz, W, tau, K, N, r, grad, G, tot, itf, pi, True)
            converged = False
            for it in range(steps):
                gnorm2 = 0.0
                for k in range(K):
                    for j in range(N):
                        gnorm2 += abs2(grad[k, j])
                if gnorm2 == 0.0:
                    converged = True
                    break
                stalled = False
                while True:
                    for k in range(K):
                        for j in range(N):
                            cand[k, j] = W[k, j] + step * grad[k, j]
                    project(cand, p_max, K, N)
                    f_new = smooth_min(H, nz, cand, tau, K, N, r_new, grad, G, tot, itf, pi,
                                       False)
                    lin = 0.0
                    for k in range(K):
                        for j in range(N):
                            lin += (grad[k, j].real * (cand[k, j].real - W[k, j].real)
                                    + grad[k, j].imag * (cand[k, j].imag - W[k, j].imag))
                    if f_new >= f + 1e-4 * lin:
                        break
                    step *= 0.5
                    if step < 1e-14:
                        stalled = True
                        break
                if stalled:
                    step = 1e-3
                    converged = True
                    break
                gain = f_new - f
                W[:, :] = cand
                if minimum(r_new, K) > best:
                    best = minimum(r_new, K)
                    best_w[:, :] = W
                step *= 2.0
                if gain < tol:
                    converged = True
                    break
                f = smooth_min(H, nz, W, tau, K, N, r, grad, G, tot, itf, pi, True)
            trace[ri + 1] = best
    return best_arr, trace_arr, bool(converged)
