"""Pure numpy implementations of the solver kernels.

Reference semantics for ``_ckernels.pyx``; both modules expose the same
functions and must agree to rounding error.
"""
import math

import numpy as np

LN2 = math.log(2.0)
NULL_EIG_RTOL = 1e-10


def utilities_batch(h, noise, cands, circuit_power):
    """Utilities of many candidates at once.

    ``cands`` has shape (n, K, N_T). Returns an (n, 3) array whose columns
    are EE, SR, MR.
    """
    g = np.einsum("kj,nij->nki", h.conj(), cands)
    g2 = g.real ** 2 + g.imag ** 2
    k = h.shape[0]
    idx = np.arange(k)
    signal = g2[:, idx, idx]
    interference = g2.sum(axis=2) - signal + noise
    r = np.log2(1.0 + signal / interference)
    sr = r.sum(axis=1)
    pw = (cands.real ** 2 + cands.imag ** 2).sum(axis=(1, 2))
    out = np.empty((cands.shape[0], 3))
    out[:, 0] = sr / (pw + circuit_power)
    out[:, 1] = sr
    out[:, 2] = r.min(axis=1)
    return out


def _rates(h, noise, w):
    g = h.conj() @ w.T
    g2 = g.real ** 2 + g.imag ** 2
    signal = np.diag(g2).copy()
    total = g2.sum(axis=1) + noise
    return signal, total, g


def _objective(h, noise, w, price):
    signal, total, _ = _rates(h, noise, w)
    sr = float(np.sum(np.log2(total / (total - signal))))
    return sr - price * float(np.sum(w.real ** 2 + w.imag ** 2))


def wmmse(h, noise, p_max, w0, price=0.0, tol=1e-4, max_iters=500, bisect_tol=1e-10):
    """WMMSE block-coordinate ascent on ``SR(W) - price * power(W)``.

    The beamformer step solves the regularised least squares problem with
    an eigendecomposition of the weighted channel covariance and a bisection
    on the power multiplier. Returns ``(w, trace, converged)`` where
    ``trace[t]`` is the objective after t iterations.
    """
    v = np.array(w0, dtype=np.complex128)
    price_ln = price * LN2  # WMMSE works in nats
    obj = _objective(h, noise, v, price)
    trace = [obj]
    converged = False
    for _ in range(max_iters):
        signal, total, g = _rates(h, noise, v)
        gd = np.diag(g)
        u = gd / total
        weight = total / (total - signal)  # 1 / e_k = 1 + SINR_k
        c = weight * (u.real ** 2 + u.imag ** 2)
        cov = (h.T * c) @ h.conj()  # sum_i c_i h_i h_i^H
        lam, vecs = np.linalg.eigh(cov)
        b = (weight * u)[:, None] * h
        proj = b @ vecs.conj()  # rows: U^H b_k
        lam_max = max(float(lam[-1]), 0.0)
        null = lam <= NULL_EIG_RTOL * lam_max
        proj[:, null] = 0.0
        lam = np.where(null, 0.0, lam)
        s = (proj.real ** 2 + proj.imag ** 2).sum(axis=0)
        mu = _bisect_multiplier(lam, s, price_ln, p_max, bisect_tol)
        denom = lam + price_ln + mu
        denom = np.where(s > 0, denom, 1.0)
        v = (proj / denom) @ vecs.T
        pw = float(np.sum(v.real ** 2 + v.imag ** 2))
        if pw > p_max:
            v *= math.sqrt(p_max / pw)
        new = _objective(h, noise, v, price)
        trace.append(new)
        if abs(new - obj) < tol:
            converged = True
            break
        obj = new
    return v, np.array(trace), converged


def _power_at(lam, s, mu):
    d = lam + mu
    mask = s > 0
    return float(np.sum(s[mask] / d[mask] ** 2))


def _bisect_multiplier(lam, s, base, p_max, tol):
    """Smallest extra multiplier mu >= 0 keeping the power within p_max."""
    if _power_at(lam, s, base) <= p_max:
        return 0.0
    lo, hi = 0.0, max(1e-12, float(np.max(lam)) * 1e-6)
    while _power_at(lam, s, base + hi) > p_max:
        lo, hi = hi, 2.0 * hi
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if _power_at(lam, s, base + mid) > p_max:
            lo = mid
        else:
            hi = mid
    return hi


def _smooth_min(h, noise, w, tau, need_grad):
    g = h.conj() @ w.T
    g2 = g.real ** 2 + g.imag ** 2
    signal = np.diag(g2).copy()
    total = g2.sum(axis=1) + noise
    interference = total - signal
    r = np.log2(total) - np.log2(interference)
    z = -r / tau
    m = z.max()
    e = np.exp(z - m)
    f = -tau * (m + math.log(e.sum()))
    if not need_grad:
        return f, r, None
    pi = e / e.sum()
    k = h.shape[0]
    coef = (pi / LN2)[:, None] * (1.0 / total[:, None] - (1.0 - np.eye(k)) / interference[:, None])
    grad = 2.0 * ((coef * g).T @ h)  # steepest ascent direction, row i for user i
    return f, r, grad


def _project(w, p_max):
    pw = float(np.sum(w.real ** 2 + w.imag ** 2))
    return w * math.sqrt(p_max / pw) if pw > p_max else w


def maxmin_pga(h, noise, p_max, w0, tau_start=1.0, tau_end=0.01, rounds=8, steps=200,
               tol=1e-4):
    """Projected gradient ascent on a log-sum-exp smoothed minimum rate.

    The temperature decreases geometrically from ``tau_start`` to
    ``tau_end`` over ``rounds``; each round runs Armijo-backtracked steps
    until the smoothed objective improves by less than ``tol``. Returns the
    iterate with the best true minimum rate, the per-round best minimum
    rates and whether the last round stopped on tolerance.
    """
    w = _project(np.array(w0, dtype=np.complex128), p_max)
    _, r, _ = _smooth_min(h, noise, w, 1.0, False)
    best_w, best = w.copy(), float(r.min())
    trace = [best]
    step = 1.0
    converged = False
    taus = [tau_start] if rounds == 1 else np.geomspace(tau_start, tau_end, rounds)
    for tau in taus:
        f, r, grad = _smooth_min(h, noise, w, tau, True)
        converged = False
        for _ in range(steps):
            gnorm2 = float(np.sum(grad.real ** 2 + grad.imag ** 2))
            if gnorm2 == 0.0:
                converged = True
                break
            while True:
                cand = _project(w + step * grad, p_max)
                f_new, r_new, _ = _smooth_min(h, noise, cand, tau, False)
                d = cand - w
                if f_new >= f + 1e-4 * float(np.sum(grad.real * d.real + grad.imag * d.imag)):
                    break
                step *= 0.5
                if step < 1e-14:
                    break
            if step < 1e-14:
                step = 1e-3
                converged = True
                break
            gain = f_new - f
            w = cand
            if float(r_new.min()) > best:
                best, best_w = float(r_new.min()), w.copy()
            step *= 2.0
            if gain < tol:
                converged = True
                break
            f, r, grad = _smooth_min(h, noise, w, tau, True)
        trace.append(best)
    return best_w, np.array(trace), converged
