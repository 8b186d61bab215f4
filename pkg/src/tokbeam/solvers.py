"""Classical beamforming solvers used as label oracles and baselines."""
from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import kernels
from .channel import CsiSample, Utility, complex_gaussian, sample_rng
from .errors import ConfigurationError, RankError
from .utility import UtilityConfig, power, rates, system_utility

log = logging.getLogger(__name__)

SOLVER_VERSION = 1


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SolverConfig:
    tolerance: float = 1e-4
    max_iters: int = 500
    bisect_tol: float = 1e-10
    circuit_power: float = 0.5
    # max-min: geometric temperature schedule and steps per temperature
    tau_start: float = 1.0
    tau_end: float = 0.01
    tau_rounds: int = 8
    multistart: bool = True

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ConfigurationError("tolerance must be positive")
        if self.max_iters < 1:
            raise ConfigurationError("max_iters must be >= 1")


@dataclass
class SolverResult:
    w: np.ndarray
    value: float
    converged: bool = True
    iterations: int = 0
    trace: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rate_spread: float | None = None


def mrt(sample: CsiSample) -> np.ndarray:
    """Matched filter with equal per-user power, total power P_Max."""
    norms = np.linalg.norm(sample.h, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise RankError("MRT is undefined for an all-zero channel row")
    return math.sqrt(sample.p_max / sample.k_users) * sample.h / norms


def zf(sample: CsiSample) -> np.ndarray:
    """Zero-forcing: columns of the pseudo-inverse, equal per-user power."""
    k, n = sample.h.shape
    if k > n:
        raise RankError(f"zero-forcing needs K <= N_T, got K={k}, N_T={n}")
    hh = sample.h.conj()  # row k is h_k^H
    s = np.linalg.svd(hh, compute_uv=False)
    if s[-1] <= 1e-12 * max(s[0], 1e-300):
        raise RankError("channel matrix is rank deficient")
    w = np.linalg.pinv(hh).T  # row i satisfies h_k^H w_i = delta_ki
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    return math.sqrt(sample.p_max / k) * w


def _starts(sample: CsiSample, cfg: SolverConfig, dominant: bool = True):
    """Initial points: MRT, plus ZF and one-user-dominant MRT variants.

    The dominant starts give one user 99% of the budget; WMMSE cannot leave
    the basin where every user is served, and on strongly correlated
    channels the optimum switches some users off.
    """
    w_mrt = mrt(sample)
    starts = [("mrt", w_mrt)]
    if not cfg.multistart:
        return starts
    try:
        starts.append(("zf", zf(sample)))
    except RankError:
        pass
    k = sample.k_users
    if dominant and k > 1:
        for j in range(k):
            share = np.full(k, 0.01 / (k - 1))
            share[j] = 0.99
            starts.append((f"user{j}", w_mrt * np.sqrt(share * k)[:, None]))
    return starts


def _warn(result: SolverResult, what: str, sample: CsiSample):
    if not result.converged:
        warnings.warn(f"{what} did not converge on sample {sample.id}", ConvergenceWarning,
                      stacklevel=3)


def wmmse_sr(sample: CsiSample, cfg: SolverConfig = SolverConfig()) -> SolverResult:
    """Sum-rate WMMSE, started from MRT (and ZF when it exists); best run wins."""
    best = None
    for _, w0 in _starts(sample, cfg):
        w, trace, conv = kernels.wmmse(sample.h, sample.noise_power, sample.p_max, w0, 0.0,
                                       cfg.tolerance, cfg.max_iters, cfg.bisect_tol)
        val = system_utility(sample, w, Utility.SR)
        if best is None or val > best.value:
            best = SolverResult(w, val, conv, len(trace) - 1, trace)
    _warn(best, "WMMSE", sample)
    return best


def _dinkelbach_from(sample, w0, cfg, p_c):
    ucfg = UtilityConfig(Utility.EE, p_c)
    w = w0
    ee = system_utility(sample, w, ucfg)
    trace = [ee]
    converged = False
    for it in range(cfg.max_iters):
        lam = ee
        w_new, _, inner_conv = kernels.wmmse(sample.h, sample.noise_power, sample.p_max, w, lam,
                                             cfg.tolerance * 0.1, cfg.max_iters, cfg.bisect_tol)
        sr = system_utility(sample, w_new, Utility.SR)
        gap = sr - lam * (power(w_new) + p_c)
        ee_new = system_utility(sample, w_new, ucfg)
        if ee_new >= ee:
            w, ee = w_new, ee_new
        trace.append(ee)
        if gap < cfg.tolerance:
            converged = True
            break
    return SolverResult(w, ee, converged, len(trace) - 1, np.array(trace))


def dinkelbach_ee(sample: CsiSample, cfg: SolverConfig = SolverConfig(),
                  circuit_power: float | None = None) -> SolverResult:
    """Energy efficiency by Dinkelbach's method with a power-priced WMMSE inner loop."""
    p_c = cfg.circuit_power if circuit_power is None else circuit_power
    if not p_c > 0:
        raise ConfigurationError("circuit power must be positive")
    best = None
    for _, w0 in _starts(sample, cfg):
        res = _dinkelbach_from(sample, w0, cfg, p_c)
        if best is None or res.value > best.value:
            best = res
    _warn(best, "Dinkelbach", sample)
    return best


def maxmin_rate(sample: CsiSample, cfg: SolverConfig = SolverConfig()) -> SolverResult:
    """Max-min rate via projected gradient ascent on a smoothed minimum."""
    best = None
    for _, w0 in _starts(sample, cfg, dominant=False):
        w, trace, conv = kernels.maxmin_pga(sample.h, sample.noise_power, sample.p_max, w0,
                                            cfg.tau_start, cfg.tau_end, cfg.tau_rounds,
                                            cfg.max_iters, cfg.tolerance)
        val = system_utility(sample, w, Utility.MR)
        if best is None or val > best.value:
            best = SolverResult(w, val, conv, len(trace) - 1, trace)
    rr = rates(sample, best.w)
    best.rate_spread = float(rr.max() - rr.min())
    _warn(best, "max-min PGA", sample)
    return best


def gpa_numpy(w_raw: np.ndarray, p_max: float) -> np.ndarray:
    """Power adapter on numpy arrays; works on a leading batch axis too."""
    w_raw = np.asarray(w_raw)
    norm2 = np.sum(w_raw.real ** 2 + w_raw.imag ** 2, axis=(-2, -1), keepdims=True)
    scale = np.where(norm2 <= 1.0, 1.0, 1.0 / np.sqrt(np.maximum(norm2, 1e-300)))
    return math.sqrt(p_max) * w_raw * scale


@lru_cache(maxsize=4)
def _candidates(seed, k, n, count, p_max, chunk):
    rng = sample_rng(seed, count, "random-search", chunk)
    return gpa_numpy(complex_gaussian(rng, (count, k, n)), p_max)


def random_search_all(sample: CsiSample, n_candidates: int, seed: int = 0,
                      circuit_power: float = 0.5, chunk: int = 250_000) -> dict:
    """Best (w, utility) per utility over ``n_candidates`` GPA-projected draws.

    Candidate sets depend only on (seed, dims, count, P_Max), so a batch of
    samples with equal dims reuses the same draws.
    """
    if n_candidates < 1:
        raise ConfigurationError("need at least one candidate")
    k, n = sample.h.shape
    best = {u: (None, -np.inf) for u in Utility}
    done = 0
    idx = 0
    while done < n_candidates:
        m = min(chunk, n_candidates - done)
        cands = _candidates(seed, k, n, m, sample.p_max, idx)
        vals = kernels.utilities_batch(sample.h, sample.noise_power, cands, circuit_power)
        for col, u in enumerate(Utility):
            j = int(np.argmax(vals[:, col]))
            if vals[j, col] > best[u][1]:
                best[u] = (cands[j].copy(), float(vals[j, col]))
        done += m
        idx += 1
    return best


def random_search(sample: CsiSample, utility, n_candidates: int, seed: int = 0,
                  circuit_power: float = 0.5) -> tuple[np.ndarray, float]:
    return random_search_all(sample, n_candidates, seed, circuit_power)[Utility(utility)]


def solve(sample: CsiSample, utility, cfg: SolverConfig = SolverConfig()) -> SolverResult:
    utility = Utility(utility)
    if utility is Utility.SR:
        return wmmse_sr(sample, cfg)
    if utility is Utility.EE:
        return dinkelbach_ee(sample, cfg)
    return maxmin_rate(sample, cfg)


@dataclass
class LabelStats:
    solved: int
    unconverged: list

    def __int__(self):
        return self.solved


def label_samples(samples, utilities, cfg: SolverConfig = SolverConfig(), threads: int = 1,
                  force: bool = False) -> "LabelStats":
    """Attach oracle labels in place.

    Labels already present with the current solver version are kept.
    Returns how many labels were solved and which (id, utility) pairs hit
    the iteration cap.
    """
    jobs = [(s, Utility(u)) for s in samples for u in utilities
            if force or s.label_versions.get(Utility(u).value) != SOLVER_VERSION
            or Utility(u).value not in s.labels]

    def run(job):
        s, u = job
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            return solve(s, u, cfg)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    unconverged = []
    for (s, u), res in zip(jobs, results):
        s.set_label(u, res.w, SOLVER_VERSION)
        if not res.converged:
            unconverged.append((s.id, u.value))
    return LabelStats(len(jobs), unconverged)
