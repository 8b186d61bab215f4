"""Rates, system utilities and the performance ratio.

Beamforming matrices are stored row-per-user: ``w[k]`` is user k's
transmit vector, so ``h_k^H w_i = sum_j conj(h[k, j]) * w[i, j]``.
All rates are in bits/s/Hz.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import CsiSample, Utility
from .errors import ConfigurationError, DimensionError


@dataclass(frozen=True)
class UtilityConfig:
    kind: Utility = Utility.SR
    circuit_power: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "kind", Utility(self.kind))
        if self.kind is Utility.EE and not self.circuit_power > 0:
            raise ConfigurationError("EE needs a positive circuit power")


def power(w) -> float:
    """Total transmit power sum_k ||w_k||^2."""
    w = np.asarray(w)
    return float(np.sum(w.real ** 2 + w.imag ** 2))


def _check(sample: CsiSample, w):
    w = np.asarray(w, dtype=np.complex128)
    if w.shape != sample.h.shape:
        raise DimensionError(f"beamformer shape {w.shape} does not match channel {sample.h.shape}")
    return w


def rates_from(h, noise, w) -> np.ndarray:
    """Per-user rates for raw arrays ``h`` (K, N), ``noise`` (K,), ``w`` (K, N)."""
    g = h.conj() @ w.T  # g[k, i] = h_k^H w_i
    g2 = g.real ** 2 + g.imag ** 2
    signal = np.diag(g2).copy()
    np.fill_diagonal(g2, 0.0)
    interference = g2.sum(axis=1) + noise
    return np.log2(1.0 + signal / interference)


def rates(sample: CsiSample, w) -> np.ndarray:
    return rates_from(sample.h, sample.noise_power, _check(sample, w))


def rate(sample: CsiSample, w, k: int) -> float:
    if not 0 <= k < sample.k_users:
        raise DimensionError(f"user index {k} out of range for K={sample.k_users}")
    return float(rates(sample, w)[k])


def utility_from_rates(r, pw, cfg: UtilityConfig) -> float:
    if cfg.kind is Utility.SR:
        return float(np.sum(r))
    if cfg.kind is Utility.MR:
        return float(np.min(r))
    return float(np.sum(r) / (pw + cfg.circuit_power))


def system_utility(sample: CsiSample, w, cfg: UtilityConfig | Utility | str = Utility.SR) -> float:
    if not isinstance(cfg, UtilityConfig):
        cfg = UtilityConfig(Utility(cfg))
    w = _check(sample, w)
    return utility_from_rates(rates_from(sample.h, sample.noise_power, w), power(w), cfg)


def performance_ratio(nn_utils, cvx_utils) -> float:
    """100 * mean(model utilities) / mean(reference utilities)."""
    nn_utils = np.asarray(nn_utils, dtype=np.float64)
    cvx_utils = np.asarray(cvx_utils, dtype=np.float64)
    if nn_utils.size == 0 or cvx_utils.size == 0:
        raise ConfigurationError("performance ratio needs non-empty utility lists")
    if nn_utils.shape != cvx_utils.shape:
        raise DimensionError("utility lists must have equal length")
    denom = cvx_utils.mean()
    if denom == 0:
        raise ConfigurationError("reference utilities average to zero")
    return float(100.0 * nn_utils.mean() / denom)
