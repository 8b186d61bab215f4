"""MU-MISO channel samples: generation, CSI-error injection and splitting.

Randomness comes from numpy's counter-based Philox generator. Each sample
gets its own key derived from ``(seed, sample_id)`` so the output does not
depend on generation order or on how the work is split across threads.
Gaussians are drawn with the Box-Muller transform on Philox uniforms.
"""
from __future__ import annotations

import hashlib
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import ConfigurationError, DimensionError

GENERATOR_VERSION = "philox4x64-boxmuller-1"
DEFAULT_NOISE_POWER = 0.1
DEFAULT_SPLIT = (0.8, 0.1, 0.1)

_U64 = (1 << 64) - 1


class Utility(str, Enum):
    """System utility. Declaration order is the canonical task order."""

    EE = "EE"
    SR = "SR"
    MR = "MR"

    @property
    def index(self) -> int:
        return list(Utility).index(self)


TASK_ORDER = tuple(Utility)


@dataclass(frozen=True)
class TaskSpec:
    """A beamforming task <utility, K, N_T> plus its power parameters."""

    utility: Utility
    k_users: int
    n_antennas: int
    p_max: float = 1.0
    circuit_power: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "utility", Utility(self.utility))
        if self.k_users < 1 or self.n_antennas < 1:
            raise ConfigurationError(
                f"task dims must be >= 1, got K={self.k_users}, N_T={self.n_antennas}")
        if not self.p_max > 0:
            raise ConfigurationError(f"p_max must be positive, got {self.p_max}")
        if self.utility is Utility.EE and not self.circuit_power > 0:
            raise ConfigurationError("EE tasks need a positive circuit power")

    def __str__(self):
        return f"{self.utility.value}:{self.k_users}x{self.n_antennas}:P{self.p_max:g}"

    @classmethod
    def parse(cls, text: str, circuit_power: float = 0.5) -> "TaskSpec":
        """Inverse of ``str(task)``, e.g. ``"SR:3x4:P1"``."""
        try:
            util, dims, power = text.strip().split(":")
            k, n = dims.lower().split("x")
            return cls(Utility(util), int(k), int(n), float(power.lstrip("Pp")), circuit_power)
        except (ValueError, KeyError) as exc:
            raise ConfigurationError(f"cannot parse task spec {text!r}") from exc


@dataclass
class CsiSample:
    """One channel realization.

    ``h[k]`` is user k's channel vector; ``labels`` maps a utility name to a
    K x N_T complex beamforming matrix (row k is user k's beamformer).
    """

    id: int
    h: np.ndarray
    noise_power: np.ndarray
    p_max: float = 1.0
    labels: dict = field(default_factory=dict)
    label_versions: dict = field(default_factory=dict)

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=np.complex128)
        if self.h.ndim == 1:
            self.h = self.h[None, :]
        if self.h.ndim != 2 or 0 in self.h.shape:
            raise DimensionError(f"channel must be a non-empty K x N_T matrix, got {self.h.shape}")
        if not np.all(np.isfinite(self.h)):
            raise ConfigurationError(f"sample {self.id}: non-finite channel entries")
        noise = np.asarray(self.noise_power, dtype=np.float64)
        if noise.ndim == 0:
            noise = np.full(self.k_users, float(noise))
        if noise.shape != (self.k_users,):
            raise DimensionError(f"noise_power must have K={self.k_users} entries")
        if not np.all(noise > 0):
            raise ConfigurationError("noise powers must be strictly positive")
        self.noise_power = noise
        self.p_max = float(self.p_max)
        if not self.p_max > 0:
            raise ConfigurationError("p_max must be strictly positive")
        self.labels = {Utility(k).value: np.asarray(v, dtype=np.complex128)
                       for k, v in self.labels.items()}
        for name, w in self.labels.items():
            self._check_label(name, w)

    @property
    def k_users(self) -> int:
        return self.h.shape[0]

    @property
    def n_antennas(self) -> int:
        return self.h.shape[1]

    def _check_label(self, name, w):
        if w.shape != self.h.shape:
            raise DimensionError(f"label {name} has shape {w.shape}, expected {self.h.shape}")
        if float(np.sum(np.abs(w) ** 2)) > self.p_max + 1e-9:
            raise ConfigurationError(f"label {name} of sample {self.id} exceeds the power budget")

    def set_label(self, utility, w, solver_version: int = 0):
        name = Utility(utility).value
        w = np.asarray(w, dtype=np.complex128)
        self._check_label(name, w)
        self.labels[name] = w
        self.label_versions[name] = int(solver_version)

    def with_users(self, rows) -> "CsiSample":
        """Subset/reorder users; labels follow the same row selection."""
        rows = list(rows)
        return replace(self, h=self.h[rows], noise_power=self.noise_power[rows],
                       labels={k: v[rows] for k, v in self.labels.items()},
                       label_versions=dict(self.label_versions))


def derive_key(seed: int, *parts) -> int:
    """128-bit Philox key from a seed and extra integer/str parts."""
    if not 0 <= seed <= _U64:
        raise ConfigurationError(f"seed must be an unsigned 64-bit integer, got {seed}")
    h = hashlib.blake2b(digest_size=16)
    h.update(struct.pack("<Q", seed))
    for p in parts:
        h.update(p.encode() if isinstance(p, str) else struct.pack("<q", int(p)))
    return int.from_bytes(h.digest(), "little")


def sample_rng(seed: int, *parts) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=derive_key(seed, *parts)))


def complex_gaussian(rng: np.random.Generator, shape) -> np.ndarray:
    """CN(0, 1) entries via Box-Muller: re/im are each N(0, 1/2)."""
    n = int(np.prod(shape))
    u = rng.random((2, n))
    radius = np.sqrt(-2.0 * np.log1p(-u[0]))  # 1 - u in (0, 1]
    theta = 2.0 * np.pi * u[1]
    z = (radius * np.cos(theta) + 1j * radius * np.sin(theta)) * math.sqrt(0.5)
    return z.reshape(shape)


def generate_rayleigh(seed: int, task: TaskSpec, count: int, *,
                      noise_power: float = DEFAULT_NOISE_POWER, start_id: int = 0,
                      threads: int = 1) -> list[CsiSample]:
    """Draw ``count`` i.i.d. Rayleigh samples h[k, j] ~ CN(0, 1)."""
    if count < 1:
        raise ConfigurationError(f"count must be >= 1, got {count}")
    if task.k_users < 1 or task.n_antennas < 1:
        raise ConfigurationError("task dims must be >= 1")
    shape = (task.k_users, task.n_antennas)

    def one(i):
        rng = sample_rng(seed, i)
        return CsiSample(i, complex_gaussian(rng, shape),
                         np.full(task.k_users, noise_power), task.p_max)

    ids = range(start_id, start_id + count)
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(one, ids))
    return [one(i) for i in ids]


def inject_csi_error(sample: CsiSample, mu_db: float, seed: int) -> CsiSample:
    """Perturb each h_k by e_k with ||e_k||^2 = 10^(mu_db/10) ||h_k||^2 exactly.

    The error direction is isotropic complex Gaussian. Labels are dropped since
    they were computed for the unperturbed channel. ``mu_db = -inf`` means no
    error and returns the sample as is.
    """
    if math.isinf(mu_db) and mu_db < 0:
        return sample
    if not math.isfinite(mu_db):
        raise ConfigurationError(f"mu_db must be finite or -inf, got {mu_db}")
    ratio = 10.0 ** (mu_db / 10.0)
    e = complex_gaussian(sample_rng(seed, sample.id, "csi-error"), sample.h.shape)
    e_norm = np.linalg.norm(e, axis=1, keepdims=True)
    h_norm = np.linalg.norm(sample.h, axis=1, keepdims=True)
    e = e / np.where(e_norm > 0, e_norm, 1.0) * h_norm * math.sqrt(ratio)
    return CsiSample(sample.id, sample.h + e, sample.noise_power.copy(), sample.p_max)


def split_counts(n: int, ratio=DEFAULT_SPLIT) -> tuple[int, int, int]:
    """Train/val/test sizes; rounding slack goes to the training split."""
    ratio = tuple(float(r) for r in ratio)
    if len(ratio) != 3 or min(ratio) < 0 or abs(sum(ratio) - 1.0) > 1e-9:
        raise ConfigurationError(f"split ratio must be three non-negative parts summing to 1, got {ratio}")
    val = int(math.floor(n * ratio[1]))
    test = int(math.floor(n * ratio[2]))
    return n - val - test, val, test


def split_samples(samples, counts) -> dict[str, list]:
    """Contiguous split in record order: train, then val, then test."""
    n_train, n_val, n_test = counts
    if n_train + n_val + n_test != len(samples):
        raise ConfigurationError("split counts do not add up to the sample count")
    return {"train": list(samples[:n_train]),
            "val": list(samples[n_train:n_train + n_val]),
            "test": list(samples[n_train + n_val:])}
