"""Torch-side beamforming helpers: batching, power adapter, differentiable rates.

Complex matrices travel as (real, imag) pairs of real tensors so every
operation stays on the ordinary real autograd path.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from ..channel import TASK_ORDER, Utility
from ..errors import DimensionError


@dataclass
class Batch:
    h_re: torch.Tensor  # (B, K, N)
    h_im: torch.Tensor
    noise: torch.Tensor  # (B, K)
    p_max: torch.Tensor  # (B,)
    task_ids: torch.Tensor | None = None  # (B,) index into TASK_ORDER
    labels: dict = field(default_factory=dict)  # utility name -> (re, im)

    def __len__(self):
        return self.h_re.shape[0]

    @property
    def shape(self):
        return tuple(self.h_re.shape[1:])

    def label(self, utility):
        return self.labels[Utility(utility).value]


def make_batch(samples, tasks=None, dtype=torch.float64) -> Batch:
    """Stack samples that share (K, N_T). ``tasks`` gives one utility per sample."""
    if not samples:
        raise DimensionError("cannot batch zero samples")
    shape = samples[0].h.shape
    if any(s.h.shape != shape for s in samples):
        raise DimensionError("all samples in a batch must share K and N_T")
    h = np.stack([s.h for s in samples])
    t = lambda a: torch.as_tensor(np.ascontiguousarray(a), dtype=dtype)
    labels = {}
    for util in TASK_ORDER:
        if all(util.value in s.labels for s in samples):
            w = np.stack([s.labels[util.value] for s in samples])
            labels[util.value] = (t(w.real), t(w.imag))
    task_ids = None
    if tasks is not None:
        task_ids = torch.tensor([Utility(u).index for u in tasks], dtype=torch.long)
    return Batch(t(h.real), t(h.imag), t(np.stack([s.noise_power for s in samples])),
                 t(np.array([s.p_max for s in samples])), task_ids, labels)


def gpa(w_re, w_im, p_max, literal=False):
    """Generalizable power adapter on a (..., K, N) complex pair.

    Inside the unit Frobenius ball the matrix is scaled by sqrt(p_max);
    outside it is normalised to power exactly p_max. ``literal=True``
    applies sqrt(p_max / ||W||_F) instead, which overshoots the budget when
    ||W||_F > 1 and exists only for comparison runs.
    """
    p_max = torch.as_tensor(p_max, dtype=w_re.dtype)
    while p_max.dim() < w_re.dim():
        p_max = p_max.unsqueeze(-1)
    norm2 = (w_re ** 2 + w_im ** 2).sum(dim=(-2, -1), keepdim=True)
    inside = norm2 <= 1.0
    safe = torch.where(inside, torch.ones_like(norm2), norm2)
    if literal:
        outside = torch.sqrt(p_max / torch.sqrt(safe))
    else:
        outside = torch.sqrt(p_max / safe)
    scale = torch.where(inside, torch.sqrt(p_max).expand_as(norm2), outside)
    return w_re * scale, w_im * scale


def power_t(w_re, w_im):
    return (w_re ** 2 + w_im ** 2).sum(dim=(-2, -1))


def rates_t(batch: Batch, w_re, w_im):
    """Per-user rates (B, K) in bits/s/Hz; row convention as the numpy side."""
    if w_re.shape != batch.h_re.shape:
        raise DimensionError(f"beamformer {tuple(w_re.shape)} vs channel {tuple(batch.h_re.shape)}")
    hr, hi = batch.h_re, batch.h_im
    # g[b, k, i] = h_k^H w_i
    g_re = hr @ w_re.transpose(-1, -2) + hi @ w_im.transpose(-1, -2)
    g_im = hr @ w_im.transpose(-1, -2) - hi @ w_re.transpose(-1, -2)
    g2 = g_re ** 2 + g_im ** 2
    signal = torch.diagonal(g2, dim1=-2, dim2=-1)
    interference = g2.sum(dim=-1) - signal + batch.noise
    return torch.log2(1.0 + signal / interference)


def utility_t(utility, batch: Batch, w_re, w_im, circuit_power=0.5):
    """Per-sample utility (B,)."""
    utility = Utility(utility)
    r = rates_t(batch, w_re, w_im)
    if utility is Utility.SR:
        return r.sum(dim=-1)
    if utility is Utility.MR:
        return r.min(dim=-1).values
    return r.sum(dim=-1) / (power_t(w_re, w_im) + circuit_power)


def to_complex(w_re, w_im) -> np.ndarray:
    return w_re.detach().cpu().numpy() + 1j * w_im.detach().cpu().numpy()

