"""Training objectives. All take (real, imag) beamformer pairs of shape (B, K, N)."""
from __future__ import annotations

import logging

import torch

from .channel import TASK_ORDER
from .errors import ConfigurationError
from .nn.beam import Batch, utility_t

log = logging.getLogger(__name__)

LOSS_MODES = ("normalized", "literal")


def matrix_cosine_gap(w_re, w_im, c_re, c_im):
    """1 - |<vec C, vec W>|^2 / (||C||^2 ||W||^2) per sample; 1 when either norm is 0."""
    inner_re = (c_re * w_re + c_im * w_im).sum(dim=(-2, -1))
    inner_im = (c_re * w_im - c_im * w_re).sum(dim=(-2, -1))
    den = (c_re ** 2 + c_im ** 2).sum(dim=(-2, -1)) * (w_re ** 2 + w_im ** 2).sum(dim=(-2, -1))
    zero = den == 0
    if zero.any():
        log.warning("zero-norm beamformer in cosine loss (%d samples)", int(zero.sum()))
    sim = (inner_re ** 2 + inner_im ** 2) / torch.where(zero, torch.ones_like(den), den)
    return torch.where(zero, torch.ones_like(den), 1.0 - sim)


def loss_pretrain(w, label, batch: Batch, utility, lambda1=1.0, lambda2=0.1, circuit_power=0.5):
    """lambda1 * cosine gap to the label - lambda2 * utility, batch mean."""
    gap = matrix_cosine_gap(*w, *label)
    u = utility_t(utility, batch, *w, circuit_power)
    return (lambda1 * gap - lambda2 * u).mean()


def loss_finetune(w, batch: Batch, utility, circuit_power=0.5):
    return -utility_t(utility, batch, *w, circuit_power).mean()


def _row_normalize(x):
    n = x.norm(dim=-1, keepdim=True)
    zero = n == 0
    if zero.any():
        log.debug("zero beamformer rows in normalized trace loss (%d rows)", int(zero.sum()))
    return torch.where(zero, torch.zeros_like(x), x / torch.where(zero, torch.ones_like(n), n))


def loss_task_trace(w, label, mode="normalized"):
    """Per-sample trace loss (B,).

    With X = [Re W, Im W] stacked per user (K x 2N), the loss is
    (1 / (K N)) * (1 - Trace(X_out X_cvx^T) / K). ``normalized`` scales each
    row of both matrices to unit norm first, so the trace is a sum of
    per-user cosines.
    """
    if mode not in LOSS_MODES:
        raise ConfigurationError(f"unknown trace-loss mode {mode!r}")
    x_out = torch.cat(w, dim=-1)
    x_cvx = torch.cat(label, dim=-1)
    if mode == "normalized":
        x_out, x_cvx = _row_normalize(x_out), _row_normalize(x_cvx)
    k, n = w[0].shape[-2], w[0].shape[-1]
    trace = (x_out * x_cvx).sum(dim=(-2, -1))
    return (1.0 - trace / k) / (k * n)


def loss_multitask(w, batch: Batch, mode="normalized", task_ids=None):
    """Sum over tasks of the mean trace loss within each task's sub-batch."""
    task_ids = batch.task_ids if task_ids is None else task_ids
    if task_ids is None:
        raise ConfigurationError("multi-task loss needs task ids")
    total = w[0].new_zeros(())
    for util in TASK_ORDER:
        mask = task_ids == util.index
        if not mask.any():
            continue
        if util.value not in batch.labels:
            raise ConfigurationError(f"batch has {util.value} samples but no {util.value} labels")
        lab = batch.labels[util.value]
        per = loss_task_trace((w[0][mask], w[1][mask]), (lab[0][mask], lab[1][mask]), mode)
        total = total + per.mean()
    return total


def loss_sumloss(w, batch: Batch, circuit_power=0.5):
    """-(EE + SR + MR) on the same output, batch mean."""
    return -sum(utility_t(u, batch, *w, circuit_power) for u in TASK_ORDER).mean()

