"""Differentiable building blocks shared by the BERT and UBERT models.

Everything here operates on torch tensors along the last (feature)
dimension and broadcasts over any leading batch dimensions.
"""
from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from ..errors import ConfigurationError, DimensionError, NonFiniteError

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


def assert_finite(x: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"non-finite values after {where}")
    return x


def layer_norm(x, gamma, beta, eps=LN_EPS):
    """(x - mean) / sqrt(var + eps) * gamma + beta, population variance."""
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * gamma + beta


def elu(x, alpha=1.0):
    # clamp keeps expm1 away from overflow on the unused branch
    return torch.where(x > 0, x, alpha * torch.expm1(torch.clamp(x, max=0.0)))


def gelu(x):
    """GELU, tanh approximation."""
    return 0.5 * x * (1.0 + torch.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def softmax(x, dim=-1):
    z = x - x.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(z)
    return e / e.sum(dim=dim, keepdim=True)


def scaled_dot_attention(q, k, v, d=None):
    """Softmax(Q K^T / sqrt(d)) V with the softmax taken per query row."""
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError("keys and values must have the same number of rows")
    d = q.shape[-1] if d is None else d
    scores = q @ k.transpose(-1, -2) / math.sqrt(d)
    return softmax(scores, dim=-1) @ v


def mha(x, w_q, w_k, w_v, w_o):
    """Bidirectional multi-head attention.

    ``w_q``, ``w_k``, ``w_v`` have shape (C, F, d): one F x d projection per
    head. Heads are concatenated in order and mixed by ``w_o`` (F x F).
    """
    xh = x.unsqueeze(-3)  # (..., 1, rows, F)
    q, k, v = xh @ w_q, xh @ w_k, xh @ w_v  # (..., C, rows, d)
    o = scaled_dot_attention(q, k, v, w_q.shape[-1])
    o = o.transpose(-3, -2).reshape(*x.shape[:-1], -1)  # Concat(O^(1), ..., O^(C))
    return o @ w_o


def xavier_uniform_(t: torch.Tensor, fan_in: int, fan_out: int, generator=None):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        t.uniform_(-bound, bound, generator=generator)
    return t


class TransformerEncoderBlock(nn.Module):
    """Parameters of one TEB (MHA + position-wise FFN, post-LN residuals)."""

    def __init__(self, embed_dim: int, heads: int, ffn_dim: int | None = None,
                 generator=None, dtype=torch.float32):
        super().__init__()
        if embed_dim < 1 or heads < 1 or embed_dim % heads:
            raise ConfigurationError(f"embed dim {embed_dim} is not divisible by {heads} heads")
        ffn_dim = 4 * embed_dim if ffn_dim is None else ffn_dim
        if ffn_dim < 1:
            raise ConfigurationError("FFN width must be >= 1")
        f, c, d = embed_dim, heads, embed_dim // heads
        kw = dict(dtype=dtype)
        self.w_q = nn.Parameter(xavier_uniform_(torch.empty(c, f, d, **kw), f, d, generator))
        self.w_k = nn.Parameter(xavier_uniform_(torch.empty(c, f, d, **kw), f, d, generator))
        self.w_v = nn.Parameter(xavier_uniform_(torch.empty(c, f, d, **kw), f, d, generator))
        self.w_o = nn.Parameter(xavier_uniform_(torch.empty(f, f, **kw), f, f, generator))
        self.ln1_gamma = nn.Parameter(torch.ones(f, **kw))
        self.ln1_beta = nn.Parameter(torch.zeros(f, **kw))
        self.w_ffn = nn.Parameter(xavier_uniform_(torch.empty(f, ffn_dim, **kw), f, ffn_dim, generator))
        self.b_ffn = nn.Parameter(torch.zeros(ffn_dim, **kw))
        self.w_ffn_out = nn.Parameter(xavier_uniform_(torch.empty(ffn_dim, f, **kw), ffn_dim, f, generator))
        self.b_ffn_out = nn.Parameter(torch.zeros(f, **kw))
        self.ln2_gamma = nn.Parameter(torch.ones(f, **kw))
        self.ln2_beta = nn.Parameter(torch.zeros(f, **kw))

    @property
    def embed_dim(self):
        return self.w_o.shape[0]

    def forward(self, x):
        return teb_forward(x, self)


def ffn(x, p: TransformerEncoderBlock):
    return gelu(x @ p.w_ffn + p.b_ffn) @ p.w_ffn_out + p.b_ffn_out


def teb_forward(x, p: TransformerEncoderBlock):
    if x.shape[-1] != p.embed_dim:
        raise DimensionError(f"TEB expects width {p.embed_dim}, got {x.shape[-1]}")
    t_fir = layer_norm(x + mha(x, p.w_q, p.w_k, p.w_v, p.w_o), p.ln1_gamma, p.ln1_beta)
    return layer_norm(t_fir + ffn(t_fir, p), p.ln2_gamma, p.ln2_beta)


def grad_check(op, inputs, eps=1e-5, seed=0):
    """Worst-coordinate relative error between autograd and central differences.

    ``op`` maps the float64 tensors in ``inputs`` to a tensor; non-scalar
    outputs are reduced with a fixed random projection. The relative error
    of coordinate i is ``|a_i - n_i| / max(|a_i|, |n_i|, 1e-3 * max|n|)``;
    the floor keeps coordinates whose true derivative is ~0 from dividing
    rounding noise by rounding noise.
    """
    inputs = [x.detach().clone().to(torch.float64).requires_grad_(True) for x in inputs]
    out = op(*inputs)
    gen = torch.Generator().manual_seed(seed)
    proj = torch.randn(out.shape, generator=gen, dtype=torch.float64)

    def scalar(*xs):
        return (op(*xs) * proj).sum()

    analytic = torch.autograd.grad(scalar(*inputs), inputs, allow_unused=True)
    analytic = [torch.zeros_like(x) if g is None else g for x, g in zip(inputs, analytic)]
    numeric = []
    with torch.no_grad():
        for x in inputs:
            g = torch.zeros_like(x)
            flat, gflat = x.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = scalar(*inputs).item()
                flat[i] = orig - eps
                fm = scalar(*inputs).item()
                flat[i] = orig
                gflat[i] = (fp - fm) / (2 * eps)
            numeric.append(g)
    a = torch.cat([g.reshape(-1) for g in analytic])
    n = torch.cat([g.reshape(-1) for g in numeric])
    if a.numel() == 0:
        return 0.0
    floor = max(1e-3 * n.abs().max().item(), 1e-12)
    denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, floor))
    return float(((a - n).abs() / denom).max())


def to_numpy(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy()
