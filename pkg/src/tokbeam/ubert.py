"""Unified multi-task encoder over element-wise antenna tokens.

Every channel coefficient h_i[j] becomes its own 2-vector token, so the
parameter shapes depend on neither K nor N_T. An antenna encoding block
(additive attention within each user) pools antenna tokens into user
tokens, a trainable task token is appended, the sequence passes through
the encoder blocks, and the output layer maps every antenna token back to
one complex beamforming coefficient.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .channel import TASK_ORDER, CsiSample, Utility
from .errors import ConfigurationError, DimensionError
from .nn.beam import Batch, gpa, make_batch, to_complex
from .nn.core import TransformerEncoderBlock, assert_finite, softmax, xavier_uniform_

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class UbertConfig:
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    ffn_dim: int | None = None
    tasks: tuple = tuple(u.value for u in TASK_ORDER)
    max_positions: int = 64  # soft cap: larger N_T works but logs a warning
    use_positional: bool = True
    use_task_embedding: bool = True
    # off by default; adds T_pos back onto the attention output so each
    # antenna token keeps its own channel coefficient
    aeb_residual: bool = False

    def __post_init__(self):
        if min(self.embed_dim, self.depth, self.heads) < 1:
            raise ConfigurationError("UBERT dims must all be >= 1")
        if self.embed_dim % self.heads:
            raise ConfigurationError("embed_dim must be divisible by heads")
        object.__setattr__(self, "tasks", tuple(Utility(t).value for t in self.tasks))

    def to_dict(self):
        d = asdict(self)
        d["tasks"] = list(self.tasks)
        return d


def tokenize_elementwise(sample: CsiSample) -> np.ndarray:
    """K x N_T x 2 antenna tokens, ``[Re(h_i[j]), Im(h_i[j])]``."""
    return np.stack([sample.h.real, sample.h.imag], axis=-1)


def cosine_positional(n_antennas: int, embed_dim: int) -> np.ndarray:
    """Positional table with 1-based indices.

    Entry (i, j) is cos(i / 10000^(2j/F)) for even j and sin(...) for odd
    j, where i = 1..N_T and j = 1..F.
    """
    if n_antennas < 1 or embed_dim < 1:
        raise ConfigurationError("positional table needs N_T, F >= 1")
    i = np.arange(1, n_antennas + 1, dtype=np.float64)[:, None]
    j = np.arange(1, embed_dim + 1, dtype=np.float64)[None, :]
    angle = i / 10000.0 ** (2.0 * j / embed_dim)
    return np.where(j % 2 == 0, np.cos(angle), np.sin(angle))


class UbertBeamformer(nn.Module):
    kind = "ubert"

    def __init__(self, config: UbertConfig = UbertConfig(), generator=None, dtype=torch.float32):
        super().__init__()
        self.config = config
        f = config.embed_dim
        kw = dict(dtype=dtype)
        self.w_embedding = nn.Parameter(xavier_uniform_(torch.empty(2, f, **kw), 2, f, generator))
        self.w_s = nn.Parameter(xavier_uniform_(torch.empty(f, f, **kw), f, f, generator))
        self.w_t = nn.Parameter(xavier_uniform_(torch.empty(f, f, **kw), f, f, generator))
        self.a = nn.Parameter(xavier_uniform_(torch.empty(f, **kw), f, 1, generator))
        self.w_ext = nn.Parameter(xavier_uniform_(torch.empty(f, f, **kw), f, f, generator))
        self.task_table = nn.Parameter(
            xavier_uniform_(torch.empty(len(config.tasks), f, **kw), 1, f, generator))
        self.blocks = nn.ModuleList(
            TransformerEncoderBlock(f, config.heads, config.ffn_dim, generator, dtype)
            for _ in range(config.depth))
        self.w_urel = nn.Parameter(xavier_uniform_(torch.empty(f, **kw), f, 1, generator))
        self.w_uimg = nn.Parameter(xavier_uniform_(torch.empty(f, **kw), f, 1, generator))
        self._pos_cache = {}

    def positional(self, n_antennas):
        dtype = self.w_embedding.dtype
        if not self.config.use_positional:
            return torch.zeros(n_antennas, self.config.embed_dim, dtype=dtype)
        key = (n_antennas, dtype)
        if key not in self._pos_cache:
            if n_antennas > self.config.max_positions:
                log.warning("N_T=%d exceeds the positional soft cap %d", n_antennas,
                            self.config.max_positions)
            self._pos_cache[key] = torch.as_tensor(
                cosine_positional(n_antennas, self.config.embed_dim), dtype=dtype)
        return self._pos_cache[key]

    def aeb(self, t_a):
        """Antenna encoding block: (..., K, N, 2) -> (T_ant (..., K, N, F), T_user (..., K, F))."""
        if t_a.shape[-1] != 2:
            raise DimensionError("antenna tokens must have 2 components")
        t_pos = t_a @ self.w_embedding + self.positional(t_a.shape[-2])
        src = t_pos @ (self.w_s.T @ self.a)  # a^T W_s T_pos[k, i]
        dst = t_pos @ (self.w_t.T @ self.a)
        att = torch.relu(src.unsqueeze(-1) + dst.unsqueeze(-2))  # (..., K, N, N)
        t_ant = softmax(att, dim=-1) @ t_pos
        if self.config.aeb_residual:
            t_ant = t_ant + t_pos
        t_user = t_ant.sum(dim=-2) @ self.w_ext.T
        return t_ant, t_user

    def task_token(self, task_ids, batch_size):
        f = self.config.embed_dim
        if not self.config.use_task_embedding:
            return torch.zeros(batch_size, 1, f, dtype=self.w_embedding.dtype)
        if task_ids is None:
            raise ConfigurationError("UBERT needs a task id per sample")
        task_ids = torch.as_tensor(task_ids, dtype=torch.long)
        if task_ids.numel() and (task_ids.min() < 0 or task_ids.max() >= len(self.config.tasks)):
            raise ConfigurationError(f"unknown task id in {task_ids.tolist()}")
        return self.task_table[task_ids].unsqueeze(-2)

    def raw(self, batch: Batch, task_ids=None):
        """Output layer before the power adapter, as a (real, imag) pair."""
        if task_ids is None:
            task_ids = batch.task_ids
        dtype = self.w_embedding.dtype
        t_a = torch.stack([batch.h_re, batch.h_im], dim=-1).to(dtype)
        t_ant, t_user = self.aeb(t_a)
        k = t_user.shape[-2]
        x = torch.cat([t_user, self.task_token(task_ids, len(batch))], dim=-2)
        for block in self.blocks:
            x = block(x)
        assert_finite(x, "UBERT encoder")
        t_task = x[..., :k, :] + x[..., k:, :]
        t_ant_hat = t_ant + t_task.unsqueeze(-2)
        return t_ant_hat @ self.w_urel, t_ant_hat @ self.w_uimg

    def forward(self, batch: Batch, task_ids=None):
        """GPA applied once to the assembled K x N_T matrix."""
        return gpa(*self.raw(batch, task_ids), batch.p_max.to(self.w_embedding.dtype))


def task_index(model: UbertBeamformer, utility) -> int:
    name = Utility(utility).value
    if name not in model.config.tasks:
        raise ConfigurationError(f"model has no task {name}; known: {model.config.tasks}")
    return model.config.tasks.index(name)


def ubert_forward(sample: CsiSample, utility, model: UbertBeamformer) -> np.ndarray:
    batch = make_batch([sample], dtype=model.w_embedding.dtype)
    with torch.no_grad():
        w_re, w_im = model(batch, torch.tensor([task_index(model, utility)]))
    return to_complex(w_re, w_im)[0]


def _with_config(model: UbertBeamformer, **changes) -> UbertBeamformer:
    new = copy.deepcopy(model)
    new.config = UbertConfig(**{**model.config.to_dict(), **changes})
    new._pos_cache = {}
    return new


def disable_positional(model: UbertBeamformer) -> UbertBeamformer:
    """Copy with the positional table replaced by zeros."""
    return _with_config(model, use_positional=False)


def disable_task_embedding(model: UbertBeamformer) -> UbertBeamformer:
    """Copy whose task token is a fixed zero vector."""
    return _with_config(model, use_task_embedding=False)


def pos_table_distance(n_antennas, embed_dim) -> float:
    """Smallest pairwise distance between positional rows (aliasing check)."""
    p = cosine_positional(n_antennas, embed_dim)
    d = np.linalg.norm(p[:, None, :] - p[None, :, :], axis=-1)
    d[np.diag_indices(n_antennas)] = math.inf
    return float(d.min())
