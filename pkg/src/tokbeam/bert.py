"""Single-task encoder: one token per user, output is a feasible beamformer.

Token i is ``[Re(h_i), Im(h_i)]`` (all real parts, then all imaginary
parts). The token width depends on N_T but not on K, so one parameter set
serves any number of users.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .channel import CsiSample
from .errors import ConfigurationError, DimensionError
from .nn.beam import Batch, gpa, make_batch, to_complex
from .nn.core import TransformerEncoderBlock, assert_finite, elu, layer_norm, xavier_uniform_


@dataclass(frozen=True)
class BertConfig:
    n_antennas: int
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    ffn_dim: int | None = None  # defaults to 4 * embed_dim
    literal_gpa: bool = False

    def __post_init__(self):
        if min(self.n_antennas, self.embed_dim, self.depth, self.heads) < 1:
            raise ConfigurationError("BERT dims must all be >= 1")
        if self.embed_dim % self.heads:
            raise ConfigurationError("embed_dim must be divisible by heads")

    def to_dict(self):
        return asdict(self)


def tokenize_csi(sample: CsiSample) -> np.ndarray:
    """K x 2N_T token matrix."""
    return np.concatenate([sample.h.real, sample.h.imag], axis=1)


def detokenize_csi(tokens: np.ndarray) -> np.ndarray:
    n = tokens.shape[-1] // 2
    return tokens[..., :n] + 1j * tokens[..., n:]


def tokens_t(batch: Batch) -> torch.Tensor:
    return torch.cat([batch.h_re, batch.h_im], dim=-1)


class BertBeamformer(nn.Module):
    def __init__(self, config: BertConfig, generator=None, dtype=torch.float32):
        super().__init__()
        self.config = config
        f, n = config.embed_dim, config.n_antennas
        kw = dict(dtype=dtype)
        # embedding FC carries no bias
        self.w_fc = nn.Parameter(xavier_uniform_(torch.empty(2 * n, f, **kw), 2 * n, f, generator))
        self.emb_gamma = nn.Parameter(torch.ones(f, **kw))
        self.emb_beta = nn.Parameter(torch.zeros(f, **kw))
        self.blocks = nn.ModuleList(
            TransformerEncoderBlock(f, config.heads, config.ffn_dim, generator, dtype)
            for _ in range(config.depth))
        self.w_real = nn.Parameter(xavier_uniform_(torch.empty(f, n, **kw), f, n, generator))
        self.w_imag = nn.Parameter(xavier_uniform_(torch.empty(f, n, **kw), f, n, generator))

    kind = "bert"

    def embedding_parameters(self):
        return [self.w_fc, self.emb_gamma, self.emb_beta]

    def output_parameters(self):
        return [self.w_real, self.w_imag]

    def embed(self, tokens):
        if tokens.shape[-1] != self.w_fc.shape[0]:
            raise DimensionError(
                f"token width {tokens.shape[-1]} != 2*N_T = {self.w_fc.shape[0]}; "
                "fine-tune with re-initialised embedding/output layers")
        return elu(layer_norm(tokens @ self.w_fc, self.emb_gamma, self.emb_beta))

    def encode(self, tokens):
        x = self.embed(tokens)
        for block in self.blocks:
            x = block(x)
        return assert_finite(x, "BERT encoder")

    def raw(self, batch: Batch, task_ids=None):
        """Output layer before the power adapter, as a (real, imag) pair."""
        t_sec = self.encode(tokens_t(batch).to(self.w_fc.dtype))
        return t_sec @ self.w_real, t_sec @ self.w_imag

    def forward(self, batch: Batch, task_ids=None):
        """Returns the GPA-projected beamformer as a (real, imag) pair."""
        return gpa(*self.raw(batch), batch.p_max.to(self.w_fc.dtype),
                   literal=self.config.literal_gpa)


def bert_forward(sample: CsiSample, model: BertBeamformer) -> np.ndarray:
    if sample.n_antennas != model.config.n_antennas:
        raise DimensionError(
            f"model expects N_T={model.config.n_antennas}, sample has {sample.n_antennas}")
    dtype = model.w_fc.dtype
    with torch.no_grad():
        w_re, w_im = model(make_batch([sample], dtype=dtype))
    return to_complex(w_re, w_im)[0]


def reconfigure_antennas(model: BertBeamformer, n_antennas: int, generator=None) -> BertBeamformer:
    """Copy of ``model`` for a new N_T: encoder blocks kept, embedding and output re-initialised."""
    cfg = BertConfig(**{**model.config.to_dict(), "n_antennas": n_antennas})
    new = BertBeamformer(cfg, generator=generator, dtype=model.w_fc.dtype)
    new.blocks = copy.deepcopy(model.blocks)
    return new
