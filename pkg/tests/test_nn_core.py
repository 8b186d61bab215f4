import math
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from tokbeam.errors import ConfigurationError, DimensionError, NonFiniteError
from tokbeam.nn import core
from tokbeam.nn.core import (TransformerEncoderBlock, assert_finite, elu, gelu, grad_check,
                             layer_norm, mha, scaled_dot_attention, softmax, teb_forward)

D = torch.float64


def _rand(*shape, seed=0, scale=1.0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=D) * scale


def _block(f=8, c=2, seed=0):
    return TransformerEncoderBlock(f, c, generator=torch.Generator().manual_seed(seed), dtype=D)


def test_layer_norm_examples():
    one, zero = torch.ones(2, dtype=D), torch.zeros(2, dtype=D)
    out = layer_norm(torch.tensor([1.0, -1.0], dtype=D), one, zero)
    assert torch.allclose(out, torch.tensor([1, -1], dtype=D) / math.sqrt(1 + 1e-5), atol=1e-15)
    beta = torch.tensor([0.3, -0.2], dtype=D)
    assert torch.allclose(layer_norm(torch.full((2,), 7.0, dtype=D), one, beta), beta)


def test_activation_values():
    assert elu(torch.tensor(0.0, dtype=D)) == 0 and gelu(torch.tensor(0.0, dtype=D)) == 0
    assert float(elu(torch.tensor(-1.0, dtype=D))) == pytest.approx(math.exp(-1) - 1, abs=1e-12)
    assert float(gelu(torch.tensor(1.0, dtype=D))) == pytest.approx(0.841192, abs=1e-6)
    assert softmax(torch.zeros(2, dtype=D)).tolist() == [0.5, 0.5]


def test_softmax_rows_and_range():
    x = _rand(50, 7, scale=30.0)
    p = softmax(x)
    assert torch.allclose(p.sum(-1), torch.ones(50, dtype=D), atol=1e-12)
    assert (p >= 0).all() and (p <= 1).all()


def test_no_nonfinite_for_bounded_inputs():
    x = _rand(4, 8, scale=1e3)
    blk = _block()
    for out in (elu(x), gelu(x), softmax(x), teb_forward(x, blk)):
        assert torch.isfinite(out).all()
    with pytest.raises(NonFiniteError):
        assert_finite(torch.tensor([math.nan]), "probe")


def test_attention_uniform_and_limit():
    v = _rand(3, 4)
    k = torch.ones(3, 2, dtype=D)
    out = scaled_dot_attention(_rand(5, 2), k, v)
    assert torch.allclose(out, v.mean(0).expand(5, 4), atol=1e-12)
    q = torch.tensor([[1.0, 0.0]], dtype=D) * 1e3
    keys = torch.tensor([[1.0, 0.0], [0.0, 0.0]], dtype=D)
    assert torch.allclose(scaled_dot_attention(q, keys, v[:2]), v[:1], atol=1e-12)


def test_attention_against_direct_evaluation():
    q = torch.tensor([[1.0, 2.0], [0.5, -1.0]], dtype=D)
    k = torch.tensor([[0.3, 0.1], [-0.2, 0.7]], dtype=D)
    v = torch.tensor([[1.0, 0.0], [0.0, 2.0]], dtype=D)
    expected = np.zeros((2, 2))
    for i in range(2):
        logits = [sum(q[i, c].item() * k[j, c].item() for c in range(2)) / math.sqrt(2) for j in range(2)]
        e = [math.exp(t) for t in logits]
        for j in range(2):
            expected[i] += e[j] / sum(e) * v[j].numpy()
    assert np.allclose(scaled_dot_attention(q, k, v).numpy(), expected, atol=1e-14)
    with pytest.raises(DimensionError):
        scaled_dot_attention(q, k[:, :1], v)


def test_mha_single_head_reduces_to_attention():
    blk = _block(f=4, c=1)
    x = _rand(3, 4)
    ref = scaled_dot_attention(x @ blk.w_q[0], x @ blk.w_k[0], x @ blk.w_v[0]) @ blk.w_o
    assert torch.allclose(mha(x, blk.w_q, blk.w_k, blk.w_v, blk.w_o), ref, atol=1e-14)


def test_mha_concat_order():
    blk = _block(f=8, c=2)
    x = _rand(3, 8)
    heads = [scaled_dot_attention(x @ blk.w_q[c], x @ blk.w_k[c], x @ blk.w_v[c]) for c in range(2)]
    ref = torch.cat(heads, dim=-1) @ blk.w_o
    assert torch.allclose(mha(x, blk.w_q, blk.w_k, blk.w_v, blk.w_o), ref, atol=1e-14)


def test_teb_residual_only_path():
    blk = _block()
    with torch.no_grad():
        for name in ("w_q", "w_k", "w_v", "w_o", "w_ffn", "w_ffn_out"):
            getattr(blk, name).zero_()
    x = _rand(4, 8)
    one, zero = torch.ones(8, dtype=D), torch.zeros(8, dtype=D)
    ref = layer_norm(layer_norm(x, one, zero), one, zero)
    assert torch.allclose(teb_forward(x, blk), ref, atol=1e-14)


@pytest.mark.parametrize("fn", ["mha", "teb"])
def test_row_permutation_equivariance(fn):
    blk = _block()
    x = _rand(5, 8)
    perm = torch.randperm(5, generator=torch.Generator().manual_seed(1))
    f = (lambda t: mha(t, blk.w_q, blk.w_k, blk.w_v, blk.w_o)) if fn == "mha" else blk
    assert (f(x[perm]) - f(x)[perm]).abs().max() <= 1e-9


def test_block_validation():
    with pytest.raises(ConfigurationError):
        TransformerEncoderBlock(6, 4)
    with pytest.raises(DimensionError):
        _block()(torch.zeros(2, 4, dtype=D))


def test_grad_check_identity_is_exact():
    # central differences of a linear map are exact up to rounding of x +- eps
    assert grad_check(lambda x: x, [_rand(4)]) <= 1e-9


def test_grad_checks_primitives():
    x = _rand(3, 8)
    gamma, beta = _rand(8, seed=1), _rand(8, seed=2)
    # offset keeps ELU probes away from its kink at 0
    x_off = x + torch.sign(x) * 0.05
    assert grad_check(layer_norm, [x, gamma, beta]) <= 1e-6
    assert grad_check(elu, [x_off]) <= 1e-4
    assert grad_check(gelu, [x]) <= 1e-4
    assert grad_check(softmax, [x]) <= 1e-4
    assert grad_check(scaled_dot_attention, [x[:, :4], _rand(3, 4, seed=3), _rand(3, 4, seed=4)]) <= 1e-4


def test_grad_check_mha_and_teb():
    blk = _block()
    x = _rand(3, 8)
    assert grad_check(mha, [x, blk.w_q, blk.w_k, blk.w_v, blk.w_o]) <= 1e-5
    names = [n for n, _ in blk.named_parameters()]

    def teb(x, *params):
        p = SimpleNamespace(embed_dim=8, **dict(zip(names, params)))
        return core.teb_forward(x, p)

    assert grad_check(teb, [x] + [p.detach() for p in blk.parameters()]) <= 1e-4


def test_xavier_bounds():
    t = core.xavier_uniform_(torch.empty(100, 50, dtype=D), 100, 50, torch.Generator().manual_seed(0))
    assert t.abs().max() <= math.sqrt(6 / 150)
