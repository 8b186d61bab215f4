from .core import (TransformerEncoderBlock, assert_finite, elu, gelu, grad_check, layer_norm, mha,
                   scaled_dot_attention, softmax, teb_forward)

__all__ = ["TransformerEncoderBlock", "assert_finite", "elu", "gelu", "grad_check", "layer_norm",
           "mha", "scaled_dot_attention", "softmax", "teb_forward"]
