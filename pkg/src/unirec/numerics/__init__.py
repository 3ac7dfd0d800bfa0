"""Dense float64 tensors with reverse-mode gradients, attention and Adam."""

from .functional import (
    AttentionParams,
    PoolingParams,
    attention_pool,
    dropout,
    layer_norm,
    logsumexp,
    multi_head_self_attention,
    softmax,
)
from .gradcheck import finite_difference_check
from .optim import AdamState, adam_step
from .tensor import (
    Tensor,
    as_tensor,
    concat,
    dot,
    is_grad_enabled,
    matmul,
    no_grad,
    stack,
    take,
    take_along_last,
    where,
)

__all__ = [
    "AdamState",
    "AttentionParams",
    "PoolingParams",
    "Tensor",
    "adam_step",
    "as_tensor",
    "attention_pool",
    "concat",
    "dot",
    "dropout",
    "finite_difference_check",
    "is_grad_enabled",
    "layer_norm",
    "logsumexp",
    "matmul",
    "multi_head_self_attention",
    "no_grad",
    "softmax",
    "stack",
    "take",
    "take_along_last",
    "where",
]
