from ssplab.autodiff.tensor import (
    Tensor,
    backward,
    concat,
    default_dtype,
    get_default_dtype,
    grad_enabled,
    no_grad,
    parameter,
    set_default_dtype,
    stack,
    where,
    zero_grad,
)
from ssplab.autodiff import functional
from ssplab.autodiff.optim import (
    AdamConfig,
    AdamState,
    SgdConfig,
    adam_step,
    cosine_lr,
    global_norm,
    sgd_step,
)

__all__ = [
    "AdamConfig",
    "AdamState",
    "SgdConfig",
    "Tensor",
    "adam_step",
    "backward",
    "concat",
    "cosine_lr",
    "default_dtype",
    "functional",
    "get_default_dtype",
    "global_norm",
    "grad_enabled",
    "no_grad",
    "parameter",
    "set_default_dtype",
    "sgd_step",
    "stack",
    "where",
    "zero_grad",
]
