"""Candidate layer operations: the five original ENAS kinds and the poison kinds."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from ssplab.autodiff import Tensor, parameter
from ssplab.autodiff import functional as F


class OpKind(enum.Enum):
    IDENTITY = "identity"
    SEP_CONV_3X3 = "sep_conv_3x3"
    SEP_CONV_5X5 = "sep_conv_5x5"
    MAX_POOL_3X3 = "max_pool_3x3"
    AVG_POOL_3X3 = "avg_pool_3x3"
    TRANS_CONV_3X3 = "trans_conv_3x3"
    TRANS_CONV_5X5 = "trans_conv_5x5"
    DROPOUT = "dropout"


class Origin(enum.Enum):
    ORIGINAL = "original"
    POISON = "poison"


class Mode(enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


ORIGINAL_KINDS = (
    OpKind.IDENTITY,
    OpKind.SEP_CONV_3X3,
    OpKind.SEP_CONV_5X5,
    OpKind.MAX_POOL_3X3,
    OpKind.AVG_POOL_3X3,
)

KERNEL_SIZE = {
    OpKind.SEP_CONV_3X3: 3,
    OpKind.SEP_CONV_5X5: 5,
    OpKind.MAX_POOL_3X3: 3,
    OpKind.AVG_POOL_3X3: 3,
    OpKind.TRANS_CONV_3X3: 3,
    OpKind.TRANS_CONV_5X5: 5,
}
SEPARABLE = (OpKind.SEP_CONV_3X3, OpKind.SEP_CONV_5X5)
TRANSPOSED = (OpKind.TRANS_CONV_3X3, OpKind.TRANS_CONV_5X5)
POOLS = (OpKind.MAX_POOL_3X3, OpKind.AVG_POOL_3X3)
CONV_KINDS = SEPARABLE + TRANSPOSED


@dataclass(frozen=True)
class OperationSpec:
    kind: OpKind
    origin: Origin = Origin.ORIGINAL
    dropout_p: float | None = None

    def __post_init__(self):
        if (self.kind is OpKind.DROPOUT) != (self.dropout_p is not None):
            raise ValueError("dropout_p is required for, and only for, Dropout")
        if self.dropout_p is not None and not 0.0 <= self.dropout_p <= 1.0:
            raise ValueError(f"dropout_p must lie in [0, 1], got {self.dropout_p}")
        if self.origin is Origin.ORIGINAL and self.kind not in ORIGINAL_KINDS:
            raise ValueError(f"{self.kind.value} is not an original search-space operation")

    @property
    def name(self) -> str:
        if self.kind is OpKind.DROPOUT:
            return f"dropout_{self.dropout_p:g}"
        return self.kind.value


@dataclass
class LayerInstance:
    """A concrete layer: trainable ``params`` plus batch-norm running ``buffers``."""

    spec: OperationSpec
    in_channels: int
    out_channels: int
    stride: int = 1
    params: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    wrapped: bool = True

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def conv_weight_count(self) -> int:
        """Trainable convolution weights, excluding normalisation affine terms."""
        return sum(t.size for name, t in self.params.items() if not name.startswith("bn_"))


def he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def add_batch_norm(layer: LayerInstance, channels: int) -> None:
    layer.params["bn_gamma"] = parameter(np.ones(channels))
    layer.params["bn_beta"] = parameter(np.zeros(channels))
    layer.buffers["running_mean"] = np.zeros(channels, dtype=np.float32)
    layer.buffers["running_var"] = np.ones(channels, dtype=np.float32)


def apply_batch_norm(layer: LayerInstance, x: Tensor, mode: Mode) -> Tensor:
    return F.batch_norm(
        x,
        layer.params["bn_gamma"],
        layer.params["bn_beta"],
        layer.buffers["running_mean"],
        layer.buffers["running_var"],
        training=mode is Mode.TRAIN,
    )


def make_layer(
    spec: OperationSpec,
    in_ch: int,
    out_ch: int,
    stride: int,
    rng: np.random.Generator,
    wrapped: bool = True,
) -> LayerInstance:
    """Instantiate ``spec`` with freshly initialised parameters.

    Conv-bearing kinds are built as ReLU -> conv -> batch norm when ``wrapped``;
    pooling, dropout and identity carry no parameters. Transposed convolutions
    map ``in_ch`` to ``out_ch`` with "same" geometry and only support stride 1.
    """
    if in_ch <= 0 or out_ch <= 0:
        raise ValueError("channel counts must be positive")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    kind = spec.kind
    if kind in (OpKind.IDENTITY, OpKind.DROPOUT) + POOLS and (in_ch != out_ch):
        raise ValueError(f"{spec.name} cannot change channels ({in_ch} -> {out_ch})")
    if kind in (OpKind.IDENTITY, OpKind.DROPOUT) + TRANSPOSED and stride != 1:
        raise ValueError(f"{spec.name} supports stride 1 only")

    layer = LayerInstance(spec, in_ch, out_ch, stride, wrapped=wrapped)
    if kind in SEPARABLE:
        k = KERNEL_SIZE[kind]
        layer.params["depthwise"] = parameter(he_uniform(rng, (in_ch, 1, k, k), k * k))
        layer.params["pointwise"] = parameter(he_uniform(rng, (out_ch, in_ch, 1, 1), in_ch))
    elif kind in TRANSPOSED:
        k = KERNEL_SIZE[kind]
        layer.params["kernel"] = parameter(he_uniform(rng, (in_ch, out_ch, k, k), out_ch * k * k))
    if kind in CONV_KINDS and wrapped:
        add_batch_norm(layer, out_ch)
    return layer


def forward_layer(
    layer: LayerInstance,
    x: Tensor,
    mode: Mode,
    rng: np.random.Generator | None = None,
) -> Tensor:
    if x.ndim != 4 or x.shape[1] != layer.in_channels:
        raise ValueError(f"{layer.spec.name}: expected {layer.in_channels} channels, got shape {x.shape}")
    kind = layer.spec.kind
    k = KERNEL_SIZE.get(kind, 1)
    pad = k // 2
    if min(x.shape[2], x.shape[3]) + 2 * pad < k:
        raise ValueError(f"{layer.spec.name}: padded spatial dims {x.shape[2:]} smaller than kernel {k}")
    if layer.stride == 2 and (x.shape[2] < 2 or x.shape[3] < 2):
        raise ValueError("striding would leave an empty spatial map")

    if kind is OpKind.IDENTITY:
        return x
    if kind is OpKind.DROPOUT:
        return F.dropout(x, layer.spec.dropout_p, training=mode is Mode.TRAIN, rng=rng)
    if kind is OpKind.MAX_POOL_3X3:
        return F.max_pool2d(x, k, layer.stride, pad)
    if kind is OpKind.AVG_POOL_3X3:
        return F.avg_pool2d(x, k, layer.stride, pad)

    h = x.relu() if layer.wrapped else x
    if kind in SEPARABLE:
        h = F.separable_conv2d(h, layer.params["depthwise"], layer.params["pointwise"], layer.stride, pad)
    else:
        h = F.conv_transpose2d(h, layer.params["kernel"], 1, pad)
    if layer.wrapped:
        h = apply_batch_norm(layer, h, mode)
    return h


def transposed_shape_inverse_check(k: int, stride: int, pad: int, h_in: int) -> tuple[int, int, int]:
    """Return ``(h_conv, h_back, output_pad)`` for a conv and its shape-restoring transpose."""
    if k < 1 or stride < 1 or pad < 0 or h_in + 2 * pad < k:
        raise ValueError("invalid convolution geometry")
    h_conv = (h_in + 2 * pad - k) // stride + 1
    for output_pad in range(stride):
        h_back = (h_conv - 1) * stride - 2 * pad + k + output_pad
        if h_back == h_in:
            return h_conv, h_back, output_pad
    raise ValueError(f"no output padding in [0, {stride - 1}] restores size {h_in}")
