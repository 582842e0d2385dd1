"""Channel attention blocks.

The main block reweights feature-map channels by fusing two global signals:
the softmax-normalized per-channel average activation (which channels are
active) and a row-softmaxed channel relation matrix built from negated
channel dot products (which channels differ from the given one). A single
shared 1-wide convolution filter turns the fused feature into one attention
scalar per channel, applied residually.

A squeeze-excitation gate and reduced variants of the main block are
provided for comparison runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import (
    Tensor,
    as_tensor,
    concat,
    conv2d,
    global_avg_pool,
    matmul,
    relu,
    reshape,
    sigmoid,
    softmax,
    transpose,
)

CORRELATION_SIGNS = ("negative", "positive")
FUSION_MODES = ("concat", "elementwise_add")
ABLATION_VARIANTS = ("gap_only", "attn_only", "positive_corr", "full")


@dataclass
class ChanDivParams:
    """Trainable state of the channel diversification block.

    ``kernel`` is the single shared transform filter, shape (1, 1, 1, width)
    with width C+1 in concat mode and C in elementwise_add mode; ``bias`` is
    its scalar bias. Exactly one output filter is allowed.
    """

    kernel: Tensor
    bias: Tensor
    correlation_sign: str = "negative"
    fusion_mode: str = "concat"

    def __post_init__(self):
        if self.correlation_sign not in CORRELATION_SIGNS:
            raise ConfigError(
                f"correlation_sign must be one of {CORRELATION_SIGNS}, "
                f"got {self.correlation_sign!r}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(
                f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.kernel.ndim != 4 or self.kernel.shape[:3] != (1, 1, 1):
            raise ConfigError(
                f"transform kernel must have shape (1, 1, 1, width); "
                f"multiple output filters are rejected, got {self.kernel.shape}")
        if self.bias.size != 1:
            raise ConfigError(f"transform bias must be a scalar, got {self.bias.shape}")

    @property
    def param_count(self) -> int:
        """Trainable scalar count: kernel width + 1 (C + 2 in concat mode)."""
        return self.kernel.size + self.bias.size

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [("kernel", self.kernel), ("bias", self.bias)]


def chandiv_params(channels: int, rng: np.random.Generator | None = None,
                   correlation_sign: str = "negative", fusion_mode: str = "concat",
                   dtype=np.float64) -> ChanDivParams:
    """Create block parameters for a C-channel input.

    With ``rng`` the kernel is uniform in +/- 1/sqrt(width) (fan-in of the
    shared filter) and the bias zero, keeping the block near-identity at the
    start; without it both are zero, making the block an exact identity.
    """
    if channels < 1:
        raise ConfigError(f"channels must be >= 1, got {channels}")
    width = channels + 1 if fusion_mode == "concat" else channels
    if rng is None:
        kernel = np.zeros((1, 1, 1, width), dtype=dtype)
    else:
        bound = 1.0 / np.sqrt(width)
        kernel = rng.uniform(-bound, bound, size=(1, 1, 1, width)).astype(dtype)
    return ChanDivParams(
        kernel=Tensor(kernel, requires_grad=True),
        bias=Tensor(np.zeros(1, dtype=dtype), requires_grad=True),
        correlation_sign=correlation_sign,
        fusion_mode=fusion_mode,
    )


@dataclass
class SEParams:
    """Squeeze-excitation weights: two dense layers with reduction ``r``."""

    w1: Tensor  # (C/r, C)
    w2: Tensor  # (C, C/r)
    reduction: int

    def __post_init__(self):
        c = self.w1.shape[1]
        if c % self.reduction != 0:
            raise ConfigError(
                f"reduction {self.reduction} does not divide {c} channels")
        hidden = c // self.reduction
        if self.w1.shape != (hidden, c) or self.w2.shape != (c, hidden):
            raise ConfigError(
                f"SE weights must be ({hidden},{c}) and ({c},{hidden}), "
                f"got {self.w1.shape} and {self.w2.shape}")

    @property
    def param_count(self) -> int:
        return self.w1.size + self.w2.size

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [("w1", self.w1), ("w2", self.w2)]


def se_params(channels: int, reduction: int,
              rng: np.random.Generator | None = None,
              dtype=np.float64) -> SEParams:
    """Create SE weights; zero without an rng, fan-in uniform otherwise."""
    if channels % reduction != 0:
        raise ConfigError(f"reduction {reduction} does not divide {channels} channels")
    hidden = channels // reduction
    if rng is None:
        w1 = np.zeros((hidden, channels), dtype=dtype)
        w2 = np.zeros((channels, hidden), dtype=dtype)
    else:
        w1 = rng.uniform(-1, 1, (hidden, channels)).astype(dtype) / np.sqrt(channels)
        w2 = rng.uniform(-1, 1, (channels, hidden)).astype(dtype) / np.sqrt(hidden)
    return SEParams(w1=Tensor(w1, requires_grad=True),
                    w2=Tensor(w2, requires_grad=True), reduction=reduction)


@dataclass
class AblationParams:
    """Kernel + bias for the reduced variants (gap_only / attn_only)."""

    variant: str
    kernel: Tensor  # (1, 1, 1, 1) for gap_only, (1, 1, 1, C) for attn_only
    bias: Tensor

    @property
    def param_count(self) -> int:
        return self.kernel.size + self.bias.size

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [("kernel", self.kernel), ("bias", self.bias)]


def ablation_params(variant: str, channels: int,
                    rng: np.random.Generator | None = None, dtype=np.float64):
    """Create parameters for one attribution-run variant.

    ``full`` and ``positive_corr`` reuse the main block (with the sign
    flipped for the latter); the reduced variants get their own kernels:
    1x1 on the significance vector, 1xC over relation-matrix rows.
    """
    if variant == "full":
        return chandiv_params(channels, rng, dtype=dtype)
    if variant == "positive_corr":
        return chandiv_params(channels, rng, correlation_sign="positive", dtype=dtype)
    if variant == "gap_only":
        width = 1
    elif variant == "attn_only":
        width = channels
    else:
        raise ConfigError(f"unknown ablation variant {variant!r}; "
                          f"expected one of {ABLATION_VARIANTS}")
    if rng is None:
        kernel = np.zeros((1, 1, 1, width), dtype=dtype)
    else:
        bound = 1.0 / np.sqrt(width)
        kernel = rng.uniform(-bound, bound, size=(1, 1, 1, width)).astype(dtype)
    return AblationParams(variant=variant,
                          kernel=Tensor(kernel, requires_grad=True),
                          bias=Tensor(np.zeros(1, dtype=dtype), requires_grad=True))


def _check_feature_map(x: Tensor, op: str) -> bool:
    """Validate (C,H,W) or (N,C,H,W) input; returns True when unbatched."""
    if x.ndim == 3:
        return True
    if x.ndim == 4:
        return False
    raise ShapeError(f"{op} expects (C,H,W) or (N,C,H,W), got {x.shape}")


def channel_significance(x) -> Tensor:
    """Softmax over the per-channel spatial means.

    (C,H,W) -> (C,1); (N,C,H,W) -> (N,C,1). Components sum to 1 per sample.
    """
    x = as_tensor(x)
    if _check_feature_map(x, "channel_significance"):
        return softmax(global_avg_pool(x), axis=0)
    pooled = global_avg_pool(x)  # (N, C)
    n, c = pooled.shape
    return reshape(softmax(pooled, axis=1), (n, c, 1))


def channel_relation(x, sign: str = "negative") -> Tensor:
    """Row-softmaxed channel Gram matrix of the flattened feature map.

    Entry (i, j) weights channel j from channel i's viewpoint; with the
    default negative sign, larger dot products (more similar channels) get
    smaller weights. Rows sum to 1. (C,H,W) -> (C,C); batched -> (N,C,C).
    """
    x = as_tensor(x)
    if sign not in CORRELATION_SIGNS:
        raise ConfigError(f"sign must be one of {CORRELATION_SIGNS}, got {sign!r}")
    if _check_feature_map(x, "channel_relation"):
        c = x.shape[0]
        flat = reshape(x, (c, -1))
        gram = matmul(flat, transpose(flat, (1, 0)))
    else:
        n, c = x.shape[0], x.shape[1]
        flat = reshape(x, (n, c, -1))
        gram = matmul(flat, transpose(flat, (0, 2, 1)))
    pre = gram if sign == "positive" else -gram
    return softmax(pre, axis=-1)


def fuse(a, j, mode: str = "concat") -> Tensor:
    """Combine significance (...,C,1) with relation (...,C,C).

    concat places the significance as column 0, giving (...,C,C+1);
    elementwise_add broadcasts it across the relation columns, giving (...,C,C).
    """
    a, j = as_tensor(a), as_tensor(j)
    if mode not in FUSION_MODES:
        raise ConfigError(f"fusion mode must be one of {FUSION_MODES}, got {mode!r}")
    if a.ndim != j.ndim or a.shape[-1] != 1 or j.shape[-1] != j.shape[-2] \
            or a.shape[:-1] != j.shape[:-1]:
        raise ShapeError(
            f"fuse expects (...,C,1) and (...,C,C) operands, got {a.shape} "
            f"and {j.shape}")
    if mode == "concat":
        return concat([a, j], axis=-1)
    return j + a


def transform(y, params) -> Tensor:
    """Shared-filter transform of a fused feature: (...,C,W) -> (...,C,1).

    Row i maps to dot(kernel, y[i]) + bias; one filter is shared across all
    rows and no activation follows (the residual application consumes the
    raw vector).
    """
    y = as_tensor(y)
    kernel, bias = params.kernel, params.bias
    if y.ndim not in (2, 3):
        raise ShapeError(f"transform expects (C,W) or (N,C,W), got {y.shape}")
    width = kernel.shape[-1]
    if y.shape[-1] != width:
        raise ShapeError(
            f"transform kernel width {width} does not match feature width "
            f"{y.shape[-1]} (kernel width follows the fusion mode)")
    if y.ndim == 2:
        c = y.shape[0]
        out = conv2d(reshape(y, (1, c, width)), kernel)  # (1, C, 1)
        return reshape(out, (c, 1)) + bias
    n, c = y.shape[0], y.shape[1]
    out = conv2d(reshape(y, (n, 1, c, width)), kernel)  # (N, 1, C, 1)
    return reshape(out, (n, c, 1)) + bias


def apply_attention(x, y) -> Tensor:
    """Residual per-channel scaling: out[c] = x[c] * y[c] + x[c]."""
    x, y = as_tensor(x), as_tensor(y)
    single = _check_feature_map(x, "apply_attention")
    c = x.shape[0] if single else x.shape[1]
    expected = (c, 1) if single else (x.shape[0], c, 1)
    if y.shape != expected:
        raise ShapeError(
            f"attention vector shape {y.shape} does not match feature map "
            f"{x.shape} (expected {expected})")
    scale = reshape(y, (c, 1, 1) if single else (x.shape[0], c, 1, 1))
    return x * scale + x


def chandiv_forward(x, params: ChanDivParams) -> Tensor:
    """Full channel diversification block, differentiable end to end."""
    x = as_tensor(x)
    a = channel_significance(x)
    j = channel_relation(x, params.correlation_sign)
    y = transform(fuse(a, j, params.fusion_mode), params)
    return apply_attention(x, y)


def se_forward(x, params: SEParams) -> Tensor:
    """Squeeze-excitation gate: out[c] = x[c] * sigmoid(W2 relu(W1 gap(x)))[c]."""
    x = as_tensor(x)
    single = _check_feature_map(x, "se_forward")
    if single:
        z = reshape(global_avg_pool(x), (1, -1))  # (1, C)
    else:
        z = global_avg_pool(x)  # (N, C)
    hidden = relu(matmul(z, transpose(params.w1, (1, 0))))
    gate = sigmoid(matmul(hidden, transpose(params.w2, (1, 0))))  # (N, C)
    c = x.shape[0] if single else x.shape[1]
    scale = reshape(gate, (c, 1, 1) if single else (x.shape[0], c, 1, 1))
    return x * scale


def ablation_forward(x, variant: str, params) -> Tensor:
    """Forward one attribution-run variant.

    full delegates to the main block; positive_corr is the main block with a
    sign-flipped relation; gap_only transforms the significance vector alone;
    attn_only transforms the relation matrix alone.
    """
    x = as_tensor(x)
    if variant == "full":
        return chandiv_forward(x, params)
    if variant == "positive_corr":
        if params.correlation_sign != "positive":
            raise ConfigError(
                "positive_corr variant requires params with correlation_sign="
                f"'positive', got {params.correlation_sign!r}")
        return chandiv_forward(x, params)
    if variant == "gap_only":
        y = transform(channel_significance(x), params)
        return apply_attention(x, y)
    if variant == "attn_only":
        y = transform(channel_relation(x, "negative"), params)
        return apply_attention(x, y)
    raise ConfigError(f"unknown ablation variant {variant!r}; "
                      f"expected one of {ABLATION_VARIANTS}")
