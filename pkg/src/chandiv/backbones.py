"""Small configurable CNN backbones with a channel attention block at the tail.

The default layout follows the common CIFAR recipe: a 3x3 stem, stages of
residual blocks (two 3x3 convolutions, identity shortcut, projection on
downsampling), then the attention block, one 3x3 same-width convolution with
batch norm and ReLU, and a global-average-pool + affine classifier. The
post-attention convolution and classifier head exist only when an attention
kind is selected; the baseline goes straight from the last stage to the head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import blocks
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor, batch_norm2d, conv2d, global_avg_pool, matmul, relu, reshape, transpose

BLOCK_KINDS = ("plain_conv", "residual")
PLACEMENTS = ("tail", "per_residual_block")
ATTENTION_KINDS = ("none", "chandiv", "full", "se", "gap_only", "attn_only",
                   "positive_corr")


@dataclass
class BackboneSpec:
    """Architecture description; every field has a CIFAR-scale default."""

    stage_channels: tuple = (16, 32, 64)
    blocks_per_stage: int = 1
    block_kind: str = "residual"
    attention: str = "none"
    attention_placement: str = "tail"
    num_classes: int = 10
    input_shape: tuple = (3, 32, 32)
    se_reduction: int = 4
    # Stem stride 2 quarters the spatial work of every stage; useful when a
    # desk-scale run must fit a wall-clock budget.
    stem_stride: int = 1

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if not self.stage_channels or any(c < 1 for c in self.stage_channels):
            raise ConfigError(f"stage_channels must be positive, got {self.stage_channels}")
        if self.blocks_per_stage < 1:
            raise ConfigError(f"blocks_per_stage must be >= 1, got {self.blocks_per_stage}")
        if self.block_kind not in BLOCK_KINDS:
            raise ConfigError(f"block_kind must be one of {BLOCK_KINDS}, got {self.block_kind!r}")
        if self.attention not in ATTENTION_KINDS:
            raise ConfigError(f"attention must be one of {ATTENTION_KINDS}, got {self.attention!r}")
        if self.attention_placement not in PLACEMENTS:
            raise ConfigError(
                f"attention_placement must be one of {PLACEMENTS}, got {self.attention_placement!r}")
        if self.attention_placement == "per_residual_block":
            if self.block_kind != "residual":
                raise ConfigError("per_residual_block placement requires residual blocks")
            if self.attention == "none":
                raise ConfigError("per_residual_block placement needs an attention kind")
        if len(self.input_shape) != 3:
            raise ConfigError(f"input_shape must be (C, H, W), got {self.input_shape}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.se_reduction < 1:
            raise ConfigError(f"se_reduction must be >= 1, got {self.se_reduction}")
        if self.stem_stride not in (1, 2):
            raise ConfigError(f"stem_stride must be 1 or 2, got {self.stem_stride}")


# -- layers -------------------------------------------------------------------
#
# Layers are duck-typed: forward(x, training), tensors(), buffers(),
# out_shape(in_shape) and macs(in_shape), where shapes omit the batch extent.


class Conv2d:
    """3x3/1x1 convolution, He-normal init, no bias (batch norm follows)."""

    def __init__(self, cin, cout, k, stride, pad, rng, dtype):
        std = np.sqrt(2.0 / (cin * k * k))
        self.weight = Tensor(rng.normal(0.0, std, (cout, cin, k, k)).astype(dtype),
                             requires_grad=True)
        self.stride = stride
        self.pad = pad

    def forward(self, x, training):
        return conv2d(x, self.weight, stride=self.stride, pad=self.pad)

    def tensors(self):
        return [("weight", self.weight)]

    def buffers(self):
        return []

    def out_shape(self, s):
        cout, _, kh, kw = self.weight.shape
        h = (s[1] + 2 * self.pad - kh) // self.stride + 1
        w = (s[2] + 2 * self.pad - kw) // self.stride + 1
        return (cout, h, w)

    def macs(self, s):
        cout, cin, kh, kw = self.weight.shape
        _, h, w = self.out_shape(s)
        return cout * cin * kh * kw * h * w


class BatchNorm2d:
    """Per-channel normalization; running statistics decay with factor 0.9."""

    def __init__(self, channels, dtype, momentum=0.9, eps=1e-5):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x, training):
        if training:
            out, mean, var = batch_norm2d(x, self.gamma, self.beta, self.eps)
            m = self.momentum
            self.running_mean = (m * self.running_mean + (1 - m) * mean).astype(
                self.running_mean.dtype)
            self.running_var = (m * self.running_var + (1 - m) * var).astype(
                self.running_var.dtype)
            return out
        # Inference path folds the running stats into one affine map; norm
        # parameters receive no gradient here.
        scale = (self.gamma.data / np.sqrt(self.running_var + self.eps))
        shift = self.beta.data - self.running_mean * scale
        return x * Tensor(scale[:, None, None]) + Tensor(shift[:, None, None])

    def tensors(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def load_buffer(self, name, value):
        setattr(self, name, value.astype(getattr(self, name).dtype))

    def out_shape(self, s):
        return s

    def macs(self, s):
        return 2 * int(np.prod(s))


class ReLU:
    def forward(self, x, training):
        return relu(x)

    def tensors(self):
        return []

    def buffers(self):
        return []

    def out_shape(self, s):
        return s

    def macs(self, s):
        return 0


class ResidualBlock:
    """Two 3x3 convs with identity shortcut; 1x1 projection on downsampling."""

    def __init__(self, cin, cout, stride, rng, dtype):
        self.conv1 = Conv2d(cin, cout, 3, stride, 1, rng, dtype)
        self.bn1 = BatchNorm2d(cout, dtype)
        self.conv2 = Conv2d(cout, cout, 3, 1, 1, rng, dtype)
        self.bn2 = BatchNorm2d(cout, dtype)
        if stride != 1 or cin != cout:
            self.proj = Conv2d(cin, cout, 1, stride, 0, rng, dtype)
            self.proj_bn = BatchNorm2d(cout, dtype)
        else:
            self.proj = None
            self.proj_bn = None

    def _subs(self):
        subs = [("conv1", self.conv1), ("bn1", self.bn1),
                ("conv2", self.conv2), ("bn2", self.bn2)]
        if self.proj is not None:
            subs += [("proj", self.proj), ("proj_bn", self.proj_bn)]
        return subs

    def forward(self, x, training):
        h = relu(self.bn1.forward(self.conv1.forward(x, training), training))
        h = self.bn2.forward(self.conv2.forward(h, training), training)
        shortcut = x
        if self.proj is not None:
            shortcut = self.proj_bn.forward(self.proj.forward(x, training), training)
        return relu(h + shortcut)

    def tensors(self):
        return [(f"{sub}.{n}", t) for sub, layer in self._subs()
                for n, t in layer.tensors()]

    def buffers(self):
        return [(f"{sub}.{n}", b) for sub, layer in self._subs()
                for n, b in layer.buffers()]

    def load_buffer(self, name, value):
        sub, rest = name.split(".", 1)
        dict(self._subs())[sub].load_buffer(rest, value)

    def out_shape(self, s):
        return self.conv1.out_shape(s)

    def macs(self, s):
        mid = self.conv1.out_shape(s)
        total = self.conv1.macs(s) + self.bn1.macs(mid) \
            + self.conv2.macs(mid) + self.bn2.macs(mid)
        if self.proj is not None:
            total += self.proj.macs(s) + self.proj_bn.macs(mid)
        return total


class AttentionLayer:
    """Wraps one attention block's parameters as a backbone layer."""

    def __init__(self, kind, channels, rng, dtype, se_reduction=4):
        self.kind = kind
        self.channels = channels
        if kind in ("chandiv", "full"):
            self.params = blocks.chandiv_params(channels, rng, dtype=dtype)
        elif kind == "se":
            self.params = blocks.se_params(channels, se_reduction, rng, dtype=dtype)
        elif kind in ("gap_only", "attn_only", "positive_corr"):
            self.params = blocks.ablation_params(kind, channels, rng, dtype=dtype)
        else:
            raise ConfigError(f"unknown attention kind {kind!r}")

    def forward(self, x, training):
        if self.kind in ("chandiv", "full"):
            return blocks.chandiv_forward(x, self.params)
        if self.kind == "se":
            return blocks.se_forward(x, self.params)
        return blocks.ablation_forward(x, self.kind, self.params)

    def tensors(self):
        return self.params.tensors()

    def buffers(self):
        return []

    def out_shape(self, s):
        return s

    def macs(self, s):
        c, h, w = s
        if self.kind == "se":
            hidden = c // self.params.reduction
            return 2 * c * hidden + c * h * w
        gram = c * c * h * w
        if self.kind == "gap_only":
            return c + c * h * w
        if self.kind == "attn_only":
            return gram + c * c + c * h * w
        return gram + c * (c + 1) + c * h * w


class GlobalAvgPool:
    def forward(self, x, training):
        return global_avg_pool(x)

    def tensors(self):
        return []

    def buffers(self):
        return []

    def out_shape(self, s):
        return (s[0],)

    def macs(self, s):
        return 0


class Affine:
    """Dense classifier layer: logits = x @ W.T + b."""

    def __init__(self, cin, cout, rng, dtype):
        bound = 1.0 / np.sqrt(cin)
        self.weight = Tensor(rng.uniform(-bound, bound, (cout, cin)).astype(dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def forward(self, x, training):
        return matmul(x, transpose(self.weight, (1, 0))) + self.bias

    def tensors(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def buffers(self):
        return []

    def out_shape(self, s):
        return (self.weight.shape[0],)

    def macs(self, s):
        return self.weight.size


@dataclass
class Network:
    """Ordered layers plus a registry of uniquely named parameter tensors."""

    spec: BackboneSpec
    layers: list = field(default_factory=list)   # [(name, layer)]
    head_start: int = 0                          # index of the GAP layer
    dtype: np.dtype = np.float32

    def __post_init__(self):
        self._check_unique()

    def _check_unique(self):
        names = [n for n, _ in self.named_parameters()]
        if len(names) != len(set(names)):
            raise ConfigError("duplicate parameter names in registry")

    def named_parameters(self):
        return [(f"{lname}.{n}", t) for lname, layer in self.layers
                for n, t in layer.tensors()]

    def named_buffers(self):
        return [(f"{lname}.{n}", b) for lname, layer in self.layers
                for n, b in layer.buffers()]

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def zero_grad(self):
        for t in self.parameters():
            t.zero_grad()

    def forward(self, batch, training: bool = False) -> Tensor:
        """Logits for a (N,C,H,W) batch, or a (num_classes,) vector for (C,H,W)."""
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        single = x.ndim == 3
        if single:
            x = reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[1:] != self.spec.input_shape:
            raise ShapeError(
                f"batch shape {batch.shape} does not match spec input "
                f"{self.spec.input_shape}")
        for _, layer in self.layers:
            x = layer.forward(x, training)
        return reshape(x, (x.shape[-1],)) if single else x

    def forward_features(self, batch, training: bool = False) -> Tensor:
        """Feature maps just before the global average pool."""
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        single = x.ndim == 3
        if single:
            x = reshape(x, (1,) + x.shape)
        for _, layer in self.layers[:self.head_start]:
            x = layer.forward(x, training)
        return reshape(x, x.shape[1:]) if single else x

    def classifier_weight(self) -> Tensor:
        """Affine weight of the GAP+affine head (required by CAM)."""
        head = [layer for _, layer in self.layers[self.head_start:]]
        if len(head) != 2 or not isinstance(head[0], GlobalAvgPool) \
                or not isinstance(head[1], Affine):
            raise ContractError("network head is not global-average-pool + affine")
        return head[1].weight


def build(spec: BackboneSpec, seed: int = 0, dtype=np.float32) -> Network:
    """Deterministically construct a network: same seed, same initial bits."""
    rng = np.random.default_rng(seed)
    cin, h, w = spec.input_shape
    layers = []

    c0 = spec.stage_channels[0]
    layers.append(("stem.conv", Conv2d(cin, c0, 3, spec.stem_stride, 1, rng, dtype)))
    layers.append(("stem.bn", BatchNorm2d(c0, dtype)))
    layers.append(("stem.relu", ReLU()))

    prev = c0
    for si, c in enumerate(spec.stage_channels):
        for bi in range(spec.blocks_per_stage):
            stride = 2 if (si > 0 and bi == 0) else 1
            name = f"stage{si}.block{bi}"
            if spec.block_kind == "residual":
                layers.append((name, ResidualBlock(prev, c, stride, rng, dtype)))
            else:
                layers.append((f"{name}.conv", Conv2d(prev, c, 3, stride, 1, rng, dtype)))
                layers.append((f"{name}.bn", BatchNorm2d(c, dtype)))
                layers.append((f"{name}.relu", ReLU()))
            prev = c
            if spec.attention_placement == "per_residual_block" \
                    and spec.attention != "none":
                layers.append((f"{name}.attention",
                               AttentionLayer(spec.attention, c, rng, dtype,
                                              spec.se_reduction)))

    if spec.attention != "none" and spec.attention_placement == "tail":
        c = spec.stage_channels[-1]
        layers.append(("attention",
                       AttentionLayer(spec.attention, c, rng, dtype,
                                      spec.se_reduction)))
        layers.append(("post.conv", Conv2d(c, c, 3, 1, 1, rng, dtype)))
        layers.append(("post.bn", BatchNorm2d(c, dtype)))
        layers.append(("post.relu", ReLU()))

    head_start = len(layers)
    layers.append(("head.pool", GlobalAvgPool()))
    layers.append(("head.fc", Affine(spec.stage_channels[-1], spec.num_classes,
                                     rng, dtype)))
    return Network(spec=spec, layers=layers, head_start=head_start, dtype=dtype)


def param_count(net: Network):
    """Total trainable scalars plus a per-layer (name, params, macs) table.

    MACs are multiply-accumulates for one forward pass of a single sample,
    counting convolutions, dense layers, attention matmuls and the two
    batch-norm elementwise multiplies.
    """
    rows = []
    shape = net.spec.input_shape
    for name, layer in net.layers:
        n_params = sum(t.size for _, t in layer.tensors())
        rows.append((name, n_params, layer.macs(shape)))
        shape = layer.out_shape(shape)
    total = sum(r[1] for r in rows)
    total_macs = sum(r[2] for r in rows)
    return total, total_macs, rows
