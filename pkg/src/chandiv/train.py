"""SGD-with-momentum training loop, evaluation, and binary checkpoints.

Checkpoint layout (all integers little-endian uint32): magic ``CDIV``,
format version, a key=value architecture block (length-prefixed), entry
count, then per entry: name length, name bytes, rank, extents, raw
little-endian float32 values. Parameters and persistent buffers (batch-norm
running statistics) are both stored, so a checkpoint alone rebuilds a
working network.
"""

from __future__ import annotations

import contextlib
import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover - optional accelerator control
    threadpool_limits = None

from .backbones import BackboneSpec, Network, build
from .data import AugmentConfig, Dataset, augment_batch
from .errors import ConfigError, FormatError, ShapeError, TrainingDiverged
from .tensor import Tensor, finite_checks, no_grad, softmax_cross_entropy

CHECKPOINT_MAGIC = b"CDIV"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 10
    batch_size: int = 128
    seed: int = 0
    # (epoch_fraction, factor) pairs; the default is the step-decay recipe
    # commonly used for CIFAR baselines (x0.1 at 50% and 75%).
    schedule: tuple = ((0.5, 0.1), (0.75, 0.1))
    threads: int = 1

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")


@dataclass
class History:
    """One row per completed epoch."""

    epochs: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    train_top1: list = field(default_factory=list)
    eval_top1: list = field(default_factory=list)

    def add(self, epoch, lr, loss, train_acc, eval_acc):
        self.epochs.append(epoch)
        self.lrs.append(lr)
        self.train_loss.append(loss)
        self.train_top1.append(train_acc)
        self.eval_top1.append(eval_acc)

    def csv_text(self) -> str:
        lines = ["epoch,lr,train_loss,train_top1,eval_top1"]
        for i in range(len(self.epochs)):
            lines.append(f"{self.epochs[i]},{self.lrs[i]:.6g},"
                         f"{self.train_loss[i]:.6f},{self.train_top1[i]:.6f},"
                         f"{self.eval_top1[i]:.6f}")
        return "\n".join(lines) + "\n"

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            f.write(self.csv_text())


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    lr = cfg.lr
    for fraction, factor in cfg.schedule:
        if epoch >= int(fraction * cfg.epochs):
            lr *= factor
    return lr


def sgd_step(params, grads, velocities, lr: float, momentum: float,
             weight_decay=0.0) -> None:
    """In-place momentum update: v <- m*v + (g + wd*p); p <- p - lr*v.

    ``weight_decay`` may be a scalar or one value per parameter.
    """
    if np.isscalar(weight_decay):
        weight_decay = [weight_decay] * len(params)
    for p, g, v, wd in zip(params, grads, velocities, weight_decay, strict=True):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeError(
                f"sgd_step shape mismatch: param {p.shape}, grad {g.shape}, "
                f"velocity {v.shape}")
        v *= momentum
        v += g
        if wd:
            v += wd * p
        p -= lr * v


def decay_applies(name: str) -> bool:
    """Weight decay hits conv/dense/attention kernels, not biases or norms."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf in ("weight", "kernel", "w1", "w2")


def top1_accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of argmax hits; ties resolve to the lowest class index."""
    return float((logits.argmax(axis=1) == labels).mean())


def evaluate(net: Network, ds: Dataset, batch_size: int = 250) -> float:
    """Top-1 accuracy of the network on a dataset (inference mode)."""
    correct = 0
    with no_grad():
        for start in range(0, len(ds), batch_size):
            x = Tensor(ds.images[start:start + batch_size])
            logits = net.forward(x, training=False).data
            labels = ds.labels[start:start + batch_size]
            correct += int((logits.argmax(axis=1) == labels).sum())
    return correct / len(ds)


def _thread_limit(n: int):
    if threadpool_limits is None or n is None or n < 1:
        return contextlib.nullcontext()
    return threadpool_limits(limits=n)


def train(net: Network, ds_train: Dataset, ds_eval: Dataset, cfg: TrainConfig,
          augment_cfg: AugmentConfig | None = None):
    """Run the full loop; returns (History, checkpoint bytes at best eval top-1).

    Deterministic for a fixed (seed, platform) in single-threaded mode:
    shuffling uses seed+1 and augmentation seed+2, so runs with identical
    configs replay identical batch streams.
    """
    rng_shuffle = np.random.default_rng(cfg.seed + 1)
    rng_augment = np.random.default_rng(cfg.seed + 2)
    named = net.named_parameters()
    velocities = [np.zeros_like(t.data) for _, t in named]
    decay = [cfg.weight_decay if decay_applies(n) else 0.0 for n, _ in named]

    history = History()
    best_acc, best_ckpt = -1.0, None
    n_train = len(ds_train)

    # Overflow inside a diverging step is reported through TrainingDiverged;
    # the elementwise warnings would only duplicate it.
    with _thread_limit(cfg.threads), finite_checks(False), \
            np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(cfg.epochs):
            lr = lr_at(cfg, epoch)
            order = rng_shuffle.permutation(n_train)
            loss_sum, hit, seen = 0.0, 0, 0
            for bi, start in enumerate(range(0, n_train, cfg.batch_size)):
                idx = order[start:start + cfg.batch_size]
                images = ds_train.images[idx]
                if augment_cfg is not None and augment_cfg.enabled:
                    images = augment_batch(images, augment_cfg, rng_augment)
                labels = ds_train.labels[idx]
                logits = net.forward(Tensor(images), training=True)
                loss = softmax_cross_entropy(logits, labels)
                loss_value = loss.item()
                if not math.isfinite(loss_value):
                    raise TrainingDiverged(epoch, bi, lr, loss_value)
                net.zero_grad()
                loss.backward()
                sgd_step([t.data for _, t in named],
                         [t.grad for _, t in named],
                         velocities, lr, cfg.momentum, decay)
                loss_sum += loss_value * len(idx)
                hit += int((logits.data.argmax(axis=1) == labels).sum())
                seen += len(idx)
            eval_acc = evaluate(net, ds_eval)
            history.add(epoch, lr, loss_sum / seen, hit / seen, eval_acc)
            if eval_acc > best_acc:
                best_acc = eval_acc
                best_ckpt = checkpoint_bytes(net)
    return history, best_ckpt


# -- checkpoints ----------------------------------------------------------------

def _spec_kv(spec: BackboneSpec) -> str:
    return "\n".join([
        f"stage_channels={','.join(str(c) for c in spec.stage_channels)}",
        f"blocks_per_stage={spec.blocks_per_stage}",
        f"block_kind={spec.block_kind}",
        f"attention={spec.attention}",
        f"attention_placement={spec.attention_placement}",
        f"num_classes={spec.num_classes}",
        f"input_shape={','.join(str(v) for v in spec.input_shape)}",
        f"se_reduction={spec.se_reduction}",
        f"stem_stride={spec.stem_stride}",
    ])


def _spec_from_kv(text: str) -> BackboneSpec:
    fields = dict(line.split("=", 1) for line in text.splitlines() if line)
    try:
        return BackboneSpec(
            stage_channels=tuple(int(v) for v in fields["stage_channels"].split(",")),
            blocks_per_stage=int(fields["blocks_per_stage"]),
            block_kind=fields["block_kind"],
            attention=fields["attention"],
            attention_placement=fields["attention_placement"],
            num_classes=int(fields["num_classes"]),
            input_shape=tuple(int(v) for v in fields["input_shape"].split(",")),
            se_reduction=int(fields["se_reduction"]),
            stem_stride=int(fields["stem_stride"]),
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"checkpoint architecture block is invalid: {exc}")


def _entries(net: Network):
    return list(net.named_parameters()) + [
        (name, buf) for name, buf in net.named_buffers()]


def checkpoint_bytes(net: Network) -> bytes:
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<I", CHECKPOINT_VERSION))
    spec_blob = _spec_kv(net.spec).encode()
    out.write(struct.pack("<I", len(spec_blob)))
    out.write(spec_blob)
    entries = _entries(net)
    out.write(struct.pack("<I", len(entries)))
    for name, value in entries:
        arr = value.data if isinstance(value, Tensor) else value
        name_b = name.encode()
        out.write(struct.pack("<I", len(name_b)))
        out.write(name_b)
        out.write(struct.pack("<I", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(arr.astype("<f4").tobytes())
    return out.getvalue()


def save_checkpoint(net: Network, path: str) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(net))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError("checkpoint is truncated")
        piece = self.blob[self.pos:self.pos + n]
        self.pos += n
        return piece

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint_bytes(blob: bytes) -> Network:
    r = _Reader(blob)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic (expected {CHECKPOINT_MAGIC!r})")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    spec = _spec_from_kv(r.take(r.u32()).decode())
    net = build(spec, seed=0, dtype=np.float32)
    params = dict(net.named_parameters())
    buffer_owners = {f"{lname}.{n}": (layer, n) for lname, layer in net.layers
                     for n, _ in layer.buffers()}
    seen = set()
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        values = np.frombuffer(r.take(4 * int(np.prod(shape, dtype=np.int64))),
                               dtype="<f4").reshape(shape)
        if name in params:
            if params[name].data.shape != shape:
                raise FormatError(f"checkpoint entry {name} has shape {shape}, "
                                  f"network expects {params[name].data.shape}")
            params[name].data = values.astype(np.float32)
        elif name in buffer_owners:
            layer, leaf = buffer_owners[name]
            layer.load_buffer(leaf, values)
        else:
            raise FormatError(f"checkpoint entry {name} is not in the registry")
        seen.add(name)
    missing = (set(params) | set(buffer_owners)) - seen
    if missing:
        raise FormatError(f"checkpoint is missing entries: {sorted(missing)}")
    return net


def load_checkpoint(path: str) -> Network:
    """Rebuild the architecture stored in a checkpoint and load every entry."""
    with open(path, "rb") as f:
        return load_checkpoint_bytes(f.read())
