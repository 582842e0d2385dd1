"""Channel diversification attention for small CNN classifiers.

The package is organized around a minimal reverse-mode autodiff tensor
engine (`tensor`), the attention blocks themselves (`blocks`), configurable
backbones (`backbones`), dataset handling (`data`), the training loop
(`train`), class activation maps (`cam`), and a command-line driver (`cli`).
"""

from ._alloc import tune_allocator

tune_allocator()

from .tensor import Tensor, grad_check, no_grad  # noqa: E402
from .blocks import (  # noqa: E402
    ChanDivParams,
    SEParams,
    ablation_forward,
    ablation_params,
    apply_attention,
    chandiv_forward,
    chandiv_params,
    channel_relation,
    channel_significance,
    fuse,
    se_forward,
    se_params,
    transform,
)
from .backbones import BackboneSpec, Network, build, param_count  # noqa: E402
from .data import (  # noqa: E402
    AugmentConfig,
    Dataset,
    augment,
    load_cifar10,
    normalize,
    synth_dataset,
    synth_split,
)
from .train import (  # noqa: E402
    History,
    TrainConfig,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
    train,
)
from .cam import CamMap, compute_cam, emit_heatmap  # noqa: E402

__all__ = [
    "AugmentConfig", "BackboneSpec", "CamMap", "ChanDivParams", "Dataset",
    "History", "Network", "SEParams", "Tensor", "TrainConfig",
    "ablation_forward", "ablation_params", "apply_attention", "augment",
    "build", "chandiv_forward", "chandiv_params", "channel_relation",
    "channel_significance", "compute_cam", "emit_heatmap", "evaluate",
    "fuse", "grad_check", "load_checkpoint", "load_cifar10", "no_grad",
    "normalize", "param_count", "save_checkpoint", "se_forward", "se_params",
    "sgd_step", "synth_dataset", "synth_split", "train", "transform",
]
