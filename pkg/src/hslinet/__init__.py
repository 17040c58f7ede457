"""HSLiNet: joint HSI + LiDAR classification with a dual bidirectional
spectral block and a spatial convolution block, on a from-scratch
reverse-mode tensor core."""

from . import ops
from .data import (
    HslcError,
    NormStats,
    PatchConfig,
    Sample,
    Scene,
    apply_norm_stats,
    compute_norm_stats,
    extract_patches,
    load_scene,
    load_scene_dir,
    normalize_scene,
    read_hslc,
    save_scene,
    split_samples,
    synth_scene,
    write_hslc,
)
from .gradcheck import check_model_gradients, central_difference_grad, max_relative_error
from .metrics import PALETTE, ConfusionMatrix, render_map, render_truth_map, write_ppm
from .model import (
    BiNetParams,
    CheckpointError,
    HeadParams,
    HsLiNetModel,
    ModelConfig,
    SBlockParams,
    binet_forward,
    fuse_inputs,
    init_params,
    load_checkpoint,
    model_forward,
    model_forward_batch,
    model_forward_patches,
    save_checkpoint,
    sblock_forward,
    spectral_embed,
)
from .tensor import NumericalError, Parameter, Tape, Tensor, backward, zero_grads
from .training import (
    AblationRow,
    EpochStats,
    RunRecord,
    TrainConfig,
    adam_step,
    evaluate,
    run_ablation_grid,
    run_ablation_study,
    train,
)

__version__ = "0.1.0"
