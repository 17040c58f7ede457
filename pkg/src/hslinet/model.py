"""The HSLiNet network: fused patch embedding, bidirectional spectral block,
spatial block, fusion head, and classifier, with ablation switches.

A patch pair (HSI p*p*CH, LiDAR p*p*1) is fused along the channel axis, then
processed by two branches:

  * the bidirectional spectral block projects the fused cube to a spectral
    sequence and runs it through forward and reversed 1-D convolution
    pathways, each followed by a learned direction-parameter modulation
    inside a tanh, then averages over the sequence;
  * the spatial block runs the fused cube (channels-first) through
    conv2d -> batchnorm -> relu stages and global average pooling.

The branch features are concatenated, refined by a single-channel 1-D
convolution, and mapped linearly to class logits. Branches and pathways can
be disabled individually; the head is sized to the surviving concat width.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .data import Sample
from .ops import ACTIVATION_KINDS, BatchNormState
from .tensor import Parameter, Tensor

__all__ = [
    "MODALITIES",
    "ModelConfig",
    "BiNetParams",
    "SBlockParams",
    "HeadParams",
    "HsLiNetModel",
    "init_params",
    "fuse_inputs",
    "spectral_embed",
    "binet_forward",
    "sblock_forward",
    "model_forward",
    "model_forward_patches",
    "model_forward_batch",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

MODALITIES = ("both", "hsi", "lidar")


@dataclass
class ModelConfig:
    """Architecture hyperparameters and ablation switches.

    `d` is the hidden width of the spectral projections, `k1`/`k2` the 1-D
    and 2-D kernel sizes, `s_channels`/`s_depth` the spatial block's conv
    width and stage count, and `head_channels` the channel count of the
    fusion head's 1-D convolution.
    """

    ch: int
    classes: int
    p: int = 7
    d: int = 64
    k1: int = 3
    k2: int = 3
    s_channels: int = 16
    s_depth: int = 2
    head_channels: int = 8
    activation: str = "silu"
    enable_forward: bool = True
    enable_reversed: bool = True
    enable_spatial: bool = True
    modality: str = "both"

    def __post_init__(self):
        if self.ch < 1:
            raise ValueError(f"ch must be >= 1, got {self.ch}")
        if self.classes < 2:
            raise ValueError(f"classes must be >= 2, got {self.classes}")
        if self.p < 1 or self.p % 2 == 0:
            raise ValueError(f"patch size must be odd and >= 1, got {self.p}")
        if self.k1 % 2 == 0 or self.k2 % 2 == 0:
            raise ValueError(f"kernel sizes must be odd, got k1={self.k1}, k2={self.k2}")
        for name in ("d", "k1", "k2", "s_channels", "s_depth", "head_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.activation not in ACTIVATION_KINDS:
            raise ValueError(f"activation must be one of {ACTIVATION_KINDS}, got {self.activation!r}")
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if not (self.enable_forward or self.enable_reversed or self.enable_spatial):
            raise ValueError("at least one of forward/reversed/spatial must be enabled")

    @property
    def seq_len(self) -> int:
        """Length of the fused spectral sequence (HSI bands + LiDAR channel)."""
        return self.ch + 1

    @property
    def spectral_enabled(self) -> bool:
        return self.enable_forward or self.enable_reversed

    @property
    def fusion_width(self) -> int:
        """Width of the concatenated branch features feeding the head."""
        return (self.d if self.spectral_enabled else 0) + (
            self.s_channels if self.enable_spatial else 0
        )


@dataclass
class BiNetParams:
    """Bidirectional spectral block: projections, direction convolutions, and
    the direction parameters modulated by the shared delta vector."""

    w_x: Parameter  # [d, p*p] forward projection
    w_z: Parameter  # [d, p*p] reversed-path projection
    conv_f_w: Parameter  # [d, d, k1]
    conv_f_b: Parameter  # [d]
    conv_b_w: Parameter  # [d, d, k1]
    conv_b_b: Parameter  # [d]
    a: Parameter  # [d] forward direction parameter
    b: Parameter  # [d] reversed direction parameter
    delta: Parameter  # [d] shared modulation


@dataclass
class SBlockParams:
    """Spatial block: conv2d/batchnorm stages."""

    conv_w: list[Parameter]
    conv_b: list[Parameter]
    bn_gamma: list[Parameter]
    bn_beta: list[Parameter]
    bn_state: list[BatchNormState]


@dataclass
class HeadParams:
    """Fusion head: single-channel 1-D conv then linear classifier."""

    conv_w: Parameter  # [head_channels, 1, k1]
    conv_b: Parameter  # [head_channels]
    lin_w: Parameter  # [classes, head_channels * fusion_width]
    lin_b: Parameter  # [classes]


@dataclass
class HsLiNetModel:
    config: ModelConfig
    binet: BiNetParams
    sblock: SBlockParams
    head: HeadParams
    dtype: np.dtype = field(default=np.dtype(np.float32))

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        """Every parameter exactly once, in the fixed checkpoint order."""
        items: list[tuple[str, Parameter]] = [
            ("binet.w_x", self.binet.w_x),
            ("binet.w_z", self.binet.w_z),
            ("binet.conv_f_w", self.binet.conv_f_w),
            ("binet.conv_f_b", self.binet.conv_f_b),
            ("binet.conv_b_w", self.binet.conv_b_w),
            ("binet.conv_b_b", self.binet.conv_b_b),
            ("binet.a", self.binet.a),
            ("binet.b", self.binet.b),
            ("binet.delta", self.binet.delta),
        ]
        for i in range(len(self.sblock.conv_w)):
            items.append((f"sblock.conv{i}_w", self.sblock.conv_w[i]))
            items.append((f"sblock.conv{i}_b", self.sblock.conv_b[i]))
            items.append((f"sblock.bn{i}_gamma", self.sblock.bn_gamma[i]))
            items.append((f"sblock.bn{i}_beta", self.sblock.bn_beta[i]))
        items += [
            ("head.conv_w", self.head.conv_w),
            ("head.conv_b", self.head.conv_b),
            ("head.lin_w", self.head.lin_w),
            ("head.lin_b", self.head.lin_b),
        ]
        return items

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        """Non-learned state (batchnorm running stats), in checkpoint order."""
        buffers: list[tuple[str, np.ndarray]] = []
        for i, st in enumerate(self.sblock.bn_state):
            buffers.append((f"sblock.bn{i}_mean", st.running_mean))
            buffers.append((f"sblock.bn{i}_var", st.running_var))
        return buffers


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> HsLiNetModel:
    """Deterministic initialization.

    Convolution/linear weights and biases are uniform(-a, a) with
    a = sqrt(1/fan_in); the direction parameters start at zero, delta at
    one, batchnorm at gamma=1/beta=0 with running mean 0 / var 1.
    """
    dtype = np.dtype(dtype)
    rng = np.random.default_rng(seed)

    def uniform(shape: tuple[int, ...], fan_in: int, name: str) -> Parameter:
        bound = np.sqrt(1.0 / fan_in)
        return Parameter(rng.uniform(-bound, bound, size=shape).astype(dtype), name=name)

    def const(value: float, shape: tuple[int, ...], name: str) -> Parameter:
        return Parameter(np.full(shape, value, dtype=dtype), name=name)

    d, k1, k2 = config.d, config.k1, config.k2
    feat = config.p * config.p
    seq_ch = config.seq_len
    binet = BiNetParams(
        w_x=uniform((d, feat), feat, "binet.w_x"),
        w_z=uniform((d, feat), feat, "binet.w_z"),
        conv_f_w=uniform((d, d, k1), d * k1, "binet.conv_f_w"),
        conv_f_b=uniform((d,), d * k1, "binet.conv_f_b"),
        conv_b_w=uniform((d, d, k1), d * k1, "binet.conv_b_w"),
        conv_b_b=uniform((d,), d * k1, "binet.conv_b_b"),
        a=const(0.0, (d,), "binet.a"),
        b=const(0.0, (d,), "binet.b"),
        delta=const(1.0, (d,), "binet.delta"),
    )

    conv_w, conv_b, bn_gamma, bn_beta, bn_state = [], [], [], [], []
    c_in = seq_ch
    for i in range(config.s_depth):
        fan = c_in * k2 * k2
        conv_w.append(uniform((config.s_channels, c_in, k2, k2), fan, f"sblock.conv{i}_w"))
        conv_b.append(uniform((config.s_channels,), fan, f"sblock.conv{i}_b"))
        bn_gamma.append(const(1.0, (config.s_channels,), f"sblock.bn{i}_gamma"))
        bn_beta.append(const(0.0, (config.s_channels,), f"sblock.bn{i}_beta"))
        bn_state.append(BatchNormState(config.s_channels, dtype=dtype))
        c_in = config.s_channels
    sblock = SBlockParams(conv_w, conv_b, bn_gamma, bn_beta, bn_state)

    width = config.fusion_width
    head_fan = config.head_channels * width
    head = HeadParams(
        conv_w=uniform((config.head_channels, 1, k1), k1, "head.conv_w"),
        conv_b=uniform((config.head_channels,), k1, "head.conv_b"),
        lin_w=uniform((config.classes, head_fan), head_fan, "head.lin_w"),
        lin_b=uniform((config.classes,), head_fan, "head.lin_b"),
    )
    return HsLiNetModel(config=config, binet=binet, sblock=sblock, head=head, dtype=dtype)


# ---------------------------------------------------------------------------
# forward passes


def fuse_inputs(hsi_patch: Tensor, lidar_patch: Tensor, modality: str) -> Tensor:
    """Channel-axis concatenation of the two patches, [p, p, CH+1].

    Single-modality runs zero-fill the other modality's channels so the
    architecture (and parameter count) is unchanged.
    """
    if modality not in MODALITIES:
        raise ValueError(f"modality must be one of {MODALITIES}, got {modality!r}")
    if hsi_patch.data.ndim != 3 or lidar_patch.data.ndim != 3 or lidar_patch.shape[2] != 1:
        raise ValueError(
            f"expected [p, p, CH] and [p, p, 1] patches, got {hsi_patch.shape} and {lidar_patch.shape}"
        )
    if hsi_patch.shape[:2] != lidar_patch.shape[:2]:
        raise ValueError(f"patch size mismatch: {hsi_patch.shape[:2]} vs {lidar_patch.shape[:2]}")
    if modality == "hsi":
        lidar_patch = Tensor(np.zeros_like(lidar_patch.data))
    elif modality == "lidar":
        hsi_patch = Tensor(np.zeros_like(hsi_patch.data))
    return ops.concat(hsi_patch, lidar_patch, axis=2)


def spectral_embed(fused: Tensor, params: BiNetParams, config: ModelConfig) -> tuple[Tensor, Tensor]:
    """Project the fused cube to two spectral sequences of width d.

    The cube [p, p, S] becomes a sequence of S steps whose per-step feature
    is the flattened p*p spatial slice; two independent linear projections
    map each step to width d. Returns (x_proj, z_proj), each [d, S].
    """
    p = config.p
    steps = ops.transpose(ops.reshape(fused, (p * p, config.seq_len)), (1, 0))  # [S, p*p]
    x_proj = ops.transpose(ops.linear(steps, params.w_x), (1, 0))
    z_proj = ops.transpose(ops.linear(steps, params.w_z), (1, 0))
    return x_proj, z_proj


def _direction_path(
    seq: Tensor,
    conv_w: Parameter,
    conv_b: Parameter,
    direction: Parameter,
    delta: Parameter,
    kind: str,
) -> Tensor:
    """conv -> activation -> tanh(. + direction*delta), averaged over steps."""
    x = ops.activation(ops.conv1d(seq, conv_w, conv_b), kind)
    mod = ops.reshape(ops.mul(direction, delta), (direction.shape[0], 1))
    return ops.mean_reduce(ops.tanh(ops.add(x, mod)), axis=1)


def binet_forward(x_proj: Tensor, z_proj: Tensor, params: BiNetParams, config: ModelConfig) -> Tensor:
    """Combined hidden state of the enabled spectral pathways, [d].

    The forward pathway convolves x_proj as-is; the reversed pathway
    convolves z_proj with its step order reversed. Each pathway adds its
    direction parameter (elementwise with delta, broadcast over steps)
    inside a tanh, then averages over the sequence; enabled pathway means
    are summed.
    """
    if not config.spectral_enabled:
        raise ValueError("both spectral pathways are disabled")
    parts: list[Tensor] = []
    if config.enable_forward:
        parts.append(
            _direction_path(x_proj, params.conv_f_w, params.conv_f_b, params.a, params.delta, config.activation)
        )
    if config.enable_reversed:
        rev = ops.reverse_axis(z_proj, axis=1)
        parts.append(
            _direction_path(rev, params.conv_b_w, params.conv_b_b, params.b, params.delta, config.activation)
        )
    return parts[0] if len(parts) == 1 else ops.add(parts[0], parts[1])


def sblock_forward(fused: Tensor, params: SBlockParams, config: ModelConfig, training: bool) -> Tensor:
    """Spatial feature vector [s_channels] from conv/batchnorm/relu stages."""
    if not config.enable_spatial:
        raise ValueError("spatial block is disabled")
    p = config.p
    x = ops.transpose(fused, (2, 0, 1))  # channels-first [S, p, p]
    for i in range(len(params.conv_w)):
        x = ops.conv2d(x, params.conv_w[i], params.conv_b[i])
        c = x.shape[0]
        x4 = ops.reshape(x, (1, c, p, p))
        x4 = ops.batchnorm2d(x4, params.bn_gamma[i], params.bn_beta[i], params.bn_state[i], training)
        x = ops.relu(ops.reshape(x4, (c, p, p)))
    return ops.mean_reduce(ops.mean_reduce(x, axis=2), axis=1)


def model_forward_patches(
    hsi_patch: Tensor, lidar_patch: Tensor, model: HsLiNetModel, training: bool = False
) -> Tensor:
    """Logits [classes] for one patch pair."""
    cfg = model.config
    if hsi_patch.shape != (cfg.p, cfg.p, cfg.ch):
        raise ValueError(f"HSI patch shape {hsi_patch.shape} does not match config {(cfg.p, cfg.p, cfg.ch)}")
    if lidar_patch.shape != (cfg.p, cfg.p, 1):
        raise ValueError(f"LiDAR patch shape {lidar_patch.shape} does not match config {(cfg.p, cfg.p, 1)}")
    if hsi_patch.dtype != model.dtype:
        hsi_patch = hsi_patch.astype(model.dtype)
    if lidar_patch.dtype != model.dtype:
        lidar_patch = lidar_patch.astype(model.dtype)

    fused = fuse_inputs(hsi_patch, lidar_patch, cfg.modality)
    feats: list[Tensor] = []
    if cfg.spectral_enabled:
        x_proj, z_proj = spectral_embed(fused, model.binet, cfg)
        feats.append(binet_forward(x_proj, z_proj, model.binet, cfg))
    if cfg.enable_spatial:
        feats.append(sblock_forward(fused, model.sblock, cfg, training))
    fusion = feats[0] if len(feats) == 1 else ops.concat(feats[0], feats[1], axis=0)

    seq = ops.reshape(fusion, (1, cfg.fusion_width))
    refined = ops.conv1d(seq, model.head.conv_w, model.head.conv_b)
    flat = ops.reshape(refined, (cfg.head_channels * cfg.fusion_width,))
    return ops.linear(flat, model.head.lin_w, model.head.lin_b)


def model_forward(sample: Sample, model: HsLiNetModel, training: bool = False) -> Tensor:
    """Logits [classes] for one sample."""
    return model_forward_patches(sample.hsi_patch, sample.lidar_patch, model, training)


def model_forward_batch(samples: list[Sample], model: HsLiNetModel, training: bool = False) -> Tensor:
    """Logits [N, classes] for a batch of samples."""
    return ops.stack_rows([model_forward(s, model, training) for s in samples])


# ---------------------------------------------------------------------------
# checkpoints


CHECKPOINT_MAGIC = b"HSLM"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated, or incompatible checkpoint file."""


def save_checkpoint(model: HsLiNetModel, path: str | Path) -> None:
    """Write the model to a binary checkpoint.

    Layout: magic "HSLM", version u32, config-JSON length u32 + bytes, then
    every parameter tensor and every batchnorm running-stat buffer in
    `named_parameters()` / `named_buffers()` order as float32 little-endian.
    """
    cfg_bytes = json.dumps(asdict(model.config), sort_keys=True).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<I", len(cfg_bytes)), cfg_bytes]
    for _, p in model.named_parameters():
        chunks.append(np.ascontiguousarray(p.value.data, dtype="<f4").tobytes())
    for _, buf in model.named_buffers():
        chunks.append(np.ascontiguousarray(buf, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> HsLiNetModel:
    """Load a float32 model from a checkpoint; round trips are byte-exact."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: version {version}, expected {CHECKPOINT_VERSION}")
    (cfg_len,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + cfg_len:
        raise CheckpointError(f"{path}: truncated config block")
    try:
        cfg_dict = json.loads(raw[12 : 12 + cfg_len].decode())
        config = ModelConfig(**cfg_dict)
    except (ValueError, TypeError) as e:
        raise CheckpointError(f"{path}: bad config block: {e}") from e

    model = init_params(config, seed=0, dtype=np.float32)
    offset = 12 + cfg_len
    for name, p in model.named_parameters():
        nbytes = p.value.data.size * 4
        chunk = raw[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated at parameter {name}")
        p.value.data = np.frombuffer(chunk, dtype="<f4").reshape(p.value.shape).copy()
        offset += nbytes
    for name, buf in model.named_buffers():
        nbytes = buf.size * 4
        chunk = raw[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated at buffer {name}")
        buf[...] = np.frombuffer(chunk, dtype="<f4").reshape(buf.shape)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return model
