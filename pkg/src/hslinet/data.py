"""Scene ingestion: HSLC raster files, normalization, patching, synthesis.

A `Scene` is a co-registered triple of HSI cube [H, W, CH], LiDAR elevation
raster [H, W, 1], and label raster [H, W] (0 = unlabeled, 1..C = classes).

HSLC container format (all multi-byte values little-endian):

    bytes 0-3   magic "HSLC"
    byte  4     kind: 0 = float cube, 1 = u16 label raster
    bytes 5-8   H (u32)
    bytes 9-12  W (u32)
    bytes 13-16 C (u32; 1 for LiDAR, ignored for labels)
    payload     row-major [H][W][C] float32 (kind 0) or [H][W] u16 (kind 1)
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Tensor

__all__ = [
    "HslcError",
    "Scene",
    "PatchConfig",
    "Sample",
    "NormStats",
    "write_hslc",
    "read_hslc",
    "save_scene",
    "load_scene",
    "load_scene_dir",
    "compute_norm_stats",
    "apply_norm_stats",
    "normalize_scene",
    "labeled_indices",
    "extract_patches",
    "synth_scene",
    "split_samples",
]

HSLC_MAGIC = b"HSLC"
KIND_FLOAT = 0
KIND_LABELS = 1

SCENE_FILES = {"hsi": "hsi.hslc", "lidar": "lidar.hslc", "labels": "labels.hslc"}


class HslcError(ValueError):
    """Malformed or inconsistent HSLC input."""


# ---------------------------------------------------------------------------
# container format


def write_hslc(path: str | Path, array: np.ndarray, kind: int) -> None:
    """Write a raster to an HSLC file.

    kind 0 expects [H, W, C] float data; kind 1 expects [H, W] labels that
    fit in u16.
    """
    path = Path(path)
    if kind == KIND_FLOAT:
        if array.ndim != 3:
            raise HslcError(f"float cube must be [H, W, C], got shape {array.shape}")
        h, w, c = array.shape
        payload = np.ascontiguousarray(array, dtype="<f4").tobytes()
    elif kind == KIND_LABELS:
        if array.ndim != 2:
            raise HslcError(f"label raster must be [H, W], got shape {array.shape}")
        if array.min() < 0 or array.max() > np.iinfo(np.uint16).max:
            raise HslcError("labels must fit in u16")
        h, w = array.shape
        c = 1
        payload = np.ascontiguousarray(array, dtype="<u2").tobytes()
    else:
        raise HslcError(f"unknown HSLC kind {kind}")
    header = HSLC_MAGIC + struct.pack("<BIII", kind, h, w, c)
    path.write_bytes(header + payload)


def read_hslc(path: str | Path) -> tuple[int, np.ndarray]:
    """Read an HSLC file; returns (kind, array)."""
    raw = Path(path).read_bytes()
    if len(raw) < 17:
        raise HslcError(f"{path}: truncated header")
    if raw[:4] != HSLC_MAGIC:
        raise HslcError(f"{path}: bad magic {raw[:4]!r}")
    kind, h, w, c = struct.unpack("<BIII", raw[4:17])
    if h < 1 or w < 1 or (kind == KIND_FLOAT and c < 1):
        raise HslcError(f"{path}: non-positive dimensions {h}x{w}x{c}")
    payload = raw[17:]
    if kind == KIND_FLOAT:
        expect = h * w * c * 4
        if len(payload) != expect:
            raise HslcError(f"{path}: payload is {len(payload)} bytes, expected {expect}")
        return kind, np.frombuffer(payload, dtype="<f4").reshape(h, w, c).copy()
    if kind == KIND_LABELS:
        expect = h * w * 2
        if len(payload) != expect:
            raise HslcError(f"{path}: payload is {len(payload)} bytes, expected {expect}")
        return kind, np.frombuffer(payload, dtype="<u2").reshape(h, w).copy()
    raise HslcError(f"{path}: unknown kind {kind}")


# ---------------------------------------------------------------------------
# scene


@dataclass
class Scene:
    """Co-registered HSI cube, LiDAR raster, and label raster."""

    hsi: np.ndarray  # [H, W, CH] float32
    lidar: np.ndarray  # [H, W, 1] float32
    labels: np.ndarray  # [H, W] uint16, 0 = unlabeled

    def __post_init__(self):
        if self.hsi.ndim != 3 or self.hsi.shape[2] < 1:
            raise HslcError(f"HSI cube must be [H, W, CH], got shape {self.hsi.shape}")
        if self.lidar.ndim != 3 or self.lidar.shape[2] != 1:
            raise HslcError(f"LiDAR raster must be [H, W, 1], got shape {self.lidar.shape}")
        if self.labels.ndim != 2:
            raise HslcError(f"label raster must be [H, W], got shape {self.labels.shape}")
        hw = self.hsi.shape[:2]
        if self.lidar.shape[:2] != hw or self.labels.shape != hw:
            raise HslcError(
                "dimension mismatch between rasters: "
                f"hsi {self.hsi.shape[:2]}, lidar {self.lidar.shape[:2]}, labels {self.labels.shape}"
            )

    @property
    def height(self) -> int:
        return self.hsi.shape[0]

    @property
    def width(self) -> int:
        return self.hsi.shape[1]

    @property
    def bands(self) -> int:
        return self.hsi.shape[2]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max())


def save_scene(scene: Scene, directory: str | Path) -> None:
    """Write hsi.hslc / lidar.hslc / labels.hslc into `directory`."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_hslc(d / SCENE_FILES["hsi"], scene.hsi, KIND_FLOAT)
    write_hslc(d / SCENE_FILES["lidar"], scene.lidar, KIND_FLOAT)
    write_hslc(d / SCENE_FILES["labels"], scene.labels, KIND_LABELS)


def load_scene(hsi_path: str | Path, lidar_path: str | Path, labels_path: str | Path) -> Scene:
    """Load and cross-validate the three rasters of a scene."""
    kind, hsi = read_hslc(hsi_path)
    if kind != KIND_FLOAT:
        raise HslcError(f"{hsi_path}: expected a float cube")
    kind, lidar = read_hslc(lidar_path)
    if kind != KIND_FLOAT:
        raise HslcError(f"{lidar_path}: expected a float cube")
    if lidar.shape[2] != 1:
        raise HslcError(f"{lidar_path}: LiDAR must have a single channel, got {lidar.shape[2]}")
    kind, labels = read_hslc(labels_path)
    if kind != KIND_LABELS:
        raise HslcError(f"{labels_path}: expected a label raster")
    return Scene(hsi=hsi, lidar=lidar, labels=labels)


def load_scene_dir(directory: str | Path) -> Scene:
    d = Path(directory)
    return load_scene(d / SCENE_FILES["hsi"], d / SCENE_FILES["lidar"], d / SCENE_FILES["labels"])


# ---------------------------------------------------------------------------
# normalization


@dataclass
class NormStats:
    """Per-channel z-score statistics: HSI bands first, LiDAR channel last.

    `scale` is 1 for degenerate (zero-variance) channels, which are then
    centered only. Stored at float64 so reapplication is bit-exact.
    """

    mean: np.ndarray  # [CH + 1] float64
    scale: np.ndarray  # [CH + 1] float64

    def to_json(self) -> str:
        return json.dumps({"mean": self.mean.tolist(), "scale": self.scale.tolist()})

    @staticmethod
    def from_json(text: str) -> "NormStats":
        obj = json.loads(text)
        return NormStats(
            mean=np.asarray(obj["mean"], dtype=np.float64),
            scale=np.asarray(obj["scale"], dtype=np.float64),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @staticmethod
    def load(path: str | Path) -> "NormStats":
        return NormStats.from_json(Path(path).read_text())


_VAR_FLOOR = 1e-24


def compute_norm_stats(scene: Scene) -> NormStats:
    """Per-band mean/std over all pixels of the (training) scene."""
    if scene.hsi.size == 0:
        raise HslcError("empty scene")
    ch = scene.bands
    mean = np.empty(ch + 1, dtype=np.float64)
    scale = np.empty(ch + 1, dtype=np.float64)
    flat = scene.hsi.reshape(-1, ch).astype(np.float64)
    mean[:ch] = flat.mean(axis=0)
    var = flat.var(axis=0)
    scale[:ch] = np.where(var > _VAR_FLOOR, np.sqrt(var), 1.0)
    lid = scene.lidar.reshape(-1).astype(np.float64)
    mean[ch] = lid.mean()
    lvar = lid.var()
    scale[ch] = math.sqrt(lvar) if lvar > _VAR_FLOOR else 1.0
    return NormStats(mean=mean, scale=scale)


def apply_norm_stats(scene: Scene, stats: NormStats) -> Scene:
    """Apply saved z-score statistics; deterministic and reusable on test data."""
    ch = scene.bands
    if stats.mean.shape != (ch + 1,):
        raise HslcError(f"norm stats expect {stats.mean.shape[0] - 1} bands, scene has {ch}")
    hsi = ((scene.hsi.astype(np.float64) - stats.mean[:ch]) / stats.scale[:ch]).astype(np.float32)
    lidar = ((scene.lidar.astype(np.float64) - stats.mean[ch]) / stats.scale[ch]).astype(np.float32)
    return Scene(hsi=hsi, lidar=lidar, labels=scene.labels)


def normalize_scene(scene: Scene) -> tuple[Scene, NormStats]:
    """Compute z-score statistics from `scene` and apply them to it."""
    stats = compute_norm_stats(scene)
    return apply_norm_stats(scene, stats), stats


# ---------------------------------------------------------------------------
# patch extraction


@dataclass
class PatchConfig:
    """Patch geometry: odd side length `p` and expected band count `ch`."""

    p: int
    ch: int

    def __post_init__(self):
        if self.p < 1 or self.p % 2 == 0:
            raise ValueError(f"patch size must be odd and >= 1, got {self.p}")
        if self.ch < 1:
            raise ValueError(f"band count must be >= 1, got {self.ch}")


@dataclass
class Sample:
    """One classification unit: the patches around a labeled pixel."""

    hsi_patch: Tensor  # [p, p, CH]
    lidar_patch: Tensor  # [p, p, 1]
    label: int  # 1..C
    center: tuple[int, int]


def labeled_indices(scene: Scene) -> np.ndarray:
    """Flat row-major indices of every labeled pixel."""
    return np.flatnonzero(scene.labels.ravel() > 0)


def _mirror_pad(arr: np.ndarray, r: int) -> np.ndarray:
    if r == 0:
        return arr
    if arr.shape[0] <= r or arr.shape[1] <= r:
        raise ValueError(f"scene {arr.shape[:2]} too small to mirror-pad by {r}")
    return np.pad(arr, ((r, r), (r, r), (0, 0)), mode="reflect")


def _padded_rasters(scene: Scene, p: int) -> tuple[np.ndarray, np.ndarray]:
    r = p // 2
    return _mirror_pad(scene.hsi, r), _mirror_pad(scene.lidar, r)


def _patch_at(
    hsi_pad: np.ndarray, lidar_pad: np.ndarray, row: int, col: int, p: int
) -> tuple[Tensor, Tensor]:
    hp = np.ascontiguousarray(hsi_pad[row : row + p, col : col + p, :])
    lp = np.ascontiguousarray(lidar_pad[row : row + p, col : col + p, :])
    return Tensor(hp), Tensor(lp)


def extract_patches(scene: Scene, cfg: PatchConfig, indices) -> list[Sample]:
    """One mirror-padded patch pair per labeled pixel index, in index order."""
    if cfg.ch != scene.bands:
        raise ValueError(f"patch config expects {cfg.ch} bands, scene has {scene.bands}")
    hsi_pad, lidar_pad = _padded_rasters(scene, cfg.p)
    w = scene.width
    flat_labels = scene.labels.ravel()
    samples: list[Sample] = []
    for idx in np.asarray(indices, dtype=np.int64):
        label = int(flat_labels[idx])
        if label == 0:
            row, col = divmod(int(idx), w)
            raise ValueError(f"pixel ({row}, {col}) is unlabeled")
        row, col = divmod(int(idx), w)
        hp, lp = _patch_at(hsi_pad, lidar_pad, row, col, cfg.p)
        samples.append(Sample(hsi_patch=hp, lidar_patch=lp, label=label, center=(row, col)))
    return samples


# ---------------------------------------------------------------------------
# synthetic scenes


def class_signatures(classes: int, bands: int) -> np.ndarray:
    """Smooth Gaussian-bump spectral signature per class, [classes, bands].

    Bump center, amplitude, width, and a constant baseline all vary by
    class, so signatures differ in shape rather than by translation alone
    (translated copies of one bump are nearly indistinguishable to
    position-averaged sequence features).
    """
    k = np.arange(classes, dtype=np.float64)
    b = np.arange(bands, dtype=np.float64)
    centers = (k + 0.5) * bands / classes
    base_width = max(1.0, bands / (2.0 * classes))
    widths = base_width * (1.0 + 0.5 * (k % 3))
    amps = 0.75 + 0.5 * (k % 2)
    bases = 0.15 * (k % 4)
    bumps = np.exp(-0.5 * ((b[None, :] - centers[:, None]) / widths[:, None]) ** 2)
    return bases[:, None] + amps[:, None] * bumps


# class-to-class elevation step (meters) and smooth-terrain component count
_ELEV_STEP = 0.5
_TERRAIN_WAVES = 4


def synth_scene(
    classes: int,
    height: int,
    width: int,
    bands: int,
    noise: float,
    seed: int,
) -> Scene:
    """Deterministic block-structured synthetic scene.

    Class layout is a grid of contiguous blocks so spatial context carries
    signal. Each class has a Gaussian-bump spectral signature and a distinct
    mean elevation; the LiDAR raster additionally carries a smooth random
    terrain field whose amplitude exceeds the class elevation gaps, so
    elevation alone is informative but ambiguous. Pixel noise N(0, noise^2)
    is added to every HSI band and to the LiDAR channel.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if bands < 2:
        raise ValueError(f"need at least 2 bands, got {bands}")
    if noise < 0:
        raise ValueError(f"noise must be non-negative, got {noise}")
    grid = math.ceil(math.sqrt(classes))
    if grid > height or grid > width:
        raise ValueError(f"{classes} classes need a {grid}x{grid} block grid; scene is {height}x{width}")
    rng = np.random.default_rng(seed)

    row_edges = np.linspace(0, height, grid + 1).astype(int)
    col_edges = np.linspace(0, width, grid + 1).astype(int)
    labels = np.zeros((height, width), dtype=np.uint16)
    for bi in range(grid):
        for bj in range(grid):
            cls = (bi * grid + bj) % classes + 1
            labels[row_edges[bi] : row_edges[bi + 1], col_edges[bj] : col_edges[bj + 1]] = cls

    # terrain field: a few low-frequency sinusoids, drawn before the noise so
    # the landscape is identical across noise levels at the same seed
    rr, cc = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    terrain = np.zeros((height, width), dtype=np.float64)
    for _ in range(_TERRAIN_WAVES):
        amp = rng.uniform(0.5, 1.0)
        fr = rng.integers(1, 4)
        fc = rng.integers(1, 4)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        terrain += amp * np.sin(2.0 * math.pi * (fr * rr / height + fc * cc / width) + phase)

    sig = class_signatures(classes, bands)
    hsi = sig[labels - 1] + rng.normal(0.0, noise, size=(height, width, bands))
    elev = _ELEV_STEP * labels.astype(np.float64)
    lidar = elev + terrain + rng.normal(0.0, noise, size=(height, width))
    return Scene(
        hsi=hsi.astype(np.float32),
        lidar=lidar[:, :, None].astype(np.float32),
        labels=labels,
    )


# ---------------------------------------------------------------------------
# splits


def split_samples(
    scene: Scene,
    per_class_train: int,
    seed: int,
    per_class_test: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint train/test pixel-index split, `per_class_train` per class.

    Every class must have more labeled pixels than `per_class_train". The
    test side takes all remaining labeled pixels unless `per_class_test`
    caps it. Deterministic given the seed; both index arrays are sorted.
    """
    if per_class_train < 1:
        raise ValueError(f"per_class_train must be >= 1, got {per_class_train}")
    flat = scene.labels.ravel()
    classes = scene.num_classes
    if classes < 1:
        raise ValueError("scene has no labeled pixels")
    rng = np.random.default_rng(seed)
    train: list[np.ndarray] = []
    test: list[np.ndarray] = []
    for cls in range(1, classes + 1):
        idx = np.flatnonzero(flat == cls)
        if len(idx) <= per_class_train:
            raise ValueError(
                f"class {cls} has {len(idx)} labeled pixels, needs more than {per_class_train}"
            )
        shuffled = idx[rng.permutation(len(idx))]
        train.append(shuffled[:per_class_train])
        rest = shuffled[per_class_train:]
        if per_class_test is not None:
            rest = rest[:per_class_test]
        test.append(rest)
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))
