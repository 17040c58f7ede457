"""Confusion-matrix accumulation, OA/AA/Kappa, reports, and map rendering.

Internal metric values are unit fractions; reports format them as
percentages with two decimals. Classes absent from the evaluated split are
excluded from AA with a logged warning.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from pathlib import Path

import numpy as np

from .data import PatchConfig, Scene, _padded_rasters, _patch_at
from .model import HsLiNetModel, model_forward_patches

__all__ = [
    "ConfusionMatrix",
    "PALETTE",
    "format_percent",
    "report_dict",
    "report_json",
    "report_csv",
    "write_ppm",
    "labels_to_rgb",
    "render_map",
    "render_truth_map",
]

log = logging.getLogger(__name__)


class ConfusionMatrix:
    """C x C integer counts; rows are ground truth, columns predictions.

    Classes are 0-based here; scene labels 1..C map to rows/columns 0..C-1.
    """

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise ValueError(f"need at least 1 class, got {num_classes}")
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, truth: int, pred: int) -> None:
        c = self.num_classes
        if not (0 <= truth < c and 0 <= pred < c):
            raise ValueError(f"class pair ({truth}, {pred}) out of range [0, {c})")
        self.counts[truth, pred] += 1

    def merge(self, other: "ConfusionMatrix") -> None:
        """Elementwise sum, for combining parallel evaluation shards."""
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different sizes")
        self.counts += other.counts

    def oa(self) -> float:
        """Overall accuracy: trace over total."""
        total = self.total
        if total == 0:
            raise ValueError("empty confusion matrix")
        return float(np.trace(self.counts)) / total

    def per_class(self) -> np.ndarray:
        """Per-class recall; NaN for classes with no ground-truth samples."""
        if self.total == 0:
            raise ValueError("empty confusion matrix")
        rows = self.counts.sum(axis=1)
        diag = np.diag(self.counts).astype(np.float64)
        out = np.full(self.num_classes, np.nan)
        nz = rows > 0
        out[nz] = diag[nz] / rows[nz]
        return out

    def aa(self) -> float:
        """Average accuracy: mean per-class recall over represented classes."""
        pc = self.per_class()
        present = ~np.isnan(pc)
        if not present.all():
            missing = [i + 1 for i in np.flatnonzero(~present)]
            log.warning("classes %s have no test samples; excluded from AA", missing)
        return float(pc[present].mean())

    def kappa(self) -> float:
        """Cohen's kappa, computed with exact integer marginals.

        kappa = (total*trace - sum(row_i*col_i)) / (total^2 - sum(row_i*col_i));
        when chance agreement is total (denominator 0), kappa is 1 for perfect
        agreement and 0 otherwise.
        """
        total = self.total
        if total == 0:
            raise ValueError("empty confusion matrix")
        trace = int(np.trace(self.counts))
        rows = self.counts.sum(axis=1)
        cols = self.counts.sum(axis=0)
        chance = int(np.dot(rows, cols))
        den = total * total - chance
        if den == 0:
            return 1.0 if trace == total else 0.0
        return (total * trace - chance) / den


def format_percent(x: float) -> str:
    return f"{100.0 * x:.2f}"


def report_dict(cm: ConfusionMatrix, class_names: list[str] | None = None) -> dict:
    """OA/AA/Kappa and per-class accuracy, as fractions plus formatted percents."""
    if class_names is None:
        class_names = [f"C{i + 1}" for i in range(cm.num_classes)]
    if len(class_names) != cm.num_classes:
        raise ValueError(f"{len(class_names)} class names for {cm.num_classes} classes")
    pc = cm.per_class()
    per_class = []
    for i, name in enumerate(class_names):
        value = None if np.isnan(pc[i]) else float(pc[i])
        per_class.append(
            {"class": name, "accuracy": value, "percent": None if value is None else format_percent(value)}
        )
    oa, aa, kappa = cm.oa(), cm.aa(), cm.kappa()
    return {
        "per_class": per_class,
        "oa": oa,
        "aa": aa,
        "kappa": kappa,
        "oa_percent": format_percent(oa),
        "aa_percent": format_percent(aa),
        "kappa_percent": format_percent(kappa),
        "total": cm.total,
    }


def report_json(cm: ConfusionMatrix, class_names: list[str] | None = None) -> str:
    return json.dumps(report_dict(cm, class_names), indent=2)


def report_csv(cm: ConfusionMatrix, class_names: list[str] | None = None) -> str:
    rep = report_dict(cm, class_names)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["class", "accuracy_percent"])
    for row in rep["per_class"]:
        writer.writerow([row["class"], row["percent"] if row["percent"] is not None else ""])
    writer.writerow(["OA", rep["oa_percent"]])
    writer.writerow(["AA", rep["aa_percent"]])
    writer.writerow(["Kappa", rep["kappa_percent"]])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# classification maps

# Fixed 16-color map palette; index 0 (unlabeled) is black, indices 1..15 are
# the class colors used for rendered classification maps.
PALETTE: list[tuple[int, int, int]] = [
    (0, 0, 0),
    (0, 205, 0),
    (127, 255, 0),
    (46, 139, 87),
    (0, 139, 0),
    (160, 82, 45),
    (0, 255, 255),
    (255, 255, 255),
    (216, 191, 216),
    (255, 0, 0),
    (139, 0, 0),
    (205, 205, 0),
    (255, 255, 0),
    (238, 154, 0),
    (85, 26, 139),
    (255, 127, 80),
]


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    """Write an [H, W, 3] uint8 image as binary P6 PPM."""
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"expected [H, W, 3] uint8, got {rgb.shape} {rgb.dtype}")
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(rgb).tobytes())


def labels_to_rgb(labels: np.ndarray, palette: list[tuple[int, int, int]] = PALETTE) -> np.ndarray:
    """Map a label raster to RGB; class indices wrap around the palette's
    15 class colors (index 0 is reserved for unlabeled)."""
    lut = np.zeros((int(labels.max()) + 1, 3), dtype=np.uint8)
    for k in range(lut.shape[0]):
        lut[k] = palette[0] if k == 0 else palette[(k - 1) % (len(palette) - 1) + 1]
    return lut[labels]


def render_truth_map(scene: Scene, palette: list[tuple[int, int, int]], out_path: str | Path) -> None:
    """Render the ground-truth label raster to a P6 PPM."""
    write_ppm(out_path, labels_to_rgb(scene.labels, palette))


def predict_labels(scene: Scene, model: HsLiNetModel, all_pixels: bool = False) -> np.ndarray:
    """Classify scene pixels; returns an [H, W] label raster (0 where skipped).

    The scene must carry the same normalization the model was trained with.
    """
    cfg = model.config
    if scene.bands != cfg.ch:
        raise ValueError(f"scene has {scene.bands} bands, model expects {cfg.ch}")
    hsi_pad, lidar_pad = _padded_rasters(scene, cfg.p)
    out = np.zeros_like(scene.labels)
    for row in range(scene.height):
        for col in range(scene.width):
            if not all_pixels and scene.labels[row, col] == 0:
                continue
            hp, lp = _patch_at(hsi_pad, lidar_pad, row, col, cfg.p)
            logits = model_forward_patches(hp, lp, model, training=False)
            out[row, col] = int(np.argmax(logits.data)) + 1
    return out


def render_map(
    scene: Scene,
    model: HsLiNetModel,
    palette: list[tuple[int, int, int]],
    out_path: str | Path,
    all_pixels: bool = False,
) -> None:
    """Classify the scene and write the classification map as a P6 PPM."""
    pred = predict_labels(scene, model, all_pixels=all_pixels)
    write_ppm(out_path, labels_to_rgb(pred, palette))
