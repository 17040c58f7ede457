"""Mini-batch training with Adam, deterministic seeding, and the ablation grid.

Determinism contract: (seed, data, config) fixes every loss value and the
final parameter bits. Shuffling uses a fresh generator seeded from
(seed, epoch) each epoch, so run order is reproducible from the config alone.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import PatchConfig, Sample, Scene, normalize_scene, split_samples, extract_patches
from .metrics import ConfusionMatrix
from .model import (
    HsLiNetModel,
    ModelConfig,
    init_params,
    model_forward,
    model_forward_batch,
    save_checkpoint,
)
from .ops import softmax_cross_entropy
from .tensor import NumericalError, Parameter, Tape

__all__ = [
    "TrainConfig",
    "EpochStats",
    "RunRecord",
    "adam_step",
    "evaluate",
    "train",
    "AblationRow",
    "ARCH_VARIANTS",
    "run_ablation_grid",
    "run_ablation_study",
    "ablation_csv",
]


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-4
    epochs: int = 100
    seed: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_path: str | None = None
    eval_every: int = 0  # 0 = evaluate on the final epoch only

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")


@dataclass
class EpochStats:
    """One completed epoch. Test metrics are None on epochs without an
    evaluation pass; `seconds` is wall-clock and never asserted on."""

    epoch: int
    loss: float
    train_oa: float
    test_oa: float | None
    test_aa: float | None
    test_kappa: float | None
    seconds: float


@dataclass
class RunRecord:
    epochs: list[EpochStats] = field(default_factory=list)

    def append(self, stats: EpochStats) -> None:
        self.epochs.append(stats)

    @property
    def final(self) -> EpochStats | None:
        return self.epochs[-1] if self.epochs else None

    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "loss", "train_oa", "test_oa", "test_aa", "test_kappa", "seconds"])
            for e in self.epochs:
                writer.writerow(
                    [
                        e.epoch,
                        repr(e.loss),
                        repr(e.train_oa),
                        "" if e.test_oa is None else repr(e.test_oa),
                        "" if e.test_aa is None else repr(e.test_aa),
                        "" if e.test_kappa is None else repr(e.test_kappa),
                        f"{e.seconds:.3f}",
                    ]
                )


def adam_step(params: list[Parameter], t: int, cfg: TrainConfig) -> None:
    """Bias-corrected Adam update in place; gradients are zeroed afterwards.

    eps is added outside the square root. `t` is the 1-based step index.
    """
    if t < 1:
        raise ValueError(f"step index must be >= 1, got {t}")
    if not any(p._seen_backward for p in params):
        raise RuntimeError("adam_step called before any backward pass")
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for p in params:
        g = p.grad.data
        p.m.data *= cfg.beta1
        p.m.data += (1.0 - cfg.beta1) * g
        p.v.data *= cfg.beta2
        p.v.data += (1.0 - cfg.beta2) * (g * g)
        p.value.data -= cfg.lr * (p.m.data / c1) / (np.sqrt(p.v.data / c2) + cfg.eps)
        p.grad.data[...] = 0


def evaluate(model: HsLiNetModel, samples: list[Sample]) -> ConfusionMatrix:
    """Inference-mode confusion matrix over `samples`, in sample order."""
    cm = ConfusionMatrix(model.config.classes)
    for s in samples:
        logits = model_forward(s, model, training=False)
        cm.accumulate(s.label - 1, int(np.argmax(logits.data)))
    return cm


def _epoch_seed(seed: int, epoch: int) -> int:
    return (seed * 1_000_003 + epoch) % (2**63)


def train(
    model: HsLiNetModel,
    train_samples: list[Sample],
    test_samples: list[Sample],
    cfg: TrainConfig,
) -> RunRecord:
    """Train with shuffled mini-batches and cross-entropy loss.

    Evaluates on `test_samples` every `eval_every` epochs (and always on the
    final epoch); when a checkpoint path is configured, the model with the
    best test OA so far is written there. Non-finite values anywhere in the
    forward/backward pass abort with a diagnostic.
    """
    if not train_samples:
        raise ValueError("empty train set")
    record = RunRecord()
    if cfg.epochs == 0:
        return record
    params = model.parameters()
    n = len(train_samples)
    step = 0
    best_oa = -1.0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        perm = np.random.default_rng(_epoch_seed(cfg.seed, epoch)).permutation(n)
        loss_sum = 0.0
        correct = 0
        for start in range(0, n, cfg.batch_size):
            batch = [train_samples[i] for i in perm[start : start + cfg.batch_size]]
            labels = np.array([s.label - 1 for s in batch], dtype=np.int64)
            try:
                with Tape() as tape:
                    logits = model_forward_batch(batch, model, training=True)
                    loss = softmax_cross_entropy(logits, labels)
                tape.backward(loss)
                step += 1
                adam_step(params, step, cfg)
            except NumericalError as e:
                raise NumericalError(
                    f"training aborted at epoch {epoch}, step {step + 1}: {e}"
                ) from e
            loss_sum += loss.item() * len(batch)
            correct += int((logits.data.argmax(axis=1) == labels).sum())
        train_loss = loss_sum / n
        train_oa = correct / n

        test_oa = test_aa = test_kappa = None
        due = epoch == cfg.epochs or (cfg.eval_every > 0 and epoch % cfg.eval_every == 0)
        if due and test_samples:
            cm = evaluate(model, test_samples)
            test_oa, test_aa, test_kappa = cm.oa(), cm.aa(), cm.kappa()
            if cfg.checkpoint_path is not None and test_oa > best_oa:
                best_oa = test_oa
                save_checkpoint(model, cfg.checkpoint_path)
        elif due and cfg.checkpoint_path is not None:
            save_checkpoint(model, cfg.checkpoint_path)
        record.append(
            EpochStats(epoch, train_loss, train_oa, test_oa, test_aa, test_kappa, time.perf_counter() - t0)
        )
    return record


# ---------------------------------------------------------------------------
# ablation drivers

# (name, forward, reversed, spatial); all run with modality "both"
ARCH_VARIANTS: list[tuple[str, bool, bool, bool]] = [
    ("full", True, True, True),
    ("no_spatial", True, True, False),
    ("no_reversed", True, False, True),
    ("no_forward", False, True, True),
    ("spatial_only", False, False, True),
]

MODALITY_VARIANTS = ["both", "hsi", "lidar"]


@dataclass
class AblationRow:
    name: str
    forward: bool
    reversed_: bool
    spatial: bool
    modality: str
    seed: int
    oa: float
    aa: float
    kappa: float
    train_oa: float
    train_loss: float


def _train_variant(
    name: str,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_samples: list[Sample],
    test_samples: list[Sample],
) -> AblationRow:
    model = init_params(model_cfg, seed=train_cfg.seed)
    record = train(model, train_samples, test_samples, replace(train_cfg, checkpoint_path=None))
    final = record.final
    return AblationRow(
        name=name,
        forward=model_cfg.enable_forward,
        reversed_=model_cfg.enable_reversed,
        spatial=model_cfg.enable_spatial,
        modality=model_cfg.modality,
        seed=train_cfg.seed,
        oa=final.test_oa,
        aa=final.test_aa,
        kappa=final.test_kappa,
        train_oa=final.train_oa,
        train_loss=final.loss,
    )


def run_ablation_grid(
    scene: Scene,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    per_class_train: int = 8,
    per_class_test: int | None = None,
) -> list[AblationRow]:
    """Train and evaluate the five architecture variants plus the three
    modality variants (8 runs) with a shared seed; returns one row per run.
    """
    norm_scene, _ = normalize_scene(scene)
    train_idx, test_idx = split_samples(scene, per_class_train, train_cfg.seed, per_class_test)
    patch_cfg = PatchConfig(model_cfg.p, model_cfg.ch)
    train_samples = extract_patches(norm_scene, patch_cfg, train_idx)
    test_samples = extract_patches(norm_scene, patch_cfg, test_idx)

    rows: list[AblationRow] = []
    for name, fwd, rev, spa in ARCH_VARIANTS:
        cfg = replace(
            model_cfg, enable_forward=fwd, enable_reversed=rev, enable_spatial=spa, modality="both"
        )
        rows.append(_train_variant(name, cfg, train_cfg, train_samples, test_samples))
    for modality in MODALITY_VARIANTS:
        cfg = replace(
            model_cfg, enable_forward=True, enable_reversed=True, enable_spatial=True, modality=modality
        )
        rows.append(_train_variant(f"modality_{modality}", cfg, train_cfg, train_samples, test_samples))
    return rows


def run_ablation_study(
    scene: Scene,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    seeds: list[int],
    per_class_train: int = 8,
    per_class_test: int | None = None,
) -> list[AblationRow]:
    """Repeat the 8-run grid once per seed; rows carry their seed."""
    rows: list[AblationRow] = []
    for seed in seeds:
        rows.extend(
            run_ablation_grid(
                scene, model_cfg, replace(train_cfg, seed=seed), per_class_train, per_class_test
            )
        )
    return rows


def mean_oa_by_name(rows: list[AblationRow]) -> dict[str, float]:
    """Mean test OA per variant name across seeds."""
    sums: dict[str, list[float]] = {}
    for r in rows:
        sums.setdefault(r.name, []).append(r.oa)
    return {name: float(np.mean(v)) for name, v in sums.items()}


def ablation_csv(rows: list[AblationRow], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["name", "forward", "reversed", "spatial", "modality", "seed", "oa", "aa", "kappa", "train_oa", "train_loss"]
        )
        for r in rows:
            writer.writerow(
                [
                    r.name,
                    int(r.forward),
                    int(r.reversed_),
                    int(r.spatial),
                    r.modality,
                    r.seed,
                    repr(r.oa),
                    repr(r.aa),
                    repr(r.kappa),
                    repr(r.train_oa),
                    repr(r.train_loss),
                ]
            )
