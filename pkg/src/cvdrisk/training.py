"""Two-stage training with checkpointing and validation-AUC model selection.

Stage 1 trains the model without attention blocks; stage 2 rebuilds the model
with freshly initialized attention, restores the stage-1 backbone, and tunes
everything with a higher learning rate on the attention parameters. No
learning-rate decay is applied in either stage. Checkpoints are taken on a
fixed iteration cadence and selection maximizes validation AUC (earliest
iteration wins ties). Validation scores use a single center crop by default;
`val_tta` switches to the full 8-crop average.
"""

from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import EmptyDataset, EmptyList, InvalidConfig, ShapeMismatch
from .inference import predict_tta
from .stats import ScoredCohort, auc
from .triplanar import TriPlanarConfig, TriPlanarNet, build_model, compute_loss
from .volume import normalize_for_net


@dataclass(frozen=True)
class Stage1Config:
    iters: int = 10000
    batch_size: int = 32
    lr: float = 1e-4


@dataclass(frozen=True)
class Stage2Config:
    iters: int = 1000
    batch_size: int = 16
    lr_attention: float = 1e-4
    lr_rest: float = 1e-5


@dataclass(frozen=True)
class TrainConfig:
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    checkpoint_every: int = 100
    adam_betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    val_tta: bool = False

    def __post_init__(self):
        for name, stage in (("stage1", self.stage1), ("stage2", self.stage2)):
            if stage.iters < 0 or stage.batch_size <= 0:
                raise InvalidConfig(f"{name}: bad iters/batch")
            if stage.iters % self.checkpoint_every != 0:
                raise InvalidConfig(
                    f"{name}.iters={stage.iters} must be a multiple of "
                    f"checkpoint_every={self.checkpoint_every}")
        lrs = (self.stage1.lr, self.stage2.lr_attention, self.stage2.lr_rest)
        if any(lr <= 0 for lr in lrs):
            raise InvalidConfig("learning rates must be positive")
        if self.checkpoint_every <= 0:
            raise InvalidConfig("checkpoint_every must be positive")


@dataclass
class Checkpoint:
    state_dict: dict
    iteration: int
    val_auc: float


@dataclass(frozen=True)
class RoiSample:
    subject_id: str
    voxels: np.ndarray   # raw HU cube, roi_size^3
    label: int


def augment_train_crop(roi: np.ndarray, rng: np.random.Generator,
                       crop_size: int) -> np.ndarray:
    """Random corner-offset cubic crop; offsets uniform over {0..margin}."""
    if roi.ndim != 3 or len(set(roi.shape)) != 1:
        raise ShapeMismatch(f"ROI must be a cube, got {roi.shape}")
    margin = roi.shape[0] - crop_size
    if margin < 0:
        raise ShapeMismatch(f"crop {crop_size} exceeds ROI {roi.shape[0]}")
    dz, dy, dx = draw_crop_offsets(rng, margin)
    return roi[dz:dz + crop_size, dy:dy + crop_size, dx:dx + crop_size]


def draw_crop_offsets(rng: np.random.Generator, margin: int) -> tuple[int, int, int]:
    off = rng.integers(0, margin + 1, size=3)
    return int(off[0]), int(off[1]), int(off[2])


def _center_crop(roi: np.ndarray, crop_size: int) -> np.ndarray:
    m = (roi.shape[0] - crop_size) // 2
    return roi[m:m + crop_size, m:m + crop_size, m:m + crop_size]


def _check_dataset(samples: list[RoiSample], need_both: bool, what: str):
    if not samples:
        raise EmptyDataset(f"{what} set is empty")
    labels = {s.label for s in samples}
    if need_both and labels != {0, 1}:
        raise EmptyDataset(f"{what} set needs both classes, got labels {labels}")


def _balanced_batch(samples, pos_idx, neg_idx, batch_size, rng):
    half = batch_size // 2
    ids = np.concatenate([
        rng.choice(pos_idx, size=half, replace=True),
        rng.choice(neg_idx, size=batch_size - half, replace=True),
    ])
    rng.shuffle(ids)
    return [samples[int(i)] for i in ids]


def _batch_tensors(batch: list[RoiSample], rng, crop_size):
    hu = np.stack([augment_train_crop(s.voxels, rng, crop_size) for s in batch])
    hu = hu.astype(np.float32)
    labels = torch.tensor([s.label for s in batch], dtype=torch.long)
    return torch.from_numpy(normalize_for_net(hu)), torch.from_numpy(hu), labels


def evaluate_val_auc(model: TriPlanarNet, val: list[RoiSample],
                     val_tta: bool = False) -> float:
    """Validation AUC with a center crop (or the 8-crop TTA average)."""
    crop_size = model.config.input_size
    model.eval()
    scores, labels = [], []
    with torch.inference_mode():
        for s in val:
            if val_tta:
                scores.append(predict_tta(model, s.voxels))
            else:
                hu = _center_crop(s.voxels.astype(np.float32), crop_size)[None]
                out = model(torch.from_numpy(normalize_for_net(hu)),
                            torch.from_numpy(hu))
                scores.append(float(out.risk[0]))
            labels.append(s.label)
    return auc(ScoredCohort(np.array(scores), np.array(labels)))


def _run_stage(model: TriPlanarNet, optimizer, train, val, iters, batch_size,
               config: TrainConfig, rng, log_rows, stage_name) -> list[Checkpoint]:
    pos_idx = np.array([i for i, s in enumerate(train) if s.label == 1])
    neg_idx = np.array([i for i, s in enumerate(train) if s.label == 0])
    crop_size = model.config.input_size
    weights = model.config.branch_loss_weights
    checkpoints = []
    for it in range(1, iters + 1):
        model.train()
        batch = _balanced_batch(train, pos_idx, neg_idx, batch_size, rng)
        norm, hu, labels = _batch_tensors(batch, rng, crop_size)
        out = model(norm, hu if model.config.attention_enabled else None)
        loss = compute_loss(out, labels, weights)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if it % config.checkpoint_every == 0:
            val_auc = evaluate_val_auc(model, val, config.val_tta)
            checkpoints.append(Checkpoint(
                state_dict=copy.deepcopy(model.state_dict()),
                iteration=it, val_auc=val_auc))
            log_rows.append((stage_name, it, float(loss), val_auc))
        else:
            log_rows.append((stage_name, it, float(loss), None))
    return checkpoints


def train_stage1(model: TriPlanarNet, train: list[RoiSample], val: list[RoiSample],
                 config: TrainConfig, log_rows: list | None = None) -> list[Checkpoint]:
    """First stage: train the attention-free model on random
    corner-offset crops with balanced mini-batches."""
    if model.config.attention_enabled:
        raise InvalidConfig("stage 1 trains the model without attention blocks")
    _check_dataset(train, need_both=True, what="train")
    _check_dataset(val, need_both=True, what="val")
    if log_rows is None:
        log_rows = []
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.stage1.lr,
                           betas=config.adam_betas)
    return _run_stage(model, opt, train, val, config.stage1.iters,
                      config.stage1.batch_size, config, rng, log_rows, "stage1")


def select_best_checkpoint(checkpoints: list[Checkpoint]) -> Checkpoint:
    """Highest validation AUC; ties resolve to the earliest iteration."""
    if not checkpoints:
        raise EmptyList("no checkpoints to select from")
    best = checkpoints[0]
    for ckpt in checkpoints[1:]:
        if ckpt.val_auc > best.val_auc:
            best = ckpt
    return best


def attention_parameter_names(model: TriPlanarNet) -> set[str]:
    return {name for name, _ in model.named_parameters() if ".attention." in name}


def build_stage2_model(model_config: TriPlanarConfig, stage1: Checkpoint,
                       seed: int) -> TriPlanarNet:
    """Attention-enabled model: backbone from stage 1, attention fresh."""
    from dataclasses import replace
    cfg = replace(model_config, attention_enabled=True)
    model = build_model(cfg, seed=seed)  # fresh init (incl. attention)
    model.load_state_dict(stage1.state_dict, strict=False)
    return model


def train_stage2(stage1_best: Checkpoint, train: list[RoiSample],
                 val: list[RoiSample], config: TrainConfig,
                 model_config: TriPlanarConfig,
                 log_rows: list | None = None) -> tuple[Checkpoint, TriPlanarNet]:
    """Second stage: tune the whole model with per-group learning rates.

    Returns the best checkpoint and a model loaded with it. With zero
    iterations the result is the stage-1 backbone plus fresh attention.
    """
    _check_dataset(train, need_both=True, what="train")
    _check_dataset(val, need_both=True, what="val")
    if log_rows is None:
        log_rows = []
    model = build_stage2_model(model_config, stage1_best, seed=config.seed + 1)
    att_names = attention_parameter_names(model)
    att_params = [p for n, p in model.named_parameters() if n in att_names]
    rest_params = [p for n, p in model.named_parameters() if n not in att_names]
    opt = torch.optim.Adam([
        {"params": att_params, "lr": config.stage2.lr_attention},
        {"params": rest_params, "lr": config.stage2.lr_rest},
    ], betas=config.adam_betas)

    torch.manual_seed(config.seed + 2)
    rng = np.random.default_rng(config.seed + 1)
    checkpoints = _run_stage(model, opt, train, val, config.stage2.iters,
                             config.stage2.batch_size, config, rng, log_rows, "stage2")
    if not checkpoints:
        checkpoints = [Checkpoint(copy.deepcopy(model.state_dict()), 0,
                                  evaluate_val_auc(model, val, config.val_tta))]
    best = select_best_checkpoint(checkpoints)
    model.load_state_dict(best.state_dict)
    model.eval()
    return best, model


def train_two_stage(train: list[RoiSample], val: list[RoiSample],
                    model_config: TriPlanarConfig, config: TrainConfig,
                    stage1_only: bool = False):
    """Full schedule; returns (final model, final checkpoint, log rows)."""
    from dataclasses import replace
    log_rows: list = []
    stage1_model = build_model(replace(model_config, attention_enabled=False),
                               seed=config.seed)
    ckpts = train_stage1(stage1_model, train, val, config, log_rows)
    if not ckpts:
        ckpts = [Checkpoint(copy.deepcopy(stage1_model.state_dict()), 0,
                            evaluate_val_auc(stage1_model, val, config.val_tta))]
    best1 = select_best_checkpoint(ckpts)
    if stage1_only or not model_config.attention_enabled:
        stage1_model.load_state_dict(best1.state_dict)
        stage1_model.eval()
        return stage1_model, best1, log_rows
    best2, model = train_stage2(best1, train, val, config, model_config, log_rows)
    return model, best2, log_rows


def write_training_log(path: str | Path, log_rows: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "iteration", "train_loss", "val_auc"])
        for stage, it, loss, val_auc in log_rows:
            w.writerow([stage, it, f"{loss:.6f}", "" if val_auc is None else f"{val_auc:.6f}"])
