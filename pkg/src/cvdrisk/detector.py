"""Slice-wise heart detection and 3D box aggregation for cardiac ROI extraction.

The detector is a compact one-stage anchor design: a small strided CNN
produces a single feature level on which 3 square anchor scales are scored
with a focal loss and regressed to the slice's cardiac box. Per slice, only
the top-confidence box above threshold survives. Slice boxes aggregate into a
3D region via the extreme corners over all detections, which is padded,
cropped, and resampled into the fixed-size heart ROI.

Box conventions: `SliceBox` and `BoundingBox3D` store inclusive integer voxel
indices. Internally the network regresses continuous half-open boxes; the
conversion adds one to the inclusive maxima.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import EmptyDataset, IOFailure, NoDetections, NoPositiveSamples
from .volume import BoundingBox3D, CTVolume, crop, normalize_for_net, resample_to_shape


@dataclass(frozen=True)
class SliceBox:
    """One detected cardiac box on an axial slice (inclusive voxel indices)."""

    z_index: int
    x_min: int
    y_min: int
    x_max: int
    y_max: int
    confidence: float = 1.0

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate slice box: {self}")
        if self.z_index < 0:
            raise ValueError(f"negative z_index: {self.z_index}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence outside [0, 1]: {self.confidence}")


def aggregate_extreme_corners(boxes: list[SliceBox]) -> BoundingBox3D:
    """3D box spanned by the extreme corners of all slice detections."""
    if not boxes:
        raise NoDetections("no slice boxes to aggregate")
    return BoundingBox3D(
        x_min=min(b.x_min for b in boxes),
        y_min=min(b.y_min for b in boxes),
        z_min=min(b.z_index for b in boxes),
        x_max=max(b.x_max for b in boxes),
        y_max=max(b.y_max for b in boxes),
        z_max=max(b.z_index for b in boxes),
    )


def box_iou_2d(a: tuple[int, int, int, int], b: tuple[int, int, int, int]) -> float:
    """IoU of two inclusive integer boxes (x_min, y_min, x_max, y_max)."""
    ix = max(0, min(a[2], b[2]) - max(a[0], b[0]) + 1)
    iy = max(0, min(a[3], b[3]) - max(a[1], b[1]) + 1)
    inter = ix * iy
    area_a = (a[2] - a[0] + 1) * (a[3] - a[1] + 1)
    area_b = (b[2] - b[0] + 1) * (b[3] - b[1] + 1)
    return inter / (area_a + area_b - inter)


# ---------------------------------------------------------------------------
# detector network
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DetectorConfig:
    anchor_scales: tuple[float, ...] = (0.3, 0.5, 0.7)  # fraction of min(H, W)
    stride: int = 8
    score_threshold: float = 0.5
    iou_pos: float = 0.5
    iou_neg: float = 0.4
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    iters: int = 600
    batch_size: int = 16
    lr: float = 1e-3
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.score_threshold < 1.0:
            raise ValueError(f"score threshold must be in (0,1): {self.score_threshold}")


class _DetectorNet(nn.Module):
    def __init__(self, n_anchors: int):
        super().__init__()
        def block(cin, cout, stride):
            return nn.Sequential(
                nn.Conv2d(cin, cout, 3, stride, 1, bias=False),
                nn.BatchNorm2d(cout), nn.ReLU(inplace=True))
        self.features = nn.Sequential(
            block(1, 16, 1), block(16, 32, 2), block(32, 32, 1),
            block(32, 64, 2), block(64, 64, 2))
        self.cls_head = nn.Conv2d(64, n_anchors, 3, 1, 1)
        self.box_head = nn.Conv2d(64, 4 * n_anchors, 3, 1, 1)
        # bias classification toward background at init
        nn.init.constant_(self.cls_head.bias, -math.log((1 - 0.01) / 0.01))

    def forward(self, x):
        f = self.features(x)
        return self.cls_head(f), self.box_head(f)


def _anchor_grid(h: int, w: int, cfg: DetectorConfig) -> torch.Tensor:
    """(N, 4) anchors as continuous (x0, y0, x1, y1) for an h x w image."""
    fh = (h + cfg.stride - 1) // cfg.stride
    fw = (w + cfg.stride - 1) // cfg.stride
    ys = (torch.arange(fh, dtype=torch.float32) + 0.5) * cfg.stride
    xs = (torch.arange(fw, dtype=torch.float32) + 0.5) * cfg.stride
    cy, cx = torch.meshgrid(ys, xs, indexing="ij")
    sizes = torch.tensor(cfg.anchor_scales, dtype=torch.float32) * min(h, w)
    boxes = []
    for s in sizes:
        half = s / 2.0
        boxes.append(torch.stack(
            [cx - half, cy - half, cx + half, cy + half], dim=-1))
    # layout matches head output reshape: (fh, fw, A, 4) -> (N, 4)
    return torch.stack(boxes, dim=2).reshape(-1, 4)


def _iou_matrix(anchors: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    ix = (torch.minimum(anchors[:, 2], gt[2]) - torch.maximum(anchors[:, 0], gt[0])).clamp(min=0)
    iy = (torch.minimum(anchors[:, 3], gt[3]) - torch.maximum(anchors[:, 1], gt[1])).clamp(min=0)
    inter = ix * iy
    area_a = (anchors[:, 2] - anchors[:, 0]) * (anchors[:, 3] - anchors[:, 1])
    area_g = (gt[2] - gt[0]) * (gt[3] - gt[1])
    return inter / (area_a + area_g - inter)


def _encode(anchors: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = (anchors[:, 0] + anchors[:, 2]) / 2
    acy = (anchors[:, 1] + anchors[:, 3]) / 2
    gw, gh = gt[2] - gt[0], gt[3] - gt[1]
    gcx, gcy = (gt[0] + gt[2]) / 2, (gt[1] + gt[3]) / 2
    return torch.stack([
        (gcx - acx) / aw, (gcy - acy) / ah,
        torch.log(gw / aw).expand_as(aw), torch.log(gh / ah).expand_as(ah),
    ], dim=1)


def _decode(anchors: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = (anchors[:, 0] + anchors[:, 2]) / 2
    acy = (anchors[:, 1] + anchors[:, 3]) / 2
    cx = acx + deltas[:, 0] * aw
    cy = acy + deltas[:, 1] * ah
    w = aw * torch.exp(deltas[:, 2].clamp(max=4.0))
    h = ah * torch.exp(deltas[:, 3].clamp(max=4.0))
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=1)


def _focal_loss(logits, targets, alpha, gamma):
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    pt = torch.where(targets > 0.5, p, 1 - p)
    weight = torch.where(targets > 0.5, alpha, 1 - alpha)
    return weight * (1 - pt).pow(gamma) * ce


class DetectorModel:
    """Trained slice detector: immutable after training, shareable."""

    def __init__(self, net: _DetectorNet, config: DetectorConfig,
                 val_iou: float = float("nan")):
        self.net = net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.config = config
        self.val_iou = val_iou

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.net.state_dict(), path)
        descriptor = {
            "format_version": 1,
            "kind": "slice_detector",
            "config": asdict(self.config),
            "val_iou": None if math.isnan(self.val_iou) else self.val_iou,
        }
        Path(str(path) + ".json").write_text(json.dumps(descriptor, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "DetectorModel":
        path = Path(path)
        desc_path = Path(str(path) + ".json")
        if not path.exists() or not desc_path.exists():
            raise IOFailure(f"missing detector checkpoint at {path}")
        desc = json.loads(desc_path.read_text())
        cfg_dict = desc["config"]
        cfg_dict["anchor_scales"] = tuple(cfg_dict["anchor_scales"])
        cfg = DetectorConfig(**cfg_dict)
        net = _DetectorNet(len(cfg.anchor_scales))
        net.load_state_dict(torch.load(path, weights_only=True))
        return cls(net, cfg, desc.get("val_iou") or float("nan"))


TrainSample = tuple[np.ndarray, tuple[int, int, int, int] | None]


def _to_continuous(box: tuple[int, int, int, int]) -> torch.Tensor:
    x0, y0, x1, y1 = box
    return torch.tensor([x0, y0, x1 + 1, y1 + 1], dtype=torch.float32)


def train_detector(samples: list[TrainSample],
                   config: DetectorConfig | None = None) -> DetectorModel:
    """Train the slice detector on (image, optional inclusive box) pairs.

    All images must share one (H, W). A held-out fraction of the positive
    slices is used to report the model's mean IoU (`DetectorModel.val_iou`).
    """
    cfg = config or DetectorConfig()
    if not samples:
        raise EmptyDataset("no training slices")
    if not any(b is not None for _, b in samples):
        raise NoPositiveSamples("detector training needs at least one box")
    shapes = {img.shape for img, _ in samples}
    if len(shapes) != 1:
        raise EmptyDataset(f"all slices must share one shape, got {shapes}")
    h, w = next(iter(shapes))

    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    net = _DetectorNet(len(cfg.anchor_scales))
    anchors = _anchor_grid(h, w, cfg)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)

    pos_idx = [i for i, (_, b) in enumerate(samples) if b is not None]
    n_val = int(len(pos_idx) * cfg.val_fraction)
    val_idx = set(rng.permutation(pos_idx)[:n_val].tolist())
    train_idx = [i for i in range(len(samples)) if i not in val_idx]

    # precompute per-sample anchor assignments
    assignments = {}
    for i in train_idx:
        _, box = samples[i]
        if box is None:
            assignments[i] = None
            continue
        gt = _to_continuous(box)
        ious = _iou_matrix(anchors, gt)
        pos = ious >= cfg.iou_pos
        pos[int(ious.argmax())] = True  # best anchor is always positive
        ignore = (~pos) & (ious >= cfg.iou_neg)
        assignments[i] = (pos, ignore, _encode(anchors, gt))

    net.train()
    losses = []
    for it in range(cfg.iters):
        batch_ids = rng.choice(len(train_idx), size=min(cfg.batch_size, len(train_idx)),
                               replace=len(train_idx) < cfg.batch_size)
        imgs = torch.from_numpy(np.stack(
            [samples[train_idx[j]][0] for j in batch_ids])[:, None]).float()
        cls_out, box_out = net(imgs)
        n_anchors = anchors.shape[0]
        cls_out = cls_out.permute(0, 2, 3, 1).reshape(len(batch_ids), n_anchors)
        box_out = box_out.permute(0, 2, 3, 1).reshape(len(batch_ids), n_anchors, 4)

        loss = imgs.new_zeros(())
        total_pos = 0
        for row, j in enumerate(batch_ids):
            asg = assignments[train_idx[j]]
            if asg is None:
                targets = torch.zeros(n_anchors)
                loss = loss + _focal_loss(cls_out[row], targets,
                                          cfg.focal_alpha, cfg.focal_gamma).sum()
                continue
            pos, ignore, deltas = asg
            targets = pos.float()
            keep = ~ignore
            loss = loss + _focal_loss(cls_out[row][keep], targets[keep],
                                      cfg.focal_alpha, cfg.focal_gamma).sum()
            loss = loss + F.smooth_l1_loss(box_out[row][pos], deltas[pos],
                                           reduction="sum")
            total_pos += int(pos.sum())
        loss = loss / max(1, total_pos)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))

    model = DetectorModel(net, cfg)
    model.train_losses = losses
    if val_idx:
        ious = []
        for i in sorted(val_idx):
            img, box = samples[i]
            pred = _detect_single(model, img)
            ious.append(0.0 if pred is None else box_iou_2d(pred[:4], box))
        model.val_iou = float(np.mean(ious))
    return model


def _detect_batch(model: DetectorModel, images: np.ndarray):
    """Best box per image: list of (x0, y0, x1, y1, score) or None."""
    cfg = model.config
    h, w = images.shape[-2:]
    anchors = _anchor_grid(h, w, cfg)
    with torch.inference_mode():
        x = torch.from_numpy(images[:, None]).float()
        cls_out, box_out = model.net(x)
        n = anchors.shape[0]
        scores = torch.sigmoid(cls_out.permute(0, 2, 3, 1).reshape(len(images), n))
        deltas = box_out.permute(0, 2, 3, 1).reshape(len(images), n, 4)
        best = scores.argmax(dim=1)
        results = []
        for row in range(len(images)):
            k = int(best[row])
            score = float(scores[row, k])
            if score < cfg.score_threshold:
                results.append(None)
                continue
            box = _decode(anchors[k:k + 1], deltas[row, k:k + 1])[0]
            x0 = int(round(float(box[0]))); y0 = int(round(float(box[1])))
            x1 = int(round(float(box[2]))) - 1; y1 = int(round(float(box[3]))) - 1
            x0, y0 = max(0, x0), max(0, y0)
            x1, y1 = min(w - 1, x1), min(h - 1, y1)
            if x1 - x0 < 1 or y1 - y0 < 1:
                results.append(None)
                continue
            results.append((x0, y0, x1, y1, score))
        return results


def _detect_single(model: DetectorModel, image: np.ndarray):
    return _detect_batch(model, image[None])[0]


def detect_slices(vol: CTVolume, model: DetectorModel,
                  chunk: int = 32) -> list[SliceBox]:
    """Run the detector on every axial slice; keep the best box per slice."""
    norm = normalize_for_net(vol)
    out = []
    for z0 in range(0, vol.shape[0], chunk):
        batch = norm[z0:z0 + chunk]
        for dz, res in enumerate(_detect_batch(model, batch)):
            if res is None:
                continue
            x0, y0, x1, y1, score = res
            out.append(SliceBox(z0 + dz, x0, y0, x1, y1, score))
    return out


# ---------------------------------------------------------------------------
# ROI extraction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HeartROI:
    volume: CTVolume
    source_box: BoundingBox3D
    used_fallback: bool = False


def central_box(shape: tuple[int, int, int], fraction: float = 0.6) -> BoundingBox3D:
    """Axis-centered box covering the middle `fraction` of each axis."""
    nz, ny, nx = shape
    def rng1(n):
        half = max(1, int(round(n * fraction / 2)))
        mid = n // 2
        return max(0, mid - half), min(n - 1, mid + half)
    z0, z1 = rng1(nz); y0, y1 = rng1(ny); x0, x1 = rng1(nx)
    return BoundingBox3D(x0, y0, z0, x1, y1, z1)


def extract_heart_roi(vol: CTVolume, model: DetectorModel,
                      roi_shape: tuple[int, int, int] = (128, 128, 128),
                      pad_fraction: float = 0.05,
                      fallback_central: bool = False) -> HeartROI:
    """Detect per slice, aggregate corners, pad, crop, and resample."""
    boxes = detect_slices(vol, model)
    used_fallback = False
    if boxes:
        box = aggregate_extreme_corners(boxes).padded(pad_fraction).clamped(vol.shape)
    elif fallback_central:
        box = central_box(vol.shape)
        used_fallback = True
    else:
        raise NoDetections(f"no heart detections in {vol.subject_id}/{vol.exam_id}")
    roi = resample_to_shape(crop(vol, box), roi_shape)
    return HeartROI(roi, box, used_fallback)


# ---------------------------------------------------------------------------
# slice annotation CSV (subject_id, exam_id, z_index, x_min, y_min, x_max, y_max)
# ---------------------------------------------------------------------------

def write_annotations_csv(path: str | Path,
                          rows: list[tuple[str, str, int, int, int, int, int]]) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "exam_id", "z_index", "x_min", "y_min", "x_max", "y_max"])
        w.writerows(rows)


def read_annotations_csv(path: str | Path) -> dict[tuple[str, str], dict[int, tuple[int, int, int, int]]]:
    import csv
    out: dict[tuple[str, str], dict[int, tuple[int, int, int, int]]] = {}
    with open(path) as fh:
        for row in csv.DictReader(fh):
            key = (row["subject_id"], row["exam_id"])
            out.setdefault(key, {})[int(row["z_index"])] = (
                int(row["x_min"]), int(row["y_min"]),
                int(row["x_max"]), int(row["y_max"]))
    return out
