"""Test-time augmentation over the 8 corner crops and cohort-level scoring."""

from __future__ import annotations

import csv
import itertools
from pathlib import Path

import numpy as np
import torch

from .errors import ShapeMismatch
from .triplanar import TriPlanarNet
from .volume import CTVolume, normalize_for_net


def eight_vertex_crops(roi: np.ndarray, crop_size: int
                       ) -> list[tuple[tuple[int, int, int], np.ndarray]]:
    """The 8 corner-anchored cubic crops of a cubic ROI.

    Offsets are every triple in {0, m}^3 with m = roi_size - crop_size,
    emitted in lexicographic (z, y, x) order.
    """
    if roi.ndim != 3 or len(set(roi.shape)) != 1:
        raise ShapeMismatch(f"ROI must be a cube, got {roi.shape}")
    m = roi.shape[0] - crop_size
    if m < 0:
        raise ShapeMismatch(f"crop {crop_size} exceeds ROI {roi.shape[0]}")
    crops = []
    for dz, dy, dx in itertools.product((0, m), repeat=3):
        crops.append(((dz, dy, dx),
                      roi[dz:dz + crop_size, dy:dy + crop_size, dx:dx + crop_size]))
    return crops


def predict_tta(model: TriPlanarNet, roi: CTVolume | np.ndarray,
                batch_crops: bool = True) -> float:
    """Risk score as the arithmetic mean of the 8 corner-crop probabilities."""
    hu = roi.voxels if isinstance(roi, CTVolume) else np.asarray(roi, dtype=np.float32)
    crop_size = model.config.input_size
    crops = eight_vertex_crops(hu, crop_size)
    hu_stack = np.stack([c for _, c in crops]).astype(np.float32)
    norm_stack = normalize_for_net(hu_stack)
    model.eval()
    with torch.inference_mode():
        if batch_crops:
            out = model(torch.from_numpy(norm_stack), torch.from_numpy(hu_stack))
            probs = out.risk.numpy()
        else:
            probs = np.array([
                float(model(torch.from_numpy(n[None]), torch.from_numpy(h[None])).risk[0])
                for n, h in zip(norm_stack, hu_stack)
            ])
    return float(probs.mean())


def predict_cohort(model: TriPlanarNet, rois: dict[str, object],
                   labels: dict[str, int] | None = None) -> list[dict]:
    """Score a set of subjects; failures become error rows and the run goes on.

    `rois` maps subject_id to a CTVolume, an ndarray, or a zero-argument
    loader callable. Rows come back sorted by subject_id.
    """
    rows = []
    for subject_id in sorted(rois):
        row = {"subject_id": subject_id}
        if labels is not None and subject_id in labels:
            row["label"] = int(labels[subject_id])
        try:
            roi = rois[subject_id]
            if callable(roi):
                roi = roi()
            row["risk_score"] = predict_tta(model, roi)
        except Exception as exc:  # per-subject fault isolation
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return rows


PREDICTION_FIELDS = ["subject_id", "risk_score", "label", "error"]


def write_predictions_csv(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=PREDICTION_FIELDS)
        w.writeheader()
        for row in rows:
            out = dict(row)
            if "risk_score" in out:
                out["risk_score"] = f"{out['risk_score']:.6f}"
            w.writerow(out)


def read_predictions_csv(path: str | Path) -> list[dict]:
    rows = []
    with open(path) as fh:
        for row in csv.DictReader(fh):
            parsed = {"subject_id": row["subject_id"]}
            if row.get("risk_score"):
                parsed["risk_score"] = float(row["risk_score"])
            if row.get("label"):
                parsed["label"] = int(row["label"])
            if row.get("error"):
                parsed["error"] = row["error"]
            rows.append(parsed)
    return rows
