"""Grad-CAM heatmaps, attention-map export, and PNG overlays.

Grad-CAM targets the post-attention per-slice feature maps (the last
convolutional features that still carry slice-level spatial meaning before
the slice max-pool): per-slice channel weights are the spatially averaged
gradients of the chosen class logit, the map is the rectified weighted sum,
min-max normalized over the whole stack and upsampled to slice resolution.
"""

from __future__ import annotations

import warnings
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import AttentionDisabled, IOFailure, ShapeMismatch
from .triplanar import VIEWS, TriPlanarNet
from .volume import CTVolume, normalize_for_net


def _prepare_input(model: TriPlanarNet, roi: CTVolume | np.ndarray):
    hu = roi.voxels if isinstance(roi, CTVolume) else np.asarray(roi, dtype=np.float32)
    if hu.ndim != 3 or len(set(hu.shape)) != 1:
        raise ShapeMismatch(f"ROI must be a cube, got {hu.shape}")
    size = model.config.input_size
    if hu.shape[0] < size:
        raise ShapeMismatch(f"ROI {hu.shape[0]} smaller than model input {size}")
    m = (hu.shape[0] - size) // 2
    hu = hu[m:m + size, m:m + size, m:m + size].astype(np.float32)
    return torch.from_numpy(normalize_for_net(hu)[None]), torch.from_numpy(hu[None])


def _reorient(maps: torch.Tensor, view: str) -> torch.Tensor:
    """Stack of per-slice maps -> (z, y, x) volume for the given view."""
    if view == "axial":      # maps: (Z, Y, X)
        return maps
    if view == "sagittal":   # maps: (X, Z, Y)
        return maps.permute(1, 2, 0)
    if view == "coronal":    # maps: (Y, Z, X)
        return maps.permute(1, 0, 2)
    raise ValueError(f"unknown view {view!r}")


def grad_cam(model: TriPlanarNet, roi: CTVolume | np.ndarray,
             target_class: int = 1, view: str = "axial") -> np.ndarray:
    """Class-evidence heatmap in [0, 1], shaped (s, s, s) in (z, y, x) order."""
    if view not in VIEWS:
        raise ValueError(f"view must be one of {VIEWS}, got {view!r}")
    norm, hu = _prepare_input(model, roi)
    model.eval()
    capture: dict = {}
    norm.requires_grad_(False)
    out = model(norm, hu, capture=capture)
    feats = capture[view]                     # (1, S, C, h, w)
    logit = out.fused_logits[0, target_class]
    grads = torch.autograd.grad(logit, feats, retain_graph=False,
                                allow_unused=True)[0]
    if grads is None or not torch.isfinite(grads).all() or grads.abs().max() == 0:
        warnings.warn("all-zero gradients; returning an all-zero map")
        size = model.config.input_size
        return np.zeros((size, size, size), dtype=np.float32)
    weights = grads.mean(dim=(-2, -1), keepdim=True)          # (1, S, C, 1, 1)
    cam = torch.relu((weights * feats).sum(dim=2))[0]          # (S, h, w)
    size = model.config.input_size
    cam = F.interpolate(cam[:, None], size=(size, size), mode="bilinear",
                        align_corners=False)[:, 0]
    # min-max normalize over the whole stack so the peak is exactly 1
    lo, hi = cam.min(), cam.max()
    if hi > lo:
        cam = (cam - lo) / (hi - lo)
    elif hi > 0:
        cam = torch.ones_like(cam)
    return _reorient(cam, view).detach().numpy().astype(np.float32)


def export_attention(model: TriPlanarNet, roi: CTVolume | np.ndarray
                     ) -> dict[str, dict[str, np.ndarray]]:
    """Per-view per-slice attention maps at feature resolution plus upsampled.

    Returns {view: {"maps": (S, ah, aw), "upsampled": (S, s, s)}}.
    """
    if not model.config.attention_enabled:
        raise AttentionDisabled("model was built without attention blocks")
    norm, hu = _prepare_input(model, roi)
    model.eval()
    size = model.config.input_size
    with torch.inference_mode():
        out = model(norm, hu)
    exported = {}
    for view in VIEWS:
        maps = out.branches[view].attention_maps[0]            # (S, ah, aw)
        up = F.interpolate(maps[:, None], size=(size, size), mode="bilinear",
                           align_corners=False)[:, 0]
        exported[view] = {"maps": maps.numpy().astype(np.float32),
                          "upsampled": up.numpy().astype(np.float32)}
    return exported


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

# compact blue->red colormap; rows are (r, g, b) at equally spaced stops
_HEAT_STOPS = np.array([
    [0.0, 0.0, 0.5], [0.0, 0.3, 1.0], [0.0, 0.9, 0.9],
    [0.6, 1.0, 0.3], [1.0, 0.8, 0.0], [1.0, 0.2, 0.0],
], dtype=np.float32)


def _heat_rgb(h: np.ndarray) -> np.ndarray:
    """Map [0,1] heat to RGB via piecewise-linear stops."""
    x = np.clip(h, 0.0, 1.0) * (len(_HEAT_STOPS) - 1)
    lo = np.floor(x).astype(int)
    hi = np.minimum(lo + 1, len(_HEAT_STOPS) - 1)
    frac = (x - lo)[..., None]
    return _HEAT_STOPS[lo] * (1 - frac) + _HEAT_STOPS[hi] * frac


def overlay_png(slice_hu: np.ndarray, heatmap: np.ndarray, path: str | Path,
                window: tuple[float, float] = (-1024.0, 1024.0),
                alpha: float = 0.5) -> Path:
    """Write a grayscale CT slice with a color heat overlay.

    The heatmap is resized to the slice shape if needed; zero heat leaves
    the pure grayscale image. Output bytes are deterministic.
    """
    if slice_hu.ndim != 2 or heatmap.ndim != 2:
        raise ShapeMismatch("slice and heatmap must be 2D")
    lo, hi = window
    gray = np.clip((slice_hu.astype(np.float32) - lo) / (hi - lo), 0.0, 1.0)
    if heatmap.shape != slice_hu.shape:
        t = torch.from_numpy(heatmap.astype(np.float32))[None, None]
        heatmap = F.interpolate(t, size=slice_hu.shape, mode="bilinear",
                                align_corners=False)[0, 0].numpy()
    h = np.clip(heatmap.astype(np.float32), 0.0, 1.0)
    rgb = gray[..., None] * (1.0 - alpha * h[..., None]) + _heat_rgb(h) * (alpha * h[..., None])
    img = Image.fromarray((np.clip(rgb, 0, 1) * 255).round().astype(np.uint8))
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        img.save(path, format="PNG")
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc
    return path
