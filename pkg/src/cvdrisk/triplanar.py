"""Tri-planar attention CNN for CVD risk scoring on cardiac CT volumes.

Three independent 2D branches process the axial, sagittal, and coronal slice
stacks of a cubic ROI. Each branch splits an 18-layer residual backbone into
the first 13 convolution layers (applied per slice) and the last 5 layers
(applied after an element-wise max pool over the slice dimension). An
optional attention block computes one map per slice from HU-masked
calcification and fat channels and reweights the per-slice features
residually: out = feat + map * feat. The three branch features concatenate
into a single linear fusion classifier whose softmax positive-class
probability is the risk score. Each branch also carries an auxiliary linear
classifier for direct supervision.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import AttentionDisabled, InvalidConfig, IOFailure, ShapeMismatch
from .volume import CALCIFICATION_RANGE, FAT_RANGE, NET_CLIP_HI, NET_CLIP_LO

VIEWS = ("axial", "sagittal", "coronal")


@dataclass(frozen=True)
class TriPlanarConfig:
    input_size: int = 112
    n_classes: int = 2
    width: float = 1.0
    attention_enabled: bool = True
    # (axial, sagittal, coronal, fused)
    branch_loss_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    activation: str = "relu"   # "softplus" is a test-only smooth substitute

    def __post_init__(self):
        if self.input_size % 8 != 0 or self.input_size < 16:
            raise InvalidConfig(f"input_size must be a multiple of 8 and >= 16, got {self.input_size}")
        if self.n_classes != 2:
            raise InvalidConfig("binary risk output only")
        if not 0.0 < self.width <= 1.0:
            raise InvalidConfig(f"width must be in (0, 1], got {self.width}")
        w = self.branch_loss_weights
        if len(w) != 4 or any(x < 0 for x in w) or w[3] <= 0:
            raise InvalidConfig(f"need 4 nonnegative loss weights with fused > 0, got {w}")
        if self.activation not in ("relu", "softplus"):
            raise InvalidConfig(f"unknown activation {self.activation!r}")

    @property
    def base_channels(self) -> int:
        return max(1, int(round(64 * self.width)))

    @property
    def feature_dim(self) -> int:
        return 8 * self.base_channels


def _act(config: TriPlanarConfig) -> nn.Module:
    return nn.ReLU(inplace=True) if config.activation == "relu" else nn.Softplus()


class _BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride, config):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.act = _act(config)
        self.down = None
        if stride != 1 or cin != cout:
            self.down = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        identity = self.down(x) if self.down is not None else x
        out = self.act(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.act(out + identity)


def _stage(cin, cout, stride, config):
    return nn.Sequential(_BasicBlock(cin, cout, stride, config),
                         _BasicBlock(cout, cout, 1, config))


class AttentionNet(nn.Module):
    """Per-slice attention from HU-masked calcification/fat channels.

    Four 3x3 convolutions (the narrow head of an 11-layer plain CNN, scaled
    by the width multiplier) with two interleaved poolings, a 1x1 projection,
    and a logistic squashing to [0, 1].
    """

    def __init__(self, config: TriPlanarConfig):
        super().__init__()
        w = config.width
        c = [max(1, int(round(k * w))) for k in (64, 128, 256, 256)]
        self.body = nn.Sequential(
            nn.Conv2d(2, c[0], 3, 1, 1), _act(config),
            nn.MaxPool2d(2, 2),
            nn.Conv2d(c[0], c[1], 3, 1, 1), _act(config),
            nn.MaxPool2d(2, 2),
            nn.Conv2d(c[1], c[2], 3, 1, 1), _act(config),
            nn.Conv2d(c[2], c[3], 3, 1, 1), _act(config),
        )
        self.project = nn.Conv2d(c[3], 1, 1)

    def forward(self, masked: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.project(self.body(masked)))


def attention_channels(hu_slices: torch.Tensor) -> torch.Tensor:
    """(N, 1, H, W) raw-HU slices -> (N, 2, H, W) masked calc/fat channels.

    Values are zero outside the mask and scaled HU (clamped, /1024) inside,
    so a slice without mask voxels yields all-zero channels.
    """
    hu = hu_slices.clamp(NET_CLIP_LO, NET_CLIP_HI)
    calc = (hu_slices > CALCIFICATION_RANGE.lo).to(hu.dtype)
    fat = ((hu_slices >= FAT_RANGE.lo) & (hu_slices <= FAT_RANGE.hi)).to(hu.dtype)
    scaled = hu / 1024.0
    return torch.cat([scaled * calc, scaled * fat], dim=1)


def attention_reweight(features: torch.Tensor, attention_map: torch.Tensor) -> torch.Tensor:
    """Residual reweighting: original plus map-weighted original.

    The map is bilinearly resized to the feature grid if needed.
    """
    if attention_map.shape[-2:] != features.shape[-2:]:
        attention_map = F.interpolate(attention_map, size=features.shape[-2:],
                                      mode="bilinear", align_corners=False)
    return features + attention_map * features


@dataclass
class BranchOutput:
    feature: torch.Tensor            # (B, 8c)
    aux_logits: torch.Tensor         # (B, 2)
    attention_maps: torch.Tensor | None  # (B, S, ah, aw) in [0, 1]


class Branch(nn.Module):
    """One orthogonal-view branch: per-slice trunk, attention, slice max-pool,
    final stage, and auxiliary classifier."""

    def __init__(self, config: TriPlanarConfig):
        super().__init__()
        self.config = config
        c = config.base_channels
        self.stem = nn.Sequential(
            nn.Conv2d(3, c, 7, 2, 3, bias=False), nn.BatchNorm2d(c), _act(config),
            nn.MaxPool2d(3, 2, 1))
        self.stage1 = _stage(c, c, 1, config)
        self.stage2 = _stage(c, 2 * c, 2, config)
        self.stage3 = _stage(2 * c, 4 * c, 2, config)
        self.attention = AttentionNet(config) if config.attention_enabled else None
        self.stage4 = _stage(4 * c, 8 * c, 2, config)
        self.classifier = nn.Linear(8 * c, config.n_classes)

    def slice_trunk(self, slices: torch.Tensor) -> torch.Tensor:
        """Per-slice features before attention: (N, 1, H, W) -> (N, 4c, h, w)."""
        x = slices.expand(-1, 3, -1, -1)
        return self.stage3(self.stage2(self.stage1(self.stem(x))))

    def forward(self, slices_norm: torch.Tensor, slices_hu: torch.Tensor | None,
                attention_override: torch.Tensor | None = None,
                capture: dict | None = None) -> BranchOutput:
        if slices_norm.ndim != 4:
            raise ShapeMismatch(f"expected (B, S, H, W), got {tuple(slices_norm.shape)}")
        b, s, h, w = slices_norm.shape
        feats = self.slice_trunk(slices_norm.reshape(b * s, 1, h, w))

        att = None
        if attention_override is not None:
            att = attention_override.reshape(b * s, 1, *attention_override.shape[-2:])
        elif self.attention is not None:
            if slices_hu is None:
                raise ShapeMismatch("attention-enabled branch needs raw HU slices")
            att = self.attention(attention_channels(slices_hu.reshape(b * s, 1, h, w)))
        if att is not None:
            feats = attention_reweight(feats, att)

        if capture is not None:
            capture["post_l13"] = feats.view(b, s, *feats.shape[1:])

        pooled = feats.view(b, s, *feats.shape[1:]).amax(dim=1)
        out = self.stage4(pooled)
        feature = out.mean(dim=(2, 3))
        aux = self.classifier(feature)
        maps = att.view(b, s, *att.shape[-2:]) if att is not None else None
        return BranchOutput(feature=feature, aux_logits=aux, attention_maps=maps)


@dataclass
class TriPlanarOutput:
    fused_logits: torch.Tensor                 # (B, 2)
    branches: dict[str, BranchOutput]

    @property
    def risk(self) -> torch.Tensor:
        """Softmax probability of the positive class, shape (B,)."""
        return torch.softmax(self.fused_logits, dim=1)[:, 1]


def _view_slices(volume: torch.Tensor, view: str) -> torch.Tensor:
    """Reorder a (B, Z, Y, X) cube so dim 1 enumerates the view's slices."""
    if view == "axial":
        return volume                      # (B, Z, Y, X)
    if view == "sagittal":
        return volume.permute(0, 3, 1, 2)  # (B, X, Z, Y)
    if view == "coronal":
        return volume.permute(0, 2, 1, 3)  # (B, Y, Z, X)
    raise ValueError(f"unknown view {view!r}")


class TriPlanarNet(nn.Module):
    """Three non-sharing branches plus a linear fusion classifier."""

    def __init__(self, config: TriPlanarConfig):
        super().__init__()
        self.config = config
        self.branches = nn.ModuleDict({v: Branch(config) for v in VIEWS})
        self.fusion = nn.Linear(3 * config.feature_dim, config.n_classes)

    def forward(self, vol_norm: torch.Tensor, vol_hu: torch.Tensor | None = None,
                attention_override: torch.Tensor | None = None,
                capture: dict | None = None) -> TriPlanarOutput:
        """Score a batch of cubes.

        vol_norm: (B, S, S, S) normalized intensities; vol_hu: raw HU of the
        same shape (required when attention is enabled).
        """
        s = self.config.input_size
        if vol_norm.ndim != 4 or vol_norm.shape[1:] != (s, s, s):
            raise ShapeMismatch(
                f"expected (B, {s}, {s}, {s}), got {tuple(vol_norm.shape)}")
        if vol_hu is not None and vol_hu.shape != vol_norm.shape:
            raise ShapeMismatch("normalized and HU volumes must share shape")
        outputs = {}
        for view in VIEWS:
            sl_norm = _view_slices(vol_norm, view)
            sl_hu = _view_slices(vol_hu, view) if vol_hu is not None else None
            cap = {} if capture is not None else None
            outputs[view] = self.branches[view](
                sl_norm, sl_hu, attention_override=attention_override, capture=cap)
            if capture is not None:
                capture[view] = cap["post_l13"]
        feature = torch.cat([outputs[v].feature for v in VIEWS], dim=1)
        return TriPlanarOutput(self.fusion(feature), outputs)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def conv_parameter_count(self, backbone_only: bool = True) -> int:
        total = 0
        for name, module in self.named_modules():
            if isinstance(module, nn.Conv2d):
                if backbone_only and ".attention." in name:
                    continue
                total += sum(p.numel() for p in module.parameters())
        return total

    def architecture_summary(self) -> dict:
        return {
            "config": asdict(self.config),
            "parameters": self.parameter_count(),
            "conv_parameters": self.conv_parameter_count(backbone_only=False),
            "feature_dim_per_branch": self.config.feature_dim,
            "views": list(VIEWS),
        }


def build_model(config: TriPlanarConfig, seed: int = 0) -> TriPlanarNet:
    """Deterministically initialized model (identical bits for equal seeds)."""
    torch.manual_seed(seed)
    return TriPlanarNet(config)


def compute_loss(output: TriPlanarOutput, labels: torch.Tensor,
                 weights: tuple[float, float, float, float] | None = None) -> torch.Tensor:
    """Weighted sum of fused and per-branch auxiliary cross-entropies."""
    if weights is None:
        weights = output.branches[VIEWS[0]].aux_logits.new_ones(4)
    w_ax, w_sg, w_co, w_f = [float(x) for x in weights]
    loss = w_f * F.cross_entropy(output.fused_logits, labels)
    for w, view in zip((w_ax, w_sg, w_co), VIEWS):
        if w > 0:
            loss = loss + w * F.cross_entropy(output.branches[view].aux_logits, labels)
    return loss


def branch_attention_maps(output: TriPlanarOutput) -> dict[str, torch.Tensor]:
    maps = {}
    for view in VIEWS:
        m = output.branches[view].attention_maps
        if m is None:
            raise AttentionDisabled("model was built without attention")
        maps[view] = m
    return maps


def risk_score(model: TriPlanarNet, roi) -> float:
    """Risk for one cardiac ROI volume; delegates to the 8-crop TTA average."""
    from .inference import predict_tta  # local import to avoid a cycle
    return predict_tta(model, roi)


# ---------------------------------------------------------------------------
# checkpoints: parameter blob + JSON descriptor
# ---------------------------------------------------------------------------

def save_checkpoint(model: TriPlanarNet, path: str | Path, iteration: int = 0,
                    val_auc: float | None = None, seed: int = 0) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    descriptor = {
        "format_version": 1,
        "kind": "triplanar_risk_model",
        "config": asdict(model.config),
        "iteration": iteration,
        "val_auc": val_auc,
        "seed": seed,
    }
    Path(str(path) + ".json").write_text(json.dumps(descriptor, indent=1, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[TriPlanarNet, dict]:
    path = Path(path)
    desc_path = Path(str(path) + ".json")
    if not path.exists() or not desc_path.exists():
        raise IOFailure(f"missing model checkpoint at {path}")
    desc = json.loads(desc_path.read_text())
    cfg = desc["config"]
    cfg["branch_loss_weights"] = tuple(cfg["branch_loss_weights"])
    model = TriPlanarNet(TriPlanarConfig(**cfg))
    model.load_state_dict(torch.load(path, weights_only=True))
    model.eval()
    return model, desc
