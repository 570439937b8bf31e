"""Command-line pipeline: phantom data, ingestion, detection, training,
prediction, evaluation, calcium scoring, and explanation.

All inter-stage data flows through files. Exit codes: 0 ok, 1 runtime
failure, 2 usage or data error; failures print a JSON object to stderr.
Set PIPELINE_CACHE_DIR to cache per-volume detection boxes between runs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import yaml

from . import cac as cac_mod
from . import cohort as cohort_mod
from . import detector as det
from . import explain as explain_mod
from . import inference as inf
from . import io as vio
from . import phantom as ph
from . import stats
from . import training as tr
from . import triplanar as tp
from .errors import CVDRiskError, UsageError
from .volume import BoundingBox3D


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _read_yaml(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a mapping")
    return data


def _load_labels_csv(path: str) -> dict[str, int]:
    labels = {}
    try:
        with open(path) as fh:
            for row in csv.DictReader(fh):
                key = "label" if "label" in row else "screening_label"
                labels[row["subject_id"]] = int(row[key])
    except (OSError, KeyError, ValueError) as exc:
        raise UsageError(f"bad labels CSV {path}: {exc}") from exc
    return labels


def _load_survival_csv(path: str) -> dict[str, stats.SurvivalRecord]:
    out = {}
    try:
        with open(path) as fh:
            for row in csv.DictReader(fh):
                out[row["subject_id"]] = stats.SurvivalRecord(
                    float(row["time_days"]), bool(int(row["event"])))
    except (OSError, KeyError, ValueError) as exc:
        raise UsageError(f"bad survival CSV {path}: {exc}") from exc
    return out


def _roi_files(roi_dir: str) -> dict[str, Path]:
    root = Path(roi_dir)
    if not root.is_dir():
        raise UsageError(f"not a directory: {roi_dir}")
    out = {}
    for sidecar in sorted(root.glob("*.json")):
        if sidecar.name.endswith(".pt.json"):
            continue
        out[sidecar.stem] = sidecar
    if not out:
        raise UsageError(f"no volumes found in {roi_dir}")
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_phantom_gen(args) -> int:
    out = Path(args.out)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    (out / "truth").mkdir(parents=True, exist_ok=True)
    spec = ph.PhantomSpec()
    if args.shape:
        shape = tuple(int(v) for v in args.shape.split(","))
        spec = replace(spec, shape=shape)
    ann_rows = []
    label_rows = []
    survival_rows = []
    for vol, truth in ph.iter_cohort(args.n, args.pos_rate, args.seed, spec):
        sid = vol.subject_id
        vio.save_volume(vol, out / "volumes" / sid)
        for z, (x0, y0, x1, y1) in sorted(truth.slice_boxes.items()):
            ann_rows.append((sid, vol.exam_id, z, x0, y0, x1, y1))
        label_rows.append((sid, truth.label))
        survival_rows.append((sid, truth.survival.time_days, int(truth.survival.event)))
        b = truth.heart_box
        _write_json(out / "truth" / f"{sid}.json", {
            "heart_box": [b.x_min, b.y_min, b.z_min, b.x_max, b.y_max, b.z_max],
            "calc_volume_mm3": truth.calc_volume_mm3,
            "fat_volume_mm3": truth.fat_volume_mm3,
            "calc_voxels": truth.calc_voxels.tolist(),
            "label": truth.label,
            "survival": asdict(truth.survival),
        })
    det.write_annotations_csv(out / "annotations.csv", ann_rows)
    with open(out / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "label"])
        w.writerows(label_rows)
    with open(out / "survival.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "time_days", "event"])
        w.writerows(survival_rows)
    print(f"wrote {args.n} phantoms to {out}")
    return 0


def cmd_ingest(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.format == "dicom":
        vol = vio.read_dicom_series(args.input, args.subject_id, args.exam_id)
    elif args.format == "nifti":
        vol = vio.read_nifti(args.input, args.subject_id, args.exam_id)
    elif args.format == "raw":
        vol = vio.load_volume(args.input)
        if args.subject_id:
            vol = vol.with_voxels(vol.voxels, subject_id=args.subject_id)
    else:
        raise UsageError(f"unknown format {args.format}")
    name = vol.subject_id or Path(args.input).stem
    if vol.exam_id:
        name = f"{name}_{vol.exam_id}"
    vio.save_volume(vol, out / name)
    print(f"ingested {args.input} -> {out / name}")
    return 0


def _detector_samples(data_dir: Path, max_subjects: int | None,
                      neg_per_volume: int, seed: int):
    annotations = det.read_annotations_csv(data_dir / "annotations.csv")
    keys = sorted(annotations)
    if max_subjects:
        keys = keys[:max_subjects]
    rng = np.random.default_rng(seed)
    samples = []
    from .volume import normalize_for_net
    for subject_id, exam_id in keys:
        vol = vio.load_volume(data_dir / "volumes" / subject_id)
        norm = normalize_for_net(vol)
        boxes = annotations[(subject_id, exam_id)]
        for z, box in sorted(boxes.items()):
            samples.append((norm[z], box))
        empty = [z for z in range(vol.shape[0]) if z not in boxes]
        if empty and neg_per_volume > 0:
            take = rng.choice(empty, size=min(neg_per_volume, len(empty)), replace=False)
            for z in sorted(int(t) for t in take):
                samples.append((norm[z], None))
    return samples


def cmd_detector_train(args) -> int:
    data_dir = Path(args.data)
    cfg_dict = _read_yaml(args.config)
    seed = args.seed if args.seed is not None else cfg_dict.pop("seed", 0)
    max_subjects = cfg_dict.pop("max_subjects", None)
    neg_per_volume = cfg_dict.pop("neg_per_volume", 4)
    if "anchor_scales" in cfg_dict:
        cfg_dict["anchor_scales"] = tuple(cfg_dict["anchor_scales"])
    cfg = det.DetectorConfig(seed=seed, **cfg_dict)
    samples = _detector_samples(data_dir, max_subjects, neg_per_volume, seed)
    model = det.train_detector(samples, cfg)
    model.save(args.out)
    print(f"detector trained on {len(samples)} slices; "
          f"held-out mean IoU {model.val_iou:.3f}; saved to {args.out}")
    return 0


def _detection_cache_path(cache_root: str, volume_path: Path, ckpt: Path) -> Path:
    key = hashlib.sha1()
    key.update(str(volume_path.resolve()).encode())
    key.update(str(int(volume_path.stat().st_mtime)).encode())
    key.update(str(int(ckpt.stat().st_mtime)).encode())
    return Path(cache_root) / "detections" / (key.hexdigest() + ".json")


def cmd_roi_extract(args) -> int:
    data_dir = Path(args.data)
    out = Path(args.out)
    (out / "rois").mkdir(parents=True, exist_ok=True)
    model = det.DetectorModel.load(args.detector)
    roi_shape = (args.roi_size,) * 3
    cache_root = os.environ.get("PIPELINE_CACHE_DIR")
    boxes_report = {}
    for sidecar in sorted((data_dir / "volumes").glob("*.json")):
        vol = vio.load_volume(sidecar)
        sid = sidecar.stem
        cached_boxes = None
        cache_path = None
        if cache_root:
            cache_path = _detection_cache_path(cache_root, sidecar, Path(args.detector))
            if cache_path.exists():
                cached_boxes = [det.SliceBox(**b) for b in json.loads(cache_path.read_text())]
        if cached_boxes is not None:
            boxes = cached_boxes
        else:
            boxes = det.detect_slices(vol, model)
            if cache_path is not None:
                _write_json(cache_path, [asdict(b) for b in boxes])
        if boxes:
            box3d = det.aggregate_extreme_corners(boxes).padded(args.pad_fraction)
            box3d = box3d.clamped(vol.shape)
            used_fallback = False
        elif args.fallback_central:
            box3d = det.central_box(vol.shape)
            used_fallback = True
        else:
            boxes_report[sid] = {"error": "no detections"}
            continue
        from .volume import crop, resample_to_shape
        roi = resample_to_shape(crop(vol, box3d), roi_shape)
        vio.save_volume(roi, out / "rois" / sid)
        boxes_report[sid] = {
            "box": [box3d.x_min, box3d.y_min, box3d.z_min,
                    box3d.x_max, box3d.y_max, box3d.z_max],
            "fallback": used_fallback,
        }
        if used_fallback:
            print(f"warning: central fallback used for {sid}", file=sys.stderr)
    _write_json(out / "roi_boxes.json", boxes_report)
    n_fail = sum(1 for v in boxes_report.values() if "error" in v)
    print(f"extracted {len(boxes_report) - n_fail} ROIs ({n_fail} failures) to {out}")
    return 0


def _model_config_from_dict(d: dict) -> tp.TriPlanarConfig:
    cfg = tp.TriPlanarConfig(
        input_size=int(d.get("input_size", 112)),
        width=float(d.get("width", 1.0)),
        attention_enabled=bool(d.get("attention_enabled", True)),
        branch_loss_weights=tuple(d.get("branch_loss_weights", (1.0, 1.0, 1.0, 1.0))),
        activation=d.get("activation", "relu"),
    )
    return cfg


def _train_config_from_dict(d: dict, seed_override: int | None) -> tr.TrainConfig:
    s1 = d.get("stage1", {})
    s2 = d.get("stage2", {})
    seed = seed_override if seed_override is not None else int(d.get("seed", 0))
    return tr.TrainConfig(
        stage1=tr.Stage1Config(int(s1.get("iters", 10000)), int(s1.get("batch", 32)),
                               float(s1.get("lr", 1e-4))),
        stage2=tr.Stage2Config(int(s2.get("iters", 1000)), int(s2.get("batch", 16)),
                               float(s2.get("lr_attention", 1e-4)),
                               float(s2.get("lr_rest", 1e-5))),
        checkpoint_every=int(d.get("checkpoint_every", 100)),
        seed=seed,
        val_tta=bool(d.get("val_tta", False)),
    )


def _load_roi_samples(roi_dir: str, labels: dict[str, int]) -> list[tr.RoiSample]:
    samples = []
    for sid, sidecar in _roi_files(roi_dir).items():
        if sid not in labels:
            continue
        vol = vio.load_volume(sidecar)
        samples.append(tr.RoiSample(sid, vol.voxels.astype(np.float32), labels[sid]))
    if not samples:
        raise UsageError(f"no labeled ROIs found in {roi_dir}")
    return samples


def cmd_train(args) -> int:
    cfg_dict = _read_yaml(args.config)
    model_cfg = _model_config_from_dict(cfg_dict.get("model", {}))
    train_cfg = _train_config_from_dict(cfg_dict, args.seed)
    labels = _load_labels_csv(args.labels)
    samples = _load_roi_samples(args.rois, labels)

    val_fraction = float(cfg_dict.get("val_fraction", 0.15))
    rng = np.random.default_rng(train_cfg.seed)
    order = rng.permutation(len(samples))
    n_val = max(2, int(round(val_fraction * len(samples))))
    val = [samples[i] for i in order[:n_val]]
    train_set = [samples[i] for i in order[n_val:]]

    model, best, log_rows = tr.train_two_stage(
        train_set, val, model_cfg, train_cfg, stage1_only=args.stage1_only)
    tp.save_checkpoint(model, args.out, iteration=best.iteration,
                       val_auc=best.val_auc, seed=train_cfg.seed)
    log_path = args.log or (str(args.out) + ".log.csv")
    tr.write_training_log(log_path, log_rows)
    print(f"trained on {len(train_set)} ROIs (val {len(val)}); "
          f"best val AUC {best.val_auc:.4f} @ iter {best.iteration}; saved {args.out}")
    return 0


def cmd_predict(args) -> int:
    model, _ = tp.load_checkpoint(args.model)
    labels = _load_labels_csv(args.labels) if args.labels else None
    rois = {}
    for sid, sidecar in _roi_files(args.rois).items():
        rois[sid] = (lambda p: (lambda: vio.load_volume(p)))(sidecar)
    rows = inf.predict_cohort(model, rois, labels)
    inf.write_predictions_csv(args.out, rows)
    n_err = sum(1 for r in rows if "error" in r)
    print(f"scored {len(rows) - n_err} subjects ({n_err} errors) -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    rows = inf.read_predictions_csv(args.pred)
    scored = [r for r in rows if "risk_score" in r]
    if not scored:
        raise UsageError("empty predictions")
    labels = _load_labels_csv(args.labels)
    subjects = [r["subject_id"] for r in scored if r["subject_id"] in labels]
    if not subjects:
        raise UsageError("no prediction subjects found in labels CSV")
    scores = np.array([r["risk_score"] for r in scored if r["subject_id"] in labels])
    y = np.array([labels[s] for s in subjects])
    cohort = stats.ScoredCohort(scores, y)

    auc_value = stats.auc(cohort)
    res = stats.hanley_mcneil_ci(auc_value, cohort.n_pos, cohort.n_neg)
    metrics = {
        "n": len(subjects),
        "n_pos": cohort.n_pos,
        "n_neg": cohort.n_neg,
        "auc": auc_value,
        "auc_se": res.se,
        "auc_ci95": [res.ci_low, res.ci_high],
    }
    try:
        sens, thr = stats.sensitivity_at_ppv(cohort, args.target_ppv)
        metrics["sensitivity_at_ppv"] = {
            "target_ppv": args.target_ppv, "sensitivity": sens, "threshold": thr}
    except CVDRiskError as exc:
        metrics["sensitivity_at_ppv"] = {"target_ppv": args.target_ppv,
                                         "error": str(exc)}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pts = stats.roc_points(cohort)
    with open(out / "roc.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fpr", "tpr"])
        for fpr, tpr in pts:
            w.writerow([f"{fpr:.6f}", f"{tpr:.6f}"])

    if args.survival:
        surv = _load_survival_csv(args.survival)
        pairs = [(r["risk_score"], surv[r["subject_id"]])
                 for r in scored if r["subject_id"] in surv]
        if pairs:
            s_scores = np.array([p[0] for p in pairs])
            records = [p[1] for p in pairs]
            thr = float(np.median(s_scores))
            low = [r for sc, r in pairs if sc <= thr]
            high = [r for sc, r in pairs if sc > thr]
            km_metrics = {"threshold": thr}
            if low and high:
                km_low = stats.km_estimate(low)
                km_high = stats.km_estimate(high)
                km_metrics.update({
                    "low_final_survival": km_low.final_survival,
                    "high_final_survival": km_high.final_survival,
                    "logrank_p": stats.logrank_test(low, high),
                })
                with open(out / "km.csv", "w", newline="") as fh:
                    w = csv.writer(fh)
                    w.writerow(["group", "time", "survival", "at_risk"])
                    for name, curve in (("low", km_low), ("high", km_high)):
                        for t, s, n in zip(curve.event_times, curve.survival,
                                           curve.at_risk):
                            w.writerow([name, f"{t:g}", f"{s:.6f}", n])
            metrics["km"] = km_metrics

    _write_json(out / "metrics.json", metrics)
    if args.plots:
        _render_plots(out, pts)
    print(json.dumps({"auc": metrics["auc"]}))
    return 0


def _render_plots(out: Path, roc_pts) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(roc_pts[:, 0], roc_pts[:, 1])
    ax.plot([0, 1], [0, 1], "--", color="gray", linewidth=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    fig.tight_layout()
    fig.savefig(out / "roc.png", dpi=120)
    plt.close(fig)


def cmd_cac_score(args) -> int:
    if args.format == "nifti":
        vol = vio.read_nifti(args.volume)
    elif args.format == "dicom":
        vol = vio.read_dicom_series(args.volume)
    else:
        vol = vio.load_volume(args.volume)
    roi = None
    if args.roi:
        vals = [int(v) for v in args.roi.split(",")]
        if len(vals) != 6:
            raise UsageError("--roi wants x0,y0,z0,x1,y1,z1")
        roi = BoundingBox3D(*vals)
    total, lesions = cac_mod.agatston_score(vol, roi)
    payload = {
        "subject_id": vol.subject_id,
        "total_score": total,
        "labels": cac_mod.cac_positive_labels(total),
        "lesions": [
            {"z_index": l.z_index, "area_mm2": l.area_mm2,
             "peak_hu": l.peak_hu, "weight": l.density_weight}
            for l in lesions
        ],
    }
    _write_json(Path(args.out), payload)
    print(f"Agatston total {total:.1f} ({len(lesions)} lesions) -> {args.out}")
    return 0


def cmd_explain(args) -> int:
    model, _ = tp.load_checkpoint(args.model)
    vol = vio.load_volume(args.roi)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    heat = explain_mod.grad_cam(model, vol, target_class=args.target_class,
                                view=args.view)
    heat_vol = vol.with_voxels((heat * 1000).astype(np.float32),
                               spacing=vol.spacing)
    vio.save_volume(heat_vol, out / "grad_cam_x1000")
    size = model.config.input_size
    m = (vol.shape[0] - size) // 2
    hu = vol.voxels[m:m + size, m:m + size, m:m + size]
    for frac in (0.35, 0.5, 0.65):
        z = int(size * frac)
        explain_mod.overlay_png(hu[z], heat[z], out / f"grad_cam_z{z:03d}.png")
    if model.config.attention_enabled:
        maps = explain_mod.export_attention(model, vol)
        for view, payload in maps.items():
            np.save(out / f"attention_{view}.npy", payload["maps"])
            z = size // 2
            explain_mod.overlay_png(hu[z], payload["upsampled"][z],
                                    out / f"attention_{view}_mid.png")
    print(f"explanations written to {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cvdrisk",
                                description="Chest-CT cardiovascular risk pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("phantom-gen", help="generate a synthetic phantom cohort")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--pos-rate", type=float, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--shape", default="", help="nz,ny,nx override")
    g.set_defaults(func=cmd_phantom_gen)

    g = sub.add_parser("ingest", help="convert DICOM/NIfTI/raw into internal volumes")
    g.add_argument("--in", dest="input", required=True)
    g.add_argument("--format", choices=["dicom", "nifti", "raw"], required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--subject-id", default="")
    g.add_argument("--exam-id", default="")
    g.add_argument("--seed", type=int, default=0, help="unused; accepted for uniformity")
    g.set_defaults(func=cmd_ingest)

    g = sub.add_parser("detector-train", help="train the slice heart detector")
    g.add_argument("--data", required=True)
    g.add_argument("--config", default="")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=None)
    g.set_defaults(func=cmd_detector_train)

    g = sub.add_parser("roi-extract", help="extract fixed-size heart ROIs")
    g.add_argument("--data", required=True)
    g.add_argument("--detector", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--roi-size", type=int, default=128)
    g.add_argument("--pad-fraction", type=float, default=0.05)
    g.add_argument("--fallback-central", action="store_true")
    g.add_argument("--seed", type=int, default=0, help="unused; accepted for uniformity")
    g.set_defaults(func=cmd_roi_extract)

    g = sub.add_parser("train", help="two-stage risk model training")
    g.add_argument("--rois", required=True)
    g.add_argument("--labels", required=True)
    g.add_argument("--config", default="")
    g.add_argument("--out", required=True)
    g.add_argument("--log", default="")
    g.add_argument("--stage1-only", action="store_true")
    g.add_argument("--seed", type=int, default=None)
    g.set_defaults(func=cmd_train)

    g = sub.add_parser("predict", help="score ROIs with a trained model")
    g.add_argument("--rois", required=True)
    g.add_argument("--model", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--labels", default="")
    g.add_argument("--seed", type=int, default=0, help="unused; accepted for uniformity")
    g.set_defaults(func=cmd_predict)

    g = sub.add_parser("evaluate", help="clinical statistics for predictions")
    g.add_argument("--pred", required=True)
    g.add_argument("--labels", required=True)
    g.add_argument("--survival", default="")
    g.add_argument("--out", required=True)
    g.add_argument("--target-ppv", type=float, default=0.5)
    g.add_argument("--plots", action="store_true")
    g.add_argument("--seed", type=int, default=0, help="unused; accepted for uniformity")
    g.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("cac-score", help="Agatston calcium scoring")
    g.add_argument("--volume", required=True)
    g.add_argument("--format", choices=["raw", "nifti", "dicom"], default="raw")
    g.add_argument("--out", required=True)
    g.add_argument("--roi", default="", help="x0,y0,z0,x1,y1,z1")
    g.add_argument("--seed", type=int, default=0, help="unused; accepted for uniformity")
    g.set_defaults(func=cmd_cac_score)

    g = sub.add_parser("explain", help="Grad-CAM and attention visualizations")
    g.add_argument("--roi", required=True)
    g.add_argument("--model", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--view", choices=list(tp.VIEWS), default="axial")
    g.add_argument("--target-class", type=int, default=1)
    g.add_argument("--seed", type=int, default=0, help="unused; accepted for uniformity")
    g.set_defaults(func=cmd_explain)

    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(json.dumps({"error": str(exc), "type": type(exc).__name__}),
              file=sys.stderr)
        return 2
    except CVDRiskError as exc:
        print(json.dumps({"error": str(exc), "type": type(exc).__name__}),
              file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(json.dumps({"error": str(exc), "type": type(exc).__name__}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
