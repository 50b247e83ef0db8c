"""Command-line interface: synth | train | track | calibrate | eval.

Exit codes: 0 ok, 2 usage/config errors, 3 I/O or data failures, 4
infeasible model config, 5 calibration failure. Every seeded command is
reproducible: rerunning with the same seed produces byte-identical data
artifacts (timing columns excepted, since they measure the wall clock).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import classical, featext, gaze, report, synth, unet
from .errors import (
    DegenerateGeometry,
    InfeasibleInput,
    InsufficientData,
    OcutrackError,
)
from .imagekit import GrayImage, load_pgm, save_mask_pgm, save_pgm
from .synth import SceneDistribution

TRACE_HEADER = ("frame_index,pupil_x,pupil_y,pupil_a,pupil_b,pupil_angle,"
                "cr_x,cr_y,theta_h_deg,theta_v_deg,valid,latency_ms")


class UsageError(Exception):
    """Bad arguments or config; maps to exit code 2."""


# --- configuration ---

@dataclass(frozen=True)
class UNetSettings:
    depth: int = 2
    base_channels: int = 8
    input_size: tuple[int, int] = (108, 108)
    lr: float = 0.12
    momentum: float = 0.9
    epochs: int = 20
    holdout_fraction: float = 0.15
    prob_threshold: float = 0.5


@dataclass(frozen=True)
class FeatSettings:
    cr_area_min: float = 2.0
    cr_area_max: float = 200.0
    confidence_threshold: float = 0.1


@dataclass(frozen=True)
class ClassicalSettings:
    n_rays: int = 36
    max_radius: float = 40.0
    gradient_threshold: float = 0.5
    max_iterations: int = 5
    convergence_eps: float = 0.5
    cr_threshold: float = 0.9
    radii: tuple[float, ...] = (6.0, 8.0, 10.0, 12.0, 14.0, 16.0)


@dataclass(frozen=True)
class SynthSettings:
    pupil_count: int = 245
    cr_count: int = 325
    gaze_deg: float = 30.0


@dataclass(frozen=True)
class TrackSettings:
    max_latency_ms: float = 250.0


@dataclass(frozen=True)
class PathSettings:
    models: str | None = None
    dataset: str | None = None
    frames: str | None = None
    outputs: str | None = None
    calibration: str | None = None


@dataclass(frozen=True)
class RunConfig:
    unet: UNetSettings = field(default_factory=UNetSettings)
    featext: FeatSettings = field(default_factory=FeatSettings)
    classical: ClassicalSettings = field(default_factory=ClassicalSettings)
    synth: SynthSettings = field(default_factory=SynthSettings)
    track: TrackSettings = field(default_factory=TrackSettings)
    paths: PathSettings = field(default_factory=PathSettings)


_RANGES = {
    "unet.depth": (1, 8),
    "unet.base_channels": (1, 256),
    "unet.lr": (1e-8, 10.0),
    "unet.momentum": (0.0, 0.999),
    "unet.epochs": (1, 100000),
    "unet.holdout_fraction": (0.0, 0.95),
    "unet.prob_threshold": (0.0, 1.0),
    "featext.cr_area_min": (0.0, 1e9),
    "featext.cr_area_max": (0.0, 1e9),
    "featext.confidence_threshold": (0.0, 1.0),
    "classical.n_rays": (8, 4096),
    "classical.max_radius": (1.0, 1e6),
    "classical.gradient_threshold": (0.0, 1.0),
    "classical.max_iterations": (1, 1000),
    "classical.convergence_eps": (0.0, 1e6),
    "classical.cr_threshold": (0.0, 1.0),
    "synth.pupil_count": (1, 10 ** 7),
    "synth.cr_count": (1, 10 ** 7),
    "synth.gaze_deg": (0.0, 89.0),
    "track.max_latency_ms": (1e-3, 1e9),
}


def _build_section(cls, doc, where: str):
    if not isinstance(doc, dict):
        raise UsageError(f"config section {where!r} must be an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in doc.items():
        if key not in known:
            raise UsageError(f"unknown config key {where}.{key}")
        if isinstance(value, list):
            value = tuple(value)
        lo_hi = _RANGES.get(f"{where}.{key}")
        if lo_hi is not None and isinstance(value, (int, float)):
            if not lo_hi[0] <= value <= lo_hi[1]:
                raise UsageError(
                    f"config {where}.{key}={value} outside [{lo_hi[0]}, {lo_hi[1]}]")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise UsageError(f"bad config section {where}: {exc}") from None


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path}: invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError("config root must be an object")
    sections = {
        "unet": UNetSettings, "featext": FeatSettings, "classical": ClassicalSettings,
        "synth": SynthSettings, "track": TrackSettings, "paths": PathSettings,
    }
    kwargs = {}
    for key, value in doc.items():
        if key not in sections:
            raise UsageError(f"unknown config key {key}")
        kwargs[key] = _build_section(sections[key], value, key)
    return RunConfig(**kwargs)


def _unet_config(cfg: RunConfig) -> unet.UNetConfig:
    return unet.UNetConfig(depth=cfg.unet.depth, base_channels=cfg.unet.base_channels,
                           input_size=tuple(cfg.unet.input_size))


def _starburst_config(cfg: RunConfig) -> classical.StarburstConfig:
    c = cfg.classical
    return classical.StarburstConfig(
        n_rays=c.n_rays, max_radius=c.max_radius,
        gradient_threshold=c.gradient_threshold,
        max_iterations=c.max_iterations, convergence_eps=c.convergence_eps)


# --- subcommands ---

def cmd_synth(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    seed = args.seed if args.seed is not None else 12345
    dist = SceneDistribution(image_size=tuple(cfg.unet.input_size),
                             gaze_deg=cfg.synth.gaze_deg)
    for name, count, sub_seed in (("pupil", cfg.synth.pupil_count, seed),
                                  ("cr", cfg.synth.cr_count, seed + 1)):
        samples = synth.make_dataset(count, dist, sub_seed)
        manifest = synth.write_dataset(samples, out / name, dist, sub_seed)
        print(f"{name}: {count} samples -> {manifest}")
    return 0


def _load_pairs(dataset_dir: Path, target: str):
    records = synth.read_dataset(dataset_dir)
    if not records:
        raise OcutrackError(f"no samples under {dataset_dir}")
    mask_of = (lambda r: r.pupil_mask) if target == "pupil" else (lambda r: r.cr_mask)
    return records, [(r.image, mask_of(r)) for r in records]


def _report_rows(epochs, start: int):
    for i, e in enumerate(epochs):
        yield (start + i, f"{e.mean_loss:.6f}", f"{e.pixel_accuracy:.6f}",
               f"{e.iou:.6f}", f"{e.seconds:.3f}")


def cmd_train(args, cfg: RunConfig) -> int:
    dataset_dir = Path(args.dataset)
    _, pairs = _load_pairs(dataset_dir, args.target)
    if args.resume:
        model = unet.load_weights(Path(args.resume).read_bytes())
    else:
        model = unet.build(_unet_config(cfg), seed=args.seed if args.seed is not None else 0)
    hyper = unet.TrainParams(
        lr=args.lr if args.lr is not None else cfg.unet.lr,
        momentum=args.momentum if args.momentum is not None else cfg.unet.momentum,
        epochs=args.epochs if args.epochs is not None else cfg.unet.epochs,
        holdout_fraction=(args.holdout if args.holdout is not None
                          else cfg.unet.holdout_fraction),
        shuffle_seed=args.seed if args.seed is not None else 0,
    )
    model, train_report = unet.train(model, pairs, hyper)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(unet.save_weights(model))

    report_path = Path(args.report) if args.report else Path(f"{out}.report.csv")
    start_epoch = 1
    existing = []
    if args.resume and report_path.exists():
        with report_path.open() as fh:
            existing = list(csv.reader(fh))[1:]
        if existing:
            start_epoch = int(existing[-1][0]) + 1
    with report_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "pixel_acc", "iou", "seconds"])
        writer.writerows(existing)
        writer.writerows(_report_rows(train_report.epochs, start_epoch))
    report.training_curves(train_report.epochs, report_path.with_suffix(".png"))

    last = train_report.epochs[-1]
    print(f"trained {args.target}: {len(train_report.epochs)} epochs, "
          f"final loss={last.mean_loss:.5f} pixel_acc={last.pixel_accuracy:.4f} "
          f"iou={last.iou:.4f}")
    print(f"weights -> {out}")
    print(f"report -> {report_path}")
    return 0


def _fmt(value: float | None) -> str:
    return "" if value is None else f"{value:.6f}"


def process_frame(pupil_model, cr_model, calib, feat_cfg: FeatSettings,
                  image: GrayImage) -> dict:
    """Segment, extract features and recover gaze for one frame; pure."""
    t0 = time.perf_counter()
    row = {"pupil": None, "cr": None, "theta_h": None, "theta_v": None, "valid": False}
    try:
        pupil_mask = unet.predict_mask(pupil_model, image)
        cr_mask = unet.predict_mask(cr_model, image)
        pupil_hit = featext.extract_pupil(pupil_mask)
        cr_hit = featext.extract_cr(cr_mask, image,
                                    (feat_cfg.cr_area_min, feat_cfg.cr_area_max))
        if pupil_hit is not None and cr_hit is not None:
            ellipse, p_conf = pupil_hit
            cr_point, c_conf = cr_hit
            angles = gaze.gaze_angle(calib, ellipse.center, cr_point)
            ok = (p_conf >= feat_cfg.confidence_threshold
                  and c_conf >= feat_cfg.confidence_threshold
                  and not angles.clamped)
            if ok:
                row.update(pupil=ellipse, cr=cr_point,
                           theta_h=angles.theta_h, theta_v=angles.theta_v, valid=True)
    except OcutrackError:
        pass
    row["latency_ms"] = (time.perf_counter() - t0) * 1e3
    return row


def cmd_track(args, cfg: RunConfig) -> int:
    frames_dir = Path(args.frames)
    frame_paths = sorted(frames_dir.glob("*.pgm"))
    if not frame_paths:
        raise OcutrackError(f"no .pgm frames under {frames_dir}")
    pupil_model = unet.load_weights(Path(args.pupil_weights).read_bytes())
    cr_model = unet.load_weights(Path(args.cr_weights).read_bytes())
    calib = gaze.calibration_from_json(Path(args.calibration).read_text())
    images = [load_pgm(p.read_bytes()) for p in frame_paths]

    def run(image):
        return process_frame(pupil_model, cr_model, calib, cfg.featext, image)

    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            rows = list(pool.map(run, images))
    else:
        rows = [run(img) for img in images]

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    plot_rows = []
    with out.open("w", newline="") as fh:
        fh.write(TRACE_HEADER + "\n")
        for i, row in enumerate(rows):
            ellipse = row["pupil"]
            cr_point = row["cr"]
            fields = [
                str(i),
                _fmt(ellipse.center[0] if ellipse else None),
                _fmt(ellipse.center[1] if ellipse else None),
                _fmt(ellipse.a if ellipse else None),
                _fmt(ellipse.b if ellipse else None),
                _fmt(ellipse.angle if ellipse else None),
                _fmt(cr_point[0] if cr_point else None),
                _fmt(cr_point[1] if cr_point else None),
                _fmt(math.degrees(row["theta_h"]) if row["theta_h"] is not None else None),
                _fmt(math.degrees(row["theta_v"]) if row["theta_v"] is not None else None),
                "1" if row["valid"] else "0",
                f"{row['latency_ms']:.3f}",
            ]
            fh.write(",".join(fields) + "\n")
            plot_rows.append({
                "frame_index": i, "valid": row["valid"],
                "theta_h_deg": math.degrees(row["theta_h"]) if row["theta_h"] is not None else 0.0,
                "theta_v_deg": math.degrees(row["theta_v"]) if row["theta_v"] is not None else 0.0,
                "latency_ms": row["latency_ms"],
            })
    report.trace_figure(plot_rows, out.with_suffix(".png"))

    if args.overlay:
        overlay_dir = Path(args.overlay)
        overlay_dir.mkdir(parents=True, exist_ok=True)
        for i, image in enumerate(images):
            stem = f"{i:04d}"
            (overlay_dir / f"{stem}_img.pgm").write_bytes(save_pgm(image))
            (overlay_dir / f"{stem}_pupil.pgm").write_bytes(
                save_mask_pgm(unet.predict_mask(pupil_model, image)))
            (overlay_dir / f"{stem}_cr.pgm").write_bytes(
                save_mask_pgm(unet.predict_mask(cr_model, image)))

    lat = np.array([r["latency_ms"] for r in rows])
    over = int((lat > cfg.track.max_latency_ms).sum())
    n_valid = sum(1 for r in rows if r["valid"])
    print(f"{len(rows)} frames, {n_valid} valid; latency p50={np.percentile(lat, 50):.1f}ms "
          f"p95={np.percentile(lat, 95):.1f}ms; {over} over {cfg.track.max_latency_ms:.0f}ms")
    print(f"trace -> {out}")
    return 0


def cmd_calibrate(args, cfg: RunConfig) -> int:
    rows = []
    with Path(args.swing).open() as fh:
        for record in csv.reader(fh):
            if not record or not record[0].strip():
                continue
            try:
                phi_deg, dx, dy = (float(v) for v in record[:3])
            except ValueError:
                continue  # header or comment line
            rows.append((phi_deg, dx, dy))
    try:
        measurements = [gaze.SwingMeasurement(phi=math.radians(p), dx=dx, dy=dy)
                        for p, dx, dy in rows]
    except ValueError as exc:
        raise UsageError(f"bad swing row: {exc}") from None
    calib = gaze.calibrate(measurements)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(gaze.calibration_to_json(calib))
    print(f"k = {calib.k:.4f} px, theta0_h = {math.degrees(calib.theta0_h):.4f} deg, "
          f"theta0_v = {math.degrees(calib.theta0_v):.4f} deg, "
          f"residual = {calib.fit_residual_px:.4f} px (n={calib.n_measurements})")
    print(f"calibration -> {out}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    records, pairs = _load_pairs(Path(args.dataset), args.target)
    model = unet.load_weights(Path(args.weights).read_bytes())
    area_range = (cfg.featext.cr_area_min, cfg.featext.cr_area_max)
    sb_cfg = _starburst_config(cfg)

    per_sample = []
    for record in records:
        truth_mask = record.pupil_mask if args.target == "pupil" else record.cr_mask
        pred = unet.predict_mask(model, record.image, cfg.unet.prob_threshold)
        acc = unet.pixel_accuracy(pred.pixels, truth_mask.pixels)
        sample_iou = unet.iou(pred.pixels, truth_mask.pixels)
        truth_center = (record.truth.pupil_center if args.target == "pupil"
                        else record.truth.cr_center)
        if args.target == "pupil":
            hit = featext.extract_pupil(pred)
            center = hit[0].center if hit else None
        else:
            hit = featext.extract_cr(pred, record.image, area_range)
            center = hit[0] if hit else None
        err = (math.hypot(center[0] - truth_center[0], center[1] - truth_center[1])
               if center else None)
        row = {"pixel_acc": acc, "iou": sample_iou, "center_err_px": err}
        if args.baseline:
            feats = classical.classical_pipeline(
                record.image, sb_cfg, cfg.classical.cr_threshold, area_range,
                cfg.classical.radii)
            if args.target == "pupil":
                base_center = feats.pupil.center if feats.pupil else None
            else:
                base_center = feats.cr
            row["baseline_err_px"] = (
                math.hypot(base_center[0] - truth_center[0], base_center[1] - truth_center[1])
                if base_center else None)
        per_sample.append(row)

    cols = ["pixel_acc", "iou", "center_err_px"] + (
        ["baseline_err_px"] if args.baseline else [])
    out = Path(args.out) if args.out else None
    if out:
        out.parent.mkdir(parents=True, exist_ok=True)
        with out.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index"] + cols)
            for i, row in enumerate(per_sample):
                writer.writerow([i] + ["" if row.get(c) is None else f"{row[c]:.6f}"
                                       for c in cols])
        hist_cols = {
            "network center error [px]": [r["center_err_px"] for r in per_sample
                                          if r["center_err_px"] is not None]}
        if args.baseline:
            hist_cols["classical center error [px]"] = [
                r["baseline_err_px"] for r in per_sample if r["baseline_err_px"] is not None]
        report.eval_histograms(hist_cols, out.with_suffix(".png"))

    def summary(name):
        vals = [r[name] for r in per_sample if r.get(name) is not None]
        misses = sum(1 for r in per_sample if r.get(name) is None)
        if not vals:
            return f"{name}: no detections"
        line = (f"{name}: mean={np.mean(vals):.4f} median={np.median(vals):.4f} "
                f"p95={np.percentile(vals, 95):.4f}")
        return line + (f" misses={misses}" if misses else "")

    print(f"eval {args.target} on {len(per_sample)} samples")
    for c in cols:
        print("  " + summary(c))
    if out:
        print(f"report -> {out}")
    return 0


# --- wiring ---

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ocutrack",
        description="Rodent eye tracking: segmentation models, classical "
                    "baseline, calibration, and synthetic data.")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, help="master seed for seeded commands")
    parser.add_argument("--workers", type=int, default=1,
                        help="worker threads for tracking")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic training datasets")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train or resume a segmentation model")
    p.add_argument("--target", choices=("pupil", "cr"), required=True)
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output weights file")
    p.add_argument("--resume", help="existing weights to continue from")
    p.add_argument("--report", help="metrics table path (default: <out>.report.csv)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--holdout", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", help="process a frame directory into a gaze trace")
    p.add_argument("--frames", required=True, help="directory of PGM frames")
    p.add_argument("--pupil-weights", required=True)
    p.add_argument("--cr-weights", required=True)
    p.add_argument("--calibration", required=True, help="calibration JSON")
    p.add_argument("--out", required=True, help="trace CSV path")
    p.add_argument("--overlay", help="directory for per-frame mask PGM triplets")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("calibrate", help="fit calibration from a swing CSV")
    p.add_argument("--swing", required=True, help="CSV of phi_deg,dx_px,dy_px")
    p.add_argument("--out", required=True, help="calibration JSON path")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("eval", help="evaluate a model (and baseline) on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--target", choices=("pupil", "cr"), required=True)
    p.add_argument("--baseline", action="store_true",
                   help="additionally run the classical pipeline")
    p.add_argument("--out", help="per-sample metrics CSV path")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except InfeasibleInput as exc:
        print(f"error: infeasible model config: {exc}", file=sys.stderr)
        return 4
    except (InsufficientData, DegenerateGeometry) as exc:
        print(f"error: calibration failed: {exc}", file=sys.stderr)
        return 5
    except OcutrackError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
