"""Command-line entry point: gen-data -> train -> extract -> evaluate.

Exit codes: 0 success, 2 configuration or usage error, 3 I/O failure,
4 evaluation pairing mismatch. All configuration is validated before any
output path is touched, and every output file is written atomically.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics
from .augment import AugmentConfig
from .centerline import (
    ExtractParams,
    extract_centerline,
    load_centerline_json,
    render_overlay,
    resample_polyline,
    save_centerline_json,
)
from .imagecore import (
    Image,
    PixelSpacing,
    ProbabilityMap,
    atomic_write_bytes,
    save_probability_map,
    save_rgb,
)
from .nn import (
    ModelConfig,
    OptimizerState,
    SegModel,
    build_frame_stack,
    load_checkpoint,
    model_forward,
    save_checkpoint,
    sequence_to_samples,
    train,
)
from .synthgen import (
    SynthConfig,
    generate_dataset,
    load_sequence_arrays,
    read_manifest,
    sequence_dirs,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_EVAL = 4


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

_OPTIMIZER_KEYS = {"learning_rate", "weight_decay", "momentum"}
_PATH_KEYS = {"data_dir", "checkpoint", "out_dir"}


@dataclass(frozen=True)
class RunConfig:
    """Full tool configuration; every field group is overridable from the
    JSON config file, and every constant has a default."""

    model: ModelConfig
    optimizer: dict
    augment: AugmentConfig
    extract: ExtractParams
    synth: SynthConfig
    pixel_spacing: PixelSpacing
    paths: dict

    @classmethod
    def default(cls) -> "RunConfig":
        return cls(
            model=ModelConfig(levels=3, base_filters=8),
            optimizer={},
            augment=AugmentConfig(),
            extract=ExtractParams(),
            synth=SynthConfig(),
            pixel_spacing=PixelSpacing(),
            paths={},
        )

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {"model", "optimizer", "augment", "extract", "synth",
                 "pixel_spacing", "paths"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        base = cls.default()
        kw = {}
        kw["model"] = ModelConfig.from_dict(d["model"]) if "model" in d else base.model
        opt = dict(d.get("optimizer", {}))
        bad = set(opt) - _OPTIMIZER_KEYS
        if bad:
            raise ValueError(f"unknown optimizer keys: {sorted(bad)}")
        OptimizerState(**opt)  # validates ranges
        kw["optimizer"] = opt
        kw["augment"] = AugmentConfig.from_dict(d["augment"]) if "augment" in d else base.augment
        kw["extract"] = ExtractParams.from_dict(d["extract"]) if "extract" in d else base.extract
        kw["synth"] = SynthConfig.from_dict(d["synth"]) if "synth" in d else base.synth
        kw["pixel_spacing"] = (PixelSpacing(float(d["pixel_spacing"]))
                               if "pixel_spacing" in d else base.pixel_spacing)
        paths = dict(d.get("paths", {}))
        bad = set(paths) - _PATH_KEYS
        if bad:
            raise ValueError(f"unknown path keys: {sorted(bad)}")
        kw["paths"] = paths
        return cls(**kw)

    def make_optimizer(self) -> OptimizerState:
        return OptimizerState(**self.optimizer)


def _load_run_config(path) -> RunConfig:
    if path is None:
        return RunConfig.default()
    p = Path(path)
    if not p.exists():
        raise ValueError(f"config file not found: {p}")
    with open(p, "r", encoding="utf-8") as fh:
        return RunConfig.from_dict(json.load(fh))


def _resolve(arg_value, cfg: RunConfig, key: str, flag: str):
    value = arg_value if arg_value is not None else cfg.paths.get(key)
    if value is None:
        raise ValueError(f"{flag} is required (or set paths.{key} in the config)")
    return Path(value)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _load_run_config(args.config)
    synth = cfg.synth
    if args.seed is not None:
        synth = dataclasses.replace(synth, seed=args.seed)
    out = _resolve(args.out, cfg, "out_dir", "--out")
    manifest = generate_dataset(synth, out, args.n, threads=max(args.threads, 1))
    print(manifest)
    return EXIT_OK


def _load_training_samples(data_dir: Path):
    dirs = sequence_dirs(data_dir)
    if not dirs:
        raise ValueError(f"no sequences found under {data_dir}")
    normalize = read_manifest(data_dir) is None
    samples = []
    for d in dirs:
        try:
            frames, masks = load_sequence_arrays(d, normalize=normalize, with_masks=True)
        except FileNotFoundError as e:
            raise ValueError(f"unusable training data: {e}") from e
        samples.extend(sequence_to_samples(frames.astype(np.float32), masks))
    return samples


def _read_loss_rows(path: Path) -> list:
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["epoch", "mean_loss"]:
            raise ValueError(f"{path}: not a loss trace file")
        for rec in reader:
            rows.append((int(rec[0]), float(rec[1])))
    return rows


def _write_loss_csv(rows, path: Path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "mean_loss"])
    for epoch, loss in rows:
        writer.writerow([epoch, f"{loss:.8f}"])
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def cmd_train(args) -> int:
    cfg = _load_run_config(args.config)
    data_dir = _resolve(args.data, cfg, "data_dir", "--data")
    if not data_dir.exists():
        raise FileNotFoundError(f"data directory not found: {data_dir}")
    out_path = _resolve(args.out, cfg, "checkpoint", "--out")
    samples = _load_training_samples(data_dir)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    if args.resume:
        model = load_checkpoint(args.resume)
    else:
        model = SegModel(cfg.model, rng, dtype=np.float32)
    opt = cfg.make_optimizer()
    loss_path = Path(args.loss_csv) if args.loss_csv else Path(str(out_path) + ".loss.csv")
    rows = []
    if args.resume and loss_path.exists():
        rows = _read_loss_rows(loss_path)
    start = rows[-1][0] if rows else 0

    def on_epoch(epoch: int, loss: float):
        print(f"epoch {start + epoch + 1}: mean loss {loss:.6f}", flush=True)

    trace = train(samples, model, opt, epochs=args.epochs, rng=rng,
                  augment_config=cfg.augment, batch_size=args.batch_size,
                  on_epoch=on_epoch)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out_path)
    rows.extend((start + i + 1, loss) for i, loss in enumerate(trace))
    _write_loss_csv(rows, loss_path)
    print(out_path)
    return EXIT_OK


def _sequence_out_dirs(root: Path, dirs: list, out: Path) -> list:
    if dirs == [root]:
        return [out]
    return [out / d.name for d in dirs]


def cmd_extract(args) -> int:
    cfg = _load_run_config(args.config)
    params = cfg.extract
    root = Path(args.seq)
    if not root.exists():
        raise FileNotFoundError(f"sequence directory not found: {root}")
    dirs = sequence_dirs(root)
    if not dirs and args.no_model:
        # mask-only directories carry no frame images
        dirs = sorted(p for p in root.iterdir()
                      if p.is_dir() and list(p.glob("mask_*.png"))) or \
            ([root] if list(root.glob("mask_*.png")) else [])
    if not dirs:
        raise ValueError(f"no sequences found under {root}")
    is_dataset = read_manifest(root) is not None or read_manifest(root.parent) is not None
    model = None
    if not args.no_model:
        if args.checkpoint is None:
            raise ValueError("--checkpoint is required unless --no-model is given")
        model = load_checkpoint(args.checkpoint)
    out = _resolve(args.out, cfg, "out_dir", "--out")
    for d, out_d in zip(dirs, _sequence_out_dirs(root, dirs, out)):
        _extract_sequence(d, out_d, model, params, normalize=not is_dataset,
                          use_masks=args.no_model)
    print(out)
    return EXIT_OK


def _extract_sequence(seq_dir: Path, out_dir: Path, model, params,
                      normalize: bool, use_masks: bool) -> None:
    from .imagecore import load_mask

    frames = None
    if use_masks:
        mask_files = sorted(seq_dir.glob("mask_*.png"),
                            key=lambda p: int(p.stem.split("_", 1)[1]))
        if not mask_files:
            raise FileNotFoundError(f"{seq_dir}: no mask images found")
        stacks = [load_mask(p).data.astype(np.float64) for p in mask_files]
        try:
            frames, _ = load_sequence_arrays(seq_dir, normalize=normalize,
                                             with_masks=False)
        except FileNotFoundError:
            frames = None  # masks only: overlays are skipped
    else:
        frames, _ = load_sequence_arrays(seq_dir, normalize=normalize,
                                         with_masks=False)
        frames = frames.astype(np.float32)
        model.check_input(np.empty((1, model.config.input_frames,
                                    frames.shape[1], frames.shape[2]),
                                   dtype=frames.dtype))
        stacks = None
    out_dir.mkdir(parents=True, exist_ok=True)
    n = len(stacks) if stacks is not None else len(frames)
    for i in range(n):
        if use_masks:
            pm = ProbabilityMap(stacks[i])
        else:
            pm = model_forward(model, build_frame_stack(frames, i))
        centerline = extract_centerline(pm, params)
        save_probability_map(pm, out_dir / f"prob_{i}.png")
        save_centerline_json(centerline, pm.width, pm.height,
                             out_dir / f"centerline_{i}.json")
        if frames is not None:
            overlay = render_overlay(Image(np.asarray(frames[i], dtype=np.float64)),
                                     centerline)
            save_rgb(overlay, out_dir / f"overlay_{i}.png")


def _collect_centerlines(root: Path) -> dict:
    """Map (sequence id, frame index) -> centerline JSON path, searching the
    root itself and its immediate subdirectories."""
    found = {}
    dirs = [root] + sorted(p for p in root.iterdir() if p.is_dir())
    for d in dirs:
        seq_id = "." if d == root else d.name
        for p in d.glob("centerline_*.json"):
            try:
                idx = int(p.stem.split("_", 1)[1])
            except ValueError:
                continue
            found[(seq_id, idx)] = p
    return found


def cmd_evaluate(args) -> int:
    cfg = _load_run_config(args.config)
    spacing = cfg.pixel_spacing
    pred_root, gt_root = Path(args.pred), Path(args.gt)
    for p in (pred_root, gt_root):
        if not p.exists():
            raise FileNotFoundError(f"directory not found: {p}")
    gt_files = _collect_centerlines(gt_root)
    pred_files = _collect_centerlines(pred_root)
    if not gt_files:
        raise ValueError(f"no ground-truth centerlines under {gt_root}")
    missing = sorted(set(gt_files) - set(pred_files))
    extra = sorted(set(pred_files) - set(gt_files))
    if missing or extra:
        for seq, idx in missing:
            print(f"missing prediction for {seq}/frame {idx}", file=sys.stderr)
        for seq, idx in extra:
            print(f"prediction without ground truth: {seq}/frame {idx}",
                  file=sys.stderr)
        return EXIT_EVAL
    results = []
    for (seq, idx) in sorted(gt_files):
        gt_cl, _, _ = load_centerline_json(gt_files[(seq, idx)])
        if gt_cl is None:
            raise ValueError(f"ground truth for {seq}/frame {idx} is empty")
        pred_cl, _, _ = load_centerline_json(pred_files[(seq, idx)])
        gt_pts = resample_polyline(gt_cl.points, 1.0)
        pred_pts = resample_polyline(pred_cl.points, 1.0) if pred_cl is not None else None
        results.append(metrics.evaluate_frame(seq, idx, gt_pts, pred_pts, spacing))
    summary = metrics.summarize(results, threshold_px=args.threshold)
    out = Path(args.out) if args.out else pred_root
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_report_csv(results, out / "report.csv")
    metrics.write_summary_json(summary, out / "summary.json")
    med = summary["centerline_px"]["median"]
    tip = summary["tip_px"]["median"]
    print(f"frames evaluated: {summary['n_frames']} "
          f"({summary['n_failed']} failed)")
    print("median centerline distance: "
          + ("n/a" if med is None else f"{med:.3f} px"))
    print("median tip error: " + ("n/a" if tip is None else f"{tip:.3f} px"))
    print(f"frames within {summary['threshold_px']:g} px: "
          f"{summary['percent_under_threshold']:.1f}%")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cathseg",
        description="Catheter segmentation and centerline extraction toolkit.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration file")
    common.add_argument("--seed", type=int, default=None,
                        help="override the random seed")
    common.add_argument("--threads", type=int, default=1,
                        help="worker threads for data generation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common],
                       help="generate a synthetic dataset")
    p.add_argument("--out", help="output dataset directory")
    p.add_argument("--n", type=int, required=True, help="number of sequences")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common],
                       help="train the segmentation model")
    p.add_argument("--data", help="training dataset directory")
    p.add_argument("--out", help="output checkpoint path")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--resume", help="checkpoint to continue training from")
    p.add_argument("--loss-csv", help="loss trace path "
                   "(default: <checkpoint>.loss.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", parents=[common],
                       help="segment frames and extract centerlines")
    p.add_argument("--checkpoint", help="model checkpoint")
    p.add_argument("--seq", required=True,
                   help="sequence directory or dataset root")
    p.add_argument("--out", help="output directory")
    p.add_argument("--no-model", action="store_true",
                   help="extract directly from mask_<i>.png files")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("evaluate", parents=[common],
                       help="compare extracted centerlines against ground truth")
    p.add_argument("--pred", required=True, help="predictions directory")
    p.add_argument("--gt", required=True, help="ground-truth directory")
    p.add_argument("--out", help="report directory (default: --pred)")
    p.add_argument("--threshold", type=float, default=3.0,
                   help="centerline error threshold for the percent statistic")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
