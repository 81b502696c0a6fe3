"""Command-line entry point wiring the whole pipeline.

Subcommands: phantom, train, reconstruct, segment, evaluate, overlay, e2e.
All numeric knobs live in one JSON config (strict keys, defaults follow the
training recipe and postprocessing constants); a few flags override it.
Exit codes: 0 success, 2 config error, 3 data error, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import metrics as metrics_mod
from . import mvitae, postproc, volcore
from .mvitae import ConfigError, ModelConfig, TrainConfig
from .phantom import PhantomSpec, PhantomSpecError, generate_phantom_detailed
from .postproc import BuiltinRefiner, ExternalRefiner, PostprocParams
from .volcore import LabelVolume, VolumeError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

OVERLAY_COLORS = {3: (70, 110, 255), 2: (60, 220, 60), 1: (255, 90, 90)}  # ET/SNFH/NET
OVERLAY_ALPHA = 0.45


class DataError(RuntimeError):
    """Missing or inconsistent input data (exit code 3)."""


@dataclass
class RefinerConfig:
    mode: str = "off"  # off | builtin | external
    command: list = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in ("off", "builtin", "external"):
            raise ConfigError(f"refiner mode must be off/builtin/external, got {self.mode!r}")
        if self.mode == "external" and not self.command:
            raise ConfigError("refiner mode 'external' needs a refiner command")


@dataclass
class PhantomSectionConfig:
    shape: tuple = (32, 96, 96)
    tumor_count: int = 1
    smoothness_sigma: float = 1.0


@dataclass
class E2EConfig:
    n_train: int = 12
    n_eval_tumor: int = 20
    n_eval_healthy: int = 10
    val_fraction: float = 0.2
    overlay_cases: int = 2


@dataclass
class PipelineConfig:
    seed: int = 0
    workers: int | None = None
    model: ModelConfig = field(default_factory=ModelConfig.toy)
    train: TrainConfig = field(default_factory=TrainConfig)
    postproc: PostprocParams = field(default_factory=PostprocParams)
    refiner: RefinerConfig = field(default_factory=RefinerConfig)
    metrics: metrics_mod.MetricsParams = field(default_factory=metrics_mod.MetricsParams)
    phantom: PhantomSectionConfig = field(default_factory=PhantomSectionConfig)
    e2e: E2EConfig = field(default_factory=E2EConfig)


def _strict_dataclass(cls, data: dict, section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown keys in config section {section!r}: {unknown}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"bad config section {section!r}: {exc}") from None


def parse_pipeline_config(raw: dict) -> PipelineConfig:
    """Strict parse of the single JSON config; unknown keys are rejected."""
    known = {"seed", "workers", "model", "train", "postproc", "refiner", "metrics", "phantom", "e2e"}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {unknown}")

    model_raw = dict(raw.get("model", {}))
    preset = model_raw.pop("preset", None)
    if preset is not None:
        if preset not in ("toy", "paper_scale"):
            raise ConfigError(f"unknown model preset {preset!r}")
        base = dataclasses.asdict(ModelConfig.toy() if preset == "toy" else ModelConfig.paper_scale())
        base.update(model_raw)
        model_raw = base
    if "decoder_seed_shape" in model_raw:
        model_raw["decoder_seed_shape"] = tuple(model_raw["decoder_seed_shape"])
    model = _strict_dataclass(ModelConfig, model_raw, "model") if model_raw else ModelConfig.toy()

    phantom_raw = dict(raw.get("phantom", {}))
    if "shape" in phantom_raw:
        phantom_raw["shape"] = tuple(phantom_raw["shape"])

    return PipelineConfig(
        seed=int(raw.get("seed", 0)),
        workers=raw.get("workers"),
        model=model,
        train=_strict_dataclass(TrainConfig, dict(raw.get("train", {})), "train"),
        postproc=_strict_dataclass(PostprocParams, dict(raw.get("postproc", {})), "postproc"),
        refiner=_strict_dataclass(RefinerConfig, dict(raw.get("refiner", {})), "refiner"),
        metrics=_strict_dataclass(metrics_mod.MetricsParams, dict(raw.get("metrics", {})), "metrics"),
        phantom=_strict_dataclass(PhantomSectionConfig, phantom_raw, "phantom"),
        e2e=_strict_dataclass(E2EConfig, dict(raw.get("e2e", {})), "e2e"),
    )


def load_config(path) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return parse_pipeline_config(raw)


def _apply_flag_overrides(cfg: PipelineConfig, args) -> PipelineConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "workers", None) is not None:
        cfg.workers = args.workers
    if getattr(args, "refiner", None) is not None:
        command = cfg.refiner.command
        if getattr(args, "refiner_cmd", None):
            command = args.refiner_cmd
        cfg.refiner = RefinerConfig(mode=args.refiner, command=command)
    elif getattr(args, "refiner_cmd", None):
        cfg.refiner = RefinerConfig(mode="external", command=args.refiner_cmd)
    return cfg


def _make_refiner(cfg: PipelineConfig):
    if cfg.refiner.mode == "off":
        return None
    if cfg.refiner.mode == "builtin":
        return BuiltinRefiner(tolerance=cfg.postproc.growth_tolerance)
    return ExternalRefiner(cfg.refiner.command)


def _n_workers(cfg: PipelineConfig) -> int:
    return cfg.workers if cfg.workers else (os.cpu_count() or 1)


def _run_parallel(fn, items, workers):
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _prepare_out_dir(path, force: bool):
    path = Path(path)
    if path.exists() and any(path.iterdir()):
        if not force:
            raise DataError(f"output directory {path} exists and is not empty (use --force)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


# ------------------------------------------------------------------ phantom


def cmd_phantom(args, cfg: PipelineConfig) -> int:
    out = _prepare_out_dir(args.out, args.force)
    specs = []
    for i in range(args.n_healthy):
        specs.append((f"case_{i:04d}", PhantomSpec(
            shape=cfg.phantom.shape, seed=cfg.seed + i, tumor_present=False,
            tumor_count=0, smoothness_sigma=cfg.phantom.smoothness_sigma,
        )))
    for j in range(args.n_tumor):
        i = args.n_healthy + j
        specs.append((f"case_{i:04d}", PhantomSpec(
            shape=cfg.phantom.shape, seed=cfg.seed + i, tumor_present=True,
            tumor_count=cfg.phantom.tumor_count, smoothness_sigma=cfg.phantom.smoothness_sigma,
        )))

    def build(item):
        name, spec = item
        vol, labels, info = generate_phantom_detailed(spec)
        case_dir = out / name
        volcore.save_volume(vol, case_dir)
        volcore.save_labels(labels, case_dir)
        sidecar = spec.to_json_dict()
        sidecar.update(dataclasses.asdict(info))
        with open(case_dir / "phantom_spec.json", "w") as fh:
            json.dump(sidecar, fh, indent=1, sort_keys=True)
        return {
            "name": name,
            "tumor": spec.tumor_present,
            "seed": spec.seed,
            "brain_voxels": info.brain_voxels,
            "tumor_voxels": info.tumor_voxels,
        }

    rows = _run_parallel(build, specs, _n_workers(cfg))
    manifest = {
        "cases": sorted(rows, key=lambda r: r["name"]),
        "shape": list(cfg.phantom.shape),
        "rng": "numpy-philox",
        "seed": cfg.seed,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    print(f"wrote {len(rows)} phantom cases to {out}")
    return EXIT_OK


# -------------------------------------------------------------------- train


def _load_manifest(dataset_dir) -> dict:
    path = Path(dataset_dir) / "manifest.json"
    if not path.exists():
        raise DataError(f"no manifest.json in {dataset_dir}")
    with open(path) as fh:
        return json.load(fh)


def _collect_healthy_slices(dataset_dir, case_names):
    stacks = []
    for name in case_names:
        case_dir = Path(dataset_dir) / name
        vol = volcore.load_volume(case_dir)
        labels = volcore.load_labels(case_dir)
        normed, _ = volcore.zscore_normalize(vol)
        healthy, _ = volcore.split_pseudo_volumes(normed, labels)
        if len(healthy):
            stacks.append(healthy.data)
    if not stacks:
        raise DataError("dataset contains zero healthy slices")
    return np.concatenate(stacks, axis=0)


def cmd_train(args, cfg: PipelineConfig) -> int:
    manifest = _load_manifest(args.dataset)
    names = [c["name"] for c in manifest["cases"]]
    if not names:
        raise DataError("dataset manifest lists no cases")
    n_val = max(1, round(len(names) * args.val_fraction)) if len(names) > 1 else 0
    train_names = names[: len(names) - n_val] if n_val else names
    val_names = names[len(names) - n_val :] if n_val else names
    train_slices = _collect_healthy_slices(args.dataset, train_names)
    val_slices = _collect_healthy_slices(args.dataset, val_names)

    ckpt_dir = Path(args.out)
    if args.resume:
        state = mvitae.load_checkpoint(ckpt_dir)
    else:
        state = mvitae.build_model(cfg.model, seed=cfg.seed)
    train_cfg = dataclasses.replace(cfg.train, seed=cfg.train.seed or cfg.seed)
    state, history = mvitae.train(
        state,
        volcore.SliceBatch(data=train_slices),
        volcore.SliceBatch(data=val_slices),
        train_cfg,
        checkpoint_dir=ckpt_dir,
        log_fn=lambda row: print(
            f"epoch {row['epoch']:3d}  train {row['train_loss']:.5f}  "
            f"val {row['val_loss']:.5f}{'  *' if row['saved'] else ''}"
        ),
    )
    history_path = ckpt_dir / "history.csv"
    if args.resume and history_path.exists():
        with open(history_path, "a", newline="") as fh:
            import csv as _csv

            writer = _csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss", "saved"])
            for row in history:
                writer.writerow({**row, "saved": int(row["saved"])})
    else:
        mvitae.write_history_csv(history, history_path)
    print(f"checkpoint in {ckpt_dir} (best val loss {state.best_val_loss:.6f})")
    return EXIT_OK


# -------------------------------------------------------- reconstruct/segment


def _load_normalized(case_dir):
    vol = volcore.load_volume(case_dir)
    normed, records = volcore.zscore_normalize(vol)
    return vol, normed, records


def cmd_reconstruct(args, cfg: PipelineConfig) -> int:
    state = mvitae.load_checkpoint(args.checkpoint)
    _, normed, _ = _load_normalized(args.case)
    recon = mvitae.reconstruct_volume(state, normed)
    volcore.save_volume(recon, args.out)
    print(f"reconstruction written to {args.out}")
    return EXIT_OK


def _save_mask_volume(mask, path, spacing):
    volcore.save_labels(LabelVolume(data=mask.astype(np.uint8)), path, spacing_mm=spacing)


def _save_float_volume(data, tag, path, spacing):
    volcore.save_volume(
        volcore.MultimodalVolume(modalities=[tag], data=data[None].astype(np.float32), spacing_mm=spacing),
        path,
    )


def segment_case(state, cfg: PipelineConfig, case_dir, out_dir, refiner=None, debug=False):
    """Segment one case directory into a fused label volume on disk."""
    _, normed, _ = _load_normalized(case_dir)
    recon = mvitae.reconstruct_volume(state, normed)
    masks = {}
    stages_by_tag = {}
    for tag in ("t1c", "t2f"):
        mask, stages = postproc.segment_modality(
            normed, recon, tag,
            params=cfg.postproc, refiner=refiner, seed=cfg.seed, collect_stages=True,
        )
        masks[tag] = mask
        stages_by_tag[tag] = stages
    fused = postproc.fuse_masks(masks["t1c"], masks["t2f"])
    out_dir = Path(out_dir)
    volcore.save_labels(fused, out_dir, spacing_mm=normed.spacing_mm)
    if debug:
        spacing = normed.spacing_mm
        for tag, stages in stages_by_tag.items():
            base = out_dir / "debug" / tag
            _save_float_volume(stages["residual"], tag, base / "stage_1_residual", spacing)
            _save_float_volume(stages["thresholded"], tag, base / "stage_2_thresholded", spacing)
            _save_mask_volume(stages["otsu"], base / "stage_3_otsu", spacing)
            _save_mask_volume(stages["morph"], base / "stage_4_morph", spacing)
            _save_mask_volume(stages["largest"], base / "stage_5_largest_component", spacing)
            _save_mask_volume(stages["refined"], base / "stage_6_refined", spacing)
            with open(base / "thresholds.json", "w") as fh:
                json.dump({"tau": stages["tau"]}, fh, indent=1, sort_keys=True)
    return fused


def cmd_segment(args, cfg: PipelineConfig) -> int:
    state = mvitae.load_checkpoint(args.checkpoint)
    refiner = _make_refiner(cfg)
    try:
        segment_case(state, cfg, args.case, args.out, refiner=refiner, debug=args.debug)
    finally:
        if isinstance(refiner, ExternalRefiner):
            refiner.close()
    print(f"prediction written to {args.out}")
    return EXIT_OK


# ----------------------------------------------------------------- evaluate


def _case_names_with_labels(root) -> list[str]:
    root = Path(root)
    if (root / "manifest.json").exists():
        return [c["name"] for c in _load_manifest(root)["cases"]]
    return sorted(p.name for p in root.iterdir() if (p / "seg.u8").exists())


def cmd_evaluate(args, cfg: PipelineConfig) -> int:
    gt_names = _case_names_with_labels(args.gt)
    if not gt_names:
        raise DataError(f"no labelled cases found under {args.gt}")
    pred_root = Path(args.pred)
    missing = [n for n in gt_names if not (pred_root / n / "seg.u8").exists()]
    if missing:
        raise DataError(f"predictions missing for cases: {missing}")
    case_scores = {}
    for name in gt_names:
        pred = volcore.load_labels(pred_root / name)
        gt = volcore.load_labels(Path(args.gt) / name)
        case_scores[name] = metrics_mod.evaluate_case(pred, gt, cfg.metrics)
    report = metrics_mod.build_report(case_scores, cfg.metrics)
    table = metrics_mod.write_report(
        report,
        args.out,
        table_path=args.table,
    )
    print(table)
    return EXIT_OK


# ------------------------------------------------------------------ overlay


def _to_gray(slice2d, lo, hi):
    scaled = np.clip((slice2d - lo) / max(hi - lo, 1e-6), 0.0, 1.0)
    return (scaled * 255.0).astype(np.uint8)


def _paint(gray, labels2d):
    rgb = np.stack([gray, gray, gray], axis=-1).astype(np.float64)
    for value, color in OVERLAY_COLORS.items():
        sel = labels2d == value
        if sel.any():
            rgb[sel] = (1 - OVERLAY_ALPHA) * rgb[sel] + OVERLAY_ALPHA * np.array(color)
    return rgb.astype(np.uint8)


def parse_z_range(text, depth):
    if text is None:
        return range(depth)
    lo, _, hi = text.partition(":")
    lo = int(lo) if lo else 0
    hi = int(hi) if hi else depth
    if not (0 <= lo < hi <= depth):
        raise ConfigError(f"z range {text!r} outside volume depth {depth}")
    return range(lo, hi)


def cmd_overlay(args, cfg: PipelineConfig) -> int:
    vol = volcore.load_volume(args.case)
    normed, _ = volcore.zscore_normalize(vol)
    base = normed.modality(args.modality)
    pred = volcore.load_labels(args.pred) if args.pred else None
    gt = volcore.load_labels(args.gt) if args.gt else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lo = float(base.mean() - 2 * base.std())
    hi = float(base.mean() + 2 * base.std())
    for z in parse_z_range(args.z, base.shape[0]):
        gray = _to_gray(base[z], lo, hi)
        panels = []
        if pred is not None:
            panels.append(_paint(gray, pred.data[z]))
        if gt is not None:
            panels.append(_paint(gray, gt.data[z]))
        if not panels:
            panels = [np.stack([gray] * 3, axis=-1)]
        divider = np.full((gray.shape[0], 3, 3), 255, np.uint8)
        strips = []
        for i, panel in enumerate(panels):
            if i:
                strips.append(divider)
            strips.append(panel)
        image = np.concatenate(strips, axis=1)
        Image.fromarray(image).save(out / f"slice_{z:03d}.png")
    print(f"overlays written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------- e2e


def cmd_e2e(args, cfg: PipelineConfig) -> int:
    out = _prepare_out_dir(args.out, args.force)
    e2e = cfg.e2e

    ns = argparse.Namespace(out=out / "train_data", n_healthy=e2e.n_train, n_tumor=0, force=True)
    cmd_phantom(ns, cfg)
    eval_cfg = dataclasses.replace(cfg, seed=cfg.seed + 10_000)
    ns = argparse.Namespace(
        out=out / "eval_data", n_healthy=e2e.n_eval_healthy, n_tumor=e2e.n_eval_tumor, force=True
    )
    cmd_phantom(ns, eval_cfg)

    ns = argparse.Namespace(
        dataset=out / "train_data", out=out / "checkpoint",
        val_fraction=e2e.val_fraction, resume=False,
    )
    cmd_train(ns, cfg)

    state = mvitae.load_checkpoint(out / "checkpoint")
    manifest = _load_manifest(out / "eval_data")
    refiner = _make_refiner(cfg)
    scores, labels_flat = [], []
    healthy_wt_fraction = {}

    def run_case(case):
        name = case["name"]
        case_dir = out / "eval_data" / name
        segment_case(state, cfg, case_dir, out / "predictions" / name, refiner=refiner)

    try:
        _run_parallel(run_case, manifest["cases"], _n_workers(cfg))
    finally:
        if isinstance(refiner, ExternalRefiner):
            refiner.close()

    for case in manifest["cases"]:
        name = case["name"]
        case_dir = out / "eval_data" / name
        _, normed, _ = _load_normalized(case_dir)
        recon = mvitae.reconstruct_volume(state, normed)
        mse = mvitae.slice_mse_scores(normed, recon)
        gt = volcore.load_labels(case_dir)
        anomalous = (gt.data.reshape(gt.shape[0], -1) != 0).any(axis=1)
        scores.extend(float(s) for s in mse)
        labels_flat.extend(bool(a) for a in anomalous)
        if not case["tumor"]:
            pred = volcore.load_labels(out / "predictions" / name)
            wt_voxels = int((pred.data != 0).sum())
            healthy_wt_fraction[name] = wt_voxels / case["brain_voxels"]

    ns = argparse.Namespace(
        pred=out / "predictions", gt=out / "eval_data",
        out=out / "report.json", table=out / "report.txt",
    )
    cmd_evaluate(ns, cfg)
    with open(out / "report.json") as fh:
        report = json.load(fh)

    tumor_names = [c["name"] for c in manifest["cases"] if c["tumor"]]
    tumor_wt_lw = [report["per_case"][n]["WT"]["lesionwise_dice"] for n in tumor_names]
    tumor_wt_vol = [report["per_case"][n]["WT"]["volumetric_dice"] for n in tumor_names]
    summary = {
        "slice_auroc": metrics_mod.auroc(scores, labels_flat),
        "detection_rate_tumor_cases": metrics_mod.detection_rate(tumor_wt_lw),
        "mean_wt_volumetric_dice_tumor_cases": float(np.mean(tumor_wt_vol)) if tumor_wt_vol else None,
        "healthy_wt_fraction": healthy_wt_fraction,
        "n_eval_cases": len(manifest["cases"]),
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)

    for case in manifest["cases"][: e2e.overlay_cases]:
        name = case["name"]
        gt_dir = out / "eval_data" / name
        ns = argparse.Namespace(
            case=gt_dir, pred=out / "predictions" / name, gt=gt_dir,
            z=None, out=out / "overlays" / name, modality="t1c",
        )
        cmd_overlay(ns, cfg)

    print(json.dumps(summary, indent=1, sort_keys=True))
    return EXIT_OK


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uadseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, refiner=False):
        p.add_argument("--config", default=None, help="pipeline config JSON")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=None)
        if refiner:
            p.add_argument("--refiner", choices=["off", "builtin", "external"], default=None)
            p.add_argument("--refiner-cmd", nargs="+", default=None, dest="refiner_cmd")

    p = sub.add_parser("phantom", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n-healthy", type=int, default=10)
    p.add_argument("--n-tumor", type=int, default=10)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("train", help="train on the healthy slices of a dataset")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("reconstruct", help="reconstruct one case")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--case", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("segment", help="segment one case into tumor labels")
    common(p, refiner=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--case", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--debug", action="store_true", help="write per-stage volumes")

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--table", default=None, help="optional text table path")

    p = sub.add_parser("overlay", help="write segmentation overlay PNGs")
    common(p)
    p.add_argument("--case", required=True)
    p.add_argument("--pred", default=None)
    p.add_argument("--gt", default=None)
    p.add_argument("--z", default=None, help="slice range lo:hi")
    p.add_argument("--out", required=True)
    p.add_argument("--modality", default="t1c")

    p = sub.add_parser("e2e", help="phantom -> train -> segment -> evaluate")
    common(p, refiner=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--debug", action="store_true")

    return parser


COMMANDS = {
    "phantom": cmd_phantom,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "segment": cmd_segment,
    "evaluate": cmd_evaluate,
    "overlay": cmd_overlay,
    "e2e": cmd_e2e,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        cfg = _apply_flag_overrides(cfg, args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, PhantomSpecError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, VolumeError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - map anything else to the runtime code
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
