"""Command line interface.

Subcommands: decompose, train, eval, generate, retexture, tune.
Exit codes: 0 success, 1 configuration or usage error, 2 I/O or file
format error, 3 data contract violation (dimensions, ranges), 4
numerical failure (solver non-convergence, diverged training).
All output files are written atomically; a failing command leaves no
partial outputs behind.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from typing import Optional

import numpy as np

from intrinsic.bilateral import BilateralParams, solver_param_search
from intrinsic.datasets import (
    MondrianConfig,
    _atomic_write_bytes,
    gen_judgements,
    gen_mondrian,
    gen_real_pair,
    load_image,
    load_judgements,
    load_manifest,
    load_real_group,
    load_synthetic_scene,
    save_judgements,
    save_pfm,
    save_png,
)
from intrinsic.errors import (
    ConfigError,
    ContractError,
    ConvergenceError,
    DimensionError,
    FileFormatError,
    ManifestError,
    RangeError,
    TrainingDivergedError,
)
from intrinsic.image import ImageF, retexture, rgb_to_grayscale
from intrinsic.metrics import (
    EvalScene,
    MetricConfig,
    evaluate_scene,
    decompose as run_decompose,
    mpre,
)
from intrinsic.network import IntrinsicNet, NetConfig, load, save
from intrinsic.trainer import TrainConfig, train_stage1, train_stage2

_SOLVER_FLAG_FIELDS = {
    "gamma": "gamma",
    "sigma_x": "sigma_x",
    "sigma_y": "sigma_y",
    "sigma_l": "sigma_l",
    "sigma_u": "sigma_u",
    "sigma_v": "sigma_v",
    "solver_backend": "backend",
    "cg_tol": "cg_tol",
    "cg_max_iter": "cg_max_iter",
}


def _add_solver_flags(parser: argparse.ArgumentParser):
    group = parser.add_argument_group("edge-aware solver")
    group.add_argument(
        "--no-bilateral",
        action="store_true",
        help="skip the edge-aware reflectance filter entirely",
    )
    group.add_argument("--gamma", type=float, default=None,
                       help="smoothing strength (solver default 12000)")
    group.add_argument("--sigma-x", type=float, default=None,
                       help="spatial bandwidth, columns (solver default 5)")
    group.add_argument("--sigma-y", type=float, default=None,
                       help="spatial bandwidth, rows (solver default 5)")
    group.add_argument("--sigma-l", type=float, default=None,
                       help="lightness bandwidth (solver default 7)")
    group.add_argument("--sigma-u", type=float, default=None,
                       help="chroma u bandwidth (solver default 3)")
    group.add_argument("--sigma-v", type=float, default=None,
                       help="chroma v bandwidth (solver default 3)")
    group.add_argument("--solver-backend", choices=("grid", "dense"), default=None,
                       help="affinity backend (solver default grid)")
    group.add_argument("--cg-tol", type=float, default=None,
                       help="relative residual tolerance (solver default 1e-6)")
    group.add_argument("--cg-max-iter", type=int, default=None,
                       help="iteration budget (solver default 500)")


def _solver_from_args(args) -> tuple:
    """(params, filtered); explicit solver flags conflict with --no-bilateral."""
    explicit = {
        field: getattr(args, flag)
        for flag, field in _SOLVER_FLAG_FIELDS.items()
        if getattr(args, flag, None) is not None
    }
    if args.no_bilateral and explicit:
        names = ", ".join("--" + k.replace("_", "-") for k in sorted(explicit))
        raise ConfigError(f"--no-bilateral conflicts with {names}")
    params = BilateralParams(**explicit)
    return params, not args.no_bilateral


def _save_image_any(img: ImageF, path: str):
    ext = os.path.splitext(path)[1].lower()
    if ext == ".pfm":
        save_pfm(img, path)
    elif ext == ".png":
        save_png(img, path)
    else:
        raise ConfigError(f"unsupported output extension {ext!r} for {path}")


def _preview(img: ImageF) -> ImageF:
    peak = float(img.data.max())
    if peak <= 0:
        return ImageF(np.zeros_like(img.data))
    return ImageF(np.clip(img.data / peak, 0.0, 1.0))


def _write_json(doc, path: str):
    _atomic_write_bytes(path, (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode())


def _write_jsonl(records, path: str):
    lines = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    _atomic_write_bytes(path, lines.encode())


# ---------------------------------------------------------------------------
# decompose

def _cmd_decompose(args) -> int:
    params, filtered = _solver_from_args(args)
    net = load(args.checkpoint)
    image = load_image(args.input, linearize=not args.assume_linear)
    refl, shad = run_decompose(net, image, bilateral_params=params, filtered=filtered)
    os.makedirs(args.out_dir, exist_ok=True)
    save_pfm(refl, os.path.join(args.out_dir, "reflectance.pfm"))
    save_pfm(shad, os.path.join(args.out_dir, "shading.pfm"))
    save_png(_preview(refl), os.path.join(args.out_dir, "reflectance.png"))
    save_png(_preview(shad), os.path.join(args.out_dir, "shading.png"))
    print(f"wrote reflectance and shading (pfm + png previews) to {args.out_dir}")
    return 0


# ---------------------------------------------------------------------------
# train

def _stage_log_path(base: str, stage: int, both: bool) -> str:
    if not both:
        return base
    stem, ext = os.path.splitext(base)
    return f"{stem}.stage{stage}{ext or '.jsonl'}"


def _stage1_ckpt_path(out: str) -> str:
    stem, ext = os.path.splitext(out)
    return f"{stem}.stage1{ext or '.intrk'}"


def _cmd_train(args) -> int:
    params, filtered = _solver_from_args(args)
    stages = {"1": (1,), "2": (2,), "both": (1, 2)}[args.stage]
    if 2 in stages and 1 not in stages and not args.init and not args.cold_start:
        raise ConfigError(
            "stage 2 needs --init with a stage-1 checkpoint, or --cold-start "
            "to train from scratch deliberately"
        )
    manifest = load_manifest(args.manifest)
    if not manifest.synthetic_scenes:
        raise ConfigError("training needs synthetic_scenes in the manifest")
    if 2 in stages and not manifest.real_scenes and not args.allow_synthetic_only:
        raise ConfigError(
            "stage 2 found no real_scenes in the manifest; pass "
            "--allow-synthetic-only to run the synthetic-only ablation"
        )
    config = TrainConfig(
        lr=args.lr,
        crop=args.crop,
        stage1_batch=args.stage1_batch,
        stage2_synthetic=args.stage2_synthetic,
        stage2_real=args.stage2_real,
        stage1_iters=args.stage1_iters,
        stage2_iters=args.stage2_iters,
        omega=args.omega,
        bilateral=params,
        filtered=filtered,
        flip=args.flip,
        seed=args.seed,
        checkpoint_every=args.checkpoint_every,
        log_every=args.log_every,
    )
    if args.init:
        net = load(args.init)
    else:
        net = IntrinsicNet(
            NetConfig(
                levels=args.levels,
                base_channels=args.base_channels,
                seed=args.net_seed,
            )
        )
    triplets = [load_synthetic_scene(r) for r in manifest.synthetic_scenes]
    groups = [load_real_group(r) for r in manifest.real_scenes]
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    ckpt_dir = out_dir if config.checkpoint_every else None
    log_base = args.log if args.log else args.out + ".train.jsonl"
    both = len(stages) == 2
    if 1 in stages:
        log1 = train_stage1(net, triplets, config, out_dir=ckpt_dir)
        _write_jsonl(log1, _stage_log_path(log_base, 1, both))
        if log1:
            print(
                f"stage 1: {len(log1)} iterations, "
                f"e_syn {log1[0]['e_syn']:.4f} -> {log1[-1]['e_syn']:.4f}"
            )
        if both:
            save(net, _stage1_ckpt_path(args.out))
    if 2 in stages:
        log2 = train_stage2(net, triplets, groups, config, out_dir=ckpt_dir)
        _write_jsonl(log2, _stage_log_path(log_base, 2, both))
        kept = [r for r in log2 if not r.get("skipped")]
        skipped = len(log2) - len(kept)
        if kept:
            print(
                f"stage 2: {len(kept)} iterations ({skipped} skipped), "
                f"total {kept[0]['total']:.4f} -> {kept[-1]['total']:.4f}"
            )
    save(net, args.out)
    print(f"wrote checkpoint {args.out}")
    return 0


# ---------------------------------------------------------------------------
# eval

_METRIC_SECTIONS = {
    "simse": ("synthetic_scenes", "synthetic"),
    "silmse": ("synthetic_scenes", "synthetic"),
    "whdr": ("judgement_scenes", "judgement"),
    "mpre": ("real_scenes", "real"),
}


def _summary_stats(values: list) -> dict:
    return {
        "mean": float(np.mean(values)),
        "median": float(np.median(values)),
        "count": len(values),
    }


def _cmd_eval(args) -> int:
    params, filtered = _solver_from_args(args)
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    if not metrics:
        raise ConfigError("--metrics must name at least one metric")
    for m in metrics:
        if m not in _METRIC_SECTIONS:
            raise ConfigError(
                f"unknown metric {m!r} (choose from {sorted(_METRIC_SECTIONS)})"
            )
    manifest = load_manifest(args.manifest)
    for m in metrics:
        section = _METRIC_SECTIONS[m][0]
        if not getattr(manifest, section):
            raise ConfigError(f"metric {m!r} needs {section} in the manifest")
    if not args.oracle and not args.checkpoint:
        raise ConfigError("eval needs --checkpoint (or --oracle)")
    net = None if args.oracle else load(args.checkpoint)
    mconfig = MetricConfig(
        whdr_delta=args.whdr_delta,
        lmse_window_frac=args.lmse_window_frac,
        lmse_stride_frac=args.lmse_stride_frac,
        mpre_resize=args.mpre_resize,
    )
    scene_reports = {}
    flat: dict = {}

    def record(scene_id: str, report: dict):
        scene_reports.setdefault(scene_id, {}).update(report)
        for name, value in report.items():
            if isinstance(value, dict):
                for sub, v in value.items():
                    flat.setdefault(f"{name}.{sub}", []).append(v)
            else:
                flat.setdefault(name, []).append(value)

    syn_metrics = [m for m in metrics if _METRIC_SECTIONS[m][1] == "synthetic"]
    if syn_metrics:
        for ref in manifest.synthetic_scenes:
            trip = load_synthetic_scene(ref)
            scene = EvalScene(
                scene_id=ref.id,
                kind="synthetic",
                images=[trip.input],
                reflectance_gt=trip.reflectance,
                shading_gt=trip.shading,
            )
            if args.oracle:
                fn = lambda img, t=trip: (t.reflectance, t.shading)
                report = evaluate_scene(fn, scene, syn_metrics, mconfig)
            else:
                report = evaluate_scene(
                    net, scene, syn_metrics, mconfig,
                    bilateral_params=params, filtered=filtered,
                )
            record(ref.id, report)
    if "whdr" in metrics:
        for ref in manifest.judgement_scenes:
            image = load_image(ref.image_path)
            judgements = load_judgements(ref.judgement_path)
            scene = EvalScene(
                scene_id=ref.id, kind="judgement", images=[image],
                judgements=judgements,
            )
            if args.oracle:
                if not ref.gt_reflectance_path:
                    raise ConfigError(
                        f"--oracle needs gt_reflectance_path on judgement "
                        f"scene {ref.id!r}"
                    )
                gt = load_image(ref.gt_reflectance_path)
                fn = lambda img, g=gt: (g, g)
                report = evaluate_scene(fn, scene, ["whdr"], mconfig)
            else:
                report = evaluate_scene(
                    net, scene, ["whdr"], mconfig,
                    bilateral_params=params, filtered=filtered,
                )
            record(ref.id, report)
    if "mpre" in metrics:
        for ref in manifest.real_scenes:
            group = load_real_group(ref)
            if args.oracle:
                if not ref.gt_reflectance_path or not ref.gt_shading_paths:
                    raise ConfigError(
                        f"--oracle needs gt_reflectance_path and "
                        f"gt_shading_paths on real scene {ref.id!r}"
                    )
                gt_r = load_image(ref.gt_reflectance_path)
                gt_s = [load_image(p) for p in ref.gt_shading_paths]
                gt_s = [s if s.channels == 1 else rgb_to_grayscale(s) for s in gt_s]
                if len(gt_s) != len(group.images):
                    raise ManifestError(
                        f"real scene {ref.id!r}: {len(gt_s)} ground-truth "
                        f"shadings for {len(group.images)} images"
                    )
                triples = [
                    (img, gt_r, s) for img, s in zip(group.images, gt_s)
                ]
                record(ref.id, {"mpre": mpre(triples)})
            else:
                scene = EvalScene(
                    scene_id=ref.id, kind="real", images=group.images,
                )
                report = evaluate_scene(
                    net, scene, ["mpre"], mconfig,
                    bilateral_params=params, filtered=filtered,
                )
                record(ref.id, report)
    doc = {
        "metrics": metrics,
        "scenes": scene_reports,
        "summary": {key: _summary_stats(vals) for key, vals in sorted(flat.items())},
    }
    if args.report:
        _write_json(doc, args.report)
        print(f"wrote report {args.report}")
    for key, stats in doc["summary"].items():
        print(f"{key}: mean {stats['mean']:.6f} median {stats['median']:.6f} "
              f"over {stats['count']} scenes")
    return 0


# ---------------------------------------------------------------------------
# generate

def _load_or_new_manifest_doc(path: str) -> dict:
    if os.path.isfile(path):
        with open(path, "rb") as f:
            try:
                doc = json.load(f)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}: not valid JSON: {exc}") from exc
        if doc.get("version") != 1:
            raise ManifestError(f"{path}: unsupported manifest version")
        return doc
    return {
        "version": 1,
        "synthetic_scenes": [],
        "real_scenes": [],
        "judgement_scenes": [],
    }


def _cmd_generate(args) -> int:
    if args.count < 1:
        raise ConfigError(f"--count must be >= 1, got {args.count}")
    os.makedirs(args.out_dir, exist_ok=True)
    manifest_path = os.path.join(args.out_dir, "manifest.json")
    doc = _load_or_new_manifest_doc(manifest_path)
    existing_ids = {
        e["id"]
        for section in ("synthetic_scenes", "real_scenes", "judgement_scenes")
        for e in doc.get(section, [])
    }

    def base_cfg(k: int) -> MondrianConfig:
        return MondrianConfig(
            width=args.width,
            height=args.height,
            n_regions=args.regions,
            seed=(args.seed, k),
        )

    def claim(scene_id: str) -> str:
        if scene_id in existing_ids:
            raise ManifestError(
                f"{manifest_path}: id {scene_id!r} already present; "
                "use a different --seed or --out-dir"
            )
        existing_ids.add(scene_id)
        return scene_id

    if args.kind == "mondrian":
        section = doc.setdefault("synthetic_scenes", [])
        offset = len(section)
        for k in range(args.count):
            sid = claim(f"syn{offset + k:03d}")
            trip = gen_mondrian(base_cfg(k))
            names = {
                "input_path": f"{sid}_input.pfm",
                "reflectance_path": f"{sid}_reflectance.pfm",
                "shading_path": f"{sid}_shading.pfm",
            }
            save_pfm(trip.input, os.path.join(args.out_dir, names["input_path"]))
            save_pfm(trip.reflectance, os.path.join(args.out_dir, names["reflectance_path"]))
            save_pfm(trip.shading, os.path.join(args.out_dir, names["shading_path"]))
            section.append({"id": sid, **names})
    elif args.kind == "pairs":
        if not 2 <= args.images_per_scene <= 8:
            raise ConfigError(
                f"--images-per-scene must lie in [2, 8], got {args.images_per_scene}"
            )
        section = doc.setdefault("real_scenes", [])
        offset = len(section)
        for k in range(args.count):
            sid = claim(f"pair{offset + k:03d}")
            group, (gt_r, gt_s) = gen_real_pair(base_cfg(k), args.images_per_scene)
            image_paths = []
            shading_paths = []
            for i, img in enumerate(group.images):
                name = f"{sid}_im{i}.pfm"
                save_pfm(img, os.path.join(args.out_dir, name))
                image_paths.append(name)
            for i, s in enumerate(gt_s):
                name = f"{sid}_shading{i}.pfm"
                save_pfm(s, os.path.join(args.out_dir, name))
                shading_paths.append(name)
            refl_name = f"{sid}_reflectance.pfm"
            save_pfm(gt_r, os.path.join(args.out_dir, refl_name))
            section.append(
                {
                    "id": sid,
                    "image_paths": image_paths,
                    "gt_reflectance_path": refl_name,
                    "gt_shading_paths": shading_paths,
                }
            )
    elif args.kind == "judgements":
        section = doc.setdefault("judgement_scenes", [])
        offset = len(section)
        for k in range(args.count):
            sid = claim(f"jud{offset + k:03d}")
            trip = gen_mondrian(base_cfg(k))
            rng = np.random.default_rng((args.seed, k, 1))
            judgements = gen_judgements(trip, args.pairs_per_scene, args.delta, rng)
            image_name = f"{sid}_image.pfm"
            judge_name = f"{sid}_judgements.json"
            refl_name = f"{sid}_reflectance.pfm"
            save_pfm(trip.input, os.path.join(args.out_dir, image_name))
            save_judgements(judgements, os.path.join(args.out_dir, judge_name))
            save_pfm(trip.reflectance, os.path.join(args.out_dir, refl_name))
            section.append(
                {
                    "id": sid,
                    "image_path": image_name,
                    "judgement_path": judge_name,
                    "gt_reflectance_path": refl_name,
                }
            )
    _write_json(doc, manifest_path)
    print(f"generated {args.count} {args.kind} scene(s); manifest {manifest_path}")
    return 0


# ---------------------------------------------------------------------------
# retexture

def _cmd_retexture(args) -> int:
    params, filtered = _solver_from_args(args)
    net = load(args.checkpoint)
    image = load_image(args.input, linearize=not args.assume_linear)
    texture = load_image(args.texture, linearize=not args.assume_linear)
    mask = load_image(args.mask, linearize=False)
    if mask.channels == 3:
        mask = rgb_to_grayscale(mask)
    _refl, shad = run_decompose(net, image, bilateral_params=params, filtered=filtered)
    result = retexture(texture, shad, mask, image)
    _save_image_any(result, args.out)
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# tune

def _cmd_tune(args) -> int:
    with open(args.grid, "rb") as f:
        try:
            grid = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.grid}: not valid JSON: {exc}") from exc
    if not isinstance(grid, list) or not grid:
        raise ConfigError(f"{args.grid}: expected a non-empty JSON list of parameter sets")
    candidates = []
    for entry in grid:
        if not isinstance(entry, dict):
            raise ConfigError(f"{args.grid}: grid entries must be objects, got {entry!r}")
        try:
            candidates.append(BilateralParams(**entry))
        except TypeError as exc:
            raise ConfigError(f"{args.grid}: bad parameter set {entry!r}: {exc}") from exc
    manifest = load_manifest(args.manifest)
    if not manifest.judgement_scenes:
        raise ConfigError("tune needs judgement_scenes in the manifest")
    net = load(args.checkpoint)
    reflectances, guides, judgement_sets = [], [], []
    for ref in manifest.judgement_scenes:
        image = load_image(ref.image_path)
        refl, _shad = run_decompose(net, image, filtered=False)
        reflectances.append(refl)
        guides.append(image)
        judgement_sets.append(load_judgements(ref.judgement_path))
    best, scores = solver_param_search(
        candidates, reflectances, guides, judgement_sets,
        delta=args.whdr_delta, with_scores=True,
    )
    table = [
        {"params": dataclasses.asdict(c), "mean_whdr": s}
        for c, s in zip(candidates, scores)
    ]
    doc = {"best": dataclasses.asdict(best), "table": table}
    _write_json(doc, args.out)
    best_score = min(scores)
    print(f"best mean whdr {best_score:.6f} with {dataclasses.asdict(best)}")
    print(f"wrote sweep {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="intrinsic",
        description="Intrinsic image decomposition: train, apply, and "
        "evaluate reflectance/shading models.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser(
        "decompose",
        help="split one image into reflectance and shading",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p.add_argument("--input", required=True, help="input image (.png or .pfm)")
    p.add_argument("--checkpoint", required=True, help="trained model checkpoint")
    p.add_argument("--out-dir", required=True, help="directory for outputs")
    p.add_argument("--assume-linear", action="store_true",
                   help="treat PNG input as already linear (skip sRGB decoding)")
    _add_solver_flags(p)
    p.set_defaults(func=_cmd_decompose)

    p = sub.add_parser(
        "train",
        help="train the decomposition network",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p.add_argument("--manifest", required=True, help="dataset manifest JSON")
    p.add_argument("--out", required=True, help="final checkpoint path")
    p.add_argument("--log", default=None,
                   help="training log JSONL path (default: <out>.train.jsonl; "
                   "stage suffix inserted when --stage both)")
    p.add_argument("--stage", choices=("1", "2", "both"), default="both",
                   help="which training stage(s) to run")
    p.add_argument("--init", default=None,
                   help="checkpoint to continue from (required for --stage 2 "
                   "unless --cold-start)")
    p.add_argument("--cold-start", action="store_true",
                   help="allow stage 2 from random weights")
    p.add_argument("--allow-synthetic-only", action="store_true",
                   help="run stage 2 without real scenes (ablation)")
    p.add_argument("--levels", type=int, default=4, help="encoder downsampling levels")
    p.add_argument("--base-channels", type=int, default=16,
                   help="channels at the first level")
    p.add_argument("--net-seed", type=int, default=0, help="weight init seed")
    p.add_argument("--lr", type=float, default=2e-4, help="Adam learning rate")
    p.add_argument("--crop", type=int, default=64, help="square crop size")
    p.add_argument("--stage1-batch", type=int, default=4, help="stage-1 batch size")
    p.add_argument("--stage2-synthetic", type=int, default=4,
                   help="synthetic triplets per stage-2 batch")
    p.add_argument("--stage2-real", type=int, default=4,
                   help="real pairs per stage-2 batch")
    p.add_argument("--stage1-iters", type=int, default=2000, help="stage-1 iterations")
    p.add_argument("--stage2-iters", type=int, default=2000, help="stage-2 iterations")
    p.add_argument("--omega", type=float, default=0.5, help="real-pair loss weight")
    p.add_argument("--seed", type=int, default=0, help="batch sampling seed")
    p.add_argument("--flip", action="store_true",
                   help="random horizontal flips (applied identically within a pair)")
    p.add_argument("--checkpoint-every", type=int, default=0,
                   help="save periodic checkpoints every N iterations (0 = off)")
    p.add_argument("--log-every", type=int, default=1, help="log every N iterations")
    _add_solver_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser(
        "eval",
        help="evaluate a checkpoint against a manifest",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p.add_argument("--manifest", required=True, help="dataset manifest JSON")
    p.add_argument("--checkpoint", default=None, help="trained model checkpoint")
    p.add_argument("--metrics", default="simse",
                   help="comma-separated: simse,silmse,whdr,mpre")
    p.add_argument("--report", default=None, help="write the full report JSON here")
    p.add_argument("--oracle", action="store_true",
                   help="score the manifest's ground-truth decompositions instead "
                   "of a checkpoint")
    p.add_argument("--whdr-delta", type=float, default=0.10,
                   help="relative lightness threshold")
    p.add_argument("--lmse-window-frac", type=float, default=0.10,
                   help="window side as a fraction of max(H, W)")
    p.add_argument("--lmse-stride-frac", type=float, default=0.05,
                   help="window stride as a fraction of max(H, W)")
    p.add_argument("--mpre-resize", type=int, default=640,
                   help="downscale real images so the larger side fits this")
    _add_solver_flags(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser(
        "generate",
        help="generate synthetic scenes and a manifest",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p.add_argument("--kind", required=True, choices=("mondrian", "pairs", "judgements"),
                   help="what to generate")
    p.add_argument("--count", type=int, required=True, help="number of scenes")
    p.add_argument("--out-dir", required=True,
                   help="output directory (manifest.json is created or extended)")
    p.add_argument("--seed", type=int, default=0, help="generation seed")
    p.add_argument("--width", type=int, default=64, help="scene width")
    p.add_argument("--height", type=int, default=64, help="scene height")
    p.add_argument("--regions", type=int, default=12, help="reflectance regions")
    p.add_argument("--images-per-scene", type=int, default=4,
                   help="images per real scene (pairs only)")
    p.add_argument("--pairs-per-scene", type=int, default=30,
                   help="judgement pairs per scene (judgements only)")
    p.add_argument("--delta", type=float, default=0.10,
                   help="labeling threshold (judgements only)")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser(
        "retexture",
        help="swap reflectance under the estimated shading",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p.add_argument("--input", required=True, help="photograph to edit")
    p.add_argument("--checkpoint", required=True, help="trained model checkpoint")
    p.add_argument("--texture", required=True, help="replacement reflectance image")
    p.add_argument("--mask", required=True,
                   help="binary mask (1 = replace, 0 = keep original)")
    p.add_argument("--out", required=True, help="output image (.png or .pfm)")
    p.add_argument("--assume-linear", action="store_true",
                   help="treat PNG inputs as already linear")
    _add_solver_flags(p)
    p.set_defaults(func=_cmd_retexture)

    p = sub.add_parser(
        "tune",
        help="grid-search solver parameters against judgements",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p.add_argument("--manifest", required=True, help="manifest with judgement_scenes")
    p.add_argument("--checkpoint", required=True, help="trained model checkpoint")
    p.add_argument("--grid", required=True,
                   help="JSON file: list of solver parameter objects")
    p.add_argument("--out", required=True, help="write best params and sweep table here")
    p.add_argument("--whdr-delta", type=float, default=0.10,
                   help="relative lightness threshold")
    p.set_defaults(func=_cmd_tune)

    return parser


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help and 2 for usage errors; fold usage
        # errors into the configuration exit code.
        return 0 if exc.code in (0, None) else 1
    if not getattr(args, "command", None):
        parser.print_help()
        return 1
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileFormatError, ManifestError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DimensionError, ContractError, RangeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ConvergenceError, TrainingDivergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
