"""Command-line entry point.

Subcommands: synth, train, render, eval, analyze-visibility, propagate-masks,
gradcheck. Every run takes a JSON --config, optional repeatable
--override key=value (dotted paths, unknown keys rejected), and writes a
resolved-config snapshot next to its outputs. All randomness flows from the
single --seed. Exit codes: 0 success, 1 validation error, 2 runtime failure.
Set DECLUTTER_LOG to error, info, or debug to control verbosity.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .dataset import (
    DatasetError,
    PosedImageSet,
    SparsePointCloud,
    default_holdouts,
    load_dataset,
    load_point_cloud,
    propagate_prompts,
    save_dataset,
)

log = logging.getLogger("declutter")

_VALIDATION_ERRORS = (ValueError, KeyError, TypeError, DatasetError, FileNotFoundError, json.JSONDecodeError)


class ConfigError(ValueError):
    pass


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides: list[str], allowed_new_keys=()) -> dict:
    """Apply key=value overrides with dotted paths into a config document.

    A path must already exist in the document, except that a new top-level
    key from `allowed_new_keys` (config fields left at their defaults) may be
    introduced.
    """
    doc = copy.deepcopy(doc)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, _, raw = item.partition("=")
        parts = key.split(".")
        node = doc
        for part in parts[:-1]:
            if isinstance(node, list):
                node = node[int(part)]
            elif isinstance(node, dict) and part in node:
                node = node[part]
            else:
                raise ConfigError(f"unknown config key {key!r} (at {part!r})")
        leaf = parts[-1]
        if isinstance(node, list):
            node[int(leaf)] = _parse_value(raw)
        elif isinstance(node, dict):
            if leaf not in node and not (len(parts) == 1 and leaf in allowed_new_keys):
                raise ConfigError(f"unknown config key {key!r}")
            node[leaf] = _parse_value(raw)
        else:
            raise ConfigError(f"cannot override {key!r}: parent is not a container")
    return doc


def _load_config(args, allowed_new_keys=()) -> dict:
    path = Path(args.config)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    doc = json.loads(path.read_text())
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config root must be a JSON object")
    return apply_overrides(doc, args.override, allowed_new_keys)


def _resolve_seed(args, doc: dict) -> int:
    if args.seed is not None:
        return int(args.seed)
    return int(doc.get("seed", 0))


def _out_dir(args) -> Path:
    if not args.out:
        raise ConfigError("--out is required for this subcommand")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_snapshot(out: Path, subcommand: str, doc: dict, seed: int) -> None:
    snapshot = {"subcommand": subcommand, "seed": seed, "config": doc}
    (out / "resolved_config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True))


def cmd_synth(args) -> int:
    from . import plots
    from .scene import occluder_mask, render_oracle, scene_from_json, sparse_point_cloud

    doc = _load_config(args)
    seed = _resolve_seed(args, doc)
    doc["seed"] = seed
    out = _out_dir(args)
    scene, rig, _ = scene_from_json(doc)
    samples = int(doc.get("samples_per_ray", 128))
    stratified = bool(doc.get("stratified", False))
    holdouts = doc.get("holdout_indices")
    if holdouts is None:
        holdouts = default_holdouts(rig.num_views)

    log.info("rendering %d views at %dx%d", rig.num_views, rig.width, rig.height)
    images, masks = [], []
    for v in range(rig.num_views):
        images.append(
            render_oracle(scene, rig, v, samples, include_occluders=True,
                          stratified=stratified, seed=seed + v)
        )
        masks.append(occluder_mask(scene, rig, v))
    dataset = PosedImageSet(
        images=images,
        masks=masks,
        intrinsics=rig.intrinsics,
        poses=rig.poses,
        near=scene.near,
        far=scene.far,
        holdout_indices=[int(i) for i in holdouts],
    )
    points, observations = sparse_point_cloud(scene, rig, stride=int(doc.get("cloud_stride", 4)))
    save_dataset(dataset, out, cloud=SparsePointCloud(points, observations))
    plots.dataset_contact_sheet(dataset, out / "overview.png")
    _write_snapshot(out, "synth", doc, seed)
    log.info("dataset written to %s", out)
    return 0


def cmd_train(args) -> int:
    from . import plots
    from .training import TrainConfig, train

    doc = _load_config(args, allowed_new_keys={f.name for f in _train_fields()})
    if args.seed is not None:
        doc["seed"] = int(args.seed)
    config = TrainConfig.from_dict(doc)
    out = _out_dir(args)
    _write_snapshot(out, "train", config.to_dict(), config.seed)
    result = train(config, out_dir=out)
    plots.metrics_figure(result.metrics, out / "metrics.png")
    last = result.metrics[-1] if result.metrics else {}
    log.info("final losses: %s", {k: last.get(k) for k in ("mse", "occ", "s3im")})
    print(f"trained {config.total_iters} iterations -> {result.final_checkpoint}")
    return 0


def _train_fields():
    from dataclasses import fields

    from .training import TrainConfig

    return fields(TrainConfig)


def cmd_render(args) -> int:
    from . import plots
    from .training import load_trained, render_view

    doc = _load_config(args)
    seed = _resolve_seed(args, doc)
    out = _out_dir(args)
    checkpoint = doc.get("checkpoint")
    if not checkpoint:
        raise ConfigError("render config needs a 'checkpoint' path")
    dataset = load_dataset(doc["dataset_dir"]) if "dataset_dir" in doc else None
    config, field, cameras, dataset = load_trained(checkpoint, dataset)
    if "pose" in doc:
        pose = np.asarray(doc["pose"], dtype=np.float64).reshape(3, 4)
        view = "pose"
    else:
        view = int(doc.get("view_index", 0))
        pose = dataset.poses[view]
    resolution = doc.get("resolution", [dataset.width, dataset.height])
    image = render_view(
        field,
        pose,
        dataset.intrinsics,
        resolution,
        dataset.near,
        dataset.far,
        int(doc.get("samples_per_ray", config.samples_per_ray)),
        config.white_background,
        chunk=config.render_chunk,
    )
    path = plots.save_image_png(image, out / f"render_{view}.png")
    _write_snapshot(out, "render", doc, seed)
    print(f"wrote {path}")
    return 0


def cmd_eval(args) -> int:
    from . import plots
    from .evaluation import eval_report
    from .training import load_trained

    doc = _load_config(args)
    seed = _resolve_seed(args, doc)
    out = _out_dir(args)
    checkpoint = doc.get("checkpoint")
    if not checkpoint:
        raise ConfigError("eval config needs a 'checkpoint' path")
    dataset = load_dataset(doc["dataset_dir"]) if "dataset_dir" in doc else None
    config, field, cameras, dataset = load_trained(checkpoint, dataset)
    renders: dict[int, np.ndarray] = {}
    report = eval_report(field, dataset, config, renders_out=renders)
    report.save_csv(out / "report.csv")
    (out / "report.txt").write_text(report.to_text() + "\n")
    for view, image in renders.items():
        plots.comparison_figure(
            dataset.images[view], image, dataset.masks[view],
            out / f"holdout_{view:03d}.png", title=f"holdout view {view}",
        )
    _write_snapshot(out, "eval", doc, seed)
    print(report.to_text())
    return 0


def cmd_analyze_visibility(args) -> int:
    import csv

    from . import plots
    from .sampling import (
        VisibilityHistogram,
        fit_longtail,
        patch_distribution,
        valid_view_count_map,
    )

    doc = _load_config(args)
    seed = _resolve_seed(args, doc)
    out = _out_dir(args)

    if "scene" in doc:
        from .scene import pixel_visibility, scene_from_json

        scene, rig, _ = scene_from_json(doc["scene"])
        vis_map = pixel_visibility(scene, rig, int(doc.get("reference_view", 0)))
        estimator = "oracle"
        approximation = False
    elif "dataset_dir" in doc:
        dataset = load_dataset(doc["dataset_dir"])
        vis_map = valid_view_count_map(dataset)
        estimator = "valid-view-count"
        approximation = True
        log.warning("no oracle available: visibility is approximated by per-pixel valid view counts")
    else:
        raise ConfigError("analyze-visibility config needs 'scene' or 'dataset_dir'")

    hist = VisibilityHistogram.from_values(vis_map)
    try:
        alpha = fit_longtail(hist)
    except ValueError as exc:
        log.warning("long-tail fit failed: %s", exc)
        alpha = None

    with open(out / "visibility.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "count", "p"])
        total = sum(hist.counts.values())
        for x in sorted(hist.counts):
            writer.writerow([x, hist.counts[x], hist.counts[x] / total])

    patch_sides = [int(k) for k in doc.get("patch_sides", [2, 4, 8])]
    trials = int(doc.get("trials", 200))
    patch_count = int(doc.get("patch_count", 8))
    stats_by_k = {}
    for k in patch_sides:
        stats_by_k[k] = patch_distribution(
            vis_map.ravel(), k, patch_count, trials, seed, with_replacement=False
        )
    summary = {
        "alpha": alpha,
        "x_max": hist.x_max,
        "estimator": estimator,
        "approximation": approximation,
        "variance_ratio": {str(k): stats_by_k[k].variance_ratio for k in patch_sides},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    plots.visibility_histogram_figure(hist, out / "histogram.png")
    plots.visibility_map_figure(vis_map, out / "visibility_map.png")
    plots.patch_variance_figure(stats_by_k, out / "patch_variance.png")
    _write_snapshot(out, "analyze-visibility", doc, seed)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_propagate_masks(args) -> int:
    from . import plots

    doc = _load_config(args)
    seed = _resolve_seed(args, doc)
    out = _out_dir(args)
    dataset = load_dataset(doc["dataset_dir"])
    cloud = load_point_cloud(doc["dataset_dir"])
    prompts = doc["prompts"]
    view_index = int(doc.get("view_index", 0))
    radius = float(doc.get("pixel_radius", 8.0))
    result = propagate_prompts(prompts, view_index, cloud, dataset, radius)
    output = {
        "view_index": view_index,
        "pixel_radius": radius,
        "point_indices": result.point_indices,
        "projections": [
            {str(view): list(uv) for view, uv in per_view.items()}
            for per_view in result.projections
        ],
        "unmatched": result.unmatched,
    }
    (out / "propagated.json").write_text(json.dumps(output, indent=2))
    plots.propagation_figure(dataset, result, out / "propagation.png")
    _write_snapshot(out, "propagate-masks", doc, seed)
    if result.unmatched:
        log.warning("%d prompt(s) had no 3D point within %.1f px", len(result.unmatched), radius)
    print(f"propagated {len(result.projections)} prompt(s), {len(result.unmatched)} unmatched")
    return 0


def cmd_gradcheck(args) -> int:
    import torch

    from .field import RenderConfig, gradient_check
    from .losses import S3IMConfig
    from .sampling import sample_batch
    from .training import TrainConfig, build_modules

    doc = _load_config(args, allowed_new_keys={f.name for f in _train_fields()})
    if args.seed is not None:
        doc["seed"] = int(args.seed)
    config = TrainConfig.from_dict(doc)
    dataset = load_dataset(config.dataset_dir, scale=config.scale)
    field, cameras = build_modules(config, dataset)
    schedule = config.schedule()

    batch_size = min(64, max(len(dataset.train_indices), 48))
    views, xy = sample_batch(dataset, batch_size, config.seed)
    s3im_cfg = S3IMConfig(patch_side=4, patch_count=batch_size // 16, window=2)
    render = RenderConfig(
        samples_per_ray=min(config.samples_per_ray, 16),
        near=dataset.near,
        far=dataset.far,
        stratified=False,
        white_background=config.white_background,
    )
    result = gradient_check(
        field, cameras, (views, xy), dataset.images, dataset.masks,
        schedule, s3im_cfg, t=schedule.t_c, render=render, seed=config.seed,
    )
    print(f"max relative gradient error: {result.max_rel_error:.3e} over {result.num_coords} coordinates")
    if args.out:
        out = _out_dir(args)
        _write_snapshot(out, "gradcheck", config.to_dict(), config.seed)
        (out / "gradcheck.json").write_text(
            json.dumps({"max_rel_error": result.max_rel_error, "num_coords": result.num_coords})
        )
    return 0 if result.max_rel_error < 1e-3 else 2


_SUBCOMMANDS = {
    "synth": (cmd_synth, "generate a synthetic dataset from a scene description"),
    "train": (cmd_train, "train a radiance field on a dataset directory"),
    "render": (cmd_render, "render a view from a checkpoint"),
    "eval": (cmd_eval, "evaluate a checkpoint on held-out views"),
    "analyze-visibility": (cmd_analyze_visibility, "long-tail visibility statistics and plots"),
    "propagate-masks": (cmd_propagate_masks, "carry point prompts into all views"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of the training gradients"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="declutter", description=__doc__.splitlines()[0])
    subparsers = parser.add_subparsers(dest="subcommand", required=True)
    for name, (_, help_text) in _SUBCOMMANDS.items():
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument("--config", required=True, help="JSON config file")
        sub.add_argument("--out", default=None, help="output directory")
        sub.add_argument("--seed", type=int, default=None,
                         help="seed for all randomness (default 0; overrides the config)")
        sub.add_argument("--override", action="append", default=[], metavar="K=V",
                         help="config override, dotted keys allowed; repeatable")
        sub.add_argument("--device", default=None, help="numeric backend hint (opaque)")
    return parser


def _setup_logging() -> None:
    level_name = os.environ.get("DECLUTTER_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level_name not in levels:
        level_name = "info"
    logging.basicConfig(level=levels[level_name], format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad flags; map to the validation-error code
        return 0 if exc.code in (0, None) else 1
    handler = _SUBCOMMANDS[args.subcommand][0]
    try:
        return handler(args)
    except _VALIDATION_ERRORS as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.error("runtime failure: %s", exc)
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
