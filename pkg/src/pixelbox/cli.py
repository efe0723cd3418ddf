"""Command-line entry point: evaluate, preprocess, synth, gradcheck, fit, rectify.

Every subcommand is deterministic given its flags and --seed. Output files
are written atomically (write to a temp file, then rename). Exit codes:

* 0  success
* 2  argument/usage error (argparse)
* 3  schema error in an input file (message names file and line)
* 4  prediction/ground-truth instance ids do not match one-to-one
* 5  gradient check exceeded tolerance
* 6  synthetic generation infeasible for the requested config
* 7  the heatmap fit diverged
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import dataio, losses, metrics, synth
from .errors import (
    Diverged,
    GenerationExhausted,
    PixelboxError,
    SchemaError,
    UnmatchedInstance,
)
from .fields import DEFAULT_BETA, Grid
from .geometry import VIRTUAL_FOCAL, VIRTUAL_HEIGHT, convert_corner_depths, unproject_corners

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_SCHEMA = 3
EXIT_UNMATCHED = 4
EXIT_TOLERANCE = 5
EXIT_GENERATION = 6
EXIT_DIVERGED = 7


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_write_with(path, writer) -> None:
    """Run a path-consuming writer against a temp file, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def cmd_evaluate(args) -> int:
    scenes = dataio.parse_annotations(args.gt)
    predictions = {r.instance_id: r.corner_set for r in dataio.read_predictions(args.pred)}
    report = metrics.evaluate(
        predictions,
        scenes,
        target=args.target,
        fv=args.fv,
        hv=args.hv,
        rectify=not args.no_rectify,
    )
    payload = report.to_dict(include_instances=args.per_instance)
    if args.out:
        _atomic_write(args.out, json.dumps(payload, indent=2) + "\n")
    if args.format == "json":
        print(json.dumps(payload, indent=2))
    else:
        print(report.render_text())
    return EXIT_OK


def cmd_synth(args) -> int:
    ranges = {}
    if args.width:
        ranges["width_range"] = (args.width, args.width)
    if args.height:
        ranges["height_range"] = (args.height, args.height)
    config = synth.SceneConfig(instances=args.instances, seed=args.seed, **ranges)
    scenes = synth.generate_scenes(config, args.scenes)
    _atomic_write_with(args.out, lambda p: dataio.write_annotations(scenes, p))
    n_inst = sum(len(s.instances) for s in scenes)
    print(f"wrote {len(scenes)} scene(s), {n_inst} instance(s) to {args.out}")
    if args.pred_out:
        spec_base = synth.NoiseSpec(sigma_uv=args.noise_uv, sigma_depth=args.noise_depth)
        records = []
        for i_scene, scene in enumerate(scenes):
            for i_inst, inst in enumerate(scene.instances):
                spec = synth.NoiseSpec(
                    sigma_uv=args.noise_uv,
                    sigma_depth=args.noise_depth,
                    seed=args.seed + 100_003 * i_scene + 101 * i_inst,
                )
                cs = synth.perturb(inst.corner_set(), spec) if (
                    spec_base.sigma_uv or spec_base.sigma_depth
                ) else inst.corner_set()
                records.append(dataio.PredictionRecord(instance_id=inst.instance_id, corner_set=cs))
        _atomic_write_with(args.pred_out, lambda p: dataio.write_predictions(records, p))
        print(f"wrote {len(records)} prediction(s) to {args.pred_out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    scenes = dataio.parse_annotations(args.gt)
    lines = [json.dumps({"format": "pixelbox/prepared", "version": 1,
                         "target": args.target, "fv": args.fv, "hv": args.hv})]
    n_kept = n_rej = 0
    for scene in scenes:
        kept, rejected = dataio.filter_instances(scene, target=args.target)
        filtered = dataio.SceneAnnotation(
            image_id=scene.image_id, width=scene.width, height=scene.height,
            intrinsics=scene.intrinsics, instances=kept, dataset=scene.dataset,
        )
        for prep in dataio.preprocess(filtered, target=args.target, fv=args.fv, hv=args.hv):
            lines.append(json.dumps({"type": "instance", **dataio.prepared_to_dict(prep)}))
            n_kept += 1
        for inst, reason in rejected:
            lines.append(json.dumps(
                {"type": "rejected", "instance_id": inst.instance_id, "reason": reason}
            ))
            n_rej += 1
    _atomic_write(args.out, "\n".join(lines) + "\n")
    print(f"prepared {n_kept} instance(s), rejected {n_rej} to {args.out}")
    return EXIT_OK


def cmd_rectify(args) -> int:
    scenes = dataio.parse_annotations(args.gt)
    by_id = {}
    for scene in scenes:
        for inst in scene.instances:
            by_id[inst.instance_id] = scene
    records = dataio.read_predictions(args.pred)
    lines = [json.dumps({"format": "pixelbox/cuboids", "version": 1})]
    n_done = n_skip = 0
    for rec in records:
        scene = by_id.get(rec.instance_id)
        if scene is None:
            raise UnmatchedInstance(f"prediction {rec.instance_id!r} matches no annotated instance")
        if scene.intrinsics is None:
            lines.append(json.dumps({"instance_id": rec.instance_id, "skipped": "missing_intrinsics"}))
            n_skip += 1
            continue
        metric = convert_corner_depths(
            rec.corner_set, "to_metric", scene.height,
            focal=scene.intrinsics.fy, fv=args.fv, hv=args.hv,
        )
        cuboid = metrics.kabsch_rectify(unproject_corners(metric, scene.intrinsics))
        lines.append(json.dumps({
            "instance_id": rec.instance_id,
            "center": cuboid.center.tolist(),
            "size": cuboid.size.tolist(),
            "rotation": cuboid.rotation.ravel().tolist(),
        }))
        n_done += 1
    _atomic_write(args.out, "\n".join(lines) + "\n")
    print(f"rectified {n_done} instance(s), skipped {n_skip} to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    grid_sizes = tuple(int(s) for s in args.grids.split(","))
    seeds = None if args.seeds is None else tuple(int(s) for s in args.seeds.split(","))
    rows = losses.run_gradcheck(seeds=seeds, grid_sizes=grid_sizes, beta=args.beta, step=args.step)
    print(f"{'grid':>6} {'seed':>6} {'max_rel_error':>15}")
    worst = 0.0
    for row in rows:
        flag = "" if row["max_rel_error"] <= args.tolerance else "  FAIL"
        print(f"{row['grid']:>6} {row['seed']:>6} {row['max_rel_error']:>15.3e}{flag}")
        worst = max(worst, row["max_rel_error"])
    print(f"worst {worst:.3e} vs tolerance {args.tolerance:.1e}")
    return EXIT_OK if worst <= args.tolerance else EXIT_TOLERANCE


def cmd_fit(args) -> int:
    grid = Grid.square(args.grid)
    uv, depths = losses.fit_demo_instance(args.seed, grid)
    targets = losses.make_loss_targets(uv, depths, grid)
    config = losses.FitConfig(
        steps=args.steps,
        lr_logits=args.lr,
        lr_depth=args.lr_depth,
        seed=args.seed,
        beta=args.beta,
    )
    result = losses.fit_heatmaps(targets, grid, config)
    if args.out:
        _atomic_write_with(args.out, lambda p: losses.write_loss_trace(result.trace, p))
    if args.corners_out:
        record = dataio.PredictionRecord(instance_id=f"fit-{args.seed}", corner_set=result.corners)
        _atomic_write_with(args.corners_out, lambda p: dataio.write_predictions([record], p))
    err_uv = np.linalg.norm(result.corners.uv - uv, axis=1)
    err_d = np.abs(result.corners.depths - depths) / depths
    print(f"steps={args.steps} final_total={result.trace[-1, 4]:.6f}")
    print(f"corner error: max {err_uv.max():.4f} px, mean {err_uv.mean():.4f} px")
    print(f"depth error: mean {100 * err_d.mean():.4f} %")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pixelbox",
        description="Pixel-aligned 3D box geometry toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("evaluate", help="run the metric protocol on prediction/GT files")
    p.add_argument("--gt", required=True, help="annotation file")
    p.add_argument("--pred", required=True, help="prediction file")
    p.add_argument("--out", help="machine-readable JSON report path")
    p.add_argument("--target", type=int, default=512, help="letterbox target for pixel metrics")
    p.add_argument("--fv", type=float, default=VIRTUAL_FOCAL)
    p.add_argument("--hv", type=float, default=VIRTUAL_HEIGHT)
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.add_argument("--no-rectify", action="store_true", help="skip the volumetric metric")
    p.add_argument("--per-instance", action="store_true", help="include per-instance rows in the JSON report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="generate a synthetic annotated dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, default=8)
    p.add_argument("--instances", type=int, default=4)
    p.add_argument("--width", type=int, help="fix the image width instead of sampling")
    p.add_argument("--height", type=int, help="fix the image height instead of sampling")
    p.add_argument("--pred-out", help="also write a prediction file derived from the ground truth")
    p.add_argument("--noise-uv", type=float, default=0.0, help="corner noise sigma (px) for --pred-out")
    p.add_argument("--noise-depth", type=float, default=0.0, help="relative depth noise sigma for --pred-out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="filter and normalize annotations into model-ready records")
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--target", type=int, default=512)
    p.add_argument("--fv", type=float, default=VIRTUAL_FOCAL)
    p.add_argument("--hv", type=float, default=VIRTUAL_HEIGHT)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("rectify", help="rectify predicted corners into cuboids using GT intrinsics")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True, help="annotation file supplying intrinsics and image sizes")
    p.add_argument("--out", required=True)
    p.add_argument("--fv", type=float, default=VIRTUAL_FOCAL)
    p.add_argument("--hv", type=float, default=VIRTUAL_HEIGHT)
    p.set_defaults(func=cmd_rectify)

    p = sub.add_parser("gradcheck", help="verify analytic gradients against central differences")
    p.add_argument("--grids", default="8,16", help="comma-separated grid sizes")
    p.add_argument("--seeds", help="comma-separated instance seeds (default: frozen per-size sets)")
    p.add_argument("--beta", type=float, default=DEFAULT_BETA)
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("fit", help="desk-scale gradient-descent heatmap fit on a synthetic instance")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", type=int, default=64)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=losses.FitConfig.lr_logits)
    p.add_argument("--lr-depth", type=float, default=losses.FitConfig.lr_depth)
    p.add_argument("--beta", type=float, default=DEFAULT_BETA)
    p.add_argument("--out", help="loss trace file")
    p.add_argument("--corners-out", help="write the final corner set as a prediction file")
    p.set_defaults(func=cmd_fit)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except UnmatchedInstance as exc:
        print(f"unmatched instance: {exc}", file=sys.stderr)
        return EXIT_UNMATCHED
    except GenerationExhausted as exc:
        print(f"generation failed: {exc}", file=sys.stderr)
        return EXIT_GENERATION
    except Diverged as exc:
        print(f"fit diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except PixelboxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA


if __name__ == "__main__":
    sys.exit(main())
