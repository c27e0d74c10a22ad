"""Command-line entry point: ``geofuse <command> [flags]``.

Exit codes: 0 success, 1 validation error (bad flags, paths, configs, or a
failed gradient check), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"{what} not found: {p}")
    return p


def _out_parent(path: str) -> Path:
    p = Path(path)
    if p.exists() and p.is_dir():
        raise ValidationError(f"output path is a directory: {p}")
    return p


def _out_dir(path: str) -> Path:
    p = Path(path)
    if p.exists() and not p.is_dir():
        raise ValidationError(f"output directory is a file: {p}")
    return p


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="geofuse", description="Geometry-guided multi-view TSDF reconstruction on synthetic rooms.")
    ap.add_argument("--threads", type=int, default=None,
                    help="cap on intra-op threads (default: $GEOFUSE_THREADS or 1)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-gen", help="write synthetic scene JSONs (and optionally rendered views)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=1, help="number of consecutive seeds")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--empty-room", action="store_true")
    s.add_argument("--occluder", action="store_true")
    s.add_argument("--render", action="store_true", help="also write the orbit views")
    s.add_argument("--views", type=int, default=9)
    s.add_argument("--image-size", type=int, default=64)

    t = sub.add_parser("train", help="train on synthetic rooms")
    t.add_argument("--config", help="TrainConfig JSON")
    t.add_argument("--out", required=True, help="run directory (log, checkpoints)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--eval", action="store_true", help="evaluate the held-out rooms afterwards")

    r = sub.add_parser("reconstruct", help="predict a TSDF and mesh from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--config", help="TrainConfig JSON (defaults to config.json next to the run)")
    src = r.add_mutually_exclusive_group(required=True)
    src.add_argument("--scene", help="scene JSON; views are rendered on the orbit")
    src.add_argument("--views", help="directory of view headers written by synth-gen --render")
    r.add_argument("--out", required=True, help="mesh path (.ply or .obj)")
    r.add_argument("--tsdf", help="also write the predicted volume here")

    e = sub.add_parser("eval", help="accuracy/completeness metrics between two meshes or point clouds")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--threshold", type=float, default=0.05)
    e.add_argument("--density", type=float, default=1e4, help="mesh sampling density, points per m^2")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--normals", action="store_true", help="also report normal precision/recall")
    e.add_argument("--signed", action="store_true", help="signed normal angles")
    e.add_argument("--json", help="write metrics JSON here")

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--module", default="all", choices=["tensornn", "g2pipeline", "supervision", "all"])
    g.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("priors-dump", help="per-voxel geometric priors of one view as CSV")
    p.add_argument("--scene", required=True)
    p.add_argument("--view", type=int, default=0)
    p.add_argument("--views", type=int, default=9)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--voxel-size", type=float, default=0.1)
    p.add_argument("--all", action="store_true", help="include invalid voxels")
    p.add_argument("--out", required=True)
    return ap


def _threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        env = os.environ.get("GEOFUSE_THREADS", "1")
        try:
            n = int(env)
        except ValueError:
            raise ValidationError(f"GEOFUSE_THREADS must be an integer, got {env!r}")
    if n < 1:
        raise ValidationError("thread count must be positive")
    return n


def _load_config(path, threads: int):
    from .config import TrainConfig
    if path:
        _existing(path, "config")
    try:
        cfg = TrainConfig.load(path) if path else TrainConfig()
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"bad config {path}: {exc}")
    cfg.threads = threads
    return cfg


def cmd_synth_gen(args, threads):
    from . import fileio, synth
    if args.count < 1 or args.views < 1 or args.image_size < 1:
        raise ValidationError("count, views and image size must be positive")
    out = _out_dir(args.out)
    for seed in range(args.seed, args.seed + args.count):
        scene = synth.generate_scene(seed, empty_room=args.empty_room, occluder=args.occluder)
        fileio.atomic_write(out / f"scene_{seed}.json", scene.to_json())
        if args.render:
            for i, v in enumerate(synth.render_orbit(scene, args.views, args.image_size)):
                fileio.write_view(out / f"views_{seed}", f"view_{i:02d}", v)
        print(out / f"scene_{seed}.json")


def cmd_train(args, threads):
    import dataclasses
    from . import train as tr
    cfg = _load_config(args.config, threads)
    _out_dir(args.out)
    if args.epochs is not None and args.epochs < 1:
        raise ValidationError("--epochs must be positive")
    if args.epochs is not None:
        cfg = dataclasses.replace(cfg, epochs=args.epochs)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    cache = tr.SceneCache(cfg)
    res = tr.train(cfg, args.out, cache)
    print(f"trained {res.steps} steps in {res.seconds:.1f}s; checkpoint {res.checkpoint}")
    if args.eval:
        mean, _ = tr.evaluate(res.params, cfg, cache, Path(args.out) / "eval")
        from . import evalmetrics, fileio
        fileio.atomic_write(Path(args.out) / "eval" / "metrics.json", mean.to_json())
        print(evalmetrics.format_table({"held-out": mean}))


def cmd_reconstruct(args, threads):
    from . import fileio, synth, train as tr
    from .voxelvol import VoxelGrid
    ckpt = _existing(args.checkpoint, "checkpoint")
    cfg_path = args.config or next((str(p / "config.json") for p in ckpt.parents if (p / "config.json").exists()), None)
    cfg = _load_config(cfg_path, threads)
    if Path(args.out).suffix.lower() not in (".ply", ".obj"):
        raise ValidationError("--out must end in .ply or .obj")
    _out_parent(args.out)
    try:
        ps = tr.load_checkpoint(ckpt, cfg.pipeline)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        raise ValidationError(str(exc))
    if args.scene:
        scene = synth.Scene.from_dict(json.loads(_existing(args.scene, "scene").read_text()))
        views = synth.render_orbit(scene, cfg.pipeline.n_views, cfg.image_size)
        grid = tr.scene_grid(scene, cfg)
    else:
        vdir = _existing(args.views, "views directory")
        views = [fileio.read_view(p) for p in sorted(vdir.glob("*.json"))]
        if len(views) != cfg.pipeline.n_views:
            raise ValidationError(f"expected {cfg.pipeline.n_views} views, found {len(views)}")
        grid = VoxelGrid.covering(synth.ROOM_LO, synth.ROOM_HI, cfg.voxel_size, cfg.grid_margin)
    mesh, vol = tr.reconstruct(ps, views, grid, cfg)
    fileio.write_mesh(args.out, mesh)
    if args.tsdf:
        fileio.write_tsdf(args.tsdf, vol)
    print(f"{len(mesh.faces)} faces -> {args.out}")


def _point_set(path, density, seed):
    from . import evalmetrics, fileio
    m = fileio.read_ply(_existing(path, "point cloud or mesh"))
    if len(m.faces):
        return evalmetrics.sample_mesh(m, density, seed)
    n = m.vertex_normals
    ln = np.linalg.norm(n, axis=1)
    normals = n / ln[:, None] if len(n) and np.all(ln > 0) else None
    return evalmetrics.PointSet(m.vertices, normals)


def cmd_eval(args, threads):
    from . import evalmetrics, fileio
    if args.threshold <= 0 or args.density <= 0:
        raise ValidationError("threshold and density must be positive")
    if args.json:
        _out_parent(args.json)
    pred = _point_set(args.pred, args.density, args.seed)
    gt = _point_set(args.gt, args.density, args.seed + 1)
    if len(pred) == 0 or len(gt) == 0:
        raise ValidationError("empty point set")
    m = evalmetrics.mesh_metrics(pred, gt, args.threshold)
    print(evalmetrics.format_table({Path(args.pred).stem: m}))
    doc = {"mesh": json.loads(m.to_json())}
    if args.normals:
        if pred.normals is None or gt.normals is None:
            raise ValidationError("normal metrics need normals on both inputs")
        nm = evalmetrics.normal_metrics(pred, gt, signed=args.signed)
        for t, p, r in zip(nm.taus, nm.precision, nm.recall):
            print(f"P_{t:g}={p:.4f} R_{t:g}={r:.4f}")
        doc["normals"] = json.loads(nm.to_json())
    if args.json:
        fileio.atomic_write(args.json, json.dumps(doc, indent=1, sort_keys=True))


def cmd_gradcheck(args, threads):
    from . import gradcheck
    checks, seconds = gradcheck.run(args.module, args.seed)
    for c in checks:
        print(c.line())
    print(f"{sum(c.ok for c in checks)}/{len(checks)} passed in {seconds:.1f}s")
    return EXIT_OK if all(c.ok for c in checks) else EXIT_INVALID


def cmd_priors_dump(args, threads):
    from . import camgeom, fileio, synth
    from .voxelvol import VoxelGrid
    scene = synth.Scene.from_dict(json.loads(_existing(args.scene, "scene").read_text()))
    _out_parent(args.out)
    if not 0 <= args.view < args.views:
        raise ValidationError(f"--view must lie in [0, {args.views})")
    if args.voxel_size <= 0:
        raise ValidationError("voxel size must be positive")
    view = synth.render_orbit(scene, args.views, args.image_size)[args.view]
    grid = VoxelGrid.covering(scene.room_lo, scene.room_hi, args.voxel_size, 0)
    pts = grid.points()
    pri = camgeom.compute_geo_priors(pts, view)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["i", "j", "k", "x", "y", "z", "valid", "vx", "vy", "vz", "depth", "angle", "nx", "ny", "nz"])
    ijk = np.stack(np.unravel_index(np.arange(len(pts)), grid.dims), 1)
    for r in np.flatnonzero(pri.valid) if not args.all else range(len(pts)):
        w.writerow([*ijk[r], *(f"{x:.6f}" for x in pts[r]), int(pri.valid[r]),
                    *(f"{x:.6f}" for x in pri.view_dir[r]), f"{pri.proj_depth[r]:.6f}",
                    f"{pri.view_angle[r]:.6f}", *(f"{x:.6f}" for x in pri.proj_normal[r])])
    fileio.atomic_write(args.out, buf.getvalue())
    print(f"{int(pri.valid.sum())} valid voxels -> {args.out}")


COMMANDS = {"synth-gen": cmd_synth_gen, "train": cmd_train, "reconstruct": cmd_reconstruct,
            "eval": cmd_eval, "gradcheck": cmd_gradcheck, "priors-dump": cmd_priors_dump}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        threads = _threads(args)
    except ValidationError as exc:
        print(f"geofuse: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    import torch
    torch.set_num_threads(threads)
    try:
        code = COMMANDS[args.command](args, threads)
        return EXIT_OK if code is None else code
    except ValidationError as exc:
        print(f"geofuse: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # runtime failure
        print(f"geofuse: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
