"""Command-line pipeline driver.

Subcommands fuse recorded sequences into sparse semantic TSDF snapshots,
render and query those snapshots, score them against ground truth, and
generate the synthetic sequences used for scoring.  Batch-oriented: every
output is a file, nothing opens a window.

Exit codes: 0 success, 2 bad usage or bad input, 1 runtime failure.
Set SEMVOX_LOG=debug|info|warning for stderr verbosity.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from .backend import NATIVE_AVAILABLE, get_backend
from .config import CameraConfig, set_dotted
from .errors import PayloadMismatchError, SemvoxError, UserInputError
from .evalbench import (
    chamfer_l2,
    miou,
    run_benchmark,
    truth_grid_analytic,
)
from .gaussian import cosine_to_embeddings
from .grid import KIND_CLOSED, KIND_OPEN, KIND_TSDF, load_grids, save_grids
from .ingest import load_embeddings, load_manifest, load_palette, write_ppm
from .mesh import extract_mesh, read_ply, write_ply
from .render import RenderCamera, render
from .synthetic import make_scene, scene_names, write_sequence

log = logging.getLogger("semvox.cli")


def _setup_logging() -> None:
    level = os.environ.get("SEMVOX_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def quat_to_rotation(qw: float, qx: float, qy: float, qz: float) -> np.ndarray:
    """Unit-quaternion (w, x, y, z) to a 3x3 rotation matrix."""
    n = np.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
    if n < 1e-12:
        raise UserInputError("camera quaternion has zero norm")
    qw, qx, qy, qz = qw / n, qx / n, qy / n, qz / n
    return np.array([
        [1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qz * qw), 2 * (qx * qz + qy * qw)],
        [2 * (qx * qy + qz * qw), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qx * qw)],
        [2 * (qx * qz - qy * qw), 2 * (qy * qz + qx * qw), 1 - 2 * (qx * qx + qy * qy)],
    ])


def _split_snapshot(grids):
    """Partition loaded grid blocks into (tsdf, semantic)."""
    tsdf = sem = None
    for g in grids:
        if g.kind == KIND_TSDF and tsdf is None:
            tsdf = g
        elif g.kind in (KIND_CLOSED, KIND_OPEN) and sem is None:
            sem = g
    return tsdf, sem


# -- integrate ------------------------------------------------------------------

def cmd_integrate(args) -> int:
    man = load_manifest(args.manifest)
    if args.mode and args.mode != man.mode:
        raise PayloadMismatchError(
            f"payload kind mismatch: manifest provides {man.mode}-set payload "
            f"files, --mode asked for {args.mode}")
    if args.voxel_size is not None:
        man.fusion.voxel_size = args.voxel_size
    if args.trunc is not None:
        man.fusion.truncation = args.trunc
    if args.stride is not None:
        if man.camera is None:
            raise UserInputError("--stride needs a camera sequence")
        man.camera.stride = args.stride
    sections = {"fusion": man.fusion}
    if man.camera is not None:
        sections["camera"] = man.camera
    if man.closed is not None:
        sections["semantics_closed"] = man.closed
    if man.open is not None:
        sections["semantics_open"] = man.open
    for kv in args.set or []:
        if "=" not in kv:
            raise UserInputError(f"--set wants section.key=value, got {kv!r}")
        key, raw = kv.split("=", 1)
        set_dotted(sections, key, raw)
    man.fusion.validate()

    threads = 1 if args.deterministic else args.threads
    backend = get_backend(args.backend)
    hook = None
    if args.render_every:
        if man.camera is None:
            raise UserInputError("--render-every needs camera intrinsics "
                                 "in the manifest")
        render_dir = args.render_dir or os.path.dirname(os.path.abspath(args.out))
        os.makedirs(render_dir, exist_ok=True)
        cam_cfg = man.camera

        def hook(i, tsdf, sem, _every=args.render_every):
            if (i + 1) % _every:
                return
            cam = RenderCamera.from_config(cam_cfg, man.poses[i],
                                           far=man.fusion.max_range)
            depth = render(tsdf, None, cam, mode="depth")
            img = np.clip(depth / cam.far * 255.0, 0, 255).astype(np.uint8)
            write_ppm(os.path.join(render_dir, "render_%04d.ppm" % i), img)

    rep, tsdf, sem = run_benchmark(man, backend=backend, threads=threads,
                                   limit=args.limit, frame_hook=hook)
    save_grids(args.out, [g for g in (tsdf, sem) if g is not None])
    report_path = args.report or args.out + ".report.txt"
    with open(report_path, "w") as fh:
        fh.write("\n".join(rep.lines()) + "\n")
    csv_path = args.csv or args.out + ".frames.csv"
    rep.write_csv(csv_path)
    print("wrote %s (%d frames, %d active voxels)"
          % (args.out, len(rep.frames), tsdf.memory_stats().active_voxels))
    for line in rep.lines():
        print(line)
    return 0


# -- render ---------------------------------------------------------------------

def _camera_from_args(args) -> np.ndarray:
    if args.camera is not None:
        vals = args.camera
        pose = np.eye(4)
        pose[:3, 3] = vals[:3]
        pose[:3, :3] = quat_to_rotation(*vals[3:])
        return pose
    if args.poses is None or args.pose_row is None:
        raise UserInputError("give either --camera X Y Z QW QX QY QZ or "
                             "--poses FILE --pose-row N")
    from .ingest import load_poses

    poses = load_poses(args.poses)
    if not 0 <= args.pose_row < len(poses):
        raise UserInputError(f"--pose-row {args.pose_row} out of range, "
                             f"file has {len(poses)} poses")
    return poses[args.pose_row]


def cmd_render(args) -> int:
    tsdf, sem = _split_snapshot(load_grids(args.grid))
    if tsdf is None:
        raise UserInputError(f"{args.grid}: snapshot has no TSDF grid")
    pose = _camera_from_args(args)
    cfg = CameraConfig(fx=args.fx, fy=args.fy,
                       cx=args.cx if args.cx is not None else args.width / 2.0,
                       cy=args.cy if args.cy is not None else args.height / 2.0,
                       width=args.width, height=args.height)
    cam = RenderCamera.from_config(cfg, pose, near=args.near, far=args.far)

    palette = None
    if args.palette:
        palette, _ = load_palette(args.palette)
    embeddings = None
    if args.embeddings:
        _, embeddings = load_embeddings(args.embeddings)

    img = render(tsdf, sem, cam, mode=args.mode, embeddings=embeddings,
                 palette=palette)
    if args.mode == "depth":
        out = np.clip(img / cam.far * 255.0, 0, 255).astype(np.uint8)
    elif args.mode == "normal":
        out = ((img * 0.5 + 0.5) * 255.0).astype(np.uint8)
    else:
        out = img
    write_ppm(args.out, out)
    if args.npy:
        np.save(args.npy, img)
    hit = int(np.count_nonzero(img.reshape(img.shape[0], img.shape[1], -1)
                               .any(axis=2)))
    print("wrote %s (%dx%d, %d hit pixels)"
          % (args.out, cam.width, cam.height, hit))
    return 0


# -- query ----------------------------------------------------------------------

def cmd_query(args) -> int:
    tsdf, sem = _split_snapshot(load_grids(args.grid))
    if sem is None or sem.kind != KIND_OPEN:
        raise PayloadMismatchError(
            f"{args.grid}: embedding query needs an open-set grid")
    names, vectors = load_embeddings(args.embeddings)
    if args.label is not None:
        if args.label not in names:
            raise UserInputError(
                f"unknown label {args.label!r}; available: " + ", ".join(names))
        q = vectors[names.index(args.label)]
    else:
        q = (np.load(args.vector) if args.vector.endswith(".npy")
             else np.loadtxt(args.vector))
        q = np.asarray(q, np.float64).reshape(-1)
    feature_dim = sem.payload.cfg.feature_dim
    if q.shape[0] != feature_dim:
        raise PayloadMismatchError(
            f"query vector has dim {q.shape[0]}, grid stores {feature_dim}")

    coords, (means, _beta) = sem.active_values()
    sims = cosine_to_embeddings(means, q[None, :])[:, 0]
    sims = np.where(np.isfinite(sims), sims, 0.0)
    with open(args.csv, "w") as fh:
        fh.write("i,j,k,similarity\n")
        for (i, j, k), s in zip(np.asarray(coords), sims):
            fh.write("%d,%d,%d,%.6f\n" % (i, j, k, s))
    n_hot = int(np.count_nonzero(sims >= args.threshold))
    print("query over %d voxels: max similarity %.4f, %d at or above %.2f"
          % (len(sims), sims.max() if len(sims) else 0.0, n_hot, args.threshold))

    if args.mesh:
        if tsdf is None:
            raise UserInputError("snapshot has no TSDF grid to mesh")
        mesh = extract_mesh(tsdf)
        sim_at = {tuple(c): s for c, s in zip(np.asarray(coords), sims)}
        vsize = tsdf.voxel_size
        vcoords = np.floor(mesh.vertices / vsize).astype(np.int64)
        colors = np.full((len(mesh.vertices), 3), 128, np.uint8)
        for r, c in enumerate(vcoords):
            if sim_at.get(tuple(c), 0.0) >= args.threshold:
                colors[r] = (220, 40, 40)
        mesh.colors = colors
        write_ply(mesh, args.mesh)
        print("wrote %s" % args.mesh)
    return 0


# -- eval -----------------------------------------------------------------------

def cmd_eval(args) -> int:
    lines = []
    if args.pred:
        _tsdf, sem = _split_snapshot(load_grids(args.pred))
        if sem is None:
            raise UserInputError(f"{args.pred}: snapshot has no semantic grid")
        if args.truth:
            _t, truth = _split_snapshot(load_grids(args.truth))
            if truth is None:
                raise UserInputError(f"{args.truth}: snapshot has no semantic grid")
        elif args.scene:
            truth = truth_grid_analytic(make_scene(args.scene))
        else:
            raise UserInputError("give --truth SNAPSHOT or --scene NAME")
        embeddings = None
        if args.embeddings:
            _, embeddings = load_embeddings(args.embeddings)
        scores = miou(sem, truth, embeddings=embeddings)
        lines.append("miou=%.6f" % scores.miou)
        for c, v in enumerate(scores.per_class):
            if np.isfinite(v):
                lines.append("iou_class_%d=%.6f" % (c + 1, v))
    if args.pred_mesh or args.truth_mesh:
        if not (args.pred_mesh and args.truth_mesh):
            raise UserInputError("chamfer needs both --pred-mesh and --truth-mesh")
        a = read_ply(args.pred_mesh).vertices
        b = read_ply(args.truth_mesh).vertices
        lines.append("chamfer_l2_m2=%.8g" % chamfer_l2(a, b))
    if not lines:
        raise UserInputError("nothing to evaluate: give --pred and/or mesh pair")
    text = "\n".join(lines)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    return 0


# -- make-synthetic -------------------------------------------------------------

def cmd_make_synthetic(args) -> int:
    if not 0.0 <= args.noise < 1.0:
        raise UserInputError(f"--noise must be in [0, 1), got {args.noise}")
    scene = make_scene(args.scene)
    manifest = write_sequence(scene, args.out, mode=args.mode,
                              noise=args.noise, seed=args.seed)
    print("wrote %s (%d frames, %d classes)"
          % (manifest, len(scene.poses), scene.num_classes))
    return 0


# -- benchmarks -----------------------------------------------------------------

def _stage_means(csv_path: str):
    import csv as csv_mod

    with open(csv_path, newline="") as fh:
        rows = list(csv_mod.DictReader(fh))
    if not rows:
        raise UserInputError(f"{csv_path}: no frame rows")
    stages = ("preprocess_ms", "integrate_ms", "visualize_ms")
    return {s: float(np.mean([float(r[s]) for r in rows])) for s in stages}


def cmd_plot_bench(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    groups = [(os.path.basename(p).rsplit(".", 1)[0], _stage_means(p))
              for p in args.csvs]
    stages = ("preprocess_ms", "integrate_ms", "visualize_ms")
    x = np.arange(len(stages))
    width = 0.8 / len(groups)
    fig, ax = plt.subplots(figsize=(7, 4))
    for gi, (label, means) in enumerate(groups):
        ax.bar(x + gi * width, [means[s] for s in stages], width, label=label)
    ax.set_xticks(x + width * (len(groups) - 1) / 2)
    ax.set_xticklabels([s.replace("_ms", "") for s in stages])
    ax.set_ylabel("mean ms per frame")
    ax.set_title("pipeline stage timing")
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print("wrote %s" % args.out)
    return 0


def cmd_bench_backends(args) -> int:
    man = load_manifest(args.manifest)
    names = ["python"] + (["native"] if NATIVE_AVAILABLE else [])
    if not NATIVE_AVAILABLE:
        print("native backend not built; timing python backend only")
    results = []
    for name in names:
        man_run = load_manifest(args.manifest)
        rep, tsdf, sem = run_benchmark(man_run, backend=get_backend(name),
                                       threads=args.threads, limit=args.limit)
        results.append((name, rep, tsdf, sem))
        if args.csv_dir:
            os.makedirs(args.csv_dir, exist_ok=True)
            rep.write_csv(os.path.join(args.csv_dir, f"bench_{name}.csv"))
    for name, rep, _t, _s in results:
        means = rep.mean_ms
        print("%-8s preprocess %.2f ms  integrate %.2f ms  total %.2f ms  "
              "fps %.1f" % (name, means["preprocess"], means["integrate"],
                            means["total"], rep.fps))
    if len(results) == 2:
        speedup = (results[0][1].mean_ms["integrate"]
                   / results[1][1].mean_ms["integrate"])
        print("native integrate speedup: %.2fx" % speedup)
        same = (results[0][2].content_hash() == results[1][2].content_hash())
        if results[0][3] is not None and results[1][3] is not None:
            same = same and (results[0][3].content_hash()
                             == results[1][3].content_hash())
        print("backend content hashes %s" % ("match" if same else "DIFFER"))
        if not same:
            return 1
    if args.plot:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        stages = ("preprocess", "integrate", "visualize")
        x = np.arange(len(stages))
        width = 0.8 / len(results)
        fig, ax = plt.subplots(figsize=(7, 4))
        for gi, (name, rep, _t, _s) in enumerate(results):
            ax.bar(x + gi * width, [rep.mean_ms[s] for s in stages], width,
                   label=name)
        ax.set_xticks(x + width * (len(results) - 1) / 2)
        ax.set_xticklabels(stages)
        ax.set_ylabel("mean ms per frame")
        ax.set_title("backend comparison")
        ax.legend()
        fig.tight_layout()
        fig.savefig(args.plot, dpi=120)
        print("wrote %s" % args.plot)
    return 0


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semvox",
        description="sparse semantic TSDF mapping pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("integrate", help="fuse a sequence into a grid snapshot")
    p.add_argument("manifest", help="sequence manifest (.ini)")
    p.add_argument("--out", required=True, help="output snapshot path (.slvg)")
    p.add_argument("--mode", choices=("closed", "open"),
                   help="require this semantic mode (must match the manifest)")
    p.add_argument("--voxel-size", type=float, help="override voxel size in meters")
    p.add_argument("--trunc", type=float, help="override truncation in meters")
    p.add_argument("--stride", type=int, help="override depth-image pixel stride")
    p.add_argument("--threads", type=int, default=1, help="worker threads")
    p.add_argument("--deterministic", action="store_true",
                   help="force sequential integration")
    p.add_argument("--backend", choices=("python", "native"),
                   help="force a compute backend (default: native if built)")
    p.add_argument("--render-every", type=int, default=0, metavar="N",
                   help="dump a depth render every N frames")
    p.add_argument("--render-dir", help="directory for --render-every images")
    p.add_argument("--limit", type=int, help="integrate only the first N frames")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override any config field, repeatable")
    p.add_argument("--report", help="report path (default: OUT.report.txt)")
    p.add_argument("--csv", help="per-frame timing CSV (default: OUT.frames.csv)")
    p.set_defaults(func=cmd_integrate)

    p = sub.add_parser("render", help="render a snapshot from a camera pose")
    p.add_argument("grid", help="grid snapshot (.slvg)")
    p.add_argument("--out", required=True, help="output image (.ppm)")
    p.add_argument("--mode", choices=("depth", "semantic", "normal"),
                   default="depth")
    p.add_argument("--camera", type=float, nargs=7,
                   metavar=("X", "Y", "Z", "QW", "QX", "QY", "QZ"),
                   help="camera-to-world position + unit quaternion")
    p.add_argument("--poses", help="pose file to take the camera from")
    p.add_argument("--pose-row", type=int, help="row index into --poses")
    p.add_argument("--width", type=int, default=320)
    p.add_argument("--height", type=int, default=240)
    p.add_argument("--fx", type=float, default=240.0)
    p.add_argument("--fy", type=float, default=240.0)
    p.add_argument("--cx", type=float, help="default: width / 2")
    p.add_argument("--cy", type=float, help="default: height / 2")
    p.add_argument("--near", type=float, default=0.05)
    p.add_argument("--far", type=float, default=10.0)
    p.add_argument("--palette", help="class palette CSV for semantic mode")
    p.add_argument("--embeddings", help="label embeddings for open-set grids")
    p.add_argument("--npy", help="also save the raw float image as .npy")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("query", help="score voxels against a label embedding")
    p.add_argument("grid", help="open-set grid snapshot (.slvg)")
    p.add_argument("--embeddings", required=True, help="label embedding file")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--label", help="label name from the embedding file")
    g.add_argument("--vector", help="raw query vector (.npy or whitespace text)")
    p.add_argument("--csv", required=True, help="per-voxel similarity CSV")
    p.add_argument("--mesh", help="write a highlight mesh (.ply)")
    p.add_argument("--threshold", type=float, default=0.8,
                   help="highlight similarity threshold")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="score a snapshot against ground truth")
    p.add_argument("--pred", help="predicted grid snapshot")
    p.add_argument("--truth", help="ground-truth grid snapshot")
    p.add_argument("--scene", help="analytic scene name for rasterized truth")
    p.add_argument("--embeddings", help="embeddings for open-set readout")
    p.add_argument("--pred-mesh", help="predicted mesh (.ply) for chamfer")
    p.add_argument("--truth-mesh", help="reference mesh (.ply) for chamfer")
    p.add_argument("--out", help="also write metrics to this file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("make-synthetic", help="generate a synthetic sequence")
    p.add_argument("scene", help="scene name: " + ", ".join(scene_names()))
    p.add_argument("--out", required=True, help="output sequence directory")
    p.add_argument("--mode", choices=("closed", "open"), default="closed")
    p.add_argument("--noise", type=float, default=0.0,
                   help="label flip probability in [0, 1)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("plot-bench", help="bar-chart stage timings from CSVs")
    p.add_argument("csvs", nargs="+", help="per-frame timing CSVs")
    p.add_argument("--out", required=True, help="output image (.png)")
    p.set_defaults(func=cmd_plot_bench)

    p = sub.add_parser("bench-backends",
                       help="time the python and native backends on a sequence")
    p.add_argument("manifest", help="sequence manifest (.ini)")
    p.add_argument("--limit", type=int, help="first N frames only")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--csv-dir", help="write per-backend frame CSVs here")
    p.add_argument("--plot", help="write a comparison bar chart (.png)")
    p.set_defaults(func=cmd_bench_backends)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UserInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SemvoxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
