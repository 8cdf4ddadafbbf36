"""``gradsdf`` command line: synth, run, mesh, slice, eval, study.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
Log verbosity comes from the ``GRADSDF_LOG`` environment variable
(DEBUG, INFO, WARNING; default WARNING).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import evalkit
from .checkpoint import load_checkpoint, save_checkpoint
from .config import PROFILES, VARIANTS, load_config
from .errors import ConfigError, GradSdfError, SceneError
from .formats import (batch_to_bytes, load_scene, read_manifest, shipped_scene,
                      shipped_scene_path, write_frames, write_ply, write_slice)
from .geometry import generate_frames
from .training import TrainState, run_online

log = logging.getLogger("gradsdf")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
LOG_ENV = "GRADSDF_LOG"
DEFAULT_RAYS = 3000


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for runtime errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _scene(path):
    return load_scene(path) if path else shipped_scene()


# ----------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    scene = _scene(args.scene)
    if scene.trajectory.shape[0] == 0:
        raise SceneError("scene has no trajectory poses")
    frames = generate_frames(scene, scene.trajectory, args.rays, args.seed)
    manifest = write_frames(frames, args.out)
    log.info("wrote %d frames to %s", len(frames), manifest)
    print(manifest)
    return EXIT_OK


def _frames(path):
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.txt"
    if not p.exists():
        raise ConfigError(f"frame manifest {p} does not exist")
    return read_manifest(p)


def cmd_run(args) -> int:
    frames = _frames(args.frames)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.checkpoint:
        state = load_checkpoint(args.checkpoint, frames)
        log.info("resuming at frame %d, step %d", state.frames_done, state.step)
    else:
        config = load_config(args.config, args.profile, args.variant)
        if args.seed is not None:
            config = config.replace(train=dataclasses.replace(config.train, seed=args.seed))
        state = TrainState.create(config)

    dump_dir = None
    if args.dump_batches:
        dump_dir = Path(args.dump_batches)
        dump_dir.mkdir(parents=True, exist_ok=True)

    def on_batch(step, batch):
        if dump_dir is not None:
            (dump_dir / f"batch_{step:06d}.nsdb").write_bytes(batch_to_bytes(batch))

    log_path = out / "log.jsonl"
    mode = "a" if args.checkpoint else "w"
    with open(log_path, mode) as fh:
        def on_frame(st, rec):
            row = dataclasses.asdict(rec)  # wall_ms is the only non-deterministic field
            row["step"] = st.step
            fh.write(json.dumps(row, sort_keys=True) + "\n")
            fh.flush()
            log.info("frame %d: %.0f ms, losses %s", rec.frame_id, rec.wall_ms, rec.losses)
            if args.every and st.frames_done % args.every == 0:
                save_checkpoint(st, out / f"checkpoint_{st.frames_done:04d}.nsck")

        state, _ = run_online(frames, state=state, on_frame=on_frame, on_batch=on_batch,
                              stop_after=args.stop_after)
    final = out / "checkpoint.nsck"
    save_checkpoint(state, final)
    print(final)
    return EXIT_OK


def _predictor(args):
    if getattr(args, "oracle", False):
        if not args.scene:
            log.info("no --scene given; using the shipped room scene as the oracle")
        return evalkit.OraclePredictor(_scene(args.scene)), None
    if not args.checkpoint:
        raise UsageError("need --checkpoint (or --oracle)")
    state = load_checkpoint(args.checkpoint)
    eps = state.config.train.fd_eps
    return evalkit.ModelPredictor(state.model, eps), state


def _grid(args, state, res):
    if args.scene or state is None:
        return evalkit.evaluation_grid(_scene(args.scene), res)
    root = state.config.octree.root
    return evalkit.SdfGridSpec(root.padded(-res), res)


def cmd_mesh(args) -> int:
    pred, state = _predictor(args)
    mesh = evalkit.extract_mesh(pred, _grid(args, state, args.res))
    write_ply(mesh, args.out)
    log.info("mesh with %d vertices, %d faces", len(mesh.vertices), len(mesh.faces))
    print(args.out)
    return EXIT_OK


def cmd_slice(args) -> int:
    pred, state = _predictor(args)
    grid = _grid(args, state, args.res)
    lo, hi = np.asarray(grid.bounds.min), np.asarray(grid.bounds.max)
    if not lo[2] <= args.z <= hi[2]:
        raise UsageError(f"z={args.z} lies outside the grid bounds [{lo[2]}, {hi[2]}]")
    xs, ys = grid.axes()[0], grid.axes()[1]
    gx, gy = np.meshgrid(xs, ys, indexing="xy")  # (ny, nx), x fastest
    pts = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, args.z)], axis=1)
    vals = pred.predict(pts).reshape(gx.shape)
    write_slice(args.out, (lo[0], lo[1], args.z), args.z, vals, args.res)
    print(args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    pred, state = _predictor(args)
    scene = _scene(args.scene)
    grid = evalkit.evaluation_grid(scene, args.res)
    sets = [evalkit.eval_sdf_field(pred, scene, grid)]
    if args.mesh_res:
        mgrid = evalkit.evaluation_grid(scene, args.mesh_res)
        gt = evalkit.extract_mesh(evalkit.OraclePredictor(scene), mgrid)
        rec = evalkit.extract_mesh(pred, mgrid)
        sets.append(evalkit.mesh_metrics(rec, gt, samples=args.samples, seed=args.seed or 0))
    text = evalkit.format_report(*sets)
    if args.report:
        Path(args.report).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_study(args) -> int:
    scene = _scene(args.scene)
    config = load_config(args.config, args.profile)
    if args.frames:
        frames = _frames(args.frames)
    else:
        frames = generate_frames(scene, scene.trajectory, args.rays, args.seed or 0)
    grid = evalkit.evaluation_grid(scene, args.res)
    result = evalkit.prior_study(scene, frames, config.octree, grid)
    evalkit.write_study_csv(result, args.out)
    extra = {"audited_octants": result.audited_octants,
             "audit_violations": len(result.audit_violations)}
    text = "".join(f"{r.mode},{r.interp},{r.mean_near:.6g},{r.mean_far:.6g}\n"
                   for r in result.rows)
    if args.report:
        Path(args.report).write_text(
            "\n".join(f"{k}={v}" for k, v in extra.items()) + "\n")
    sys.stdout.write(text)
    if result.audit_violations:
        log.warning("%d octants exceed the interpolation error bound",
                    len(result.audit_violations))
    return EXIT_OK


# ------------------------------------------------------------------ parsing


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gradsdf", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="ray-cast a scene's trajectory into frame files")
    s.add_argument("--scene", help=f"scene YAML (default: {shipped_scene_path()})")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--rays", type=int, default=DEFAULT_RAYS, help="rays per frame")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("run", help="train online over a frame stream")
    r.add_argument("--frames", required=True, help="frame manifest or its directory")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--config", help="YAML config overrides")
    r.add_argument("--profile", choices=sorted(PROFILES))
    r.add_argument("--variant", choices=sorted(VARIANTS))
    r.add_argument("--seed", type=int)
    r.add_argument("--checkpoint", help="resume from this checkpoint")
    r.add_argument("--every", type=int, default=0, help="also checkpoint every k frames")
    r.add_argument("--stop-after", type=int, help="stop once this many frames are done")
    r.add_argument("--dump-batches", metavar="DIR", help="write every training batch here")
    r.set_defaults(func=cmd_run)

    def predictor_flags(q):
        q.add_argument("--checkpoint")
        q.add_argument("--scene", help="scene YAML; also sets the grid bounds")
        q.add_argument("--oracle", action="store_true", help="use the analytic scene instead")

    m = sub.add_parser("mesh", help="marching-cubes mesh to PLY")
    predictor_flags(m)
    m.add_argument("--out", required=True)
    m.add_argument("--res", type=float, default=0.025)
    m.set_defaults(func=cmd_mesh)

    sl = sub.add_parser("slice", help="SDF slice at height z")
    predictor_flags(sl)
    sl.add_argument("--out", required=True)
    sl.add_argument("--z", type=float, required=True)
    sl.add_argument("--res", type=float, default=0.02)
    sl.set_defaults(func=cmd_slice)

    e = sub.add_parser("eval", help="SDF (and optionally mesh) metrics against the scene")
    predictor_flags(e)
    e.add_argument("--report", help="write the key=value report here")
    e.add_argument("--res", type=float, default=0.05)
    e.add_argument("--mesh-res", type=float, default=0.0,
                   help="also compare meshes extracted at this resolution")
    e.add_argument("--samples", type=int, default=200000)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    st = sub.add_parser("study", help="oracle prior study (4-row CSV)")
    st.add_argument("--scene")
    st.add_argument("--frames", help="frame manifest (default: synthesise from the scene)")
    st.add_argument("--config")
    st.add_argument("--profile", choices=sorted(PROFILES))
    st.add_argument("--out", required=True, help="CSV path")
    st.add_argument("--report")
    st.add_argument("--res", type=float, default=0.025)
    st.add_argument("--rays", type=int, default=DEFAULT_RAYS)
    st.add_argument("--seed", type=int, default=0)
    st.set_defaults(func=cmd_study)
    return p


def main(argv=None) -> int:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SceneError, UsageError) as exc:
        print(f"gradsdf: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GradSdfError, OSError) as exc:
        print(f"gradsdf: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
