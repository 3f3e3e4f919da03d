"""Command-line interface: the full pipeline as composable subcommands.

Subcommands communicate through files only; every invocation writes a run
record (arguments, seed, config hash, tool version, produced outputs) so a
run can be reproduced from the record alone.  Exit codes: 0 success, 1
validation failure (scene violations, malformed inputs), 2 runtime error or
bad usage.  Errors go to stderr as ``splatsim: error[<category>]: message``.

Anywhere a scene path is expected, the literal tag ``example`` (or
``example:<seed>``) substitutes the bundled procedural scene.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import shlex
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .errors import (BlobChecksumError, MissingFileError, PlyImportError,
                     SceneFormatError, SplatSimError)

INPUT_VALIDATION_ERRORS = (SceneFormatError, MissingFileError,
                           BlobChecksumError, PlyImportError)


# ---------------------------------------------------------------------------
# plumbing
# ---------------------------------------------------------------------------

def _load_scene(tag: str):
    from .example import resolve_scene_path
    return resolve_scene_path(tag)


def _apply_edits(scene, script_path: str, conflict_log: Optional[list] = None):
    from .edit import apply_edit_script, load_edit_script
    script = load_edit_script(script_path)
    return apply_edit_script(scene, script, conflict_log=conflict_log)


def _record_path(args) -> Path:
    if args.record:
        return Path(args.record)
    out = getattr(args, "out", None)
    if out is not None:
        out = Path(out)
        if out.suffix:
            return out.parent / (out.name + ".run.json")
        return out / "run.json"
    return Path("splatsim-run.json")


def write_run_record(args, outputs: list) -> Path:
    """Arguments, seed, config hash, and tool version; no timestamps, so
    identical invocations produce identical records."""
    arguments = {k: (str(v) if isinstance(v, Path) else v)
                 for k, v in sorted(vars(args).items())
                 if k not in ("func", "record")}
    canonical = json.dumps(arguments, sort_keys=True, separators=(",", ":"))
    payload = {
        "tool": "splatsim",
        "version": __version__,
        "subcommand": args.subcommand,
        "arguments": arguments,
        "config_hash": hashlib.sha256(canonical.encode()).hexdigest(),
        "outputs": sorted(str(o) for o in outputs),
    }
    path = _record_path(args)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# subcommand handlers: return (exit_code, outputs)
# ---------------------------------------------------------------------------

def cmd_validate(args):
    from .scene.validate import validate_scene
    scene = _load_scene(args.scene)
    violations = validate_scene(scene)
    for v in violations:
        print(v)
    print(f"{len(violations)} violations")
    return (1 if violations else 0), []


def cmd_edit(args):
    from .scene.io import save_scene
    scene = _load_scene(args.scene)
    conflicts: list = []
    edited = _apply_edits(scene, args.script, conflicts)
    for t, a, b in conflicts:
        print(f"conflict: t={t:g} {a} overlaps {b}", file=sys.stderr)
    save_scene(edited, args.out)
    print(f"wrote {args.out}")
    return 0, [args.out]


def cmd_render(args):
    from .rasterize import RenderConfig, render_sequence
    from .scene.frames import export_png, save_frames
    scene = _load_scene(args.scene)
    if args.edits:
        scene = _apply_edits(scene, args.edits)
    if args.size:
        w, h = (int(p) for p in args.size.lower().split("x"))
        cam = scene.camera
        scene = scene.replace(camera=cam.scaled(w / cam.width, h / cam.height))
    times = scene.timeline[:args.frames] if args.frames else None
    config = RenderConfig(sh_degree_used=args.sh_degree)
    seq = render_sequence(scene, config, threads=args.threads, times=times)
    out = Path(args.out)
    save_frames(seq, out)
    outputs = [out]
    if args.png:
        outputs += export_png(seq, out / "png")
    print(f"rendered {len(seq.frames)} frames to {out}")
    return 0, outputs


def cmd_pairs(args):
    from .edit import PerturbationSpec
    from .splatfit import (FitConfig, build_cycle_pairs, build_mesh_pairs,
                           save_pairs)
    scene = _load_scene(args.scene)
    if args.mode == "cycle":
        spec = PerturbationSpec(lateral_range=args.lateral,
                                vertical_range=args.vertical,
                                heading_range=math.radians(args.heading_deg),
                                seed=args.seed)
        fit = FitConfig(iterations=args.iterations, step_size=args.step_size)
        pairs = build_cycle_pairs(scene, spec, fit)
    else:
        pairs = build_mesh_pairs(scene, args.substitution_prob,
                                 args.lighting_jitter, args.seed)
    save_pairs(pairs, args.out)
    print(f"wrote {len(pairs)} pairs to {args.out}")
    return 0, [args.out]


def cmd_align(args):
    from .meshalign import (CommandHeadingOracle, align_mesh,
                            problem_from_scene, resolve_heading)
    scene = _load_scene(args.scene)
    asset = scene.asset(args.instance)
    if asset is None:
        raise SceneFormatError(f"unknown instance {args.instance!r}")
    if asset.mesh is None:
        raise SceneFormatError(f"instance {args.instance!r} has no mesh")
    problem = problem_from_scene(scene, args.instance, asset.mesh,
                                 iou_weight=args.iou_weight,
                                 frame_index=args.frame)
    result = align_mesh(problem)
    heading = result.heading
    if args.oracle:
        heading = resolve_heading(problem, CommandHeadingOracle(shlex.split(args.oracle)))
    payload = {
        "instance": args.instance,
        "scale": result.scale,
        "heading": heading,
        "score": result.score,
        "score_curve": [[s, v] for s, v in result.score_curve],
    }
    Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(f"scale={result.scale:.4f} heading={heading} score={result.score:.4f}")
    return 0, [args.out]


def cmd_train(args):
    from .diffusion import (DenoiserDescriptor, TrainConfig, init_model,
                            make_schedule, save_checkpoint, train)
    from .splatfit import load_pairs
    pairs = load_pairs(args.pairs)
    desc = DenoiserDescriptor(hidden=args.hidden, t_embed_dim=args.t_embed,
                              temporal=not args.no_temporal)
    model = init_model(desc, seed=args.seed)
    sched = make_schedule(args.timesteps)
    config = TrainConfig(steps=args.steps, step_size=args.step_size,
                         batch_size=args.batch_size, seed=args.seed)
    model, losses = train(model, pairs, sched, config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, sched, str(out))
    losses_path = out.parent / (out.name + ".losses.json")
    losses_path.write_text(json.dumps([float(l) for l in losses]) + "\n")
    print(f"trained {args.steps} steps: loss {losses[0]:.6f} -> {losses[-1]:.6f}")
    return 0, [out, losses_path]


def cmd_sample(args):
    from .diffusion import ddpm_sample, load_checkpoint, sample_to_rgb
    from .scene.frames import write_png
    from .splatfit import load_pairs
    model, sched = load_checkpoint(args.model)
    if args.pairs:
        pairs = load_pairs(args.pairs)
        if not 0 <= args.index < len(pairs):
            raise SceneFormatError(f"pair index {args.index} out of range "
                                   f"[0, {len(pairs)})")
        condition = pairs[args.index].condition.rgb_stack()
    else:
        from .rasterize import render_sequence
        scene = _load_scene(args.scene)
        condition = render_sequence(scene, threads=args.threads).rgb_stack()
    v_c = 2.0 * condition - 1.0
    x = ddpm_sample(model, v_c, sched, seed=args.seed)
    rgb = sample_to_rgb(x)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "sample.npy", rgb)
    outputs = [out / "sample.npy"]
    for i, frame in enumerate(rgb):
        outputs.append(write_png(frame, out / f"frame_{i:03d}.png"))
    print(f"sampled {len(rgb)} frames to {out}")
    return 0, outputs


def cmd_eval(args):
    from .benchmark import run_benchmark
    from .metrics import (CommandJudge, bas, bundle_from_scene, fid,
                          frame_features, fvd, vims)
    from .scene.frames import load_frames
    judge = CommandJudge(tuple(shlex.split(args.judge))) if args.judge else None
    out = Path(args.out)
    if args.manifest:
        report = run_benchmark(args.manifest, judge=judge)
        out.write_bytes(report.to_json_bytes())
        print(report.render_text())
        return 0, [out]
    needed = (args.gen_scene, args.gen_frames, args.gt_scene, args.gt_frames)
    if any(p is None for p in needed):
        raise SceneFormatError(
            "eval needs either --manifest or all of --gen-scene, "
            "--gen-frames, --gt-scene, --gt-frames")
    gen = bundle_from_scene(_load_scene(args.gen_scene), load_frames(args.gen_frames))
    gt = bundle_from_scene(_load_scene(args.gt_scene), load_frames(args.gt_frames))
    values = {
        "vims": vims(gen, gt),
        "bas": bas(gen, gt),
        "fid": fid(frame_features(gen.video), frame_features(gt.video)),
        "fvd": fvd([gen.video], [gt.video]),
    }
    out.write_text(json.dumps(values, indent=2, sort_keys=True) + "\n")
    for name in sorted(values):
        print(f"{name} {values[name]:.6f}")
    return 0, [out]


def cmd_report(args):
    from .benchmark import MetricReport
    report = MetricReport.from_dict(json.loads(Path(args.input).read_text()))
    data = (report.to_json_bytes() if args.format == "binary"
            else report.render_text().encode())
    if args.out:
        Path(args.out).write_bytes(data)
        return 0, [args.out]
    sys.stdout.write(data.decode())
    return 0, []


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splatsim",
        description="Editable splat scenes: validate, edit, render, build "
                    "training pairs, align meshes, train/sample the toy "
                    "diffusion model, and evaluate.")
    parser.add_argument("--version", action="version",
                        version=f"splatsim {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0,
                        help="seed for all randomness in this run")
    common.add_argument("--threads", type=int, default=1,
                        help="worker cap for parallel sections")
    common.add_argument("--record", default=None,
                        help="run-record path (default: next to the output)")

    p = sub.add_parser("validate", parents=[common],
                       help="check a scene against the schema invariants")
    p.add_argument("--scene", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("edit", parents=[common],
                       help="apply an edit script and save the edited scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--script", required=True, help="edit-script text file")
    p.add_argument("--out", required=True, help="output scene manifest path")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("render", parents=[common],
                       help="render a scene (optionally edited) to a frames dir")
    p.add_argument("--scene", required=True)
    p.add_argument("--edits", default=None, help="edit script to apply first")
    p.add_argument("--out", required=True, help="output frames directory")
    p.add_argument("--sh-degree", type=int, default=3,
                   help="max SH degree evaluated")
    p.add_argument("--size", default=None, metavar="WxH",
                   help="rescale the camera to this image size")
    p.add_argument("--frames", type=int, default=None,
                   help="render only the first N timeline frames")
    p.add_argument("--png", action="store_true", help="also export PNGs")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("pairs", parents=[common],
                       help="build condition/target training pairs")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True, help="output pairs directory")
    p.add_argument("--mode", choices=("cycle", "mesh"), default="cycle")
    p.add_argument("--lateral", type=float, default=0.5,
                   help="cycle: lateral perturbation range (m)")
    p.add_argument("--vertical", type=float, default=0.05,
                   help="cycle: vertical perturbation range (m)")
    p.add_argument("--heading-deg", type=float, default=2.0,
                   help="cycle: heading perturbation range (degrees)")
    p.add_argument("--iterations", type=int, default=30,
                   help="cycle: background refit iterations")
    p.add_argument("--step-size", type=float, default=1.0,
                   help="cycle: refit step size")
    p.add_argument("--substitution-prob", type=float, default=0.5,
                   help="mesh: per-asset substitution probability")
    p.add_argument("--lighting-jitter", type=float, default=0.1,
                   help="mesh: DC lighting jitter range")
    p.set_defaults(func=cmd_pairs)

    p = sub.add_parser("align", parents=[common],
                       help="recover mesh scale/heading against an instance box")
    p.add_argument("--scene", required=True)
    p.add_argument("--instance", required=True)
    p.add_argument("--out", required=True, help="alignment report JSON path")
    p.add_argument("--frame", type=int, default=None,
                   help="observation frame (default: most lidar points)")
    p.add_argument("--iou-weight", type=float, default=1.0)
    p.add_argument("--oracle", default=None,
                   help="external heading-oracle command line")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("train", parents=[common],
                       help="train the toy conditional denoiser on saved pairs")
    p.add_argument("--pairs", required=True, help="pairs directory")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--step-size", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--timesteps", type=int, default=50,
                   help="diffusion schedule length T")
    p.add_argument("--hidden", type=int, default=8)
    p.add_argument("--t-embed", type=int, default=8)
    p.add_argument("--no-temporal", action="store_true",
                   help="drop the temporal mixing layer")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", parents=[common],
                       help="ancestral-sample a video from a checkpoint")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--pairs", default=None,
                   help="pairs dir supplying the conditioning video")
    p.add_argument("--index", type=int, default=0,
                   help="pair index for --pairs")
    p.add_argument("--scene", default=None,
                   help="render this scene as the conditioning video")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", parents=[common],
                       help="run metrics on a scene pair or a full manifest")
    p.add_argument("--manifest", default=None, help="benchmark manifest JSON")
    p.add_argument("--gen-scene", default=None)
    p.add_argument("--gen-frames", default=None)
    p.add_argument("--gt-scene", default=None)
    p.add_argument("--gt-frames", default=None)
    p.add_argument("--judge", default=None,
                   help="external judge command line for OSR")
    p.add_argument("--out", required=True, help="report/values JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common],
                       help="render a saved benchmark report")
    p.add_argument("--input", required=True, help="report JSON from eval")
    p.add_argument("--format", choices=("binary", "text"), default="text",
                   help="binary = canonical JSON bytes, text = aligned table")
    p.add_argument("--out", default=None,
                   help="output path (default: stdout)")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        code, outputs = args.func(args)
    except INPUT_VALIDATION_ERRORS as err:
        print(f"splatsim: error[{err.category}]: {err}", file=sys.stderr)
        return 1
    except SplatSimError as err:
        print(f"splatsim: error[{err.category}]: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"splatsim: error[io]: {err}", file=sys.stderr)
        return 2
    write_run_record(args, outputs)
    return code


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
