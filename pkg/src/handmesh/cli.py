"""Command-line entry point: synth | fit | deform | render | eval | gradcheck.

Exit codes: 0 success, 1 usage error, 2 bad input data, 3 numerical failure.
Every command takes ``--seed``, ``--config`` (a JSON file whose keys mirror
the flags; flags given on the command line win) and ``--threads``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p):
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", type=Path, default=None, help="JSON file of option values")
    p.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="handmesh", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic subject and dataset")
    _common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n-train", dest="n_train_poses", type=int)
    p.add_argument("--n-test", dest="n_test_poses", type=int)
    p.add_argument("--n-cameras", dest="n_cameras", type=int)
    p.add_argument("--vertex-budget", dest="vertex_budget", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--bone-perturbation", dest="bone_length_perturbation", type=float)

    p = sub.add_parser("fit", help="train poses and correctives on a dataset")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--preset", choices=["desk", "default"], default=None,
                   help="base settings before other options (default desk)")
    p.add_argument("--resume", type=Path)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--pose-lr", dest="pose_lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--views", dest="views_per_frame", type=int)
    p.add_argument("--warmup-iters", dest="warmup_iters", type=int)
    for term in ("pose", "depth", "penet", "lap"):
        p.add_argument(f"--no-{term}", dest=f"use_{term}", action="store_const", const=False)
    p.add_argument("--disable-head", action="append", choices=["skel", "idvert", "posevert"],
                   default=None)

    p = sub.add_parser("deform", help="pose the (refined) model and write an OBJ")
    _common(p)
    p.add_argument("--data", type=Path, help="dataset directory (for the template)")
    p.add_argument("--model", type=Path, help="template model path (stem of .obj/.json)")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--pose", default="zero",
                   help="'zero', 'frame:N' (trained pose) or a JSON file {'u': [...]} / {'theta': [...]}")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("render", help="render depth maps of a mesh")
    _common(p)
    p.add_argument("--mesh", type=Path, required=True)
    p.add_argument("--cameras", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", help="metrics of a checkpoint on a dataset split")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--iters", dest="eval_iters", type=int)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss term")
    _common(p)
    p.add_argument("--configs", dest="n_configs", type=int)
    p.add_argument("--out", type=Path)
    return ap


def _options(args, keys) -> dict:
    """Config-file values overridden by explicitly given flags."""
    opts = {}
    if args.config is not None:
        try:
            opts = json.loads(args.config.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ValueError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(opts, dict):
            raise ValueError(f"{args.config}: config must be a JSON object")
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            opts[k] = v
    if args.seed is not None:
        opts["seed"] = args.seed
    return opts


def _write_manifest(path: Path, command: str, options: dict, **extra):
    path.write_text(json.dumps({"command": command, "options": options, **extra},
                               indent=1, sort_keys=True, default=str) + "\n", encoding="utf-8")


def cmd_synth(args):
    from . import synth
    keys = ["n_train_poses", "n_test_poses", "n_cameras", "vertex_budget", "image_size",
            "bone_length_perturbation"]
    opts = _options(args, keys)
    cfg = synth.SynthConfig.from_dict(opts)
    subject = synth.generate_subject(cfg)
    dataset = synth.generate_dataset(subject, cfg)
    synth.save_dataset(dataset, subject, args.out)
    print(f"wrote {len(dataset.frames)} frames x {len(dataset.cameras)} views to {args.out}")


def _fit_config(args, base=None):
    from .fit import FitConfig
    keys = ["epochs", "lr", "pose_lr", "batch_size", "views_per_frame", "warmup_iters",
            "use_pose", "use_depth", "use_penet", "use_lap", "eval_iters"]
    opts = _options(args, keys)
    if getattr(args, "disable_head", None):
        heads = dict(opts.get("heads", {"skel": True, "idvert": True, "posevert": True}))
        heads.update({h: False for h in args.disable_head})
        opts["heads"] = heads
    if base is not None:
        merged = base.to_dict()
        merged.update(opts)
        return FitConfig.from_dict(merged)
    preset = opts.pop("preset", "desk")
    if getattr(args, "preset", None) is not None:
        preset = args.preset
    return FitConfig.desk(**opts) if preset == "desk" else FitConfig.from_dict(opts)


def cmd_fit(args):
    from . import fit, synth
    dataset, subject = synth.load_dataset(args.data)
    state = None
    if args.resume is not None:
        state = fit.load_checkpoint(args.resume, subject.model)
        cfg = _fit_config(args, state.config)
        state.config = cfg
    else:
        cfg = _fit_config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    state = fit.fit(dataset, subject.model, subject.beta, cfg, state=state,
                    checkpoint=args.out / "checkpoint.bin", loss_csv=args.out / "loss.csv")
    _write_manifest(args.out / "manifest.json", "fit", cfg.to_dict(), data=str(args.data))
    print(f"final loss {state.history[-1].total:.6g} after {state.iteration} iterations")


def _load_template(args):
    from . import model, synth
    if args.model is not None:
        return model.load_model(args.model), None
    if args.data is not None:
        sub = synth.load_subject(args.data / "subject")
        return sub.model, sub.beta
    raise ValueError("deform needs --model or --data")


def cmd_deform(args):
    from . import fit
    from .correctives import CorrectiveNets
    from .fileio import write_obj
    from .pipeline import Decoder
    model, beta = _load_template(args)
    if args.checkpoint is not None:
        state = fit.load_checkpoint(args.checkpoint, model)
        dec = state.decoder()
    else:
        state = None
        dec = Decoder(model, CorrectiveNets.for_model(model), np.zeros(32) if beta is None else beta)
    if args.pose == "zero":
        u = np.zeros(model.n_pose)
    elif args.pose.startswith("frame:"):
        if state is None:
            raise ValueError("--pose frame:N needs --checkpoint")
        u = state.poses[int(args.pose.split(":", 1)[1])].value
    else:
        spec = json.loads(Path(args.pose).read_text(encoding="utf-8"))
        if "u" in spec:
            u = np.asarray(spec["u"], dtype=np.float64)
        else:
            theta = np.asarray(spec["theta"], dtype=np.float64)
            if np.any(np.abs(theta) >= np.pi):
                raise ValueError("theta must lie in (-pi, pi)")
            u = np.arctanh(theta / np.pi)
        if u.shape != (model.n_pose,):
            raise ValueError(f"pose needs {model.n_pose} values, got {u.shape}")
    mesh, joints = dec.deform(u)
    write_obj(args.out, mesh, model.faces)
    _write_manifest(args.out.with_suffix(".json"), "deform",
                    {"pose": args.pose, "checkpoint": args.checkpoint, "seed": args.seed},
                    joints=joints.tolist())
    print(f"wrote {args.out}")


def cmd_render(args):
    from .fileio import read_obj, write_pfm
    from .render import load_cameras, render_depth_map
    verts, faces = read_obj(args.mesh)
    cameras = load_cameras(args.cameras)
    args.out.mkdir(parents=True, exist_ok=True)
    for c, cam in enumerate(cameras):
        write_pfm(args.out / f"view_{c}.pfm", render_depth_map(verts, faces, cam).astype(np.float32))
    _write_manifest(args.out / "manifest.json", "render",
                    {"mesh": args.mesh, "cameras": args.cameras, "seed": args.seed})
    print(f"wrote {len(cameras)} depth maps to {args.out}")


def cmd_eval(args):
    from . import fit, synth
    dataset, subject = synth.load_dataset(args.data)
    state = fit.load_checkpoint(args.checkpoint, subject.model)
    state.config = _fit_config(args, state.config)
    report = fit.evaluate(state, dataset.split(args.split), dataset.cameras)
    report["split"] = args.split
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "metrics.json").write_text(json.dumps(report, indent=1) + "\n", encoding="utf-8")
    (args.out / "metrics.csv").write_text(fit.report_csv(report), encoding="utf-8")
    _write_manifest(args.out / "manifest.json", "eval", state.config.to_dict(),
                    checkpoint=str(args.checkpoint), split=args.split)
    line = f"{args.split}: P_err {report['p_err']['mean']:.3f} mm"
    if "m_err" in report:
        line += f", M_err {report['m_err']['mean']:.3f} mm"
    print(line)


def cmd_gradcheck(args):
    from . import gradcheck
    opts = _options(args, ["n_configs"])
    rows = gradcheck.run(int(opts.get("n_configs", 20)), int(opts.get("seed", 0)))
    table = gradcheck.format_table(rows)
    print(table)
    if args.out is not None:
        args.out.write_text(table + "\n", encoding="utf-8")
    return EXIT_OK if all(r.passed for r in rows) else EXIT_NUMERIC


COMMANDS = {"synth": cmd_synth, "fit": cmd_fit, "deform": cmd_deform, "render": cmd_render,
            "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    from .fileio import FormatError
    from .kinematics import DegenerateError
    from .losses import DataError, TrainingError
    from .model import ValidationError
    from .synth import GenerationError
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        import numba
        numba.set_num_threads(max(1, min(args.threads, numba.config.NUMBA_NUM_THREADS)))
    try:
        return COMMANDS[args.command](args) or EXIT_OK
    except TrainingError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        if exc.breakdown is not None:
            print(json.dumps(asdict(exc.breakdown)), file=sys.stderr)
        return EXIT_NUMERIC
    except (FloatingPointError, DegenerateError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ValidationError, DataError, GenerationError, FileNotFoundError,
            KeyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
