"""Command-line entry points: train, infer, eval, gradcheck, synth."""
import argparse
import os
import sys

import numpy as np

from . import io
from .inference import restore_sequence, two_stage_infer
from .metrics import MetricReport
from .model import EDVR


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage().strip()}\n{self.prog}: error: {message}")


def sidecar_path(ckpt):
    return ckpt + ".cfg"


def load_model(ckpt):
    """Model config comes from the ``<ckpt>.cfg`` sidecar written by ``train``."""
    cfg_path = sidecar_path(ckpt)
    if not os.path.exists(cfg_path):
        raise FileNotFoundError(f"{cfg_path}: model config sidecar not found")
    model_cfg, _ = io.read_config(cfg_path)
    model = EDVR(model_cfg)
    io.load_checkpoint(ckpt, model)
    return model


def save_model(ckpt, model, train_cfg=None):
    io.save_checkpoint(ckpt, model)
    io.write_config(sidecar_path(ckpt), model.config, train_cfg)


def cmd_train(args):
    from .training import train

    model_cfg, train_cfg = io.read_config(args.config)
    if args.seed is not None:
        model_cfg.seed = train_cfg.seed = args.seed
    if args.iters is not None:
        train_cfg.iters = args.iters
        train_cfg.validate()
    model = EDVR(model_cfg)
    log_file = open(args.log, "w", encoding="utf-8") if args.log else None
    try:
        def log(line):
            if log_file:
                log_file.write(line + "\n")
            else:
                print(line, flush=True)

        train(model, train_cfg, log=log, log_timing=not args.no_timing)
    finally:
        if log_file:
            log_file.close()
    save_model(args.out, model, train_cfg)
    return 0


def _dump_diagnostics(directory, diagnostics, n_frames):
    os.makedirs(directory, exist_ok=True)
    for i, diag in enumerate(diagnostics):
        att = diag.get("attention")
        if att is not None:
            for j in range(att.shape[1]):
                io.write_gray(os.path.join(directory, f"attention_{i:08d}_{j}.png"), att[0, j])
        off = diag.get("offsets_l1")
        if off is not None:
            for j in range(n_frames):
                o = off[j].reshape(-1, 2, *off.shape[-2:])
                mag = np.sqrt((o ** 2).sum(axis=1)).mean(axis=0)
                peak = mag.max()
                io.write_gray(os.path.join(directory, f"offset_{i:08d}_{j}.png"),
                              mag / peak if peak > 0 else mag)


def cmd_infer(args):
    frames = io.read_frames(args.frames)
    model = load_model(args.ckpt)
    diagnostics = [] if args.dump_diagnostics else None
    if args.two_stage:
        out = two_stage_infer(model, load_model(args.two_stage), frames, ensemble=args.ensemble)
    elif not args.ensemble:
        out = restore_sequence(model, frames, diagnostics=diagnostics)
    else:
        out = restore_sequence(model, frames, ensemble=True)
    if diagnostics == []:
        # diagnostics always describe a plain single pass of the first model
        restore_sequence(model, frames, diagnostics=diagnostics)
    io.write_frames(args.out, out)
    if diagnostics is not None:
        _dump_diagnostics(args.dump_diagnostics, diagnostics, model.config.n_frames)
    print(f"wrote {len(out)} frames to {args.out}")
    return 0


def cmd_eval(args):
    pred = io.read_frames(args.pred)
    gt = io.read_frames(args.gt)
    if pred.shape != gt.shape:
        raise ValueError(f"eval: prediction {pred.shape} and ground truth {gt.shape} differ")
    report = MetricReport(args.mode)
    report.add(os.path.basename(os.path.normpath(args.pred)), pred, gt)
    for line in report.lines():
        print(line)
    return 0


def cmd_gradcheck(args):
    from .gradsuite import run_suite

    results = run_suite(seed=args.seed)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(r)
    if failed:
        print(f"{len(failed)} of {len(results)} checks failed")
        return 1
    print("all checks passed")
    return 0


SYNTH_KEYS = {"track": str, "texture": str, "frames": int, "height": int, "width": int, "seed": int,
              "velocity_y": float, "velocity_x": float}


def parse_synth_spec(text):
    """key=value synth spec; unknown keys are rejected."""
    spec = {"track": "sr_clean", "texture": None, "frames": 100, "height": 64, "width": 64, "seed": 0,
            "velocity_y": 0.5, "velocity_x": 0.25}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = (s.strip() for s in line.partition("="))
        if not sep or key not in SYNTH_KEYS:
            raise ValueError(f"synth spec line {lineno}: unknown or malformed entry {line!r}")
        spec[key] = SYNTH_KEYS[key](raw)
    return spec


def cmd_synth(args):
    from .synth import render_video

    with open(args.spec, encoding="utf-8") as f:
        spec = parse_synth_spec(f.read())
    degraded, clean = render_video(spec["track"], spec["frames"], spec["height"], spec["width"], spec["seed"],
                                   (spec["velocity_y"], spec["velocity_x"]), spec["texture"])
    io.write_frames(os.path.join(args.out, "input"), degraded)
    io.write_frames(os.path.join(args.out, "gt"), clean)
    print(f"wrote {len(degraded)} frames to {args.out}")
    return 0


def build_parser():
    p = _Parser(prog="edvr", description="Video restoration with deformable alignment and attention fusion.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    t = sub.add_parser("train", help="train on synthetic clips")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--seed", type=int)
    t.add_argument("--iters", type=int)
    t.add_argument("--log", help="write the training log here instead of stdout")
    t.add_argument("--no-timing", action="store_true", help="log elapsed_ms as 0 for reproducible logs")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="restore a frame directory")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--frames", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--ensemble", action="store_true")
    i.add_argument("--two-stage", metavar="CKPT2")
    i.add_argument("--dump-diagnostics", metavar="DIR")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="PSNR/SSIM of two frame directories")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--mode", choices=("y", "rgb"), default="y")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="render a synthetic sequence")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except OSError as exc:
        print(f"edvr {args.command}: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError) as exc:
        print(f"edvr {args.command}: {exc}".splitlines()[0], file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
