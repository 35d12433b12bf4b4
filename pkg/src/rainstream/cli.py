"""Command-line entry point: ``rainstream <command> [flags]``.

Failures print one line, ``rainstream: error: <Kind>: <message>``, to stderr
and exit nonzero.
"""
from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path

import numpy as np

from . import analysis, storage
from .model import ABLATIONS, TwoStreamNet, ablate, derain_video
from .rainsynth import RainConfig, build_dataset, load_split
from .trainer import LossWeights, TrainPhasePlan, crop_cubes, train

PROG = "rainstream"


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail("UsageError", message, code=2)


def _fail(kind: str, message: str, code: int = 1):
    flat = " ".join(str(message).split())
    print(f"{PROG}: error: {kind}: {flat}", file=sys.stderr)
    sys.exit(code)


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must be in [0, 2**64), got {text}")
    return value


def _video_dirs(root: Path) -> dict[str, Path]:
    """A directory of frames is one video; otherwise each frame-holding subdirectory is one."""
    if not root.is_dir():
        raise CliError(f"{root}: not a directory")
    if storage.list_frames(root):
        return {root.name: root}
    found = {p.name: p for p in sorted(root.iterdir()) if p.is_dir() and storage.list_frames(p)}
    if not found:
        raise CliError(f"{root}: no .ppm/.pgm frames found")
    return found


def _write_csv(rows, header, path: Path | None):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    if path is None:
        sys.stdout.write(buf.getvalue())
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(buf.getvalue())


# -- commands ---------------------------------------------------------------

def cmd_synth(args) -> None:
    cfg = storage.load_config(args.config)
    videos = {name: storage.read_video(p) for name, p in _video_dirs(Path(args.clean)).items()}
    base = None
    if not cfg["synth.randomize"]:
        base = RainConfig(**{k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith("rain.")})
    entries = build_dataset(videos, args.out, seed=args.seed, split=cfg["synth.split"], base_config=base)
    print(f"rendered {len(entries)} rain videos into {args.out}")


def cmd_train(args) -> None:
    cfg = storage.load_config(args.config)
    triplets = load_split(args.data, "train")
    cube = (cfg["trainer.cube_t"], cfg["trainer.cube_h"], cfg["trainer.cube_w"])
    if cube[0] != cfg["model.T"]:
        raise CliError(f"trainer.cube_t={cube[0]} must equal model.T={cfg['model.T']}")
    cubes = []
    for k, (_, trip) in enumerate(triplets):
        cubes += crop_cubes(trip.x, trip.s, trip.c, cube, cfg["trainer.stride"], seed=args.seed + k)
    channels = triplets[0][1].x.shape[1]
    if channels != cfg["model.channels"]:
        raise CliError(f"dataset has {channels} channels but model.channels={cfg['model.channels']}")
    net = TwoStreamNet(channels, cfg["model.T"], cfg["model.theta"], seed=args.seed % 2 ** 32)
    if args.ablation != "none":
        net = ablate(net, args.ablation)
    plan = TrainPhasePlan(LossWeights(1.0, 0.01), LossWeights(0.01, 1.0),
                          cfg["trainer.phase1_steps"], cfg["trainer.phase2_steps"],
                          cfg["trainer.plateau_window"], cfg["trainer.plateau_tol"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(storage.format_config(cfg))
    result = train(cubes, net, plan, batch_size=cfg["trainer.batch"], seed=args.seed % 2 ** 32,
                   lr=cfg["trainer.lr"], clip_norm=cfg["trainer.clip_norm"] or None,
                   log_path=out / "train_log.csv", checkpoint_dir=out,
                   checkpoint_every=cfg["trainer.checkpoint_every"])
    last = result.log[-1] if result.log else None
    summary = f"loss_D={last['loss_D']!r} loss_R={last['loss_R']!r}" if last else "no steps run"
    print(f"trained {len(result.log)} steps on {len(cubes)} cubes; {summary}; checkpoint {out / 'final'}")


def cmd_derain(args) -> None:
    net, _, _ = storage.load_checkpoint(args.ckpt)
    video = storage.read_video(args.input)
    if video.shape[1] != net.channels:
        raise CliError(f"input has {video.shape[1]} channels, checkpoint expects {net.channels}")
    c_hat, s_hat = derain_video(net, video)
    out = Path(args.out)
    storage.write_video(out, np.clip(c_hat, 0.0, 1.0))
    if args.emit_streaks:
        storage.write_video(out / "streaks", np.clip(s_hat.mean(axis=1, keepdims=True), 0.0, 1.0))
    print(f"wrote {len(c_hat)} frames to {out}")


def cmd_eval(args) -> None:
    pred = storage.read_video(args.pred)
    ref = storage.read_video(args.ref)
    if pred.shape != ref.shape:
        raise CliError(f"prediction {pred.shape} and reference {ref.shape} differ in shape")
    report = analysis.quality_report(pred, ref)
    rows = [(i, repr(float(p)), repr(float(s))) for i, (p, s) in enumerate(zip(report["psnr"], report["ssim"]))]
    if args.csv:
        _write_csv(rows, ("frame", "psnr_db", "ssim"), Path(args.csv))
    _write_csv(rows + [("mean", repr(report["mean_psnr"]), repr(report["mean_ssim"]))],
               ("frame", "psnr_db", "ssim"), None)


def cmd_analyze_cc(args) -> None:
    videos = []
    for root in args.input:
        videos += [storage.read_video(p) for p in _video_dirs(Path(root)).values()]
    curve = analysis.cc_curve(videos, args.max_distance)
    _write_csv([(d, repr(float(v))) for d, v in enumerate(curve)], ("distance", "mean_cc"),
               Path(args.csv) if args.csv else None)
    if args.plot:
        storage.write_frame(args.plot, analysis.line_plot(np.nan_to_num(curve)))


def cmd_analyze_rain(args) -> None:
    video = storage.read_video(args.input)
    if video.shape[1] != 1:
        video = video.mean(axis=1, keepdims=True)
    stats = analysis.rain_stats(video, threshold=args.threshold)
    _write_csv([(i, repr(float(d))) for i, d in enumerate(stats.density)], ("frame", "density"),
               Path(args.csv) if args.csv else None)
    _write_csv([(repr(stats.direction_std), repr(stats.speed_std))], ("direction_std", "speed_std"), None)


def cmd_gradcheck(args) -> None:
    from .gradcheck import format_report, run_gradcheck

    if args.inject_fault and args.inject_fault not in _FAULT_OPS:
        raise CliError(f"--inject-fault must name a primitive: {', '.join(_FAULT_OPS)}")
    results = run_gradcheck(args.seed % 2 ** 32, fault=args.inject_fault)
    print(format_report(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        _fail("GradcheckFailed", f"{len(failed)} case(s) over tolerance: {', '.join(failed)}")


_FAULT_OPS = ("conv2d", "add", "sub", "mul", "sigmoid", "tanh", "prelu", "scale_shift",
              "concat", "split", "total", "mse")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog=PROG, description="Two-stream ConvLSTM video deraining toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="render rain over clean videos into a dataset")
    s.add_argument("--config", help="key = value config file (defaults when omitted)")
    s.add_argument("--clean", required=True, help="directory of clean frames, or of per-video frame directories")
    s.add_argument("--out", required=True, help="dataset root to create")
    s.add_argument("--seed", type=_u64, default=0, help="unsigned 64-bit seed")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="two-phase training on a synthesized dataset")
    s.add_argument("--data", required=True, help="dataset root written by synth")
    s.add_argument("--config", help="key = value config file (defaults when omitted)")
    s.add_argument("--out", required=True, help="output directory for checkpoints and train_log.csv")
    s.add_argument("--seed", type=_u64, default=0, help="unsigned 64-bit seed")
    s.add_argument("--ablation", choices=ABLATIONS, default="none", help="architecture variant")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("derain", help="restore a rain video with a trained checkpoint")
    s.add_argument("--ckpt", required=True, help="checkpoint directory")
    s.add_argument("--in", dest="input", required=True, help="directory of input frames")
    s.add_argument("--out", required=True, help="directory for restored frames")
    s.add_argument("--emit-streaks", action="store_true", help="also write streak estimates as PGM under OUT/streaks")
    s.set_defaults(func=cmd_derain)

    s = sub.add_parser("eval", help="PSNR/SSIM of predicted frames against references")
    s.add_argument("--pred", required=True, help="directory of predicted frames")
    s.add_argument("--ref", required=True, help="directory of reference frames")
    s.add_argument("--csv", help="also write per-frame frame,psnr_db,ssim rows here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("analyze-cc", help="temporal correlation curve of clean videos")
    s.add_argument("--in", dest="input", nargs="+", required=True, help="video directories (or roots of them)")
    s.add_argument("--max-distance", type=int, default=10, help="largest frame distance")
    s.add_argument("--csv", help="write distance,mean_cc here instead of stdout")
    s.add_argument("--plot", help="write a PPM line plot of the curve here")
    s.set_defaults(func=cmd_analyze_cc)

    s = sub.add_parser("analyze-rain", help="density, direction and speed statistics of a streak video")
    s.add_argument("--in", dest="input", required=True, help="directory of streak frames")
    s.add_argument("--threshold", type=float, default=0.05, help="streak-pixel threshold for density")
    s.add_argument("--csv", help="write frame,density here instead of stdout")
    s.set_defaults(func=cmd_analyze_rain)

    s = sub.add_parser("gradcheck", help="finite-difference check of every differentiable block")
    s.add_argument("--seed", type=_u64, default=0, help="unsigned 64-bit seed")
    s.add_argument("--inject-fault", metavar="OP", help="test hook: corrupt the backward pass of primitive OP")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except SystemExit:
        raise
    except Exception as exc:  # surfaced as a single machine-readable line
        _fail(type(exc).__name__, str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())
