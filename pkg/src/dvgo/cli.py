"""Command-line entry point: ``dvgo <subcommand> [options]``.

Exit codes: 0 on success, 1 for usage errors (bad flags or values), 2 for
runtime failures such as unreadable files or a failed verification.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .errors import InvalidInputError, LoadError

log = logging.getLogger("dvgo")

# Flag name -> TrainConfig field.
CONFIG_FLAGS = {
    "seed": "seed",
    "threads": "threads",
    "m_coarse": "m_coarse",
    "m_fine": "m_fine",
    "step_ratio": "step_ratio",
    "alpha_init_coarse": "alpha_init_coarse",
    "alpha_init_fine": "alpha_init_fine",
    "tau_coarse": "tau_coarse",
    "tau_fine": "tau_fine",
    "iters_coarse": "coarse_iters",
    "iters_fine": "fine_iters",
    "batch_rays": "batch_rays",
    "white_bg": "white_bg",
    "pg_ckpt": "pg_ckpt",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        # Prefix matching would make e.g. --iters ambiguous with --iters-fine.
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS, allow_abbrev=False)
    p.add_argument("--config", type=Path, help="YAML or JSON file with training settings")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="worker threads (default: available cores)")
    p.add_argument("--m-coarse", type=int, dest="m_coarse")
    p.add_argument("--m-fine", type=int, dest="m_fine")
    p.add_argument("--step-ratio", type=float, dest="step_ratio")
    p.add_argument("--alpha-init-coarse", type=float, dest="alpha_init_coarse")
    p.add_argument("--alpha-init-fine", type=float, dest="alpha_init_fine")
    p.add_argument("--tau-coarse", type=float, dest="tau_coarse")
    p.add_argument("--tau-fine", type=float, dest="tau_fine")
    p.add_argument("--iters-coarse", type=int, dest="iters_coarse")
    p.add_argument("--iters-fine", type=int, dest="iters_fine")
    p.add_argument("--batch-rays", type=int, dest="batch_rays")
    p.add_argument("--white-bg", type=_bool, dest="white_bg", metavar="BOOL")
    p.add_argument("--pg-ckpt", type=int, nargs="*", dest="pg_ckpt", metavar="ITER",
                   help="fine iterations at which the grids are upscaled")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="dvgo", description="Voxel-grid radiance fields and their closed-form oracles.",
                     parents=[common])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", parents=[common], help="train coarse and fine stages on a dataset")
    p.add_argument("data", type=Path, help="NeRF-synthetic style dataset directory")

    p = sub.add_parser("render", parents=[common], help="render a split from a trained run")
    p.add_argument("run", type=Path, help="directory written by 'train'")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--stage", choices=("coarse", "fine"), default="fine")

    p = sub.add_parser("eval", parents=[common], help="render the test split and write metrics")
    p.add_argument("run", type=Path)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--stage", choices=("coarse", "fine"), default="fine")

    p = sub.add_parser("toy2d", parents=[common], help="pre/in/post activation image-fit sweep")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--strides", type=float, nargs="+", default=[2, 5, 8])
    p.add_argument("--modes", nargs="+", choices=("pre", "in", "post"), default=["pre", "in", "post"])
    p.add_argument("--iters", type=int, default=3000)
    p.add_argument("--targets", nargs="+", default=None, help="subset of the built-in targets")

    p = sub.add_parser("oracle1d", parents=[common], help="closed-form values for a 1D step")
    p.add_argument("--c", type=float, required=True)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-2)
    p.add_argument("--delta", type=float, default=0.5)
    p.add_argument("--n-probe", type=int, default=1001, dest="n_probe")

    p = sub.add_parser("oracle2d", parents=[common], help="closed-form corner values for a 2D cell")
    p.add_argument("--c0", type=float, required=True, help="boundary position on the top edge")
    p.add_argument("--c1", type=float, required=True, help="boundary position on the bottom edge")
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-2)
    p.add_argument("--tol-bottom", type=float, default=None, dest="tol_bottom")
    p.add_argument("--delta", type=float, default=0.5)

    p = sub.add_parser("genscene", parents=[common], help="write an analytic dataset to disk")
    p.add_argument("--kind", default="two_tone_sphere")
    p.add_argument("--n-train", type=int, default=20, dest="n_train")
    p.add_argument("--n-test", type=int, default=5, dest="n_test")
    p.add_argument("--size", type=int, default=100)

    p = sub.add_parser("info", parents=[common], help="print the resolved config and checkpoint metadata")
    p.add_argument("path", type=Path, nargs="?", help="checkpoint file or run directory")
    return parser


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

def resolve_config(args):
    """Defaults, then the config file, then explicit flags."""
    from .pipeline import TrainConfig

    data = {}
    config_path = getattr(args, "config", None)
    if config_path is not None:
        try:
            loaded = yaml.safe_load(Path(config_path).read_text())
        except OSError as exc:
            raise LoadError(f"cannot read config {config_path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise InvalidInputError(f"config {config_path} is not valid YAML/JSON: {exc}") from exc
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise InvalidInputError(f"config {config_path} must hold a mapping")
        data.update(loaded)
    if "threads" not in data:
        data["threads"] = os.cpu_count() or 1
    for flag, name in CONFIG_FLAGS.items():
        if hasattr(args, flag):
            data[name] = getattr(args, flag)
    return TrainConfig.from_dict(data)


def _out_dir(args, default: str) -> Path:
    out = Path(getattr(args, "out", default))
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_train(args) -> int:
    from .data import load_nerf_synthetic
    from .pipeline import train
    from .plotting import plot_loss

    cfg = resolve_config(args)
    dataset = load_nerf_synthetic(args.data, white_bg=cfg.white_bg)
    out = _out_dir(args, "run")
    coarse, fine = train(dataset, cfg, out)
    plot_loss({"coarse": coarse.trace, "fine": fine.trace}, out / "loss.png")
    print(f"wrote {out / 'coarse.ckpt'}, {out / 'fine.ckpt'} and loss traces")
    return 0


def _load_run(run: Path, stage: str):
    from .pipeline import FreeSpaceMask, TrainConfig
    from .scene import load_scene

    cfg_path = run / "config.json"
    try:
        cfg = TrainConfig.from_dict(json.loads(cfg_path.read_text()))
    except OSError as exc:
        raise LoadError(f"cannot read {cfg_path}: {exc}") from exc
    coarse = load_scene(run / "coarse.ckpt")
    if stage == "coarse":
        return cfg, coarse, None, 0.0
    return cfg, load_scene(run / "fine.ckpt"), FreeSpaceMask(coarse, cfg.tau_coarse), cfg.tau_fine


def cmd_render(args) -> int:
    from .data import load_nerf_synthetic, write_png
    from .pipeline import render_view

    cfg, scene, mask, tau_fine = _load_run(args.run, args.stage)
    dataset = load_nerf_synthetic(args.data, white_bg=cfg.white_bg)
    images = dataset.train if args.split == "train" else dataset.test
    out = _out_dir(args, str(args.run / f"render_{args.split}"))
    threads = getattr(args, "threads", os.cpu_count() or 1)
    for i, im in enumerate(images):
        img = render_view(scene, im.camera, mask, dataset.bg_color, tau_fine, threads=threads)
        write_png(out / f"{args.split}_{i:03d}.png", img)
    print(f"rendered {len(images)} views to {out}")
    return 0


def cmd_eval(args) -> int:
    from .data import load_nerf_synthetic, write_png
    from .pipeline import evaluate
    from .plotting import plot_metrics

    cfg, scene, mask, tau_fine = _load_run(args.run, args.stage)
    dataset = load_nerf_synthetic(args.data, white_bg=cfg.white_bg)
    if not dataset.test:
        raise LoadError(f"{args.data} has no test split")
    out = _out_dir(args, str(args.run / "eval"))
    threads = getattr(args, "threads", os.cpu_count() or 1)
    renders, metrics = evaluate(scene, dataset.test, mask, dataset.bg_color, tau_fine, threads=threads)
    with open(out / "metrics.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["view_index", "psnr", "ssim"])
        for i, (p, s) in enumerate(metrics):
            writer.writerow([i, f"{p:.6f}", f"{s:.6f}"])
    for i, img in enumerate(renders):
        write_png(out / f"test_{i:03d}.png", img)
    plot_metrics(metrics, out / "metrics.png")
    mean_psnr = float(np.mean([m[0] for m in metrics]))
    mean_ssim = float(np.mean([m[1] for m in metrics]))
    print(f"mean PSNR {mean_psnr:.3f} dB  mean SSIM {mean_ssim:.4f}  ({len(metrics)} views)")
    return 0


def cmd_toy2d(args) -> int:
    from .closedform import standard_targets, toy_image_fit
    from .plotting import plot_psnr_vs_stride, save_image_grid

    targets = standard_targets(args.size)
    if args.targets:
        unknown = set(args.targets) - set(targets)
        if unknown:
            raise InvalidInputError(f"unknown targets {sorted(unknown)}; choose from {sorted(targets)}")
        targets = {k: targets[k] for k in args.targets}
    seed = getattr(args, "seed", 0)
    out = _out_dir(args, "toy2d")
    rows = []
    for name, target in targets.items():
        images, labels = [target], ["target"]
        for stride in args.strides:
            for mode in args.modes:
                fitted, value = toy_image_fit(target, stride, mode, args.iters, seed)
                rows.append((name, mode, stride, value))
                images.append(fitted)
                labels.append(f"{mode} s={stride:g} {value:.1f}dB")
                print(f"{name:15s} stride {stride:4g} {mode:4s} PSNR {value:7.3f}")
        save_image_grid(images, labels, out / f"fit_{name}.png", ncols=len(args.modes))
    with open(out / "toy2d.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["target", "mode", "stride", "psnr"])
        for name, mode, stride, value in rows:
            writer.writerow([name, mode, f"{stride:g}", f"{value:.6f}"])
    plot_psnr_vs_stride(rows, out / "psnr_vs_stride.png")
    return 0


def cmd_oracle1d(args) -> int:
    from .closedform import SharpSurfaceSpec1D, profile, solve_1d, step_target, verify_1d

    spec = SharpSurfaceSpec1D(args.c, args.eps, args.tol, args.delta)
    a, b = solve_1d(spec)
    report = verify_1d(a, b, spec, args.n_probe)
    print(f"c={args.c:g}  a={a:.1f}  b={b:.1f}")
    print(f"max |S-T| outside band {report.max_error:.3e}  S(c)={report.s_at_c:.12f}")
    print("PASS" if report.passed else "FAIL: " + "; ".join(report.failures))
    if hasattr(args, "out"):
        from .plotting import plot_profile

        out = _out_dir(args, ".")
        x = np.linspace(0.0, 1.0, args.n_probe)
        s, t = profile(x, a, b, args.delta), step_target(x, args.c)
        with open(out / "oracle1d.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["x", "S", "T"])
            writer.writerows([f"{xi:.6f}", f"{si:.9g}", f"{ti:g}"] for xi, si, ti in zip(x, s, t))
        plot_profile(x, s, t, args.c, args.tol, out / "oracle1d.png", f"c={args.c:g}")
    return 0 if report.passed else 2


def cmd_oracle2d(args) -> int:
    from .closedform import SharpSurfaceSpec1D, render_cell, solve_2d, verify_1d

    tol_bottom = args.tol if args.tol_bottom is None else args.tol_bottom
    cell = solve_2d(args.c0, args.c1, args.eps, args.tol, tol_bottom, args.delta)
    print(f"V_tl={cell.v_tl:.1f}  V_tr={cell.v_tr:.1f}")
    print(f"V_bl={cell.v_bl:.1f}  V_br={cell.v_br:.1f}")
    ok = True
    if tol_bottom == args.tol:
        # With one tolerance the blended pair on every slice is the 1D solution there.
        for t in np.linspace(0.0, 1.0, 5):
            c = (1 - t) * args.c0 + t * args.c1
            if c == 0:
                continue
            a, b = cell.slice(t)
            report = verify_1d(a, b, SharpSurfaceSpec1D(c, args.eps, args.tol, args.delta))
            ok &= report.passed
            print(f"slice t={t:.2f} c={c:.3f}: {'PASS' if report.passed else 'FAIL'}")
    if hasattr(args, "out"):
        from .plotting import plot_cell

        out = _out_dir(args, ".")
        plot_cell(render_cell(cell, 200, args.delta), out / "oracle2d.png",
                  f"c0={args.c0:g} c1={args.c1:g}")
    print("PASS" if ok else "FAIL")
    return 0 if ok else 2


def cmd_genscene(args) -> int:
    from .data import generate_analytic_scene, save_nerf_synthetic

    out = _out_dir(args, f"scene_{args.kind}")
    dataset = generate_analytic_scene(args.kind, args.n_train, args.n_test, args.size,
                                      seed=getattr(args, "seed", 0))
    save_nerf_synthetic(dataset, out)
    print(f"wrote {len(dataset.train)} train and {len(dataset.test)} test views to {out}")
    return 0


def cmd_info(args) -> int:
    from .scene import load_scene, scene_summary

    info = {"config": resolve_config(args).to_dict()}
    path = args.path
    if path is not None:
        path = Path(path)
        if path.is_dir():
            if (path / "config.json").exists() and not hasattr(args, "config"):
                args.config = path / "config.json"
                info["config"] = resolve_config(args).to_dict()
            info["checkpoints"] = {p.name: scene_summary(load_scene(p)) for p in sorted(path.glob("*.ckpt"))}
            if not info["checkpoints"]:
                raise LoadError(f"no checkpoints in {path}")
        else:
            info["checkpoints"] = {path.name: scene_summary(load_scene(path))}
    print(json.dumps(info, indent=2, sort_keys=True))
    return 0


COMMANDS = {
    "train": cmd_train,
    "render": cmd_render,
    "eval": cmd_eval,
    "toy2d": cmd_toy2d,
    "oracle1d": cmd_oracle1d,
    "oracle2d": cmd_oracle2d,
    "genscene": cmd_genscene,
    "info": cmd_info,
}


def _setup_logging() -> None:
    level = os.environ.get("DVGO_LOG", "error").strip().upper()
    if level not in ("ERROR", "INFO", "DEBUG", "WARNING"):
        level = "ERROR"
    logging.basicConfig(level=getattr(logging, level), format="%(levelname)s %(name)s: %(message)s")


def run(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](args)
    except InvalidInputError as exc:
        print(f"dvgo {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except LoadError as exc:
        print(f"dvgo {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - last-resort reporting
        log.debug("unhandled failure", exc_info=True)
        print(f"dvgo {args.command}: failed: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
