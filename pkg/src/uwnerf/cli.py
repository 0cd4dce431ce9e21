"""Command-line pipeline: synth, train, uq, render, cleanup, eval.

Each subcommand reads flags and, optionally, an INI file given by
``--config``.  Section names are subcommand names and keys are flag names
(dashes or underscores).  Flags on the command line override the file.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 1 numeric
failure (for example a diverged training run).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .cleanup import normalize_field, thresholded_render_image
from .dataset import Dataset, load_dataset
from .diff import ContractError, NumericError
from .field import NeuralField, load_checkpoint, save_checkpoint
from .images import read_raw, write_heatmap, write_png, write_raw
from .laplace import (
    DEFAULT_GRID,
    UQConfig,
    UncertaintyField,
    accumulate_fisher,
    build_uncertainty_field,
    covariance_diag,
    default_lambda,
    export_volume,
    pixel_uncertainty_from,
    read_volume,
)
from .metrics import ErrorKind, ause, pixel_errors, psnr, ssim, table_psnr
from .perturb import PerturbGrid
from .render import MODES, RenderConfig, render_image, render_rays
from .synth import CameraRig, WaterParams, default_scene, make_dataset
from .trainer import TrainConfig, TrainingDiverged, train, write_loss_csv

log = logging.getLogger("uwnerf")

EXIT_OK, EXIT_NUMERIC, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


class ConfigError(Exception):
    pass


def _floats3(text: str) -> tuple[float, float, float]:
    try:
        vals = tuple(float(v) for v in str(text).split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}") from exc
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}")
    return vals


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI file with a section for this command")
    p.add_argument("--threads", type=int, default=1, help="worker threads")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")


def _render_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--samples", type=int, default=64, help="samples per ray")
    p.add_argument("--views", default="eval", help="eval, train, all or comma-separated view ids")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uwnerf", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"uwnerf {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("synth", help="render a synthetic underwater dataset", formatter_class=fmt)
    _common(p)
    p.add_argument("--out", type=Path, help="output dataset directory (required)")
    p.add_argument("--views", type=int, default=16, help="number of views")
    p.add_argument("--res", type=int, default=64, help="image width and height in pixels")
    p.add_argument("--eval-views", type=int, default=2, help="views at the end tagged eval")
    p.add_argument("--beta-d", type=_floats3, default=WaterParams().beta_D, help="attenuation per channel")
    p.add_argument("--beta-b", type=_floats3, default=WaterParams().beta_B, help="backscatter per channel")
    p.add_argument("--b-inf", type=_floats3, default=WaterParams().B_inf, help="veiling light colour")
    p.add_argument("--near", type=float, default=0.5, help="ray start distance")
    p.add_argument("--far", type=float, default=9.0, help="ray end distance")

    p = sub.add_parser("train", help="fit field and medium to a dataset", formatter_class=fmt)
    _common(p)
    d = TrainConfig()
    p.add_argument("--data", type=Path, help="dataset directory (required)")
    p.add_argument("--out", type=Path, help="output directory (required)")
    p.add_argument("--steps", type=int, default=d.steps, help="optimizer steps")
    p.add_argument("--batch-rays", type=int, default=d.batch_rays, help="rays per step")
    p.add_argument("--lr", type=float, default=d.learning_rate, help="initial learning rate")
    p.add_argument("--lr-final", type=float, default=d.final_learning_rate, help="learning rate at the last step")
    p.add_argument("--samples", type=int, default=d.samples_per_ray, help="samples per ray")
    p.add_argument("--jitter", type=_on_off, default=True, help="stratified jitter (on/off)")

    p = sub.add_parser("uq", help="build the spatial uncertainty field", formatter_class=fmt)
    _common(p)
    _render_opts(p)
    u = UQConfig()
    p.add_argument("--data", type=Path, help="dataset directory (required)")
    p.add_argument("--checkpoint", type=Path, help="trained checkpoint (required)")
    p.add_argument("--out", type=Path, help="output directory (required)")
    p.add_argument("--grid", type=int, default=DEFAULT_GRID, help="grid vertices per axis M")
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="prior precision; unset means 1e-4 / M^3")
    p.add_argument("--iterations", type=int, default=u.iterations, help="ray batches")
    p.add_argument("--rays-per-iteration", type=int, default=u.rays_per_iteration, help="rays per batch")
    p.add_argument("--aggregate", choices=("mean", "max"), default="mean", help="per-pixel aggregation")
    p.add_argument("--dry-run", action="store_true", help="print the effective configuration and stop")

    p = sub.add_parser("render", help="render views from a checkpoint", formatter_class=fmt)
    _common(p)
    _render_opts(p)
    p.add_argument("--data", type=Path, help="dataset directory (required)")
    p.add_argument("--checkpoint", type=Path, help="trained checkpoint (required)")
    p.add_argument("--out", type=Path, help="output directory (required)")
    p.add_argument("--mode", default="full", help=f"one of {', '.join(MODES)}")
    p.add_argument("--jitter", type=_on_off, default=False, help="stratified jitter (on/off)")

    p = sub.add_parser("cleanup", help="render with high-uncertainty density removed", formatter_class=fmt)
    _common(p)
    _render_opts(p)
    p.add_argument("--data", type=Path, help="dataset directory (required)")
    p.add_argument("--checkpoint", type=Path, help="trained checkpoint (required)")
    p.add_argument("--volume", type=Path, help="uncertainty volume from uq (required)")
    p.add_argument("--out", type=Path, help="output directory (required)")
    p.add_argument("--tau", type=_float_list, default=[1.0, 0.75, 0.5, 0.25, 0.0], help="thresholds on normalized uncertainty")
    p.add_argument("--mode", default="full", help=f"one of {', '.join(MODES)}")

    p = sub.add_parser("eval", help="image and calibration metrics", formatter_class=fmt)
    _common(p)
    p.add_argument("--pred", type=Path, nargs="+", help="predicted raw images (required)")
    p.add_argument("--ref", type=Path, nargs="+", help="reference raw images, one per prediction (required)")
    p.add_argument("--uncertainty", type=Path, nargs="+", help="per-pixel uncertainty raw maps, one per prediction")
    p.add_argument("--metrics", default="ause,psnr,ssim", help="comma-separated subset of ause,psnr,ssim")
    p.add_argument("--scene", default="synthetic", help="scene label for the CSV")
    p.add_argument("--out", type=Path, help="output CSV (required)")
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:  # noqa: SLF001 - argparse has no public accessor
        if name in action.choices:
            return action.choices[name]
    raise KeyError(name)


def config_argv(path: Path, command: str, sub: argparse.ArgumentParser) -> list[str]:
    """Turn the command's INI section into flags placed before the real ones."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    commands = {"synth", "train", "uq", "render", "cleanup", "eval"}
    for section in cp.sections():
        if section not in commands:
            raise ConfigError(f"{path}: unknown section [{section}]")
    if not cp.has_section(command):
        return []
    flags = {}
    for action in sub._actions:
        for opt in action.option_strings:
            if opt.startswith("--"):
                flags[opt[2:].replace("-", "_")] = (opt, action)
    argv: list[str] = []
    for key, value in cp.items(command):
        name = key.replace("-", "_")
        if name not in flags or name in ("config", "help"):
            raise ConfigError(f"{path}: unknown key {key!r} in [{command}]")
        opt, action = flags[name]
        if action.nargs == 0:
            if value.strip().lower() in ("1", "true", "yes", "on"):
                argv.append(opt)
        elif action.nargs in ("+", "*"):
            argv += [opt, *value.split()]
        else:
            argv += [opt, value]
    return argv


def parse(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    first = parser.parse_args(argv)
    if first.config is None:
        return first
    sub = _subparser(parser, first.command)
    extra = config_argv(first.config, first.command, sub)
    return parser.parse_args([first.command, *extra, *argv[argv.index(first.command) + 1 :]])


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) in (None, [])]
    if missing:
        raise ConfigError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _need_dir(path: Path, what: str):
    if not path.is_dir():
        raise ConfigError(f"{what} {path} is not a directory")


def _need_file(path: Path, what: str):
    if not path.is_file():
        raise ConfigError(f"{what} {path} does not exist")


def _prepare_out(path: Path):
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {path}: {exc}") from exc


def write_manifest(out_dir: Path, command: str, args: argparse.Namespace, extra: dict | None = None) -> None:
    lines = [f"# uwnerf {__version__}", f"[{command}]"]
    for key, value in sorted(vars(args).items()):
        if key in ("command", "config", "verbose"):
            continue
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    for key, value in (extra or {}).items():
        lines.append(f"{key} = {value}")
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n")


def select_views(ds: Dataset, choice: str) -> list[int]:
    if choice in ("eval", "train"):
        views = ds.views(choice)
    elif choice == "all":
        views = list(range(len(ds.images)))
    else:
        try:
            views = [int(v) for v in choice.split(",")]
        except ValueError as exc:
            raise ConfigError(f"bad --views value {choice!r}") from exc
    if not views or any(v < 0 or v >= len(ds.images) for v in views):
        raise ConfigError(f"--views {choice!r} selects no valid view")
    return views


def _render_config(ds: Dataset, args, jitter: bool = False) -> RenderConfig:
    if args.samples < 1:
        raise ConfigError("--samples must be positive")
    return RenderConfig(n_samples=args.samples, jitter=jitter, t_near=ds.near, t_far=ds.far, bounds=ds.bounds, seed=args.seed)


def _load_model(path: Path):
    params, medium = load_checkpoint(path)
    return NeuralField(params), medium


def volume_field(m: int, bounds, values: np.ndarray) -> UncertaintyField:
    """Uncertainty field from a stored volume (per-axis values are not stored)."""
    values = values.astype(np.float64)
    return UncertaintyField(m, np.full((m**3, 3), np.nan), values, bounds)


def _check_mode(mode: str):
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; choose from {', '.join(MODES)}")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_synth(args) -> int:
    _require(args, "out")
    if args.views < 2 or args.res < 1 or not 0 <= args.eval_views < args.views:
        raise ConfigError("need --views >= 2, --res >= 1 and 0 <= --eval-views < --views")
    water = WaterParams(args.beta_d, args.beta_b, args.b_inf)
    rig = CameraRig(n_views=args.views, width=args.res, height_px=args.res)
    _prepare_out(args.out)
    make_dataset(default_scene(), water, rig, args.seed, args.out, n_eval=args.eval_views, near=args.near, far=args.far)
    write_manifest(args.out, "synth", args)
    log.info("wrote %d views to %s", args.views, args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    _require(args, "data", "out")
    _need_dir(args.data, "dataset")
    cfg = TrainConfig(
        steps=args.steps,
        batch_rays=args.batch_rays,
        learning_rate=args.lr,
        final_learning_rate=args.lr_final,
        seed=args.seed,
        samples_per_ray=args.samples,
        jitter=args.jitter,
    )
    ds = load_dataset(args.data)
    _prepare_out(args.out)
    try:
        result = train(ds, cfg, log_every=100 if args.verbose else 0)
    except TrainingDiverged as exc:
        good = exc.last_good
        save_checkpoint(args.out / "checkpoint.bin", good.params, good.medium)
        write_loss_csv(args.out / "loss.csv", good.losses)
        log.error("%s; last good state saved", exc)
        return EXIT_NUMERIC
    save_checkpoint(args.out / "checkpoint.bin", result.params, result.medium)
    write_loss_csv(args.out / "loss.csv", result.losses)
    write_manifest(args.out, "train", args)
    if result.losses:
        log.info("loss %.6f -> %.6f", result.losses[0], result.losses[-1])
    return EXIT_OK


def uq_settings(args) -> tuple[int, float, UQConfig]:
    m = args.grid
    lam = default_lambda(m) if args.lam is None else args.lam
    return m, lam, UQConfig(args.iterations, args.rays_per_iteration, lam, args.seed)


def cmd_uq(args) -> int:
    if args.grid < 2:
        raise ConfigError("--grid must be >= 2")
    m, lam, cfg = uq_settings(args)
    origin = "1e-4/M^3" if args.lam is None else "flag"
    log.info(
        "uq settings: M=%d lambda=%r (%s) iterations=%d rays_per_iteration=%d seed=%d",
        m, lam, origin, cfg.iterations, cfg.rays_per_iteration, cfg.seed,
    )
    if args.dry_run:
        return EXIT_OK
    _require(args, "data", "checkpoint", "out")
    _need_dir(args.data, "dataset")
    _need_file(args.checkpoint, "checkpoint")
    ds = load_dataset(args.data)
    views = select_views(ds, args.views)
    rcfg = _render_config(ds, args)
    field, medium = _load_model(args.checkpoint)
    _prepare_out(args.out)
    grid = PerturbGrid.zeros(m, ds.bounds)
    fisher = accumulate_fisher(field, medium, ds, grid, cfg, rcfg, threads=args.threads)
    u = build_uncertainty_field(covariance_diag(fisher), m, ds.bounds)
    export_volume(u, args.out / "uncertainty.vol")
    for v in views:
        cam = ds.cameras[v]
        rays = cam.rays(ds.near, ds.far)
        out = render_rays(field, medium, rays, rcfg, threads=args.threads)
        pu = pixel_uncertainty_from(out, out.t, rays, u, args.aggregate)
        umap = pu.value.reshape(cam.height, cam.width)
        write_raw(args.out / f"uncertainty_{v:04d}.raw", umap.astype(np.float32))
        write_heatmap(args.out / f"uncertainty_{v:04d}.png", umap)
    write_manifest(args.out, "uq", args, {"lambda_effective": repr(lam)})
    return EXIT_OK


def cmd_render(args) -> int:
    _check_mode(args.mode)
    _require(args, "data", "checkpoint", "out")
    _need_dir(args.data, "dataset")
    _need_file(args.checkpoint, "checkpoint")
    ds = load_dataset(args.data)
    views = select_views(ds, args.views)
    rcfg = _render_config(ds, args, args.jitter)
    field, medium = _load_model(args.checkpoint)
    _prepare_out(args.out)
    for v in views:
        out = render_image(field, medium, ds.cameras[v], rcfg, args.mode, threads=args.threads)
        stem = f"render_{args.mode}_{v:04d}"
        write_raw(args.out / f"{stem}.raw", out.color.astype(np.float32))
        write_png(args.out / f"{stem}.png", out.color)
        if args.mode == "full":
            write_raw(args.out / f"{stem}_obj.raw", out.color_obj.astype(np.float32))
            write_raw(args.out / f"{stem}_med.raw", out.color_med.astype(np.float32))
    write_manifest(args.out, "render", args)
    return EXIT_OK


def cmd_cleanup(args) -> int:
    _check_mode(args.mode)
    _require(args, "data", "checkpoint", "volume", "out")
    _need_dir(args.data, "dataset")
    _need_file(args.checkpoint, "checkpoint")
    _need_file(args.volume, "uncertainty volume")
    if any(not 0 <= t <= 1 for t in args.tau) or not args.tau:
        raise ConfigError("--tau values must lie in [0, 1]")
    ds = load_dataset(args.data)
    views = select_views(ds, args.views)
    rcfg = _render_config(ds, args)
    field, medium = _load_model(args.checkpoint)
    m, bounds, values = read_volume(args.volume)
    u = normalize_field(volume_field(m, bounds, values))
    _prepare_out(args.out)
    for v in views:
        for tau in args.tau:
            out = thresholded_render_image(field, medium, u, tau, ds.cameras[v], rcfg, args.mode, args.threads)
            stem = f"cleanup_tau{tau:.4f}_{v:04d}"
            write_raw(args.out / f"{stem}.raw", out.color.astype(np.float32))
            write_png(args.out / f"{stem}.png", out.color)
    write_manifest(args.out, "cleanup", args)
    return EXIT_OK


EVAL_COLUMNS = ["scene", "AUSE_MSE", "AUSE_MAE", "AUSE_RMSE", "PSNR", "SSIM"]


def cmd_eval(args) -> int:
    _require(args, "pred", "ref", "out")
    wanted = {m.strip().lower() for m in args.metrics.split(",") if m.strip()}
    if not wanted or not wanted <= {"ause", "psnr", "ssim"}:
        raise ConfigError(f"bad --metrics value {args.metrics!r}")
    if len(args.pred) != len(args.ref):
        raise ConfigError("--pred and --ref need the same number of files")
    if "ause" in wanted:
        if not args.uncertainty:
            raise ConfigError("AUSE requested but no --uncertainty maps given")
        if len(args.uncertainty) != len(args.pred):
            raise ConfigError("need one --uncertainty map per prediction")
    for path in [*args.pred, *args.ref, *(args.uncertainty or [])]:
        _need_file(path, "input")
    log.info("LPIPS: not applicable (needs pretrained perceptual weights)")
    rows = []
    for i, (pp, rp) in enumerate(zip(args.pred, args.ref)):
        pred, ref = read_raw(pp), read_raw(rp)
        row = {"scene": f"{args.scene}:{pp.stem}"}
        if "ause" in wanted:
            unc = read_raw(args.uncertainty[i]).reshape(-1)
            for kind, col in ((ErrorKind.MSE, "AUSE_MSE"), (ErrorKind.MAE, "AUSE_MAE"), (ErrorKind.RMSE, "AUSE_RMSE")):
                row[col] = repr(ause(pixel_errors(pred, ref, kind), unc))
        if "psnr" in wanted:
            row["PSNR"] = repr(table_psnr(psnr(pred, ref)))
        if "ssim" in wanted:
            row["SSIM"] = repr(ssim(pred, ref))
        rows.append(row)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=EVAL_COLUMNS, restval="n/a")
        w.writeheader()
        w.writerows(rows)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "uq": cmd_uq,
    "render": cmd_render,
    "cleanup": cmd_cleanup,
    "eval": cmd_eval,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse(argv)
    except SystemExit as exc:  # argparse usage errors
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    except (ConfigError, OSError) as exc:
        print(f"uwnerf: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(message)s",
        stream=sys.stderr,
        force=True,
    )
    if args.threads < 1:
        print("uwnerf: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ContractError) as exc:
        print(f"uwnerf {args.command}: error: {exc}", file=sys.stderr)
        _subparser(build_parser(), args.command).print_usage(sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"uwnerf {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"uwnerf {args.command}: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
