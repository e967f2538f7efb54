"""Command-line front end: ``prista {simulate,solve,train,eval,make-patches,rerun}``.

Every command writes into one output directory and leaves a
``manifest.json`` there recording the resolved flags, seeds, PRNG algorithm,
package version and timestamps. ``prista rerun DIR/manifest.json`` replays
the command; everything except the manifest timestamps is reproduced
byte for byte.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__, cdp, storage
from . import training as T
from .metrics import psnr, ssim
from .network import reconstruct
from .rng import ALGORITHM, Rng
from .solvers import SolverConfig, align_global_sign, hio_solve, ista_solve

log = logging.getLogger("prista")

OUTPUT_ROOT_ENV = "PRISTA_OUTPUT_ROOT"
MEASUREMENT_FORMAT = "prista-measurement"
EVAL_HEADER = ["image", "method", "alpha", "psnr", "ssim"]


class CliError(RuntimeError):
    """A runtime failure reported as a one-line message with exit code 1."""


# ---------------------------------------------------------------- helpers


def _positive(kind=int):
    def parse(text):
        v = kind(text)
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v
    return parse


def _nonneg_float(text):
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {text}")
    return v


def _pow2(text):
    v = int(text)
    if v < 2 or v & (v - 1):
        raise argparse.ArgumentTypeError(f"must be a power of two, got {text}")
    return v


def load_image(path, n: int) -> np.ndarray:
    """Grayscale image in [0, 1], box-resampled to ``n x n`` when needed."""
    try:
        with Image.open(path) as im:
            im = im.convert("L")
            if im.size != (n, n):
                im = im.resize((n, n), Image.BOX)
            return np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read image {path}: {exc}") from exc


def save_measurement(path, meas: cdp.Measurement, masks: cdp.MaskSet, truth: np.ndarray | None, extra: dict):
    tensors = {"y": meas.y, "phases": masks.phases}
    if truth is not None:
        tensors["truth"] = truth
    meta = {"format": MEASUREMENT_FORMAT, "J": meas.J, "n": meas.n, "alpha": meas.alpha,
            "mask_seed": masks.seed, "noise_seed": meas.noise_seed, "prng": ALGORITHM, **extra}
    storage.save_container(path, tensors, meta)


def load_measurement(path) -> tuple[cdp.Measurement, cdp.MaskSet, np.ndarray | None, dict]:
    path = Path(path)
    if path.is_dir():
        path = path / "measurement.prnt"
    if not path.exists():
        raise CliError(f"measurement {path} does not exist")
    tensors, meta = storage.load_container(path)
    if meta.get("format") != MEASUREMENT_FORMAT:
        raise CliError(f"{path} is not a measurement container")
    masks = cdp.MaskSet(tensors["phases"], meta.get("mask_seed"))
    meas = cdp.Measurement(tensors["y"], meta.get("alpha", 0.0), meta.get("mask_seed"), meta.get("noise_seed"))
    return meas, masks, tensors.get("truth"), meta


def _load_checkpoint(path):
    if path is None:
        raise CliError("--checkpoint is required for method prista")
    if not Path(path).exists():
        raise CliError(f"checkpoint {path} does not exist")
    try:
        return T.load_checkpoint(path)
    except storage.FormatError as exc:
        raise CliError(str(exc)) from exc


def _quality_row(x: np.ndarray, truth: np.ndarray | None) -> tuple[float, float]:
    if truth is None:
        return float("nan"), float("nan")
    a = align_global_sign(x, truth)
    return psnr(a, truth), ssim(a, truth)


# ---------------------------------------------------------------- commands


def cmd_simulate(args, out: Path) -> dict:
    img = load_image(args.image, args.n)
    masks = cdp.generate_masks(args.n, args.masks, args.mask_seed)
    meas = cdp.measure(img, masks, args.alpha, args.noise_seed)
    save_measurement(out / "measurement.prnt", meas, masks, img, {"source": Path(args.image).name})
    storage.write_image(out / "truth.pgm", img)
    return {"mask_seed": args.mask_seed, "noise_seed": args.noise_seed}


def cmd_solve(args, out: Path) -> dict:
    meas, masks, truth, meta = load_measurement(args.meas)
    if args.method == "prista":
        params, _, tcfg, _ = _load_checkpoint(args.checkpoint)
        if (tcfg.n, tcfg.J) != (meas.n, meas.J):
            raise CliError(f"checkpoint expects n={tcfg.n}, J={tcfg.J}; measurement has n={meas.n}, J={meas.J}")
        net = tcfg.network
        t0 = time.perf_counter()
        stages = [s[0] for s in reconstruct(meas.y[None], masks, params, net)]
        wall = time.perf_counter() - t0
        recon = stages[-1]
        rows = [[k, cdp.amplitude_residual(s, meas.y, masks)] for k, s in enumerate(stages, start=1)]
        storage.atomic_write(out / "report.csv", storage.csv_text(["stage", "residual"], rows))
        if args.dump_stages:
            x = np.ones((meas.n, meas.n))
            for k, s in enumerate(stages, start=1):
                eta = float(params[f"stage{k}/eta"])
                storage.write_image(out / "stages" / f"stage{k}_sgd.pgm", cdp.sgd_step(x, eta, meas.y, masks))
                storage.write_image(out / "stages" / f"stage{k}_ppm.pgm", s)
                x = s
        residual = rows[-1][1]
        seeds = {"train_seed": tcfg.seed}
    else:
        if args.method == "ista":
            cfg = SolverConfig(args.iters or 500, lam=args.lam)
            rep = ista_solve(meas, masks, cfg)
        else:
            cfg = SolverConfig(args.iters or 1000, beta=args.beta)
            rep = hio_solve(meas, masks, cfg)
        recon, wall, residual = rep.reconstruction, rep.wall_time, rep.residuals[-1]
        storage.atomic_write(out / "report.csv", rep.to_csv())
        seeds = {}
        if args.dump_stages:
            log.warning("--dump-stages only applies to method prista")
    storage.write_image(out / "reconstruction.pgm", recon)
    p, s = _quality_row(recon, truth)
    storage.atomic_write(out / "summary.csv", storage.csv_text(
        ["method", "residual", "psnr", "ssim"], [[args.method, residual, p, s]]))
    print(f"{args.method}: residual {residual:.3e}  psnr {p:.2f} dB  ({wall:.2f} s)")
    return {"mask_seed": meta.get("mask_seed"), "noise_seed": meta.get("noise_seed"), **seeds}


def cmd_train(args, out: Path) -> dict:
    cfg = T.TrainConfig(K=args.stages, channels=args.channels, cbam_reduction=args.cbam_reduction, J=args.masks, epochs=args.epochs,
                        seed=args.seed, n=args.n, batch=args.batch)

    def progress(epoch, row):
        print(f"epoch {epoch:3d}  " + "  ".join(f"{h} {storage.fmt(v)}" for h, v in zip(T.METRICS_HEADER[1:], row[1:])),
              flush=True)

    try:
        T.train(args.data, cfg, out, resume=args.resume, progress=progress)
    except (T.TrainingError, FileNotFoundError, ValueError) as exc:
        raise CliError(str(exc)) from exc
    return {"seed": args.seed, "mask_seed": cfg.mask_seed, "val_mask_seed": cfg.val_mask_seed}


def cmd_eval(args, out: Path) -> dict:
    params, net, tcfg = None, None, None
    if args.checkpoint is not None or "prista" in args.method:
        params, _, tcfg, _ = _load_checkpoint(args.checkpoint)
        net = tcfg.network
    J = args.masks if args.masks is not None else (tcfg.J if tcfg else 2)
    if tcfg is not None and J != tcfg.J:
        raise CliError(f"checkpoint was trained with J={tcfg.J}, --masks {J} given")
    try:
        names, images = T.load_images(args.data, tcfg.n if tcfg else None)
    except (T.TrainingError, FileNotFoundError, ValueError) as exc:
        raise CliError(str(exc)) from exc
    n = images.shape[-1]
    mask_seed = args.mask_seed if args.mask_seed is not None else (tcfg.seed if tcfg else 0) + 1000
    if tcfg is not None and mask_seed == tcfg.mask_seed:
        raise CliError("evaluation masks must differ from the training masks")
    masks = cdp.generate_masks(n, J, mask_seed)
    rows = []
    for method in args.method:
        for alpha in args.alpha:
            res = T.evaluate(images, masks, alpha, args.noise_seed, method, params, net, args.iters)
            rows += [[nm, method, alpha, p, s] for nm, p, s in zip(names, res["psnr"], res["ssim"])]
            mp, ms = float(np.mean(res["psnr"])), float(np.mean(res["ssim"]))
            rows.append(["mean", method, alpha, mp, ms])
            print(f"{method:7s} alpha {alpha:g}: psnr {mp:.2f} dB  ssim {ms:.4f}", flush=True)
    storage.atomic_write(out / "eval.csv", storage.csv_text(EVAL_HEADER, rows))
    return {"mask_seed": mask_seed, "noise_seed": args.noise_seed}


def cmd_make_patches(args, out: Path) -> dict:
    src = Path(args.src)
    files = sorted(p for p in src.iterdir() if p.is_file()) if src.is_dir() else [src]
    images = []
    for p in files:
        try:
            with Image.open(p) as im:
                im = im.convert("L")
                if args.scale > 1:
                    im = im.resize((im.width // args.scale, im.height // args.scale), Image.BOX)
                images.append((p.stem, np.asarray(im, dtype=np.float64) / 255.0))
        except OSError:
            log.warning("skipping unreadable file %s", p)
    images = [(s, a) for s, a in images if min(a.shape) >= args.n]
    if not images:
        raise CliError(f"no readable images of at least {args.n}x{args.n} pixels in {src}")
    rng = Rng(args.seed, "patches")
    for i in range(args.count):
        stem, a = images[i % len(images)]
        r, c = rng.integers(0, a.shape[0] - args.n + 1), rng.integers(0, a.shape[1] - args.n + 1)
        storage.write_pgm(out / f"{stem}_{i:04d}.pgm", a[r:r + args.n, c:c + args.n])
    return {"seed": args.seed}


# ---------------------------------------------------------------- parser

COMMANDS = {
    "simulate": cmd_simulate,
    "solve": cmd_solve,
    "train": cmd_train,
    "eval": cmd_eval,
    "make-patches": cmd_make_patches,
}
PATH_FLAGS = {"image", "meas", "checkpoint", "data", "resume", "src", "out"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prista", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def out_flag(p):
        p.add_argument("--out", help=f"output directory (default: ${OUTPUT_ROOT_ENV}/<command>)")

    p = sub.add_parser("simulate", help="simulate noisy CDP magnitudes of an image")
    p.add_argument("--image", required=True)
    p.add_argument("--n", type=_pow2, default=32)
    p.add_argument("--masks", type=_positive(), default=2, help="number of coded masks J")
    p.add_argument("--alpha", type=_nonneg_float, default=0.0, help="noise level")
    p.add_argument("--mask-seed", type=int, default=0)
    p.add_argument("--noise-seed", type=int, default=0)
    out_flag(p)

    p = sub.add_parser("solve", help="reconstruct an image from a measurement")
    p.add_argument("--method", choices=["hio", "ista", "prista"], required=True)
    p.add_argument("--meas", required=True, help="measurement directory or .prnt file")
    p.add_argument("--checkpoint")
    p.add_argument("--iters", type=_positive(), help="iterations (ista: 500, hio: 1000)")
    p.add_argument("--lam", type=_nonneg_float, default=1e-4, help="ISTA l1 weight")
    p.add_argument("--beta", type=float, default=0.9, help="HIO feedback")
    p.add_argument("--dump-stages", action="store_true", help="write every stage output (prista)")
    out_flag(p)

    p = sub.add_parser("train", help="train the unrolled network on .pgm patches")
    p.add_argument("--data", required=True)
    p.add_argument("--stages", type=_positive(), default=3)
    p.add_argument("--channels", type=_positive(), default=8)
    p.add_argument("--cbam-reduction", type=_positive(), default=4, help="channel-attention reduction ratio")
    p.add_argument("--masks", type=_positive(), default=2)
    p.add_argument("--epochs", type=_positive(), default=30)
    p.add_argument("--batch", type=_positive(), default=T.TrainConfig.batch)
    p.add_argument("--n", type=_pow2, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resume", help="continue from a checkpoint of the same configuration")
    out_flag(p)

    p = sub.add_parser("eval", help="per-image PSNR/SSIM on held-out patches with unseen masks")
    p.add_argument("--checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--masks", type=_positive())
    p.add_argument("--alpha", type=_nonneg_float, nargs="+", default=[27.0])
    p.add_argument("--method", choices=["prista", "ista", "hio"], nargs="+", default=["prista"])
    p.add_argument("--iters", type=_positive(), help="iterations for ista/hio")
    p.add_argument("--mask-seed", type=int, help="default: training seed + 1000")
    p.add_argument("--noise-seed", type=int, default=0)
    out_flag(p)

    p = sub.add_parser("make-patches", help="cut random square patches from images")
    p.add_argument("--src", required=True, help="image file or directory")
    p.add_argument("--n", type=_pow2, default=32)
    p.add_argument("--count", type=_positive(), default=200)
    p.add_argument("--scale", type=_positive(), default=1, help="box-downsampling factor before cropping")
    p.add_argument("--seed", type=int, default=0)
    out_flag(p)

    p = sub.add_parser("rerun", help="replay a command from its manifest")
    p.add_argument("manifest")
    out_flag(p)
    return parser


def _flags(args) -> dict:
    flags = {}
    for k, v in sorted(vars(args).items()):
        if k in ("command", "verbose"):
            continue
        if k in PATH_FLAGS and v is not None:
            v = str(Path(v).resolve())
        flags[k] = v
    return flags


def _argv_from_manifest(manifest: dict, out: str | None) -> list[str]:
    argv = [manifest["command"]]
    for k, v in manifest["flags"].items():
        if k == "out":
            v = out or v
        flag = "--" + k.replace("_", "-")
        if v is None or v is False:
            continue
        if v is True:
            argv.append(flag)
        elif isinstance(v, list):
            argv += [flag, *map(str, v)]
        else:
            argv += [flag, str(v)]
    return argv


def _resolve_out(parser, args) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if not root:
        parser.error(f"--out is required when ${OUTPUT_ROOT_ENV} is not set")
    return Path(root) / args.command


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "rerun":
        try:
            manifest = json.loads(Path(args.manifest).read_text())
            if manifest.get("command") not in COMMANDS:
                raise ValueError(f"unknown command {manifest.get('command')!r}")
        except (OSError, ValueError, KeyError) as exc:
            print(f"prista: error: cannot use manifest {args.manifest}: {exc}", file=sys.stderr)
            return 1
        return run(_argv_from_manifest(manifest, args.out))

    out = _resolve_out(parser, args)
    args.out = str(out)
    started = _now()
    try:
        out.mkdir(parents=True, exist_ok=True)
        seeds = COMMANDS[args.command](args, out)
    except (CliError, storage.FormatError, OSError, ValueError) as exc:
        print(f"prista {args.command}: error: {exc}", file=sys.stderr)
        return 1
    manifest = {
        "command": args.command,
        "flags": _flags(args),
        "seeds": seeds,
        "prng": ALGORITHM,
        "version": __version__,
        "started": started,
        "finished": _now(),
    }
    storage.atomic_write(out / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return 0


def main() -> None:  # pragma: no cover - console entry point
    sys.exit(run())


if __name__ == "__main__":  # pragma: no cover
    main()
