"""Loss, optimizer, schedule and the training/evaluation loops.

Every random draw is keyed by ``(seed, purpose, epoch, batch)`` so a run
resumed from a checkpoint replays exactly the same batches, noise levels and
noise realisations as an uninterrupted run.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import __version__
from . import autodiff as ad
from . import cdp, storage
from .metrics import psnr, ssim
from .network import NetworkConfig, attach, init_params, network_forward, param_shapes
from .rng import ALGORITHM, Rng
from .solvers import SolverConfig, align_global_sign, hio_solve, ista_solve

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "split", "loss", "psnr", "ssim", "lr"]


class DegenerateLossError(ArithmeticError):
    """The summed stage MSE is exactly zero, so its logarithm is undefined."""


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-3
    lr_decay: float = 0.95
    decay_every: int = 2
    epochs: int = 30
    batch: int = 2
    alpha_set: tuple = (9.0, 27.0, 81.0)
    J: int = 2
    n: int = 32
    seed: int = 0
    K: int = 3
    channels: int = 8
    cbam_reduction: int = 4
    val_fraction: float = 0.1
    val_alpha: float = 27.0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if not self.alpha_set:
            raise ValueError("alpha_set must be non-empty")
        if self.n < 2 or self.n & (self.n - 1):
            raise ValueError(f"n must be a power of two, got {self.n}")
        if self.J < 1:
            raise ValueError("J must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        object.__setattr__(self, "alpha_set", tuple(float(a) for a in self.alpha_set))

    @property
    def network(self) -> NetworkConfig:
        return NetworkConfig(K=self.K, channels=self.channels, cbam_reduction=self.cbam_reduction)

    @property
    def mask_seed(self) -> int:
        return self.seed

    @property
    def val_mask_seed(self) -> int:
        """Held-out masks always differ from the training masks."""
        return self.seed + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["alpha_set"] = list(self.alpha_set)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


# ---------------------------------------------------------------- loss / optimizer


def stage_mse(stage_outputs: Sequence[ad.Var], truth: np.ndarray) -> list[ad.Var]:
    """Per-stage mean squared error over all samples and pixels."""
    truth = np.asarray(truth, dtype=np.float64)
    out = []
    for x in stage_outputs:
        d = x - truth.reshape(x.shape)
        out.append(ad.mean(d * d))
    return out


def log_loss(stage_outputs: Sequence[ad.Var], truth: np.ndarray) -> ad.Var:
    """``log(sum_k MSE_k)``; raises :class:`DegenerateLossError` on a perfect fit."""
    terms = stage_mse(stage_outputs, truth)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    if float(total.value) == 0.0:
        raise DegenerateLossError("summed stage MSE is zero")
    return ad.log(total)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()})


def adam_step(params: dict, grads: Mapping[str, np.ndarray], state: AdamState, lr: float) -> dict:
    """Bias-corrected Adam; updates ``params`` and ``state`` in place, sorted by name."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name in params:
        g = grads[name]
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        params[name] = params[name] - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def lr_schedule(epoch: int, lr0: float = 1e-3, decay: float = 0.95, every: int = 2) -> float:
    """Step decay ``lr0 * decay ** (epoch // every)`` for 0-based epochs."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return lr0 * decay ** (epoch // every)


# ---------------------------------------------------------------- data


def load_images(data_dir, n: int | None = None) -> tuple[list[str], np.ndarray]:
    paths = storage.list_images(data_dir)
    if not paths:
        raise TrainingError(f"no .pgm images in {data_dir}")
    imgs = [storage.read_pgm(p) for p in paths]
    side = n if n is not None else imgs[0].shape[0]
    for p, im in zip(paths, imgs):
        if im.shape != (side, side):
            raise ValueError(f"{p.name} is {im.shape[0]}x{im.shape[1]}, expected {side}x{side}")
    return [p.name for p in paths], np.stack(imgs)


def split_indices(count: int, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    perm = Rng(cfg.seed, "split").permutation(count)
    n_val = int(math.ceil(cfg.val_fraction * count)) if cfg.val_fraction > 0 else 0
    n_val = min(n_val, count - 1)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def measure_batch(images: np.ndarray, masks: cdp.MaskSet, alpha: float, noise_seed: int) -> np.ndarray:
    return cdp.measure(images, masks, alpha, noise_seed).y


# ---------------------------------------------------------------- checkpoints


def checkpoint_tensors(params: Mapping[str, np.ndarray], adam: AdamState | None) -> dict:
    out = dict(params)
    if adam is not None:
        for k in params:
            out[f"adam/m/{k}"] = adam.m[k]
            out[f"adam/v/{k}"] = adam.v[k]
    return out


def save_checkpoint(path, params, cfg: TrainConfig, epoch: int, adam: AdamState | None = None, extra: dict | None = None):
    meta = {
        "format": "prista-checkpoint",
        "version": __version__,
        "epoch": epoch,
        "config": cfg.to_dict(),
        "network": cfg.network.to_dict(),
        "prng": ALGORITHM,
        "prng_state": {"seed": cfg.seed, "next_epoch": epoch + 1},
        "adam_step": adam.step if adam is not None else 0,
    }
    if extra:
        meta.update(extra)
    storage.save_container(path, checkpoint_tensors(params, adam), meta)


def load_checkpoint(path) -> tuple[dict, AdamState, TrainConfig, dict]:
    tensors, meta = storage.load_container(path)
    if meta.get("format") != "prista-checkpoint":
        raise storage.FormatError(f"{path} is not a prista checkpoint")
    cfg = TrainConfig.from_dict(meta["config"])
    net = NetworkConfig(**meta["network"])
    params = {k: tensors[k] for k in param_shapes(net)}
    adam = AdamState(step=meta.get("adam_step", 0))
    for k in params:
        adam.m[k] = tensors.get(f"adam/m/{k}", np.zeros_like(params[k]))
        adam.v[k] = tensors.get(f"adam/v/{k}", np.zeros_like(params[k]))
    return params, adam, cfg, meta


# ---------------------------------------------------------------- evaluation


def _quality(recon: np.ndarray, truth: np.ndarray) -> tuple[list[float], list[float]]:
    ps, ss = [], []
    for r, t in zip(recon, truth):
        a = align_global_sign(r, t)
        ps.append(psnr(a, t))
        ss.append(ssim(a, t))
    return ps, ss


def predict(params, net: NetworkConfig, y: np.ndarray, masks: cdp.MaskSet, batch: int = 10) -> np.ndarray:
    """Final-stage reconstructions for (B, J, n, n) measurements."""
    out = []
    for i in range(0, len(y), batch):
        out.append(network_forward(y[i:i + batch], masks, params, net)[-1].value[:, 0])
    return np.concatenate(out)


def reconstruct_with(method: str, y: np.ndarray, masks: cdp.MaskSet, params=None, net=None,
                     iterations: int | None = None) -> np.ndarray:
    """Reconstruct a stack of measurements with ``prista``, ``ista`` or ``hio``."""
    if method == "prista":
        return predict(params, net, y, masks)
    if method == "ista":
        cfg = SolverConfig(iterations or 500, lam=1e-4)
        return np.stack([ista_solve(cdp.Measurement(yi), masks, cfg).reconstruction for yi in y])
    if method == "hio":
        cfg = SolverConfig(iterations or 1000, beta=0.9)
        return np.stack([hio_solve(cdp.Measurement(yi), masks, cfg).reconstruction for yi in y])
    raise ValueError(f"unknown method {method!r}")


def evaluate(images: np.ndarray, masks: cdp.MaskSet, alpha: float, noise_seed: int, method: str = "prista",
             params=None, net: NetworkConfig | None = None, iterations: int | None = None) -> dict:
    """Per-image PSNR/SSIM of ``method`` on freshly simulated measurements."""
    y = measure_batch(images, masks, alpha, noise_seed)
    recon = reconstruct_with(method, y, masks, params, net, iterations)
    ps, ss = _quality(recon, images)
    return {"psnr": ps, "ssim": ss, "reconstructions": recon}


# ---------------------------------------------------------------- training


def _batches(order: np.ndarray, size: int):
    for b, i in enumerate(range(0, len(order), size)):
        yield b, order[i:i + size]


def _train_epoch(epoch: int, params: dict, adam: AdamState | None, images: np.ndarray,
                 masks: cdp.MaskSet, cfg: TrainConfig, lr: float) -> tuple[float, float, float]:
    """One pass over the training images; ``adam=None`` evaluates without updating."""
    net = cfg.network
    order = Rng(cfg.seed, "shuffle", epoch).permutation(len(images))
    losses, ps, ss = [], [], []
    # noise levels are stratified over the shuffled order so every epoch sees the same mix
    levels = np.array([cfg.alpha_set[i % len(cfg.alpha_set)] for i in range(len(images))])
    for b, idx in _batches(order, cfg.batch):
        draw = Rng(cfg.seed, "batch", epoch, b)
        truth = images[idx]
        pos = np.arange(b * cfg.batch, b * cfg.batch + len(idx))
        y = np.stack([measure_batch(t, masks, levels[i], draw.seed64()) for t, i in zip(truth, pos)])
        tape = ad.Tape()
        pv = attach(params, tape, requires_grad=adam is not None)
        outs = network_forward(y, masks, pv, net)
        try:
            loss = log_loss(outs, truth)
        except DegenerateLossError:
            log.warning("epoch %d batch %d: perfect fit, update skipped", epoch, b)
            continue
        losses.append(float(loss.value))
        p_, s_ = _quality(outs[-1].value[:, 0], truth)
        ps += p_
        ss += s_
        if adam is not None:
            grads = tape.backward(loss)
            adam_step(params, {k: grads[pv[k]] for k in params}, adam, lr)
    return float(np.mean(losses)), float(np.mean(ps)), float(np.mean(ss))


def _validate(params, images: np.ndarray, masks: cdp.MaskSet, cfg: TrainConfig) -> tuple[float, float, float]:
    net = cfg.network
    y = measure_batch(images, masks, cfg.val_alpha, Rng(cfg.seed, "val-noise").seed64())
    losses, recon = [], []
    for _, idx in _batches(np.arange(len(images)), cfg.batch):
        outs = network_forward(y[idx], masks, params, net)
        losses.append(float(log_loss(outs, images[idx]).value) * len(idx))
        recon.append(outs[-1].value[:, 0])
    ps, ss = _quality(np.concatenate(recon), images)
    return float(np.sum(losses) / len(images)), float(np.mean(ps)), float(np.mean(ss))


def train(data_dir, cfg: TrainConfig, out_dir, resume=None, progress=None) -> dict:
    """Train from the .pgm patches in ``data_dir``; writes checkpoints and ``metrics.csv``.

    Returns the final parameters. ``resume`` continues from a checkpoint
    written by an earlier call with the same config (the epoch budget may
    differ).
    """
    out = Path(out_dir)
    names, images = load_images(data_dir, cfg.n)
    tr_idx, va_idx = split_indices(len(images), cfg)
    if len(tr_idx) < cfg.batch:
        raise TrainingError(f"need at least {cfg.batch} training images, have {len(tr_idx)}")
    train_imgs, val_imgs = images[tr_idx], images[va_idx]
    masks = cdp.generate_masks(cfg.n, cfg.J, cfg.mask_seed)
    val_masks = cdp.generate_masks(cfg.n, cfg.J, cfg.val_mask_seed)

    rows: list[list] = []
    if resume is not None:
        params, adam, saved_cfg, meta = load_checkpoint(resume)
        if replace(saved_cfg, epochs=cfg.epochs) != cfg:
            raise TrainingError("checkpoint config differs from the requested config")
        start = meta["epoch"] + 1
        prev = Path(resume).parent.parent / "metrics.csv" if Path(resume).parent.name == "checkpoints" else None
        if prev is not None and prev.exists():
            rows = [[int(r["epoch"]), r["split"]] + [float(r[c]) for c in METRICS_HEADER[2:]]
                    for r in storage.read_csv(prev) if int(r["epoch"]) < start]
    else:
        params = init_params(cfg.network, cfg.seed)
        adam = AdamState.zeros_like(params)
        start = 1
        l0, p0, s0 = _train_epoch(0, params, None, train_imgs, masks, cfg, 0.0)
        rows.append([0, "train", l0, p0, s0, lr_schedule(0, cfg.lr0, cfg.lr_decay, cfg.decay_every)])
        if len(val_imgs):
            rows.append([0, "val", *_validate(params, val_imgs, val_masks, cfg), rows[-1][-1]])

    def write_rows():
        storage.atomic_write(out / "metrics.csv", storage.csv_text(METRICS_HEADER, rows))

    write_rows()
    for epoch in range(start, cfg.epochs + 1):
        lr = lr_schedule(epoch - 1, cfg.lr0, cfg.lr_decay, cfg.decay_every)
        try:
            tl, tp, ts = _train_epoch(epoch, params, adam, train_imgs, masks, cfg, lr)
        except FloatingPointError as exc:
            diag = out / "checkpoints" / "diagnostic.prnt"
            save_checkpoint(diag, params, cfg, epoch - 1, adam, {"error": str(exc)})
            raise TrainingError(f"non-finite value during epoch {epoch}: {exc}; state saved to {diag}") from exc
        rows.append([epoch, "train", tl, tp, ts, lr])
        if len(val_imgs):
            rows.append([epoch, "val", *_validate(params, val_imgs, val_masks, cfg), lr])
        save_checkpoint(out / "checkpoints" / f"epoch{epoch:03d}.prnt", params, cfg, epoch, adam)
        write_rows()
        if progress is not None:
            progress(epoch, rows[-1] if len(val_imgs) else rows[-1])
        log.info("epoch %d: train loss %.4f psnr %.2f", epoch, tl, tp)
    save_checkpoint(out / "checkpoint.prnt", params, cfg, cfg.epochs, adam)
    storage.atomic_write(out / "split.json", json.dumps(
        {"train": [names[i] for i in tr_idx], "val": [names[i] for i in va_idx]}, indent=1) + "\n")
    return params
