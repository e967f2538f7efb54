"""Non-learned CDP phase retrieval baselines.

* :func:`ista_solve` - subgradient step on the amplitude loss followed by
  soft thresholding in an orthonormal Haar basis.
* :func:`hio_solve` - Fienup's hybrid input-output with per-mask magnitude
  replacement; the pixel range [0, 1] plays the role of the support.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np

from . import cdp
from .cdp import EPS, MaskSet, Measurement

DIVERGENCE_LIMIT = 1e6


class SolverDivergence(RuntimeError):
    """Raised when the residual blows past :data:`DIVERGENCE_LIMIT`."""


@dataclass(frozen=True)
class SolverConfig:
    """Iteration controls shared by the classical solvers.

    ``eta`` defaults to ``1/J`` when left as ``None``; ``lam`` is the
    threshold applied to Haar coefficients (step size times l1 weight).
    """

    iterations: int = 1000
    eta: float | None = None
    lam: float = 1e-4
    beta: float = 0.9
    tolerance: float = 1e-9

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0 < self.beta <= 1:
            raise ValueError("beta must lie in (0, 1]")
        if self.eta is not None and self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")

    def step(self, J: int) -> float:
        return 1.0 / J if self.eta is None else self.eta


@dataclass
class SolveReport:
    reconstruction: np.ndarray
    residuals: list[float] = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def iterations(self) -> int:
        return len(self.residuals)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "residual"])
        for i, r in enumerate(self.residuals, start=1):
            w.writerow([i, repr(float(r))])
        return buf.getvalue()


# ---------------------------------------------------------------- Haar


def _check_side(x: np.ndarray):
    n = x.shape[-1]
    if x.shape[-2] != n or n < 1 or n & (n - 1):
        raise ValueError(f"Haar transform needs a square power-of-two image, got {x.shape}")


def haar2(x: np.ndarray) -> np.ndarray:
    """Full-depth orthonormal 2D Haar transform (Mallat layout)."""
    x = np.asarray(x, dtype=np.float64)
    _check_side(x)
    out = x.copy()
    m = x.shape[-1]
    s = np.sqrt(0.5)
    while m > 1:
        blk = out[..., :m, :m]
        blk = np.concatenate([(blk[..., 0::2] + blk[..., 1::2]) * s,
                              (blk[..., 0::2] - blk[..., 1::2]) * s], axis=-1)
        blk = np.concatenate([(blk[..., 0::2, :] + blk[..., 1::2, :]) * s,
                              (blk[..., 0::2, :] - blk[..., 1::2, :]) * s], axis=-2)
        out[..., :m, :m] = blk
        m //= 2
    return out


def ihaar2(c: np.ndarray) -> np.ndarray:
    """Inverse of :func:`haar2`."""
    c = np.asarray(c, dtype=np.float64)
    _check_side(c)
    out = c.copy()
    n = c.shape[-1]
    s = np.sqrt(0.5)
    m = 2
    while m <= n:
        h = m // 2
        blk = out[..., :m, :m]
        lo, hi = blk[..., :h, :], blk[..., h:, :]
        rows = np.empty_like(blk)
        rows[..., 0::2, :] = (lo + hi) * s
        rows[..., 1::2, :] = (lo - hi) * s
        lo, hi = rows[..., :h], rows[..., h:]
        blk = np.empty_like(rows)
        blk[..., 0::2] = (lo + hi) * s
        blk[..., 1::2] = (lo - hi) * s
        out[..., :m, :m] = blk
        m *= 2
    return out


def soft(v: np.ndarray, lam: float) -> np.ndarray:
    return np.sign(v) * np.maximum(np.abs(v) - lam, 0.0)


def haar_prox(r: np.ndarray, lam: float) -> np.ndarray:
    """Prox of ``lam * ||Haar(.)||_1``: orthonormality reduces it to coefficient shrinkage."""
    return ihaar2(soft(haar2(r), lam))


# ---------------------------------------------------------------- solvers


def _start(y: Measurement, masks: MaskSet, x0) -> np.ndarray:
    if y.J != masks.J or y.n != masks.n:
        raise ValueError(f"measurement (J={y.J}, n={y.n}) does not match masks (J={masks.J}, n={masks.n})")
    if x0 is None:
        return np.ones((masks.n, masks.n))
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != (masks.n, masks.n):
        raise ValueError(f"x0 shape {x0.shape} does not match n={masks.n}")
    return x0.copy()


def _guard(res: float, it: int):
    if not np.isfinite(res) or res > DIVERGENCE_LIMIT:
        raise SolverDivergence(f"residual {res:.3e} exceeded {DIVERGENCE_LIMIT:.0e} at iteration {it}")


def _rel_change(new: np.ndarray, old: np.ndarray) -> float:
    return float(np.linalg.norm(new - old) / max(np.linalg.norm(old), 1e-300))


def ista_solve(y: Measurement, masks: MaskSet, cfg: SolverConfig = SolverConfig(500), x0=None) -> SolveReport:
    """ISTA with Haar sparsity; starts from the all-ones image by default."""
    t0 = time.perf_counter()
    x = _start(y, masks, x0)
    eta = cfg.step(masks.J)
    report = SolveReport(x)
    for it in range(1, cfg.iterations + 1):
        r = cdp.sgd_step(x, eta, y, masks)
        x_new = np.clip(haar_prox(r, cfg.lam), 0.0, 1.0)
        res = cdp.amplitude_residual(x_new, y, masks)
        _guard(res, it)
        report.residuals.append(res)
        done = _rel_change(x_new, x) < cfg.tolerance
        x = x_new
        if done:
            break
    report.reconstruction = x
    report.wall_time = time.perf_counter() - t0
    return report


def hio_solve(y: Measurement, masks: MaskSet, cfg: SolverConfig = SolverConfig(1000), x0=None) -> SolveReport:
    """Hybrid input-output; the reported image is the last projected estimate clipped to [0, 1]."""
    t0 = time.perf_counter()
    x = _start(y, masks, x0)
    J = masks.J
    est = np.clip(x, 0.0, 1.0)
    report = SolveReport(est)
    for it in range(1, cfg.iterations + 1):
        u = cdp._forward_c(x, masks)
        u = y.y * u / np.maximum(np.abs(u), EPS)
        xp = cdp._adjoint_c(u, masks).real / J
        ok = (xp >= 0.0) & (xp <= 1.0)
        x_new = np.where(ok, xp, x - cfg.beta * xp)
        est_new = np.clip(xp, 0.0, 1.0)
        res = cdp.amplitude_residual(est_new, y, masks)
        _guard(res, it)
        report.residuals.append(res)
        done = _rel_change(est_new, est) < cfg.tolerance
        x, est = x_new, est_new
        if done:
            break
    report.reconstruction = est
    report.wall_time = time.perf_counter() - t0
    return report


def align_global_sign(x_hat: np.ndarray, x_ref: np.ndarray) -> np.ndarray:
    """Flip ``x_hat`` when its negation is closer to ``x_ref``."""
    x_hat = np.asarray(x_hat)
    if x_hat.shape != np.shape(x_ref):
        raise ValueError("shape mismatch")
    if np.sum((x_hat + x_ref) ** 2) < np.sum((x_hat - x_ref) ** 2):
        return -x_hat
    return x_hat
