"""Coded diffraction pattern measurement model.

The operator stacks J masked, unitary 2D Fourier transforms::

    A x = [F(D_1 x); ...; F(D_J x)],   D_j = diag(exp(i * phi_j))

so ``A^H A = J * I``. Arrays accept arbitrary leading batch axes; the mask
axis sits third from the end of every measurement-domain array.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .rng import Rng

EPS = 1e-12


def _is_pow2(n: int) -> bool:
    return n >= 1 and not n & (n - 1)


@dataclass(frozen=True, eq=False)
class MaskSet:
    """J unit-modulus diagonal masks stored as phase angles in [0, 2*pi)."""

    phases: np.ndarray
    seed: int = 0
    cos: np.ndarray = field(init=False, repr=False)
    sin: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        ph = np.asarray(self.phases, dtype=np.float64)
        if ph.ndim != 3 or ph.shape[1] != ph.shape[2]:
            raise ValueError(f"phases must be (J, n, n), got {ph.shape}")
        ph.setflags(write=False)
        object.__setattr__(self, "phases", ph)
        object.__setattr__(self, "cos", np.cos(ph))
        object.__setattr__(self, "sin", np.sin(ph))

    @property
    def J(self) -> int:
        return self.phases.shape[0]

    @property
    def n(self) -> int:
        return self.phases.shape[1]

    @property
    def complex(self) -> np.ndarray:
        return self.cos + 1j * self.sin


@dataclass(frozen=True, eq=False)
class Measurement:
    """Noisy amplitude data ``y`` of shape (..., J, n, n)."""

    y: np.ndarray
    alpha: float = 0.0
    mask_seed: int = 0
    noise_seed: int = 0

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64)
        if y.ndim < 3:
            raise ValueError(f"y must have at least 3 axes (J, n, n), got {y.shape}")
        if np.any(y < 0):
            raise ValueError("amplitudes must be non-negative")
        object.__setattr__(self, "y", y)

    @property
    def J(self) -> int:
        return self.y.shape[-3]

    @property
    def n(self) -> int:
        return self.y.shape[-1]


def generate_masks(n: int, J: int, seed: int) -> MaskSet:
    """Draw J masks with i.i.d. phases uniform on [0, 2*pi)."""
    if not _is_pow2(n):
        raise ValueError(f"n must be a power of two, got {n}")
    if J < 1:
        raise ValueError(f"need at least one mask, got J={J}")
    phases = Rng(seed, "masks").uniform(0.0, 2 * np.pi, size=(J, n, n))
    return MaskSet(phases, seed)


def _amplitudes(y) -> np.ndarray:
    return y.y if isinstance(y, Measurement) else np.asarray(y, dtype=np.float64)


def _check(x: np.ndarray, masks: MaskSet):
    if x.shape[-2:] != (masks.n, masks.n):
        raise ValueError(f"image shape {x.shape[-2:]} does not match masks of side {masks.n}")


def _forward_c(x: np.ndarray, masks: MaskSet) -> np.ndarray:
    x = np.asarray(x)
    _check(x, masks)
    return np.fft.fft2(x[..., None, :, :] * masks.complex, norm="ortho")


def _adjoint_c(z: np.ndarray, masks: MaskSet) -> np.ndarray:
    if z.shape[-3:] != masks.phases.shape:
        raise ValueError(f"field shape {z.shape[-3:]} does not match masks {masks.phases.shape}")
    return (np.conj(masks.complex) * np.fft.ifft2(z, norm="ortho")).sum(axis=-3)


def forward(x: np.ndarray, masks: MaskSet) -> tuple[np.ndarray, np.ndarray]:
    """Apply A to a real image; returns the (re, im) field of shape (..., J, n, n)."""
    z = _forward_c(x, masks)
    return z.real, z.imag


def adjoint(re: np.ndarray, im: np.ndarray, masks: MaskSet) -> tuple[np.ndarray, np.ndarray]:
    """Apply A^H to a (re, im) field; returns an (re, im) image pair."""
    x = _adjoint_c(np.asarray(re) + 1j * np.asarray(im), masks)
    return x.real, x.imag


def magnitude(x: np.ndarray, masks: MaskSet) -> np.ndarray:
    return np.abs(_forward_c(x, masks))


def amplitude_residual(x: np.ndarray, y, masks: MaskSet) -> float:
    """Amplitude loss ``0.5 * ||y - |A x|||^2``."""
    return 0.5 * float(np.sum((_amplitudes(y) - magnitude(x, masks)) ** 2))


def measure(x: np.ndarray, masks: MaskSet, alpha: float, noise_seed: int) -> Measurement:
    """Simulate noisy amplitude measurements.

    Intensities ``I = |A x|^2`` are perturbed by Gaussian noise whose standard
    deviation is ``(alpha / 255) * I``; negative noisy intensities are clamped
    to zero before taking the square root.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    mag = magnitude(x, masks)
    if alpha == 0:
        y = mag
    else:
        intensity = mag**2
        noise = Rng(noise_seed, "noise").normal(size=intensity.shape)
        y = np.sqrt(np.maximum(intensity + noise * (alpha / 255.0) * intensity, 0.0))
    return Measurement(y, float(alpha), masks.seed, int(noise_seed))


def amplitude_subgradient(x, y, masks: MaskSet, eps: float = EPS):
    """``Re A^H (A x - y * A x / max(|A x|, eps))``.

    Accepts a numpy image or an autodiff :class:`~prista.autodiff.Var`; the
    Var path is differentiable through ``x``.
    """
    yv = _amplitudes(y)
    if isinstance(x, ad.Var):
        return _subgradient_var(x, yv, masks, eps)
    u = _forward_c(x, masks)
    scale = yv / np.maximum(np.abs(u), eps)
    return _adjoint_c(u - scale * u, masks).real


def _subgradient_var(x: ad.Var, y: np.ndarray, masks: MaskSet, eps: float) -> ad.Var:
    _check(x.value, masks)
    cos, sin = masks.cos.astype(x.dtype), masks.sin.astype(x.dtype)
    # (B, 1, n, n) images broadcast against (J, n, n) masks to (B, J, n, n);
    # plain (n, n) images become (J, n, n)
    if x.ndim == 2:
        xb = x
    elif x.ndim >= 3 and x.shape[-3] == 1:
        xb = x
    else:
        raise ValueError(f"expected (n, n) or (..., 1, n, n) image, got {x.shape}")
    ur, ui = ad.fft2c(xb * cos, xb * sin)
    mag = ad.complex_abs(ur, ui, eps)
    keep = 1.0 - ad.div(y.astype(x.dtype), mag)
    wr, wi = ad.ifft2c(ur * keep, ui * keep)
    return ad.sum_(wr * cos + wi * sin, axis=-3, keepdims=x.ndim > 2)


def sgd_step(x, eta, y, masks: MaskSet, eps: float = EPS):
    """One subgradient step ``x - eta * amplitude_subgradient(x)``."""
    return x - eta * amplitude_subgradient(x, y, masks, eps)
