"""Unfolded ISTA network for CDP phase retrieval.

Each stage runs a subgradient step on the amplitude loss with a learned step
size, then a residual proximal module::

    r   = x - eta * Re A^H (A x - y * A x / |A x|)
    x'  = r + Finv(soft(F(r), |rho|))

``F`` is conv3x3(1->C) -> CBAM -> ConvU -> ResFBlock and ``Finv`` mirrors it:
ResFBlock -> ConvU -> CBAM -> conv3x3(C->1).

Parameters live in a flat mapping with canonical names ``stage{k}/{path}``;
the same mapping holds numpy arrays at rest and :class:`~prista.autodiff.Var`
handles during a forward pass.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from . import cdp
from .cdp import MaskSet, Measurement
from .rng import Rng

ETA_INIT = 0.5
THETA_INIT = 0.01


@dataclass(frozen=True)
class NetworkConfig:
    K: int = 3
    channels: int = 8
    cbam_reduction: int = 4
    share_resfblock: bool = False
    share_cbam: bool = False
    convu_final_relu: bool = False

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.cbam_reduction < 1 or self.channels < self.cbam_reduction:
            raise ValueError("channels must be >= cbam_reduction >= 1")

    @property
    def hidden(self) -> int:
        return self.channels // self.cbam_reduction

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- parameter layout


def _block_specs(C: int, hidden: int, kind: str) -> list[tuple[str, tuple]]:
    if kind == "cbam":
        return [("fc1/weight", (hidden, C)), ("fc1/bias", (hidden,)),
                ("fc2/weight", (C, hidden)), ("fc2/bias", (C,)),
                ("spatial/weight", (1, 2, 7, 7)), ("spatial/bias", (1,))]
    if kind == "convu":
        out = []
        for i in (1, 2, 3):
            out += [(f"conv{i}/weight", (C, C, 3, 3)), (f"conv{i}/bias", (C,))]
        return out
    if kind == "resf":
        return [("spatial1/weight", (C, C, 3, 3)), ("spatial1/bias", (C,)),
                ("spatial2/weight", (C, C, 3, 3)), ("spatial2/bias", (C,)),
                ("freq1/weight", (2 * C, 2 * C, 1, 1)), ("freq1/bias", (2 * C,)),
                ("freq2/weight", (2 * C, 2 * C, 1, 1)), ("freq2/bias", (2 * C,))]
    raise KeyError(kind)


def _stage_layout(cfg: NetworkConfig) -> list[tuple[str, str, tuple]]:
    """(block kind or '', relative path, shape) for one stage in canonical order."""
    C, h = cfg.channels, cfg.hidden
    rows = [("", "eta", ()), ("", "rho", ()),
            ("", "F/conv_in/weight", (C, 1, 3, 3)), ("", "F/conv_in/bias", (C,))]
    for side, order in (("F", ("cbam", "convu", "resf")), ("Finv", ("resf", "convu", "cbam"))):
        for kind in order:
            rows += [(kind, f"{side}/{kind}/{p}", s) for p, s in _block_specs(C, h, kind)]
    rows += [("", "Finv/conv_out/weight", (1, C, 3, 3)), ("", "Finv/conv_out/bias", (1,))]
    return rows


def resolve(cfg: NetworkConfig, k: int, path: str) -> str:
    """Canonical tensor name for ``path`` in stage ``k`` (1-based), honoring sharing."""
    kind = path.split("/")[1] if path.count("/") >= 2 else ""
    shared = (kind == "resf" and cfg.share_resfblock) or (kind == "cbam" and cfg.share_cbam)
    return f"stage{1 if shared else k}/{path}"


def param_shapes(cfg: NetworkConfig) -> dict[str, tuple]:
    """Distinct parameter tensors in canonical order."""
    out: dict[str, tuple] = {}
    for k in range(1, cfg.K + 1):
        for _, path, shape in _stage_layout(cfg):
            out.setdefault(resolve(cfg, k, path), shape)
    return out


def xavier_bound(shape: tuple) -> float:
    if len(shape) == 4:
        rf = shape[2] * shape[3]
        fan_in, fan_out = shape[1] * rf, shape[0] * rf
    else:
        fan_out, fan_in = shape
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(cfg: NetworkConfig, seed: int) -> dict[str, np.ndarray]:
    """Xavier-uniform weights, zero biases, eta = 0.5 and theta = 0.01 in every stage."""
    rng = Rng(seed, "init")
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit("/", 1)[1]
        if leaf == "eta":
            params[name] = np.array(ETA_INIT)
        elif leaf == "rho":
            params[name] = np.array(THETA_INIT)
        elif leaf == "bias":
            params[name] = np.zeros(shape)
        else:
            b = xavier_bound(shape)
            params[name] = rng.uniform(-b, b, size=shape)
    return params


def zero_params(cfg: NetworkConfig, eta: float = ETA_INIT, theta: float = THETA_INIT) -> dict[str, np.ndarray]:
    """All network weights and biases zero; only eta and rho are set."""
    out = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit("/", 1)[1]
        out[name] = np.array(eta) if leaf == "eta" else np.array(theta) if leaf == "rho" else np.zeros(shape)
    return out


def attach(params: Mapping[str, np.ndarray], tape: ad.Tape, requires_grad: bool = True) -> dict[str, ad.Var]:
    return {k: tape.var(v, requires_grad=requires_grad) for k, v in params.items()}


class _Scope(Mapping):
    """Read-only view of a stage's parameters under relative paths."""

    def __init__(self, params, cfg: NetworkConfig, k: int, prefix: str = ""):
        self._p, self._cfg, self._k, self._prefix = params, cfg, k, prefix

    def __getitem__(self, path):
        return self._p[resolve(self._cfg, self._k, self._prefix + path)]

    def __iter__(self):
        raise TypeError("scopes are not iterable")

    def __len__(self):
        return 0

    def sub(self, prefix: str) -> "_Scope":
        return _Scope(self._p, self._cfg, self._k, self._prefix + prefix + "/")


# ---------------------------------------------------------------- blocks


def _conv(f, p, name):
    return ad.conv2d(f, p[f"{name}/weight"], p[f"{name}/bias"])


def _mlp(v, p):
    return ad.dense(ad.relu(ad.dense(v, p["fc1/weight"], p["fc1/bias"])), p["fc2/weight"], p["fc2/bias"])


def cbam(f: ad.Var, p) -> ad.Var:
    """Channel attention (shared MLP on avg/max pooled features) then spatial attention."""
    b, c = f.shape[:2]
    gate_c = ad.sigmoid(_mlp(ad.global_avg_pool(f), p) + _mlp(ad.global_max_pool(f), p))
    f = f * ad.reshape(gate_c, (b, c, 1, 1))
    pooled = ad.concat_channels([ad.channel_mean(f), ad.channel_max(f)])
    gate_s = ad.sigmoid(_conv(pooled, p, "spatial"))
    return f * gate_s


def convu(f: ad.Var, p, final_relu: bool = False) -> ad.Var:
    f = ad.relu(_conv(f, p, "conv1"))
    f = ad.relu(_conv(f, p, "conv2"))
    f = _conv(f, p, "conv3")
    return ad.relu(f) if final_relu else f


def res_fblock(f: ad.Var, p) -> ad.Var:
    """Identity + spatial conv branch + 1x1 convs on the (re, im) spectrum."""
    C = f.shape[1]
    spatial = _conv(ad.relu(_conv(f, p, "spatial1")), p, "spatial2")
    fr, fi = ad.fft2c(f, np.zeros(f.shape, dtype=f.dtype))
    g = _conv(ad.relu(_conv(ad.concat_channels([fr, fi]), p, "freq1")), p, "freq2")
    back, _ = ad.ifft2c(ad.slice_channels(g, 0, C), ad.slice_channels(g, C, 2 * C))
    return f + spatial + back


def transform_F(r: ad.Var, p, cfg: NetworkConfig) -> ad.Var:
    f = _conv(r, p, "conv_in")
    f = cbam(f, p.sub("cbam"))
    f = convu(f, p.sub("convu"), cfg.convu_final_relu)
    return res_fblock(f, p.sub("resf"))


def transform_Finv(f: ad.Var, p, cfg: NetworkConfig) -> ad.Var:
    f = res_fblock(f, p.sub("resf"))
    f = convu(f, p.sub("convu"), cfg.convu_final_relu)
    f = cbam(f, p.sub("cbam"))
    return _conv(f, p, "conv_out")


def theta(p) -> ad.Var:
    return ad.abs_(p["rho"])


def ppm(r: ad.Var, p, cfg: NetworkConfig) -> ad.Var:
    """Residual proximal module ``r + Finv(soft(F(r), theta))``."""
    z = ad.soft_threshold(transform_F(r, p.sub("F"), cfg), theta(p))
    return r + transform_Finv(z, p.sub("Finv"), cfg)


def stage_scope(params, cfg: NetworkConfig, k: int) -> _Scope:
    return _Scope(params, cfg, k)


def _as_batch(y) -> np.ndarray:
    yv = y.y if isinstance(y, Measurement) else np.asarray(y, dtype=np.float64)
    return yv[None] if yv.ndim == 3 else yv


def network_forward(y, masks: MaskSet, params: Mapping, cfg: NetworkConfig, x0=None) -> list[ad.Var]:
    """Run all K stages; returns the stage outputs x^1..x^K, each (B, 1, n, n).

    ``y`` is (J, n, n) or (B, J, n, n). ``params`` may hold Vars (training)
    or arrays, which are placed on a fresh tape as constants (inference).
    ``x0`` defaults to the all-ones image.
    """
    yb = _as_batch(y)
    if yb.shape[1:] != masks.phases.shape:
        raise ValueError(f"measurement shape {yb.shape[1:]} does not match masks {masks.phases.shape}")
    missing = [n for n in param_shapes(cfg) if n not in params]
    if missing:
        raise KeyError(f"missing parameters, e.g. {missing[0]}")
    if not any(isinstance(v, ad.Var) for v in params.values()):
        params = attach(params, ad.Tape(), requires_grad=False)
    B, n = yb.shape[0], masks.n
    x = np.ones((B, 1, n, n)) if x0 is None else np.broadcast_to(np.asarray(x0, float), (B, 1, n, n))
    tape = next(iter(params.values())).tape
    x = x if isinstance(x, ad.Var) else tape.constant(np.array(x))
    outs = []
    for k in range(1, cfg.K + 1):
        p = stage_scope(params, cfg, k)
        r = cdp.sgd_step(x, p["eta"], yb, masks)
        x = ppm(r, p, cfg)
        if x.shape != (B, 1, n, n):
            raise ValueError(f"stage {k} produced shape {x.shape}")
        outs.append(x)
    return outs


def reconstruct(y, masks: MaskSet, params: Mapping[str, np.ndarray], cfg: NetworkConfig, x0=None) -> list[np.ndarray]:
    """Inference helper returning numpy stage outputs of shape (B, n, n)."""
    return [o.value[:, 0] for o in network_forward(y, masks, params, cfg, x0)]
