"""Finite-difference oracles shared by the test modules."""

import numpy as np

from prista import autodiff as ad

STEP = 1e-6


def _eval(build, arrays):
    tape = ad.Tape()
    vs = [tape.var(a) for a in arrays]
    return float(build(*vs).value)


def autodiff_grads(build, arrays):
    tape = ad.Tape()
    vs = [tape.var(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    grads = tape.backward(build(*vs))
    return [grads[v] for v in vs]


def numeric_grads(build, arrays, step=STEP):
    """Central differences, one coordinate at a time."""
    out = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a, dtype=np.float64)
        for idx in np.ndindex(a.shape):
            plus = [b.copy() for b in arrays]
            minus = [b.copy() for b in arrays]
            plus[i][idx] += step
            minus[i][idx] -= step
            g[idx] = (_eval(build, plus) - _eval(build, minus)) / (2 * step)
        out.append(g)
    return out


def rel_error(a, b) -> float:
    a = np.concatenate([np.ravel(x) for x in a])
    b = np.concatenate([np.ravel(x) for x in b])
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def gradcheck(build, arrays, step=STEP) -> float:
    """Relative error between reverse-mode and finite-difference gradients."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    return rel_error(autodiff_grads(build, arrays), numeric_grads(build, arrays, step))


def param_gradcheck(loss_of, params: dict, rng, probes=2, step=STEP):
    """Gradient check over a parameter dict.

    For every tensor: ``probes`` random single coordinates plus one random
    direction spanning the whole tensor. Returns (global relative error,
    per-tensor relative errors).
    """
    tape = ad.Tape()
    pv = {k: tape.var(v, requires_grad=True) for k, v in params.items()}
    grads = tape.backward(loss_of(pv))
    g = {k: grads[v] for k, v in pv.items()}

    def f(p):
        t = ad.Tape()
        return float(loss_of({k: t.var(v) for k, v in p.items()}).value)

    ad_all, fd_all, per = [], [], {}
    for name, val in params.items():
        dirs = []
        for _ in range(probes):
            d = np.zeros_like(val)
            d[tuple(rng.integers(0, s) for s in val.shape)] = 1.0
            dirs.append(d)
        dirs.append(rng.standard_normal(val.shape))
        a_, f_ = [], []
        for d in dirs:
            plus = dict(params)
            minus = dict(params)
            plus[name] = val + step * d
            minus[name] = val - step * d
            f_.append((f(plus) - f(minus)) / (2 * step))
            a_.append(float(np.sum(g[name] * d)))
        per[name] = rel_error([np.array(a_)], [np.array(f_)])
        ad_all += a_
        fd_all += f_
    return rel_error([np.array(ad_all)], [np.array(fd_all)]), per, g
