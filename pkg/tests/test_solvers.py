import numpy as np
import pytest

from conftest import natural_patch
from prista import cdp
from prista.metrics import psnr
from prista.solvers import (SolverConfig, SolverDivergence, align_global_sign, haar2, haar_prox, hio_solve,
                            ihaar2, ista_solve)


@pytest.fixture
def rng():
    return np.random.default_rng(5)


def setup(seed, J=4, n=32, alpha=0.0):
    x = natural_patch(seed, n)
    m = cdp.generate_masks(n, J, 100 + seed)
    return x, m, cdp.measure(x, m, alpha, 7 + seed)


# ---------------------------------------------------------------- Haar


def test_haar_constant_image():
    c = haar2(np.full((16, 16), 0.3))
    want = np.zeros((16, 16))
    want[0, 0] = 0.3 * 16
    np.testing.assert_allclose(c, want, atol=1e-14)


@pytest.mark.parametrize("n", [1, 2, 8, 32])
def test_haar_roundtrip_and_parseval(rng, n):
    x = rng.standard_normal((n, n))
    c = haar2(x)
    assert np.abs(ihaar2(c) - x).max() < 1e-12
    assert abs(np.linalg.norm(c) - np.linalg.norm(x)) < 1e-12


def test_haar_matrix_is_orthogonal():
    n = 8
    H = np.stack([haar2(e.reshape(n, n)).ravel() for e in np.eye(n * n)], axis=1)
    np.testing.assert_allclose(H @ H.T, np.eye(n * n), atol=1e-13)


def test_haar_rejects_bad_sizes():
    with pytest.raises(ValueError):
        haar2(np.zeros((6, 6)))
    with pytest.raises(ValueError):
        ihaar2(np.zeros((8, 4)))


def test_haar_prox_is_prox(rng):
    # prox optimality: 0 in (x - r) + lam * H^T sign(Hx) (subdifferential)
    r = rng.standard_normal((8, 8))
    lam = 0.3
    x = haar_prox(r, lam)
    cx, cr = haar2(x), haar2(r)
    nz = np.abs(cx) > 1e-12
    np.testing.assert_allclose((cx - cr)[nz], -lam * np.sign(cx[nz]), atol=1e-12)
    assert np.all(np.abs(cr[~nz]) <= lam + 1e-12)


# ---------------------------------------------------------------- config


@pytest.mark.parametrize("kw", [dict(iterations=0), dict(beta=0.0), dict(beta=1.5), dict(eta=-1.0), dict(lam=-1.0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SolverConfig(**kw)


# ---------------------------------------------------------------- ISTA


def test_ista_fixed_point_at_truth():
    x, m, y = setup(0)
    rep = ista_solve(y, m, SolverConfig(20, lam=0.0), x0=x)
    assert max(rep.residuals) < 1e-20
    assert np.abs(rep.reconstruction - x).max() < 1e-12


def test_ista_noiseless_recovery():
    x, m, y = setup(1)
    rep = ista_solve(y, m, SolverConfig(500, eta=1 / 4, lam=1e-4))
    assert psnr(align_global_sign(rep.reconstruction, x), x) > 40


def test_ista_default_start_is_all_ones():
    x, m, y = setup(2)
    a = ista_solve(y, m, SolverConfig(3))
    b = ista_solve(y, m, SolverConfig(3), x0=np.ones((32, 32)))
    assert a.reconstruction.tobytes() == b.reconstruction.tobytes()


def test_ista_residual_mostly_non_increasing():
    ups = total = 0
    for seed in range(20):
        x, m, y = setup(seed, J=2)
        rep = ista_solve(y, m, SolverConfig(60, eta=1 / 4, lam=1e-4, tolerance=0))
        r = np.array(rep.residuals)
        ups += int(np.sum(r[1:] > r[:-1] * (1 + 1e-12)))
        total += len(r) - 1
    assert ups / total <= 0.05


def test_ista_lambda_zero_is_sgd_plus_clamp():
    x, m, y = setup(3, J=2)
    rep = ista_solve(y, m, SolverConfig(15, lam=0.0, tolerance=0))
    z = np.ones((32, 32))
    trace = []
    for _ in range(15):
        z = np.clip(cdp.sgd_step(z, 0.5, y, m), 0, 1)
        trace.append(cdp.amplitude_residual(z, y, m))
    np.testing.assert_allclose(rep.residuals, trace, rtol=1e-12, atol=1e-12)
    assert np.abs(rep.reconstruction - z).max() < 1e-12


def test_ista_single_iteration_golden():
    x, m, y = setup(4, J=2)
    rep = ista_solve(y, m, SolverConfig(1, lam=1e-3))
    want = np.clip(haar_prox(cdp.sgd_step(np.ones((32, 32)), 0.5, y, m), 1e-3), 0, 1)
    np.testing.assert_array_equal(rep.reconstruction, want)
    assert rep.iterations == 1


def test_ista_divergence_is_reported():
    x, m, y = setup(5)
    huge = cdp.Measurement(y.y * 1e5)
    with pytest.raises(SolverDivergence):
        ista_solve(huge, m, SolverConfig(5))


def test_solver_shape_checks():
    x, m, y = setup(0)
    with pytest.raises(ValueError):
        ista_solve(y, cdp.generate_masks(32, 2, 0))
    with pytest.raises(ValueError):
        hio_solve(y, m, x0=np.ones((16, 16)))


# ---------------------------------------------------------------- HIO


def test_hio_fixed_point_at_truth():
    x, m, y = setup(0)
    rep = hio_solve(y, m, SolverConfig(1), x0=x)
    assert np.abs(rep.reconstruction - x).max() < 1e-10


def test_hio_noiseless_recovery():
    x, m, y = setup(1)
    rep = hio_solve(y, m, SolverConfig(1000, beta=0.9))
    assert psnr(align_global_sign(rep.reconstruction, x), x) > 50
    assert rep.residuals[-1] < 1e-8


def test_hio_noise_raises_final_residual():
    x, m, clean = setup(2)
    noisy = cdp.measure(x, m, 81, 9)
    cfg = SolverConfig(300, beta=0.9)
    assert hio_solve(noisy, m, cfg).residuals[-1] > hio_solve(clean, m, cfg).residuals[-1]


@pytest.mark.parametrize("solver", [ista_solve, hio_solve])
def test_outputs_in_unit_range_and_deterministic(solver):
    x, m, y = setup(6, J=2, alpha=27)
    a = solver(y, m, SolverConfig(40))
    b = solver(y, m, SolverConfig(40))
    assert a.reconstruction.min() >= 0 and a.reconstruction.max() <= 1
    assert a.reconstruction.tobytes() == b.reconstruction.tobytes()
    assert a.residuals == b.residuals
    assert len(a.residuals) == a.iterations


def test_report_csv():
    x, m, y = setup(0)
    rep = ista_solve(y, m, SolverConfig(3, tolerance=0))
    lines = rep.to_csv().splitlines()
    assert lines[0] == "iteration,residual"
    assert len(lines) == 4
    assert float(lines[1].split(",")[1]) == rep.residuals[0]


# ---------------------------------------------------------------- alignment


def test_align_global_sign(rng):
    x = rng.standard_normal((8, 8))
    np.testing.assert_array_equal(align_global_sign(-x, x), x)
    np.testing.assert_array_equal(align_global_sign(x, x), x)
    for _ in range(20):
        h = rng.standard_normal((8, 8))
        a = align_global_sign(h, x)
        assert np.linalg.norm(a - x) <= np.linalg.norm(-a - x)
    with pytest.raises(ValueError):
        align_global_sign(np.zeros(3), np.zeros(4))
