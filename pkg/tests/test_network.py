import numpy as np
import pytest

from helpers import param_gradcheck, rel_error
from prista import autodiff as ad
from prista import cdp
from prista import network as net
from prista.training import log_loss

SMALL = net.NetworkConfig(K=2, channels=4, cbam_reduction=2)


def random_params(cfg, seed, scale=0.3):
    r = np.random.default_rng(seed)
    p = {k: scale * r.standard_normal(v.shape) for k, v in net.init_params(cfg, seed).items()}
    for k in p:
        if k.endswith("/eta"):
            p[k] = np.array(0.4)
        if k.endswith("/rho"):
            p[k] = np.array(0.05)
    return p


def scope(pv, *path, cfg=SMALL, k=1):
    s = net.stage_scope(pv, cfg, k)
    for part in path:
        s = s.sub(part)
    return s


def constant_scope(params, *path, cfg=SMALL):
    tape = ad.Tape()
    return tape, scope(net.attach(params, tape, requires_grad=False), *path, cfg=cfg)


def only(params, prefix):
    return {k: v for k, v in params.items() if k.startswith(prefix)}


@pytest.fixture
def rng():
    return np.random.default_rng(21)


# ---------------------------------------------------------------- CBAM


def test_cbam_zero_init_halves_twice(rng):
    tape, p = constant_scope(net.zero_params(SMALL), "F", "cbam")
    f = rng.standard_normal((2, 4, 6, 6))
    out = net.cbam(tape.var(f), p)
    np.testing.assert_allclose(out.value, 0.25 * f, atol=1e-15)


def test_cbam_zero_input(rng):
    tape, p = constant_scope(random_params(SMALL, 0), "F", "cbam")
    assert not net.cbam(tape.var(np.zeros((1, 4, 6, 6))), p).value.any()


def test_cbam_gradcheck(rng):
    params = only(random_params(SMALL, 1), "stage1/F/cbam")
    f0 = rng.standard_normal((1, 4, 6, 6))
    w = rng.standard_normal((1, 4, 6, 6))

    def loss(pv):
        tape = next(iter(pv.values())).tape
        f = pv["__f"] if "__f" in pv else tape.constant(f0)
        return ad.sum_(net.cbam(f, scope(pv, "F", "cbam")) * w)

    err, per, _ = param_gradcheck(loss, {**params, "__f": f0}, rng)
    assert err < 1e-5


# ---------------------------------------------------------------- ResFBlock


def test_res_fblock_zero_branches_is_identity(rng):
    tape, p = constant_scope(net.zero_params(SMALL), "F", "resf")
    f = rng.standard_normal((1, 4, 8, 8))
    np.testing.assert_allclose(net.res_fblock(tape.var(f), p).value, f, atol=1e-15)


def test_res_fblock_zero_input_zero_bias(rng):
    params = {k: (np.zeros_like(v) if k.endswith("bias") else v) for k, v in random_params(SMALL, 2).items()}
    tape, p = constant_scope(params, "F", "resf")
    assert np.abs(net.res_fblock(tape.var(np.zeros((1, 4, 8, 8))), p).value).max() < 1e-15


def test_res_fblock_gradcheck(rng):
    cfg = net.NetworkConfig(K=1, channels=2, cbam_reduction=1)
    params = only(random_params(cfg, 3), "stage1/F/resf")
    f0 = rng.standard_normal((1, 2, 8, 8))
    w = rng.standard_normal((1, 2, 8, 8))

    def loss(pv):
        return ad.sum_(net.res_fblock(pv["__f"], scope(pv, "F", "resf", cfg=cfg)) * w)

    err, _, _ = param_gradcheck(loss, {**params, "__f": f0}, rng)
    assert err < 1e-5


# ---------------------------------------------------------------- F and Finv


def test_zero_transforms(rng):
    tape, p = constant_scope(net.zero_params(SMALL))
    r = tape.var(rng.random((1, 1, 8, 8)))
    fr = net.transform_F(r, p.sub("F"), SMALL)
    assert fr.shape == (1, 4, 8, 8) and not fr.value.any()
    back = net.transform_Finv(tape.var(np.zeros((1, 4, 8, 8))), p.sub("Finv"), SMALL)
    assert back.shape == (1, 1, 8, 8) and not back.value.any()


@pytest.mark.parametrize("n", [8, 16])
def test_transform_shapes(rng, n):
    tape, p = constant_scope(random_params(SMALL, 4))
    r = tape.var(rng.random((3, 1, n, n)))
    f = net.transform_F(r, p.sub("F"), SMALL)
    assert f.shape == (3, 4, n, n)
    assert net.transform_Finv(f, p.sub("Finv"), SMALL).shape == (3, 1, n, n)


def test_transform_pair_gradcheck(rng):
    params = {k: v for k, v in random_params(SMALL, 5).items() if k.startswith("stage1/")}
    r0 = rng.random((1, 1, 8, 8))
    w = rng.standard_normal((1, 1, 8, 8))

    def loss(pv):
        p = scope(pv)
        z = ad.soft_threshold(net.transform_F(pv["__r"], p.sub("F"), SMALL), net.theta(p))
        return ad.sum_(net.transform_Finv(z, p.sub("Finv"), SMALL) * w)

    err, _, _ = param_gradcheck(loss, {**params, "__r": r0}, rng, probes=1)
    assert err < 1e-5


# ---------------------------------------------------------------- PPM


def test_ppm_huge_threshold_returns_input(rng):
    params = {k: (np.zeros_like(v) if k.endswith("bias") else v) for k, v in random_params(SMALL, 6).items()}
    params["stage1/rho"] = np.array(1e6)
    tape, p = constant_scope(params)
    r = rng.random((1, 1, 8, 8))
    np.testing.assert_array_equal(net.ppm(tape.var(r), p, SMALL).value, r)


def test_ppm_zero_network_returns_input(rng):
    tape, p = constant_scope(net.zero_params(SMALL))
    r = rng.random((2, 1, 8, 8))
    np.testing.assert_array_equal(net.ppm(tape.var(r), p, SMALL).value, r)


def test_ppm_gradient_wrt_rho(rng):
    params = {k: v for k, v in random_params(SMALL, 7).items() if k.startswith("stage1/")}
    r0 = tape_r = rng.random((1, 1, 8, 8))

    def loss(pv):
        tape = pv["stage1/rho"].tape
        return ad.mean(net.ppm(tape.constant(r0), scope(pv), SMALL))

    tape = ad.Tape()
    pv = net.attach(params, tape)
    g = tape.backward(loss(pv))[pv["stage1/rho"]]
    h = 1e-6

    def f(rho):
        p = dict(params, **{"stage1/rho": np.array(rho)})
        return float(loss(net.attach(p, ad.Tape(), requires_grad=False)).value)

    fd = (f(0.05 + h) - f(0.05 - h)) / (2 * h)
    assert abs(float(g) - fd) / max(abs(fd), 1e-12) < 1e-5
    assert tape_r is r0


# ---------------------------------------------------------------- full network


def make_problem(n=8, J=2, B=1, seed=0, alpha=0.0):
    r = np.random.default_rng(seed)
    truth = r.random((B, n, n))
    m = cdp.generate_masks(n, J, seed)
    return truth, m, cdp.measure(truth, m, alpha, seed).y


def test_single_stage_zero_net_zero_step_returns_x0():
    cfg = net.NetworkConfig(K=1, channels=4, cbam_reduction=2)
    truth, m, y = make_problem()
    out = net.reconstruct(y, m, net.zero_params(cfg, eta=0.0), cfg)
    np.testing.assert_array_equal(out[0], np.ones((1, 8, 8)))


def test_single_stage_consistent_start_is_fixed():
    cfg = net.NetworkConfig(K=1, channels=4, cbam_reduction=2)
    truth, m, y = make_problem()
    out = net.reconstruct(y, m, net.zero_params(cfg), cfg, x0=truth[:, None])
    assert np.abs(out[0] - truth).max() < 1e-12


def test_zero_network_is_plain_subgradient_iteration():
    cfg = net.NetworkConfig(K=4, channels=4, cbam_reduction=2)
    truth, m, y = make_problem(n=16, J=3, B=2, alpha=27)
    params = net.zero_params(cfg)
    etas = [0.5, 0.2, 0.33, 0.1]
    for k, e in enumerate(etas, start=1):
        params[f"stage{k}/eta"] = np.array(e)
    outs = net.reconstruct(y, m, params, cfg)
    for b in range(2):
        z = np.ones((16, 16))
        for k, e in enumerate(etas):
            z = cdp.sgd_step(z, e, y[b], m)
            assert np.abs(outs[k][b] - z).max() <= 1e-12


def test_network_forward_accepts_measurement_object():
    truth, m, y = make_problem()
    meas = cdp.Measurement(y[0])
    outs = net.network_forward(meas, m, net.init_params(SMALL, 0), SMALL)
    assert len(outs) == SMALL.K
    assert all(o.shape == (1, 1, 8, 8) for o in outs)


def test_network_shape_errors():
    truth, m, y = make_problem()
    with pytest.raises(ValueError):
        net.network_forward(y, cdp.generate_masks(16, 2, 0), net.init_params(SMALL, 0), SMALL)
    params = net.init_params(SMALL, 0)
    del params["stage2/eta"]
    with pytest.raises(KeyError):
        net.network_forward(y, m, params, SMALL)


def test_full_network_log_loss_gradcheck():
    truth, m, y = make_problem(n=8, J=2, B=1, seed=3, alpha=9)
    params = random_params(SMALL, 8)

    def loss(pv):
        return log_loss(net.network_forward(y, m, pv, SMALL), truth)

    err, per, _ = param_gradcheck(loss, params, np.random.default_rng(0), probes=1)
    assert err < 1e-4


def test_every_parameter_gets_gradient():
    truth, m, y = make_problem(n=8, J=2, B=2, seed=4, alpha=9)
    params = random_params(SMALL, 9)
    for k in params:
        if k.endswith("fc1/bias"):
            params[k] = np.full_like(params[k], 0.5)  # keep the tiny MLP hidden layer active
    tape = ad.Tape()
    pv = net.attach(params, tape)
    grads = tape.backward(log_loss(net.network_forward(y, m, pv, SMALL), truth))
    dead = [k for k, v in pv.items() if np.abs(grads[v]).max() == 0]
    assert not dead


# ---------------------------------------------------------------- init and layout


def test_init_values_and_determinism():
    cfg = net.NetworkConfig(K=3, channels=8)
    a = net.init_params(cfg, 7)
    b = net.init_params(cfg, 7)
    assert list(a) == list(b)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    for k in range(1, 4):
        assert float(a[f"stage{k}/eta"]) == 0.5
        assert abs(float(a[f"stage{k}/rho"])) == 0.01
    c = net.init_params(cfg, 8)
    assert any(a[k].tobytes() != c[k].tobytes() for k in a)


def test_xavier_bounds():
    cfg = net.NetworkConfig(K=2, channels=8)
    for name, v in net.init_params(cfg, 0).items():
        if name.endswith("weight"):
            if v.ndim == 4:
                fan_in = v.shape[1] * v.shape[2] * v.shape[3]
                fan_out = v.shape[0] * v.shape[2] * v.shape[3]
            else:
                fan_out, fan_in = v.shape
            bound = np.sqrt(6 / (fan_in + fan_out))
            assert np.abs(v).max() <= bound
            assert np.abs(v).max() > 0.5 * bound
        elif name.endswith("bias"):
            assert not v.any()


def test_stages_do_not_share_by_default():
    p = net.init_params(net.NetworkConfig(K=2, channels=4, cbam_reduction=2), 0)
    assert p["stage1/F/conv_in/weight"].tobytes() != p["stage2/F/conv_in/weight"].tobytes()


def test_sharing_flags_reduce_parameter_count():
    C = 4
    base = net.NetworkConfig(K=3, channels=C, cbam_reduction=2)
    n0 = len(net.param_shapes(base))
    per_stage = n0 // 3
    resf = 2 * 8   # F and Finv ResFBlocks, 8 tensors each
    cbam = 2 * 6
    for flags, saved in [({"share_resfblock": True}, resf), ({"share_cbam": True}, cbam),
                         ({"share_resfblock": True, "share_cbam": True}, resf + cbam)]:
        cfg = net.NetworkConfig(K=3, channels=C, cbam_reduction=2, **flags)
        assert len(net.param_shapes(cfg)) == n0 - 2 * saved
    assert per_stage * 3 == n0


def test_shared_parameters_used_by_every_stage():
    cfg = net.NetworkConfig(K=2, channels=4, cbam_reduction=2, share_resfblock=True)
    assert net.resolve(cfg, 2, "F/resf/freq1/weight") == "stage1/F/resf/freq1/weight"
    assert net.resolve(cfg, 2, "F/cbam/fc1/weight") == "stage2/F/cbam/fc1/weight"
    truth, m, y = make_problem()
    out = net.reconstruct(y, m, net.init_params(cfg, 0), cfg)
    assert len(out) == 2


def test_config_validation():
    with pytest.raises(ValueError):
        net.NetworkConfig(K=0)
    with pytest.raises(ValueError):
        net.NetworkConfig(channels=2, cbam_reduction=4)


def test_theta_nonnegative_for_negative_rho():
    p = net.zero_params(SMALL, theta=-0.2)
    tape, s = constant_scope(p)
    assert float(net.theta(s).value) == 0.2


def test_f32_forward_close_to_f64():
    truth, m, y = make_problem(n=8, B=2, alpha=9)
    p64 = random_params(SMALL, 10, scale=0.1)
    p32 = {k: v.astype(np.float32) for k, v in p64.items()}
    a = net.reconstruct(y, m, p64, SMALL)[-1]
    b = net.reconstruct(y.astype(np.float32), m, p32, SMALL)[-1]
    assert rel_error([a], [b]) < 1e-3
