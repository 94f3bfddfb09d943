import numpy as np
import pytest

from eqbsde.autodiff import Tape, batch_norm, bn_relu, relu, value
from eqbsde.bsde import TrainConfig
from eqbsde.nn import DEFAULT_LR_STAGES, Adam, MlpSpec, init_mlp, lr_at, mlp_forward, update_running_stats


def _fd(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def test_tape_elementwise_and_broadcast():
    rng = np.random.default_rng(0)
    a0, b0 = rng.normal(size=(3, 4)), rng.normal(size=(1, 4))

    def f(a, b):
        return (np.exp(a) * b - a / (2.0 + b * b) + np.maximum(a, b) ** 2).sum()

    tape = Tape()
    a, b = tape.var(a0), tape.var(b0)
    out = f(a, b)
    tape.backward(out)
    assert float(value(out)) == pytest.approx(f(a0, b0))
    np.testing.assert_allclose(a.grad, _fd(lambda x: f(x, b0), a0), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(b.grad, _fd(lambda x: f(a0, x), b0), rtol=1e-6, atol=1e-8)


def test_tape_matmul_index_mean():
    rng = np.random.default_rng(1)
    W0, x0 = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 5))

    def f(W, x):
        h = W @ x
        return (np.log(1.0 + h[1] ** 2)).mean() + np.sqrt(1.0 + h[0] ** 2).mean()

    tape = Tape()
    W, x = tape.var(W0), tape.var(x0)
    tape.backward(f(W, x))
    np.testing.assert_allclose(W.grad, _fd(lambda v: f(v, x0), W0), rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(x.grad, _fd(lambda v: f(W0, v), x0), rtol=1e-6, atol=1e-9)


def test_backward_needs_scalar():
    tape = Tape()
    x = tape.var(np.ones(3))
    with pytest.raises(ValueError):
        tape.backward(x * 2.0)


def test_fused_bn_relu_matches_composite():
    rng = np.random.default_rng(2)
    h0 = rng.normal(size=(3, 5, 16))
    g0, s0 = rng.normal(size=(3, 5, 1)), rng.normal(size=(3, 5, 1))
    w = rng.normal(size=h0.shape)
    grads = []
    for fused in (True, False):
        tape = Tape()
        h, g, s = tape.var(h0), tape.var(g0), tape.var(s0)
        if fused:
            out, mu, var = bn_relu(h, g, s, 1e-5)
        else:
            out, mu, var = batch_norm(h, g, s, 1e-5, axis=-1)
            out = relu(out)
        tape.backward((out * w).sum())
        grads.append((value(out), h.grad, g.grad, s.grad, mu, var))
    for a, b in zip(*grads):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(grads[0][4], h0.mean(-1, keepdims=True))
    np.testing.assert_allclose(grads[0][5], h0.var(-1, keepdims=True))


def test_batch_norm_gradient_fd():
    rng = np.random.default_rng(3)
    h0 = rng.normal(size=(1, 2, 6))
    g0, s0 = np.full((1, 2, 1), 1.3), np.full((1, 2, 1), 0.2)
    w = rng.normal(size=h0.shape)

    def f(h):
        out, _, _ = batch_norm(h, g0, s0, 1e-5, axis=-1)
        return float((value(out) * w).sum())

    tape = Tape()
    h = tape.var(h0)
    out, _, _ = batch_norm(h, g0, s0, 1e-5, axis=-1)
    tape.backward((out * w).sum())
    np.testing.assert_allclose(h.grad, _fd(f, h0), rtol=1e-5, atol=1e-8)


def test_mlp_param_count_and_shapes():
    spec = MlpSpec()
    params, stats = init_mlp(spec, 39, np.random.default_rng(0))
    assert sum(v.size for v in params.values()) == 39 * spec.n_params()
    assert params["W1"].shape == (39, 11, 1) and params["W3"].shape == (39, 1, 11)
    assert set(stats) == {"bn1_mean", "bn1_var", "bn2_mean", "bn2_var"}


def test_mlp_zero_map():
    spec = MlpSpec()
    params, stats = init_mlp(spec, 2, np.random.default_rng(0))
    params = {k: (np.ones_like(v) if "_g" in k else np.zeros_like(v)) for k, v in params.items()}
    x = np.random.default_rng(1).normal(size=(2, 1, 8))
    for mode in ("train", "eval"):
        np.testing.assert_array_equal(mlp_forward(params, x, spec, mode, stats), 0.0)


def test_mlp_degenerate_batch_finite_and_pure():
    spec = MlpSpec()
    params, stats = init_mlp(spec, 1, np.random.default_rng(0))
    x = np.full((1, 1, 4), 0.273)
    out = mlp_forward(params, x, spec, "train")
    assert np.all(np.isfinite(out))
    x = np.random.default_rng(2).normal(size=(1, 1, 10))
    np.testing.assert_array_equal(mlp_forward(params, x, spec, "train"), mlp_forward(params, x, spec, "train"))
    np.testing.assert_array_equal(mlp_forward(params, x, spec, "eval", stats),
                                  mlp_forward(params, x, spec, "eval", stats))


def test_mlp_mode_errors():
    spec = MlpSpec()
    params, stats = init_mlp(spec, 1, np.random.default_rng(0))
    with pytest.raises(ValueError, match="at least 2"):
        mlp_forward(params, np.zeros((1, 1, 1)), spec, "train")
    with pytest.raises(ValueError):
        mlp_forward(params, np.zeros((1, 1, 3)), spec, "eval")
    with pytest.raises(ValueError):
        mlp_forward(params, np.zeros((1, 1, 3)), spec, "predict")


def test_eval_mode_matches_train_when_stats_agree():
    spec = MlpSpec()
    params, stats = init_mlp(spec, 2, np.random.default_rng(0))
    x = np.random.default_rng(3).normal(size=(2, 1, 64))
    bs = {}
    out_train = mlp_forward(params, x, spec, "train", None, bs)
    out_eval = mlp_forward(params, x, spec, "eval", bs)
    np.testing.assert_allclose(out_train, out_eval, rtol=1e-12, atol=1e-14)
    update_running_stats(stats, bs, 0.9)
    np.testing.assert_allclose(stats["bn1_mean"], 0.1 * bs["bn1_mean"])


def test_adam_zero_gradient_no_move():
    p = {"w": np.array([1.0, -2.0])}
    opt = Adam()
    for _ in range(5):
        opt.step(p, {"w": np.zeros(2)}, 1e-2)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_constant_gradient_step_tends_to_lr():
    p = {"w": np.array([0.0])}
    opt = Adam()
    prev = 0.0
    for _ in range(2000):
        opt.step(p, {"w": np.array([3.7])}, 1e-3)
        step = prev - p["w"][0]
        prev = p["w"][0]
    assert step == pytest.approx(1e-3, rel=1e-6)


def test_adam_deterministic_and_shape_check():
    runs = []
    for _ in range(2):
        rng = np.random.default_rng(4)
        p = {"w": np.zeros((2, 2))}
        opt = Adam()
        for _ in range(10):
            opt.step(p, {"w": rng.normal(size=(2, 2))}, 1e-2)
        runs.append(p["w"])
    np.testing.assert_array_equal(*runs)
    with pytest.raises(ValueError, match="shape"):
        Adam().step({"w": np.zeros(2)}, {"w": np.zeros(3)}, 1e-3)


def test_lr_schedule():
    E = 5000
    lrs = [lr_at(e, E) for e in range(E)]
    assert lrs[0] == 8e-4
    assert lrs[-1] == pytest.approx(1e-5, rel=1e-2)
    assert all(b <= a + 1e-18 for a, b in zip(lrs[:-1], lrs[1:]))
    assert lr_at(1250, E) == pytest.approx(5e-4)
    assert lr_at(2500, E) == pytest.approx(2e-4)
    assert lr_at(3750, E) == pytest.approx(5e-5)
    assert lr_at(1000, E, boundaries=(0.2, 0.5, 0.8)) == pytest.approx(5e-4)


def test_train_config_rejects_increasing_schedule():
    with pytest.raises(ValueError):
        TrainConfig(lr_stages=((1e-4, 5e-4),))
    assert TrainConfig().lr_stages == DEFAULT_LR_STAGES
