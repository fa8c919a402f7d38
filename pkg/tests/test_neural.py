import numpy as np
import pytest

from gdmopt._validation import InputError
from gdmopt.neural import (
    DENOISER_LAYERS,
    DenoiserParams,
    TrainState,
    adam_step,
    advance_epoch,
    denoiser_forward,
    ema_update,
    loss_and_grad,
    read_checkpoint,
    time_embedding,
    write_checkpoint,
)

Y_DIM, COND_DIM = 3, 4


@pytest.fixture
def params():
    return DenoiserParams.initialize(Y_DIM, COND_DIM, np.random.default_rng(0))


def batch(rng, n=16):
    return (rng.normal(size=(n, Y_DIM)), rng.integers(1, 21, n),
            rng.normal(size=(n, COND_DIM)), rng.normal(size=(n, Y_DIM)))


def test_time_embedding_at_zero():
    e = time_embedding(0)[0]
    np.testing.assert_array_equal(e[0::2], 0.0)
    np.testing.assert_array_equal(e[1::2], 1.0)


def test_time_embedding_range_and_low_frequencies():
    e = time_embedding(np.arange(0, 101))
    assert e.shape == (101, 32) and np.all(np.abs(e) <= 1.0)
    e1, e2 = time_embedding(1)[0], time_embedding(2)[0]
    assert np.all(e1[:2] != e2[:2])


def test_zero_params_give_zero_output():
    p = DenoiserParams.zeros(Y_DIM, COND_DIM)
    out = denoiser_forward(p.live, np.ones((2, Y_DIM)), 5, np.ones(COND_DIM))
    np.testing.assert_array_equal(out, 0.0)


def test_forward_is_pure_and_branch_sensitive(params, rng):
    y, t, c, _ = batch(rng, 4)
    a = denoiser_forward(params.live, y, t, c)
    np.testing.assert_array_equal(a, denoiser_forward(params.live, y, t, c))
    assert not np.allclose(a, denoiser_forward(params.live, y, t, None))


def test_forward_shape_errors(params):
    with pytest.raises(InputError):
        denoiser_forward(params.live, np.ones((2, Y_DIM + 1)), 1, np.ones(COND_DIM))
    with pytest.raises(InputError):
        denoiser_forward(params.live, np.ones((2, Y_DIM)), 1, np.ones(COND_DIM + 2))


def test_loss_zero_at_exact_prediction(params, rng):
    y, t, c, _ = batch(rng)
    eps = denoiser_forward(params.live, y, t, c)
    loss, g = loss_and_grad(params.live, y, t, c, eps)
    assert loss == 0.0
    assert all(np.all(v == 0) for v in g.values())


def test_duplicated_batch_leaves_loss_and_grads(params, rng):
    y, t, c, e = batch(rng)
    l1, g1 = loss_and_grad(params.live, y, t, c, e)
    l2, g2 = loss_and_grad(params.live, np.vstack([y, y]), np.concatenate([t, t]),
                           np.vstack([c, c]), np.vstack([e, e]))
    assert l1 == pytest.approx(l2, rel=1e-13)
    for k in g1:
        np.testing.assert_allclose(g1[k], g2[k], rtol=1e-10, atol=1e-15)


def finite_difference_check(params, rng, per_layer=100, h=1e-5):
    y, t, c, e = batch(rng, 8)
    mask = (rng.random(8) > 0.3).astype(float)
    _, g = loss_and_grad(params.live, y, t, c, e, mask=mask)
    worst = 0.0
    for layer in DENOISER_LAYERS:
        coords = [(f"{layer}.W", idx) for idx in np.ndindex(params.live[f"{layer}.W"].shape)]
        coords += [(f"{layer}.b", idx) for idx in np.ndindex(params.live[f"{layer}.b"].shape)]
        pick = rng.choice(len(coords), size=min(per_layer, len(coords)), replace=False)
        for j in pick:
            name, idx = coords[j]
            w = {k: v.copy() for k, v in params.live.items()}
            w[name][idx] += h
            lp, _ = loss_and_grad(w, y, t, c, e, mask=mask)
            w[name][idx] -= 2 * h
            lm, _ = loss_and_grad(w, y, t, c, e, mask=mask)
            num = (lp - lm) / (2 * h)
            ana = g[name][idx]
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-6))
    return worst


def test_gradients_match_finite_differences(params, rng):
    assert finite_difference_check(params, rng, per_layer=30) <= 1e-4


def test_adam_zero_grad_is_noop(params):
    before = {k: v.copy() for k, v in params.live.items()}
    state = TrainState(0.01)
    adam_step(state, params.live, {k: np.zeros_like(v) for k, v in params.live.items()})
    for k in before:
        np.testing.assert_array_equal(before[k], params.live[k])


def test_adam_constant_gradient_steps_by_lr():
    w = {"a": np.zeros(3)}
    state = TrainState(0.01)
    for _ in range(200):
        prev = w["a"].copy()
        adam_step(state, w, {"a": np.array([1.0, -2.0, 0.5])})
    np.testing.assert_allclose(np.abs(w["a"] - prev), 0.01, rtol=1e-6)


def test_milestone_scales_lr():
    state = TrainState(0.005, milestones=(100, 150), gamma=0.1)
    advance_epoch(state, 99)
    assert state.lr == 0.005
    advance_epoch(state, 100)
    assert state.lr == pytest.approx(0.0005)
    advance_epoch(state, 199)
    assert state.lr == pytest.approx(0.00005)


def test_lr_must_be_positive():
    with pytest.raises(InputError):
        TrainState(0.0)


def test_ema_recursion(params):
    assert all(np.array_equal(params.ema[k], params.live[k]) for k in params.live)
    delta = 0.5
    for k in params.live:
        params.live[k] = params.live[k] + delta
    ema_update(params.ema, params.live, 0.999)
    for k in params.live:
        np.testing.assert_allclose(params.live[k] - params.ema[k], 0.999 * delta, rtol=1e-9)
    for _ in range(10):
        ema_update(params.ema, params.live, 0.999)
    for k in params.live:
        np.testing.assert_allclose(params.live[k] - params.ema[k], 0.999 ** 11 * delta, rtol=1e-9)


def test_forward_finite_and_lipschitz(params, rng):
    y = rng.uniform(-50, 50, size=(10_000, Y_DIM))
    t = rng.integers(0, 21, 10_000)
    c = rng.uniform(-10, 10, size=(10_000, COND_DIM))
    out = denoiser_forward(params.live, y, t, c)
    assert np.all(np.isfinite(out))
    d = rng.normal(size=y.shape)
    d *= 1e-6 / np.linalg.norm(d, axis=1, keepdims=True)
    ratio = np.linalg.norm(denoiser_forward(params.live, y + d, t, c) - out, axis=1) / 1e-6
    assert np.all(np.isfinite(ratio)) and ratio.max() < 1e3


def test_sanity_descent_on_fixed_batch(params, rng):
    y, t, c, e = batch(rng, 32)
    state = TrainState(1e-3)
    losses = []
    for _ in range(50):
        loss, g = loss_and_grad(params.live, y, t, c, e)
        losses.append(loss)
        adam_step(state, params.live, g)
    for start in range(0, 50, 10):
        window = losses[start:start + 11]
        assert any(b < a for a, b in zip(window, window[1:]))
    assert losses[-1] < losses[0]


def test_checkpoint_round_trip_bitwise(params, rng, tmp_path):
    write_checkpoint(tmp_path / "m", {"kind": "test"}, params.shapes(), [params.live, params.ema])
    meta, blocks = read_checkpoint(tmp_path / "m.ckpt.json")
    assert meta["kind"] == "test" and meta["n_blocks"] == 2
    y, t, c, _ = batch(rng, 5)
    np.testing.assert_array_equal(denoiser_forward(blocks[0], y, t, c),
                                  denoiser_forward(params.live, y, t, c))
    # layout: declared layer order, W before b
    names = [n for n, _ in meta["layout"]]
    assert names[:4] == ["cond.W", "cond.b", "fuse.W", "fuse.b"]
    raw = np.fromfile(tmp_path / "m.ckpt.bin", dtype="<f8")
    assert raw[0] == params.live["cond.W"][0, 0]


def test_read_checkpoint_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_checkpoint(tmp_path / "none")
