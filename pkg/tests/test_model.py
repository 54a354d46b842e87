import numpy as np
import pytest

from ddsr.model import (
    Approximator,
    ApproximatorConfig,
    loss_ce,
    loss_ce_with_grad,
    timestep_embedding,
)
from ddsr.seeding import as_generator


def _tiny_model(dropout=0.0, **kw):
    cfg = ApproximatorConfig(
        m=2, K=3, d=8, layers=1, heads=2, dropout=dropout,
        max_positions=kw.pop("max_positions", 4), **kw
    )
    return Approximator(cfg, seed=0)


def test_forward_shape_contract():
    model = _tiny_model()
    codes = np.array([[[0, 1]]])  # one item
    logits = model.forward(codes, np.array([0]))
    assert logits.shape == (1, 1, 2, 3)
    assert np.all(np.isfinite(logits))


def test_block_logits_ignore_future_items():
    model = _tiny_model()
    rng = as_generator(3)
    codes = rng.integers(0, 3, size=(1, 4, 2))
    base = model.forward(codes, np.array([7]))
    altered = codes.copy()
    altered[0, 2:] = (altered[0, 2:] + 1) % 3
    out = model.forward(altered, np.array([7]))
    assert np.array_equal(base[0, :2], out[0, :2])
    assert not np.array_equal(base[0, 2:], out[0, 2:])


def test_padded_items_do_not_leak():
    model = _tiny_model()
    rng = as_generator(5)
    codes = rng.integers(0, 3, size=(1, 4, 2))
    mask = np.array([[True, True, False, False]])
    base = model.forward(codes, np.array([0]), mask)
    poisoned = codes.copy()
    poisoned[0, 2:] = (poisoned[0, 2:] + 2) % 3
    out = model.forward(poisoned, np.array([0]), mask)
    assert np.array_equal(base[0, :2], out[0, :2])


def test_timestep_signal_changes_output():
    model = _tiny_model()
    codes = np.array([[[1, 2], [0, 1]]])
    a = model.forward(codes, np.array([0]))
    b = model.forward(codes, np.array([50]))
    assert not np.allclose(a, b)


def test_timestep_embedding_is_interleaved_sincos():
    t = np.array([0, 3])
    emb = timestep_embedding(t, 6)
    w = np.power(10000.0, -2.0 * np.arange(3) / 6)
    assert np.allclose(emb[0, 0::2], 0.0)
    assert np.allclose(emb[0, 1::2], 1.0)
    assert np.allclose(emb[1, 0::2], np.sin(3 * w))
    assert np.allclose(emb[1, 1::2], np.cos(3 * w))


def test_long_history_keeps_most_recent():
    model = _tiny_model()
    rng = as_generator(9)
    codes = rng.integers(0, 3, size=(1, 7, 2))
    out = model.forward(codes, np.array([0]))
    ref = model.forward(codes[:, -4:], np.array([0]))
    assert out.shape == (1, 4, 2, 3)
    assert np.array_equal(out, ref)


def test_forward_input_validation():
    model = _tiny_model()
    with pytest.raises(ValueError, match="code slots"):
        model.forward(np.zeros((1, 2, 3), dtype=np.int64), np.array([0]))
    with pytest.raises(ValueError, match="out of range"):
        model.forward(np.full((1, 2, 2), 9), np.array([0]))
    dropped = _tiny_model(dropout=0.5)
    with pytest.raises(ValueError, match="rng"):
        dropped.forward(np.zeros((1, 2, 2), dtype=np.int64), np.array([0]), train=True)


def test_config_validation():
    with pytest.raises(ValueError, match="not divisible"):
        ApproximatorConfig(m=2, K=3, d=6, heads=4)
    with pytest.raises(ValueError, match="dropout"):
        ApproximatorConfig(m=2, K=3, d=8, heads=2, dropout=1.0)
    cfg = ApproximatorConfig(m=2, K=3, d=8, heads=2, ff=0)
    assert cfg.ff == 32


def test_dropout_deterministic_under_seed():
    model = _tiny_model(dropout=0.3)
    codes = np.array([[[0, 1], [2, 0], [1, 1]]])
    a = model.forward(codes, np.array([2]), train=True, rng=as_generator(42))
    b = model.forward(codes, np.array([2]), train=True, rng=as_generator(42))
    assert np.array_equal(a, b)


def test_param_roundtrip_restores_output():
    model = _tiny_model()
    codes = np.array([[[0, 1], [2, 0]]])
    before = model.forward(codes, np.array([0]))
    saved = model.clone_params()
    for v in model.params.values():
        v += 0.1
    assert not np.allclose(model.forward(codes, np.array([0])), before)
    model.load_params(saved)
    assert np.array_equal(model.forward(codes, np.array([0])), before)


def test_loss_point_mass_is_zero():
    targets = np.array([[[0, 2]]])
    logits = np.full((1, 1, 2, 3), -40.0)
    logits[0, 0, 0, 0] = 40.0
    logits[0, 0, 1, 2] = 40.0
    assert loss_ce(logits, targets) == pytest.approx(0.0, abs=1e-9)


def test_loss_uniform_is_log_k():
    logits = np.zeros((2, 3, 2, 4))
    targets = np.zeros((2, 3, 2), dtype=np.int64)
    assert loss_ce(logits, targets) == pytest.approx(np.log(4.0), abs=1e-12)


def test_loss_matches_direct_formula():
    rng = as_generator(12)
    logits = rng.normal(size=(2, 3, 2, 5))
    targets = rng.integers(0, 5, size=(2, 3, 2))
    mask = np.array([[True, True, False], [True, False, False]])
    total, count = 0.0, 0
    for b in range(2):
        for l in range(3):
            if not mask[b, l]:
                continue
            for p in range(2):
                z = logits[b, l, p]
                total += -(z[targets[b, l, p]] - np.log(np.exp(z).sum()))
                count += 1
    want = total / count
    got, dlogits = loss_ce_with_grad(logits, targets, mask)
    assert got == pytest.approx(want, abs=1e-9)
    # masked blocks contribute no gradient
    assert np.all(dlogits[0, 2] == 0.0)
    assert np.all(dlogits[1, 1:] == 0.0)


def test_loss_rejects_fully_masked_batch():
    logits = np.zeros((1, 2, 2, 3))
    targets = np.zeros((1, 2, 2), dtype=np.int64)
    with pytest.raises(ValueError, match="no unmasked"):
        loss_ce(logits, targets, np.zeros((1, 2), dtype=bool))


def _fd_check(model, codes, t, mask, targets, h=1e-5):
    """Central-difference check; returns worst relative error per group."""

    def loss_at():
        logits = model.forward(codes, t, mask)
        return loss_ce(logits, targets, mask)

    logits, cache = model.forward(codes, t, mask, want_cache=True)
    _, dlogits = loss_ce_with_grad(logits, targets, mask)
    grads = model.backward(cache, dlogits)
    worst = {}
    for name, theta in model.params.items():
        flat = theta.reshape(-1)
        g_fd = np.empty(flat.shape)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = loss_at()
            flat[i] = keep - h
            down = loss_at()
            flat[i] = keep
            g_fd[i] = (up - down) / (2.0 * h)
        g_an = grads[name].reshape(-1)
        rel = np.abs(g_an - g_fd) / np.maximum.reduce(
            [np.abs(g_an), np.abs(g_fd), np.full(flat.shape, 1e-6)]
        )
        worst[name] = float(rel.max())
    return worst


def test_gradients_match_central_differences():
    model = _tiny_model()
    # O(1)-scale parameters keep true gradients above the FD noise floor
    rng = as_generator(123)
    for v in model.params.values():
        v[...] = rng.normal(0.0, 0.3, size=v.shape)
    codes = np.array([[[0, 2], [1, 0]]])
    targets = np.array([[[1, 0], [2, 2]]])
    t = np.array([3])
    mask = np.ones((1, 2), dtype=bool)
    worst = _fd_check(model, codes, t, mask, targets)
    for name, err in worst.items():
        assert err < 1e-4, f"{name}: relative error {err}"


def test_key_bias_gradient_is_shift_invariant_zero():
    # adding a constant to every key cancels inside the row softmax
    model = _tiny_model()
    rng = as_generator(7)
    for v in model.params.values():
        v[...] = rng.normal(0.0, 0.3, size=v.shape)
    codes = np.array([[[0, 1], [2, 1]]])
    targets = np.array([[[2, 0], [1, 1]]])
    logits, cache = model.forward(codes, np.array([5]), want_cache=True)
    _, dlogits = loss_ce_with_grad(logits, targets)
    grads = model.backward(cache, dlogits)
    assert np.allclose(grads["l0.bk"], 0.0, atol=1e-15)
