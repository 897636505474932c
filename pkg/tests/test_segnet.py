import numpy as np
import pytest

from aeseg.objective import EmptyMaskError
from aeseg.segnet import (
    CheckpointError,
    ForwardMode,
    UNetConfig,
    backward,
    count_params,
    forward,
    forward_repeated,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from aeseg.segnet import layers as L

TINY = UNetConfig(in_channels=2, base_width=2, depth=1, dropout_rate=0.2, norm_enabled=False)


def _generic_params(cfg, seed=3):
    # nonzero biases keep every ReLU away from an exact kink
    ps = init_params(cfg, seed, np.float64)
    rng = np.random.default_rng(seed + 1)
    for v in ps.params.values():
        v += rng.normal(0, 0.1, v.shape)
    return ps


def _batch(cfg, n=2, size=8, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (n, cfg.in_channels, size, size))
    y = (rng.random((n, size, size)) > 0.5).astype(float)
    m = rng.random((n, size, size)) > 0.2
    x[:, :, ~m.any(0)] = 0
    return x, y, m


def finite_difference_check(ps, x, y, m, seed, h=1e-5):
    _, grads = backward(ps, x, y, m, rng_seed=seed)
    worst = 0.0
    for name, v in ps.params.items():
        g = grads[name]
        assert g.shape == v.shape
        flat = v.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            lp, _ = backward(ps, x, y, m, rng_seed=seed)
            flat[i] = old - h
            lm, _ = backward(ps, x, y, m, rng_seed=seed)
            flat[i] = old
            fd = (lp - lm) / (2 * h)
            an = g.reshape(-1)[i]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    return worst


def test_gradient_check_tiny_norm_off():
    x, y, m = _batch(TINY)
    assert finite_difference_check(_generic_params(TINY), x, y, m, seed=5) < 1e-5


def test_gradient_check_tiny_norm_on_train_mode():
    cfg = UNetConfig(2, 2, 1, 0.2, True)
    ps = _generic_params(cfg, 7)
    x, y, m = _batch(cfg, seed=1)
    _, grads = backward(ps, x, y, m, rng_seed=2)
    h = 1e-5
    for name, v in ps.params.items():
        flat = v.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            lp, _ = backward(ps, x, y, m, rng_seed=2)
            flat[i] = old - h
            lm, _ = backward(ps, x, y, m, rng_seed=2)
            flat[i] = old
            fd, an = (lp - lm) / (2 * h), grads[name].reshape(-1)[i]
            # conv biases ahead of normalisation have an exactly zero gradient
            assert abs(fd - an) <= 1e-5 * max(abs(fd), abs(an)) + 1e-9, name


def test_gradient_check_depth2():
    cfg = UNetConfig(3, 2, 2, 0.3, False)
    x, y, m = _batch(cfg, n=1, size=8, seed=4)
    assert finite_difference_check(_generic_params(cfg, 11), x, y, m, seed=9) < 1e-5


def test_empty_valid_mask():
    x, y, m = _batch(TINY)
    with pytest.raises(EmptyMaskError, match="empty valid mask"):
        backward(_generic_params(TINY), x, y, np.zeros_like(m), rng_seed=0)


def test_labels_at_invalid_pixels_ignored():
    ps = _generic_params(TINY)
    x, y, m = _batch(TINY)
    y2 = y.copy()
    y2[~m] = 1 - y2[~m]
    l1, g1 = backward(ps, x, y, m, rng_seed=3)
    l2, g2 = backward(ps, x, y2, m, rng_seed=3)
    assert l1 == l2
    for k in g1:
        assert np.array_equal(g1[k], g2[k])


def test_hand_count_smallest_network():
    cfg = UNetConfig(in_channels=1, base_width=1, depth=1, norm_enabled=False)
    # enc0: 3x3 1->1 twice (10 + 10); bottleneck: 1->2 (20), 2->2 (38)
    # dec0: up 2->1 (19), conv 2->1 (19), conv 1->1 (10); head 1->1 (2)
    assert count_params(cfg) == 10 + 10 + 20 + 38 + 19 + 19 + 10 + 2 == 128
    assert init_params(cfg).n_scalars() == 128


def _independent_count(cin, base, depth, norm):
    conv = lambda k, a, b: k * k * a * b + b
    nrm = (lambda c: 2 * c) if norm else (lambda c: 0)
    widths = [base * 2**i for i in range(depth + 1)]
    total = 0
    prev = cin
    for w in widths:
        total += conv(3, prev, w) + conv(3, w, w) + 2 * nrm(w)
        prev = w
    for w in reversed(widths[:-1]):
        total += conv(3, 2 * w, w) + nrm(w)  # upsample conv
        total += conv(3, 2 * w, w) + conv(3, w, w) + 2 * nrm(w)
    return total + conv(1, base, 1)


def test_default_count_matches_enumeration():
    cfg = UNetConfig()
    assert count_params(cfg) == _independent_count(64, 32, 3, True) == 2161473
    assert init_params(cfg).n_scalars() == count_params(cfg)


@pytest.mark.parametrize("depth", [1, 2, 3, 4])
def test_count_monotone_in_width(depth):
    for b in (1, 2, 4, 8):
        assert count_params(UNetConfig(base_width=2 * b, depth=depth)) > count_params(UNetConfig(base_width=b, depth=depth))


def test_init_params():
    a, b = init_params(UNetConfig(), 4), init_params(UNetConfig(), 4)
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])
        if k.endswith(".bias"):
            assert np.all(a.params[k] == 0)
    w = a.params["enc0.conv1.weight"].astype(np.float64)
    assert abs(w.mean()) < 0.01
    assert w.var() == pytest.approx(2 / (64 * 9), rel=0.2)
    assert np.all(a.params["enc0.conv1.norm.scale"] == 1) and np.all(a.params["enc0.conv1.norm.shift"] == 0)


def test_forward_shape_and_eval_determinism():
    ps = init_params(UNetConfig(base_width=4), 0)
    x = np.random.default_rng(0).uniform(-1, 1, (2, 64, 64, 64)).astype(np.float32)
    z1 = forward(ps, x, ForwardMode.EVAL)
    z2 = forward(ps, x, ForwardMode.EVAL)
    assert z1.shape == (2, 64, 64)
    assert np.all(np.isfinite(z1))
    assert np.array_equal(z1, z2)


@pytest.mark.parametrize("depth,size", [(1, 10), (2, 16), (3, 24), (4, 32)])
def test_alignment_all_depths(depth, size):
    cfg = UNetConfig(in_channels=3, base_width=2, depth=depth)
    ps = init_params(cfg, 1)
    x = np.zeros((1, 3, size if size % 2**depth == 0 else 2**depth * 2, 2**depth * 3))
    assert forward(ps, x).shape == (1,) + x.shape[2:]


def test_zero_head_gives_zero_logits():
    ps = init_params(UNetConfig(base_width=4), 0)
    ps.params["head.weight"][:] = 0
    ps.params["head.bias"][:] = 0
    x = np.random.default_rng(0).uniform(-1, 1, (1, 64, 16, 16)).astype(np.float32)
    assert np.all(forward(ps, x, ForwardMode.MC_DROPOUT, rng_seed=1) == 0)


def test_unpadded_input_rejected():
    ps = init_params(UNetConfig(base_width=2), 0)
    with pytest.raises(ValueError, match="pad"):
        forward(ps, np.zeros((1, 64, 12, 16), np.float32))


def test_mc_dropout_seed_determinism():
    ps = init_params(UNetConfig(base_width=4), 0)
    x = np.random.default_rng(1).uniform(-1, 1, (1, 64, 16, 16)).astype(np.float32)
    a = forward(ps, x, ForwardMode.MC_DROPOUT, rng_seed=7)
    b = forward(ps, x, ForwardMode.MC_DROPOUT, rng_seed=7)
    c = forward(ps, x, ForwardMode.MC_DROPOUT, rng_seed=8)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    with pytest.raises(ValueError, match="rng_seed"):
        forward(ps, x, ForwardMode.MC_DROPOUT)


def test_forward_repeated_matches_per_sample_forward():
    ps = init_params(UNetConfig(base_width=4), 2)
    x = np.random.default_rng(1).uniform(-1, 1, (1, 64, 16, 16)).astype(np.float32)
    seeds = [11, 12, 13]
    shared = forward_repeated(ps, x, seeds)
    for i, s in enumerate(seeds):
        np.testing.assert_allclose(shared[i], forward(ps, x, ForwardMode.MC_DROPOUT, rng_seed=[s])[0], rtol=1e-5, atol=1e-6)


def test_dropout_expectation_matches_eval_on_linear_probe():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (1, 6, 6, 8))
    w = rng.normal(0, 0.3, (3, 3, 8, 16))
    b = rng.normal(0, 0.1, 16)
    y, _ = L.conv3x3_forward(x, w, b)
    draws = 10_000
    gen = np.random.default_rng(1)
    acc = np.zeros_like(y)
    for _ in range(draws // 100):
        out, _ = L.spatial_dropout_forward(np.repeat(y, 100, axis=0), 0.2, gen)
        acc += out.sum(axis=0, keepdims=True)
    mean = acc / draws
    assert np.linalg.norm(mean - y) / np.linalg.norm(y) < 0.01
    # surviving channels are scaled by exactly 1/(1-r)
    out, mask = L.spatial_dropout_forward(y, 0.2, np.random.default_rng(3))
    assert set(np.unique(mask)) <= {0.0, 1 / 0.8}


@pytest.mark.parametrize(
    "fwd,bwd,shape",
    [
        (L.maxpool2_forward, L.maxpool2_backward, (2, 4, 6, 3)),
        (L.upsample2_forward, L.upsample2_backward, (2, 3, 2, 3)),
    ],
)
def test_layer_adjoints(fwd, bwd, shape):
    # <f(x), g> linear pieces: check gradient by finite differences on a random probe
    rng = np.random.default_rng(0)
    x = rng.normal(size=shape)
    out, cache = fwd(x)
    g = rng.normal(size=out.shape)
    dx = bwd(g, cache)
    h = 1e-6
    for idx in [tuple(rng.integers(0, s) for s in shape) for _ in range(20)]:
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        fd = ((fwd(xp)[0] * g).sum() - (fwd(xm)[0] * g).sum()) / (2 * h)
        assert fd == pytest.approx(dx[idx], abs=1e-6)


def test_checkpoint_roundtrip(tmp_path):
    ps = init_params(UNetConfig(base_width=4, depth=2, dropout_rate=0.3), 5)
    ps.buffers["enc0.conv1.norm.running_mean"][:] = 0.25
    n = save_checkpoint(ps, tmp_path / "m.aeunet")
    assert (tmp_path / "m.aeunet").read_bytes()[:8] == b"AEUNET1\x00"
    assert n == (tmp_path / "m.aeunet").stat().st_size
    back = load_checkpoint(tmp_path / "m.aeunet")
    assert back.config == ps.config
    for k in ps.params:
        assert np.array_equal(back.params[k], ps.params[k])
    for k in ps.buffers:
        assert np.array_equal(back.buffers[k], ps.buffers[k])


def test_checkpoint_errors(tmp_path):
    (tmp_path / "bad").write_bytes(b"XXXXXXXX" + bytes(40))
    with pytest.raises(CheckpointError, match="bad magic"):
        load_checkpoint(tmp_path / "bad")
    ps = init_params(UNetConfig(base_width=2, depth=1), 0)
    save_checkpoint(ps, tmp_path / "m")
    data = (tmp_path / "m").read_bytes()
    (tmp_path / "t").write_bytes(data[:-7])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "t")


def test_config_validation():
    for kwargs in ({"depth": 0}, {"depth": 6}, {"dropout_rate": 1.0}, {"base_width": 0}):
        with pytest.raises(ValueError):
            UNetConfig(**kwargs)
