import math

import numpy as np
import pytest

from semb import tensor as T
from semb.encoder import (
    PARAM_NAMES,
    EncoderConfig,
    EncoderParams,
    FeatureSequence,
    embed,
    encode,
    encode_batch,
    init_params,
    lstm_step,
    swap_directions,
)
from semb.losses import DistanceKind, pnl_batch, tl_batch_naive, tl_batch_semihard

from gradcheck import numeric_grad, rel_error


def make_seqs(n, steps, dim, seed=0, speakers=None):
    rng = np.random.default_rng(seed)
    speakers = speakers or [i % 2 for i in range(n)]
    return [FeatureSequence(rng.normal(size=(steps, dim)), speakers[i], i) for i in range(n)]


def test_init_is_deterministic():
    cfg = EncoderConfig(5, 3, 4, seed=11)
    a, b = init_params(cfg), init_params(cfg)
    for k in PARAM_NAMES:
        np.testing.assert_array_equal(a.arrays[k], b.arrays[k])


def test_different_seeds_differ():
    a = init_params(EncoderConfig(5, 3, 4, seed=1))
    b = init_params(EncoderConfig(5, 3, 4, seed=2))
    assert not np.array_equal(a.arrays["fwd_w_x"], b.arrays["fwd_w_x"])


def test_fan_in_bound_and_forget_bias():
    cfg = EncoderConfig(7, 5, 3, seed=0)
    p = init_params(cfg)
    for name, arr in p.arrays.items():
        if name.endswith("_b"):
            continue
        assert np.abs(arr).max() <= 1 / math.sqrt(arr.shape[0])
    for prefix in ("fwd", "bwd"):
        b = p.arrays[f"{prefix}_b"]
        np.testing.assert_array_equal(b[5:10], 1.0)
        assert np.count_nonzero(b) == 5


def test_config_rejects_zero_dims():
    with pytest.raises(ValueError):
        EncoderConfig(0, 4, 4)


def _zero_params(cfg):
    return EncoderParams(cfg, {k: np.zeros(s) for k, s in cfg.param_shapes().items()})


def test_lstm_step_zero_weights_gives_zero_state():
    cfg = EncoderConfig(3, 2, 2)
    h, c = lstm_step(_zero_params(cfg), "fwd", np.array([1.0, -4.0, 9.0]), np.zeros(2), np.zeros(2))
    np.testing.assert_array_equal(h.data, [0.0, 0.0])


def test_lstm_step_scalar_oracle():
    cfg = EncoderConfig(1, 1, 1)
    p = init_params(cfg)
    w = np.array([0.3, -0.7, 0.5, 0.9])
    u = np.array([-0.2, 0.4, 0.8, -0.6])
    b = np.array([0.1, 1.0, -0.3, 0.2])
    arrays = dict(p.arrays)
    arrays["fwd_w_x"], arrays["fwd_w_h"], arrays["fwd_b"] = w[None], u[None], b
    p = p.replace(arrays)
    x, h0, c0 = 0.75, -0.4, 0.6

    def sig(z):
        return 1 / (1 + math.exp(-z))

    pre = [w[k] * x + u[k] * h0 + b[k] for k in range(4)]
    i, f, o, g = sig(pre[0]), sig(pre[1]), sig(pre[2]), math.tanh(pre[3])
    c = f * c0 + i * g
    h = o * math.tanh(c)
    h_t, c_t = lstm_step(p, "fwd", np.array([x]), np.array([h0]), np.array([c0]))
    assert abs(h_t.item() - h) < 1e-12
    assert abs(c_t.item() - c) < 1e-12


def test_lstm_step_state_range():
    cfg = EncoderConfig(4, 6, 2, seed=3)
    p = init_params(cfg)
    rng = np.random.default_rng(0)
    h, c = np.zeros(6), np.zeros(6)
    for _ in range(20):
        h, c = lstm_step(p, "bwd", rng.normal(size=4) * 5, h, c)
        assert np.all(np.abs(h.data) < 1)
        h, c = h.data, c.data


def test_lstm_step_shape_error():
    p = init_params(EncoderConfig(3, 2, 2))
    with pytest.raises(T.ShapeError):
        lstm_step(p, "fwd", np.zeros(3), np.zeros(3), np.zeros(3))


def test_encode_unit_norm_and_deterministic():
    p = init_params(EncoderConfig(4, 3, 5, seed=2))
    for seq in make_seqs(6, 7, 4, seed=1):
        e = encode(p, seq)
        assert e.shape == (5,)
        assert abs(np.linalg.norm(e) - 1) <= 1e-9
        np.testing.assert_array_equal(e, encode(p, seq))


def test_encode_single_frame():
    p = init_params(EncoderConfig(4, 3, 5, seed=2))
    seq = FeatureSequence(np.ones((1, 4)), 0)
    assert abs(np.linalg.norm(encode(p, seq)) - 1) <= 1e-9


def test_encode_rejects_bad_input():
    p = init_params(EncoderConfig(4, 3, 5))
    with pytest.raises(T.DomainError):
        FeatureSequence(np.zeros((0, 4)), 0)
    with pytest.raises(T.ShapeError):
        encode(p, FeatureSequence(np.zeros((3, 5)), 0))
    with pytest.raises(T.ShapeError, match="sequence 1"):
        encode_batch(p, [FeatureSequence(np.zeros((3, 4)), 0), FeatureSequence(np.zeros((3, 5)), 0)])


def test_encode_batch_matches_per_item():
    p = init_params(EncoderConfig(4, 3, 5, seed=2))
    seqs = make_seqs(5, 6, 4) + make_seqs(3, 9, 4, seed=5)
    batch = encode_batch(p, seqs)
    loop = np.stack([encode(p, s) for s in seqs])
    # BLAS picks different kernels for 1-row and n-row products
    np.testing.assert_allclose(batch, loop, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(encode_batch(p, seqs[:1])[0], encode(p, seqs[0]))


def test_encode_batch_is_order_preserving():
    p = init_params(EncoderConfig(4, 3, 5, seed=2))
    seqs = make_seqs(4, 6, 4) + make_seqs(3, 8, 4, seed=9)
    perm = np.random.default_rng(0).permutation(len(seqs))
    a = encode_batch(p, seqs)
    b = encode_batch(p, [seqs[i] for i in perm])
    np.testing.assert_allclose(b, a[perm], rtol=0, atol=1e-12)


def test_time_reversal_symmetry():
    p = init_params(EncoderConfig(3, 4, 2, seed=8))
    for seq in make_seqs(4, 6, 3, seed=3):
        rev = FeatureSequence(seq.frames[::-1], seq.speaker_id)
        np.testing.assert_allclose(encode(swap_directions(p), rev), encode(p, seq), rtol=0, atol=1e-12)


# --- end-to-end gradient checks ----------------------------------------------


def _flat_check(params, loss_fn, tol=1e-4, step=1e-5):
    """Compare tape gradients of every parameter with central differences."""
    leaves = params.leaves()
    T.backward(loss_fn(leaves))
    worst = 0.0
    for name in PARAM_NAMES:
        def scalar(x, name=name):
            consts = params.constants()
            consts[name] = T.Tensor(x)
            return loss_fn(consts).item()

        num = numeric_grad(scalar, params.arrays[name], step)
        worst = max(worst, rel_error(leaves[name].grad, num))
    assert worst < tol, worst
    return worst


def _episode(seed, hidden=3, steps=5, dim=3, emb=4):
    params = init_params(EncoderConfig(dim, hidden, emb, seed=seed))
    labels = [0, 0, 1, 1, 2, 2]
    seqs = make_seqs(6, steps, dim, seed=100 + seed, speakers=labels)
    return params, seqs, labels


@pytest.mark.parametrize("dist", ["euc", "cos"])
def test_encoder_pnl_gradient(dist):
    params, seqs, labels = _episode(0)
    support, query = seqs[0::2], seqs[1::2]

    def loss(leaves):
        return pnl_batch(embed(leaves, support), labels[0::2], embed(leaves, query), labels[1::2], dist)

    _flat_check(params, loss)


@pytest.mark.parametrize("fn", [tl_batch_naive, tl_batch_semihard])
def test_encoder_tl_gradient(fn):
    params, seqs, labels = _episode(1)

    def loss(leaves):
        # margin large enough that every hinge is active, away from the kink
        return fn(embed(leaves, seqs), labels, 3.0, DistanceKind.SQEUCLIDEAN)

    _flat_check(params, loss)


def test_mixed_length_batch_gradient():
    params = init_params(EncoderConfig(2, 2, 3, seed=4))
    seqs = make_seqs(2, 4, 2, seed=1, speakers=[0, 1]) + make_seqs(2, 6, 2, seed=2, speakers=[0, 1])
    w = np.random.default_rng(0).normal(size=(4, 3))
    _flat_check(params, lambda leaves: T.sum(T.mul(embed(leaves, seqs), T.Tensor(w))))
