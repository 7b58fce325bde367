import math
from decimal import Decimal, getcontext

import numpy as np
import pytest

from latentpomdp.env import Trajectory
from latentpomdp.latent_model import (DecoderParams, DynamicsParams, LatentModel, batch_loss, decode, dyn,
                                      grad, init_model, load_model, loss, loss_terms, pad_batch, save_model)

from oracles import gradient_check, loss_by_loops, smooth_instance


def model_of(W, b, A, c, lam=0.0, norm="l1"):
    return LatentModel(DecoderParams(W, b, lam), DynamicsParams(A, c), norm)


def zero_model(n, m, lam=0.0):
    return model_of(np.zeros((m, n)), np.zeros(m), np.zeros((3, n, n)), np.zeros((3, n)), lam)


def test_decode_examples():
    assert np.array_equal(decode(DecoderParams(np.zeros((1, 3)), [0.0]), [1, 2, 3]), [0.0])
    assert np.array_equal(decode(DecoderParams(np.eye(2), [0, 0]), [0.3, -0.7]), [0.3, -0.7])
    assert np.array_equal(decode(DecoderParams([[1, 2]], [0.5]), [1, -1]), [-0.5])
    with pytest.raises(ValueError):
        decode(DecoderParams([[1, 2]], [0.5]), [1, 2, 3])


def tanh_decimal(x: float) -> float:
    getcontext().prec = 50
    e = Decimal(2 * x).exp()
    return float((e - 1) / (e + 1))


def test_dyn_examples():
    g0 = DynamicsParams(np.zeros((3, 2, 2)), np.zeros((3, 2)))
    assert np.array_equal(dyn(g0, [0.4, -2.0], 1), [0, 0])
    gi = DynamicsParams(np.stack([np.eye(3)] * 3), np.zeros((3, 3)))
    out = dyn(gi, [0.1, 0.1, 0.1], 2)
    assert out == pytest.approx([tanh_decimal(0.1)] * 3, abs=1e-15)
    assert out[0] == pytest.approx(0.0996680, abs=1e-7)
    c = np.zeros((3, 2))
    c[0, 1] = 50.0
    sat = dyn(DynamicsParams(np.zeros((3, 2, 2)), c), [0.0, 0.0], 0)
    assert abs(sat[1] - 1.0) < 1e-9


def test_dyn_is_per_action():
    rng = np.random.default_rng(0)
    g = DynamicsParams(rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 4)))
    Z = rng.normal(size=(50, 4))
    a = rng.integers(0, 3, 50)
    batch = dyn(g, Z, a)
    for i in range(50):
        assert np.allclose(batch[i], np.tanh(g.A[a[i]] @ Z[i] + g.c[a[i]]), rtol=0, atol=1e-15)


def test_dyn_range_strictly_inside():
    rng = np.random.default_rng(1)
    g = DynamicsParams(rng.normal(0, 3, (3, 5, 5)), rng.normal(0, 3, (3, 5)))
    out = dyn(g, rng.normal(0, 0.3, (10000, 5)), rng.integers(0, 3, 10000))
    assert np.all(np.abs(out) < 1)


def test_loss_examples():
    tr = Trajectory([[0.3, -0.2], [-0.5, 0.1]], [0, 2])
    assert loss(tr, np.zeros((2, 3)), zero_model(3, 2)) == pytest.approx(0.3 + 0.2 + 0.5 + 0.1, abs=1e-15)
    # perfect reconstruction and dynamics
    g = DynamicsParams(np.zeros((3, 2, 2)), np.full((3, 2), 0.2))
    z1 = np.array([0.5, -0.5])
    z2 = np.tanh(np.full(2, 0.2))
    W = np.array([[1.0, 0.0]])
    tr = Trajectory([[0.5], [z2[0]]], [1, 1])
    assert loss(tr, np.stack([z1, z2]), LatentModel(DecoderParams(W, [0.0]), g)) == 0.0
    # one step: no dynamics term
    terms = loss_terms(Trajectory([[1.0]], [0]), [[5.0]], model_of([[1.0]], [0.0], np.ones((3, 1, 1)), np.zeros((3, 1))))
    assert terms["dynamics"] == 0.0 and terms["decoder"] == 4.0


def test_loss_matches_loop_oracle_and_decomposes():
    rng = np.random.default_rng(2)
    for _ in range(30):
        tr, zs, model = smooth_instance(rng, min_gap=0)
        for norm in ("l1", "l2"):
            model.norm = norm
            total = loss(tr, zs, model)
            assert total == pytest.approx(loss_by_loops(tr, zs, model), rel=1e-12)
            t = loss_terms(tr, zs, model)
            assert total == pytest.approx(t["decoder"] + t["dynamics"] + t["regularizer"], rel=1e-12)
            assert total >= 0


def test_loss_validates_alignment():
    model = zero_model(2, 1)
    with pytest.raises(ValueError):
        loss(Trajectory([[0.0], [1.0]], [0, 0]), np.zeros((3, 2)), model)
    with pytest.raises(ValueError):
        loss(Trajectory([[0.0]], [0]), [[np.nan, 0.0]], model)


def test_gradient_finite_differences():
    rng = np.random.default_rng(3)
    worst = max(gradient_check(*smooth_instance(rng), grad, loss) for _ in range(25))
    assert worst < 1e-4


def test_gradient_l2_norm_finite_differences():
    rng = np.random.default_rng(4)
    for _ in range(10):
        tr, zs, model = smooth_instance(rng)
        model.norm = "l2"
        assert gradient_check(tr, zs, model, grad, loss) < 1e-4


def test_gradient_zero_at_optimum():
    g = DynamicsParams(np.zeros((3, 2, 2)), np.full((3, 2), 0.2))
    z = np.stack([[0.5, -0.5], np.tanh([0.2, 0.2])])
    tr = Trajectory([[0.5], [z[1, 0]]], [1, 1])
    W = np.array([[1.0, 0.0]])
    gr = grad(tr, z, LatentModel(DecoderParams(W, [0.0]), g))
    for arr in (gr.Z, gr.W, gr.b, gr.A, gr.c):
        assert not np.any(arr)
    gr = grad(tr, z, LatentModel(DecoderParams(W, [0.0], lam=0.3), g))
    assert np.array_equal(gr.W, 2 * 0.3 * W)


def test_padded_batch_equals_single_losses():
    rng = np.random.default_rng(5)
    model = init_model(rng, 3, 1, 0.01, 0.5)
    trajs = [Trajectory(rng.normal(size=(k, 1)), rng.integers(0, 3, k)) for k in (1, 4, 9)]
    zs = [rng.normal(size=(len(t), 3)) for t in trajs]
    per = batch_loss(model, *pad_batch(trajs, zs))
    assert per == pytest.approx([loss(t, z, model) for t, z in zip(trajs, zs)], rel=1e-13)


def test_model_file_round_trip(tmp_path):
    model = init_model(np.random.default_rng(6), 5, 2, 1e-3, 0.7)
    save_model(tmp_path / "m.txt", model)
    lines = (tmp_path / "m.txt").read_text().splitlines()
    assert lines[0].split()[:2] == ["5", "2"]
    assert len(lines) == 1 + 2 + 1 + 3 * (5 + 1)
    back = load_model(tmp_path / "m.txt")
    assert np.array_equal(back.decoder.W, model.decoder.W)
    assert np.array_equal(back.dynamics.A, model.dynamics.A)
    assert np.array_equal(back.dynamics.c, model.dynamics.c)
    assert back.decoder.lam == model.decoder.lam


def test_shape_validation():
    with pytest.raises(ValueError):
        DecoderParams(np.zeros((2, 3)), np.zeros(3))
    with pytest.raises(ValueError):
        DynamicsParams(np.zeros((2, 3, 3)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        DecoderParams(np.zeros((1, 1)), [0.0], lam=-1)
