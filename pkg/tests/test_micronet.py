import math

import numpy as np
import pytest

from oracles import conv2d
from sigmetric.config import TrainConfig
from sigmetric.errors import ImageTooSmall, NonFiniteGradient, ShapeMismatch
from sigmetric.metric import LossWeights, mine_multi_similarity
from sigmetric.micronet import (
    OptState,
    compute_loss,
    conv_backward,
    conv_forward,
    forward,
    grad_check,
    init_opt_state,
    init_params,
    loss_and_grads,
    param_shapes,
    rmsprop_step,
)


def zero_params(num_labels=4):
    return {k: np.zeros(s) for k, s in param_shapes(num_labels).items()}


class TestInit:
    def test_deterministic(self):
        a, b = init_params(7, 5), init_params(7, 5)
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_seed_sensitive(self):
        a, b = init_params(1, 5), init_params(2, 5)
        assert any(not np.array_equal(a[k], b[k]) for k in a)

    def test_classifier_shape(self):
        assert init_params(0, 20)["classifier.w"].shape == (128, 20)

    def test_biases_zero_and_he_scale(self):
        p = init_params(0, 10)
        assert all(not np.any(p[k]) for k in p if k.endswith(".b"))
        w = p["embed.fc2.w"]
        assert abs(w.std() - math.sqrt(2 / 128)) < 0.01

    def test_param_count_depends_only_on_labels(self):
        count = lambda n: sum(v.size for v in init_params(n, n).values())
        assert count(20) - count(10) == 10 * 129


class TestConv:
    @pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (2, 0, 1)])
    def test_matches_direct_convolution(self, rng, stride, pad, k):
        x = rng.normal(size=(2, 3, 7, 9))
        w = rng.normal(size=(4, 3, k, k))
        b = rng.normal(size=4)
        out, _ = conv_forward(x, w, b, stride, pad)
        for n in range(2):
            np.testing.assert_allclose(out[n], conv2d(x[n], w, b, stride, pad), rtol=1e-10, atol=1e-12)

    def test_backward_is_adjoint(self, rng):
        x = rng.normal(size=(2, 3, 6, 5))
        w = rng.normal(size=(4, 3, 3, 3))
        out, cache = conv_forward(x, w, np.zeros(4), 2, 1)
        dout = rng.normal(size=out.shape)
        dx, dw, _ = conv_backward(dout, cache)
        # <conv(x), dout> == <x, conv^T(dout)>
        assert np.isclose(np.sum(out * dout), np.sum(x * dx))
        assert np.isclose(np.sum(out * dout), np.sum(w * dw))

    def test_stem_doubling_weight_changes_output(self, rng):
        p = init_params(3, 4)
        img = rng.random((1, 8, 8, 3))
        stem, _ = conv_forward(img.transpose(0, 3, 1, 2), p["stem.w"], p["stem.b"], 1, 1)
        np.testing.assert_allclose(stem[0], conv2d(img[0].transpose(2, 0, 1), p["stem.w"],
                                                   p["stem.b"], 1, 1), rtol=1e-10, atol=1e-12)
        before = forward(p, img)[0]
        q = dict(p)
        q["stem.w"] = p["stem.w"].copy()
        q["stem.w"][0, 0, 1, 1] *= 2
        doubled, _ = conv_forward(img.transpose(0, 3, 1, 2), q["stem.w"], q["stem.b"], 1, 1)
        np.testing.assert_allclose(doubled[0], conv2d(img[0].transpose(2, 0, 1), q["stem.w"],
                                                      q["stem.b"], 1, 1), rtol=1e-10, atol=1e-12)
        assert not np.array_equal(before, forward(q, img)[0])


class TestForward:
    def test_zero_params_zero_outputs(self, rng):
        emb, logits = forward(zero_params(), rng.random((3, 8, 8, 3)))
        assert not np.any(emb) and not np.any(logits)

    def test_batch_of_32(self, rng):
        emb, logits = forward(init_params(0, 20), rng.random((32, 16, 64, 3)))
        assert emb.shape == (32, 128) and logits.shape == (32, 20)

    def test_deterministic(self, rng):
        p = init_params(0, 5)
        x = rng.random((4, 3, 16, 3))
        a, b = forward(p, x), forward(p, x, train_mode=True)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_bad_shapes(self, rng):
        p = init_params(0, 5)
        with pytest.raises(ShapeMismatch):
            forward(p, rng.random((2, 8, 8)))
        with pytest.raises(ImageTooSmall):
            forward(p, rng.random((2, 4, 1, 3)))
        q = dict(p)
        q["feature.w"] = np.zeros((3, 3))
        with pytest.raises(ShapeMismatch):
            forward(q, rng.random((2, 8, 8, 3)))


class TestLoss:
    def test_uniform_logits_ln_c(self, rng):
        p = init_params(0, 7)
        p["classifier.w"][:] = 0
        cfg = TrainConfig(weights=LossWeights(alpha=0.0, beta=1.0))
        loss, _ = loss_and_grads(p, rng.random((4, 3, 8, 3)), np.array([0, 0, 3, 3]), cfg)
        assert abs(loss - math.log(7)) < 1e-12

    def test_inactive_hinge_zero_triplet_path(self, rng):
        # classes far apart in input space -> pick a net where margins are satisfied
        p = init_params(0, 2)
        cfg = TrainConfig(weights=LossWeights(alpha=1.0, beta=0.0, delta=0.0))
        x = np.concatenate([np.zeros((2, 3, 8, 3)), np.ones((2, 3, 8, 3))])
        y = np.array([0, 0, 1, 1])
        loss, grads = loss_and_grads(p, x, y, cfg)
        # identical positives: d(a,p) = 0 <= d(a,n), so every hinge is inactive
        assert loss == 0.0
        assert all(not np.any(g) for g in grads.values())

    def test_zero_params_collapse(self, rng):
        cfg = TrainConfig(weights=LossWeights(alpha=1.0, beta=0.0))
        r = compute_loss(zero_params(), rng.random((6, 3, 8, 3)), np.array([0, 0, 1, 1, 2, 2]), cfg)
        assert r.triplet == pytest.approx(0.1)

    def test_grad_shapes(self, rng):
        p = init_params(1, 3)
        _, g = loss_and_grads(p, rng.random((6, 3, 8, 3)), np.array([0, 0, 1, 1, 2, 2]), TrainConfig())
        assert {k: v.shape for k, v in g.items()} == {k: v.shape for k, v in p.items()}


class TestGradCheck:
    def test_quadratic_hook(self):
        theta = {"w": np.array([0.3, -1.7, 2.0])}
        objective = lambda q: (float(np.sum(q["w"] ** 2)), {"w": 2 * q["w"]})
        err = grad_check(theta, None, None, TrainConfig(), 3, 1e-3, objective=objective)
        assert err < 1e-10

    def test_rejects_zero_step(self, rng):
        with pytest.raises(ValueError):
            grad_check(init_params(0, 2), rng.random((2, 3, 8, 3)), np.array([0, 1]),
                       TrainConfig(), 5, 0.0)

    @pytest.mark.parametrize("seed", [0, 1])
    def test_network(self, seed):
        rng = np.random.default_rng(seed)
        p = init_params(seed, 4)
        x = rng.random((8, 3, 16, 3))
        y = np.repeat(np.arange(4), 2)
        cfg = TrainConfig(weights=LossWeights(alpha=1.0, beta=0.0))
        res = grad_check(p, x, y, cfg, 60, 1e-3, seed=seed, details=True)
        assert res.checked == 60
        assert res.max_relative_error < 1e-4

    def test_small_step_needs_no_redraw(self, rng):
        p = init_params(5, 3)
        x = rng.random((6, 3, 8, 3))
        y = np.array([0, 0, 1, 1, 2, 2])
        assert grad_check(p, x, y, TrainConfig(), 40, 1e-6, kinks="keep") < 1e-4


class TestRmsprop:
    def test_zero_gradient(self):
        p = {"w": np.array([1.0, -2.0])}
        state = OptState({"w": np.array([0.4, 0.1])})
        new_p, new_s = rmsprop_step(p, {"w": np.zeros(2)}, state, 1e-3)
        assert np.array_equal(new_p["w"], p["w"])
        np.testing.assert_allclose(new_s.v["w"], [0.36, 0.09])
        assert new_s.step == 1

    def test_hand_update(self):
        p = {"w": np.array([1.0])}
        new_p, new_s = rmsprop_step(p, {"w": np.array([0.5])}, init_opt_state(p), 1e-3)
        v = 0.9 * 0 + 0.1 * 0.25
        assert new_s.v["w"][0] == pytest.approx(0.025, abs=1e-15)
        expected = 1 - 1e-3 * 0.5 / (math.sqrt(v) + 1e-8)
        assert new_p["w"][0] == pytest.approx(expected, abs=1e-15)
        assert new_p["w"][0] == pytest.approx(0.99683772, abs=1e-8)

    def test_deterministic_and_pure(self, rng):
        p = init_params(0, 3)
        g = {k: rng.normal(size=v.shape) for k, v in p.items()}
        s = init_opt_state(p)
        a = rmsprop_step(p, g, s, 1e-3)
        b = rmsprop_step(p, g, s, 1e-3)
        assert all(np.array_equal(a[0][k], b[0][k]) for k in p)
        assert not np.any(s.v["stem.w"])
        assert all(a[0][k].shape == p[k].shape for k in p)

    def test_errors(self):
        p = {"w": np.ones(2)}
        with pytest.raises(NonFiniteGradient):
            rmsprop_step(p, {"w": np.array([np.inf, 0])}, init_opt_state(p), 1e-3)
        with pytest.raises(ShapeMismatch):
            rmsprop_step(p, {"w": np.ones(3)}, init_opt_state(p), 1e-3)
