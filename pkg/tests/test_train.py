import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segmini import model as M, ops, train as T
from segmini.data import synth_dataset
from segmini.errors import DataError, ShapeError
from segmini.ops import ConvParams


def hyper(**kw):
    base = dict(learning_rate=0.01, momentum=0.9, batch_size=4, epochs=1, seed=0)
    base.update(kw)
    return T.Hyperparams(**base)


# -- loss ----------------------------------------------------------------------

def test_ce_perfect_prediction_is_zero():
    p = np.zeros((1, 2, 2, 2), np.float64)
    p[0, 1] = 1
    loss, _ = T.cross_entropy_pixelwise(p, np.ones((2, 2), np.uint8))
    assert loss == 0.0


def test_ce_uniform_is_ln2():
    p = np.full((1, 2, 3, 3), 0.5)
    loss, _ = T.cross_entropy_pixelwise(p, np.zeros((3, 3), np.uint8))
    assert loss == pytest.approx(math.log(2))


def test_ce_gradient_example():
    p = np.zeros((1, 2, 1, 4))
    p[0, 0], p[0, 1] = 0.25, 0.75
    _, g = T.cross_entropy_pixelwise(p, np.zeros((1, 4), np.uint8))
    np.testing.assert_allclose(g[0, :, 0, 0], [-0.75 / 4, 0.75 / 4])


def test_ce_class_weights_scale_pixels():
    p = np.full((1, 2, 1, 2), 0.5)
    t = np.array([[0, 1]], np.uint8)
    loss, g = T.cross_entropy_pixelwise(p, t, (1.0, 3.0))
    assert loss == pytest.approx((1 + 3) * math.log(2) / 2)
    assert g[0, 0, 0, 1] == pytest.approx(3 * 0.5 / 2)


def test_ce_rejects_bad_label():
    with pytest.raises(DataError):
        T.cross_entropy_pixelwise(np.full((1, 2, 1, 1), 0.5), np.array([[2]]))


def test_ce_rejects_shape_mismatch():
    with pytest.raises(ShapeError):
        T.cross_entropy_pixelwise(np.full((1, 2, 2, 2), 0.5), np.zeros((3, 3), np.uint8))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_fused_gradient_matches_composition(seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((2, 3, 3, 4)) * 3
    t = rng.integers(0, 3, (2, 3, 4))
    w = rng.uniform(0.5, 2.0, 3)
    probs, cache = ops.forward("softmax", logits)
    _, fused = T.cross_entropy_pixelwise(probs, t, w)
    # d loss / d probs, then through the softmax Jacobian
    count = t.size
    onehot = np.eye(3)[t].transpose(0, 3, 1, 2)
    d_probs = -onehot * w[t][:, None] / (probs * count)
    composed, _ = ops.backward("softmax", cache, d_probs)
    assert np.abs(fused - composed).max() < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_loss_non_negative(seed):
    rng = np.random.default_rng(seed)
    probs, _ = ops.forward("softmax", rng.standard_normal((1, 4, 3, 3)))
    loss, _ = T.cross_entropy_pixelwise(probs, rng.integers(0, 4, (3, 3)))
    assert loss > 0


# -- optimizer -----------------------------------------------------------------

def test_sgd_plain_step():
    p, v = T.sgd_step([np.array([1.0])], [np.array([1.0])], [np.zeros(1)], hyper(learning_rate=0.1, momentum=0))
    assert p[0][0] == pytest.approx(0.9) and v[0][0] == pytest.approx(-0.1)


def test_sgd_zero_gradient_is_noop():
    p0 = np.array([1.5, -2.0])
    p, v = T.sgd_step([p0], [np.zeros(2)], [np.zeros(2)], hyper())
    assert np.array_equal(p[0], p0) and np.array_equal(v[0], np.zeros(2))


def test_sgd_momentum_two_steps():
    h = hyper(learning_rate=0.1, momentum=0.9)
    p, v = [np.array([0.0])], [np.zeros(1)]
    p1, v = T.sgd_step(p, [np.ones(1)], v, h)
    p2, v = T.sgd_step(p1, [np.ones(1)], v, h)
    assert p1[0][0] == pytest.approx(-0.1)
    assert p2[0][0] - p1[0][0] == pytest.approx(-0.19)


def test_sgd_shape_mismatch():
    with pytest.raises(ShapeError):
        T.sgd_step([np.zeros(2)], [np.zeros(3)], [np.zeros(2)], hyper())


@pytest.mark.parametrize("kw", [dict(learning_rate=-1), dict(momentum=1.0), dict(batch_size=0),
                                dict(epochs=0), dict(class_weights=(1, 0)), dict(holdout_fraction=1.0)])
def test_hyperparams_validation(kw):
    with pytest.raises(ValueError):
        hyper(**kw)


# -- training loop -------------------------------------------------------------

@pytest.fixture(scope="module")
def small():
    ds = synth_dataset("ball", 10, 16, 16, 5)
    cfg = M.default_config(2, (4, 4, 8, 8))
    return ds, cfg


def test_split_holdout_deterministic():
    h = hyper(seed=4, holdout_fraction=0.1)
    tr, ho = T.split_holdout(220, h)
    assert len(ho) == 22 and len(tr) == 198 and not set(tr) & set(ho)
    assert T.split_holdout(220, h) == (tr, ho)


def test_train_is_deterministic(small):
    ds, cfg = small
    h = hyper(epochs=2, seed=9)
    m1, r1 = T.train(M.init_model(cfg, 1), ds, h)
    m2, r2 = T.train(M.init_model(cfg, 1), ds, h)
    assert M.dumps_model(m1) == M.dumps_model(m2)
    assert r1 == r2


def test_train_lr_zero_leaves_trainables(small):
    ds, cfg = small
    m0 = M.init_model(cfg, 1)
    m1, _ = T.train(m0, ds, hyper(learning_rate=0.0, epochs=2))
    for (_, _, a), (_, _, b) in zip(m0.trainable(), m1.trainable()):
        assert np.array_equal(a, b)


def test_initial_loss_near_ln2(small):
    ds, cfg = small
    _, report = T.train(M.init_model(cfg, 2), ds, hyper(learning_rate=0.0))
    assert abs(report.epochs[0].loss - math.log(2)) < 0.2


def test_train_report_ranges(small):
    ds, cfg = small
    _, report = T.train(M.init_model(cfg, 2), ds, hyper(epochs=2))
    assert len(report.epochs) == 2 and len(report.holdout) == 1
    for e in report.epochs:
        assert e.loss >= 0 and 0 <= e.pixel_accuracy <= 1 and all(0 <= v <= 1 for v in e.iou)
    assert report.to_kv()[0].startswith("epoch=1 ")


def test_train_callback_sees_every_epoch(small):
    ds, cfg = small
    seen = []
    T.train(M.init_model(cfg, 2), ds, hyper(epochs=3), callback=lambda s: seen.append(s.epoch))
    assert seen == [1, 2, 3]


def test_train_rejects_empty_dataset(small):
    ds, cfg = small
    with pytest.raises(DataError):
        T.train(M.init_model(cfg, 0), ds.subset([]), hyper())


def test_train_rejects_class_count_mismatch(small):
    ds, _ = small
    with pytest.raises(DataError):
        T.train(M.init_model(M.default_config(3, (4, 4, 8, 8)), 0), ds, hyper())


def test_report_matches_holdout_evaluation(small):
    ds, cfg = small
    m, report = T.train(M.init_model(cfg, 2), ds, hyper(epochs=2))
    res = T.evaluate_model(m, ds.subset(report.holdout))
    assert res.pixel_accuracy == report.final.pixel_accuracy and res.iou == report.final.iou


# -- gradient checking ---------------------------------------------------------

def _pointwise_grads(x, w, b, t):
    out, c1 = ops.forward("pointwise", x, ConvParams(w, b))
    probs, _ = ops.forward("softmax", out)
    loss, g = T.cross_entropy_pixelwise(probs, t)
    _, grads = ops.backward("pointwise", c1, g)
    return loss, grads


def test_grad_check_linear_pointwise_case():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 3, 4, 4))
    w = rng.standard_normal((2, 3, 1, 1))
    b = rng.standard_normal(2)
    t = rng.integers(0, 2, (1, 4, 4))
    _, grads = _pointwise_grads(x, w, b, t)

    def loss():
        return _pointwise_grads(x, w, b, t)[0]

    num_w = T.numeric_gradient(loss, w, 1e-3)
    num_b = T.numeric_gradient(loss, b, 1e-3)
    a = np.concatenate([grads["weights"].ravel(), grads["bias"].ravel()])
    n = np.concatenate([num_w.ravel(), num_b.ravel()])
    assert T._norm_error(a, n) < 1e-6


def _tiny(seed=5):
    cfg = M.default_config(2, (2, 4, 4, 4))
    rng = np.random.default_rng([seed, 1])
    x = rng.random((2, 3, 8, 8))
    y = (rng.random((2, 8, 8)) < 0.3).astype(np.uint8)
    return cfg, x, y


def test_grad_check_sign_flip_scores_two():
    cfg, x, y = _tiny()
    m = M.init_model(cfg, 5)

    def flipped(model, image, target, weights):
        loss, grads = T.model_gradients(model, image, target, weights)
        return loss, [None if g is None else {k: -v for k, v in g.items()} for g in grads]

    assert T.grad_check(m, x, y, grad_fn=flipped) == pytest.approx(2.0, abs=1e-3)


def test_grad_check_tiny_default_architecture():
    cfg, x, y = _tiny()
    m = M.init_model(cfg, 5)
    assert T.kink_crossings(m, x) == 0
    assert T.grad_check(m, x, y) < 1e-4


def test_grad_check_unknown_reduction():
    cfg, x, y = _tiny()
    with pytest.raises(ValueError):
        T.grad_check(M.init_model(cfg, 5), x, y, reduction="median")


def test_relative_error_floor():
    assert T.relative_error(0.0, 0.0).item() == 0.0
    assert T.relative_error(1.0, -1.0).item() == 2.0
