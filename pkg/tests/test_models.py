import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from _oracles import (TOY_SHAPE, as_float64, central_difference, scalar_loss_fn,
                      toy_classifier)
from singleclass.core import LabeledDataset, ParameterError, ShapeError
from singleclass.models import (CNNClassifier, TrainConfig, TrainingError,
                                UnsupportedArchitectureError, learning_rate, load_checkpoint,
                                momentum_sgd, save_checkpoint, smoothed_relu_grad,
                                train_classifier)


# --- smoothed ReLU derivative ------------------------------------------------------

def test_smoothed_relu_grad_printed_values():
    assert smoothed_relu_grad(0.0) == 0.0
    assert smoothed_relu_grad(1.0) == pytest.approx(1 / np.sqrt(1.0001), abs=1e-12)
    assert smoothed_relu_grad(-1.0) == pytest.approx(1 - 1 / np.sqrt(1.0001), abs=1e-12)
    assert smoothed_relu_grad(-1.0) == pytest.approx(5.0e-5, rel=1e-3)


def test_smoothed_relu_grad_swap_switch():
    assert smoothed_relu_grad(1.0, swap=True) == pytest.approx(1 + 1 / np.sqrt(1.0001))
    with pytest.raises(ParameterError):
        smoothed_relu_grad(1.0, tau=0)


@settings(max_examples=80, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50))
def test_smoothed_relu_grad_monotone_per_branch(a, b):
    lo, hi = sorted((a, b))
    if (lo < 0) == (hi < 0):
        assert smoothed_relu_grad(lo) <= smoothed_relu_grad(hi) + 1e-15


def test_surrogate_activation_is_antiderivative_of_h():
    from singleclass.models import _surrogate

    z = torch.linspace(-2, 2, 41, dtype=torch.float64)
    z = z[z.abs() > 1e-3]
    step = 1e-6
    fd = (_surrogate(z + step, 1e-4, False) - _surrogate(z - step, 1e-4, False)) / (2 * step)
    np.testing.assert_allclose(fd.numpy(), smoothed_relu_grad(z.numpy()), atol=1e-6)


# --- prediction contract -----------------------------------------------------------

def test_probabilities_normalized_and_argmax(rng):
    clf = toy_classifier(0)
    x = rng.uniform(0, 1, (5,) + TOY_SHAPE)
    p = clf.predict_proba(x)
    np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-5)
    assert (p >= 0).all()
    np.testing.assert_array_equal(clf.predict(x), [int(np.argmax(r)) for r in p])


def test_uniform_logits_give_uniform_probabilities():
    clf = toy_classifier(0)
    with torch.no_grad():
        clf.net_.fc.weight.zero_()
        clf.net_.fc.bias.zero_()
    np.testing.assert_allclose(clf.predict_proba(np.zeros(TOY_SHAPE)), 1 / 3)


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        toy_classifier(0).predict(np.zeros((3, 9, 9)))


def test_feature_maps_shape_and_homogeneity():
    clf = CNNClassifier(bias=False).initialize(TOY_SHAPE, 3)
    fm = clf.feature_maps(np.zeros(TOY_SHAPE))
    assert fm.shape == clf.last_conv_shape
    np.testing.assert_array_equal(fm, 0)


def test_feature_maps_match_hand_rolled_convolution(rng):
    net = torch.nn.Module()
    conv = torch.nn.Conv2d(1, 2, 3, padding=1, bias=False)
    net.features = torch.nn.Sequential(conv)
    net.fc = torch.nn.Linear(2, 2)
    net.forward = lambda x: net.fc(net.features(x).mean(dim=(2, 3)))
    clf = CNNClassifier.from_module(net, (1, 5, 5), 2)
    x = rng.uniform(0, 1, (1, 5, 5)).astype(np.float32)
    w = conv.weight.detach().numpy()
    padded = np.pad(x[0], 1)
    expected = np.zeros((2, 5, 5))
    for o in range(2):
        for i in range(5):
            for j in range(5):
                expected[o, i, j] = (padded[i:i + 3, j:j + 3] * w[o, 0]).sum()
    np.testing.assert_allclose(clf.feature_maps(x), expected, atol=1e-6)


def test_class_weights_reconstruct_logits(tiny_clf, tiny_data):
    x = tiny_data[1].images[:4]
    pooled = tiny_clf.feature_maps(x).mean(axis=(2, 3))
    logits = tiny_clf.decision_function(x)
    for y in range(tiny_clf.num_categories):
        w = tiny_clf.class_weights(y)
        assert len(w) == tiny_clf.last_conv_shape[0]
        np.testing.assert_allclose(pooled @ w + tiny_clf.class_bias(y), logits[:, y], atol=1e-5)


def test_class_weights_need_gap_head():
    net = torch.nn.Sequential(torch.nn.Flatten(), torch.nn.Linear(192, 3))
    clf = CNNClassifier.from_module(net, TOY_SHAPE, 3)
    with pytest.raises(UnsupportedArchitectureError):
        clf.class_weights(0)


# --- gradients -----------------------------------------------------------------------

def test_linear_model_class_score_gradient_is_weight(rng):
    lin = torch.nn.Linear(12, 2, bias=False)
    net = torch.nn.Sequential(torch.nn.Flatten(), lin)
    clf = CNNClassifier.from_module(net, (3, 2, 2), 2)
    g = clf.input_gradient(rng.uniform(0, 1, (3, 2, 2)), 1, kind="class_score")
    np.testing.assert_allclose(g.ravel(), lin.weight.detach().numpy()[1], atol=1e-7)


def test_cross_entropy_gradient_vanishes_at_confident_prediction():
    lin = torch.nn.Linear(12, 2)
    with torch.no_grad():
        lin.weight.zero_()
        lin.bias.copy_(torch.tensor([40.0, -40.0]))
    clf = CNNClassifier.from_module(torch.nn.Sequential(torch.nn.Flatten(), lin), (3, 2, 2), 2)
    assert np.linalg.norm(clf.input_gradient(np.ones((3, 2, 2)), 0)) <= 1e-4


@pytest.mark.parametrize("mode", ["exact", "smoothed"])
@pytest.mark.parametrize("kind", ["cross_entropy", "class_score"])
def test_input_gradient_matches_finite_differences(mode, kind, rng):
    worst = 0.0
    for seed in range(10):
        clf = toy_classifier(seed)
        x = np.random.default_rng(seed).uniform(0, 1, TOY_SHAPE)
        g = clf.input_gradient(x, seed % 3, kind=kind, mode=mode)
        fd = central_difference(scalar_loss_fn(as_float64(clf), seed % 3, kind, mode), x, 1e-5)
        worst = max(worst, np.abs(g - fd).max())
    assert worst <= 1e-3


def test_unknown_gradient_kind():
    with pytest.raises(ParameterError):
        toy_classifier(0).input_gradient(np.zeros(TOY_SHAPE), 0, kind="hinge")


# --- training -------------------------------------------------------------------------

def test_train_config_validation():
    with pytest.raises(ParameterError):
        TrainConfig(epochs=0)
    with pytest.raises(ParameterError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ParameterError):
        TrainConfig(lr_decay="cosine")


def test_learning_rate_schedules():
    cfg = TrainConfig(epochs=3, lr=0.1, lr_final=0.001)
    assert [round(learning_rate(cfg, e), 12) for e in range(3)] == [0.1, 0.01, 0.001]
    lin = TrainConfig(epochs=3, lr=0.1, lr_final=0.05, lr_decay="linear")
    assert learning_rate(lin, 1) == pytest.approx(0.075)


def test_momentum_sgd_matches_hand_recursion():
    # one weight, one sample, full batch: loss = CE([w*x, 0], 0)
    torch.manual_seed(0)
    net = torch.nn.Sequential(torch.nn.Linear(1, 2, bias=False))
    with torch.no_grad():
        net[0].weight.copy_(torch.tensor([[0.5], [0.0]]))
    X = torch.tensor([[1.0]])
    y = torch.tensor([0])
    cfg = TrainConfig(epochs=2, batch_size=1, lr=0.1, lr_decay="constant", momentum=0.9,
                      weight_decay=0.0)
    momentum_sgd(net, X, y, cfg)
    w0, w1, v0, v1 = 0.5, 0.0, 0.0, 0.0
    for _ in range(2):
        p0 = np.exp(w0) / (np.exp(w0) + np.exp(w1))
        g0, g1 = p0 - 1, 1 - p0
        v0, v1 = 0.9 * v0 - g0, 0.9 * v1 - g1
        w0, w1 = w0 + 0.1 * v0, w1 + 0.1 * v1
    np.testing.assert_allclose(net[0].weight.detach().numpy().ravel(), [w0, w1], atol=1e-7)


def test_training_is_deterministic(tiny_data):
    train, test = tiny_data
    cfg = TrainConfig(epochs=1, batch_size=16)
    a = train_classifier(train, cfg, heldout=test)
    b = train_classifier(train, cfg, heldout=test)
    assert a.checksum() == b.checksum()
    assert a.heldout_accuracy_ == b.heldout_accuracy_


def test_training_learns_separable_pair():
    from sklearn.linear_model import LogisticRegression

    from singleclass.data import make_shapes

    # opaque red disc vs opaque green square
    kw = dict(num_categories=2, opacity=1.0)
    train = make_shapes(40, 1, **kw)
    test = make_shapes(20, 1, "test", **kw)
    # linear probe on channel means confirms the pair is separable
    feats = lambda d: d.images.mean(axis=(2, 3))
    probe = LogisticRegression(max_iter=1000).fit(feats(train), train.labels)
    assert probe.score(feats(test), test.labels) == 1.0
    clf = train_classifier(train, TrainConfig(epochs=5, batch_size=16), heldout=test)
    assert clf.heldout_accuracy_ >= 0.95


def test_divergence_reports_iteration():
    data = LabeledDataset(np.full((4, 3, 8, 8), np.nan), np.array([0, 1, 0, 1]), 2)
    with pytest.raises(TrainingError, match="iteration 0"):
        train_classifier(data, TrainConfig(epochs=1), heldout=data.subset([0, 1]))


def test_training_needs_train_split(tiny_data):
    with pytest.raises(ParameterError):
        train_classifier(tiny_data[1], TrainConfig(epochs=1))


def test_sklearn_estimator_contract(tiny_data):
    train, test = tiny_data
    est = CNNClassifier(epochs=1, batch_size=16)
    assert clone(est).get_params() == est.get_params()
    est.fit(train.images, train.labels)
    assert est.predict(test.images).shape == (len(test),)
    assert 0 <= est.score(test.images, test.labels) <= 1


def test_checkpoint_roundtrip(tmp_path, tiny_clf, tiny_data):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, tiny_clf, extra={"note": 1})
    back = load_checkpoint(path)
    assert back.checksum() == tiny_clf.checksum()
    np.testing.assert_array_equal(back.predict_proba(tiny_data[1].images),
                                  tiny_clf.predict_proba(tiny_data[1].images))
    m = back.manifest_
    assert m["architecture"] == "cnn-small" and m["note"] == 1
    assert m["accuracy"] == tiny_clf.heldout_accuracy_


def test_copy_is_independent(tiny_clf):
    other = tiny_clf.copy()
    with torch.no_grad():
        next(other.net_.parameters()).add_(1.0)
    assert other.checksum() != tiny_clf.checksum()
