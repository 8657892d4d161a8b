import numpy as np
import pytest

from stratum import models


def finite_difference(model, X, y, weights, wd, eps=1e-6):
    theta = model.flat()
    grad = np.empty_like(theta)
    for i in range(theta.size):
        up, down = theta.copy(), theta.copy()
        up[i] += eps
        down[i] -= eps
        lu = models.weighted_loss_grad(model.with_flat(up), X, y, weights, wd)[0]
        ld = models.weighted_loss_grad(model.with_flat(down), X, y, weights, wd)[0]
        grad[i] = (lu - ld) / (2 * eps)
    return grad


def random_case(seed):
    rng = np.random.default_rng(seed)
    kind = models.MLP if seed % 2 else models.LINEAR
    d, C, n = rng.integers(1, 5), rng.integers(2, 4), rng.integers(1, 9)
    model = models.init_classifier(kind, d, C, seed, hidden=int(rng.integers(2, 6)))
    X = rng.normal(size=(n, d))
    y = rng.integers(0, C, size=n)
    weights = rng.uniform(0, 1, size=n)
    return model, X, y, weights, float(rng.uniform(0, 0.5))


def check_gradient(seed):
    model, X, y, weights, wd = random_case(seed)
    _, grads = models.weighted_loss_grad(model, X, y, weights, wd)
    analytic = np.concatenate([g.ravel() for g in grads.values()])
    numeric = finite_difference(model, X, y, weights, wd)
    scale = np.maximum(np.abs(numeric), 1e-3)
    return float(np.max(np.abs(analytic - numeric) / scale))


@pytest.mark.parametrize("seed", range(20))
def test_gradient_matches_finite_differences(seed):
    assert check_gradient(seed) < 1e-5


def test_loss_is_mean_cross_entropy():
    model = models.Classifier(models.LINEAR, {"W": np.array([[1.0, -1.0]]), "b": np.zeros(2)})
    X = np.array([[0.0], [1.0]])
    loss, _ = models.loss_and_grad(model, X, [0, 1])
    expected = 0.5 * (np.log(2.0) + np.log1p(np.exp(2.0)))
    assert loss == pytest.approx(expected, rel=1e-12)


def test_weight_decay_term():
    model = models.init_classifier(models.LINEAR, 2, 2, seed=0)
    X, y = np.zeros((1, 2)), [0]
    plain, _ = models.weighted_loss_grad(model, X, y, [1.0])
    decayed, _ = models.weighted_loss_grad(model, X, y, [1.0], weight_decay=2.0)
    assert decayed - plain == pytest.approx(np.sum(model.flat() ** 2), rel=1e-12)


def test_init_bounds():
    model = models.init_classifier(models.MLP, 16, 2, seed=1, hidden=9)
    assert np.abs(model.params["W1"]).max() <= 0.25
    assert np.abs(model.params["W2"]).max() <= 1 / 3
    assert model.feature_dim == 9


def test_linear_featurizer_is_identity():
    model = models.init_classifier(models.LINEAR, 3, 2, seed=0)
    X = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(models.featurize(model, X), X)
    feats, logits = models.forward(model, X[0])
    assert feats.shape == (3,) and logits.shape == (2,)


def test_predict_proba_rows_sum_to_one():
    model = models.init_classifier(models.MLP, 2, 3, seed=0)
    p = models.predict_proba(model, np.random.default_rng(0).normal(size=(5, 2)))
    np.testing.assert_allclose(p.sum(axis=1), 1.0)


def test_loss_component_is_signed_distance():
    model = models.Classifier(models.LINEAR, {"W": np.array([[0.0, 3.0], [0.0, 4.0]]),
                                              "b": np.array([0.0, -5.0])})
    d = models.loss_component(model, np.array([[0.0, 0.0], [3.0, 4.0]]))
    np.testing.assert_allclose(d, [-1.0, 4.0])


def test_loss_component_needs_a_boundary():
    with pytest.raises(ValueError):
        models.loss_component(models.zero_classifier(2, 2), np.zeros((1, 2)))


def test_input_dimension_checked():
    model = models.init_classifier(models.LINEAR, 3, 2, seed=0)
    with pytest.raises(ValueError):
        models.predict(model, np.zeros((2, 4)))


def test_checkpoint_round_trip(tmp_path):
    model = models.init_classifier(models.MLP, 3, 2, seed=5, hidden=4)
    path = tmp_path / "m.ckpt"
    models.save_checkpoint(model, path)
    back = models.load_checkpoint(path)
    assert back.kind == models.MLP and back.seed == 5
    np.testing.assert_array_equal(back.flat(), model.flat())


def test_loss_spec_validation():
    with pytest.raises(ValueError):
        models.LossSpec(learning_rate=0.0)
    with pytest.raises(ValueError):
        models.LossSpec(loss_kind="hinge")
