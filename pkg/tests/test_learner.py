import numpy as np

from fedtrack import learner
from fedtrack.data import generate_synthetic


def _numeric_grad(W, X, y, task, classes, eps=1e-6):
    def loss(w):
        return learner.evaluate(w, X, y, task=task, classes=classes)[0]

    g = np.zeros_like(W)
    for i in range(len(W)):
        d = np.zeros_like(W)
        d[i] = eps
        g[i] = (loss(W + d) - loss(W - d)) / (2 * eps)
    return g


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(12, 3))
    for task, classes, y in (
        ("classification", 4, rng.integers(0, 4, 12)),
        ("regression", 1, rng.normal(size=12)),
    ):
        W = rng.normal(size=learner.param_count(task, 3, classes))
        Xb = learner._with_bias(X)
        shape = (4, classes) if task == "classification" else (4,)
        analytic = learner._gradient(W.reshape(shape), Xb, y, task, classes).reshape(-1)
        assert np.allclose(analytic, _numeric_grad(W, X, y, task, classes), atol=1e-6)


def test_sgd_reduces_loss_and_is_seeded():
    ds = generate_synthetic(1, 200, 5, 3, 1.0, seed=4, separation=2.0)
    w0 = learner.init_weights("classification", 5, 3, np.random.default_rng(0))
    kw = dict(task="classification", classes=3, epochs=5, learning_rate=0.1, batch_size=16)
    w1 = learner.sgd(w0, ds.features, ds.labels, rng=np.random.default_rng(1), **kw)
    w2 = learner.sgd(w0, ds.features, ds.labels, rng=np.random.default_rng(1), **kw)
    assert w1.tobytes() == w2.tobytes()
    before = learner.evaluate(w0, ds.features, ds.labels, task="classification", classes=3)
    after = learner.evaluate(w1, ds.features, ds.labels, task="classification", classes=3)
    assert after[0] < before[0] and after[1] > before[1]


def test_evaluate_empty_is_nan():
    loss, metric = learner.evaluate(np.zeros(4), np.zeros((0, 3)), np.zeros(0), task="regression", classes=1)
    assert np.isnan(loss) and np.isnan(metric)


def test_regression_metric_is_rmse():
    X = np.zeros((4, 2))
    y = np.array([1.0, -1.0, 1.0, -1.0])
    loss, rmse = learner.evaluate(np.zeros(3), X, y, task="regression", classes=1)
    assert loss == 0.5 and rmse == 1.0
