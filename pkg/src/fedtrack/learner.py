"""Flat-vector linear models trained with mini-batch gradient descent."""

from __future__ import annotations

import numpy as np


def param_count(task: str, dims: int, classes: int) -> int:
    return (dims + 1) * (classes if task == "classification" else 1)


def init_weights(task: str, dims: int, classes: int, rng: np.random.Generator) -> np.ndarray:
    return rng.normal(0.0, 0.01, size=param_count(task, dims, classes))


def _with_bias(X: np.ndarray) -> np.ndarray:
    return np.hstack([X, np.ones((len(X), 1))])


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _gradient(W: np.ndarray, Xb: np.ndarray, y: np.ndarray, task: str, classes: int) -> np.ndarray:
    if task == "classification":
        p = _softmax(Xb @ W)
        p[np.arange(len(y)), y] -= 1.0
        return Xb.T @ p / len(y)
    resid = Xb @ W - y
    return Xb.T @ resid / len(y)


def sgd(
    weights: np.ndarray,
    X: np.ndarray,
    y: np.ndarray,
    *,
    task: str,
    classes: int,
    epochs: int,
    learning_rate: float,
    batch_size: int,
    rng: np.random.Generator,
) -> np.ndarray:
    Xb = _with_bias(X)
    shape = (Xb.shape[1], classes) if task == "classification" else (Xb.shape[1],)
    W = weights.reshape(shape).copy()
    n = len(y)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            W -= learning_rate * _gradient(W, Xb[idx], y[idx], task, classes)
    return W.reshape(-1)


def evaluate(weights: np.ndarray, X: np.ndarray, y: np.ndarray, *, task: str, classes: int) -> tuple[float, float]:
    """Loss and metric: cross-entropy / accuracy, or half-MSE / RMSE."""
    if len(y) == 0:
        return float("nan"), float("nan")
    Xb = _with_bias(X)
    if task == "classification":
        logits = Xb @ weights.reshape(Xb.shape[1], classes)
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss = -float(logp[np.arange(len(y)), y].mean())
        acc = float((logits.argmax(axis=1) == y).mean())
        return loss, acc
    resid = Xb @ weights - y
    mse = float((resid**2).mean())
    return 0.5 * mse, float(np.sqrt(mse))
