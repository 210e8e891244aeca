"""Frozen-feature classifiers: softmax regression, ridge, kNN, random forest."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forest import RandomForest
from .metrics import ConfusionMatrix, confusion_metrics

ALGORITHMS = ("linear", "ridge", "knn", "random_forest")


def _standardize(Xtr: np.ndarray, Xte: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = Xtr.mean(axis=0)
    sd = Xtr.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    return (Xtr - mu) / sd, (Xte - mu) / sd


def fit_linear(X: np.ndarray, y: np.ndarray, k: int, lr: float = 0.5, iters: int = 500, l2: float = 1e-3):
    """Multinomial logistic regression by full-batch gradient descent."""
    n, F = X.shape
    W = np.zeros((F, k))
    b = np.zeros(k)
    Y = np.eye(k)[y]
    for _ in range(iters):
        z = X @ W + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - Y) / n
        W -= lr * (X.T @ g + l2 * W)
        b -= lr * g.sum(axis=0)
    return W, b


def fit_ridge(X: np.ndarray, y: np.ndarray, k: int, alpha: float = 1.0):
    """One-vs-rest ridge on centred data with {-1, +1} targets."""
    mu = X.mean(axis=0)
    Xc = X - mu
    T = 2.0 * np.eye(k)[y] - 1.0
    tm = T.mean(axis=0)
    n, F = Xc.shape
    if F <= n:
        W = np.linalg.solve(Xc.T @ Xc + alpha * np.eye(F), Xc.T @ (T - tm))
    else:
        W = Xc.T @ np.linalg.solve(Xc @ Xc.T + alpha * np.eye(n), T - tm)
    return W, tm - mu @ W


def knn_predict(Xtr: np.ndarray, ytr: np.ndarray, Xte: np.ndarray, k: int, n_classes: int, chunk: int = 512) -> np.ndarray:
    """Euclidean majority vote; ties go to the smallest class id."""
    out = np.empty(len(Xte), dtype=np.int64)
    sq_tr = (Xtr * Xtr).sum(axis=1)
    for s in range(0, len(Xte), chunk):
        q = Xte[s : s + chunk]
        d = (q * q).sum(axis=1)[:, None] - 2.0 * q @ Xtr.T + sq_tr[None, :]
        nn = np.argsort(d, axis=1, kind="stable")[:, :k]
        votes = np.zeros((len(q), n_classes), dtype=np.int64)
        np.add.at(votes, (np.repeat(np.arange(len(q)), nn.shape[1]), ytr[nn].ravel()), 1)
        out[s : s + chunk] = np.argmax(votes, axis=1)
    return out


@dataclass
class ProbeResult:
    classifier: str
    feature_source: str
    train_size: int
    confusion: ConfusionMatrix

    @property
    def oa(self) -> float:
        return self.confusion.oa

    @property
    def precision(self) -> float:
        return self.confusion.macro_precision

    @property
    def recall(self) -> float:
        return self.confusion.macro_recall

    @property
    def f1(self) -> float:
        return self.confusion.macro_f1


def predict_probe(Xtr, ytr, Xte, algorithm: str, n_classes: int | None = None, **hyper) -> np.ndarray:
    Xtr = np.asarray(Xtr, dtype=np.float64)
    Xte = np.asarray(Xte, dtype=np.float64)
    ytr = np.asarray(ytr, dtype=np.int64)
    k = int(n_classes if n_classes is not None else ytr.max() + 1)
    present = np.bincount(ytr, minlength=k)
    if np.any(present == 0):
        raise ValueError(f"training set has no samples for classes {np.flatnonzero(present == 0).tolist()}")
    if algorithm == "linear":
        A, B = _standardize(Xtr, Xte)
        W, b = fit_linear(A, ytr, k, **hyper)
        return np.argmax(B @ W + b, axis=1)
    if algorithm == "ridge":
        A, B = _standardize(Xtr, Xte)
        W, b = fit_ridge(A, ytr, k, **hyper)
        return np.argmax(B @ W + b, axis=1)
    if algorithm == "knn":
        return knn_predict(Xtr, ytr, Xte, int(hyper.get("k", 1)), k)
    if algorithm == "random_forest":
        return RandomForest(k, **hyper).fit(Xtr, ytr).predict(Xte)
    raise ValueError(f"unknown probe algorithm {algorithm!r}; choose from {ALGORITHMS}")


def fit_predict_probe(Xtr, ytr, Xte, yte, algorithm: str, n_classes: int | None = None,
                      feature_source: str = "", class_names=None, **hyper) -> ProbeResult:
    ytr = np.asarray(ytr, dtype=np.int64)
    yte = np.asarray(yte, dtype=np.int64)
    k = int(n_classes if n_classes is not None else max(ytr.max(), yte.max()) + 1)
    pred = predict_probe(Xtr, ytr, Xte, algorithm, k, **hyper)
    name = algorithm if algorithm != "knn" else f"knn(k={int(hyper.get('k', 1))})"
    return ProbeResult(name, feature_source, len(ytr), confusion_metrics(yte, pred, k, class_names))
