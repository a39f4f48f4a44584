"""Frozen-embedding evaluation with L2-regularized multinomial logistic regression."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .graph import Split

REG_GRID = (1e-4, 1e-3, 1e-2, 1e-1, 1.0)
MAX_ITER = 2000
GRAD_TOL = 1e-5


@dataclass
class EvalReport:
    test_accuracy: float
    fold_accuracies: list = field(default_factory=list)  # mean CV accuracy per grid value
    reg_strength: float = 0.0
    split_seed: int = 0

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class LogisticModel:
    weights: np.ndarray  # [d, k]
    bias: np.ndarray  # [k]
    classes: np.ndarray
    iterations: int = 0

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(x @ self.weights + self.bias, axis=1)]


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def fit_logistic(x: np.ndarray, y: np.ndarray, reg: float, max_iter: int = MAX_ITER,
                 tol: float = GRAD_TOL) -> LogisticModel:
    """Full-batch gradient descent on mean cross-entropy + reg/2 * ||W||^2.

    The step is 1/L for the smoothness bound L = ||x||_2^2 / n + reg (the
    bias sees the same curvature bound without the penalty).
    """
    classes, yi = np.unique(y, return_inverse=True)
    if len(classes) < 2:
        raise ValueError("logistic regression needs at least two classes in the training set")
    n, d = x.shape
    k = len(classes)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), yi] = 1.0
    xb = np.hstack([x, np.ones((n, 1))])
    lipschitz = np.linalg.norm(xb, 2) ** 2 / n + reg
    step = 1.0 / lipschitz
    theta = np.zeros((d + 1, k))
    penalty = np.ones((d + 1, 1))
    penalty[-1] = 0.0
    it = 0
    for it in range(1, max_iter + 1):
        grad = xb.T @ (_softmax(xb @ theta) - onehot) / n + reg * penalty * theta
        if np.linalg.norm(grad) < tol:
            break
        theta -= step * grad
    return LogisticModel(theta[:-1], theta[-1], classes, it)


def _standardize(train: np.ndarray, *others: np.ndarray):
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    return [(a - mean) / std for a in (train,) + others]


def cv_folds(train_idx: np.ndarray, seed: int, k: int = 5) -> list[np.ndarray]:
    perm = np.random.default_rng(seed).permutation(train_idx)
    return [np.sort(f) for f in np.array_split(perm, k)]


def accuracy(model: LogisticModel, x, y) -> float:
    return float(np.mean(model.predict(x) == y)) if len(y) else 0.0


def fit_logistic_cv(embeddings: np.ndarray, labels: np.ndarray, split: Split,
                    reg_grid: Sequence[float] = REG_GRID, folds: int = 5) -> EvalReport:
    """Pick the L2 strength by k-fold CV on the train split, refit, score the test split."""
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    train = np.asarray(split.train)
    if len(np.unique(y[train])) < 2:
        raise ValueError("training split contains a single class")
    fold_sets = cv_folds(train, split.seed, folds)
    cv_scores = []
    for reg in reg_grid:
        scores = []
        for f in range(len(fold_sets)):
            held = fold_sets[f]
            fit_idx = np.concatenate([fold_sets[j] for j in range(len(fold_sets)) if j != f])
            if len(held) == 0 or len(np.unique(y[fit_idx])) < 2:
                continue
            xf, xh = _standardize(x[fit_idx], x[held])
            scores.append(accuracy(fit_logistic(xf, y[fit_idx], reg), xh, y[held]))
        cv_scores.append(float(np.mean(scores)) if scores else 0.0)
    best = int(np.argmax(cv_scores))
    xt, xs = _standardize(x[train], x[split.test])
    model = fit_logistic(xt, y[train], reg_grid[best])
    return EvalReport(accuracy(model, xs, y[split.test]), cv_scores, float(reg_grid[best]), split.seed)


def evaluate(model, dataset, split: Split, reg_grid: Sequence[float] = REG_GRID) -> EvalReport:
    """Embed with ``model`` and score; ``split`` indexes ``dataset`` items."""
    emb = model.embed_for_task()
    if len(emb) != dataset.num_items:
        raise ValueError(f"{len(emb)} embeddings for {dataset.num_items} labeled items; "
                         "evaluate against the model's (subsampled) dataset")
    return fit_logistic_cv(emb, dataset.labels, split, reg_grid)
