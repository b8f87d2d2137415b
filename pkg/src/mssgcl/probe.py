"""Linear-probe evaluation of frozen graph embeddings with stratified k-fold CV."""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError

PROBE_ITERATIONS = 500
PROBE_LR = 0.1
PROBE_WEIGHT_DECAY = 1e-4


class StratificationError(ConfigError):
    pass


def stratified_folds(labels: np.ndarray, folds: int, rng: np.random.Generator) -> np.ndarray:
    """Fold id per row such that each class is spread evenly over the folds."""
    labels = np.asarray(labels)
    if folds < 2:
        raise ConfigError(f"folds must be >= 2, got {folds}")
    classes, counts = np.unique(labels, return_counts=True)
    small = classes[counts < folds]
    if small.size:
        raise StratificationError(
            f"classes {small.tolist()} have fewer than {folds} members; cannot stratify"
        )
    order = np.concatenate([rng.permutation(np.flatnonzero(labels == c)) for c in classes])
    fold_of = np.empty(labels.size, dtype=np.int64)
    fold_of[order] = np.arange(order.size) % folds
    return fold_of


def fit_logistic_regression(x: np.ndarray, y: np.ndarray, num_classes: int):
    """Multinomial logistic regression by full-batch gradient descent from zero weights."""
    n, d = x.shape
    w = np.zeros((d, num_classes))
    b = np.zeros(num_classes)
    onehot = np.zeros((n, num_classes))
    onehot[np.arange(n), y] = 1.0
    for _ in range(PROBE_ITERATIONS):
        logits = x @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        err = (p - onehot) / n
        w -= PROBE_LR * (x.T @ err + PROBE_WEIGHT_DECAY * w)
        b -= PROBE_LR * err.sum(axis=0)
    return w, b


def _subsample(train_idx: np.ndarray, labels: np.ndarray, fraction: float, rng) -> np.ndarray:
    if fraction >= 1.0:
        return train_idx
    keep = max(1, math.ceil(fraction * train_idx.size))
    chosen = list(rng.choice(train_idx, size=keep, replace=False))
    present = set(labels[chosen].tolist())
    for c in np.unique(labels[train_idx]):
        if c not in present:
            chosen.append(rng.choice(train_idx[labels[train_idx] == c]))
    return np.sort(np.asarray(chosen, dtype=np.int64))


def linear_probe_cv(
    embeddings,
    labels=None,
    folds: int = 10,
    label_fraction: float = 1.0,
    seed: int = 0,
) -> tuple[float, float]:
    """Mean and (population) std of held-out accuracy over stratified folds.

    ``embeddings`` is either an ``EmbeddingMatrix`` (labels taken from it) or
    a plain array accompanied by ``labels``.
    """
    if labels is None:
        embeddings, labels = embeddings.values, embeddings.labels
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.shape[0] != y.shape[0]:
        raise ConfigError(f"{x.shape[0]} embedding rows for {y.shape[0]} labels")
    if np.any(y < 0):
        raise ConfigError("linear probe needs a label for every graph")
    if not 0 < label_fraction <= 1:
        raise ConfigError(f"label_fraction must be in (0, 1], got {label_fraction}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x9E0B]))
    fold_of = stratified_folds(y, folds, rng)
    num_classes = int(y.max()) + 1
    accs = []
    for f in range(folds):
        test_idx = np.flatnonzero(fold_of == f)
        train_idx = _subsample(np.flatnonzero(fold_of != f), y, label_fraction, rng)
        mu = x[train_idx].mean(axis=0)
        sd = x[train_idx].std(axis=0)
        sd[sd == 0] = 1.0
        w, b = fit_logistic_regression((x[train_idx] - mu) / sd, y[train_idx], num_classes)
        pred = (((x[test_idx] - mu) / sd) @ w + b).argmax(axis=1)
        accs.append(float(np.mean(pred == y[test_idx])))
    return float(np.mean(accs)), float(np.std(accs))
