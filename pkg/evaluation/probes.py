# evaluation/probes.py
"""Frozen-feature probes: k-NN, PCA + ridge and a balanced linear probe.

Every probe picks its hyperparameter on the ``val`` rows and reports the
metric on the ``test`` rows of a ProbeDataset.
"""
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from numerics import functional as F
from numerics.tensor import Tensor, parameter
from ticon_lab.exceptions import ConfigError, DatasetError, MetricError, ShapeError

logger = logging.getLogger(__name__)

SPLITS = ('train', 'val', 'test')
METRICS = ('f1_macro', 'pcc_mean', 'balanced_accuracy', 'auc')


@dataclass
class ProbeDataset:
    features: np.ndarray
    labels: np.ndarray
    split: np.ndarray
    classification: bool = True

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        self.split = np.asarray(self.split)
        if self.features.ndim != 2 or len(self.features) != len(self.labels) or len(self.labels) != len(self.split):
            raise ShapeError(
                f'{self.features.shape} features, {self.labels.shape} labels, {self.split.shape} split rows'
            )
        unknown = set(np.unique(self.split)) - set(SPLITS)
        if unknown:
            raise DatasetError(f'unknown split names {sorted(unknown)}')

    def rows(self, name):
        mask = self.split == name
        if not mask.any():
            raise DatasetError(f'the {name} split is empty')
        return self.features[mask], self.labels[mask]

    def with_features(self, features):
        return ProbeDataset(features, self.labels, self.split, self.classification)


@dataclass
class EvalReport:
    task: str
    variant: str
    metric: str
    value: float
    chosen: float
    seed: int
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.metric not in METRICS:
            raise MetricError(f'unknown metric {self.metric!r}')
        low = -1.0 if self.metric == 'pcc_mean' else 0.0
        if not low - 1e-9 <= self.value <= 1.0 + 1e-9:
            raise MetricError(f'{self.metric} value {self.value} out of range')

    def as_dict(self):
        return asdict(self)


# metrics

def macro_f1(y_true, y_pred):
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    scores = []
    for cls in np.union1d(y_true, y_pred):
        tp = np.sum((y_pred == cls) & (y_true == cls))
        fp = np.sum((y_pred == cls) & (y_true != cls))
        fn = np.sum((y_pred != cls) & (y_true == cls))
        scores.append(0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores))


def balanced_accuracy(y_true, y_pred):
    """Mean per-class recall over the classes present in ``y_true``."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    return float(np.mean([np.mean(y_pred[y_true == cls] == cls) for cls in np.unique(y_true)]))


def pair_auc(scores, labels):
    """ROC AUC by pair counting; ties count one half."""
    scores, labels = np.asarray(scores, dtype=np.float64), np.asarray(labels)
    positives, negatives = scores[labels == 1], scores[labels == 0]
    if len(positives) == 0 or len(negatives) == 0:
        raise MetricError('AUC needs both classes in the test split')
    greater = (positives[:, None] > negatives[None, :]).sum()
    ties = (positives[:, None] == negatives[None, :]).sum()
    return float((greater + 0.5 * ties) / (len(positives) * len(negatives)))


def pearson(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    a, b = a - a.mean(), b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    return 0.0 if denom == 0.0 else float((a * b).sum() / denom)


# k-NN

def pairwise_distances(queries, references, distance='cosine'):
    if distance == 'cosine':
        q = queries / np.maximum(np.linalg.norm(queries, axis=1, keepdims=True), 1e-12)
        r = references / np.maximum(np.linalg.norm(references, axis=1, keepdims=True), 1e-12)
        return 1.0 - q @ r.T
    if distance == 'euclidean':
        sq = (queries ** 2).sum(1)[:, None] + (references ** 2).sum(1)[None, :] - 2.0 * queries @ references.T
        return np.sqrt(np.maximum(sq, 0.0))
    raise ConfigError(f'unknown k-NN distance {distance!r}')


def knn_predict(train_x, train_y, test_x, k, distance='cosine', chunk=1024):
    """Majority vote of the k nearest train rows.

    Tied votes go to the class whose tied neighbors are closer on average,
    then to the smaller class index.
    """
    k = min(k, len(train_x))
    classes = np.unique(train_y)
    predictions = np.empty(len(test_x), dtype=train_y.dtype)
    for start in range(0, len(test_x), chunk):
        dist = pairwise_distances(test_x[start:start + chunk], train_x, distance)
        nearest = np.argsort(dist, axis=1, kind='stable')[:, :k]
        for row, idx in enumerate(nearest):
            votes = train_y[idx]
            counts = np.array([np.sum(votes == c) for c in classes])
            tied = classes[counts == counts.max()]
            if len(tied) == 1:
                predictions[start + row] = tied[0]
                continue
            mean_dist = [dist[row, idx[votes == c]].mean() for c in tied]
            predictions[start + row] = tied[int(np.argmin(mean_dist))]
    return predictions


def knn_probe(ds, ks, distance='cosine', task='tile', variant='raw', seed=0):
    train_x, train_y = ds.rows('train')
    val_x, val_y = ds.rows('val')
    test_x, test_y = ds.rows('test')
    _check_classes(train_y, val_y, test_y)
    best_k, best_f1 = None, -1.0
    for k in sorted(ks):
        f1 = macro_f1(val_y, knn_predict(train_x, train_y, val_x, k, distance))
        if f1 > best_f1:
            best_k, best_f1 = k, f1
    value = macro_f1(test_y, knn_predict(train_x, train_y, test_x, best_k, distance))
    logger.info('%s/%s k-NN: k=%d val F1 %.3f test F1 %.3f', task, variant, best_k, best_f1, value)
    return EvalReport(task, variant, 'f1_macro', value, best_k, seed, {'val': best_f1, 'n_test': len(test_y)})


def _check_classes(train_y, *others):
    seen = set(np.unique(train_y).tolist())
    for labels in others:
        missing = set(np.unique(labels).tolist()) - seen
        if missing:
            raise DatasetError(f'classes {sorted(missing)} have no train rows')


# PCA + ridge

def pca_fit(x, dims):
    """(mean, components (d, dims)) from the SVD of centered ``x``."""
    mean = x.mean(axis=0)
    _, _, vt = np.linalg.svd(x - mean, full_matrices=False)
    return mean, vt[:dims].T


def ridge_fit(z, y, lam):
    """Ridge with an unpenalized intercept: (coef (p, g), intercept (g,))."""
    z_mean, y_mean = z.mean(axis=0), y.mean(axis=0)
    zc, yc = z - z_mean, y - y_mean
    coef = np.linalg.solve(zc.T @ zc + lam * np.eye(z.shape[1]), zc.T @ yc)
    return coef, y_mean - z_mean @ coef


def _mean_pcc(y_true, y_pred, names=None):
    values = []
    for j in range(y_true.shape[1]):
        if np.ptp(y_true[:, j]) == 0.0:
            name = names[j] if names else f'target {j}'
            raise MetricError(f'{name} is constant on the test split')
        values.append(pearson(y_true[:, j], y_pred[:, j]))
    return float(np.mean(values))


def pca_ridge(ds, pca_dims, lambdas, task='spot', variant='raw', seed=0, target_names=None):
    train_x, train_y = ds.rows('train')
    val_x, val_y = ds.rows('val')
    test_x, test_y = ds.rows('test')
    train_y, val_y, test_y = (np.asarray(y, dtype=np.float64).reshape(len(y), -1) for y in (train_y, val_y, test_y))
    dims = min(pca_dims, train_x.shape[1], len(train_x))
    mean, components = pca_fit(train_x, dims)

    def project(x):
        return (x - mean) @ components

    z_train, z_val, z_test = project(train_x), project(val_x), project(test_x)
    best_lam, best_pcc = None, -np.inf
    for lam in sorted(lambdas):
        coef, intercept = ridge_fit(z_train, train_y, lam)
        pcc = np.mean([pearson(val_y[:, j], (z_val @ coef + intercept)[:, j]) for j in range(val_y.shape[1])])
        if pcc > best_pcc:
            best_lam, best_pcc = lam, pcc
    coef, intercept = ridge_fit(z_train, train_y, best_lam)
    value = _mean_pcc(test_y, z_test @ coef + intercept, target_names)
    logger.info('%s/%s PCA(%d)+ridge: lambda=%g test PCC %.3f', task, variant, dims, best_lam, value)
    return EvalReport(task, variant, 'pcc_mean', value, best_lam, seed,
                      {'val': float(best_pcc), 'pca_dims': dims, 'n_test': len(test_y)})


# linear probe

def class_weights(labels, classes):
    """Inverse class frequency, normalized to mean 1 over the classes."""
    counts = np.array([np.sum(labels == c) for c in classes], dtype=np.float64)
    weights = 1.0 / counts
    return weights / weights.mean()


def fit_logistic(x, y, classes, cost, iters, lr=None):
    """Class-balanced multinomial logistic regression with an L2 penalty.

    Minimizes sum_i w_i CE_i / sum_i w_i + ||W||^2 / (2 C n) by full-batch
    gradient descent. The default step is 1 / L for L the curvature bound
    0.5 * lambda_max(sum_i w_i [x_i, 1] [x_i, 1]^T / sum_i w_i) + 1 / (C n),
    so every step lowers the objective. Returns (weight (d, K), bias (K,)).
    """
    n, d = x.shape
    index = np.searchsorted(classes, y)
    onehot = np.zeros((n, len(classes)))
    onehot[np.arange(n), index] = 1.0
    row_weights = class_weights(y, classes)[index]
    row_weights = row_weights / row_weights.sum()
    picked = onehot * row_weights[:, None]
    if lr is None:
        augmented = np.hstack([x, np.ones((n, 1))]) * np.sqrt(row_weights)[:, None]
        curvature = 0.5 * np.linalg.norm(augmented, ord=2) ** 2 + 1.0 / (cost * n)
        lr = 1.0 / curvature
    params = {'weight': parameter(np.zeros((d, len(classes)))), 'bias': parameter(np.zeros(len(classes)))}
    inputs = Tensor(x)
    for _ in range(iters):
        for p in params.values():
            p.zero_grad()
        log_probs = F.log_softmax(F.linear(inputs, params['weight'], params['bias']))
        data_term = F.scale(F.sum(F.mul(log_probs, picked)), -1.0)
        penalty = F.scale(F.sum(F.mul(params['weight'], params['weight'])), 1.0 / (2.0 * cost * n))
        F.add(data_term, penalty).backward()
        for p in params.values():
            p.data -= lr * p.grad
    return params['weight'].data, params['bias'].data


def standardize(train_x, *others):
    mean = train_x.mean(axis=0)
    std = train_x.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return [(x - mean) / std for x in (train_x, *others)]


def linear_probe(ds, costs=(0.5,), iters=400, task='slide', variant='raw', seed=0):
    train_x, train_y = ds.rows('train')
    val_x, val_y = ds.rows('val')
    test_x, test_y = ds.rows('test')
    classes = np.unique(train_y)
    if len(classes) < 2:
        raise DatasetError(f'linear probe needs two or more classes in train, got {classes.tolist()}')
    _check_classes(train_y, val_y, test_y)
    train_x, val_x, test_x = standardize(train_x, val_x, test_x)

    best = None
    for cost in costs:
        weight, bias = fit_logistic(train_x, train_y, classes, cost, iters)
        val_score = balanced_accuracy(val_y, classes[np.argmax(val_x @ weight + bias, axis=1)])
        if best is None or val_score > best[0]:
            best = (val_score, cost, weight, bias)
    val_score, cost, weight, bias = best
    logits = test_x @ weight + bias
    value = balanced_accuracy(test_y, classes[np.argmax(logits, axis=1)])
    extra = {'val': val_score, 'n_test': len(test_y)}
    if len(classes) == 2 and len(np.unique(test_y)) == 2:
        extra['auc'] = pair_auc(logits[:, 1] - logits[:, 0], (test_y == classes[1]).astype(int))
    logger.info('%s/%s linear probe: C=%g test balanced accuracy %.3f', task, variant, cost, value)
    return EvalReport(task, variant, 'balanced_accuracy', value, cost, seed, extra)
