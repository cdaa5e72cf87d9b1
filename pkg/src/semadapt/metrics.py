"""Segmentation and image-quality metrics.

Confusion matrices and mIoU for segmentation; a classifier-agnostic Inception
Score; the Fréchet distance between Gaussian fits of two feature sets.
"""

from __future__ import annotations

import numpy as np

IGNORE = -1


class ConfusionMatrix:
    """K×K counts, rows = ground truth, columns = prediction.

    Shards can be merged with ``+``; accumulation order never matters.
    """

    def __init__(self, n_classes: int, counts: np.ndarray = None):
        self.n_classes = n_classes
        self.counts = np.zeros((n_classes, n_classes), np.int64) if counts is None \
            else np.asarray(counts, np.int64).copy()

    def accumulate(self, truth: np.ndarray, pred: np.ndarray, ignore: int = IGNORE) -> "ConfusionMatrix":
        truth, pred = np.asarray(truth).reshape(-1), np.asarray(pred).reshape(-1)
        if truth.shape != pred.shape:
            raise ValueError(f"truth has {truth.size} pixels, prediction {pred.size}")
        keep = truth != ignore
        t, p = truth[keep], pred[keep]
        k = self.n_classes
        if t.size and (t.min() < 0 or t.max() >= k):
            raise ValueError(f"truth labels must lie in 0..{k - 1} or be {ignore}")
        if p.size and (p.min() < 0 or p.max() >= k):
            raise ValueError(f"predicted labels must lie in 0..{k - 1}")
        self.counts += np.bincount(t * k + p, minlength=k * k).reshape(k, k)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.n_classes != self.n_classes:
            raise ValueError("cannot merge confusion matrices of different class counts")
        return ConfusionMatrix(self.n_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion_accumulate(cm: ConfusionMatrix, truth, pred) -> ConfusionMatrix:
    return cm.accumulate(truth, pred)


def miou(cm: ConfusionMatrix, exclude_absent: bool = True) -> tuple:
    """Per-class IoU = TP / (TP + FP + FN) and their mean.

    Classes that never occur in truth or prediction have no IoU (NaN); they
    are left out of the mean, or counted as 0 with ``exclude_absent=False``.
    """
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    union = c.sum(axis=0) + c.sum(axis=1) - tp
    present = union > 0
    if not present.any():
        raise ValueError("miou: no class has a non-empty union")
    iou = np.full(cm.n_classes, np.nan)
    iou[present] = tp[present] / union[present]
    mean = float(iou[present].mean()) if exclude_absent else float(np.nan_to_num(iou).mean())
    return iou, mean


def inception_score(probs: np.ndarray, atol: float = 1e-4) -> float:
    """exp(mean_n KL(p(·|x_n) ‖ p̄)) for an N×K matrix of class probabilities."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"inception_score expects an N×K matrix, got shape {p.shape}")
    if np.any(p < 0) or not np.allclose(p.sum(axis=1), 1.0, atol=atol):
        raise ValueError("inception_score: every row must be a probability distribution")
    marginal = p.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(marginal)), 0.0)
    return float(np.exp(terms.sum(axis=1).mean()))


def _sqrt_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """‖μ_A−μ_B‖² + Tr(Σ_A + Σ_B − 2 (Σ_A^{1/2} Σ_B Σ_A^{1/2})^{1/2}).

    Square roots use a symmetric eigendecomposition with negative eigenvalues
    clamped to zero.  Covariances are the usual unbiased (1/(N−1)) estimates.
    """
    a = np.atleast_2d(np.asarray(feats_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(feats_b, dtype=np.float64))
    if len(a) < 2 or len(b) < 2:
        raise ValueError("frechet_distance needs at least two samples per set")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    if not (np.all(np.isfinite(cov_a)) and np.all(np.isfinite(cov_b))):
        raise ValueError("frechet_distance: non-finite covariance")
    root_a = _sqrt_psd(cov_a)
    inner = root_a @ cov_b @ root_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_cross = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_cross)
