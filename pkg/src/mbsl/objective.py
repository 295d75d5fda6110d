"""Cross-modal contrastive objective and downstream metrics."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from itertools import combinations

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, ParameterError

NEGATIVES = ("cross_view", "both_views")


def _as_views(h1, h2):
    h1, h2 = T.as_tensor(h1), T.as_tensor(h2)
    if h1.ndim != 2 or h1.shape != h2.shape:
        raise DimensionError(f"views must both be [N, D], got {h1.shape} and {h2.shape}")
    if h1.shape[0] < 2:
        raise ParameterError("contrastive loss needs N >= 2 samples")
    return h1, h2


def pairwise_nt_xent(h1, h2, tau: float = 0.1, negatives: str = "cross_view") -> T.Tensor:
    """Symmetrised NT-Xent between two views ``[N, D]``.

    Sample ``i`` of one view is the positive for sample ``i`` of the other;
    the softmax denominator runs over every sample of the other view
    (positive included). ``negatives="both_views"`` also adds the anchor's
    own view, minus the anchor itself.
    """
    if not tau > 0:
        raise ParameterError(f"temperature must be > 0, got {tau}")
    if negatives not in NEGATIVES:
        raise ParameterError(f"negatives must be one of {NEGATIVES}")
    h1, h2 = _as_views(h1, h2)
    n = h1.shape[0]
    z1, z2 = T.l2_normalize(h1), T.l2_normalize(h2)
    targets = np.arange(n)
    s12 = T.scale(T.matmul(z1, T.transpose(z2, (1, 0))), 1.0 / tau)
    s21 = T.transpose(s12, (1, 0))
    if negatives == "cross_view":
        l12 = T.cross_entropy(s12, targets)
        l21 = T.cross_entropy(s21, targets)
    else:
        s11 = T.scale(T.matmul(z1, T.transpose(z1, (1, 0))), 1.0 / tau)
        s22 = T.scale(T.matmul(z2, T.transpose(z2, (1, 0))), 1.0 / tau)
        excl = np.concatenate([np.zeros((n, n), bool), np.eye(n, dtype=bool)], axis=1)
        l12 = T.cross_entropy(T.concat([s12, s11], axis=1), targets, exclude=excl)
        l21 = T.cross_entropy(T.concat([s21, s22], axis=1), targets, exclude=excl)
    return T.scale(T.add(l12, l21), 0.5)


def cross_modal_loss(batch, tau: float = 0.1, negatives: str = "cross_view") -> T.Tensor:
    """Sum of pairwise NT-Xent terms over every unordered pair of groups.

    ``batch`` is a sequence of K tensors ``[N, D]`` (or an array ``[K, N, D]``).
    """
    views = [T.as_tensor(v) for v in batch]
    if len(views) < 2:
        raise ContractError("cross_modal_loss needs K >= 2 groups; with a single group use "
                            "instance_contrastive_loss (ablation mode)")
    total = None
    for i, j in combinations(range(len(views)), 2):
        term = pairwise_nt_xent(views[i], views[j], tau, negatives)
        total = term if total is None else T.add(total, term)
    return total


def instance_contrastive_loss(h, h_aug, tau: float = 0.1, negatives: str = "cross_view") -> T.Tensor:
    """NT-Xent between a view and its masked-augmented copy."""
    return pairwise_nt_xent(h, h_aug, tau, negatives)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricReport:
    task: str
    n: int
    mae: float | None = None
    sd: float | None = None
    rmse: float | None = None
    acc: float | None = None
    f1: float | None = None
    recall: float | None = None
    auprc: float | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def is_finite(self) -> bool:
        return all(np.isfinite(v) for k, v in self.to_dict().items() if k not in ("task", "n"))


def auprc_binary(scores, positives) -> float:
    """Trapezoidal area under precision-recall, one point per distinct score
    threshold, starting from (recall 0, precision 1)."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = positives.sum()
    if n_pos == 0:
        return 0.0
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], positives[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]  # end of each tie block
    recall = np.r_[0.0, tp[last] / n_pos]
    precision = np.r_[1.0, tp[last] / (tp[last] + fp[last])]
    return float(np.sum(np.diff(recall) * (precision[1:] + precision[:-1]) / 2))


def metrics(predictions, labels, task: str) -> MetricReport:
    """MAE/SD/RMSE for regression; macro Acc/F1/Recall/AUPRC for classification.

    Classification ``predictions`` are class scores ``[N, n_classes]``.
    """
    labels = np.asarray(labels)
    predictions = np.asarray(predictions, dtype=np.float64)
    if labels.size == 0:
        raise ParameterError("metrics of an empty set")
    if len(predictions) != len(labels):
        raise DimensionError(f"{len(predictions)} predictions for {len(labels)} labels")
    n = len(labels)
    if task == "regression":
        err = predictions.reshape(n) - labels.astype(np.float64)
        ae = np.abs(err)
        return MetricReport("regression", n, mae=float(ae.mean()), sd=float(ae.std()),
                            rmse=float(np.sqrt(np.mean(err * err))))
    if task != "classification":
        raise ParameterError(f"task must be 'regression' or 'classification', got {task!r}")
    if predictions.ndim != 2:
        raise DimensionError("classification predictions must be [N, n_classes] scores")
    y = labels.astype(np.int64)
    n_classes = predictions.shape[1]
    pred = np.argmax(predictions, axis=1)
    f1s, recs, aps = [], [], []
    for c in range(n_classes):
        tp = np.sum((pred == c) & (y == c))
        fp = np.sum((pred == c) & (y != c))
        fn = np.sum((pred != c) & (y == c))
        if tp + fn == 0:
            continue  # class absent from labels
        rec = tp / (tp + fn)
        prec = tp / (tp + fp) if tp + fp else 0.0
        recs.append(rec)
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
        aps.append(auprc_binary(predictions[:, c], y == c))
    return MetricReport("classification", n, acc=float(np.mean(pred == y)), f1=float(np.mean(f1s)),
                        recall=float(np.mean(recs)), auprc=float(np.mean(aps)))
