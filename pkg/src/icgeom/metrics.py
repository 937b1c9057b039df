"""Confusion matrices, one-vs-rest ROC curves, evaluation and the
invariance harness."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .net import Model, model_forward, param_count
from .pointcloud import PointCloud
from .train import prepare_cloud, softmax

INVARIANCE_TOL = 1e-5


@dataclass
class ConfusionMatrix:
    rates: np.ndarray  # (C, C), row = actual class, column = predicted
    support: np.ndarray  # (C,)


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


def confusion_matrix(predictions: Sequence[int], labels: Sequence[int], num_classes: int) -> ConfusionMatrix:
    pred = np.asarray(predictions, dtype=np.int64).reshape(-1)
    true = np.asarray(labels, dtype=np.int64).reshape(-1)
    if pred.shape != true.shape:
        raise ValueError("predictions and labels differ in length")
    for arr in (pred, true):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"class id outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes))
    np.add.at(counts, (true, pred), 1.0)
    support = counts.sum(axis=1)
    rates = np.divide(counts, support[:, None], out=np.zeros_like(counts), where=support[:, None] > 0)
    return ConfusionMatrix(rates, support.astype(np.int64))


def roc_curve(scores: Sequence[float], labels: Sequence[int]) -> RocCurve:
    """Threshold sweep from the highest score down; tied scores form one step."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one positive and one negative sample")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[ends]
    fp = np.cumsum(~y)[ends]
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, auc)


@dataclass
class EvalResult:
    confusion: ConfusionMatrix
    rocs: List[Optional[RocCurve]]  # None where a class lacks positives or negatives
    accuracy: float
    predictions: np.ndarray
    probabilities: np.ndarray


def evaluate_logits(logits: np.ndarray, labels: Sequence[int], num_classes: int) -> EvalResult:
    logits = np.asarray(logits, dtype=np.float64).reshape(-1, num_classes)
    labels = np.asarray(labels, dtype=np.int64)
    preds = logits.argmax(axis=1)  # ties -> smallest class id
    probs = softmax(logits)
    cm = confusion_matrix(preds, labels, num_classes)
    rocs = []
    for c in range(num_classes):
        is_c = labels == c
        rocs.append(roc_curve(probs[:, c], is_c) if 0 < is_c.sum() < len(labels) else None)
    acc = float(np.mean(preds == labels)) if len(labels) else float("nan")
    return EvalResult(cm, rocs, acc, preds, probs)


def evaluate(model: Model, dataset: Sequence[PointCloud], k_geom: int = 20, normalize: bool = True) -> EvalResult:
    labels = [c.label for c in dataset]
    if any(l is None for l in labels):
        raise ValueError("evaluation clouds need labels")
    if labels and max(labels) >= model.config.num_classes:
        raise ValueError("dataset has more classes than the model")
    logits = [model_forward(model, *prepare_cloud(c, k_geom, normalize))[0] for c in dataset]
    return evaluate_logits(np.array(logits).reshape(-1, model.config.num_classes), labels,
                           model.config.num_classes)


def _g9(x: float) -> str:
    return f"{x:.9g}"


def write_eval_artifacts(result: EvalResult, out_dir, n_params: Optional[int] = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [",".join(_g9(v) for v in row) for row in result.confusion.rates]
    (out / "confusion.csv").write_text("\n".join(rows) + "\n")
    for c, roc in enumerate(result.rocs):
        if roc is None:
            continue
        lines = ["fpr,tpr"] + [f"{_g9(f)},{_g9(t)}" for f, t in zip(roc.fpr, roc.tpr)]
        (out / f"roc_class_{c}.csv").write_text("\n".join(lines) + "\n")
    summary = {
        "accuracy": result.accuracy,
        "auc": [None if r is None else r.auc for r in result.rocs],
        "support": result.confusion.support.tolist(),
        "parameter_count": n_params,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Invariance harness


@dataclass
class InvarianceReport:
    permutation: float
    translation: Optional[float]
    scaling: Optional[float]
    normalized: bool
    trials: int

    @property
    def failed(self) -> bool:
        checked = [self.permutation]
        if self.normalized:
            checked += [self.translation, self.scaling]
        return any(v > INVARIANCE_TOL for v in checked if v is not None)

    def lines(self) -> List[str]:
        out = [f"permutation max |dlogit| = {self.permutation:.3e}"]
        tag = "" if self.normalized else " (informational: normalization off)"
        if self.translation is not None:
            out.append(f"translation max |dlogit| = {self.translation:.3e}{tag}")
        if self.scaling is not None:
            out.append(f"scaling     max |dlogit| = {self.scaling:.3e}{tag}")
        out.append("FAIL" if self.failed else "PASS")
        return out


def invariance_check(model: Model, cloud: PointCloud, trials: int = 50, seed: int = 0,
                     normalize: bool = True, k_geom: int = 20, max_shift: float = 100.0) -> InvarianceReport:
    """Largest logit deviation under random permutations, translations and
    uniform scalings of the input cloud.

    Without normalization only permutations are expected to be harmless; the
    translation and scaling deviations are still measured and reported.
    """
    rng = np.random.default_rng(seed)

    def logits(pts):
        return model_forward(model, *prepare_cloud(PointCloud(pts), k_geom, normalize))[0]

    pts = cloud.points
    base = logits(pts)
    perm_dev = trans_dev = scale_dev = 0.0
    for _ in range(trials):
        perm_dev = max(perm_dev, np.abs(logits(pts[rng.permutation(len(pts))]) - base).max())
        direction = rng.standard_normal(3)
        shift = direction / np.linalg.norm(direction) * rng.uniform(0.0, max_shift)
        trans_dev = max(trans_dev, np.abs(logits(pts + shift) - base).max())
        scale_dev = max(scale_dev, np.abs(logits(pts * rng.uniform(0.1, 10.0)) - base).max())
    return InvarianceReport(float(perm_dev), float(trans_dev), float(scale_dev), normalize, trials)
