"""ROC-AUC by rank statistic and the two-task (melanoma, seborrheic keratosis) report."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import FormatError, UndefinedMetricError


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC with mid-rank ties (0.5 credit per tied pos/neg pair)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative sample")
    ranks = rankdata(scores, method="average")
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass(frozen=True)
class AucReport:
    m_auc: float
    sk_auc: float

    @property
    def avg_auc(self) -> float:
        return (self.m_auc + self.sk_auc) / 2

    def __str__(self):
        return f"M_AUC {self.m_auc:.3f}  SK_AUC {self.sk_auc:.3f}  AVG_AUC {self.avg_auc:.3f}"

    def csv_row(self) -> str:
        return f"{self.m_auc:.6f},{self.sk_auc:.6f},{self.avg_auc:.6f}"

    CSV_HEADER = "M_AUC,SK_AUC,AVG_AUC"


def report(p_mel, p_sk, melanoma, seborrheic_keratosis) -> AucReport:
    """Melanoma-vs-rest and keratosis-vs-rest AUCs from per-image probabilities."""
    return AucReport(roc_auc(p_mel, melanoma), roc_auc(p_sk, seborrheic_keratosis))


def report_from_probs(probs, class_ids) -> AucReport:
    """Convenience form taking an (N,3) probability matrix and integer class ids."""
    probs = np.asarray(probs)
    class_ids = np.asarray(class_ids)
    return report(probs[:, 0], probs[:, 1], class_ids == 0, class_ids == 1)


def read_predictions(path) -> dict[str, tuple[float, float, float]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = ["image_id", "p_mel", "p_sk", "p_nevus"]
        if reader.fieldnames is None or reader.fieldnames[:4] != need:
            raise FormatError(f"{path}: predictions header must be {','.join(need)}")
        out = {}
        for lineno, row in enumerate(reader, start=2):
            try:
                out[row["image_id"]] = (float(row["p_mel"]), float(row["p_sk"]), float(row["p_nevus"]))
            except (TypeError, ValueError):
                raise FormatError(f"{path}: line {lineno}: bad probability values") from None
    return out


def report_from_files(pred_csv, truth_csv) -> AucReport:
    from .data import load_labels

    preds = read_predictions(pred_csv)
    truth = load_labels(truth_csv)
    missing = [r.image_id for r in truth if r.image_id not in preds]
    if missing:
        raise FormatError(f"{pred_csv}: no prediction for {len(missing)} images, e.g. {missing[:3]}")
    p = np.array([preds[r.image_id] for r in truth])
    return report(p[:, 0], p[:, 1], [r.melanoma for r in truth], [r.seborrheic_keratosis for r in truth])
