"""Ranking/calibration metrics and the cognitive-bias diagnostics.

All diagnostics work on a model-agnostic prediction dump, so external models
can be audited with the same code path.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from .data import DataError, DifficultyTable

DUMP_COLUMNS = ("student_id", "position", "concept_id", "response", "score")
KL_EPS = 1e-9


@dataclass(frozen=True)
class PredictionDump:
    student_id: np.ndarray
    position: np.ndarray
    concept_id: np.ndarray
    response: np.ndarray
    score: np.ndarray

    @classmethod
    def from_rows(cls, rows) -> "PredictionDump":
        rows = list(rows)
        cols = list(zip(*rows)) if rows else [[]] * 5
        return cls(
            np.asarray(cols[0], dtype=object),
            np.asarray(cols[1], dtype=np.int64),
            np.asarray(cols[2], dtype=np.int64),
            np.asarray(cols[3], dtype=np.int64),
            np.asarray(cols[4], dtype=np.float64),
        )

    def __len__(self) -> int:
        return len(self.score)

    def take(self, idx) -> "PredictionDump":
        return PredictionDump(*(getattr(self, c)[idx] for c in DUMP_COLUMNS))

    def canonical(self) -> "PredictionDump":
        """Rows in a fixed order, so floating-point folds do not depend on input order."""
        keys = list(zip(self.student_id, self.position, self.concept_id, self.response, self.score))
        order = sorted(range(len(keys)), key=lambda i: (str(keys[i][0]),) + tuple(keys[i][1:]))
        return self.take(np.asarray(order, dtype=np.int64))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(DUMP_COLUMNS)
            for row in zip(self.student_id, self.position, self.concept_id, self.response, self.score):
                w.writerow([row[0], int(row[1]), int(row[2]), int(row[3]), repr(float(row[4]))])

    @classmethod
    def read_csv(cls, path) -> "PredictionDump":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            missing = set(DUMP_COLUMNS) - set(reader.fieldnames or ())
            if missing:
                raise DataError(f"dump is missing columns {sorted(missing)}")
            rows = []
            for lineno, rec in enumerate(reader, start=2):
                try:
                    row = (rec["student_id"], int(rec["position"]), int(rec["concept_id"]),
                           int(rec["response"]), float(rec["score"]))
                except (TypeError, ValueError) as exc:
                    raise DataError(f"line {lineno}: {exc}") from None
                if row[3] not in (0, 1):
                    raise DataError(f"line {lineno}: response must be 0 or 1")
                rows.append(row)
        return cls.from_rows(rows)


# ---------------------------------------------------------------------------
# Standard metrics


def auc(labels, scores) -> Optional[float]:
    """Mann-Whitney AUC with ties counted 1/2; None if only one class present."""
    labels = np.asarray(labels).astype(bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def acc(labels, scores, threshold: float = 0.5) -> float:
    labels = np.asarray(labels)
    pred = (np.asarray(scores) >= threshold).astype(labels.dtype)
    return float(np.mean(pred == labels))


def rmse(labels, scores) -> float:
    diff = np.asarray(scores, dtype=np.float64) - np.asarray(labels, dtype=np.float64)
    return float(np.sqrt(np.mean(diff ** 2)))


# ---------------------------------------------------------------------------
# Cognitive-bias diagnostics


def mispredicted(dump: PredictionDump) -> np.ndarray:
    """Rows where the thresholded prediction disagrees with the response: (f < 0.5) == r."""
    return (dump.score < 0.5).astype(np.int64) == dump.response


@dataclass
class KLResult:
    e_kl: float
    p_table: dict
    q_table: dict
    note: str = ""


def e_kl(dump: PredictionDump, literal: bool = False) -> KLResult:
    """Gap between actual and predicted per-concept correct-rate distributions on mispredictions.

    p_c is the fraction of mispredicted rows on concept c that were answered
    correctly and q_c their mean score.  Both are normalised over concepts;
    the result is KL(P || Q).  ``literal=True`` evaluates sum P log(P) / Q
    instead, for comparison with the printed form of the metric.
    """
    dump = dump.canonical()
    mask = mispredicted(dump)
    if not mask.any():
        return KLResult(0.0, {}, {}, "empty support")
    c, r, f = dump.concept_id[mask], dump.response[mask], dump.score[mask]
    concepts = np.unique(c)
    inv = np.searchsorted(concepts, c)
    counts = np.bincount(inv, minlength=len(concepts)).astype(np.float64)
    p = np.bincount(inv, weights=r.astype(np.float64), minlength=len(concepts)) / counts
    q = np.bincount(inv, weights=f, minlength=len(concepts)) / counts
    p_table = {int(k): float(v) for k, v in zip(concepts, p)}
    q_table = {int(k): float(v) for k, v in zip(concepts, q)}
    if p.sum() == 0:
        return KLResult(0.0, p_table, q_table, "no correct responses among mispredictions")
    P = p / p.sum()
    Qs = q + KL_EPS
    Q = Qs / Qs.sum()
    nz = P > 0
    if literal:
        value = float(np.sum(P[nz] * np.log(P[nz]) / Q[nz]))
    else:
        value = float(np.sum(P[nz] * np.log(P[nz] / Q[nz])))
    return KLResult(value, p_table, q_table)


def contradiction_rates(
    dump: PredictionDump,
    diff_table: DifficultyTable,
    hard_cut: float = 0.3,
    easy_cut: float = 0.7,
    all_rows: bool = False,
) -> tuple[Optional[float], Optional[float]]:
    """(guessing_rate, mistaking_rate); a rate is None when its difficulty bin is empty.

    Guessing rate: share of correct answers among (mispredicted) rows on
    concepts with diff <= hard_cut.  Mistaking rate: share of wrong answers
    among (mispredicted) rows on concepts with diff >= easy_cut.
    """
    diff = diff_table.diff[dump.concept_id]
    mask = np.ones(len(dump), dtype=bool) if all_rows else mispredicted(dump)
    hard = mask & (diff <= hard_cut)
    easy = mask & (diff >= easy_cut)
    guessing = float(np.mean(dump.response[hard] == 1)) if hard.any() else None
    mistaking = float(np.mean(dump.response[easy] == 0)) if easy.any() else None
    return guessing, mistaking


@dataclass
class MetricsReport:
    auc: Optional[float]
    acc: Optional[float]
    rmse: Optional[float]
    e_kl: float
    guessing_rate: Optional[float]
    mistaking_rate: Optional[float]
    p_table: dict = field(default_factory=dict)
    q_table: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def to_json(self) -> dict:
        d = asdict(self)
        d["p_table"] = {str(k): v for k, v in sorted(self.p_table.items())}
        d["q_table"] = {str(k): v for k, v in sorted(self.q_table.items())}
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))


def report(
    dump: PredictionDump,
    diff_table: DifficultyTable,
    literal_ekl: bool = False,
    all_rows: bool = False,
    hard_cut: float = 0.3,
    easy_cut: float = 0.7,
) -> MetricsReport:
    if len(dump) and (dump.concept_id.min() < 1 or dump.concept_id.max() > diff_table.num_concepts):
        raise DataError(
            f"dump concept ids span {dump.concept_id.min()}..{dump.concept_id.max()}, "
            f"difficulty table covers 1..{diff_table.num_concepts}"
        )
    if len(dump) and ((dump.score <= 0) | (dump.score >= 1)).any():
        raise DataError("scores must lie strictly inside (0, 1)")
    dump = dump.canonical()
    notes = []
    kl = e_kl(dump, literal=literal_ekl)
    if kl.note:
        notes.append(f"e_kl: {kl.note}")
    g, m = contradiction_rates(dump, diff_table, hard_cut, easy_cut, all_rows)
    if g is None:
        notes.append("guessing_rate: no rows on hard concepts")
    if m is None:
        notes.append("mistaking_rate: no rows on easy concepts")
    a = auc(dump.response, dump.score) if len(dump) else None
    if a is None:
        notes.append("auc: single-class dump")
    diff = diff_table.diff[dump.concept_id] if len(dump) else np.zeros(0)
    mis = mispredicted(dump)
    counts = {
        "rows": int(len(dump)),
        "mispredicted": int(mis.sum()),
        "hard_rows": int((diff <= hard_cut).sum()),
        "easy_rows": int((diff >= easy_cut).sum()),
        "hard_mispredicted": int((mis & (diff <= hard_cut)).sum()),
        "easy_mispredicted": int((mis & (diff >= easy_cut)).sum()),
    }
    return MetricsReport(
        auc=a,
        acc=acc(dump.response, dump.score) if len(dump) else None,
        rmse=rmse(dump.response, dump.score) if len(dump) else None,
        e_kl=kl.e_kl,
        guessing_rate=g,
        mistaking_rate=m,
        p_table=kl.p_table,
        q_table=kl.q_table,
        counts=counts,
        notes=notes,
    )
