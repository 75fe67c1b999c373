"""Interaction logs: parsing, preprocessing, difficulty tables, folds, bias bins, simulation.

Index 0 of the question and concept vocabularies is reserved as the pad/mask
token, so every real id produced by :func:`preprocess` starts at 1.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

CSV_COLUMNS = ("student_id", "question_id", "concept_ids", "response", "timestamp")
BIN_NAMES = ("low", "medium", "high")
UNSEEN_DIFFICULTY = 0.5


class DataError(ValueError):
    """Malformed or invalid interaction data."""


class ConfigurationError(ValueError):
    """Invalid parameters for a data operation."""


@dataclass(frozen=True)
class Interaction:
    student_id: str
    question_id: int
    concept_ids: tuple[int, ...]
    response: int
    timestamp: int

    @property
    def concept_id(self) -> int:
        if len(self.concept_ids) != 1:
            raise DataError(f"interaction has concept set {self.concept_ids}; preprocess first")
        return self.concept_ids[0]


@dataclass(frozen=True)
class StudentSequence:
    student_id: str
    interactions: tuple[Interaction, ...]

    def __len__(self) -> int:
        return len(self.interactions)

    @property
    def questions(self) -> np.ndarray:
        return np.array([it.question_id for it in self.interactions], dtype=np.int64)

    @property
    def concepts(self) -> np.ndarray:
        return np.array([it.concept_id for it in self.interactions], dtype=np.int64)

    @property
    def responses(self) -> np.ndarray:
        return np.array([it.response for it in self.interactions], dtype=np.int64)

    def correct_rate(self) -> Fraction:
        return Fraction(sum(it.response for it in self.interactions), len(self.interactions))


@dataclass(frozen=True)
class Dataset:
    sequences: tuple[StudentSequence, ...]
    num_questions: int
    num_concepts: int
    concept_map: Mapping[frozenset, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def student_ids(self) -> list[str]:
        return [s.student_id for s in self.sequences]

    def num_interactions(self) -> int:
        return sum(len(s) for s in self.sequences)

    def subset(self, student_ids: Iterable[str]) -> "Dataset":
        """Students in ``student_ids`` (parent order kept), sharing this vocabulary."""
        keep = set(student_ids)
        return Dataset(
            tuple(s for s in self.sequences if s.student_id in keep),
            self.num_questions,
            self.num_concepts,
            self.concept_map,
        )

    def by_student(self) -> dict[str, StudentSequence]:
        return {s.student_id: s for s in self.sequences}


@dataclass(frozen=True)
class DifficultyTable:
    """Per-concept training-set correct rate, indexed by concept id (row 0 is the pad)."""

    diff: np.ndarray
    support: np.ndarray

    def __post_init__(self):
        self.diff.setflags(write=False)
        self.support.setflags(write=False)

    @property
    def num_concepts(self) -> int:
        return len(self.diff) - 1

    def __getitem__(self, concept_id: int) -> float:
        return float(self.diff[concept_id])

    def to_json(self) -> dict:
        return {"diff": self.diff.tolist(), "support": self.support.tolist()}

    @classmethod
    def from_json(cls, obj: Mapping) -> "DifficultyTable":
        return cls(np.asarray(obj["diff"], dtype=np.float64), np.asarray(obj["support"], dtype=np.int64))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "DifficultyTable":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class FoldSplit:
    fold_assignments: Mapping[str, int]
    validation: Mapping[int, tuple[str, ...]]
    k: int = 5
    validation_fraction: float = 0.10
    seed: int = 0

    def test_students(self, fold: int) -> list[str]:
        return [s for s, f in self.fold_assignments.items() if f == fold]

    def validation_students(self, fold: int) -> list[str]:
        return list(self.validation[fold])

    def train_students(self, fold: int) -> list[str]:
        held = set(self.validation[fold])
        return [s for s, f in self.fold_assignments.items() if f != fold and s not in held]

    def split(self, data: Dataset, fold: int) -> tuple[Dataset, Dataset, Dataset]:
        """(train, validation, test) datasets for ``fold``."""
        if not 0 <= fold < self.k:
            raise ConfigurationError(f"fold {fold} outside 0..{self.k - 1}")
        return (
            data.subset(self.train_students(fold)),
            data.subset(self.validation_students(fold)),
            data.subset(self.test_students(fold)),
        )

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "validation_fraction": self.validation_fraction,
            "seed": self.seed,
            "folds": dict(self.fold_assignments),
            "validation": {str(f): list(v) for f, v in self.validation.items()},
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "FoldSplit":
        return cls(
            fold_assignments={str(s): int(f) for s, f in obj["folds"].items()},
            validation={int(f): tuple(v) for f, v in obj["validation"].items()},
            k=int(obj["k"]),
            validation_fraction=float(obj["validation_fraction"]),
            seed=int(obj["seed"]),
        )


@dataclass(frozen=True)
class BiasPartition:
    bins: Mapping[str, Dataset]

    def assignments(self) -> dict[str, str]:
        return {s.student_id: name for name, ds in self.bins.items() for s in ds.sequences}

    def __getitem__(self, name: str) -> Dataset:
        return self.bins[name]


# ---------------------------------------------------------------------------
# CSV ingestion


def _parse_row(row: list[str], lineno: int) -> Interaction:
    if len(row) != len(CSV_COLUMNS):
        raise DataError(f"line {lineno}: expected {len(CSV_COLUMNS)} fields, got {len(row)}")
    sid, q, cs, r, t = (x.strip() for x in row)
    try:
        question = int(q)
        concepts = tuple(int(c) for c in cs.split(";") if c.strip() != "")
        response = int(r)
        timestamp = int(t)
    except ValueError as exc:
        raise DataError(f"line {lineno}: {exc}") from None
    if response not in (0, 1):
        raise DataError(f"line {lineno}: response must be 0 or 1, got {response}")
    return Interaction(sid, question, concepts, response, timestamp)


def parse_csv(path, schema: Sequence[str] = CSV_COLUMNS) -> Dataset:
    """Read a raw interaction log; concept sets are kept unmerged.

    ``schema`` names the header columns holding (student_id, question_id,
    concept_ids, response, timestamp), in that order.  Rows inside a student
    are stably sorted by timestamp, so ties keep file order.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        return Dataset((), 0, 0)
    reader = csv.reader(text.splitlines())
    header = [h.strip() for h in next(reader)]
    missing = [c for c in schema if c not in header]
    if missing:
        raise DataError(f"line 1: missing columns {missing}")
    idx = [header.index(c) for c in schema]

    per_student: dict[str, list[Interaction]] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not x.strip() for x in row):
            continue
        if len(row) != len(header):
            raise DataError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        it = _parse_row([row[i] for i in idx], lineno)
        per_student.setdefault(it.student_id, []).append(it)
    return _assemble(per_student)


def _assemble(per_student: Mapping[str, list[Interaction]], concept_map=None) -> Dataset:
    seqs = tuple(
        StudentSequence(sid, tuple(sorted(its, key=lambda it: it.timestamp)))
        for sid, its in per_student.items()
    )
    q_max = max((it.question_id for s in seqs for it in s.interactions), default=0)
    c_max = max((c for s in seqs for it in s.interactions for c in it.concept_ids), default=0)
    return Dataset(seqs, q_max, c_max, concept_map or {})


def write_csv(data: Dataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for seq in data.sequences:
            for it in seq.interactions:
                w.writerow([
                    it.student_id, it.question_id, ";".join(map(str, it.concept_ids)),
                    it.response, it.timestamp,
                ])


# ---------------------------------------------------------------------------
# Preprocessing


def merge_concept_sets(sets: Iterable[tuple[int, ...]]) -> dict[frozenset, int]:
    """Assign one id per distinct concept set.

    Singleton sets keep their original id; each multi-concept combination gets
    a fresh id after the largest singleton id, in first-seen order.
    """
    ordered = list(dict.fromkeys(frozenset(s) for s in sets))
    singles = {next(iter(s)) for s in ordered if len(s) == 1}
    mapping: dict[frozenset, int] = {frozenset({c}): c for c in singles}
    fresh = max(singles, default=0)
    for s in ordered:
        if len(s) > 1:
            fresh += 1
            mapping[s] = fresh
    return mapping


def preprocess(raw: Dataset, window: int = 100, min_len: int = 5) -> Dataset:
    """Drop nameless-concept rows and short students, merge concept sets, truncate, re-index."""
    if window < 1 or min_len < 1:
        raise ConfigurationError("window and min_len must be positive")
    if window < min_len:
        raise ConfigurationError(f"window={window} is shorter than min_len={min_len}")
    kept = []
    for seq in raw.sequences:
        its = [it for it in seq.interactions if it.concept_ids]
        if len(its) >= min_len:
            kept.append((seq.student_id, its[-window:]))

    merged = merge_concept_sets(it.concept_ids for _, its in kept for it in its)
    used_concepts = sorted({merged[frozenset(it.concept_ids)] for _, its in kept for it in its})
    used_questions = sorted({it.question_id for _, its in kept for it in its})
    c_index = {c: i for i, c in enumerate(used_concepts, start=1)}
    q_index = {q: i for i, q in enumerate(used_questions, start=1)}
    concept_map = {s: c_index[m] for s, m in merged.items() if m in c_index}
    if raw.concept_map:
        # compose with an earlier merge so the map keeps pointing at original id sets
        concept_map = {
            orig: concept_map[frozenset({mid})]
            for orig, mid in raw.concept_map.items()
            if frozenset({mid}) in concept_map
        }

    seqs = []
    for sid, its in kept:
        seqs.append(StudentSequence(sid, tuple(
            Interaction(sid, q_index[it.question_id], (c_index[merged[frozenset(it.concept_ids)]],),
                        it.response, it.timestamp)
            for it in its
        )))
    return Dataset(tuple(seqs), len(used_questions), len(used_concepts), concept_map)


def compute_difficulty(train: Dataset, num_concepts: int | None = None) -> DifficultyTable:
    """diff(c) = correct / attempts on c over ``train``; unseen concepts get 0.5."""
    n = (num_concepts if num_concepts is not None else train.num_concepts) + 1
    correct = np.zeros(n, dtype=np.int64)
    support = np.zeros(n, dtype=np.int64)
    for seq in train.sequences:
        np.add.at(correct, seq.concepts, seq.responses)
        np.add.at(support, seq.concepts, 1)
    diff = np.full(n, UNSEEN_DIFFICULTY)
    seen = support > 0
    diff[seen] = correct[seen] / support[seen]
    return DifficultyTable(diff, support)


def kfold_split(data: Dataset, k: int = 5, val_frac: float = 0.10, seed: int = 0) -> FoldSplit:
    """Student-level k-fold split with a validation hold-out inside each training part."""
    students = data.student_ids
    if k < 2:
        raise ConfigurationError("k must be at least 2")
    if len(students) < k:
        raise ConfigurationError(f"need at least k={k} students, got {len(students)}")
    if not 0 <= val_frac < 1:
        raise ConfigurationError("val_frac must be in [0, 1)")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(students))
    assign = {students[j]: int(i % k) for i, j in enumerate(order)}
    validation = {}
    for fold in range(k):
        rest = sorted(s for s, f in assign.items() if f != fold)
        n_val = int(round(len(rest) * val_frac))
        if val_frac > 0 and n_val == 0 and len(rest) > 1:
            n_val = 1
        picked = np.random.default_rng([seed, fold]).permutation(len(rest))[:n_val]
        validation[fold] = tuple(rest[i] for i in sorted(picked))
    return FoldSplit(assign, validation, k, val_frac, seed)


def bias_bin(rate) -> str:
    """Bin for an overall correct rate: low <0.6 <= medium < 0.8 <= high."""
    rate = Fraction(rate) if not isinstance(rate, float) else Fraction(rate).limit_denominator(10**12)
    if rate < Fraction(3, 5):
        return "low"
    if rate < Fraction(4, 5):
        return "medium"
    return "high"


def bias_partition(data: Dataset) -> BiasPartition:
    groups: dict[str, list[str]] = {name: [] for name in BIN_NAMES}
    for seq in data.sequences:
        groups[bias_bin(seq.correct_rate())].append(seq.student_id)
    return BiasPartition({name: data.subset(ids) for name, ids in groups.items()})


# ---------------------------------------------------------------------------
# Batching


def to_arrays(sequences: Sequence[StudentSequence], max_len: int | None = None):
    """Right-padded (questions, concepts, responses, valid) int/bool arrays of shape (B, T)."""
    T = max_len or max((len(s) for s in sequences), default=1)
    B = len(sequences)
    q = np.zeros((B, T), dtype=np.int64)
    c = np.zeros((B, T), dtype=np.int64)
    r = np.zeros((B, T), dtype=np.int64)
    valid = np.zeros((B, T), dtype=bool)
    for i, s in enumerate(sequences):
        n = min(len(s), T)
        q[i, :n] = s.questions[-n:]
        c[i, :n] = s.concepts[-n:]
        r[i, :n] = s.responses[-n:]
        valid[i, :n] = True
    return q, c, r, valid


# ---------------------------------------------------------------------------
# Synthetic students


@dataclass(frozen=True)
class SimulationTruth:
    theta: dict[str, float]
    difficulty: np.ndarray           # per question id (index 0 unused)
    question_concept: np.ndarray     # per question id
    guess_flags: dict[str, list[int]]
    slip_flags: dict[str, list[int]]
    guess: float
    slip: float

    def p_correct(self, student_id: str, question_id: int) -> float:
        return response_probability(self.theta[student_id], self.difficulty[question_id], self.guess, self.slip)

    def to_json(self) -> dict:
        return {
            "guess": self.guess,
            "slip": self.slip,
            "theta": self.theta,
            "difficulty": {str(q): float(self.difficulty[q]) for q in range(1, len(self.difficulty))},
            "question_concept": {str(q): int(self.question_concept[q]) for q in range(1, len(self.difficulty))},
            "interactions": {
                sid: [{"guess_flag": g, "slip_flag": s}
                      for g, s in zip(self.guess_flags[sid], self.slip_flags[sid])]
                for sid in self.theta
            },
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))


def response_probability(theta, b, guess: float, slip: float):
    return guess + (1.0 - guess - slip) / (1.0 + np.exp(-(np.asarray(theta) - np.asarray(b))))


def simulate(
    num_students: int,
    num_questions: int,
    num_concepts: int,
    guess: float = 0.1,
    slip: float = 0.1,
    difficulty_skew: float = 0.0,
    seed: int = 0,
    length: int = 50,
    concept_spread: float = 1.5,
    question_spread: float = 0.5,
) -> tuple[Dataset, SimulationTruth]:
    """Sample a corpus from a guess/slip IRT student model.

    Each concept gets a base difficulty from a skew-normal with shape
    ``difficulty_skew`` (negative values leave a tail of very easy concepts);
    each question adds Gaussian jitter around its concept's base.  A response
    is correct when the student knows the item (prob. sigmoid(theta - b)) and
    does not slip, or does not know it and guesses.
    """
    from scipy.stats import skewnorm

    if min(num_students, num_questions, num_concepts, length) < 1:
        raise ConfigurationError("counts must be positive")
    if not (0 <= guess < 1 and 0 <= slip < 1):
        raise ConfigurationError("guess and slip must lie in [0, 1)")
    if guess + slip >= 1:
        raise ConfigurationError("guess + slip must be < 1")

    rng = np.random.default_rng(seed)
    concept_base = skewnorm.rvs(difficulty_skew, scale=concept_spread, size=num_concepts, random_state=rng)
    q_concept = np.concatenate([[0], rng.permutation(np.arange(num_questions) % num_concepts) + 1])
    b = np.concatenate([[0.0], concept_base[q_concept[1:] - 1] + question_spread * rng.standard_normal(num_questions)])

    per_student: dict[str, list[Interaction]] = {}
    theta, g_flags, s_flags = {}, {}, {}
    width = len(str(num_students - 1))
    for i in range(num_students):
        sid = f"s{i:0{width}d}"
        th = float(rng.standard_normal())
        qs = rng.integers(1, num_questions + 1, size=length)
        knows = rng.random(length) < 1.0 / (1.0 + np.exp(-(th - b[qs])))
        slipped = rng.random(length) < slip
        guessed = rng.random(length) < guess
        resp = np.where(knows, ~slipped, guessed).astype(int)
        theta[sid] = th
        g_flags[sid] = [int(x) for x in (~knows & guessed)]
        s_flags[sid] = [int(x) for x in (knows & slipped)]
        per_student[sid] = [
            Interaction(sid, int(q), (int(q_concept[q]),), int(r), t)
            for t, (q, r) in enumerate(zip(qs, resp))
        ]
    data = _assemble(per_student)
    data = Dataset(data.sequences, num_questions, num_concepts, {frozenset({c}): c for c in range(1, num_concepts + 1)})
    truth = SimulationTruth(theta, b, q_concept, g_flags, s_flags, guess, slip)
    return data, truth
