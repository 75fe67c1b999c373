"""Losses, the training loop with early stopping, evaluation dumps, checkpoints, gradient checks."""

from __future__ import annotations

import copy
import io
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional

import numpy as np
import torch

from .data import Dataset, DifficultyTable, compute_difficulty, to_arrays
from .metrics import PredictionDump, acc, auc, rmse
from .model import ABLATIONS, DisentangledKT, ModelConfig

log = logging.getLogger(__name__)

_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 512
    learning_rate: float = 0.001
    dropout: float = 0.05
    dim: int = 64
    num_layers: int = 2
    num_heads: int = 2
    window: int = 100
    patience: int = 10
    max_epochs: int = 200
    seed: int = 0
    cl_weight: float = 1.0
    beta: float = 0.1
    gamma: float = 0.2
    lambda_seed: int = 0
    ablations: tuple[str, ...] = ()
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    dtype: str = "float32"

    def __post_init__(self):
        if min(self.batch_size, self.dim, self.window, self.max_epochs, self.num_layers, self.num_heads) < 1:
            raise ValueError("sizes must be positive")
        if self.patience < 1:
            raise ValueError("patience must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.cl_weight < 0:
            raise ValueError("cl_weight must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        unknown = set(self.ablations) - set(ABLATIONS)
        if unknown:
            raise ValueError(f"unknown ablations {sorted(unknown)}")
        object.__setattr__(self, "ablations", tuple(sorted(set(self.ablations))))

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def model_config(self, num_questions: int, num_concepts: int) -> ModelConfig:
        return ModelConfig(
            num_questions=num_questions, num_concepts=num_concepts, dim=self.dim,
            num_layers=self.num_layers, num_heads=self.num_heads, dropout=self.dropout,
            beta=self.beta, gamma=self.gamma, lambda_seed=self.lambda_seed,
            ablations=tuple(a for a in self.ablations if a != "no_loss_cl"),
        )

    def to_json(self) -> dict:
        d = asdict(self)
        d["ablations"] = list(self.ablations)
        return d

    @classmethod
    def from_json(cls, obj) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        kw = dict(obj)
        if "ablations" in kw:
            ab = kw["ablations"]
            kw["ablations"] = tuple(ab.split(",") if isinstance(ab, str) else ab)
            kw["ablations"] = tuple(a for a in kw["ablations"] if a)
        return cls(**kw)


# ---------------------------------------------------------------------------
# Losses


def _per_sequence_mean(values, valid):
    """Mean over valid positions within each sequence, then over sequences that have any."""
    valid = valid.to(values.dtype)
    n = valid.sum(-1)
    if values.dim() == 1:
        return (values * valid).sum() / n.clamp(min=1)
    has = n > 0
    per_seq = (values * valid).sum(-1)[has] / n[has]
    return per_seq.mean() if per_seq.numel() else values.sum() * 0


def bce_loss(r_hat, r, valid, from_logits: bool = False):
    """Binary cross-entropy over valid positions (mean reduction).

    With ``from_logits=True`` the first argument holds pre-sigmoid logits and
    the numerically stable formulation is used.
    """
    r = r.to(r_hat.dtype)
    if from_logits:
        per = torch.nn.functional.binary_cross_entropy_with_logits(r_hat, r, reduction="none")
    else:
        per = -(r * torch.log(r_hat) + (1 - r) * torch.log1p(-r_hat))
    return _per_sequence_mean(per, valid)


def cl_regularizer(S_plus, S_minus, valid):
    """Mean Euclidean distance between the two counterfactual interaction streams."""
    return _per_sequence_mean(torch.linalg.vector_norm(S_plus - S_minus, dim=-1), valid)


def total_loss(bce, cl, config: TrainConfig):
    if "no_loss_cl" in config.ablations:
        return bce
    return bce - config.cl_weight * cl


# ---------------------------------------------------------------------------
# Batching


@dataclass
class EncodedData:
    student_ids: list
    q: torch.Tensor
    c: torch.Tensor
    r: torch.Tensor
    valid: torch.Tensor

    def __len__(self):
        return len(self.student_ids)

    def batch(self, idx):
        idx = torch.as_tensor(idx, dtype=torch.long)
        valid = self.valid[idx]
        T = max(int(valid.sum(-1).max()), 1) if len(idx) else 1
        return self.q[idx, :T], self.c[idx, :T], self.r[idx, :T], valid[:, :T]


def encode(data: Dataset, window: int = 100) -> EncodedData:
    seqs = data.sequences
    T = min(max((len(s) for s in seqs), default=1), window)
    q, c, r, valid = to_arrays(seqs, T)
    return EncodedData(data.student_ids, *(torch.from_numpy(a) for a in (q, c, r, valid)))


def _batches(n, batch_size, rng=None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


# ---------------------------------------------------------------------------
# Evaluation


@torch.no_grad()
def predict_dump(model: DisentangledKT, data: Dataset | EncodedData, batch_size: int = 512,
                 window: int = 100, keep_cv: bool = False):
    """Eval-mode predictions for every valid position.

    Returns a :class:`PredictionDump`; with ``keep_cv=True`` also a mapping
    student_id -> list of contradiction flags.
    """
    enc = data if isinstance(data, EncodedData) else encode(data, window)
    was_training = model.training
    model.eval()
    rows, cvs = [], {}
    for idx in _batches(len(enc), batch_size):
        q, c, r, valid = enc.batch(idx)
        trace = model(q, c, r, valid)
        scores = torch.sigmoid(trace.logits.double()).numpy()  # float32 sigmoid saturates to 1.0
        v = valid.numpy()
        for b, i in enumerate(idx):
            sid = enc.student_ids[i]
            n = int(v[b].sum())
            for t in range(n):
                rows.append((sid, t + 1, int(c[b, t]), int(r[b, t]), float(scores[b, t])))
            if keep_cv:
                cvs[sid] = trace.cv[b, :n].int().tolist()
    model.train(was_training)
    dump = PredictionDump.from_rows(rows)
    return (dump, cvs) if keep_cv else dump


def evaluate(model, data, batch_size=512, window=100) -> dict:
    dump = predict_dump(model, data, batch_size, window)
    return {
        "auc": auc(dump.response, dump.score),
        "acc": acc(dump.response, dump.score),
        "rmse": rmse(dump.response, dump.score),
    }


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainState:
    model: DisentangledKT
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    difficulty: DifficultyTable
    epoch: int = 0
    best_epoch: int = 0
    best_auc: float = -math.inf
    best_params: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    stopped_early: bool = False


def build_model(config: TrainConfig, num_questions: int, num_concepts: int) -> DisentangledKT:
    torch.manual_seed(config.seed)
    model = DisentangledKT(config.model_config(num_questions, num_concepts))
    return model.to(config.torch_dtype)


def _check_finite(epoch, batch_no, **terms):
    for name, value in terms.items():
        if not torch.isfinite(value):
            hint = " (the subtracted regularizer is unbounded below; lower cl_weight)" if name == "cl" else ""
            raise TrainingDiverged(f"epoch {epoch}, batch {batch_no}: {name} = {value.item()}{hint}")


def fit(
    train_data: Dataset,
    val_data: Dataset,
    config: TrainConfig,
    difficulty: Optional[DifficultyTable] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> TrainState:
    """Adam training with early stopping on validation AUC; returns the best-AUC state.

    ``difficulty`` defaults to the per-concept correct rates of ``train_data``.
    ``on_epoch`` receives one log record per epoch.
    """
    if len(train_data) == 0 or len(val_data) == 0:
        raise ValueError("training and validation splits must be non-empty")
    nq = max(train_data.num_questions, val_data.num_questions)
    nc = max(train_data.num_concepts, val_data.num_concepts)
    if difficulty is None:
        difficulty = compute_difficulty(train_data, nc)
    model = build_model(config, nq, nc)
    model.set_difficulty(difficulty.diff)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.learning_rate,
        betas=(config.adam_beta1, config.adam_beta2), eps=config.adam_eps,
    )
    state = TrainState(model, optimizer, config, difficulty)

    train_enc = encode(train_data, config.window)
    val_enc = encode(val_data, config.window)
    shuffle_rng = np.random.default_rng([config.seed, 1])
    lambda_gen = torch.Generator().manual_seed(config.seed + 1)
    torch.manual_seed(config.seed + 2)  # dropout stream

    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        model.train()
        sums = {"loss": 0.0, "bce": 0.0, "cl": 0.0}
        n_batches = 0
        for batch_no, idx in enumerate(_batches(len(train_enc), config.batch_size, shuffle_rng)):
            q, c, r, valid = train_enc.batch(idx)
            trace = model(q, c, r, valid, generator=lambda_gen)
            bce = bce_loss(trace.logits, r, valid, from_logits=True)
            cl = cl_regularizer(trace.S_plus, trace.S_minus, valid)
            loss = total_loss(bce, cl, config)
            _check_finite(epoch, batch_no, bce=bce, cl=cl, loss=loss)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            sums["loss"] += loss.item()
            sums["bce"] += bce.item()
            sums["cl"] += cl.item()
            n_batches += 1

        val = evaluate(model, val_enc, config.batch_size, config.window)
        val_auc = val["auc"] if val["auc"] is not None else float("nan")
        record = {
            "epoch": epoch,
            "train_loss": sums["loss"] / n_batches,
            "bce": sums["bce"] / n_batches,
            "cl": sums["cl"] / n_batches,
            "val_auc": val["auc"],
            "val_acc": val["acc"],
            "val_rmse": val["rmse"],
        }
        state.history.append(record)
        state.epoch = epoch
        if on_epoch:
            on_epoch(record)
        log.debug("epoch %d %s", epoch, record)

        if val_auc > state.best_auc:
            state.best_auc, state.best_epoch = val_auc, epoch
            state.best_params = copy.deepcopy(model.state_dict())
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                state.stopped_early = True
                break

    if state.best_params:
        model.load_state_dict(state.best_params)
    return state


# ---------------------------------------------------------------------------
# Checkpoints


def _npy_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(array), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(path, model: DisentangledKT, config: TrainConfig, meta: Optional[dict] = None) -> None:
    """Zip of named .npy arrays plus ``config.json``; byte-identical for identical inputs."""
    header = {
        "model_config": model.config.to_json(),
        "train_config": config.to_json(),
        "meta": meta or {},
        "shapes": {k: list(v.shape) for k, v in model.state_dict().items()},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        def put(name, payload):
            info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, payload)

        put("config.json", json.dumps(header, indent=1, sort_keys=True))
        for name, tensor in model.state_dict().items():
            put(f"params/{name}.npy", _npy_bytes(tensor.detach().cpu().numpy()))


def load_checkpoint(path) -> tuple[DisentangledKT, TrainConfig, dict]:
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("config.json"))
        arrays = {
            n[len("params/"):-len(".npy")]: np.lib.format.read_array(io.BytesIO(zf.read(n)))
            for n in zf.namelist() if n.startswith("params/")
        }
    config = TrainConfig.from_json(header["train_config"])
    model = DisentangledKT(ModelConfig.from_json(header["model_config"])).to(config.torch_dtype)
    model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    model.eval()
    return model, config, header.get("meta", {})


# ---------------------------------------------------------------------------
# Gradient verification


@dataclass
class GradCheckReport:
    errors: dict                 # tensor name -> max relative error over trainable entries
    frozen_grad: dict            # tensor name -> max |analytic grad| over frozen pad rows
    tolerance: float
    step: float

    @property
    def failures(self) -> list:
        return [n for n, e in self.errors.items() if not e <= self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures and all(v == 0 for v in self.frozen_grad.values())

    def to_json(self) -> dict:
        return {"passed": self.passed, "tolerance": self.tolerance, "step": self.step,
                "errors": self.errors, "frozen_grad": self.frozen_grad, "failures": self.failures}


def tiny_problem(seed: int = 0, dim: int = 4, T: int = 6, num_layers: int = 1, num_heads: int = 2,
                 batch: int = 2, num_questions: int = 7, num_concepts: int = 4, ablations=()):
    """A float64 model and a fixed batch suitable for finite-difference checks."""
    cfg = TrainConfig(dim=dim, num_layers=num_layers, num_heads=num_heads, dropout=0.0,
                      dtype="float64", seed=seed, ablations=tuple(ablations))
    model = build_model(cfg, num_questions, num_concepts)
    g = torch.Generator().manual_seed(seed + 100)
    q = torch.randint(1, num_questions + 1, (batch, T), generator=g)
    c = (q % num_concepts) + 1
    r = torch.randint(0, 2, (batch, T), generator=g)
    valid = torch.ones(batch, T, dtype=torch.bool)
    if batch > 1:
        valid[1, T - 2:] = False
        q[1, T - 2:] = c[1, T - 2:] = r[1, T - 2:] = 0
    diff = torch.rand(num_concepts + 1, generator=g, dtype=torch.float64)
    model.set_difficulty(diff)
    lambdas = torch.rand(batch, T, generator=g, dtype=torch.float64)
    model.eval()
    return model, cfg, (q, c, r, valid), lambdas


def gradient_check(seed: int = 0, step: float = 1e-5, tolerance: float = 1e-4,
                   floor: float = 1e-6, **problem) -> GradCheckReport:
    """Compare autograd gradients with central finite differences on every parameter entry.

    Relative error per entry is |a - n| / max(|a|, |n|, floor).  Contradiction
    draws are frozen, so the flags are constant across perturbations.  Pad rows
    of the embedding tables are frozen: they are excluded from the comparison
    and their analytic gradient must be exactly zero.
    """
    model, cfg, (q, c, r, valid), lambdas = tiny_problem(seed, **problem)

    def objective():
        tr = model(q, c, r, valid, lambdas=lambdas)
        bce = bce_loss(tr.logits, r, valid, from_logits=True)
        return total_loss(bce, cl_regularizer(tr.S_plus, tr.S_minus, valid), cfg)

    model.zero_grad()
    objective().backward()
    frozen_rows = {
        name: m.padding_idx
        for name, m in model.named_modules()
        if isinstance(m, torch.nn.Embedding) and m.padding_idx is not None
    }
    errors, frozen = {}, {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            analytic = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
            numeric = torch.zeros_like(p)
            trainable = torch.ones_like(p, dtype=torch.bool)
            module = name.rsplit(".", 1)[0]
            if module in frozen_rows:
                trainable[frozen_rows[module]] = False
                frozen[name] = float(analytic[~trainable].abs().max())
            flat, num_flat = p.view(-1), numeric.view(-1)
            for i in torch.nonzero(trainable.view(-1)).flatten().tolist():
                orig = flat[i].item()
                flat[i] = orig + step
                up = objective().item()
                flat[i] = orig - step
                down = objective().item()
                flat[i] = orig
                num_flat[i] = (up - down) / (2 * step)
            a, n = analytic[trainable], numeric[trainable]
            denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.tensor(floor, dtype=a.dtype))
            errors[name] = float(((a - n).abs() / denom).max()) if a.numel() else 0.0
    return GradCheckReport(errors, frozen, tolerance, step)
