"""Variant-IRT prediction head and per-position explanations."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

HEAD_INPUTS = {"variant": 3, "normal": 2, "none": 2}


def nde_subtract(H, H_plus, H_minus):
    """Overall ability: the factual state minus both counterfactual states."""
    return H - (H_plus + H_minus)


class PredictionHead(nn.Module):
    """sigmoid(ReLU(z W1 + b1) W2 + b2) for a head input z.

    ``kind`` selects z: ``variant`` = [(X - d_q), (H+ - H-), Q];
    ``normal`` = [(X - d_q), Q]; ``none`` = [H, Q] with no difficulty term.
    """

    def __init__(self, dim: int, kind: str = "variant"):
        super().__init__()
        if kind not in HEAD_INPUTS:
            raise ValueError(f"unknown head kind {kind!r}")
        self.kind = kind
        self.hidden = nn.Linear(HEAD_INPUTS[kind] * dim, dim)
        self.out = nn.Linear(dim, 1)

    def features(self, X, H_plus, H_minus, Q, d_q, H=None):
        if self.kind == "variant":
            return torch.cat([X - d_q.unsqueeze(-1), H_plus - H_minus, Q], dim=-1)
        if self.kind == "normal":
            return torch.cat([X - d_q.unsqueeze(-1), Q], dim=-1)
        return torch.cat([H if H is not None else X, Q], dim=-1)

    def logits(self, X, H_plus, H_minus, Q, d_q, H=None):
        z = self.features(X, H_plus, H_minus, Q, d_q, H)
        return self.out(torch.relu(self.hidden(z))).squeeze(-1)

    def forward(self, X, H_plus, H_minus, Q, d_q, H=None):
        return torch.sigmoid(self.logits(X, H_plus, H_minus, Q, d_q, H))


def predict(X, H_plus, H_minus, Q, d_q, head: PredictionHead):
    return head(X, H_plus, H_minus, Q, d_q)


# ---------------------------------------------------------------------------
# Explanations


@dataclass(frozen=True)
class Explanation:
    position: int          # 1-based
    d_q: float
    X: float
    H_plus: float
    H_minus: float
    label: str
    probability: float

    def to_json(self) -> dict:
        return asdict(self)


def minmax(values) -> np.ndarray:
    """Scale to [0, 1]; a constant sequence maps to 0.5 everywhere."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.full_like(v, 0.5)
    return (v - lo) / (hi - lo)


def state_label(d_q: float, X: float, H_plus: float, H_minus: float, mid: float = 0.5) -> str:
    """Apply the student-state template to normalised scalars.

    overperformer / mistaking:   d_q low,  X low,  H+ high, H- low
    underperformer / guessing:   d_q high, X high, H+ low,  H- high
    Anything else is "ordinary" for the dominant ability side; on an exact
    H+ == H- tie the side follows X (low overall score = overperformer).
    """
    if H_plus > H_minus:
        if d_q < mid and X < mid and H_plus >= mid and H_minus < mid:
            return "overperformer, mistaking"
        return "overperformer, ordinary"
    if H_plus < H_minus:
        if d_q >= mid and X >= mid and H_plus < mid and H_minus >= mid:
            return "underperformer, guessing"
        return "underperformer, ordinary"
    return "overperformer, ordinary" if X < mid else "underperformer, ordinary"


def explain(trace, position: int, row: int = 0) -> Explanation:
    """Explanation for 1-based ``position`` of sequence ``row`` in a forward trace."""
    valid = trace.valid[row].cpu().numpy()
    n = int(valid.sum())
    if not 1 <= position <= n:
        raise IndexError(f"position {position} outside 1..{n}")

    def scalars(t):
        t = t[row, :n].detach().double().cpu()
        return (t.mean(-1) if t.dim() == 2 else t).numpy()

    d_q = minmax(scalars(trace.d_q))
    X = minmax(scalars(trace.X))
    Hp = minmax(scalars(trace.H_plus))
    Hm = minmax(scalars(trace.H_minus))
    i = position - 1
    return Explanation(
        position=position,
        d_q=float(d_q[i]),
        X=float(X[i]),
        H_plus=float(Hp[i]),
        H_minus=float(Hm[i]),
        label=state_label(d_q[i], X[i], Hp[i], Hm[i]),
        probability=float(trace.r_hat[row, i].detach()),
    )
