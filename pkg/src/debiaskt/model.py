"""Full model: embeddings -> knowledge extractor -> contradictory attention -> head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np
import torch
from torch import nn

from .contradiction import DEFAULT_BETA, DEFAULT_GAMMA, ContradictoryAttention, cv_flags
from .embedding import MASK_RESPONSE, RaschEmbedding, counterfactual_mask
from .extractor import KnowledgeExtractor
from .predictor import PredictionHead, nde_subtract

ABLATIONS = ("no_sub", "no_con", "no_irt", "normal_irt", "no_loss_cl")


@dataclass(frozen=True)
class ModelConfig:
    num_questions: int
    num_concepts: int
    dim: int = 64
    num_layers: int = 2
    num_heads: int = 2
    dropout: float = 0.05
    beta: float = DEFAULT_BETA
    gamma: float = DEFAULT_GAMMA
    mask_value: int = MASK_RESPONSE
    lambda_seed: int = 0
    ablations: tuple[str, ...] = ()

    def __post_init__(self):
        unknown = set(self.ablations) - set(ABLATIONS)
        if unknown:
            raise ValueError(f"unknown ablations {sorted(unknown)}; choose from {ABLATIONS}")
        if {"no_irt", "normal_irt"} <= set(self.ablations):
            raise ValueError("no_irt and normal_irt are mutually exclusive")
        if self.dim % self.num_heads:
            raise ValueError(f"num_heads={self.num_heads} does not divide dim={self.dim}")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        object.__setattr__(self, "ablations", tuple(sorted(set(self.ablations))))

    def has(self, flag: str) -> bool:
        return flag in self.ablations

    @property
    def head_kind(self) -> str:
        if self.has("no_irt"):
            return "none"
        if self.has("normal_irt"):
            return "normal"
        return "variant"

    def to_json(self) -> dict:
        d = asdict(self)
        d["ablations"] = list(self.ablations)
        return d

    @classmethod
    def from_json(cls, obj) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        kw = {k: v for k, v in obj.items() if k in names}
        kw["ablations"] = tuple(kw.get("ablations", ()))
        return cls(**kw)


@dataclass
class ForwardTrace:
    Q: torch.Tensor
    S: torch.Tensor
    S_plus: torch.Tensor
    S_minus: torch.Tensor
    H: torch.Tensor              # extractor output (last layer)
    H_plus: torch.Tensor
    H_minus: torch.Tensor
    X: torch.Tensor
    d_q: torch.Tensor
    logits: torch.Tensor
    r_hat: torch.Tensor
    cv: torch.Tensor
    alpha: torch.Tensor
    lambdas: torch.Tensor
    valid: torch.Tensor
    extractor_weights: list = field(default_factory=list)
    plus_weights: Optional[torch.Tensor] = None
    minus_weights: Optional[torch.Tensor] = None


class DisentangledKT(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.embedding = RaschEmbedding(config.num_questions, config.num_concepts, config.dim)
        self.extractor = KnowledgeExtractor(config.dim, config.num_layers, config.num_heads, config.dropout)
        self.contradiction = ContradictoryAttention(config.dim, config.num_heads, selective=not config.has("no_con"))
        self.head = PredictionHead(config.dim, config.head_kind)
        self.register_buffer("difficulty", torch.full((config.num_concepts + 1,), 0.5))

    def set_difficulty(self, diff) -> None:
        if isinstance(diff, torch.Tensor):
            diff = diff.detach().cpu().numpy()
        diff = torch.as_tensor(np.array(diff, dtype=np.float64), dtype=self.difficulty.dtype)
        if diff.shape != self.difficulty.shape:
            raise ValueError(f"difficulty table has shape {tuple(diff.shape)}, expected {tuple(self.difficulty.shape)}")
        self.difficulty.copy_(diff)

    def draw_lambdas(self, shape, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        """Per-position uniform draws.

        Training samples fresh values from ``generator``.  Evaluation uses one
        fixed stream indexed by position, shared by every sequence, so a
        student's predictions do not depend on batch size or padding length.
        """
        if self.training:
            return torch.rand(shape, generator=generator, dtype=self.difficulty.dtype)
        stream = np.random.default_rng(self.config.lambda_seed).random(shape[-1])
        return torch.as_tensor(stream, dtype=self.difficulty.dtype).expand(shape)

    def forward(self, q, c, r, valid, lambdas=None, generator=None) -> ForwardTrace:
        """Run on (B, T) right-padded id tensors; call ``train()``/``eval()`` to pick the mode.

        ``lambdas`` overrides the random contradiction draws (used to freeze
        them for gradient checks); otherwise training draws from ``generator``
        and evaluation from a fresh stream seeded with ``lambda_seed``.
        """
        cfg = self.config
        valid = valid.bool()
        Q, S = self.embedding.factual(q, c, r, valid)
        masked = counterfactual_mask(q, c, r, cfg.mask_value)
        S_plus, S_minus = self.embedding.counterfactual(masked, valid)
        d_q = self.embedding.difficulty(q) * valid

        H, ext_w = self.extractor(Q, S, valid, return_weights=True)

        if lambdas is None:
            lambdas = self.draw_lambdas(q.shape, generator)
        cv, alpha = cv_flags(c, r, self.difficulty, lambdas, cfg.beta, cfg.gamma, valid)
        plus, minus = self.contradiction(H, S_plus, S_minus, cv, valid)
        H_plus, H_minus = plus.H, minus.H

        X = H if cfg.has("no_sub") else nde_subtract(H, H_plus, H_minus)
        logits = self.head.logits(X, H_plus, H_minus, Q, d_q, H)
        return ForwardTrace(
            Q=Q, S=S, S_plus=S_plus, S_minus=S_minus, H=H, H_plus=H_plus, H_minus=H_minus,
            X=X, d_q=d_q, logits=logits, r_hat=torch.sigmoid(logits), cv=cv, alpha=alpha,
            lambdas=lambdas, valid=valid, extractor_weights=ext_w,
            plus_weights=plus.weights, minus_weights=minus.weights,
        )
