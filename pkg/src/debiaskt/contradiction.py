"""Contradiction flags and the selective softmax that shields guessing/mistaking.

A correct answer on a hard concept (low training correct rate) or a wrong
answer on an easy one yields a small contradiction score.  Position t is
flagged when its score falls below alpha_t ** 2, where alpha_1 = gamma and
alpha_t is the root mean of the scores at positions 1..t-1 of the same
input window.  Flags are constants in the forward pass (no gradient).
"""

from __future__ import annotations

import math
from typing import Sequence

import torch
from torch import nn

from .extractor import AttentionOutput, FeedForward, masked_softmax, shifted_attention

DEFAULT_BETA = 0.1
DEFAULT_GAMMA = 0.2


def contradiction_score(r, diff_c, lam, beta: float = DEFAULT_BETA):
    """max(lam, beta) * (1 - r + (2r - 1) diff): diff for a correct answer, 1 - diff otherwise."""
    if isinstance(r, torch.Tensor):
        return torch.clamp(lam, min=beta) * (1 - r + (2 * r - 1) * diff_c)
    return max(lam, beta) * (1 - r + (2 * r - 1) * diff_c)


def alpha_update(history: Sequence[float], gamma: float = DEFAULT_GAMMA) -> float:
    """Threshold for the next position given the scores seen so far."""
    if len(history) == 0:
        return gamma
    return math.sqrt(math.fsum(history) / len(history))


def cv_flags(c, r, diff_table, lam, beta: float = DEFAULT_BETA, gamma: float = DEFAULT_GAMMA, valid=None):
    """Flags and thresholds for (B, T) tensors.

    ``diff_table`` is a 1-D tensor indexed by concept id.  Padded positions
    never contribute to later thresholds (inputs are right-padded) and are
    never flagged.  Returns ``(cv, alpha)``, both (B, T).
    """
    diff = diff_table[c]
    r = r.to(diff.dtype)
    scores = contradiction_score(r, diff, lam.to(diff.dtype), beta)
    if valid is not None:
        scores = scores * valid
    T = scores.shape[-1]
    prior_sum = torch.cumsum(scores, dim=-1) - scores
    counts = torch.arange(T, dtype=diff.dtype, device=scores.device).expand_as(scores)
    mean_prior = prior_sum / counts.clamp(min=1)
    alpha = torch.where(counts == 0, torch.full_like(scores, gamma), torch.sqrt(mean_prior))
    cv = scores < alpha ** 2
    if valid is not None:
        cv = cv & valid
    return cv, alpha


def selective_softmax(logits: torch.Tensor, cv: torch.Tensor, visible: torch.Tensor | None = None):
    """Softmax(1 - CV_j * Softmax(logits)_ij) over visible keys.

    ``logits`` is (..., T, T); ``cv`` is (..., T) over keys and broadcast along
    queries.  ``visible`` defaults to the lower-triangular causal mask.
    """
    T = logits.shape[-1]
    if visible is None:
        visible = torch.ones(T, T, dtype=torch.bool, device=logits.device).tril()
    inner = masked_softmax(logits, visible)
    modulated = 1.0 - cv.to(inner.dtype).unsqueeze(-2) * inner
    return masked_softmax(modulated, visible)


class ContradictoryAttention(nn.Module):
    """Distribute the factual knowledge state over the two counterfactual value streams."""

    def __init__(self, dim: int, num_heads: int = 2, selective: bool = True):
        super().__init__()
        self.num_heads = num_heads
        self.selective = selective
        self.ffn_plus = FeedForward(dim)
        self.ffn_minus = FeedForward(dim)

    def _normalizer(self, cv):
        if not self.selective:
            return masked_softmax
        cv_heads = cv[:, None, :]
        return lambda logits, visible: selective_softmax(logits, cv_heads, visible)

    def forward(self, H, S_plus, S_minus, cv, valid) -> tuple[AttentionOutput, AttentionOutput]:
        norm = self._normalizer(cv)
        plus = shifted_attention(H, H, self.ffn_plus(S_plus), valid, self.num_heads, norm)
        minus = shifted_attention(H, H, self.ffn_minus(S_minus), valid, self.num_heads, norm)
        return plus, minus
