"""Difficulty-scaled (Rasch) embeddings and the counterfactual masked streams.

Question embedding      Q_t = c[c_t] + d[q_t] * mu[c_t]
Interaction embedding   S_t = (c[c_t] + r[r_t]) + d[q_t] * (c[c_t] + g[r_t])

The counterfactual streams re-embed the same sequence with the incorrect
(for S+) or correct (for S-) positions masked: question/concept ids become 0,
the response becomes the mask token (2).
"""

from __future__ import annotations

import math

import torch
from torch import nn

MASK_RESPONSE = 2


def counterfactual_mask(q, c, r, mask_value: int = MASK_RESPONSE):
    """Return ``(q_pos, c_pos, r_pos, q_neg, c_neg, r_neg)``.

    Positive branch keeps correct interactions, negative keeps incorrect ones.
    Works on tensors or numpy arrays of integer ids.
    """
    q_pos, c_pos = r * q, r * c
    r_pos = mask_value + (1 - mask_value) * r
    q_neg, c_neg = (1 - r) * q, (1 - r) * c
    r_neg = mask_value * r
    return q_pos, c_pos, r_pos, q_neg, c_neg, r_neg


class RaschEmbedding(nn.Module):
    """Embedding tables; concept/question row 0 is a frozen zero pad row."""

    def __init__(self, num_questions: int, num_concepts: int, dim: int):
        super().__init__()
        self.dim = dim
        self.concept = nn.Embedding(num_concepts + 1, dim, padding_idx=0)
        self.concept_variation = nn.Embedding(num_concepts + 1, dim, padding_idx=0)
        self.question_difficulty = nn.Embedding(num_questions + 1, 1, padding_idx=0)
        self.response = nn.Embedding(3, dim)
        self.response_variation = nn.Embedding(3, dim)
        self.reset_parameters()

    def reset_parameters(self):
        bound = 1.0 / math.sqrt(self.dim)
        for emb in (self.concept, self.concept_variation, self.question_difficulty,
                    self.response, self.response_variation):
            nn.init.uniform_(emb.weight, -bound, bound)
            if emb.padding_idx is not None:
                with torch.no_grad():
                    emb.weight[emb.padding_idx].zero_()

    def difficulty(self, q):
        return self.question_difficulty(q).squeeze(-1)

    def question(self, q, c):
        return self.concept(c) + self.question_difficulty(q) * self.concept_variation(c)

    def interaction(self, q, c, r):
        cc = self.concept(c)
        return cc + self.response(r) + self.question_difficulty(q) * (cc + self.response_variation(r))

    def factual(self, q, c, r, valid=None):
        """(Q, S) for the observed sequence; padded positions are zeroed."""
        Q, S = self.question(q, c), self.interaction(q, c, r)
        if valid is not None:
            keep = valid.unsqueeze(-1).to(Q.dtype)
            Q, S = Q * keep, S * keep
        return Q, S

    def counterfactual(self, masked, valid=None):
        """(S_plus, S_minus) from the output of :func:`counterfactual_mask`."""
        q_pos, c_pos, r_pos, q_neg, c_neg, r_neg = masked
        S_plus = self.interaction(q_pos, c_pos, r_pos)
        S_minus = self.interaction(q_neg, c_neg, r_neg)
        if valid is not None:
            keep = valid.unsqueeze(-1).to(S_plus.dtype)
            S_plus, S_minus = S_plus * keep, S_minus * keep
        return S_plus, S_minus
