"""Stack of shifted causal Transformer encoders producing the knowledge state.

Pre-shift, query i attends keys 1..i.  The weight matrix is then shifted down
one row with a zero row prepended, so output i summarises interactions
1..i-1 only and output 1 is the zero vector (no history yet).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class AttentionOutput:
    H: torch.Tensor          # (B, T, d)
    weights: torch.Tensor    # (B, h, T, T), shifted; row i holds the weights used at output i


def visibility(valid: torch.Tensor) -> torch.Tensor:
    """(B, 1, T, T) boolean: query i may see key j iff j <= i and j is not padding."""
    T = valid.shape[-1]
    causal = torch.ones(T, T, dtype=torch.bool, device=valid.device).tril()
    return (causal & valid[:, None, :])[:, None]


def masked_softmax(logits: torch.Tensor, visible: torch.Tensor) -> torch.Tensor:
    """Row softmax over visible keys; rows with no visible key come out all-zero."""
    any_visible = visible.any(-1, keepdim=True)
    logits = logits.masked_fill(~visible, float("-inf")).masked_fill(~any_visible, 0.0)
    return torch.softmax(logits, dim=-1) * visible


def shift_rows(weights: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Move row i-1 to row i, put a zero row first and zero rows at padded queries."""
    shifted = torch.cat([torch.zeros_like(weights[..., :1, :]), weights[..., :-1, :]], dim=-2)
    return shifted * valid[:, None, :, None].to(weights.dtype)


def split_heads(x: torch.Tensor, h: int) -> torch.Tensor:
    B, T, d = x.shape
    return x.view(B, T, h, d // h).transpose(1, 2)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    B, h, T, dh = x.shape
    return x.transpose(1, 2).reshape(B, T, h * dh)


def shifted_attention(
    query: torch.Tensor,
    key: torch.Tensor,
    value: torch.Tensor,
    valid: torch.Tensor,
    num_heads: int,
    normalize: Optional[Callable[[torch.Tensor, torch.Tensor], torch.Tensor]] = None,
) -> AttentionOutput:
    """Multi-head scaled dot-product attention with causal masking and the one-step shift.

    ``normalize(logits, visible)`` turns (B, h, T, T) logits into weights; the
    default is :func:`masked_softmax`.  Heads are concatenated, unprojected.
    """
    d = query.shape[-1]
    if d % num_heads:
        raise ValueError(f"num_heads={num_heads} does not divide dim={d}")
    qh, kh, vh = (split_heads(x, num_heads) for x in (query, key, value))
    logits = qh @ kh.transpose(-1, -2) / math.sqrt(d / num_heads)
    visible = visibility(valid)
    weights = (normalize or masked_softmax)(logits, visible)
    weights = shift_rows(weights, valid)
    return AttentionOutput(merge_heads(weights @ vh), weights)


class FeedForward(nn.Module):
    """GeLU(x W1 + b1) W2 + b2."""

    def __init__(self, dim: int):
        super().__init__()
        self.lin1 = nn.Linear(dim, dim)
        self.lin2 = nn.Linear(dim, dim)

    def forward(self, x):
        return self.lin2(F.gelu(self.lin1(x)))


class EncoderLayer(nn.Module):
    """H = LN(Dropout(A + FFN(A))) with A the projected shifted multi-head attention."""

    def __init__(self, dim: int, num_heads: int, dropout: float = 0.05):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"num_heads={num_heads} does not divide dim={dim}")
        self.num_heads = num_heads
        self.out_proj = nn.Linear(dim, dim, bias=False)
        self.ffn = FeedForward(dim)
        self.dropout = nn.Dropout(dropout)
        self.norm = nn.LayerNorm(dim)

    def attend(self, queries, values, valid) -> AttentionOutput:
        att = shifted_attention(queries, queries, values, valid, self.num_heads)
        return AttentionOutput(self.out_proj(att.H), att.weights)

    def forward(self, queries, values, valid, return_weights: bool = False):
        att = self.attend(queries, values, valid)
        A = att.H
        H = self.norm(self.dropout(A + self.ffn(A)))
        return (H, att.weights) if return_weights else H


class KnowledgeExtractor(nn.Module):
    """Layer 1 attends over question embeddings, later layers over the previous state;
    values are always the interaction embeddings."""

    def __init__(self, dim: int, num_layers: int = 2, num_heads: int = 2, dropout: float = 0.05):
        super().__init__()
        if num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        self.layers = nn.ModuleList(EncoderLayer(dim, num_heads, dropout) for _ in range(num_layers))

    def forward(self, Q, S, valid, return_weights: bool = False):
        H, weights = Q, []
        for layer in self.layers:
            H, w = layer(H, S, valid, return_weights=True)
            weights.append(w)
        return (H, weights) if return_weights else H
