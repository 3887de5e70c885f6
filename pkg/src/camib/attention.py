"""Instrumental variable from single-head self-attention over all modality tokens.

Tokens are flattened modality-major (index ``m * L + t``), attended with bare
scaled dot-product attention, then folded back to M x L x d and summed over
modalities.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .numeric import DTYPE, RngStream, softmax_rows


class AttentionParams(nn.Module):
    def __init__(self, d: int, rng: RngStream | None = None):
        super().__init__()
        self.d = d
        bound = 1.0 / math.sqrt(d)
        mats = {}
        for name in ("W_Q", "W_K", "W_V"):
            if rng is None:
                mats[name] = torch.zeros(d, d, dtype=DTYPE)
            else:
                mats[name] = rng.child(name).uniform((d, d), -bound, bound)
        self.W_Q = nn.Parameter(mats["W_Q"])
        self.W_K = nn.Parameter(mats["W_K"])
        self.W_V = nn.Parameter(mats["W_V"])

    @classmethod
    def from_matrices(cls, W_Q, W_K, W_V) -> "AttentionParams":
        W_Q = torch.as_tensor(W_Q, dtype=DTYPE)
        p = cls(W_Q.shape[0])
        with torch.no_grad():
            p.W_Q.copy_(W_Q)
            p.W_K.copy_(torch.as_tensor(W_K, dtype=DTYPE))
            p.W_V.copy_(torch.as_tensor(W_V, dtype=DTYPE))
        return p


@dataclass
class AttentionTrace:
    scores: torch.Tensor
    weights: torch.Tensor
    values: torch.Tensor
    attended: torch.Tensor


def flatten_tokens(z: torch.Tensor) -> torch.Tensor:
    """(..., M, L, d) -> (..., M*L, d), modality-major."""
    return z.reshape(*z.shape[:-3], z.shape[-3] * z.shape[-2], z.shape[-1])


def attention_scores(z_flat: torch.Tensor, params: AttentionParams) -> torch.Tensor:
    d = z_flat.shape[-1]
    if d != params.d:
        raise ValueError(f"token dim {d} does not match attention dim {params.d}")
    q = z_flat @ params.W_Q
    k = z_flat @ params.W_K
    return q @ k.transpose(-1, -2) / math.sqrt(d)


def attended_values(weights: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
    """V_hat_i = sum_j alpha_ij v_j."""
    return weights @ values


def attention_trace(z_flat: torch.Tensor, params: AttentionParams) -> AttentionTrace:
    scores = attention_scores(z_flat, params)
    weights = softmax_rows(scores)
    values = z_flat @ params.W_V
    return AttentionTrace(scores, weights, values, attended_values(weights, values))


def aggregate_instrument(v_hat: torch.Tensor, M: int, L: int, reduce: str = "sum") -> torch.Tensor:
    """Fold (..., M*L, d) back to (..., M, L, d) and reduce over modalities."""
    if v_hat.shape[-2] != M * L:
        raise ValueError(f"token count {v_hat.shape[-2]} != M*L = {M * L}")
    folded = v_hat.reshape(*v_hat.shape[:-2], M, L, v_hat.shape[-1])
    if reduce == "sum":
        return folded.sum(dim=-3)
    if reduce == "mean":
        return folded.mean(dim=-3)
    raise ValueError(f"unknown modality reduction {reduce!r}")


def instrument(z: torch.Tensor, params: AttentionParams, reduce: str = "sum") -> torch.Tensor:
    """Stacked latents (N, M, L, d) -> instrument V of shape (N, L, d)."""
    if z.dim() < 3:
        raise ValueError("stacked latents need shape (..., M, L, d)")
    M, L = z.shape[-3], z.shape[-2]
    trace = attention_trace(flatten_tokens(z), params)
    return aggregate_instrument(trace.attended, M, L, reduce)
