"""Fusion, elementwise causal/shortcut masking and the disentanglement losses."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .numeric import DTYPE, RngStream, dropout
from .vib import CLASSIFICATION, REGRESSION, _check_labels, linear, pool

ACTIVATIONS = {
    "tanh": torch.tanh,
    "relu": torch.relu,
    "identity": lambda x: x,
}


class Fusion(nn.Module):
    """Concatenate M latents per token and map M*d -> d through an affine + activation."""

    def __init__(self, n_modalities: int, d: int, activation: str = "tanh", rng: RngStream | None = None):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.n_modalities = n_modalities
        self.d = d
        self.activation = activation
        self.proj = linear(n_modalities * d, d, rng)

    def forward(self, z_cat: torch.Tensor) -> torch.Tensor:
        return ACTIVATIONS[self.activation](self.proj(z_cat))


class MaskGenerator(nn.Module):
    """Two-layer perceptron over each token's features, squashed by a sigmoid."""

    def __init__(self, d: int, hidden: int = 64, rng: RngStream | None = None):
        super().__init__()
        self.hidden = linear(d, hidden, rng.child("hidden") if rng else None)
        self.out = linear(hidden, d, rng.child("out") if rng else None)

    def forward(self, z_m: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.out(torch.relu(self.hidden(z_m))))


class TaskHead(nn.Module):
    """Pooled representation -> logits (K classes) or a scalar prediction.

    While a dropout stream is bound via :meth:`bind_dropout`, inputs are
    dropped at ``dropout_rate``; unbound (inference) it is a plain affine map.
    """

    def __init__(self, d: int, task_kind: str, n_classes: int = 2, dropout_rate: float = 0.0,
                 rng: RngStream | None = None):
        super().__init__()
        if task_kind not in (CLASSIFICATION, REGRESSION):
            raise ValueError(f"unknown task kind {task_kind!r}")
        self.task_kind = task_kind
        self.n_classes = n_classes if task_kind == CLASSIFICATION else 1
        self.dropout_rate = dropout_rate
        self.proj = linear(d, self.n_classes, rng)
        self._dropout_rng: RngStream | None = None

    def bind_dropout(self, rng: RngStream | None) -> None:
        self._dropout_rng = rng

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.proj(dropout(pooled, self.dropout_rate, self._dropout_rng))


@dataclass
class MaskPair:
    m_c: torch.Tensor
    m_s: torch.Tensor
    z_c: torch.Tensor
    z_s: torch.Tensor


def fuse(z_list: list[torch.Tensor], fusion: Fusion) -> torch.Tensor:
    if len(z_list) != fusion.n_modalities:
        raise ValueError(f"expected {fusion.n_modalities} modalities, got {len(z_list)}")
    shape = z_list[0].shape
    if any(z.shape != shape for z in z_list):
        raise ValueError("modality latents must share a shape")
    if shape[-1] != fusion.d:
        raise ValueError(f"latent dim {shape[-1]} != fusion dim {fusion.d}")
    return fusion(torch.cat(z_list, dim=-1))


def mask_probabilities(z_m: torch.Tensor, mask_mlp: MaskGenerator) -> torch.Tensor:
    return mask_mlp(z_m)


def split(z_m: torch.Tensor, m_c: torch.Tensor) -> MaskPair:
    """z_c = m_c * z_m and z_s = (1 - m_c) * z_m.

    z_s is evaluated as z_m - z_c (the same quantity algebraically) so the two
    parts add back to z_m with a single rounding at most.
    """
    if z_m.shape != m_c.shape:
        raise ValueError("mask and representation shapes differ")
    z_c = m_c * z_m
    return MaskPair(m_c=m_c, m_s=1.0 - m_c, z_c=z_c, z_s=z_m - z_c)


def iv_alignment_loss(z_c: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    if z_c.shape != v.shape:
        raise ValueError(f"z_c {tuple(z_c.shape)} and V {tuple(v.shape)} differ")
    return ((z_c - v) ** 2).mean()


def task_loss_from_outputs(outputs: torch.Tensor, y: torch.Tensor, task_kind: str) -> torch.Tensor:
    """Mean cross-entropy (classification) or mean squared error (regression)."""
    _check_labels(y, task_kind, outputs.shape[-1])
    if task_kind == CLASSIFICATION:
        flat = outputs.reshape(-1, outputs.shape[-1])
        return F.cross_entropy(flat, y.reshape(-1))
    return ((outputs.squeeze(-1) - y) ** 2).mean()


def causal_task_loss(z_c: torch.Tensor, y: torch.Tensor, head: TaskHead) -> torch.Tensor:
    return task_loss_from_outputs(head(pool(z_c)), y, head.task_kind)


def uniformity_loss(z_s: torch.Tensor, head: TaskHead, label_range: float = 6.0) -> torch.Tensor:
    """KL of the shortcut-based prediction to an uninformative prior.

    Classification: KL(p || uniform(K)). Regression: KL(N(y_hat, 1) || N(0, s^2))
    with s = ``label_range``.
    """
    out = head(pool(z_s))
    if head.task_kind == CLASSIFICATION:
        K = out.shape[-1]
        if K < 2:
            raise ValueError("uniformity loss needs K >= 2")
        log_p = F.log_softmax(out, dim=-1)
        return ((log_p.exp() * log_p).sum(dim=-1) + math.log(K)).mean()
    s = float(label_range)
    if not s > 0:
        raise ValueError("label_range must be positive")
    y_hat = out.squeeze(-1)
    return (math.log(s) - 0.5 + (1.0 + y_hat**2) / (2.0 * s * s)).mean()


def uniformity_mse_loss(z_s: torch.Tensor, head: TaskHead) -> torch.Tensor:
    """Squared distance of the shortcut prediction to the uniform vector (or to 0)."""
    out = head(pool(z_s))
    if head.task_kind == CLASSIFICATION:
        K = out.shape[-1]
        return ((F.softmax(out, dim=-1) - 1.0 / K) ** 2).mean()
    return (out.squeeze(-1) ** 2).mean()


def entropy(p: torch.Tensor) -> torch.Tensor:
    p = torch.as_tensor(p, dtype=DTYPE)
    safe = torch.where(p > 0, p, torch.ones_like(p))
    return -(p * torch.log(safe)).sum(dim=-1)
