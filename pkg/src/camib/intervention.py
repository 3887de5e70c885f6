"""Backdoor-adjustment recombination loss and assembly of the training objective."""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
import torch

from .disentangle import TaskHead, task_loss_from_outputs
from .numeric import NonFiniteValue, RngStream
from .vib import pool


class ConfigurationError(ValueError):
    pass


class NonFiniteLoss(NonFiniteValue):
    """A loss component evaluated to NaN or inf."""


@dataclass(frozen=True)
class ShortcutDraw:
    """indices[n] lists the k batch members whose shortcut part sample n borrows."""

    indices: np.ndarray

    @property
    def k(self) -> int:
        return self.indices.shape[1]


def sample_shortcut_set(batch_size: int, k: int, rng: RngStream) -> ShortcutDraw:
    """Draw k foreign indices per sample, uniformly and without replacement."""
    if batch_size < 2:
        raise ConfigurationError("shortcut recombination needs a batch of at least 2")
    if not 1 <= k <= batch_size - 1:
        raise ConfigurationError(f"k must lie in [1, {batch_size - 1}], got {k}")
    keys = rng.random((batch_size, batch_size - 1))
    picks = np.argsort(keys, axis=1, kind="stable")[:, :k]
    # Skip over each row's own index.
    own = np.arange(batch_size)[:, None]
    return ShortcutDraw(picks + (picks >= own))


def intervention_loss(
    z_c: torch.Tensor, z_s: torch.Tensor, draw: ShortcutDraw, y: torch.Tensor, head: TaskHead
) -> torch.Tensor:
    """Task loss on z_c[n] + z_s[s] averaged over all n and s in the draw."""
    idx = torch.as_tensor(draw.indices, dtype=torch.long)
    if idx.shape[0] != z_c.shape[0]:
        raise ValueError("draw does not match batch size")
    recombined = z_c.unsqueeze(1) + z_s[idx]  # N x k x L x d
    outputs = head(pool(recombined))
    return task_loss_from_outputs(outputs, y.unsqueeze(1).expand(-1, draw.k), head.task_kind)


@dataclass
class LossBreakdown:
    ib: torch.Tensor
    caus: torch.Tensor
    iv_align: torch.Tensor
    unif: torch.Tensor
    intv: torch.Tensor
    total: torch.Tensor
    lambda1: float
    lambda2: float
    beta: float

    def recompose(self) -> float:
        return float(
            self.caus + self.lambda1 * (self.iv_align + self.unif) + self.lambda2 * self.intv + self.ib
        )

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(torch.as_tensor(getattr(self, f.name)).detach()) for f in fields(self)}


def total_loss(
    parts: dict[str, torch.Tensor | float], lambda1: float, lambda2: float, beta: float = 0.0
) -> LossBreakdown:
    """caus + lambda1 * (iv_align + unif) + lambda2 * intv + sum of per-modality IB losses.

    ``parts`` may hold ``ib`` as a scalar or a list of per-modality scalars;
    missing parts count as zero.
    """
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("loss weights must be non-negative")

    def part(name):
        v = parts.get(name, 0.0)
        if isinstance(v, (list, tuple)):
            v = sum(v, torch.zeros((), dtype=torch.float64))
        return torch.as_tensor(v, dtype=torch.float64) if not isinstance(v, torch.Tensor) else v

    caus, iv, unif, intv, ib = (part(n) for n in ("caus", "iv_align", "unif", "intv", "ib"))
    for name, v in (("caus", caus), ("iv_align", iv), ("unif", unif), ("intv", intv), ("ib", ib)):
        if not bool(torch.isfinite(v)):
            raise NonFiniteLoss(f"loss part {name} is not finite")
    total = caus + lambda1 * (iv + unif) + lambda2 * intv + ib
    return LossBreakdown(ib, caus, iv, unif, intv, total, float(lambda1), float(lambda2), float(beta))
