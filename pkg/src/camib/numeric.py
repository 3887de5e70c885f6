"""Dense float64 arithmetic helpers, seeded RNG streams and gradient oracles.

Reverse-mode differentiation is delegated to ``torch.autograd``; everything
here runs in float64. :func:`finite_diff_grad` is a plain central-difference
loop and never touches autograd, so the two routes can check each other.
"""
from __future__ import annotations

import zlib
from typing import Callable, Mapping

import numpy as np
import torch
from torch.utils._python_dispatch import TorchDispatchMode

DTYPE = torch.float64

Params = Mapping[str, torch.Tensor]
GradientMap = dict[str, torch.Tensor]
Objective = Callable[[Params], torch.Tensor]


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or inf during a checked evaluation."""

    def __init__(self, op: str, phase: str):
        self.op = op
        self.phase = phase
        super().__init__(f"non-finite value produced by {op} during {phase}")


class NonFiniteValue(ValueError):
    """An argument or intermediate that must be finite was NaN or inf."""


def as_tensor(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=DTYPE)


class RngStream:
    """Reproducible random stream backed by numpy's Philox4x64 generator.

    Philox is counter-based, so a given ``(seed, key)`` yields the same draws on
    every platform. ``child(name)`` derives an independent stream for a named
    purpose; the key path is hashed with CRC32 (stable across interpreters,
    unlike ``hash``).
    """

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, name: str | int) -> "RngStream":
        tag = name if isinstance(name, int) else zlib.crc32(str(name).encode())
        return RngStream(self.seed, self.key + (tag,))

    def normal(self, shape) -> torch.Tensor:
        return torch.from_numpy(self._gen.standard_normal(tuple(shape)))

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> torch.Tensor:
        return torch.from_numpy(self._gen.uniform(low, high, tuple(shape)))

    def random(self, shape) -> np.ndarray:
        return self._gen.random(tuple(shape))

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def numpy(self) -> np.random.Generator:
        return self._gen


class _FiniteGuard(TorchDispatchMode):
    def __init__(self):
        super().__init__()
        self.phase = "forward"

    def __torch_dispatch__(self, func, types, args=(), kwargs=None):
        out = func(*args, **(kwargs or {}))
        for t in out if isinstance(out, (tuple, list)) else (out,):
            if isinstance(t, torch.Tensor) and t.is_floating_point():
                if not bool(torch.isfinite(t).all()):
                    raise NonFiniteError(str(func), self.phase)
        return out


def grad(objective: Objective, params: Params, check_finite: bool = True) -> GradientMap:
    """Reverse-mode gradient of a scalar objective w.r.t. every named parameter.

    With ``check_finite`` each aten op (forward and backward) is inspected and
    the first one yielding NaN/inf raises :class:`NonFiniteError`.
    """
    leaves = {k: as_tensor(v).detach().clone().requires_grad_(True) for k, v in params.items()}
    names = list(leaves)
    guard = _FiniteGuard() if check_finite else None
    if guard is not None:
        with guard:
            out = objective(leaves)
            guard.phase = "backward"
            grads = torch.autograd.grad(out, [leaves[k] for k in names], allow_unused=True)
    else:
        out = objective(leaves)
        grads = torch.autograd.grad(out, [leaves[k] for k in names], allow_unused=True)
    if out.numel() != 1:
        raise ValueError("objective must return a scalar")
    return {
        k: (g.detach() if g is not None else torch.zeros_like(leaves[k].detach()))
        for k, g in zip(names, grads)
    }


def finite_diff_grad(objective: Objective, params: Params, step: float = 1e-5) -> GradientMap:
    """Central differences (f(p+h) - f(p-h)) / 2h, one coordinate at a time."""
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    base = {k: as_tensor(v).detach().clone() for k, v in params.items()}
    out: GradientMap = {}
    with torch.no_grad():
        for name, value in base.items():
            flat = value.reshape(-1)
            g = torch.zeros_like(flat)
            for idx in range(flat.numel()):
                orig = float(flat[idx])
                flat[idx] = orig + step
                f_plus = float(objective(base))
                flat[idx] = orig - step
                f_minus = float(objective(base))
                flat[idx] = orig
                g[idx] = (f_plus - f_minus) / (2.0 * step)
            out[name] = g.reshape(value.shape)
    return out


def softmax_rows(scores: torch.Tensor) -> torch.Tensor:
    """Row-wise softmax over the last axis, max-shifted for stability."""
    if not bool(torch.isfinite(scores).all()):
        raise NonFiniteValue("softmax_rows: scores must be finite")
    shifted = scores - scores.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def max_errors(analytic: torch.Tensor, reference: torch.Tensor) -> tuple[float, float]:
    """(max abs error, abs error relative to the reference's max magnitude)."""
    a = as_tensor(analytic)
    b = as_tensor(reference)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.numel() == 0:
        return 0.0, 0.0
    abs_err = float((a - b).abs().max())
    scale = float(b.abs().max())
    rel_err = abs_err / scale if scale > 0 else abs_err
    return abs_err, rel_err


def dropout(x: torch.Tensor, rate: float, rng: RngStream | None) -> torch.Tensor:
    """Inverted dropout with a mask drawn from ``rng``; identity if rng is None."""
    if rng is None or rate <= 0.0:
        return x
    keep = torch.from_numpy(rng.random(x.shape) >= rate).to(DTYPE)
    return x * keep / (1.0 - rate)
