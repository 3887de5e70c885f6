"""Per-modality variational information-bottleneck filtering.

Each modality gets a token-wise Gaussian encoder (mu, log-variance) and a small
predictive head on the mean-pooled latent. The loss per modality is

    KL(N(mu, sigma^2) || N(0, I)) - beta * mean_l log q(y | z^(l))

averaged over the batch, with z^(l) drawn by reparameterization.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .numeric import DTYPE, RngStream

CLASSIFICATION = "classification"
REGRESSION = "regression"
BETA_ON_LIKELIHOOD = "beta_on_likelihood"
BETA_ON_KL = "beta_on_kl"


def init_linear(layer: nn.Linear, rng: RngStream) -> nn.Linear:
    bound = 1.0 / math.sqrt(layer.in_features)
    with torch.no_grad():
        layer.weight.copy_(rng.uniform(layer.weight.shape, -bound, bound))
        if layer.bias is not None:
            layer.bias.copy_(rng.uniform(layer.bias.shape, -bound, bound))
    return layer


def linear(d_in: int, d_out: int, rng: RngStream | None) -> nn.Linear:
    layer = nn.Linear(d_in, d_out, dtype=DTYPE)
    if rng is None:
        nn.init.zeros_(layer.weight)
        nn.init.zeros_(layer.bias)
        return layer
    return init_linear(layer, rng)


@dataclass(frozen=True)
class VibConfig:
    latent_dim: int = 32
    beta: float = 1e-4
    mc_samples: int = 1

    def __post_init__(self):
        if not self.beta >= 0:
            raise ValueError("beta must be non-negative")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")


@dataclass
class ModalityBatch:
    """M modality tensors (N x L x d_in each) plus labels.

    Classification labels are int64 class indices of length N; a one-hot
    N x K tensor is accepted and converted.
    """

    inputs: list[torch.Tensor]
    labels: torch.Tensor

    def __post_init__(self):
        if not self.inputs:
            raise ValueError("ModalityBatch needs at least one modality")
        n, seq = self.inputs[0].shape[:2]
        for x in self.inputs:
            if x.dim() != 3 or x.shape[:2] != (n, seq):
                raise ValueError("all modalities must share N and L")
        if self.labels.dim() == 2:
            self.labels = self.labels.argmax(dim=1)
        if self.labels.shape[0] != n:
            raise ValueError("labels length must equal N")

    @property
    def size(self) -> int:
        return self.inputs[0].shape[0]

    def take(self, idx) -> "ModalityBatch":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return ModalityBatch([x[idx] for x in self.inputs], self.labels[idx])


@dataclass
class GaussianPosterior:
    mu: torch.Tensor
    log_var: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_var.shape:
            raise ValueError("mu and log_var shapes differ")

    @property
    def sigma(self) -> torch.Tensor:
        return torch.exp(0.5 * self.log_var)


class GaussianEncoder(nn.Module):
    """Two-layer perceptron mapping each token to (mu, log_var)."""

    def __init__(self, d_in: int, latent_dim: int, hidden: int = 64, rng: RngStream | None = None):
        super().__init__()
        self.d_in = d_in
        self.latent_dim = latent_dim
        self.hidden = linear(d_in, hidden, rng.child("hidden") if rng else None)
        self.out = linear(hidden, 2 * latent_dim, rng.child("out") if rng else None)

    def forward(self, x: torch.Tensor) -> GaussianPosterior:
        h = torch.relu(self.hidden(x))
        mu, log_var = self.out(h).split(self.latent_dim, dim=-1)
        return GaussianPosterior(mu, log_var)


class PredictiveHead(nn.Module):
    """Variational decoder q(y | pooled z): logits for K classes or one scalar."""

    def __init__(self, latent_dim: int, n_out: int, rng: RngStream | None = None):
        super().__init__()
        self.proj = linear(latent_dim, n_out, rng)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.proj(pooled)


def pool(z: torch.Tensor) -> torch.Tensor:
    """Mean over sequence positions (second-to-last axis)."""
    return z.mean(dim=-2)


def encode(x: torch.Tensor, encoder: GaussianEncoder) -> GaussianPosterior:
    if x.shape[-1] != encoder.d_in:
        raise ValueError(f"input feature dim {x.shape[-1]} != encoder d_in {encoder.d_in}")
    return encoder(x)


def reparameterize(
    post: GaussianPosterior, rng: RngStream | None = None, eps: torch.Tensor | None = None
) -> torch.Tensor:
    """z = mu + sigma * eps with eps ~ N(0, I); pass ``eps`` to freeze the draw."""
    if eps is None:
        if rng is None:
            raise ValueError("reparameterize needs an rng or explicit eps")
        eps = rng.normal(post.mu.shape)
    elif eps.shape != post.mu.shape:
        raise ValueError("eps shape must match the posterior")
    return post.mu + post.sigma * eps


def kl_to_standard_normal(post: GaussianPosterior) -> torch.Tensor:
    """Closed-form KL to N(0, I), summed over all non-batch axes, batch-averaged."""
    per_elem = 0.5 * (torch.exp(post.log_var) + post.mu**2 - 1.0 - post.log_var)
    return per_elem.reshape(per_elem.shape[0], -1).sum(dim=1).mean()


def _check_labels(y: torch.Tensor, task_kind: str, n_out: int) -> None:
    if task_kind == CLASSIFICATION:
        if y.dtype not in (torch.int64, torch.int32):
            raise ValueError("classification labels must be integer class indices")
        if n_out < 2:
            raise ValueError("classification head needs at least two outputs")
    elif task_kind == REGRESSION:
        if not y.is_floating_point():
            raise ValueError("regression labels must be floating point")
        if n_out != 1:
            raise ValueError("regression head must produce a single output")
    else:
        raise ValueError(f"unknown task kind {task_kind!r}")


def log_likelihood(outputs: torch.Tensor, y: torch.Tensor, task_kind: str) -> torch.Tensor:
    """Per-sample log q(y | .) from head outputs (constant dropped for regression)."""
    _check_labels(y, task_kind, outputs.shape[-1])
    if task_kind == CLASSIFICATION:
        return F.log_softmax(outputs, dim=-1).gather(-1, y.unsqueeze(-1)).squeeze(-1)
    return -0.5 * (outputs.squeeze(-1) - y) ** 2


def predictive_log_likelihood(
    z_pooled: torch.Tensor, y: torch.Tensor, head: nn.Module, task_kind: str
) -> torch.Tensor:
    return log_likelihood(head(z_pooled), y, task_kind).mean()


def ib_loss(
    x: torch.Tensor,
    y: torch.Tensor,
    encoder: GaussianEncoder,
    head: nn.Module,
    config: VibConfig,
    rng: RngStream | None,
    task_kind: str,
    eps: torch.Tensor | None = None,
    return_sample: bool = False,
    form: str = BETA_ON_LIKELIHOOD,
):
    """Tractable IB objective for one modality.

    ``form`` picks where beta sits: ``"beta_on_likelihood"`` gives
    KL - beta * E[log q] (beta trades prediction against compression), while
    ``"beta_on_kl"`` gives beta * KL - E[log q] (beta as a compression weight).

    ``eps`` (shape mc_samples x N x L x d) freezes the noise, which the
    gradient checks rely on. With ``return_sample`` the first latent draw is
    returned alongside the loss so the rest of the model can consume it.
    """
    if config.mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    post = encode(x, encoder)
    kl = kl_to_standard_normal(post)
    if eps is None:
        if rng is None:
            raise ValueError("ib_loss needs an rng or explicit eps")
        eps = rng.normal((config.mc_samples,) + tuple(post.mu.shape))
    if eps.shape[0] != config.mc_samples:
        raise ValueError("eps leading axis must equal mc_samples")
    z = post.mu.unsqueeze(0) + post.sigma.unsqueeze(0) * eps
    ll = log_likelihood(head(pool(z)), y.unsqueeze(0).expand(config.mc_samples, -1), task_kind).mean()
    if form == BETA_ON_LIKELIHOOD:
        loss = kl - config.beta * ll
    elif form == BETA_ON_KL:
        loss = config.beta * kl - ll
    else:
        raise ValueError(f"unknown IB form {form!r}")
    if return_sample:
        return loss, z[0]
    return loss
