"""The assembled model: IB encoders -> attention instrument / fusion -> mask -> heads."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .attention import AttentionParams, instrument
from .disentangle import (
    Fusion,
    MaskGenerator,
    MaskPair,
    TaskHead,
    causal_task_loss,
    fuse,
    iv_alignment_loss,
    mask_probabilities,
    split,
    uniformity_loss,
    uniformity_mse_loss,
)
from .intervention import LossBreakdown, intervention_loss, sample_shortcut_set, total_loss
from .numeric import RngStream
from .vib import CLASSIFICATION, GaussianEncoder, PredictiveHead, VibConfig, encode, ib_loss, pool


@dataclass
class Representation:
    latents: list[torch.Tensor]
    instrument: torch.Tensor
    fused: torch.Tensor
    masks: MaskPair


class CaMIBModel(nn.Module):
    def __init__(
        self,
        n_modalities: int,
        d_in: int,
        d: int,
        task_kind: str,
        n_classes: int = 2,
        hidden: int = 64,
        dropout_rate: float = 0.0,
        fusion_activation: str = "tanh",
        aggregate: str = "sum",
        rng: RngStream | None = None,
    ):
        super().__init__()
        rng = rng or RngStream(0)
        n_out = n_classes if task_kind == CLASSIFICATION else 1
        self.task_kind = task_kind
        self.n_classes = n_out
        self.aggregate = aggregate
        self.encoders = nn.ModuleList(
            GaussianEncoder(d_in, d, hidden, rng.child(f"encoder{m}")) for m in range(n_modalities)
        )
        self.ib_heads = nn.ModuleList(
            PredictiveHead(d, n_out, rng.child(f"ib_head{m}")) for m in range(n_modalities)
        )
        self.attention = AttentionParams(d, rng.child("attention"))
        self.fusion = Fusion(n_modalities, d, fusion_activation, rng.child("fusion"))
        self.mask = MaskGenerator(d, hidden, rng.child("mask"))
        self.head = TaskHead(d, task_kind, n_out, dropout_rate, rng.child("head"))

    def _compose(self, latents: list[torch.Tensor]) -> Representation:
        v = instrument(torch.stack(latents, dim=1), self.attention, self.aggregate)
        z_m = fuse(latents, self.fusion)
        return Representation(latents, v, z_m, split(z_m, mask_probabilities(z_m, self.mask)))

    def represent(self, inputs: list[torch.Tensor]) -> Representation:
        """Deterministic pass using posterior means; no noise, no dropout."""
        return self._compose([encode(x, enc).mu for x, enc in zip(inputs, self.encoders)])

    @torch.no_grad()
    def predict(self, inputs: list[torch.Tensor]) -> torch.Tensor:
        """Head outputs from the causal part only (logits, or scalar predictions)."""
        self.head.bind_dropout(None)
        out = self.head(pool(self.represent(inputs).masks.z_c))
        return out if self.task_kind == CLASSIFICATION else out.squeeze(-1)

    def losses(self, inputs, y, config, rng: RngStream, label_range: float = 6.0) -> LossBreakdown:
        """All loss components for one minibatch; ``config`` is a TrainConfig."""
        parts: dict = {}
        if config.no_ib:
            latents = [encode(x, enc).mu for x, enc in zip(inputs, self.encoders)]
        else:
            vib = VibConfig(latent_dim=config.d, beta=config.beta, mc_samples=config.mc_samples)
            latents, ib_parts = [], []
            for m, (x, enc, head) in enumerate(zip(inputs, self.encoders, self.ib_heads)):
                loss, z = ib_loss(
                    x, y, enc, head, vib, rng.child(f"eps{m}"), self.task_kind, return_sample=True,
                    form=config.ib_form,
                )
                ib_parts.append(loss)
                latents.append(z)
            parts["ib"] = ib_parts
        rep = self._compose(latents)
        z_c, z_s = rep.masks.z_c, rep.masks.z_s

        self.head.bind_dropout(rng.child("dropout"))
        try:
            parts["caus"] = causal_task_loss(z_c, y, self.head)
            if not config.no_iv:
                parts["iv_align"] = iv_alignment_loss(z_c, rep.instrument)
            if not config.no_unif:
                if config.kl_to_mse:
                    parts["unif"] = uniformity_mse_loss(z_s, self.head)
                else:
                    parts["unif"] = uniformity_loss(z_s, self.head, label_range)
            lambda2 = 0.0 if config.no_intv else config.lambda2
            if lambda2 > 0 and y.shape[0] >= 2:
                k = min(config.k_shortcuts, y.shape[0] - 1)
                draw = sample_shortcut_set(y.shape[0], k, rng.child("shortcut"))
                parts["intv"] = intervention_loss(z_c, z_s, draw, y, self.head)
        finally:
            self.head.bind_dropout(None)
        return total_loss(parts, config.lambda1, lambda2, 0.0 if config.no_ib else config.beta)
