"""Training loop, evaluation, ablation and hyperparameter sweeps."""
from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .intervention import ConfigurationError
from .metrics import MetricsReport, classification_report, regression_report
from .model import CaMIBModel
from .numeric import NonFiniteValue, RngStream
from .synthetic import Split, SyntheticDataset, read_container
from .vib import BETA_ON_KL, BETA_ON_LIKELIHOOD, CLASSIFICATION

log = logging.getLogger("camib.train")

ABLATION_FLAGS = ("no_iv", "no_unif", "kl_to_mse", "no_intv", "no_ib")
FULLY_ABLATED = "no_iv+no_unif+no_intv+no_ib"
SWEEPABLE = ("lambda1", "lambda2", "beta")


class TrainingDivergence(FloatingPointError):
    def __init__(self, step: int, value: float):
        self.step = step
        super().__init__(f"non-finite loss {value} at step {step}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    warmup_fraction: float = 0.1
    dropout_rate: float = 0.5
    d: int = 32
    hidden: int = 64
    lambda1: float = 0.2
    lambda2: float = 0.3
    beta: float = 1e-4
    k_shortcuts: int = 1
    mc_samples: int = 1
    ib_form: str = BETA_ON_KL
    weight_decay: float = 0.01
    fusion_activation: str = "tanh"
    aggregate: str = "sum"
    seed: int = 0
    no_iv: bool = False
    no_unif: bool = False
    kl_to_mse: bool = False
    no_intv: bool = False
    no_ib: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.d < 1 or self.hidden < 1:
            raise ConfigurationError("epochs, batch_size, d and hidden must be positive")
        if self.learning_rate < 0 or not 0 <= self.warmup_fraction <= 1:
            raise ConfigurationError("learning_rate must be >= 0 and warmup_fraction in [0, 1]")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigurationError("dropout_rate must lie in [0, 1)")
        if min(self.lambda1, self.lambda2, self.beta, self.weight_decay) < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if self.ib_form not in (BETA_ON_KL, BETA_ON_LIKELIHOOD):
            raise ConfigurationError(f"unknown ib_form {self.ib_form!r}")
        if self.k_shortcuts < 1 or self.mc_samples < 1:
            raise ConfigurationError("k_shortcuts and mc_samples must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


# Published per-dataset settings; kept as named profiles, not desk defaults.
PUBLISHED_PROFILES = {
    "cmu-mosi": dict(batch_size=8, epochs=30, learning_rate=1e-5, dropout_rate=0.5, d=512,
                     lambda1=0.2, lambda2=0.3, beta=1e-4),
    "cmu-mosei": dict(batch_size=32, epochs=15, learning_rate=1e-5, dropout_rate=0.1, d=512,
                      lambda1=1.0, lambda2=0.7, beta=1e-2),
    "ur-funny": dict(batch_size=256, epochs=20, learning_rate=2e-5, dropout_rate=0.6, d=128,
                     lambda1=0.1, lambda2=0.2, beta=1e-5),
    "mustard": dict(batch_size=64, epochs=10, learning_rate=7e-5, dropout_rate=0.5, d=256,
                    lambda1=0.8, lambda2=0.3, beta=1e-4),
    "cmu-mosi-ood-7": dict(batch_size=8, epochs=30, learning_rate=1e-5, dropout_rate=0.5, d=512,
                           lambda1=0.2, lambda2=0.9, beta=1e-4),
    "cmu-mosi-ood-2": dict(batch_size=8, epochs=30, learning_rate=1e-5, dropout_rate=0.5, d=512,
                           lambda1=1.0, lambda2=0.9, beta=1e-4),
}


def published_profile(name: str, **overrides) -> TrainConfig:
    if name not in PUBLISHED_PROFILES:
        raise ValueError(f"unknown profile {name!r}; choose from {sorted(PUBLISHED_PROFILES)}")
    return TrainConfig(**{**PUBLISHED_PROFILES[name], **overrides})


def apply_variant(config: TrainConfig, variant: str) -> TrainConfig:
    """Switch on the ablation flags named in ``variant`` ("full" or flags joined by '+')."""
    if variant == "full":
        return config
    flags = variant.split("+")
    bad = [f for f in flags if f not in ABLATION_FLAGS]
    if bad:
        raise ValueError(f"unknown ablation variant(s) {bad}; known: {ABLATION_FLAGS}")
    config = replace(config, **{f: True for f in flags})
    if config.no_intv:
        config = replace(config, lambda2=0.0)
    return config


def learning_rate_at(step: int, base_lr: float, warmup_steps: int) -> float:
    """Linear warm-up from 0 over ``warmup_steps``, then constant."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    return base_lr


@dataclass
class TrainedModel:
    model: CaMIBModel
    config: TrainConfig
    history: list[dict] = field(default_factory=list)
    label_range: float = 6.0
    n_modalities: int = 1
    d_in: int = 1

    def history_json(self) -> str:
        return json.dumps(self.history, sort_keys=True) + "\n"


def build_model(config: TrainConfig, n_modalities: int, d_in: int, task_kind: str, n_classes: int,
                rng: RngStream) -> CaMIBModel:
    return CaMIBModel(
        n_modalities, d_in, config.d, task_kind, n_classes,
        hidden=config.hidden, dropout_rate=config.dropout_rate,
        fusion_activation=config.fusion_activation, aggregate=config.aggregate, rng=rng,
    )


def train(config: TrainConfig, dataset: SyntheticDataset, rng: RngStream | None = None) -> TrainedModel:
    """Minimize the full objective with minibatch AdamW and linear warm-up.

    All randomness (init, data order, noise draws, dropout, shortcut draws)
    comes from ``rng`` (default ``RngStream(config.seed)``) through named
    child streams, so equal seeds give bit-identical runs.
    """
    master = rng or RngStream(config.seed)
    spec = dataset.spec
    data = dataset.train.batch
    model = build_model(config, spec.M, spec.d_in, spec.task_kind, spec.n_classes, master.child("init"))
    label_range = dataset.label_range if spec.task_kind != CLASSIFICATION else 6.0
    opt = torch.optim.AdamW(
        model.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8,
        weight_decay=config.weight_decay,
    )
    n = data.size
    steps_per_epoch = math.ceil(n / config.batch_size)
    warmup_steps = round(config.warmup_fraction * steps_per_epoch * config.epochs)
    result = TrainedModel(model, config, [], label_range, spec.M, spec.d_in)
    step = 0
    warned = False
    model.train()
    for epoch in range(config.epochs):
        order = master.child("order").child(epoch).permutation(n)
        for start in range(0, n, config.batch_size):
            batch = data.take(order[start:start + config.batch_size])
            if batch.size < 2 and config.lambda2 > 0 and not config.no_intv and not warned:
                log.warning("batch of size 1: intervention loss skipped for this step")
                warned = True
            lr = learning_rate_at(step, config.learning_rate, warmup_steps)
            for group in opt.param_groups:
                group["lr"] = lr
            try:
                parts = model.losses(batch.inputs, batch.labels, config, master.child("step").child(step),
                                     label_range)
            except NonFiniteValue as exc:
                raise TrainingDivergence(step, float("nan")) from exc
            total = float(parts.total.detach())
            if not math.isfinite(total):
                raise TrainingDivergence(step, total)
            opt.zero_grad(set_to_none=True)
            parts.total.backward()
            opt.step()
            record = parts.as_floats()
            record.update(step=step, epoch=epoch, lr=lr)
            result.history.append(record)
            step += 1
        if config.epochs and log.isEnabledFor(logging.INFO):
            last = result.history[-steps_per_epoch:]
            log.info("epoch %d: total %.4f caus %.4f", epoch,
                     np.mean([h["total"] for h in last]), np.mean([h["caus"] for h in last]))
    model.eval()
    return result


def predictions(trained: TrainedModel, split: Split) -> np.ndarray:
    out = trained.model.predict(split.batch.inputs)
    if trained.model.task_kind == CLASSIFICATION:
        return out.argmax(dim=-1).numpy()
    return out.numpy()


def evaluate(trained: TrainedModel, split: Split) -> MetricsReport:
    if split.size == 0:
        raise ValueError("cannot evaluate an empty split")
    pred = predictions(trained, split)
    truth = split.batch.labels.numpy()
    if trained.model.task_kind == CLASSIFICATION:
        return classification_report(pred, truth, trained.model.n_classes)
    return regression_report(pred, truth)


def headline(report: MetricsReport) -> float:
    """Selection/summary metric: Acc2 (classification) or negative MAE (regression)."""
    if report.mae is not None:
        return -report.mae
    return report.acc2_incl_zero


# ---------------------------------------------------------------- persistence

MODEL_FORMAT = "camib-model"


def save_model(trained: TrainedModel, path: str | Path) -> None:
    state = trained.model.state_dict()
    header = {
        "format": MODEL_FORMAT,
        "version": 1,
        "config": asdict(trained.config),
        "meta": {
            "task_kind": trained.model.task_kind,
            "n_classes": trained.model.n_classes,
            "label_range": trained.label_range,
            "n_modalities": trained.n_modalities,
            "d_in": trained.d_in,
        },
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in state.items()],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for v in state.values():
            fh.write(np.ascontiguousarray(v.detach().numpy(), dtype="<f8").tobytes())


def load_model(path: str | Path) -> TrainedModel:
    header, arrays = read_container(path)
    if header.get("format") != MODEL_FORMAT:
        raise ValueError(f"{path} is not a {MODEL_FORMAT} file")
    config = TrainConfig.from_dict(header["config"])
    meta = header["meta"]
    model = build_model(config, meta["n_modalities"], meta["d_in"], meta["task_kind"],
                        meta["n_classes"], RngStream(0))
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
    model.eval()
    return TrainedModel(model, config, [], meta["label_range"], meta["n_modalities"], meta["d_in"])


# ---------------------------------------------------------------- ablation / sweep

METRIC_NAMES = ("acc7", "acc2_incl_zero", "acc2_excl_zero", "f1_weighted", "mae", "corr")
EVAL_SPLITS = ("test_id", "test_ood")


def _summarize(rows: list[dict], key: str) -> list[dict]:
    groups: dict = {}
    for row in rows:
        groups.setdefault((row[key], row["split"]), []).append(row["metrics"])
    summary = []
    for (name, split_name), reports in groups.items():
        entry = {key: name, "split": split_name, "runs": len(reports)}
        for metric in METRIC_NAMES:
            vals = [r[metric] for r in reports if r[metric] is not None]
            if vals:
                entry[metric] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
        summary.append(entry)
    return summary


def _table(summary: list[dict], key: str) -> str:
    metrics = [m for m in METRIC_NAMES if any(m in s for s in summary)]
    head = f"{key:<34} {'split':<9} " + " ".join(f"{m:>17}" for m in metrics)
    lines = [head, "-" * len(head)]
    for s in summary:
        cells = []
        for m in metrics:
            cells.append(f"{s[m]['mean']:8.4f}+-{s[m]['std']:.4f}" if m in s else f"{'-':>17}")
        lines.append(f"{str(s[key]):<34} {s['split']:<9} " + " ".join(cells))
    return "\n".join(lines) + "\n"


@dataclass
class AblationReport:
    rows: list[dict]
    variants: list[str]
    seeds: list[int]

    def summary(self) -> list[dict]:
        return _summarize(self.rows, "variant")

    def mean(self, variant: str, split: str, metric: str = "acc2_incl_zero") -> float:
        vals = [r["metrics"][metric] for r in self.rows if r["variant"] == variant and r["split"] == split]
        return float(np.mean(vals))

    def to_text(self) -> str:
        return _table(self.summary(), "variant")

    def to_dict(self) -> dict:
        return {"variants": self.variants, "seeds": self.seeds, "rows": self.rows, "summary": self.summary()}


def _run_one(config: TrainConfig, dataset: SyntheticDataset, splits=EVAL_SPLITS):
    trained = train(config, dataset)
    return trained, {name: evaluate(trained, dataset.split(name)).to_dict() for name in splits}


def ablate(base_config: TrainConfig, dataset: SyntheticDataset, variants, seeds) -> AblationReport:
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("ablate needs at least one seed")
    names = ["full"] + [v for v in variants if v != "full"]
    configs = {v: apply_variant(base_config, v) for v in names}  # validates names up front
    rows = []
    for variant in names:
        for seed in seeds:
            _, metrics = _run_one(replace(configs[variant], seed=seed), dataset)
            for split_name, m in metrics.items():
                rows.append({"variant": variant, "seed": seed, "split": split_name, "metrics": m})
            log.info("ablation %s seed %d: OOD acc2 %.4f", variant, seed,
                     metrics["test_ood"]["acc2_incl_zero"] or float("nan"))
    return AblationReport(rows, names, seeds)


@dataclass
class SweepReport:
    rows: list[dict]
    grid: dict

    def summary(self) -> list[dict]:
        return _summarize(self.rows, "point")

    def to_text(self) -> str:
        return _table(self.summary(), "point")

    def to_dict(self) -> dict:
        return {"grid": self.grid, "rows": self.rows, "summary": self.summary()}


def parse_grid(text: str) -> dict[str, list[float]]:
    """Parse ``"lambda1=0.1,0.2;beta=1e-4"`` into a grid dict."""
    grid = {}
    for chunk in filter(None, (c.strip() for c in text.split(";"))):
        if "=" not in chunk:
            raise ValueError(f"grid entry {chunk!r} is not name=v1,v2,...")
        name, values = chunk.split("=", 1)
        grid[name.strip()] = [float(v) for v in values.split(",") if v.strip()]
    return grid


def sweep(base_config: TrainConfig, dataset: SyntheticDataset, grid: dict, seeds=None) -> SweepReport:
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ValueError("sweep grid must be non-empty")
    bad = [k for k in grid if k not in SWEEPABLE]
    if bad:
        raise ValueError(f"cannot sweep {bad}; sweepable: {SWEEPABLE}")
    seeds = [base_config.seed] if seeds is None else [int(s) for s in seeds]
    keys = list(grid)
    rows = []
    for values in itertools.product(*(grid[k] for k in keys)):
        point = dict(zip(keys, values))
        label = ",".join(f"{k}={v:g}" for k, v in point.items())
        for seed in seeds:
            _, metrics = _run_one(replace(base_config, seed=seed, **point), dataset,
                                  ("val",) + EVAL_SPLITS)
            for split_name, m in metrics.items():
                rows.append({"point": label, "params": point, "seed": seed, "split": split_name, "metrics": m})
    return SweepReport(rows, {k: list(v) for k, v in grid.items()})


def best_point(report: SweepReport) -> Optional[str]:
    """Grid point with the best mean validation headline metric."""
    scores: dict = {}
    for row in report.rows:
        if row["split"] == "val":
            m = MetricsReport(**row["metrics"])
            scores.setdefault(row["point"], []).append(headline(m))
    return max(scores, key=lambda k: np.mean(scores[k])) if scores else None
