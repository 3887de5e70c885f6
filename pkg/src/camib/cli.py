"""Command-line front end.

Config files are JSON with three sections, all optional::

    {
      "data":   { BiasSpec fields },
      "train":  { TrainConfig fields },
      "output": { "dir": "runs/example", "dataset": "runs/example/dataset.bin" }
    }

Unknown keys anywhere are rejected. Exit codes: 0 success, 1 validation
failure (bad arguments, bad config, missing file, failed verification),
2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from .intervention import ConfigurationError
from .synthetic import SPLITS, BiasSpec, generate, load_dataset, save_dataset, shortcut_probe
from .train import (
    TrainConfig,
    ablate,
    best_point,
    evaluate,
    load_model,
    parse_grid,
    save_model,
    sweep,
    train,
)
from .verify import CHECK_NAMES, verify_all

log = logging.getLogger("camib")

OUTPUT_KEYS = {"dir", "dataset"}
SECTIONS = {"data", "train", "output"}


class ValidationFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


@dataclass
class RunConfig:
    data: BiasSpec
    train: TrainConfig
    out_dir: Path
    dataset_path: Path


def load_config(path: str, seed: int | None = None) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: top level must be an object")
    unknown = set(raw) - SECTIONS
    if unknown:
        raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
    output = raw.get("output", {})
    bad = set(output) - OUTPUT_KEYS
    if bad:
        raise ConfigurationError(f"unknown output keys: {sorted(bad)}")
    try:
        data = BiasSpec.from_dict(raw.get("data", {}))
        train_cfg = TrainConfig.from_dict(raw.get("train", {}))
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc
    if seed is not None:
        data = replace(data, seed=seed)
        train_cfg = replace(train_cfg, seed=seed)
    out_dir = Path(output.get("dir", "runs/default"))
    dataset = Path(output["dataset"]) if "dataset" in output else out_dir / "dataset.bin"
    return RunConfig(data, train_cfg, out_dir, dataset)


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _dataset_for(cfg: RunConfig):
    """Load the configured container if it matches the spec, else generate and save it."""
    if cfg.dataset_path.is_file():
        ds = load_dataset(cfg.dataset_path)
        if ds.spec == cfg.data:
            return ds
        log.info("dataset at %s has a different spec; regenerating", cfg.dataset_path)
    ds = generate(cfg.data)
    cfg.dataset_path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, cfg.dataset_path)
    return ds


def _metrics_text(metrics: dict) -> str:
    names = ("acc7", "acc2_incl_zero", "acc2_excl_zero", "f1_weighted", "mae", "corr")
    lines = [f"{'split':<10}" + "".join(f"{n:>16}" for n in names)]
    for split, m in metrics.items():
        cells = "".join(f"{m[n]:16.4f}" if m[n] is not None else f"{'-':>16}" for n in names)
        lines.append(f"{split:<10}{cells}")
    return "\n".join(lines) + "\n"


def cmd_generate(args) -> int:
    cfg = load_config(args.config, args.seed)
    ds = generate(cfg.data)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    cfg.dataset_path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, cfg.dataset_path)
    summary = {"dataset": str(cfg.dataset_path), "spec": asdict(cfg.data)}
    if cfg.data.task_kind == "classification":
        summary["shortcut_probe"] = shortcut_probe(ds)
    _dump(cfg.out_dir / "data_summary.json", summary)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    ds = _dataset_for(cfg)
    trained = train(cfg.train, ds)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    save_model(trained, out / "model.bin")
    (out / "history.json").write_text(trained.history_json())
    keys = ["step", "epoch", "lr", "total", "caus", "iv_align", "unif", "intv", "ib"]
    rows = ["\t".join(keys)] + ["\t".join(repr(h[k]) for k in keys) for h in trained.history]
    (out / "loss_series.tsv").write_text("\n".join(rows) + "\n")
    metrics = {name: evaluate(trained, ds.split(name)).to_dict() for name in ("val",) + SPLITS[2:]}
    _dump(out / "metrics.json", {"config": asdict(cfg.train), "metrics": metrics})
    text = _metrics_text(metrics)
    (out / "report.txt").write_text(text)
    print(text, end="")
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    if args.split not in SPLITS:
        raise ConfigurationError(f"unknown split {args.split!r}; choose from {SPLITS}")
    if not Path(args.model).is_file():
        raise FileNotFoundError(f"model file not found: {args.model}")
    ds = _dataset_for(cfg)
    report = evaluate(load_model(args.model), ds.split(args.split)).to_dict()
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    _dump(cfg.out_dir / f"eval_{args.split}.json", report)
    print(_metrics_text({args.split: report}), end="")
    return 0


def cmd_verify(args) -> int:
    mutate = []
    if args.mutate is not None:
        mutate = [m for m in args.mutate.split(",") if m] or ["dvhat_ds"]
    report = verify_all(instances=args.instances, tol=args.tol, seed=args.seed, mutate=mutate)
    print(report.to_text(), end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "verify.txt").write_text(report.to_text())
        (out / "verify.json").write_text(report.to_json())
    return 0 if report.passed else 1


def _int_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigurationError(f"bad integer list {text!r}") from exc


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    variants = [v for v in args.variants.split(",") if v.strip()] if args.variants else []
    seeds = _int_list(args.seeds) if args.seeds else [cfg.train.seed]
    ds = _dataset_for(cfg)
    report = ablate(cfg.train, ds, variants, seeds)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    _dump(cfg.out_dir / "ablation.json", report.to_dict())
    (cfg.out_dir / "ablation.txt").write_text(report.to_text())
    print(report.to_text(), end="")
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    grid = parse_grid(args.grid)
    seeds = _int_list(args.seeds) if args.seeds else None
    ds = _dataset_for(cfg)
    report = sweep(cfg.train, ds, grid, seeds)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict()
    payload["best_by_validation"] = best_point(report)
    _dump(cfg.out_dir / "sweep.json", payload)
    (cfg.out_dir / "sweep.txt").write_text(report.to_text())
    print(report.to_text(), end="")
    return 0


def cmd_report(args) -> int:
    from .report import build_report

    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"run directory not found: {run_dir}")
    text = build_report(run_dir)
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="camib", description="Causal multimodal IB desk laboratory")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("generate-data", help="generate and save a synthetic dataset")
    p.add_argument("config")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model and write history, metrics and report")
    p.add_argument("config")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a saved model on one split")
    p.add_argument("config")
    p.add_argument("--model", required=True)
    p.add_argument("--split", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("verify-gradients", help="run the closed-form derivative checks")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mutate", nargs="?", const="", default=None,
                   help=f"sign-flip named checks (default dvhat_ds); one of {','.join(CHECK_NAMES)}")
    p.add_argument("--out", help="directory for verify.txt / verify.json")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("ablate", help="train ablation variants over several seeds")
    p.add_argument("config")
    p.add_argument("--variants", default="")
    p.add_argument("--seeds", default="")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="grid over lambda1 / lambda2 / beta")
    p.add_argument("config")
    p.add_argument("--grid", required=True, help='e.g. "lambda1=0.1,0.2;beta=1e-4"')
    p.add_argument("--seeds", default="")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="summarize the files in a run directory")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)
    return parser


def _configure_logging() -> None:
    level = os.environ.get("CAMIB_LOG", "off").lower()
    levels = {"off": logging.CRITICAL + 1, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def run(argv: list[str] | None = None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (FileNotFoundError, ConfigurationError, ValidationFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
