"""Summaries built only from files a run directory already holds."""
from __future__ import annotations

import json
from pathlib import Path

SERIES_KEYS = ("step", "epoch", "lr", "total", "caus", "iv_align", "unif", "intv", "ib")
KNOWN_FILES = ("data_summary.json", "metrics.json", "history.json", "ablation.json", "sweep.json",
               "verify.json")


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _metrics_section(payload: dict) -> list[str]:
    lines = ["[metrics]"]
    for split, m in payload["metrics"].items():
        cells = " ".join(f"{k}={_fmt(m[k])}" for k in sorted(m))
        lines.append(f"{split}: {cells}")
    return lines


def _history_section(history: list[dict]) -> list[str]:
    if not history:
        return ["[history]", "empty"]
    first, last = history[0], history[-1]
    return [
        "[history]",
        f"steps={len(history)} epochs={last['epoch'] + 1}",
        f"total first={first['total']:.6f} last={last['total']:.6f}",
        f"caus  first={first['caus']:.6f} last={last['caus']:.6f}",
    ]


def _summary_section(title: str, summary: list[dict], key: str) -> list[str]:
    lines = [f"[{title}]"]
    for s in summary:
        acc = s.get("acc2_incl_zero") or s.get("mae")
        lines.append(f"{s[key]} {s['split']}: " + (f"{acc['mean']:.4f}+-{acc['std']:.4f}" if acc else "-"))
    return lines


def build_report(run_dir: str | Path) -> str:
    """Write ``summary.txt`` (and ``series.tsv`` when a history exists); return the summary text."""
    run_dir = Path(run_dir)
    found = {name: json.loads((run_dir / name).read_text())
             for name in KNOWN_FILES if (run_dir / name).is_file()}
    if not found:
        raise FileNotFoundError(f"no recognised run files in {run_dir}")
    lines = [f"run files: {', '.join(sorted(found))}"]
    if "data_summary.json" in found and "shortcut_probe" in found["data_summary.json"]:
        probe = found["data_summary.json"]["shortcut_probe"]
        lines += ["[shortcut probe]"] + [f"{k}: {v:.4f}" for k, v in sorted(probe.items())]
    if "metrics.json" in found:
        lines += _metrics_section(found["metrics.json"])
    if "history.json" in found:
        history = found["history.json"]
        lines += _history_section(history)
        rows = ["\t".join(SERIES_KEYS)] + ["\t".join(repr(h[k]) for k in SERIES_KEYS) for h in history]
        (run_dir / "series.tsv").write_text("\n".join(rows) + "\n")
    if "ablation.json" in found:
        lines += _summary_section("ablation", found["ablation.json"]["summary"], "variant")
    if "sweep.json" in found:
        sw = found["sweep.json"]
        lines += _summary_section("sweep", sw["summary"], "point")
        lines.append(f"best by validation: {sw.get('best_by_validation')}")
    if "verify.json" in found:
        v = found["verify.json"]
        lines += ["[gradient verification]", f"passed={v['passed']}"]
        lines += [f"{c['name']}: max_rel={c['max_rel']:.3e} passed={c['passed']}" for c in v["checks"]]
    text = "\n".join(lines) + "\n"
    (run_dir / "summary.txt").write_text(text)
    return text
