"""Summaries of completed pipeline runs: CSV tables and matplotlib figures."""
from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from pathlib import Path

import numpy as np

from .pipeline import read_metrics_csv


class MissingArtifactError(FileNotFoundError):
    def __init__(self, missing):
        self.missing = [str(m) for m in missing]
        super().__init__("incomplete run; missing artifacts:\n  " + "\n  ".join(self.missing))


class EnvMismatchError(ValueError):
    pass


def _required(root: Path) -> list[Path]:
    need = [root / "config.yaml", root / "env.json", root / "comparison.csv"]
    missing = [p for p in need if not p.exists()]
    if (root / "comparison.csv").exists():
        for row in read_metrics_csv(root / "comparison.csv"):
            m = root / f"seed_{row['seed']}" / row["dataset_variant"] / "metrics.csv"
            if not m.exists():
                missing.append(m)
    return missing


def collect_rows(run_dirs) -> list[dict]:
    roots = [Path(r) for r in run_dirs]
    missing = [m for r in roots for m in _required(r)]
    if missing:
        raise MissingArtifactError(missing)
    rows = []
    for r in roots:
        for row in read_metrics_csv(r / "comparison.csv"):
            row["_root"] = str(r)
            rows.append(row)
    hashes = sorted({row["env_hash"] for row in rows})
    if len(hashes) > 1:
        raise EnvMismatchError(f"refusing to aggregate runs from different environments: {hashes}")
    return rows


def aggregate(rows: list[dict]) -> list[dict]:
    """Mean and (population) std over seeds of each variant's metrics."""
    by_var: dict[str, list[dict]] = defaultdict(list)
    for r in rows:
        by_var[r["dataset_variant"]].append(r)
    out = []
    for var in sorted(by_var):
        group = by_var[var]
        rec = {"dataset_variant": var, "n_seeds": len(group)}
        for col in ("mean_return", "wis", "dr"):
            vals = np.array([float(g[col]) for g in group if g.get(col) not in ("", None)])
            rec[f"{col}_mean"] = float(vals.mean()) if len(vals) else None
            rec[f"{col}_std"] = float(vals.std()) if len(vals) else None
        out.append(rec)
    return out


def k_histogram(run_dirs) -> dict[int, int]:
    hist: dict[int, int] = defaultdict(int)
    for r in run_dirs:
        for p in sorted(Path(r).glob("seed_*/*/augment_report.json")):
            for k, v in json.loads(p.read_text()).get("k_histogram", {}).items():
                hist[int(k)] += int(v)
    return dict(sorted(hist.items()))


def validity_rows(run_dirs) -> list[dict]:
    rows = []
    for r in run_dirs:
        for p in sorted(Path(r).glob("seed_*/*/validity.json")):
            v = json.loads(p.read_text())
            rows.append({"run": str(p.parent.relative_to(r)), "junctions": v["junctions"],
                         "state_violations": v["state_violations"],
                         "nonjunction_mismatches": v["nonjunction_mismatches"],
                         "next_state_exceedances": v["next_state_exceedances"],
                         "max_junction_state_dev": v["max_junction_state_dev"],
                         "state_bound": v["state_bound"], "lipschitz": v["lipschitz"]})
    return rows


def _write_csv(path: Path, rows: list[dict], fields=None) -> None:
    fields = fields or (list(rows[0]) if rows else [])
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    path.write_text(buf.getvalue())


def text_bar_chart(summary: list[dict], width: int = 40) -> str:
    if not summary:
        return ""
    vals = [r["mean_return_mean"] for r in summary]
    lo, hi = min(0.0, min(vals)), max(0.0, max(vals))
    span = (hi - lo) or 1.0
    name_w = max(len(r["dataset_variant"]) for r in summary)
    lines = []
    for r in summary:
        v = r["mean_return_mean"]
        n = int(round(abs(v) / span * width))
        lines.append(f"{r['dataset_variant'].ljust(name_w)} | {'#' * n} {v:.2f} +/- {r['mean_return_std']:.2f}")
    return "\n".join(lines) + "\n"


def plot_returns(summary: list[dict], path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    names = [r["dataset_variant"] for r in summary]
    ax.bar(names, [r["mean_return_mean"] for r in summary], yerr=[r["mean_return_std"] for r in summary],
           capsize=4, color="#4c72b0")
    ax.set_ylabel("mean return")
    ax.axhline(0, color="k", lw=0.5)
    ax.tick_params(axis="x", rotation=20)
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)


def plot_k_histogram(hist: dict[int, int], path: Path, k_max: int = 8) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ks = np.arange(1, max([k_max, *hist]) + 1)
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(ks, [hist.get(int(k), 0) for k in ks], color="#dd8452")
    ax.set_xlabel("bridging length K")
    ax.set_ylabel("count")
    ax.set_xticks(ks)
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)


def write_report(run_dirs, out_dir=None, figures: bool = True) -> dict[str, Path]:
    run_dirs = [Path(r) for r in run_dirs]
    out = Path(out_dir) if out_dir else run_dirs[0] / "report"
    rows = collect_rows(run_dirs)
    out.mkdir(parents=True, exist_ok=True)
    summary = aggregate(rows)
    paths = {"summary": out / "summary.csv", "k_histogram": out / "k_histogram.csv",
             "validity": out / "validity_summary.csv", "chart": out / "returns.txt"}
    _write_csv(paths["summary"], summary)
    hist = k_histogram(run_dirs)
    _write_csv(paths["k_histogram"], [{"K": k, "count": v} for k, v in hist.items()], ["K", "count"])
    vrows = validity_rows(run_dirs)
    _write_csv(paths["validity"], vrows, None if vrows else ["run"])
    paths["chart"].write_text(text_bar_chart(summary))
    if figures:
        paths["returns_svg"] = out / "returns.svg"
        paths["k_svg"] = out / "k_histogram.svg"
        plot_returns(summary, paths["returns_svg"])
        plot_k_histogram(hist, paths["k_svg"])
    return paths
