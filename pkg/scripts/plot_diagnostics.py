"""Plot the outputs of ``fwdadapt diagnose`` and ``fwdadapt adapt`` from a run directory.

    python scripts/plot_diagnostics.py run/ --out run/plots

Needs matplotlib (``pip install .[plot]``); the package itself never imports it.
"""

import argparse
import json
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def plot_grad_quality(run: Path, out: Path) -> None:
    rows = read_jsonl(run / "grad_quality.jsonl")
    by_method = defaultdict(list)
    for r in rows:
        by_method[r["method"]].append(r)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for method, rs in by_method.items():
        ax.plot([r["step"] for r in rs], [r["cosine"] if r["cosine"] is not None else float("nan") for r in rs],
                label=method, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("cosine(ZOO, FO)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "grad_quality.png", dpi=120)


def plot_selection(run: Path, out: Path) -> None:
    rows = read_jsonl(run / "selection.jsonl")
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar([r["selector"] for r in rows], [r["median"] for r in rows])
    lo = min(r["median"] for r in rows)
    ax.set_ylim(lo - 0.05, max(r["median"] for r in rows) + 0.02)
    ax.set_ylabel("final running accuracy (median)")
    fig.tight_layout()
    fig.savefig(out / "selection.png", dpi=120)


def plot_convergence(run: Path, out: Path) -> None:
    conv = json.loads((run / "convergence.json").read_text())
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(conv["layers"], conv["before"], "o-", label="before")
    ax.plot(conv["layers"], conv["after"], "s--", label="after")
    ax.set_xlabel("layer")
    ax.set_ylabel("ID/OOD purity")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "convergence.png", dpi=120)


def plot_metrics(run: Path, out: Path) -> None:
    rows = read_jsonl(run / "metrics.jsonl")
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot([r["step"] for r in rows], [r["running_accuracy"] for r in rows])
    ax.set_xlabel("batch")
    ax.set_ylabel("running accuracy")
    fig.tight_layout()
    fig.savefig(out / "metrics.png", dpi=120)


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("run", type=Path)
    p.add_argument("--out", type=Path)
    args = p.parse_args()
    out = args.out or args.run / "plots"
    out.mkdir(parents=True, exist_ok=True)
    plots = {"grad_quality.jsonl": plot_grad_quality, "selection.jsonl": plot_selection,
             "convergence.json": plot_convergence, "metrics.jsonl": plot_metrics}
    for name, fn in plots.items():
        if (args.run / name).exists():
            fn(args.run, out)
            print(f"wrote {out / name.split('.')[0]}.png")


if __name__ == "__main__":
    main()
