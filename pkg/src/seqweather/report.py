"""Text/CSV tables and forgetting curves for one run or a pair of runs."""
from __future__ import annotations

import csv
import io
from pathlib import Path

from .metrics import MetricMatrix, accumulated_forgetting, miou_average

CSV_FIELDS = ("target", "step", "miou")


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.1f}"


def summary_row(m: MetricMatrix) -> dict:
    """Final mIoU per target with its change since the target's own step."""
    K = m.num_steps
    cells = {}
    for k, tag in enumerate(m.targets):
        final, first = m.miou[k][K - 1], m.miou[k][k]
        cells[tag] = (final, None if k == K - 1 else final - first)
    return {"cells": cells, "miou_avg": miou_average(m), "af": accumulated_forgetting(m)}


def _cell(final, change) -> str:
    return f"{final:.1f}" if change is None else f"{final:.1f} ({change:+.1f})"


def summary_table(rows: dict[str, MetricMatrix]) -> str:
    """One line per run: final mIoU (change) for every target, mIoU Avg., A.F."""
    targets = next(iter(rows.values())).targets
    head = ["method", *targets, "mIoU Avg.", "A.F."]
    body = []
    for name, m in rows.items():
        if m.targets != targets:
            raise ValueError("runs cover different target sequences")
        s = summary_row(m)
        body.append([name, *(_cell(*s["cells"][t]) for t in targets), f"{s['miou_avg']:.1f}", f"{s['af']:.1f}"])
    return _aligned([head, *body])


def matrix_table(m: MetricMatrix) -> str:
    """Full target x step matrix (rows: targets, columns: after step s)."""
    head = ["target", *(f"after {s}" for s in range(1, m.num_steps + 1))]
    return _aligned([head, *([t, *map(_fmt, row)] for t, row in zip(m.targets, m.miou))])


def _aligned(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))) for r in rows]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def to_csv(m: MetricMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for k, tag in enumerate(m.targets):
        for s in range(k, m.num_steps):
            w.writerow([tag, s + 1, repr(m.miou[k][s])])
    return buf.getvalue()


def from_csv(text: str) -> MetricMatrix:
    rows = list(csv.DictReader(io.StringIO(text)))
    targets = []
    for r in rows:
        if r["target"] not in targets:
            targets.append(r["target"])
    m = MetricMatrix.empty(targets)
    for r in rows:
        m.miou[targets.index(r["target"])][int(r["step"]) - 1] = float(r["miou"])
    return m


def plot_curves(m: MetricMatrix, path, title: str = "") -> Path:
    """mIoU of every target over the steps that follow its own."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.2), dpi=120)
    steps = list(range(1, m.num_steps + 1))
    for k, tag in enumerate(m.targets):
        ax.plot(steps[k:], m.miou[k][k:], marker="o", label=tag)
    ax.set_xlabel("after step")
    ax.set_ylabel("mIoU (%)")
    ax.set_xticks(steps)
    ax.set_title(title or f"A.F. {accumulated_forgetting(m):.1f}")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


def render_report(m: MetricMatrix, out_dir, name: str = "run", plot: bool = True) -> dict[str, Path]:
    """Write ``report.txt``, ``report.csv`` and ``forgetting.png`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = summary_table({name: m}) + "\n" + matrix_table(m)
    files = {"text": out / "report.txt", "csv": out / "report.csv"}
    files["text"].write_text(text)
    files["csv"].write_text(to_csv(m))
    if plot:
        files["plot"] = plot_curves(m, out / "forgetting.png", f"{name}: A.F. {accumulated_forgetting(m):.1f}")
    return files


def compare_table(a: MetricMatrix, b: MetricMatrix, names=("full", "baseline")) -> str:
    """Side-by-side summary plus the A.F. and mIoU Avg. differences (first minus second)."""
    text = summary_table(dict(zip(names, (a, b))))
    d_af = accumulated_forgetting(a) - accumulated_forgetting(b)
    d_avg = miou_average(a) - miou_average(b)
    return text + f"\nΔ A.F. ({names[0]} - {names[1]}): {d_af:+.1f}\nΔ mIoU Avg.: {d_avg:+.1f}\n"


def render_comparison(a: MetricMatrix, b: MetricMatrix, out_dir, names=("full", "baseline")) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "compare.txt"
    path.write_text(compare_table(a, b, names))
    return {"text": path}
