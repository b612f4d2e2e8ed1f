"""Render experiment reports as text tables, CSV, JSON and figures."""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from .errors import ValidationError
from .trainer import ExperimentReport

FORMATS = ("table", "csv", "json")
CSV_FIELDS = (
    "lambda1",
    "interval",
    "test_recall",
    "val_recall",
    "best_epoch",
    "epochs_run",
    "seconds_to_best",
    "eval_users",
    "skipped_cold_users",
)


def bundle(reports: list[ExperimentReport], manifest_hash: str) -> dict:
    """Top-level JSON document written by ``experiment``."""
    return {
        "format": 1,
        "manifest_hash": manifest_hash,
        "experiments": [r.to_dict() for r in reports],
    }


def unbundle(doc) -> list[ExperimentReport]:
    if not isinstance(doc, dict) or not isinstance(doc.get("experiments"), list):
        raise ValidationError("report JSON has no 'experiments' list")
    if not doc["experiments"]:
        raise ValidationError("report JSON has an empty 'experiments' list")
    return [ExperimentReport.from_dict(d) for d in doc["experiments"]]


def _method(rep: ExperimentReport) -> str:
    return "fine-tune" if rep.lambda1 == 0 else f"KD lambda1={rep.lambda1:g}"


def _pct(x) -> str:
    return "n/a" if x is None else f"{x:+.2f}%"


def _align(rows: list[list[str]]) -> str:
    widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
    out = []
    for n, r in enumerate(rows):
        cells = [r[0].ljust(widths[0])] + [v.rjust(w) for v, w in zip(r[1:], widths[1:])]
        out.append("  ".join(cells).rstrip())
        if n == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out)


def render_table(reports: list[ExperimentReport]) -> str:
    k = reports[0].k
    intervals = [r.t for r in reports[0].averaged_rows()]
    header = ["method"] + [("base" if t == 0 else f"I{t}") + f" R@{k}" for t in intervals]
    header += [f"AVG R@{k}", "AVG impr. vs FT", "AVG time-to-best (s)"]
    rows = [header]
    for rep in reports:
        by_t = {r.t: r.test_recall for r in rep.rows}
        rows.append(
            [_method(rep)]
            + [f"{by_t[t]:.4f}" if t in by_t else "" for t in intervals]
            + [f"{rep.avg_recall:.4f}", _pct(rep.improvement_pct), f"{rep.avg_seconds_to_best:.2f}"]
        )
    text = _align(rows)
    sweep = [r for r in reports if r.lambda1 != 0]
    if len(sweep) > 1:
        srows = [["lambda1"] + [f"{r.lambda1:g}" for r in sweep]]
        srows.append([f"AVG R@{k}"] + [f"{r.avg_recall:.4f}" for r in sweep])
        srows.append(["impr. vs FT"] + [_pct(r.improvement_pct) for r in sweep])
        text += "\n\n" + _align(srows)
    return text


def render_csv(reports: list[ExperimentReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for rep in reports:
        for r in rep.rows:
            w.writerow(
                [
                    rep.lambda1,
                    r.t,
                    repr(r.test_recall),
                    repr(r.val_recall),
                    r.best_epoch,
                    r.epochs_run,
                    f"{r.seconds_to_best:.6f}",
                    r.eval_users,
                    r.skipped_cold_users,
                ]
            )
    return buf.getvalue()


def render(reports: list[ExperimentReport], fmt: str, doc: dict | None = None) -> str:
    if fmt == "table":
        return render_table(reports) + "\n"
    if fmt == "csv":
        return render_csv(reports)
    if fmt == "json":
        doc = doc if doc is not None else bundle(reports, reports[0].manifest_hash)
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"
    raise ValidationError(f"unknown format {fmt!r}; expected one of {FORMATS}")


def write_figures(reports: list[ExperimentReport], out_dir) -> list[Path]:
    """Recall-per-interval lines, plus the lambda1 sweep when there is one."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    k = reports[0].k
    written = []

    fig, ax = plt.subplots(figsize=(6, 4))
    for rep in reports:
        ts = [r.t for r in rep.rows]
        ax.plot(ts, [r.test_recall for r in rep.rows], marker="o", label=_method(rep))
    ax.set_xlabel("interval")
    ax.set_ylabel(f"test Recall@{k}")
    ax.set_xticks(sorted({r.t for rep in reports for r in rep.rows}))
    ax.legend(fontsize="small")
    fig.tight_layout()
    path = out_dir / "recall_per_interval.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    sweep = [r for r in reports if r.lambda1 != 0]
    if len(sweep) > 1:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.semilogx([r.lambda1 for r in sweep], [r.avg_recall for r in sweep], marker="o", label="KD")
        ax.axhline(reports[0].finetune_avg_recall, color="grey", linestyle="--", label="fine-tune")
        ax.set_xlabel("lambda1")
        ax.set_ylabel(f"average Recall@{k}")
        ax.legend(fontsize="small")
        fig.tight_layout()
        path = out_dir / "lambda1_sweep.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


def write_outputs(reports: list[ExperimentReport], out_dir) -> list[Path]:
    """Table and CSV renderings next to the figures."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.txt").write_text(render(reports, "table"), encoding="utf-8")
    (out_dir / "report.csv").write_text(render(reports, "csv"), encoding="utf-8")
    return [out_dir / "report.txt", out_dir / "report.csv"] + write_figures(reports, out_dir)
