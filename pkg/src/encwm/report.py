"""Render metrics files into aligned comparison tables.

Accepts a run directory (containing metrics.csv) or a directory of run
subdirectories; rows from several runs are grouped by run id.
"""

from __future__ import annotations

from pathlib import Path

from .pipeline import METRICS_CSV, read_metrics


class ReportError(ValueError):
    """No metrics to report, or required rows missing."""


def collect_rows(directory) -> list[dict]:
    directory = Path(directory)
    paths = []
    if (directory / METRICS_CSV).exists():
        paths.append(directory / METRICS_CSV)
    else:
        paths.extend(sorted(directory.glob(f"*/{METRICS_CSV}")))
    if not paths:
        raise ReportError(f"no metrics found under {directory}")
    rows: list[dict] = []
    for path in paths:
        rows.extend(read_metrics(path))
    if not rows:
        raise ReportError(f"metrics files under {directory} contain no rows")
    return rows


def _table(title: str, header: list[str], body: list[list[str]]) -> str:
    widths = [max(len(str(cell)) for cell in col) for col in zip(header, *body)] if body else \
        [len(h) for h in header]
    lines = [f"== {title}"]
    lines.append("  " + "  ".join(str(h).ljust(w) for h, w in zip(header, widths)))
    for row in body:
        lines.append("  " + "  ".join(str(c).ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines)


def _fmt(value: str) -> str:
    return f"{float(value):.4f}"


def render(rows: list[dict]) -> str:
    by_run: dict[str, dict[str, str]] = {}
    run_meta: dict[str, dict] = {}
    for row in rows:
        by_run.setdefault(row["run_id"], {})[row["metric"]] = row["value"]
        run_meta.setdefault(row["run_id"], {"dataset": row["dataset"], "seed": row["seed"]})

    sections = []

    def have(metric):
        return any(metric in m for m in by_run.values())

    if have("wacc_clean") or have("wacc_watermarked"):
        body = [[run, meta["dataset"], meta["seed"],
                 _fmt(m["wacc_clean"]) if "wacc_clean" in m else "-",
                 _fmt(m["wacc_watermarked"]) if "wacc_watermarked" in m else "-"]
                for run, m in by_run.items() for meta in [run_meta[run]]
                if "wacc_clean" in m or "wacc_watermarked" in m]
        sections.append(_table("WACC, correct trigger (clean vs watermarked model)",
                               ["run", "dataset", "seed", "clean", "watermarked"], body))

    if have("wacc_wrong_trigger"):
        body = [[run, _fmt(m["wacc_wrong_trigger"]),
                 _fmt(m["wacc_watermarked"]) if "wacc_watermarked" in m else "-"]
                for run, m in by_run.items() if "wacc_wrong_trigger" in m]
        sections.append(_table("WACC of the watermarked model (wrong vs correct trigger)",
                               ["run", "wrong", "correct"], body))

    if have("acc_clean") or have("acc_watermarked"):
        body = [[run, _fmt(m["acc_clean"]) if "acc_clean" in m else "-",
                 _fmt(m["acc_watermarked"]) if "acc_watermarked" in m else "-"]
                for run, m in by_run.items() if "acc_clean" in m or "acc_watermarked" in m]
        sections.append(_table("Downstream accuracy on clean samples",
                               ["run", "clean", "watermarked"], body))

    ft_rows = []
    for run, m in by_run.items():
        for kind in ("ftal", "rtll"):
            if f"acc_{kind}" in m:
                ft_rows.append([run, kind.upper(), _fmt(m[f"acc_{kind}"]),
                                _fmt(m.get(f"wacc_{kind}", "nan"))])
    if ft_rows:
        sections.append(_table("Fine-tuning attacks", ["run", "attack", "ACC", "WACC"], ft_rows))

    pr_rows = []
    for run, m in by_run.items():
        ratios = sorted({k.rsplit("_", 1)[1] for k in m if k.startswith("acc_prune_")},
                        key=float)
        for r in ratios:
            method = next(k for k in m if k.startswith("acc_prune_") and
                          k.endswith(f"_{r}")).split("_")[2]
            pr_rows.append([run, method, r, _fmt(m[f"acc_prune_{method}_{r}"]),
                            _fmt(m.get(f"wacc_prune_{method}_{r}", "nan"))])
    if pr_rows:
        sections.append(_table("Pruning sweep", ["run", "method", "ratio", "ACC", "WACC"],
                               pr_rows))

    if not sections:
        raise ReportError("metrics rows carry none of the reportable metrics")
    return "\n\n".join(sections) + "\n"


def write_report(directory, out_path=None) -> str:
    text = render(collect_rows(directory))
    out_path = Path(out_path) if out_path else Path(directory) / "report.txt"
    out_path.write_text(text)
    return text
