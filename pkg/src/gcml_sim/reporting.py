"""Run artifacts: per-round CSV, schedule trace, and text summaries.

The CSV schema is fixed: one row per (round, site) with columns
``round,site_id,dsc,hd95,assd,train_loss,val_jd,comm_bytes_cum`` and floats
printed with 9 significant digits, so identical runs produce byte-identical
files.
"""

from __future__ import annotations

import math
from typing import Sequence

from . import metrics
from .federation import RoundRecord

__all__ = [
    "CSV_COLUMNS",
    "format_float",
    "rounds_csv",
    "schedule_log",
    "summary_text",
    "comparison_table",
]

CSV_COLUMNS = ("round", "site_id", "dsc", "hd95", "assd", "train_loss", "val_jd", "comm_bytes_cum")


def format_float(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.9g}"


def rounds_csv(records: Sequence[RoundRecord]) -> str:
    lines = [",".join(CSV_COLUMNS)]
    cum = 0
    for rec in records:
        cum += rec.comm_bytes
        for site_id in sorted(rec.site_metrics):
            m = rec.site_metrics[site_id]
            lines.append(
                f"{rec.round_index},{site_id},{format_float(m.dsc)},{format_float(m.hd95)},"
                f"{format_float(m.assd)},{format_float(m.train_loss)},"
                f"{format_float(m.val_jd)},{cum}"
            )
    return "\n".join(lines) + "\n"


def schedule_log(records: Sequence[RoundRecord]) -> str:
    """One line per scheduled transfer: round, sender, receiver."""
    lines = []
    for rec in records:
        for sender, receiver in rec.schedule:
            lines.append(f"{rec.round_index},{sender},{receiver}")
    return "\n".join(lines) + ("\n" if lines else "")


def _overall(rec: RoundRecord, attr: str) -> float:
    pairs = [
        (getattr(m, attr), m.n_test)
        for m in rec.site_metrics.values()
        if not math.isnan(getattr(m, attr))
    ]
    return metrics.weighted_overall(pairs) if pairs else math.nan


def summary_text(records: Sequence[RoundRecord], strategy: str) -> str:
    """Final per-site and weighted metrics plus total communication."""
    if not records:
        return f"strategy: {strategy}\nno rounds executed\n"
    last = records[-1]
    total_comm = sum(r.comm_bytes for r in records)
    lines = [
        f"strategy: {strategy}",
        f"rounds: {len(records)}",
        f"total_comm_bytes: {total_comm}",
        "",
        f"{'site':>6} {'n_test':>6} {'dsc':>12} {'hd95':>12} {'assd':>12}",
    ]
    for site_id in sorted(last.site_metrics):
        m = last.site_metrics[site_id]
        lines.append(
            f"{site_id:>6} {m.n_test:>6} {format_float(m.dsc):>12} "
            f"{format_float(m.hd95):>12} {format_float(m.assd):>12}"
        )
    lines.append(
        f"{'all':>6} {sum(m.n_test for m in last.site_metrics.values()):>6} "
        f"{format_float(_overall(last, 'dsc')):>12} "
        f"{format_float(_overall(last, 'hd95')):>12} "
        f"{format_float(_overall(last, 'assd')):>12}"
    )
    return "\n".join(lines) + "\n"


def comparison_table(rows: Sequence[tuple], site_ids: Sequence[int]) -> tuple[str, str]:
    """CSV and aligned-text views of a (label, per-site dsc, overall, comm) table."""
    header = ["strategy"] + [f"site_{sid}" for sid in site_ids] + ["overall_dsc", "comm_bytes"]
    csv_lines = [",".join(header)]
    width = max(12, max((len(str(r[0])) for r in rows), default=12) + 2)
    txt_lines = [
        f"{'strategy':<{width}}"
        + "".join(f"{f'site_{sid}':>12}" for sid in site_ids)
        + f"{'overall':>12}{'comm_bytes':>14}"
    ]
    for label, per_site, overall, comm in rows:
        cells = [format_float(per_site.get(sid, math.nan)) for sid in site_ids]
        csv_lines.append(",".join([str(label)] + cells + [format_float(overall), str(comm)]))
        txt_lines.append(
            f"{label:<{width}}" + "".join(f"{c:>12}" for c in cells)
            + f"{format_float(overall):>12}{comm:>14}"
        )
    return "\n".join(csv_lines) + "\n", "\n".join(txt_lines) + "\n"
