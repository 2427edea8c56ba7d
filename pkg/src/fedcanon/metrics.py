"""Run diagnostics and comparison tables."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .linalg import orthogonality_defect

__all__ = ["RunSummary", "orthogonality_defect", "smoothness", "summarize", "compare",
           "table_to_csv", "table_to_markdown"]


@dataclass
class RunSummary:
    num_rounds: int
    final_eval_loss: float
    best_eval_loss: float
    smoothness: float
    mean_beta_used: float | None
    mean_cosdis: float | None
    max_orthogonality_defect: float
    eval_series: list[float]

    def to_dict(self) -> dict:
        return asdict(self)


def smoothness(series: Sequence[float]) -> float:
    """Std of successive differences over the last ceil(R/2) values; 0 with no differences."""
    s = np.asarray(series, dtype=np.float64)
    window = s[-math.ceil(len(s) / 2):] if len(s) else s
    diffs = np.diff(window)
    if diffs.size == 0:
        return 0.0
    return float(np.std(diffs))


def _get(rec, key):
    return rec[key] if isinstance(rec, dict) else getattr(rec, key)


def summarize(records: Sequence) -> RunSummary:
    """Aggregate RoundRecords (objects or their dicts); input order does not matter."""
    if not records:
        raise ValueError("no round records to summarize")
    recs = sorted(records, key=lambda r: _get(r, "round_index"))
    series = [float(_get(r, "eval_loss")) for r in recs]
    betas = [b for r in recs for b in _get(r, "beta_used") if b is not None]
    cos = [c for r in recs for c in _get(r, "cosdis") if c is not None]
    defects = [d for r in recs for d in _get(r, "orthogonality_defect") if d is not None]
    return RunSummary(
        num_rounds=len(recs),
        final_eval_loss=series[-1],
        best_eval_loss=min(series),
        smoothness=smoothness(series),
        mean_beta_used=float(np.mean(betas)) if betas else None,
        mean_cosdis=float(np.mean(cos)) if cos else None,
        max_orthogonality_defect=float(max(defects)) if defects else 0.0,
        eval_series=series,
    )


COLUMNS = ("run", "rounds", "final_eval_loss", "best_eval_loss", "smoothness",
           "mean_beta_used", "mean_cosdis", "max_orthogonality_defect", "status")


def compare(runs: Sequence[tuple[str, RunSummary | None]]) -> list[dict]:
    """One row per run. A None summary marks a failed run."""
    lengths = {s.num_rounds for _, s in runs if s is not None}
    if len(lengths) > 1:
        raise ValueError(f"runs have different round counts: {sorted(lengths)}")
    rows = []
    for name, s in runs:
        if s is None:
            rows.append({c: None for c in COLUMNS} | {"run": name, "status": "failed"})
            continue
        rows.append({
            "run": name,
            "rounds": s.num_rounds,
            "final_eval_loss": s.final_eval_loss,
            "best_eval_loss": s.best_eval_loss,
            "smoothness": s.smoothness,
            "mean_beta_used": s.mean_beta_used,
            "mean_cosdis": s.mean_cosdis,
            "max_orthogonality_defect": s.max_orthogonality_defect,
            "status": "ok",
        })
    return rows


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def table_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in COLUMNS})
    return buf.getvalue()


def table_to_markdown(rows: Sequence[dict]) -> str:
    lines = ["| " + " | ".join(COLUMNS) + " |", "|" + "---|" * len(COLUMNS)]
    for r in rows:
        lines.append("| " + " | ".join(_fmt(r.get(c)) for c in COLUMNS) + " |")
    return "\n".join(lines) + "\n"
