"""
Aligned-text and CSV report writers.

Every text report ends with one JSON summary line.
"""
import csv
import json
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple

from .accounting import AllocationRow, flops_estimate, param_count, projection_flops
from .config import GdaConfig

Row = Sequence[Any]


def format_table(headers: Sequence[str], rows: Sequence[Row]) -> List[str]:
    """Right-aligned columns separated by two spaces."""
    cells = [[str(h) for h in headers]] + [["-" if c is None else str(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    return ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]


def write_csv(path: Path, headers: Sequence[str], rows: Sequence[Row]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(headers)
        writer.writerows(["" if c is None else c for c in row] for row in rows)
    return path


def write_report(path: Path, lines: Sequence[str], summary: Dict[str, Any]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")
        fh.write(json.dumps(summary) + "\n")
    return path


def read_summary(path: Path) -> Dict[str, Any]:
    """The trailing JSON summary line of a report."""
    lines = [line for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
    return json.loads(lines[-1])


# ==================== ALLOCATION ====================

ALLOC_HEADERS = ("ratio", "heads", "signal", "noise", "valid", "reason")


def allocation_rows(table: Sequence[AllocationRow]) -> List[Row]:
    return [(f"{r.ratio}:1", r.heads, r.signal, r.noise, r.valid, r.reason) for r in table]


def allocation_summary(table: Sequence[AllocationRow]) -> Dict[str, Any]:
    return {
        "summary": "alloc",
        "heads": table[0].heads if table else None,
        "valid": [[r.ratio, r.signal, r.noise] for r in table if r.valid],
        "invalid": [r.ratio for r in table if not r.valid],
    }


# ==================== FLOPS / PARAMS ====================

FLOPS_HEADERS = (
    "ratio", "signal", "noise", "n_kv", "score_maps", "value_products",
    "proj_flops", "score_flops", "map_value_flops", "out_flops", "total_flops", "attn_params",
)


def flops_row(cfg: GdaConfig, seq_len: int) -> Tuple[Any, ...]:
    est = flops_estimate(cfg, seq_len)
    proj = projection_flops(est)
    return (
        f"{cfg.ratio}:1", cfg.n_signal, cfg.n_noise, cfg.kv_units, est.score_maps, est.value_products,
        proj, est.stages["scores"], est.stages["map_value"], est.stages["out_proj"], est.total,
        param_count(cfg).per_layer,
    )


def flops_summary(rows: Sequence[Row], invalid: Sequence[int], seq_len: int) -> Dict[str, Any]:
    return {
        "summary": "flops",
        "seq_len": seq_len,
        "score_maps": {str(r[0]): r[4] for r in rows},
        "total_flops": {str(r[0]): r[10] for r in rows},
        "invalid": list(invalid),
    }


def param_lines(cfg: GdaConfig) -> List[str]:
    counts = param_count(cfg).as_dict()
    return format_table(("tensor", "params"), sorted(counts.items()))
