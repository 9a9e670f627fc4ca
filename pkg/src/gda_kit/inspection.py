"""
Attention-map dumps for a checkpoint on a piece of text.
"""
import json
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np
from pydantic import BaseModel

from .attention import AttentionMaps, noise_partners
from .checkpoint import Checkpoint
from .corpus import ByteTokenizer
from .lm import check_tokens, forward_cached
from .logging_config import get_logger

log = get_logger("inspection")


class LayerSummary(BaseModel):
    layer: int
    lam: float
    lambda_init: float
    row_sum_min: float
    row_sum_mean: float
    row_sum_max: float
    expected_row_sum: float
    noise_reuse: List[int]


def layer_maps(ckpt: Checkpoint, tokens: Sequence[int]) -> List[AttentionMaps]:
    """The signal/noise maps every layer uses on one sequence."""
    ids = check_tokens(np.asarray(tokens), ckpt.config)
    _, cache = forward_cached(ckpt.model_tensors(), ckpt.config, ids)
    partners = noise_partners(ckpt.config.gda)
    return [
        AttentionMaps(signal=lc.attn.a1[0], noise=lc.attn.a2[0], lam=lc.attn.lam, partners=partners)
        for lc in cache.layers
    ]


def summarize(ckpt: Checkpoint, maps: List[AttentionMaps]) -> List[LayerSummary]:
    summaries = []
    for layer, m in enumerate(maps):
        sums = m.differential.sum(axis=-1)
        lambda_init = float(ckpt.tensors[f"layers.{layer}.attn.lambda_init"][0])
        summaries.append(LayerSummary(
            layer=layer,
            lam=m.lam,
            lambda_init=lambda_init,
            row_sum_min=float(sums.min()),
            row_sum_mean=float(sums.mean()),
            row_sum_max=float(sums.max()),
            expected_row_sum=1.0 - m.lam,
            noise_reuse=m.reuse_counts,
        ))
    return summaries


def _save(path: Path, matrix: np.ndarray) -> None:
    np.savetxt(path, matrix, delimiter=",", fmt="%.17g")


def dump_maps(ckpt: Checkpoint, text: Union[str, bytes], out_dir: Union[str, Path]) -> List[LayerSummary]:
    """
    Write every map as CSV (row-major, one row per query position) plus
    summary.jsonl: one line per layer and a final summary line.

    Files: layer{l}_signal{i}.csv, layer{l}_noise{j}.csv, layer{l}_diff{i}.csv
    """
    tokens = ByteTokenizer().encode(text, add_special=False)
    tokens = [ByteTokenizer.bos_id, *tokens]
    maps = layer_maps(ckpt, tokens)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for layer, m in enumerate(maps):
        for i, sig in enumerate(m.signal):
            _save(out / f"layer{layer}_signal{i}.csv", sig)
        for j, noise in enumerate(m.noise):
            _save(out / f"layer{layer}_noise{j}.csv", noise)
        for i, diff in enumerate(m.differential):
            _save(out / f"layer{layer}_diff{i}.csv", diff)

    summaries = summarize(ckpt, maps)
    worst = max(
        (max(abs(s.row_sum_min - s.expected_row_sum), abs(s.row_sum_max - s.expected_row_sum)) for s in summaries),
        default=0.0,
    )
    with open(out / "summary.jsonl", "w", encoding="utf-8") as fh:
        for s in summaries:
            fh.write(json.dumps(s.model_dump()) + "\n")
        fh.write(json.dumps({
            "summary": "inspect",
            "layers": len(summaries),
            "tokens": len(tokens),
            "lambdas": [s.lam for s in summaries],
            "max_row_sum_error": worst,
        }) + "\n")
    log.info("maps_dumped", out=str(out), layers=len(summaries), tokens=len(tokens))
    return summaries
