"""
Head allocation, parameter and FLOP accounting.

Counts are exact integers derived from shapes alone; nothing here touches
weights.
"""
from typing import Dict, List, Optional, Sequence

from pydantic import BaseModel, Field

from .attention import attention_shapes
from .config import GdaConfig, LmConfig
from .exceptions import ConfigurationError


class AllocationRow(BaseModel):
    """One G:1 split of H heads."""
    ratio: int
    heads: int
    signal: Optional[int] = None
    noise: Optional[int] = None
    valid: bool = True
    reason: Optional[str] = None


def allocation_table(heads: int, ratios: Sequence[int]) -> List[AllocationRow]:
    """
    Signal/noise head counts for each ratio G at H total heads.

    Ratios where (G + 1) does not divide H come back as invalid rows with a
    reason instead of raising.
    """
    rows: List[AllocationRow] = []
    for ratio in ratios:
        if ratio < 1:
            rows.append(AllocationRow(ratio=ratio, heads=heads, valid=False, reason="ratio must be >= 1"))
        elif heads % (ratio + 1):
            rows.append(AllocationRow(
                ratio=ratio, heads=heads, valid=False,
                reason=f"{ratio + 1} does not divide {heads}",
            ))
        else:
            noise = heads // (ratio + 1)
            rows.append(AllocationRow(ratio=ratio, heads=heads, signal=heads - noise, noise=noise))
    return rows


def _product(shape: Sequence[int]) -> int:
    total = 1
    for extent in shape:
        total *= extent
    return total


class ParamCount(BaseModel):
    """Per-matrix parameter counts of one attention layer."""
    wq1: int
    wk1: int
    wq2: int
    wk2: int
    wv: int
    wo: int
    lambda_vectors: int
    head_norm: int
    n_layers: int = 1

    @property
    def projections(self) -> int:
        return self.wq1 + self.wk1 + self.wq2 + self.wk2 + self.wv + self.wo

    @property
    def per_layer(self) -> int:
        return self.projections + self.lambda_vectors + self.head_norm

    @property
    def total(self) -> int:
        return self.per_layer * self.n_layers

    def as_dict(self) -> Dict[str, int]:
        data = self.model_dump()
        data.update(projections=self.projections, per_layer=self.per_layer, total=self.total)
        return data


def param_count(cfg: GdaConfig) -> ParamCount:
    """Exact learnable-parameter counts of the attention stack."""
    sizes = {name: _product(shape) for name, shape in attention_shapes(cfg).items()}
    return ParamCount(
        wq1=sizes["wq1"],
        wk1=sizes["wk1"],
        wq2=sizes["wq2"],
        wk2=sizes["wk2"],
        wv=sizes["wv"],
        wo=sizes["wo"],
        lambda_vectors=sizes["lq1"] + sizes["lk1"] + sizes["lq2"] + sizes["lk2"],
        head_norm=sizes["head_norm"],
        n_layers=cfg.n_layers,
    )


def lm_param_count(cfg: LmConfig) -> Dict[str, int]:
    """
    Learnable parameters of the whole language model, by component.

    The fixed lambda_init offsets are buffers, not parameters.
    """
    d = cfg.gda.d_model
    layers = cfg.gda.n_layers
    attention = param_count(cfg.gda).total
    counts = {
        "embed": cfg.vocab_size * d,
        "attention": attention,
        "mlp": layers * 3 * d * cfg.hidden,
        "norms": layers * 2 * d + d,
        "lm_head": 0 if cfg.tie_embeddings else d * cfg.vocab_size,
    }
    counts["total"] = sum(counts.values())
    return counts


class FlopsEstimate(BaseModel):
    """Forward FLOPs of one attention layer on one sequence of length N."""
    seq_len: int
    score_maps: int = Field(..., description="Distinct N x N softmax maps")
    value_products: int = Field(..., description="Map-times-value products")
    stages: Dict[str, int]

    @property
    def total(self) -> int:
        return sum(self.stages.values())


def _mm(m: int, n: int, k: int) -> int:
    return 2 * m * n * k


def flops_estimate(cfg: GdaConfig, seq_len: int) -> FlopsEstimate:
    """
    Per-stage forward FLOPs with the 2*m*n*k matmul convention.

    Score maps are counted in full (N x N), ignoring the causal half.
    """
    if seq_len < 1:
        raise ConfigurationError(f"seq_len must be >= 1, got {seq_len}", key="seq_len")
    n, d, dh = seq_len, cfg.d_model, cfg.d_head
    s, h, kv = cfg.n_signal, cfg.n_noise, cfg.kv_units
    score_maps = s + h
    stages = {
        "q1_proj": _mm(n, s * dh, d),
        "k1_proj": _mm(n, kv * dh, d),
        "q2_proj": _mm(n, h * dh, d),
        "k2_proj": _mm(n, h * dh, d),
        "v_proj": _mm(n, kv * 2 * dh, d),
        "scores": score_maps * _mm(n, n, dh),
        "map_value": s * _mm(n, 2 * dh, n),
        "out_proj": _mm(n, d, s * 2 * dh),
    }
    return FlopsEstimate(seq_len=n, score_maps=score_maps, value_products=s, stages=stages)


def projection_flops(estimate: FlopsEstimate) -> int:
    """Q1, K1, Q2, K2 and V projections (the output projection is separate)."""
    return sum(v for k, v in estimate.stages.items() if k.endswith("_proj") and k != "out_proj")


def lm_flops_estimate(cfg: LmConfig, seq_len: int) -> Dict[str, int]:
    """Forward FLOPs per sequence for the whole model: attention, MLP and head."""
    attention = flops_estimate(cfg.gda, seq_len).total
    d = cfg.gda.d_model
    counts = {
        "attention": cfg.gda.n_layers * attention,
        "mlp": cfg.gda.n_layers * 3 * _mm(seq_len, cfg.hidden, d),
        "head": _mm(seq_len, cfg.vocab_size, d),
    }
    counts["total"] = sum(counts.values())
    counts["per_token"] = counts["total"] // seq_len
    return counts
