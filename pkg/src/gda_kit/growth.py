"""
Width growth: uniform HyperCloning and group-differentiated growth.

Both modes expand the hidden axis by an integer factor n so that a duplicated
residual stream flows through the grown model. Uniform growth also replicates
every head n times; group-differentiated growth replicates signal heads r
times and keeps the noise heads as they are.
"""
import json
from typing import Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .attention import AttentionParams, kv_partners, noise_partners
from .checkpoint import Checkpoint
from .config import GdaConfig, LmConfig
from .exceptions import ConfigurationError, PlanError
from .lm import EMBED, FINAL_NORM, LM_HEAD, attn_prefix, hidden_states, layer_prefix, lm_forward
from .logging_config import get_logger
from .tensor_core import Tensor

log = get_logger("growth")

GrowthMode = Literal["uniform", "group_diff"]


class GrowthPlan(BaseModel):
    """Source/target configs plus explicit head source maps for every target head."""
    model_config = ConfigDict(frozen=True)

    source: LmConfig
    target: LmConfig
    factor: int = Field(..., ge=1, description="Hidden-axis factor n")
    replication: int = Field(..., ge=1, description="Signal-head factor r")
    noise_factor: int = Field(..., ge=1, description="1 for group-differentiated growth")
    mode: GrowthMode
    signal_map: List[int] = Field(..., description="Target signal head -> source signal head")
    noise_map: List[int] = Field(..., description="Target noise head -> source noise head")
    kv_map: List[int] = Field(..., description="Target KV unit -> source KV unit")
    noise_std: float = Field(0.0, ge=0.0, description="Std of noise added to cloned Q1/K1 columns")
    seed: int = 0

    @property
    def clone_layout(self) -> Dict[int, List[int]]:
        """Source signal head -> target signal heads cloned from it."""
        layout: Dict[int, List[int]] = {}
        for t, s in enumerate(self.signal_map):
            layout.setdefault(s, []).append(t)
        return layout

    def validate_partnerships(self) -> None:
        """
        Raises:
            PlanError: a map has the wrong length or range, or some clone
                would read a different noise head or KV unit than its source
        """
        src, tgt = self.source.gda, self.target.gda
        if tgt.d_model != self.factor * src.d_model:
            raise PlanError(f"target d_model {tgt.d_model} != {self.factor} x {src.d_model}")
        if tgt.d_head != src.d_head:
            raise PlanError(f"d_head must be kept ({src.d_head} -> {tgt.d_head})")
        if tgt.n_layers != src.n_layers:
            raise PlanError("depth growth is not supported")
        checks = (
            ("signal_map", self.signal_map, tgt.n_signal, src.n_signal),
            ("noise_map", self.noise_map, tgt.n_noise, src.n_noise),
            ("kv_map", self.kv_map, tgt.kv_units, src.kv_units),
        )
        for name, mapping, length, bound in checks:
            if len(mapping) != length:
                raise PlanError(f"{name} has {len(mapping)} entries, target needs {length}")
            if any(not 0 <= s < bound for s in mapping):
                raise PlanError(f"{name} points outside the {bound} source units")
        if sorted(set(self.signal_map)) != list(range(src.n_signal)):
            raise PlanError("every source signal head needs at least one clone")

        src_noise, tgt_noise = noise_partners(src), noise_partners(tgt)
        src_kv, tgt_kv = kv_partners(src), kv_partners(tgt)
        for t, s in enumerate(self.signal_map):
            if self.noise_map[tgt_noise[t]] != src_noise[s]:
                raise PlanError(
                    f"target head {t} (clone of {s}) would read noise head "
                    f"{self.noise_map[tgt_noise[t]]} instead of {src_noise[s]}"
                )
            if self.kv_map[tgt_kv[t]] != src_kv[s]:
                raise PlanError(
                    f"target head {t} (clone of {s}) would read KV unit "
                    f"{self.kv_map[tgt_kv[t]]} instead of {src_kv[s]}"
                )


def make_plan(
    source: LmConfig,
    factor: int,
    target_ratio: Optional[int] = None,
    noise_std: float = 0.0,
    seed: int = 0,
) -> GrowthPlan:
    """
    Build a partnership-preserving plan.

    Without target_ratio every head is replicated `factor` times (uniform
    HyperCloning). With it, signal heads are replicated
    r = target_ratio / source ratio times and noise heads are kept.
    Target signal head t is a clone of source head t mod S.
    """
    if isinstance(factor, bool) or not isinstance(factor, (int, np.integer)) or factor < 1:
        raise PlanError(f"growth factor must be an integer >= 1, got {factor!r}")
    factor = int(factor)
    src = source.gda
    if target_ratio is None:
        mode: GrowthMode = "uniform"
        replication = noise_factor = factor
    else:
        if target_ratio < src.ratio or target_ratio % src.ratio:
            raise PlanError(
                f"target ratio {target_ratio} must be an integer multiple of the source ratio {src.ratio}"
            )
        mode = "group_diff"
        replication, noise_factor = target_ratio // src.ratio, 1

    n_signal = replication * src.n_signal
    n_noise = noise_factor * src.n_noise
    n_kv = replication * src.kv_units
    if n_signal % n_noise:
        raise PlanError(f"{n_signal} signal heads cannot be split evenly over {n_noise} noise heads")
    try:
        gda = GdaConfig(**{
            **src.model_dump(),
            "d_model": factor * src.d_model,
            "n_heads": n_signal + n_noise,
            "ratio": n_signal // n_noise,
            "n_kv": n_kv,
        })
        target = LmConfig(
            gda=gda,
            vocab_size=source.vocab_size,
            mlp_hidden=factor * source.hidden,
            tie_embeddings=source.tie_embeddings,
        )
    except ValueError as exc:
        raise PlanError(f"target config is invalid: {exc}") from exc

    plan = GrowthPlan(
        source=source,
        target=target,
        factor=factor,
        replication=replication,
        noise_factor=noise_factor,
        mode=mode,
        signal_map=[t % src.n_signal for t in range(n_signal)],
        noise_map=[u % src.n_noise for u in range(n_noise)],
        kv_map=[k % src.kv_units for k in range(n_kv)],
        noise_std=noise_std,
        seed=seed,
    )
    plan.validate_partnerships()
    return plan


def hyperclone_linear(w: Tensor, n_in: int, n_out: int) -> Tensor:
    """
    n_in x n_out block tiling of w / n_in.

    If x' is x repeated n_in times, x' @ result is (x @ w) repeated n_out times.
    """
    if n_in < 1 or n_out < 1:
        raise PlanError(f"clone factors must be >= 1, got ({n_in}, {n_out})")
    return np.tile(w / n_in, (n_in, n_out))


def _gather_units(w: Tensor, index: List[int], width: int) -> Tensor:
    """Select column blocks of `width` (one per head or KV unit) by source index."""
    rows = w.shape[0]
    return w.reshape(rows, -1, width)[:, index].reshape(rows, len(index) * width)


def _jitter_clones(w: Tensor, start: int, std: float, rng: np.random.Generator) -> Tensor:
    """Add N(0, std^2) to every column from `start` on (the clones, not the originals)."""
    out = w.copy()
    out[:, start:] += rng.normal(0.0, std, size=out[:, start:].shape).astype(w.dtype)
    return out


def _grow_attention(p: AttentionParams, plan: GrowthPlan, rng: np.random.Generator) -> AttentionParams:
    dh = plan.source.gda.d_head
    n = plan.factor
    src = plan.source.gda
    wq1 = hyperclone_linear(_gather_units(p.wq1, plan.signal_map, dh), n, 1)
    wk1 = hyperclone_linear(_gather_units(p.wk1, plan.kv_map, dh), n, 1)
    if plan.noise_std > 0:
        wq1 = _jitter_clones(wq1, src.n_signal * dh, plan.noise_std, rng)
        wk1 = _jitter_clones(wk1, src.kv_units * dh, plan.noise_std, rng)

    clones = np.bincount(plan.signal_map, minlength=src.n_signal)
    wo_rows = p.wo.reshape(src.n_signal, 2 * dh, -1)
    # each clone carries 1/c of its source head's output rows
    scaled = wo_rows[plan.signal_map] / clones[plan.signal_map][:, None, None].astype(p.wo.dtype)
    wo = hyperclone_linear(scaled.reshape(-1, p.wo.shape[1]), 1, n)

    tensors = {
        "wq1": wq1,
        "wk1": wk1,
        "wq2": hyperclone_linear(_gather_units(p.wq2, plan.noise_map, dh), n, 1),
        "wk2": hyperclone_linear(_gather_units(p.wk2, plan.noise_map, dh), n, 1),
        "wv": hyperclone_linear(_gather_units(p.wv, plan.kv_map, 2 * dh), n, 1),
        "wo": wo,
        "lq1": p.lam.lq1.copy(),
        "lk1": p.lam.lk1.copy(),
        "lq2": p.lam.lq2.copy(),
        "lk2": p.lam.lk2.copy(),
        "head_norm": p.head_norm[plan.signal_map],
    }
    return AttentionParams.from_dict(tensors, p.lam.lambda_init)


def apply_plan(ckpt: Checkpoint, plan: GrowthPlan) -> Checkpoint:
    """Grow ckpt by plan. Optimizer moments are dropped; the step counter restarts."""
    if ckpt.config != plan.source:
        raise PlanError("plan source config does not match the checkpoint")
    plan.validate_partnerships()
    n = plan.factor
    rng = np.random.default_rng(plan.seed)
    old = ckpt.model_tensors()

    grown: Dict[str, Tensor] = {EMBED: np.tile(old[EMBED], (1, n))}
    final = np.tile(old[FINAL_NORM], n)
    grown[FINAL_NORM] = final / n if plan.source.tie_embeddings else final
    if not plan.source.tie_embeddings:
        grown[LM_HEAD] = hyperclone_linear(old[LM_HEAD], n, 1)

    for layer in range(plan.source.gda.n_layers):
        p = layer_prefix(layer)
        grown[p + "attn_norm"] = np.tile(old[p + "attn_norm"], n)
        grown[p + "mlp_norm"] = np.tile(old[p + "mlp_norm"], n)
        for name in ("mlp.w_gate", "mlp.w_up", "mlp.w_down"):
            grown[p + name] = hyperclone_linear(old[p + name], n, n)
        attn = AttentionParams.from_table(old, attn_prefix(layer))
        grown.update(_grow_attention(attn, plan, rng).to_table(attn_prefix(layer)))

    entry = {
        "op": "hyperclone" if plan.mode == "uniform" else "group_diff",
        "factor": n,
        "replication": plan.replication,
        "noise_factor": plan.noise_factor,
        "noise_std": plan.noise_std,
        "source_step": ckpt.step,
    }
    out = Checkpoint(
        config=plan.target,
        tensors=grown,
        step=0,
        seed=ckpt.seed,
        provenance=[*ckpt.provenance, entry],
    )
    out.validate()
    log.info("model_grown", mode=plan.mode, factor=n, replication=plan.replication,
             params_before=ckpt.num_parameters(), params_after=out.num_parameters())
    return out


def hyperclone_model(ckpt: Checkpoint, n: int) -> Checkpoint:
    """Uniform HyperCloning by an integer factor n; n = 1 copies the model."""
    return apply_plan(ckpt, make_plan(ckpt.config, n))


def group_diff_grow(ckpt: Checkpoint, plan: GrowthPlan) -> Checkpoint:
    """Replicate signal heads per plan, keeping noise heads unreplicated."""
    if plan.mode != "group_diff" or plan.noise_factor != 1:
        raise PlanError("group-differentiated growth keeps noise heads (noise_factor = 1)")
    return apply_plan(ckpt, plan)


# ==================== AUDIT ====================

class AuditReport(BaseModel):
    """Logit and per-layer residual drift between two models."""
    max_logit_diff: float
    embed_diff: Optional[float] = None
    per_layer: List[float] = Field(default_factory=list)
    n_samples: int
    seq_len: int
    seed: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_logit_diff <= self.tol

    @property
    def first_drift_layer(self) -> Optional[int]:
        """First layer whose residual output drifts beyond tol."""
        for layer, diff in enumerate(self.per_layer):
            if diff > self.tol:
                return layer
        return None

    def to_lines(self) -> List[str]:
        lines = [json.dumps({"layer": i, "max_diff": d}) for i, d in enumerate(self.per_layer)]
        lines.append(json.dumps({
            "summary": "audit",
            "max_logit_diff": self.max_logit_diff,
            "first_drift_layer": self.first_drift_layer,
            "n_samples": self.n_samples,
            "tol": self.tol,
            "pass": self.passed,
        }))
        return lines


def verify_preservation(
    ckpt_a: Checkpoint,
    ckpt_b: Checkpoint,
    n_samples: int = 20,
    seed: int = 0,
    tol: float = 1e-9,
    seq_len: Optional[int] = None,
) -> AuditReport:
    """
    Compare logits of two models on random token sequences.

    When ckpt_b's width is an integer multiple k of ckpt_a's and depths
    match, residual streams are also compared layer by layer against
    ckpt_a's stream repeated k times.
    """
    cfg_a, cfg_b = ckpt_a.config, ckpt_b.config
    if cfg_a.vocab_size != cfg_b.vocab_size:
        raise ConfigurationError(
            f"vocab sizes differ ({cfg_a.vocab_size} vs {cfg_b.vocab_size})", key="vocab_size"
        )
    length = seq_len or min(cfg_a.gda.max_seq_len, cfg_b.gda.max_seq_len, 16)
    rng = np.random.default_rng(seed)
    d_a, d_b = cfg_a.gda.d_model, cfg_b.gda.d_model
    layered = d_b % d_a == 0 and cfg_a.gda.n_layers == cfg_b.gda.n_layers
    k = d_b // d_a

    max_logit = 0.0
    per_layer = [0.0] * cfg_a.gda.n_layers if layered else []
    embed_diff = 0.0 if layered else None
    for _ in range(n_samples):
        tokens = rng.integers(0, cfg_a.vocab_size, size=length).tolist()
        la = lm_forward(tokens, ckpt_a).astype(np.float64)
        lb = lm_forward(tokens, ckpt_b).astype(np.float64)
        max_logit = max(max_logit, float(np.max(np.abs(la - lb))))
        if layered:
            hs_a = hidden_states(tokens, ckpt_a)
            hs_b = hidden_states(tokens, ckpt_b)
            diffs = [
                float(np.max(np.abs(np.tile(a.astype(np.float64), (1, k)) - b.astype(np.float64))))
                for a, b in zip(hs_a, hs_b)
            ]
            embed_diff = max(embed_diff, diffs[0])
            per_layer = [max(p, d) for p, d in zip(per_layer, diffs[1:])]

    report = AuditReport(
        max_logit_diff=max_logit, embed_diff=embed_diff, per_layer=per_layer,
        n_samples=n_samples, seq_len=length, seed=seed, tol=tol,
    )
    log.info("preservation_audit", max_logit_diff=max_logit, passed=report.passed,
             first_drift_layer=report.first_drift_layer)
    return report
