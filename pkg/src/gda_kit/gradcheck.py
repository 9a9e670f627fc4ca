"""
Finite-difference certification of the hand-derived backward passes.
"""
import json
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel

from .attention import (
    PARAM_FIELDS,
    AttentionParams,
    gda_backward,
    gda_forward,
    gda_forward_cached,
    init_attention_params,
)
from .config import GdaConfig, LmConfig
from .exceptions import ConfigurationError, DimensionError
from .lm import init_lm_tensors, is_buffer, loss_and_grads, batch_loss
from .logging_config import get_logger
from .tensor_core import Precision, Tensor, check_finite

log = get_logger("gradcheck")

DEFAULT_EPSILON = 1e-5
DEFAULT_TOLERANCE = 1e-4
REL_FLOOR = 1e-8
CHECK_WEIGHT_STD = 0.3


def toy_config(precision: str = "f64") -> GdaConfig:
    """d_model=16, H=4, G=3 (S=3, h=1), n_kv=1, d_head=4."""
    return GdaConfig(
        d_model=16, n_layers=1, n_heads=4, ratio=3, d_head=4, n_kv=1, max_seq_len=8, precision=precision
    )


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """|a - b| / max(|a|, |b|, 1e-8), elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), REL_FLOOR)


class GroupResult(BaseModel):
    name: str
    max_rel_error: float
    mean_rel_error: float
    checked: int


class GradReport(BaseModel):
    """Per-parameter-group agreement between backward and finite differences."""
    groups: List[GroupResult]
    epsilon: float
    precision: str
    tolerance: float
    seed: int

    @property
    def max_rel_error(self) -> float:
        return max((g.max_rel_error for g in self.groups), default=0.0)

    @property
    def passed(self) -> bool:
        return all(g.max_rel_error <= self.tolerance for g in self.groups)

    def worst(self) -> Optional[GroupResult]:
        return max(self.groups, key=lambda g: g.max_rel_error, default=None)

    def to_lines(self) -> List[str]:
        """One JSON line per group, then a summary line."""
        lines = []
        for g in self.groups:
            lines.append(json.dumps({
                "group": g.name,
                "max_rel_error": g.max_rel_error,
                "mean_rel_error": g.mean_rel_error,
                "checked": g.checked,
                "epsilon": self.epsilon,
                "precision": self.precision,
                "pass": g.max_rel_error <= self.tolerance,
            }))
        lines.append(json.dumps({
            "summary": "gradcheck",
            "seed": self.seed,
            "groups": len(self.groups),
            "max_rel_error": self.max_rel_error,
            "tolerance": self.tolerance,
            "precision": self.precision,
            "pass": self.passed,
        }))
        return lines


def finite_diff(
    f: Callable[[np.ndarray], float],
    theta: np.ndarray,
    epsilon: float = DEFAULT_EPSILON,
    coords: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """
    Central-difference gradient of a scalar function.

    Args:
        f: Scalar function of an array shaped like theta
        theta: Point to differentiate at (not modified)
        epsilon: Step size, > 0
        coords: Flat coordinates to estimate; others are left at 0

    Returns:
        Float64 array shaped like theta
    """
    if epsilon <= 0:
        raise ConfigurationError(f"epsilon must be > 0, got {epsilon}", key="epsilon")
    point = np.array(theta, copy=True)
    flat = point.reshape(-1)
    grad = np.zeros(flat.size, dtype=np.float64)
    for i in (range(flat.size) if coords is None else coords):
        orig = flat[i]
        flat[i] = orig + epsilon
        f_plus = f(point)
        flat[i] = orig - epsilon
        f_minus = f(point)
        flat[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * epsilon)
    return grad.reshape(point.shape)


def backward(
    x: Tensor, params: AttentionParams, cfg: GdaConfig, upstream: Tensor
) -> Dict[str, Tensor]:
    """Gradients of <upstream, gda_forward(x)> w.r.t. x and every AttentionParams field."""
    if upstream.shape != x.shape:
        raise DimensionError("upstream must match the attention output", [upstream.shape, x.shape])
    out, cache = gda_forward_cached(x, params, cfg)
    check_finite(out, "gda_forward")
    return gda_backward(upstream, cache, params, cfg)


def _pick_coords(rng: np.random.Generator, size: int, limit: Optional[int]) -> Optional[np.ndarray]:
    if limit is None or size <= limit:
        return None
    return np.sort(rng.choice(size, size=limit, replace=False))


def _compare(
    name: str, analytic: np.ndarray, numeric: np.ndarray, coords: Optional[np.ndarray]
) -> GroupResult:
    a = analytic.reshape(-1)
    b = numeric.reshape(-1)
    if coords is not None:
        a, b = a[coords], b[coords]
    rel = relative_error(a, b)
    return GroupResult(
        name=name, max_rel_error=float(rel.max()), mean_rel_error=float(rel.mean()), checked=int(rel.size)
    )


def run_gradcheck(
    cfg: Optional[GdaConfig] = None,
    seed: int = 0,
    tolerance: float = DEFAULT_TOLERANCE,
    epsilon: float = DEFAULT_EPSILON,
    seq_len: int = 6,
    max_coords: Optional[int] = None,
) -> GradReport:
    """
    Check gda_backward against central differences on a random problem.

    Weights are drawn larger than at training init and head gains are
    randomized so that every group carries a gradient well above round-off.
    """
    cfg = cfg or toy_config()
    if seq_len > cfg.max_seq_len:
        raise DimensionError(f"seq_len exceeds max_seq_len = {cfg.max_seq_len}", [(seq_len,)])
    rng = np.random.default_rng(seed)
    dtype = Precision(cfg.precision).dtype
    params = init_attention_params(cfg, 2, rng, weight_std=CHECK_WEIGHT_STD)
    params = params.replace("head_norm", (1.0 + 0.5 * rng.standard_normal(params.head_norm.shape)).astype(dtype))
    x = rng.standard_normal((seq_len, cfg.d_model)).astype(dtype)
    upstream = rng.standard_normal((seq_len, cfg.d_model)).astype(dtype)

    def objective(p: AttentionParams, inputs: Tensor) -> float:
        out = gda_forward(inputs, p, cfg)
        check_finite(out, "gda_forward")
        return float(np.sum(out.astype(np.float64) * upstream))

    grads = backward(x, params, cfg, upstream)
    groups: List[GroupResult] = []
    for name in PARAM_FIELDS:
        coords = _pick_coords(rng, params.get(name).size, max_coords)
        numeric = finite_diff(lambda t, n=name: objective(params.replace(n, t), x), params.get(name), epsilon, coords)
        groups.append(_compare(name, grads[name], numeric, coords))
    coords = _pick_coords(rng, x.size, max_coords)
    numeric = finite_diff(lambda t: objective(params, t), x, epsilon, coords)
    groups.append(_compare("x", grads["x"], numeric, coords))

    report = GradReport(groups=groups, epsilon=epsilon, precision=cfg.precision, tolerance=tolerance, seed=seed)
    log.info("gradcheck_done", seed=seed, max_rel_error=report.max_rel_error, passed=report.passed)
    return report


def lm_toy_config(precision: str = "f64", tie_embeddings: bool = True) -> LmConfig:
    gda = GdaConfig(
        d_model=16, n_layers=2, n_heads=4, ratio=1, d_head=4, n_kv=1, max_seq_len=8, precision=precision
    )
    return LmConfig(gda=gda, vocab_size=11, mlp_hidden=24, tie_embeddings=tie_embeddings)


def run_lm_gradcheck(
    cfg: Optional[LmConfig] = None,
    seed: int = 0,
    tolerance: float = DEFAULT_TOLERANCE,
    epsilon: float = DEFAULT_EPSILON,
    seq_len: int = 5,
    batch: int = 2,
    max_coords: Optional[int] = 24,
) -> GradReport:
    """Check lm.loss_and_grads against central differences, sampling coordinates per tensor."""
    cfg = cfg or lm_toy_config()
    rng = np.random.default_rng(seed)
    dtype = Precision(cfg.gda.precision).dtype
    tensors = init_lm_tensors(cfg, seed, weight_std=CHECK_WEIGHT_STD)
    for name in list(tensors):
        if name.endswith("norm"):
            tensors[name] = (1.0 + 0.5 * rng.standard_normal(tensors[name].shape)).astype(dtype)
    inputs = rng.integers(0, cfg.vocab_size, size=(batch, seq_len))
    targets = rng.integers(0, cfg.vocab_size, size=(batch, seq_len))

    _, grads = loss_and_grads(tensors, cfg, inputs, targets)
    groups: List[GroupResult] = []
    for name in sorted(tensors):
        if is_buffer(name):
            continue

        def objective(t: np.ndarray, n: str = name) -> float:
            return batch_loss({**tensors, n: t}, cfg, inputs, targets)

        coords = _pick_coords(rng, tensors[name].size, max_coords)
        numeric = finite_diff(objective, tensors[name], epsilon, coords)
        groups.append(_compare(name, grads[name], numeric, coords))

    report = GradReport(groups=groups, epsilon=epsilon, precision=cfg.gda.precision, tolerance=tolerance, seed=seed)
    log.info("lm_gradcheck_done", seed=seed, max_rel_error=report.max_rel_error, passed=report.passed)
    return report
