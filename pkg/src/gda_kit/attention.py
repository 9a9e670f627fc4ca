"""
Grouped Differential Attention.

Signal heads i < S each own a query projection and read keys/values from a
shared KV unit kv(i). The h noise heads are shared G ways: signal head i
subtracts lambda times the map of noise head j(i) = i mod h. With G = 1 and
one KV unit per head this is plain Differential Attention.
"""
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .config import GdaConfig
from .exceptions import ConfigurationError, DimensionError, HeadIndexError
from .tensor_core import (
    DEFAULT_EPS,
    Precision,
    Tensor,
    apply_rope,
    debug_check,
    matmul,
    rms_norm,
    rms_norm_backward,
    softmax_rows,
    softmax_rows_backward,
    truncated_normal,
)

WEIGHT_STD = 0.02
LAMBDA_STD = 0.1

MATRIX_FIELDS = ("wq1", "wk1", "wq2", "wk2", "wv", "wo")
LAMBDA_FIELDS = ("lq1", "lk1", "lq2", "lk2")
PARAM_FIELDS = MATRIX_FIELDS + LAMBDA_FIELDS + ("head_norm",)


# ==================== HEAD INDEX MATH ====================

def head_group_index(i: int, h: int, n_signal: Optional[int] = None) -> int:
    """Group of signal head i: floor(i / h)."""
    if h < 1:
        raise HeadIndexError(f"group size must be >= 1, got {h}")
    if i < 0 or (n_signal is not None and i >= n_signal):
        raise HeadIndexError(f"head index {i} outside [0, {n_signal})")
    return i // h


def noise_partner(i: int, h: int) -> int:
    """Noise head shared by signal head i: i mod h."""
    if h < 1:
        raise HeadIndexError(f"noise head count must be >= 1, got {h}")
    if i < 0:
        raise HeadIndexError(f"head index {i} is negative")
    return i % h


def kv_partner(i: int, n_signal: int, n_kv: int) -> int:
    """KV unit read by signal head i: contiguous blocks of S / n_kv heads."""
    if n_kv < 1 or n_signal % n_kv:
        raise ConfigurationError(f"n_kv = {n_kv} must divide S = {n_signal}", key="n_kv")
    if not 0 <= i < n_signal:
        raise HeadIndexError(f"head index {i} outside [0, {n_signal})")
    return i // (n_signal // n_kv)


def noise_partners(cfg: GdaConfig) -> np.ndarray:
    return np.arange(cfg.n_signal) % cfg.n_noise


def kv_partners(cfg: GdaConfig) -> np.ndarray:
    return np.arange(cfg.n_signal) // (cfg.n_signal // cfg.kv_units)


# ==================== LAMBDA ====================

@dataclass
class LambdaParams:
    """Layer-level lambda reparameterization vectors."""
    lq1: Tensor
    lk1: Tensor
    lq2: Tensor
    lk2: Tensor
    lambda_init: float


def lambda_value(p: LambdaParams) -> float:
    """exp(lq1 . lk1) - exp(lq2 . lk2) + lambda_init, unclamped."""
    return float(
        math.exp(float(np.dot(p.lq1, p.lk1)))
        - math.exp(float(np.dot(p.lq2, p.lk2)))
        + p.lambda_init
    )


def lambda_init_default(layer: int) -> float:
    """0.8 - 0.6 * exp(-0.3 * (l - 1)) for 1-based layer index l."""
    if layer < 1:
        raise ConfigurationError(f"layer index is 1-based, got {layer}", key="layer")
    return 0.8 - 0.6 * math.exp(-0.3 * (layer - 1))


def resolve_lambda_init(cfg: GdaConfig, layer: int) -> float:
    if cfg.lambda_init_mode == "fixed":
        return cfg.lambda_init_value
    return lambda_init_default(layer)


# ==================== PARAMETERS ====================

def attention_shapes(cfg: GdaConfig) -> Dict[str, Tuple[int, ...]]:
    """Expected shape of every AttentionParams tensor."""
    d, dh = cfg.d_model, cfg.d_head
    s, h, kv = cfg.n_signal, cfg.n_noise, cfg.kv_units
    return {
        "wq1": (d, s * dh),
        "wk1": (d, kv * dh),
        "wq2": (d, h * dh),
        "wk2": (d, h * dh),
        "wv": (d, kv * 2 * dh),
        "wo": (s * 2 * dh, d),
        "lq1": (dh,),
        "lk1": (dh,),
        "lq2": (dh,),
        "lk2": (dh,),
        "head_norm": (s, 2 * dh),
    }


@dataclass
class AttentionParams:
    """Projection matrices, lambda vectors and per-head norm gains of one layer."""
    wq1: Tensor
    wk1: Tensor
    wq2: Tensor
    wk2: Tensor
    wv: Tensor
    wo: Tensor
    lam: LambdaParams
    head_norm: Tensor

    def get(self, name: str) -> Tensor:
        if name in LAMBDA_FIELDS:
            return getattr(self.lam, name)
        return getattr(self, name)

    def replace(self, name: str, value: Tensor) -> "AttentionParams":
        """Copy with one tensor swapped out."""
        tensors = {n: self.get(n) for n in PARAM_FIELDS}
        tensors[name] = value
        return AttentionParams.from_dict(tensors, self.lam.lambda_init)

    def validate(self, cfg: GdaConfig) -> None:
        for name, shape in attention_shapes(cfg).items():
            actual = self.get(name).shape
            if actual != shape:
                raise DimensionError(f"AttentionParams.{name} has the wrong shape", [actual, shape])

    @classmethod
    def from_dict(cls, tensors: Dict[str, Tensor], lambda_init: float) -> "AttentionParams":
        lam = LambdaParams(*(tensors[n] for n in LAMBDA_FIELDS), lambda_init=float(lambda_init))
        return cls(*(tensors[n] for n in MATRIX_FIELDS), lam=lam, head_norm=tensors["head_norm"])

    @classmethod
    def from_table(cls, table: Dict[str, Tensor], prefix: str) -> "AttentionParams":
        tensors = {n: table[prefix + n] for n in PARAM_FIELDS}
        return cls.from_dict(tensors, float(table[prefix + "lambda_init"][0]))

    def to_table(self, prefix: str) -> Dict[str, Tensor]:
        table = {prefix + n: self.get(n) for n in PARAM_FIELDS}
        dtype = self.wq1.dtype
        table[prefix + "lambda_init"] = np.array([self.lam.lambda_init], dtype=dtype)
        return table


def init_attention_params(
    cfg: GdaConfig,
    layer: int,
    rng: np.random.Generator,
    zero_lambda: bool = False,
    weight_std: float = WEIGHT_STD,
) -> AttentionParams:
    """
    Initialize one layer: projections ~ N(0, 0.02^2) truncated at 3 sigma,
    lambda vectors ~ N(0, 0.1^2), head gains at 1.

    Args:
        cfg: Architecture
        layer: 1-based layer index (selects lambda_init)
        rng: Source of randomness
        zero_lambda: Start lambda vectors at zero, so lambda == lambda_init
        weight_std: Projection std (gradient checks use larger weights)
    """
    dtype = Precision(cfg.precision).dtype
    shapes = attention_shapes(cfg)
    tensors: Dict[str, Tensor] = {
        n: truncated_normal(rng, shapes[n], weight_std, dtype) for n in MATRIX_FIELDS
    }
    for n in LAMBDA_FIELDS:
        values = rng.normal(0.0, LAMBDA_STD, size=shapes[n])
        tensors[n] = np.zeros(shapes[n], dtype=dtype) if zero_lambda else values.astype(dtype)
    tensors["head_norm"] = np.ones(shapes["head_norm"], dtype=dtype)
    return AttentionParams.from_dict(tensors, resolve_lambda_init(cfg, layer))


# ==================== FORWARD ====================

@dataclass
class AttentionCache:
    """Intermediates saved by the forward pass for backward and read-out."""
    x: Tensor
    positions: np.ndarray
    q1: Tensor
    k1s: Tensor
    q2: Tensor
    k2: Tensor
    vs: Tensor
    a1: Tensor
    a2: Tensor
    diff: Tensor
    o: Tensor
    ycat: Tensor
    lam: float
    batched: bool


def _split_heads(y: Tensor, units: int, width: int) -> Tensor:
    """(B, N, units*width) -> (B, units, N, width)"""
    b, n, _ = y.shape
    return y.reshape(b, n, units, width).transpose(0, 2, 1, 3)


def _merge_heads(y: Tensor) -> Tensor:
    """(B, units, N, width) -> (B, N, units*width)"""
    b, units, n, width = y.shape
    return y.transpose(0, 2, 1, 3).reshape(b, n, units * width)


def _as_batch(x: Tensor, cfg: GdaConfig) -> Tuple[Tensor, bool]:
    batched = x.ndim == 3
    if x.ndim not in (2, 3) or x.shape[-1] != cfg.d_model:
        raise DimensionError("attention input must be (N, d_model) or (B, N, d_model)", [x.shape])
    if x.shape[-2] > cfg.max_seq_len:
        raise DimensionError(f"sequence longer than max_seq_len = {cfg.max_seq_len}", [x.shape])
    return (x if batched else x[None]), batched


def gda_forward_cached(x: Tensor, params: AttentionParams, cfg: GdaConfig) -> Tuple[Tensor, AttentionCache]:
    """gda_forward that also returns the intermediates backward needs."""
    x3, batched = _as_batch(x, cfg)
    n = x3.shape[1]
    s, h, kv, dh = cfg.n_signal, cfg.n_noise, cfg.kv_units, cfg.d_head
    positions = np.arange(n)
    theta = cfg.rope_theta
    scale = 1.0 / math.sqrt(dh)
    kv_idx = kv_partners(cfg)
    noise_idx = noise_partners(cfg)

    q1 = apply_rope(_split_heads(matmul(x3, params.wq1), s, dh), positions, theta)
    k1 = apply_rope(_split_heads(matmul(x3, params.wk1), kv, dh), positions, theta)
    q2 = apply_rope(_split_heads(matmul(x3, params.wq2), h, dh), positions, theta)
    k2 = apply_rope(_split_heads(matmul(x3, params.wk2), h, dh), positions, theta)
    v = _split_heads(matmul(x3, params.wv), kv, 2 * dh)

    k1s = k1[:, kv_idx]
    a1 = softmax_rows(matmul(q1, k1s.swapaxes(-1, -2)) * scale, causal=True)
    # one map per noise head, reused by its G partners
    a2 = softmax_rows(matmul(q2, k2.swapaxes(-1, -2)) * scale, causal=True)

    lam = lambda_value(params.lam)
    diff = a1 - lam * a2[:, noise_idx]
    vs = v[:, kv_idx]
    o = matmul(diff, vs)
    normed = rms_norm(o, params.head_norm[None, :, None, :], DEFAULT_EPS)
    ycat = _merge_heads((1.0 - params.lam.lambda_init) * normed)
    out = matmul(ycat, params.wo)
    debug_check(out, "gda_forward")

    cache = AttentionCache(
        x=x3, positions=positions, q1=q1, k1s=k1s, q2=q2, k2=k2, vs=vs,
        a1=a1, a2=a2, diff=diff, o=o, ycat=ycat, lam=lam, batched=batched,
    )
    return (out if batched else out[0]), cache


def gda_forward(x: Tensor, params: AttentionParams, cfg: GdaConfig) -> Tensor:
    """
    Grouped Differential Attention over one sequence (N, d_model) or a batch.

    Args:
        x: Input activations
        params: Layer parameters
        cfg: Architecture

    Returns:
        Output with the shape of x
    """
    out, _ = gda_forward_cached(x, params, cfg)
    return out


def gda_backward(
    grad_out: Tensor, cache: AttentionCache, params: AttentionParams, cfg: GdaConfig
) -> Dict[str, Tensor]:
    """
    Reverse-mode gradients of <grad_out, gda_forward(x)>.

    Returns:
        Mapping with key "x" plus one entry per name in PARAM_FIELDS
    """
    g = grad_out if cache.batched else grad_out[None]
    b, n, d = g.shape
    s, h, kv, dh = cfg.n_signal, cfg.n_noise, cfg.kv_units, cfg.d_head
    theta = cfg.rope_theta
    scale = 1.0 / math.sqrt(dh)
    lam_init = params.lam.lambda_init
    noise_idx = noise_partners(cfg)
    x2 = cache.x.reshape(b * n, d)

    grads: Dict[str, Tensor] = {}
    grads["wo"] = cache.ycat.reshape(b * n, -1).T @ g.reshape(b * n, d)
    dy = _split_heads(matmul(g, params.wo.T), s, 2 * dh)

    gains = params.head_norm[None, :, None, :]
    do, dgain = rms_norm_backward((1.0 - lam_init) * dy, cache.o, gains, DEFAULT_EPS)
    grads["head_norm"] = dgain.sum(axis=(0, 2))

    ddiff = matmul(do, cache.vs.swapaxes(-1, -2))
    dvs = matmul(cache.diff.swapaxes(-1, -2), do)
    dv = dvs.reshape(b, kv, s // kv, n, 2 * dh).sum(axis=2)

    a2n = cache.a2[:, noise_idx]
    dlam = -float(np.sum(ddiff * a2n))
    # signal head i = g*h + j reads noise head j, so partners fold along axis 1
    da2 = (-cache.lam * ddiff).reshape(b, s // h, h, n, n).sum(axis=1)

    ds1 = softmax_rows_backward(ddiff, cache.a1) * scale
    ds2 = softmax_rows_backward(da2, cache.a2) * scale
    dq1 = matmul(ds1, cache.k1s)
    dk1 = matmul(ds1.swapaxes(-1, -2), cache.q1).reshape(b, kv, s // kv, n, dh).sum(axis=2)
    dq2 = matmul(ds2, cache.k2)
    dk2 = matmul(ds2.swapaxes(-1, -2), cache.q2)

    branch_grads = {
        "wq1": apply_rope(dq1, cache.positions, theta, inverse=True),
        "wk1": apply_rope(dk1, cache.positions, theta, inverse=True),
        "wq2": apply_rope(dq2, cache.positions, theta, inverse=True),
        "wk2": apply_rope(dk2, cache.positions, theta, inverse=True),
        "wv": dv,
    }
    dx = np.zeros_like(x2)
    for name, dproj in branch_grads.items():
        flat = _merge_heads(dproj).reshape(b * n, -1)
        grads[name] = x2.T @ flat
        dx += flat @ getattr(params, name).T
    grads["x"] = dx.reshape(b, n, d) if cache.batched else dx.reshape(n, d)

    lp = params.lam
    e1 = math.exp(float(np.dot(lp.lq1, lp.lk1)))
    e2 = math.exp(float(np.dot(lp.lq2, lp.lk2)))
    grads["lq1"] = dlam * e1 * lp.lk1
    grads["lk1"] = dlam * e1 * lp.lq1
    grads["lq2"] = -dlam * e2 * lp.lk2
    grads["lk2"] = -dlam * e2 * lp.lq2
    return grads


def diff_attention_forward(x: Tensor, params: AttentionParams, cfg: GdaConfig) -> Tensor:
    """
    Baseline Differential Attention, head by head.

    Every head owns Q1, K1, Q2, K2 and a value slice of width 2*d_head, so cfg
    must have G = 1 and one KV unit per head.
    """
    if cfg.ratio != 1:
        raise ConfigurationError(f"Differential Attention needs G = 1, got {cfg.ratio}", key="ratio")
    if cfg.kv_units != cfg.n_signal:
        raise ConfigurationError(
            f"Differential Attention needs one KV unit per head (n_kv = {cfg.n_signal})", key="n_kv"
        )
    _as_batch(x, cfg)
    n = x.shape[-2]
    dh = cfg.d_head
    positions = np.arange(n)
    scale = 1.0 / math.sqrt(dh)
    lam = lambda_value(params.lam)
    lam_init = params.lam.lambda_init

    heads: List[Tensor] = []
    for i in range(cfg.n_signal):
        qk = slice(i * dh, (i + 1) * dh)
        q1 = apply_rope(matmul(x, params.wq1[:, qk]), positions, cfg.rope_theta)
        k1 = apply_rope(matmul(x, params.wk1[:, qk]), positions, cfg.rope_theta)
        q2 = apply_rope(matmul(x, params.wq2[:, qk]), positions, cfg.rope_theta)
        k2 = apply_rope(matmul(x, params.wk2[:, qk]), positions, cfg.rope_theta)
        v = matmul(x, params.wv[:, 2 * i * dh:2 * (i + 1) * dh])
        signal = softmax_rows(matmul(q1, k1.swapaxes(-1, -2)) * scale, causal=True)
        noise = softmax_rows(matmul(q2, k2.swapaxes(-1, -2)) * scale, causal=True)
        head = matmul(signal - lam * noise, v)
        heads.append((1.0 - lam_init) * rms_norm(head, params.head_norm[i], DEFAULT_EPS))
    out = matmul(np.concatenate(heads, axis=-1), params.wo)
    debug_check(out, "diff_attention_forward")
    return out


# ==================== READ-OUT ====================

@dataclass
class AttentionMaps:
    """Softmax maps of one layer for one sequence."""
    signal: Tensor
    noise: Tensor
    lam: float
    partners: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def differential(self) -> Tensor:
        """signal_i - lambda * noise_{j(i)} for every signal head."""
        return self.signal - self.lam * self.noise[self.partners]

    @property
    def reuse_counts(self) -> List[int]:
        """How many signal heads read each noise map."""
        return np.bincount(self.partners, minlength=self.noise.shape[0]).tolist()


def attention_maps(x: Tensor, params: AttentionParams, cfg: GdaConfig) -> AttentionMaps:
    """The exact maps gda_forward uses for a single (N, d_model) sequence."""
    if x.ndim != 2:
        raise DimensionError("attention_maps reads one sequence at a time", [x.shape])
    _, cache = gda_forward_cached(x, params, cfg)
    return AttentionMaps(
        signal=cache.a1[0], noise=cache.a2[0], lam=cache.lam, partners=noise_partners(cfg)
    )
