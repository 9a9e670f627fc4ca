"""
Tiny decoder-only language model around the GDA block.

Parameters live in a flat name -> Tensor table so checkpoints, the optimizer
and growth all address them the same way.
"""
from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .attention import (
    AttentionCache,
    AttentionParams,
    gda_backward,
    gda_forward_cached,
    init_attention_params,
    attention_shapes,
    WEIGHT_STD,
)
from .config import LmConfig
from .exceptions import ConfigurationError, DimensionError, TokenRangeError
from .logging_config import get_logger
from .tensor_core import (
    DEFAULT_EPS,
    Precision,
    Tensor,
    debug_check,
    log_softmax,
    matmul,
    rms_norm,
    rms_norm_backward,
    silu,
    silu_backward,
    truncated_normal,
)

if TYPE_CHECKING:
    from .checkpoint import Checkpoint

log = get_logger("lm")

EMBED = "embed"
FINAL_NORM = "final_norm"
LM_HEAD = "lm_head"

# Buffers are stored in the table but never updated by the optimizer.
BUFFER_SUFFIXES = ("lambda_init",)
# Parameters exempt from weight decay.
NO_DECAY_SUFFIXES = ("norm", "lq1", "lk1", "lq2", "lk2", "lambda_init")


def layer_prefix(layer: int) -> str:
    return f"layers.{layer}."


def attn_prefix(layer: int) -> str:
    return f"layers.{layer}.attn."


def expected_shapes(cfg: LmConfig) -> Dict[str, Tuple[int, ...]]:
    """Every tensor name the architecture references, with its shape."""
    d, f, v = cfg.gda.d_model, cfg.hidden, cfg.vocab_size
    shapes: Dict[str, Tuple[int, ...]] = {EMBED: (v, d), FINAL_NORM: (d,)}
    if not cfg.tie_embeddings:
        shapes[LM_HEAD] = (d, v)
    attn = attention_shapes(cfg.gda)
    for layer in range(cfg.gda.n_layers):
        p = layer_prefix(layer)
        shapes[p + "attn_norm"] = (d,)
        for name, shape in attn.items():
            shapes[attn_prefix(layer) + name] = shape
        shapes[attn_prefix(layer) + "lambda_init"] = (1,)
        shapes[p + "mlp_norm"] = (d,)
        shapes[p + "mlp.w_gate"] = (d, f)
        shapes[p + "mlp.w_up"] = (d, f)
        shapes[p + "mlp.w_down"] = (f, d)
    return shapes


def is_buffer(name: str) -> bool:
    return name.endswith(BUFFER_SUFFIXES)


def decays(name: str) -> bool:
    """Whether AdamW applies weight decay to this tensor."""
    return not name.endswith(NO_DECAY_SUFFIXES)


def count_parameters(tensors: Dict[str, Tensor]) -> int:
    return sum(int(t.size) for name, t in tensors.items() if not is_buffer(name))


def init_lm_tensors(
    cfg: LmConfig,
    seed: int,
    weight_std: float = WEIGHT_STD,
    zero_lambda: bool = False,
) -> Dict[str, Tensor]:
    """
    Fresh parameter table. Matrices ~ N(0, weight_std^2) truncated at 3 sigma,
    gains at 1, lambda vectors ~ N(0, 0.1^2).
    """
    rng = np.random.default_rng(seed)
    dtype = Precision(cfg.gda.precision).dtype
    d, f, v = cfg.gda.d_model, cfg.hidden, cfg.vocab_size

    tensors: Dict[str, Tensor] = {EMBED: truncated_normal(rng, (v, d), weight_std, dtype)}
    for layer in range(cfg.gda.n_layers):
        p = layer_prefix(layer)
        tensors[p + "attn_norm"] = np.ones(d, dtype=dtype)
        attn = init_attention_params(cfg.gda, layer + 1, rng, zero_lambda=zero_lambda, weight_std=weight_std)
        tensors.update(attn.to_table(attn_prefix(layer)))
        tensors[p + "mlp_norm"] = np.ones(d, dtype=dtype)
        tensors[p + "mlp.w_gate"] = truncated_normal(rng, (d, f), weight_std, dtype)
        tensors[p + "mlp.w_up"] = truncated_normal(rng, (d, f), weight_std, dtype)
        tensors[p + "mlp.w_down"] = truncated_normal(rng, (f, d), weight_std, dtype)
    tensors[FINAL_NORM] = np.ones(d, dtype=dtype)
    if not cfg.tie_embeddings:
        tensors[LM_HEAD] = truncated_normal(rng, (d, v), weight_std, dtype)
    return tensors


# ==================== FORWARD ====================

@dataclass
class LayerCache:
    x_in: Tensor
    attn: AttentionCache
    x_mid: Tensor
    h2: Tensor
    gate: Tensor
    up: Tensor
    act: Tensor


@dataclass
class ForwardCache:
    tokens: np.ndarray
    layers: List[LayerCache]
    x_final: Tensor
    normed: Tensor


def check_tokens(tokens: np.ndarray, cfg: LmConfig) -> np.ndarray:
    """Validate token ids and sequence length; returns an int64 array."""
    ids = np.asarray(tokens)
    if ids.size and not np.issubdtype(ids.dtype, np.integer):
        raise TokenRangeError(f"token ids must be integers, got {ids.dtype}")
    ids = ids.astype(np.int64)
    if ids.ndim not in (1, 2) or ids.shape[-1] < 1:
        raise DimensionError("tokens must be (N,) or (B, N) with N >= 1", [ids.shape])
    if ids.shape[-1] > cfg.gda.max_seq_len:
        raise DimensionError(f"sequence longer than max_seq_len = {cfg.gda.max_seq_len}", [ids.shape])
    bad = (ids < 0) | (ids >= cfg.vocab_size)
    if bad.any():
        raise TokenRangeError(
            f"token id {int(ids[bad].flat[0])} outside vocabulary of {cfg.vocab_size}"
        )
    return ids


def _attn(tensors: Dict[str, Tensor], layer: int) -> AttentionParams:
    return AttentionParams.from_table(tensors, attn_prefix(layer))


def _output_matrix(tensors: Dict[str, Tensor], cfg: LmConfig) -> Tensor:
    return tensors[EMBED].T if cfg.tie_embeddings else tensors[LM_HEAD]


def forward_cached(
    tensors: Dict[str, Tensor], cfg: LmConfig, tokens: np.ndarray
) -> Tuple[Tensor, ForwardCache]:
    """
    Logits for a (B, N) batch of token ids, plus the cache backward reads.
    """
    ids = check_tokens(tokens, cfg)
    if ids.ndim == 1:
        ids = ids[None]
    x = tensors[EMBED][ids]
    layers: List[LayerCache] = []
    for layer in range(cfg.gda.n_layers):
        p = layer_prefix(layer)
        x_in = x
        h1 = rms_norm(x_in, tensors[p + "attn_norm"], DEFAULT_EPS)
        a, acache = gda_forward_cached(h1, _attn(tensors, layer), cfg.gda)
        x_mid = x_in + a
        h2 = rms_norm(x_mid, tensors[p + "mlp_norm"], DEFAULT_EPS)
        gate = matmul(h2, tensors[p + "mlp.w_gate"])
        up = matmul(h2, tensors[p + "mlp.w_up"])
        act = silu(gate) * up
        x = x_mid + matmul(act, tensors[p + "mlp.w_down"])
        layers.append(LayerCache(x_in=x_in, attn=acache, x_mid=x_mid, h2=h2, gate=gate, up=up, act=act))
    normed = rms_norm(x, tensors[FINAL_NORM], DEFAULT_EPS)
    logits = matmul(normed, _output_matrix(tensors, cfg))
    debug_check(logits, "lm_forward")
    return logits, ForwardCache(tokens=ids, layers=layers, x_final=x, normed=normed)


def lm_forward(tokens: Sequence[int], ckpt: "Checkpoint") -> Tensor:
    """
    Logits for one token sequence.

    Args:
        tokens: Token ids, each < vocab_size, at most max_seq_len of them
        ckpt: Model to evaluate

    Returns:
        (N, vocab_size) logits in the model precision
    """
    ids = check_tokens(np.asarray(tokens), ckpt.config)
    if ids.ndim != 1:
        raise DimensionError("lm_forward takes a single sequence", [ids.shape])
    logits, _ = forward_cached(ckpt.tensors, ckpt.config, ids)
    return logits[0]


def hidden_states(tokens: Sequence[int], ckpt: "Checkpoint") -> List[Tensor]:
    """Residual stream after the embedding and after every layer, (N, d_model) each."""
    ids = check_tokens(np.asarray(tokens), ckpt.config)
    _, cache = forward_cached(ckpt.tensors, ckpt.config, ids)
    states = [lc.x_in[0] for lc in cache.layers]
    states.append(cache.x_final[0])
    return states


# ==================== LOSS ====================

def cross_entropy(logits: Tensor, targets: np.ndarray) -> float:
    """Mean of -log softmax(logits)[target], accumulated in float64."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise DimensionError("logits and targets disagree", [logits.shape, targets.shape])
    logp = log_softmax(logits.astype(np.float64))
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)
    return float(-picked.mean())


def _ce_grad(logits: Tensor, targets: np.ndarray) -> Tensor:
    probs = np.exp(log_softmax(logits.astype(np.float64)))
    rows = probs.reshape(-1, probs.shape[-1])
    rows[np.arange(rows.shape[0]), targets.reshape(-1)] -= 1.0
    return (probs / targets.size).astype(logits.dtype)


def backward(
    tensors: Dict[str, Tensor], cfg: LmConfig, cache: ForwardCache, dlogits: Tensor
) -> Dict[str, Tensor]:
    """Reverse-mode gradients of <dlogits, logits> for every learnable tensor."""
    grads: Dict[str, Tensor] = {}
    b, n, v = dlogits.shape
    d = cfg.gda.d_model
    flat_normed = cache.normed.reshape(b * n, d)
    flat_dlogits = dlogits.reshape(b * n, v)

    embed_grad = np.zeros_like(tensors[EMBED])
    if cfg.tie_embeddings:
        embed_grad += flat_dlogits.T @ flat_normed
        dnormed = matmul(dlogits, tensors[EMBED])
    else:
        grads[LM_HEAD] = flat_normed.T @ flat_dlogits
        dnormed = matmul(dlogits, tensors[LM_HEAD].T)

    dx, dgain = rms_norm_backward(dnormed, cache.x_final, tensors[FINAL_NORM], DEFAULT_EPS)
    grads[FINAL_NORM] = dgain.reshape(-1, d).sum(axis=0)

    for layer in reversed(range(cfg.gda.n_layers)):
        p = layer_prefix(layer)
        lc = cache.layers[layer]
        f = lc.act.shape[-1]
        w_gate, w_up, w_down = tensors[p + "mlp.w_gate"], tensors[p + "mlp.w_up"], tensors[p + "mlp.w_down"]

        grads[p + "mlp.w_down"] = lc.act.reshape(-1, f).T @ dx.reshape(-1, d)
        dact = matmul(dx, w_down.T)
        dgate = silu_backward(dact * lc.up, lc.gate)
        dup = dact * silu(lc.gate)
        h2 = lc.h2.reshape(-1, d)
        grads[p + "mlp.w_gate"] = h2.T @ dgate.reshape(-1, f)
        grads[p + "mlp.w_up"] = h2.T @ dup.reshape(-1, f)
        dh2 = matmul(dgate, w_gate.T) + matmul(dup, w_up.T)
        dxm, dgain = rms_norm_backward(dh2, lc.x_mid, tensors[p + "mlp_norm"], DEFAULT_EPS)
        grads[p + "mlp_norm"] = dgain.reshape(-1, d).sum(axis=0)
        dx = dx + dxm

        attn_grads = gda_backward(dx, lc.attn, _attn(tensors, layer), cfg.gda)
        for name, g in attn_grads.items():
            if name != "x":
                grads[attn_prefix(layer) + name] = g
        dxi, dgain = rms_norm_backward(attn_grads["x"], lc.x_in, tensors[p + "attn_norm"], DEFAULT_EPS)
        grads[p + "attn_norm"] = dgain.reshape(-1, d).sum(axis=0)
        dx = dx + dxi

    np.add.at(embed_grad, cache.tokens.reshape(-1), dx.reshape(-1, d))
    grads[EMBED] = embed_grad
    return grads


def loss_and_grads(
    tensors: Dict[str, Tensor], cfg: LmConfig, inputs: np.ndarray, targets: np.ndarray
) -> Tuple[float, Dict[str, Tensor]]:
    """
    Mean next-token cross-entropy over a batch and its gradients.

    Args:
        tensors: Model parameter table
        cfg: Model config
        inputs: (B, N) token ids
        targets: (B, N) token ids, inputs shifted by one

    Returns:
        (loss, grads) with one gradient per learnable tensor
    """
    targets = np.asarray(targets, dtype=np.int64)
    logits, cache = forward_cached(tensors, cfg, inputs)
    targets = targets.reshape(logits.shape[:-1])
    loss = cross_entropy(logits, targets)
    grads = backward(tensors, cfg, cache, _ce_grad(logits, targets))
    return loss, grads


def batch_loss(tensors: Dict[str, Tensor], cfg: LmConfig, inputs: np.ndarray, targets: np.ndarray) -> float:
    logits, _ = forward_cached(tensors, cfg, inputs)
    return cross_entropy(logits, np.asarray(targets, dtype=np.int64).reshape(logits.shape[:-1]))


# ==================== SAMPLING ====================

def generate(
    prompt: Sequence[int],
    ckpt: "Checkpoint",
    n_tokens: int,
    temperature: float = 0.0,
    seed: Optional[int] = None,
) -> List[int]:
    """
    Autoregressive continuation of prompt.

    Temperature 0 is greedy. Otherwise tokens are drawn from
    softmax(logits / temperature) with a generator seeded by `seed`.
    Contexts longer than max_seq_len keep their last max_seq_len tokens.
    """
    if temperature < 0:
        raise ConfigurationError(f"temperature must be >= 0, got {temperature}", key="temperature")
    out = [int(t) for t in prompt]
    if n_tokens <= 0:
        return out
    if not out:
        raise DimensionError("generate needs a non-empty prompt", [(0,)])
    rng = np.random.default_rng(seed)
    window = ckpt.config.gda.max_seq_len
    for _ in range(n_tokens):
        logits = lm_forward(out[-window:], ckpt)[-1].astype(np.float64)
        if temperature == 0:
            nxt = int(np.argmax(logits))
        else:
            probs = np.exp(log_softmax(logits / temperature))
            nxt = int(rng.choice(len(probs), p=probs / probs.sum()))
        out.append(nxt)
    log.debug("generated", prompt_len=len(prompt), n_tokens=n_tokens, temperature=temperature)
    return out
