"""
Pretraining loop: AdamW with decoupled weight decay under a
Warmup-Stable-Decay schedule, over a byte-level corpus stream.
"""
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, TextIO, Tuple, Union

import numpy as np

from .checkpoint import OPTIM_PREFIX, Checkpoint
from .config import TrainConfig
from .corpus import CorpusStream
from .exceptions import ConfigurationError, CorpusError, DimensionError, NonFiniteError, TrainingAbort
from .lm import batch_loss, decays, is_buffer, loss_and_grads
from .logging_config import get_logger
from .tensor_core import Tensor, global_norm

log = get_logger("training")

TIMING_FIELDS = ("tokens_per_sec", "wall_ms")


def phase_lengths(total_steps: int, cfg: TrainConfig) -> Tuple[int, int]:
    """(warmup steps, decay steps), each rounded to the nearest step."""
    return round(cfg.warmup_frac * total_steps), round(cfg.decay_frac * total_steps)


def wsd_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """
    Warmup-Stable-Decay learning rate.

    Linear 0 -> peak over the warmup steps (so step 0 is 0), constant peak,
    then linear peak -> 0 over the final decay steps.
    """
    if not 0 <= step < total_steps:
        raise ConfigurationError(f"step {step} outside [0, {total_steps})", key="total_steps")
    warmup, decay = phase_lengths(total_steps, cfg)
    if step < warmup:
        return cfg.peak_lr * step / warmup
    if decay and step >= total_steps - decay:
        return cfg.peak_lr * (total_steps - step) / decay
    return cfg.peak_lr


# ==================== OPTIMIZER ====================

@dataclass
class AdamWState:
    """First/second moments per tensor and the update counter."""
    m: Dict[str, Tensor] = field(default_factory=dict)
    v: Dict[str, Tensor] = field(default_factory=dict)
    t: int = 0

    def to_table(self) -> Dict[str, Tensor]:
        table = {f"{OPTIM_PREFIX}m.{k}": a for k, a in self.m.items()}
        table.update({f"{OPTIM_PREFIX}v.{k}": a for k, a in self.v.items()})
        return table

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "AdamWState":
        m: Dict[str, Tensor] = {}
        v: Dict[str, Tensor] = {}
        for name, tensor in ckpt.optimizer_tensors().items():
            kind, _, param = name[len(OPTIM_PREFIX):].partition(".")
            (m if kind == "m" else v)[param] = tensor.copy()
        return cls(m=m, v=v, t=ckpt.step if m else 0)


def adamw_step(
    params: Dict[str, Tensor],
    grads: Dict[str, Tensor],
    state: AdamWState,
    lr: float,
    cfg: TrainConfig,
) -> Tuple[Dict[str, Tensor], AdamWState]:
    """
    One AdamW update: theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta).

    Norm gains, lambda vectors and buffers get no weight decay. Tensors
    without a gradient are carried over unchanged. Inputs are not mutated.
    """
    t = state.t + 1
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    new_params: Dict[str, Tensor] = {}
    new_m: Dict[str, Tensor] = {}
    new_v: Dict[str, Tensor] = {}
    for name, theta in params.items():
        grad = grads.get(name)
        if grad is None or is_buffer(name):
            new_params[name] = theta
            continue
        if grad.shape != theta.shape:
            raise DimensionError(f"gradient for '{name}' has the wrong shape", [grad.shape, theta.shape])
        m = state.m.get(name, np.zeros_like(theta))
        v = state.v.get(name, np.zeros_like(theta))
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
        if decays(name):
            update = update + cfg.weight_decay * theta
        new_params[name] = (theta - lr * update).astype(theta.dtype, copy=False)
        new_m[name] = m.astype(theta.dtype, copy=False)
        new_v[name] = v.astype(theta.dtype, copy=False)
    return new_params, AdamWState(m=new_m, v=new_v, t=t)


def clip_gradients(grads: Dict[str, Tensor], max_norm: float) -> Tuple[Dict[str, Tensor], float]:
    """Scale all gradients by max_norm / norm when the global norm exceeds max_norm."""
    norm = global_norm(grads.values())
    if not math.isfinite(norm) or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


# ==================== EVALUATION ====================

def eval_perplexity(ckpt: Checkpoint, windows: np.ndarray, batch_sequences: int = 16) -> float:
    """exp(mean token NLL) over (M, N + 1) windows, scored against next-token targets."""
    windows = np.asarray(windows)
    if windows.ndim != 2 or windows.shape[0] == 0 or windows.shape[1] < 2:
        raise CorpusError("evaluation slice is empty")
    tensors = ckpt.model_tensors()
    total = 0.0
    count = 0
    for start in range(0, len(windows), batch_sequences):
        chunk = windows[start:start + batch_sequences]
        loss = batch_loss(tensors, ckpt.config, chunk[:, :-1], chunk[:, 1:])
        total += loss * chunk[:, 1:].size
        count += chunk[:, 1:].size
    return math.exp(total / count)


# ==================== METRICS ====================

class MetricsWriter:
    """Append-only JSON-lines metrics log."""

    def __init__(self, path: Union[str, Path], append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh: Optional[TextIO] = open(self.path, "a" if append else "w", encoding="utf-8")

    def write(self, record: Dict[str, Any]) -> None:
        assert self._fh is not None
        self._fh.write(json.dumps(record) + "\n")
        self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()


def read_metrics(path: Union[str, Path], drop_timing: bool = False) -> List[Dict[str, Any]]:
    records = [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line]
    if drop_timing:
        for record in records:
            for key in TIMING_FIELDS:
                record.pop(key, None)
    return records


# ==================== LOOP ====================

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    checkpoint_path: Path
    metrics_path: Path
    losses: List[float]
    eval_ppl: Optional[float] = None


def _snapshot(ckpt: Checkpoint, tensors: Dict[str, Tensor], state: AdamWState, step: int) -> Checkpoint:
    return Checkpoint(
        config=ckpt.config,
        tensors={**tensors, **state.to_table()},
        step=step,
        seed=ckpt.seed,
        provenance=ckpt.provenance,
    )


def train(
    ckpt: Checkpoint,
    corpus: CorpusStream,
    cfg: TrainConfig,
    out_dir: Union[str, Path],
) -> TrainResult:
    """
    Train from ckpt.step up to cfg.total_steps.

    Writes metrics.jsonl (one record per step, then a summary line),
    periodic checkpoints step_XXXXXX.gda every checkpoint_every steps and
    final.gda. Checkpoints carry the AdamW moments, and the batch for a
    step depends only on (seed, step), so resuming from any written
    checkpoint replays the original run.

    Raises:
        TrainingAbort: the loss or gradient norm became non-finite
    """
    if ckpt.config.gda.precision != cfg.precision:
        raise ConfigurationError(
            f"model precision {ckpt.config.gda.precision} != training precision {cfg.precision}",
            key="precision",
        )
    if corpus.seq_len > ckpt.config.gda.max_seq_len:
        raise ConfigurationError(
            f"seq_len {corpus.seq_len} exceeds max_seq_len {ckpt.config.gda.max_seq_len}", key="seq_len"
        )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"

    tensors = ckpt.model_tensors()
    state = AdamWState.from_checkpoint(ckpt)
    start = ckpt.step
    last_good: Optional[str] = None
    losses: List[float] = []
    eval_ppl: Optional[float] = None
    log.info("train_start", start_step=start, total_steps=cfg.total_steps,
             params=ckpt.num_parameters(), tokens_per_step=cfg.tokens_per_step)

    with MetricsWriter(metrics_path, append=start > 0) as metrics:
        for step in range(start, cfg.total_steps):
            began = time.perf_counter()
            inputs, targets = corpus.batch(step, cfg.batch_sequences)
            try:
                loss, grads = loss_and_grads(tensors, ckpt.config, inputs, targets)
            except NonFiniteError as exc:
                log.error("non_finite_forward", step=step, stage=exc.stage, last_good=last_good)
                raise TrainingAbort(step, last_good) from exc
            grads, norm = clip_gradients(grads, cfg.grad_clip)
            if not (math.isfinite(loss) and math.isfinite(norm)):
                log.error("non_finite_loss", step=step, loss=loss, grad_norm=norm, last_good=last_good)
                raise TrainingAbort(step, last_good)
            lr = wsd_lr(step, cfg.total_steps, cfg)
            tensors, state = adamw_step(tensors, grads, state, lr, cfg)
            wall = time.perf_counter() - began
            losses.append(loss)

            record: Dict[str, Any] = {
                "step": step,
                "lr": lr,
                "loss": loss,
                "grad_norm": norm,
                "tokens_per_sec": inputs.size / wall if wall > 0 else 0.0,
                "wall_ms": wall * 1000.0,
            }
            done = step + 1
            if cfg.eval_every and done % cfg.eval_every == 0 and corpus.n_holdout:
                eval_ppl = eval_perplexity(_snapshot(ckpt, tensors, state, done), corpus.holdout(), cfg.batch_sequences)
                record["eval_ppl"] = eval_ppl
            metrics.write(record)
            if step % cfg.log_every == 0:
                log.info("train_step", step=step, loss=round(loss, 4), lr=lr, grad_norm=round(norm, 4))
            if cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < cfg.total_steps:
                path = _snapshot(ckpt, tensors, state, done).save(out / f"step_{done:06d}.gda")
                last_good = str(path)

        final = _snapshot(ckpt, tensors, state, max(start, cfg.total_steps))
        final_path = final.save(out / "final.gda")
        metrics.write({
            "summary": "train",
            "steps": len(losses),
            "final_step": final.step,
            "final_loss": losses[-1] if losses else None,
            "eval_ppl": eval_ppl,
            "checkpoint": final_path.name,
        })

    log.info("train_done", steps=len(losses), final_loss=losses[-1] if losses else None)
    return TrainResult(
        checkpoint=final, checkpoint_path=final_path, metrics_path=metrics_path, losses=losses, eval_ppl=eval_ppl
    )


def smoothed(values: List[float], window: int = 100) -> List[float]:
    """Trailing moving average; the first window-1 entries average what exists so far."""
    out: List[float] = []
    acc = 0.0
    for i, value in enumerate(values):
        acc += value
        if i >= window:
            acc -= values[i - window]
        out.append(acc / min(i + 1, window))
    return out
