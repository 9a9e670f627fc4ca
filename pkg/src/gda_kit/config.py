"""
Configuration models and the flat `key = value` run-config format.
"""
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .exceptions import ConfigurationError

BYTE_VOCAB = 256
BOS_ID = 256
EOS_ID = 257
DEFAULT_VOCAB = BYTE_VOCAB + 2


class GdaConfig(BaseModel):
    """Architecture hyperparameters for one stack of GDA layers."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    d_model: int = Field(..., ge=1)
    n_layers: int = Field(..., ge=1)
    n_heads: int = Field(..., ge=2, description="Total attention heads H (signal + noise)")
    ratio: int = Field(..., ge=1, description="Imbalance ratio G in G:1")
    d_head: int = Field(..., ge=2, description="Per-branch head width")
    n_kv: Optional[int] = Field(None, ge=1, description="Key/value units for the signal branch")
    rope_theta: float = Field(10000.0, gt=0)
    max_seq_len: int = Field(256, ge=1)
    lambda_init_mode: Literal["schedule", "fixed"] = "schedule"
    lambda_init_value: float = 0.8
    precision: Literal["f32", "f64"] = "f32"

    @model_validator(mode="after")
    def _check_grouping(self) -> "GdaConfig":
        if self.n_heads % (self.ratio + 1):
            raise ValueError(
                f"(G + 1) = {self.ratio + 1} must divide H = {self.n_heads}"
            )
        if self.d_head % 2:
            raise ValueError(f"d_head must be even for RoPE, got {self.d_head}")
        if self.n_kv is not None and self.n_signal % self.n_kv:
            raise ValueError(
                f"n_kv = {self.n_kv} must divide the signal-head count S = {self.n_signal}"
            )
        if not 0.0 <= self.lambda_init_value < 1.0:
            raise ValueError(f"lambda_init_value must lie in [0, 1), got {self.lambda_init_value}")
        return self

    @property
    def n_noise(self) -> int:
        """h = H / (G + 1)"""
        return self.n_heads // (self.ratio + 1)

    @property
    def n_signal(self) -> int:
        """S = H - h"""
        return self.n_heads - self.n_noise

    @property
    def kv_units(self) -> int:
        return self.n_kv if self.n_kv is not None else self.n_signal


def default_mlp_hidden(d_model: int) -> int:
    """4 * d_model * 2/3 rounded up to a multiple of 64."""
    return -(-8 * d_model // 192) * 64


class LmConfig(BaseModel):
    """Decoder-only language model wrapped around a GDA stack."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    gda: GdaConfig
    vocab_size: int = Field(DEFAULT_VOCAB, ge=2)
    mlp_hidden: Optional[int] = None
    tie_embeddings: bool = True

    @model_validator(mode="before")
    @classmethod
    def _fill_mlp_hidden(cls, data: Any) -> Any:
        if isinstance(data, dict) and data.get("mlp_hidden") is None and "gda" in data:
            gda = data["gda"]
            d_model = gda.d_model if isinstance(gda, GdaConfig) else int(gda["d_model"])
            data = {**data, "mlp_hidden": default_mlp_hidden(d_model)}
        return data

    @model_validator(mode="after")
    def _check_mlp_hidden(self) -> "LmConfig":
        if self.hidden < self.gda.d_model:
            raise ValueError(
                f"mlp_hidden = {self.mlp_hidden} must be >= d_model = {self.gda.d_model}"
            )
        return self

    @property
    def hidden(self) -> int:
        assert self.mlp_hidden is not None
        return self.mlp_hidden


class TrainConfig(BaseModel):
    """Optimizer, schedule and batching hyperparameters."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    peak_lr: float = Field(5e-4, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.95, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    weight_decay: float = Field(0.1, ge=0)
    warmup_frac: float = Field(0.05, ge=0, le=1)
    decay_frac: float = Field(0.10, ge=0, le=1)
    total_steps: int = Field(..., ge=1)
    batch_sequences: int = Field(16, ge=1)
    seq_len: int = Field(128, ge=1)
    seed: int = 0
    grad_clip: float = Field(1.0, gt=0)
    eval_every: int = Field(0, ge=0, description="0 disables periodic evaluation")
    checkpoint_every: int = Field(0, ge=0, description="0 writes only the final checkpoint")
    log_every: int = Field(10, ge=1)
    holdout_frac: float = Field(0.05, ge=0, lt=1)
    separator: Literal["file", "blank_line"] = "file"
    precision: Literal["f32", "f64"] = "f32"

    @model_validator(mode="after")
    def _check_phases(self) -> "TrainConfig":
        if self.warmup_frac + self.decay_frac > 1.0:
            raise ValueError(
                f"warmup_frac + decay_frac must not exceed 1 "
                f"(got {self.warmup_frac} + {self.decay_frac})"
            )
        return self

    @property
    def tokens_per_step(self) -> int:
        return self.batch_sequences * self.seq_len


# Full-size shapes. Where a listed KV count does not divide S the preset
# falls back to n_kv = h; the note records the substitution.
_H48_BASE = dict(d_model=1536, n_layers=24, n_heads=48, d_head=32, rope_theta=10000.0, max_seq_len=4096)
_GROWTH_BASE = dict(n_layers=24, d_head=64, rope_theta=10000.0, max_seq_len=4096)

PRESETS: Dict[str, Dict[str, Any]] = {
    "toy": dict(d_model=32, n_layers=2, n_heads=8, ratio=3, d_head=8, n_kv=2, max_seq_len=64),
    "h48-r1": dict(_H48_BASE, ratio=1, n_kv=12),
    "h48-r2": dict(_H48_BASE, ratio=2, n_kv=16),
    "h48-r3": dict(_H48_BASE, ratio=3, n_kv=12),
    "h48-r5": dict(_H48_BASE, ratio=5, n_kv=8),
    "h48-r11": dict(_H48_BASE, ratio=11, n_kv=4),
    "growth-small-r1": dict(_GROWTH_BASE, d_model=1024, n_heads=16, ratio=1, n_kv=8),
    "growth-scaled-r1": dict(_GROWTH_BASE, d_model=2048, n_heads=32, ratio=1, n_kv=16),
    "growth-r3": dict(_GROWTH_BASE, d_model=2048, n_heads=32, ratio=3, n_kv=24),
    "growth-r4": dict(_GROWTH_BASE, d_model=2048, n_heads=40, ratio=4, n_kv=32),
}

PRESET_NOTES: Dict[str, str] = {
    "h48-r2": "listed KV heads 12 do not divide S=32; n_kv = h = 16",
    "h48-r5": "listed KV heads 12 do not divide S=40; n_kv = h = 8",
    "h48-r11": "listed KV heads 12 do not divide S=44; n_kv = h = 4",
    "growth-small-r1": "listed KV heads 16 exceed S=8; n_kv = S",
    "growth-scaled-r1": "KV units replicate with signal heads under cloning",
    "growth-r3": "KV units replicate with signal heads under cloning",
    "growth-r4": "KV units replicate with signal heads under cloning",
}


def preset(name: str, **overrides: Any) -> GdaConfig:
    """Build a GdaConfig from a named preset, with field overrides."""
    if name not in PRESETS:
        raise ConfigurationError(
            f"Unknown preset '{name}'. Available: {', '.join(sorted(PRESETS))}", key="preset"
        )
    return GdaConfig(**{**PRESETS[name], **overrides})


# ==================== RUN CONFIG FILES ====================

_GDA_KEYS = set(GdaConfig.model_fields)
_LM_KEYS = set(LmConfig.model_fields) - {"gda"}
_TRAIN_KEYS = set(TrainConfig.model_fields)
_EXTRA_KEYS = {"corpus", "preset"}
KNOWN_KEYS = _GDA_KEYS | _LM_KEYS | _TRAIN_KEYS | _EXTRA_KEYS


def parse_config_text(text: str) -> Dict[str, str]:
    """
    Parse flat `key = value` lines.

    Raises:
        ConfigurationError: malformed line, duplicate key or unknown key
    """
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got '{line}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KNOWN_KEYS:
            raise ConfigurationError(f"line {lineno}: unknown config key '{key}'", key=key)
        if key in values:
            raise ConfigurationError(f"line {lineno}: duplicate config key '{key}'", key=key)
        values[key] = value
    return values


def _first_error(exc: ValidationError) -> Tuple[Optional[str], str]:
    errors = sorted(exc.errors(), key=lambda e: e.get("type") != "missing")
    for err in errors:
        key = str(err["loc"][-1]) if err.get("loc") else None
        return key, err.get("msg", str(exc))
    return None, str(exc)


def _build(model: type, fields: Dict[str, Any], section: str) -> Any:
    try:
        return model(**fields)
    except ValidationError as exc:
        key, msg = _first_error(exc)
        if key and key not in fields:
            raise ConfigurationError(f"missing config key '{key}' ({section})", key=key) from exc
        raise ConfigurationError(f"invalid {section} config at '{key}': {msg}", key=key) from exc


class RunConfig(BaseModel):
    """Everything a train/eval run reads from its config file."""
    model_config = ConfigDict(frozen=True)

    lm: LmConfig
    train: TrainConfig
    corpus: List[str] = Field(default_factory=list)


def load_run_config(
    source: Union[str, Path, Dict[str, str]], require_train: bool = True
) -> RunConfig:
    """
    Load a run config from a file path or an already-parsed mapping.

    Args:
        source: Path to a `key = value` file, or parsed values
        require_train: When False, `total_steps` may be omitted (eval/inspect)
    """
    if isinstance(source, dict):
        values = dict(source)
    else:
        path = Path(source)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}", key="config")
        values = parse_config_text(path.read_text(encoding="utf-8"))

    gda_fields: Dict[str, Any] = {}
    if "preset" in values:
        gda_fields.update(preset(values["preset"]).model_dump())
    gda_fields.update({k: v for k, v in values.items() if k in _GDA_KEYS})
    if "precision" in values:
        gda_fields["precision"] = values["precision"]

    gda = _build(GdaConfig, gda_fields, "model")
    lm_fields: Dict[str, Any] = {k: v for k, v in values.items() if k in _LM_KEYS}
    lm = _build(LmConfig, {"gda": gda, **lm_fields}, "model")

    train_fields: Dict[str, Any] = {k: v for k, v in values.items() if k in _TRAIN_KEYS}
    if not require_train:
        train_fields.setdefault("total_steps", 1)
    train = _build(TrainConfig, train_fields, "training")

    corpus = [p.strip() for p in values.get("corpus", "").split(",") if p.strip()]
    return RunConfig(lm=lm, train=train, corpus=corpus)
