"""
Checkpoint container and its binary file format.

Layout (little-endian, no padding):
    b"GDA1" | u32 version | u32 header_len | header (UTF-8 JSON)
    | u32 tensor_count | per tensor:
        u16 name_len | name | u8 rank | u64 extent * rank | u8 precision tag | raw data
"""
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, BinaryIO, Dict, List, Union

import numpy as np

from .config import LmConfig
from .exceptions import CheckpointError
from .lm import count_parameters, expected_shapes, init_lm_tensors
from .logging_config import get_logger
from .tensor_core import Precision, Tensor

log = get_logger("checkpoint")

MAGIC = b"GDA1"
FORMAT_VERSION = 1
OPTIM_PREFIX = "optim."

_TAGS = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


@dataclass
class Checkpoint:
    """Named tensor table plus the config, step counter and seed provenance."""
    config: LmConfig
    tensors: Dict[str, Tensor]
    step: int = 0
    seed: int = 0
    provenance: List[Dict[str, Any]] = field(default_factory=list)
    version: int = FORMAT_VERSION

    @classmethod
    def initialize(cls, config: LmConfig, seed: int = 0, **init_kwargs: Any) -> "Checkpoint":
        """Freshly initialized model."""
        tensors = init_lm_tensors(config, seed, **init_kwargs)
        return cls(config=config, tensors=tensors, seed=seed, provenance=[{"op": "init", "seed": seed}])

    def model_tensors(self) -> Dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if not k.startswith(OPTIM_PREFIX)}

    def optimizer_tensors(self) -> Dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if k.startswith(OPTIM_PREFIX)}

    def num_parameters(self) -> int:
        return count_parameters(self.model_tensors())

    def validate(self) -> None:
        """
        Every architecture name is present with the exact shape, nothing
        unexpected is present, and each tensor has one float precision.
        """
        expected = expected_shapes(self.config)
        model = self.model_tensors()
        missing = sorted(set(expected) - set(model))
        if missing:
            raise CheckpointError(f"checkpoint is missing tensors: {', '.join(missing[:5])}")
        extra = sorted(set(model) - set(expected))
        if extra:
            raise CheckpointError(f"checkpoint has unexpected tensors: {', '.join(extra[:5])}")
        for name, shape in expected.items():
            if model[name].shape != shape:
                raise CheckpointError(f"tensor '{name}' has shape {model[name].shape}, expected {shape}")
        for name, tensor in self.tensors.items():
            if tensor.dtype not in (np.float32, np.float64):
                raise CheckpointError(f"tensor '{name}' has unsupported dtype {tensor.dtype}")

    def header(self) -> Dict[str, Any]:
        return {
            "config": self.config.model_dump(mode="json"),
            "step": self.step,
            "seed": self.seed,
            "provenance": self.provenance,
        }

    def save(self, path: Union[str, Path]) -> Path:
        """Write the checkpoint; tensors are stored in sorted name order."""
        path = Path(path)
        self.validate()
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as out:
            write_checkpoint(out, self)
        log.info("checkpoint_saved", path=str(path), step=self.step, tensors=len(self.tensors))
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise CheckpointError(f"checkpoint not found: {path}")
        with open(path, "rb") as src:
            ckpt = read_checkpoint(src)
        ckpt.validate()
        log.debug("checkpoint_loaded", path=str(path), step=ckpt.step)
        return ckpt


def write_checkpoint(out: BinaryIO, ckpt: Checkpoint) -> None:
    header = json.dumps(ckpt.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    out.write(MAGIC)
    out.write(struct.pack("<II", ckpt.version, len(header)))
    out.write(header)
    out.write(struct.pack("<I", len(ckpt.tensors)))
    for name in sorted(ckpt.tensors):
        tensor = ckpt.tensors[name]
        encoded = name.encode("utf-8")
        tag = Precision.of(tensor).tag
        out.write(struct.pack("<H", len(encoded)))
        out.write(encoded)
        out.write(struct.pack("<B", tensor.ndim))
        out.write(struct.pack(f"<{tensor.ndim}Q", *tensor.shape))
        out.write(struct.pack("<B", tag))
        out.write(np.ascontiguousarray(tensor, dtype=_TAGS[tag]).tobytes())


def _read_exact(src: BinaryIO, size: int, what: str) -> bytes:
    data = src.read(size)
    if len(data) != size:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def read_checkpoint(src: BinaryIO) -> Checkpoint:
    if _read_exact(src, 4, "magic") != MAGIC:
        raise CheckpointError("not a GDA1 checkpoint (bad magic)")
    version, header_len = struct.unpack("<II", _read_exact(src, 8, "version"))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(_read_exact(src, header_len, "header").decode("utf-8"))
        config = LmConfig.model_validate(header["config"])
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"invalid checkpoint header: {exc}") from exc

    (count,) = struct.unpack("<I", _read_exact(src, 4, "tensor count"))
    tensors: Dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _read_exact(src, 2, "name length"))
        name = _read_exact(src, name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", _read_exact(src, 1, f"rank of {name}"))
        shape = struct.unpack(f"<{rank}Q", _read_exact(src, 8 * rank, f"extents of {name}"))
        (tag,) = struct.unpack("<B", _read_exact(src, 1, f"precision of {name}"))
        if tag not in _TAGS:
            raise CheckpointError(f"tensor '{name}' has unknown precision tag {tag}")
        dtype = _TAGS[tag]
        size = int(np.prod(shape)) * dtype.itemsize
        data = np.frombuffer(_read_exact(src, size, f"data of {name}"), dtype=dtype)
        tensors[name] = data.reshape(shape).astype(dtype.newbyteorder("="), copy=True)
    if src.read(1):
        raise CheckpointError("trailing bytes after the last tensor")

    return Checkpoint(
        config=config,
        tensors=tensors,
        step=int(header.get("step", 0)),
        seed=int(header.get("seed", 0)),
        provenance=list(header.get("provenance", [])),
        version=version,
    )

