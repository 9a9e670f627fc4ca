"""
Byte-level tokenizer and the windowed training stream.
"""
import re
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Tuple, Union

import numpy as np

from .config import BOS_ID, BYTE_VOCAB, DEFAULT_VOCAB, EOS_ID
from .exceptions import CorpusError
from .logging_config import get_logger

log = get_logger("corpus")

Separator = Literal["file", "blank_line"]

_BLANK_LINE = re.compile(rb"\r?\n[ \t]*\r?\n")


class ByteTokenizer:
    """Identity over bytes, plus BOS (256) and EOS (257)."""

    bos_id = BOS_ID
    eos_id = EOS_ID
    vocab_size = DEFAULT_VOCAB

    def encode(self, data: Union[str, bytes], add_special: bool = True) -> List[int]:
        raw = data.encode("utf-8") if isinstance(data, str) else bytes(data)
        ids = list(raw)
        return [self.bos_id, *ids, self.eos_id] if add_special else ids

    def decode(self, ids: Sequence[int]) -> str:
        """Bytes back to text; special ids are skipped and bad UTF-8 replaced."""
        raw = bytes(int(i) for i in ids if 0 <= int(i) < BYTE_VOCAB)
        return raw.decode("utf-8", errors="replace")


def split_documents(data: bytes, separator: Separator) -> List[bytes]:
    if separator == "file":
        return [data] if data else []
    return [doc for doc in _BLANK_LINE.split(data) if doc.strip()]


class CorpusStream:
    """
    Fixed-stride windows of seq_len + 1 tokens over a token buffer.

    The final holdout_frac of windows is kept back for evaluation. The
    training batch for a step depends only on (seed, step): windows are
    visited epoch by epoch in an order drawn from default_rng([seed, epoch]).
    """

    def __init__(
        self,
        tokens: np.ndarray,
        seq_len: int,
        seed: int = 0,
        holdout_frac: float = 0.0,
        sources: Sequence[str] = (),
        separator: Separator = "file",
    ):
        self.tokens = np.asarray(tokens, dtype=np.int64)
        self.seq_len = seq_len
        self.seed = seed
        self.sources = list(sources)
        self.separator = separator
        n_windows = (self.tokens.size - 1) // seq_len if self.tokens.size else 0
        if n_windows < 1:
            raise CorpusError(
                f"corpus has {self.tokens.size} tokens; at least {seq_len + 1} "
                f"(one window of seq_len + 1) are required"
            )
        self.n_windows = n_windows
        held = int(n_windows * holdout_frac) if n_windows >= 2 else 0
        if holdout_frac > 0 and n_windows >= 2:
            held = max(1, held)
        self.n_holdout = min(held, n_windows - 1)
        self.n_train = n_windows - self.n_holdout
        self._order_epoch = -1
        self._order = np.zeros(0, dtype=np.int64)

    def window(self, index: int) -> np.ndarray:
        start = index * self.seq_len
        return self.tokens[start:start + self.seq_len + 1]

    def epoch_order(self, epoch: int) -> np.ndarray:
        """Shuffled training-window order of one epoch; only the latest epoch is cached."""
        if epoch != self._order_epoch:
            self._order = np.random.default_rng([self.seed, epoch]).permutation(self.n_train)
            self._order_epoch = epoch
        return self._order

    def batch_windows(self, step: int, batch_sequences: int) -> np.ndarray:
        """(batch_sequences, seq_len + 1) windows for a training step."""
        rows = []
        for k in range(step * batch_sequences, (step + 1) * batch_sequences):
            epoch, pos = divmod(k, self.n_train)
            rows.append(self.window(int(self.epoch_order(epoch)[pos])))
        return np.stack(rows)

    def batch(self, step: int, batch_sequences: int) -> Tuple[np.ndarray, np.ndarray]:
        """(inputs, targets), each (batch_sequences, seq_len)."""
        windows = self.batch_windows(step, batch_sequences)
        return windows[:, :-1], windows[:, 1:]

    def holdout(self) -> np.ndarray:
        """Held-out windows, (n_holdout, seq_len + 1); empty when nothing is held out."""
        if not self.n_holdout:
            return np.zeros((0, self.seq_len + 1), dtype=np.int64)
        return np.stack([self.window(i) for i in range(self.n_train, self.n_windows)])

    def train_windows(self, limit: int = 0) -> np.ndarray:
        count = self.n_train if limit <= 0 else min(limit, self.n_train)
        return np.stack([self.window(i) for i in range(count)])


def _read(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except OSError as exc:
        raise CorpusError(f"cannot read corpus file {path}: {exc}") from exc


def ingest(
    paths: Sequence[Union[str, Path]],
    tokenizer: Optional[ByteTokenizer] = None,
    seq_len: int = 128,
    seed: int = 0,
    separator: Separator = "file",
    holdout_frac: float = 0.0,
) -> CorpusStream:
    """
    Tokenize files into one stream: BOS + bytes + EOS per document, files
    in the given order.

    Raises:
        CorpusError: no paths, unreadable file, empty corpus, or fewer
            tokens than one window
    """
    tokenizer = tokenizer or ByteTokenizer()
    if not paths:
        raise CorpusError("no corpus files given")
    ids: List[int] = []
    documents = 0
    for raw_path in paths:
        path = Path(raw_path)
        if not path.is_file():
            raise CorpusError(f"corpus file not found: {path}")
        for doc in split_documents(_read(path), separator):
            ids.extend(tokenizer.encode(doc))
            documents += 1
    if not documents:
        raise CorpusError("corpus is empty")
    stream = CorpusStream(
        np.asarray(ids, dtype=np.int64), seq_len, seed=seed, holdout_frac=holdout_frac,
        sources=[str(p) for p in paths], separator=separator,
    )
    log.info("corpus_ingested", files=len(paths), documents=documents, tokens=len(ids),
             windows=stream.n_windows, holdout=stream.n_holdout)
    return stream
