"""Text embedders mapping captions into a D-dimensional semantic space.

Two backends share one interface:

* ``hashed`` derives a pseudo-random unit vector per token from its FNV-1a
  hash, so it needs no model weights and is bit-reproducible everywhere.
* ``table`` looks vectors up in a file exported offline from a sentence
  encoder. Whole-text rows are tried before per-token pooling.

Multi-token texts are mean-pooled. A text with no tokens embeds to the zero
vector; :func:`is_null` tests for it and downstream cosine code treats it as
an undefined similarity.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Literal

import numpy as np

from .rng import MASK64, SplitMix64, fnv1a64
from .textproc import tokenize

log = logging.getLogger(__name__)

TABLE_FORMAT = "emocap-embedding-table/1"


class TableFormatError(ValueError):
    def __init__(self, path, line: int, message: str) -> None:
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


class OOVError(KeyError):
    def __init__(self, token: str) -> None:
        super().__init__(f"token {token!r} not in embedding table")
        self.token = token

    def __str__(self) -> str:
        return self.args[0]


@dataclass(frozen=True)
class EmbedderConfig:
    dimension: int = 64
    seed: int = 0
    backend: Literal["hashed", "table"] = "hashed"
    table_path: str | None = None
    oov_policy: Literal["fallback_hashed", "error"] = "fallback_hashed"

    def __post_init__(self) -> None:
        if self.dimension < 2:
            raise ValueError(f"dimension must be >= 2, got {self.dimension}")
        if not 0 <= self.seed <= MASK64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.backend not in ("hashed", "table"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.oov_policy not in ("fallback_hashed", "error"):
            raise ValueError(f"unknown oov_policy {self.oov_policy!r}")
        if self.backend == "table" and not self.table_path:
            raise ValueError("table backend needs table_path")


def hashed_vector(token: str, dimension: int, seed: int) -> np.ndarray:
    """Unit vector for ``token``: FNV-1a-64 xor seed feeds a splitmix64 stream."""
    stream = SplitMix64(fnv1a64(token.encode("utf-8")) ^ seed)
    v = [stream.uniform(-1.0, 1.0) for _ in range(dimension)]
    # fsum keeps the norm correctly rounded, independent of BLAS summation order
    norm = math.sqrt(math.fsum(x * x for x in v))
    return np.array([x / norm for x in v])


@dataclass(frozen=True)
class EmbeddingTable:
    dimension: int
    rows: dict[str, np.ndarray]
    sha256: str

    def __len__(self) -> int:
        return len(self.rows)

    def __contains__(self, key: str) -> bool:
        return key in self.rows


def parse_float_row(path, lineno: int, fields: list[str], dimension: int) -> np.ndarray:
    if len(fields) != dimension:
        raise TableFormatError(path, lineno, f"expected {dimension} values, found {len(fields)}")
    try:
        values = np.array([float(f) for f in fields])
    except ValueError as exc:
        raise TableFormatError(path, lineno, f"bad float: {exc}") from None
    if not np.all(np.isfinite(values)):
        raise TableFormatError(path, lineno, "non-finite value")
    return values


def load_embedding_table(path: str | Path) -> EmbeddingTable:
    """Read ``D=<int>`` then ``<token>\\t<f1> ... <fD>`` rows; ``#`` lines are comments."""
    raw = Path(path).read_bytes()
    lines = raw.decode("utf-8").splitlines()
    if not lines:
        raise TableFormatError(path, 1, "empty file, expected header 'D=<int>'")
    header = lines[0].strip()
    if not header.startswith("D="):
        raise TableFormatError(path, 1, f"malformed header {header!r}, expected 'D=<int>'")
    try:
        dimension = int(header[2:])
    except ValueError:
        raise TableFormatError(path, 1, f"malformed header {header!r}") from None
    if dimension < 2:
        raise TableFormatError(path, 1, f"dimension must be >= 2, got {dimension}")

    rows: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        if "\t" not in line:
            raise TableFormatError(path, lineno, "expected '<token>\\t<values>'")
        token, _, values = line.partition("\t")
        if not token:
            raise TableFormatError(path, lineno, "empty token")
        if token in rows:
            raise TableFormatError(path, lineno, f"duplicate token {token!r}")
        rows[token] = parse_float_row(path, lineno, values.split(), dimension)
    return EmbeddingTable(dimension, rows, hashlib.sha256(raw).hexdigest())


def write_embedding_table(path: str | Path, rows: dict[str, np.ndarray]) -> None:
    dims = {len(v) for v in rows.values()}
    if len(dims) != 1:
        raise ValueError("rows must share one dimension")
    out = [f"D={dims.pop()}"]
    for token, vec in rows.items():
        out.append(token + "\t" + " ".join(repr(float(x)) for x in vec))
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def is_null(v: np.ndarray) -> bool:
    """True for the zero vector that marks an empty (or fully cancelled) text."""
    return not np.any(v)


@dataclass
class Embedder:
    config: EmbedderConfig
    table: EmbeddingTable | None = None
    oov_count: int = 0
    _cache: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if self.config.backend == "table":
            if self.table is None:
                self.table = load_embedding_table(self.config.table_path)
            if self.table.dimension != self.config.dimension:
                raise ValueError(
                    f"table dimension {self.table.dimension} != configured {self.config.dimension}"
                )

    @classmethod
    def from_config(cls, config: EmbedderConfig) -> Embedder:
        """Build an embedder; the table backend takes D from the table header."""
        if config.backend == "table":
            table = load_embedding_table(config.table_path)
            return cls(replace(config, dimension=table.dimension), table)
        return cls(config)

    @property
    def dimension(self) -> int:
        return self.config.dimension

    def describe(self) -> dict:
        """Everything that determines the embedding function (paths excluded)."""
        d = asdict(self.config)
        d.pop("table_path")
        d["table_sha256"] = self.table.sha256 if self.table is not None else None
        return d

    def fingerprint(self) -> str:
        blob = json.dumps(self.describe(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def embed_token(self, token: str) -> np.ndarray:
        if not token:
            raise ValueError("token must be non-empty")
        v = self._cache.get(token)
        if v is None:
            v = self._lookup(token)
            v.setflags(write=False)
            self._cache[token] = v
        return v

    def _lookup(self, token: str) -> np.ndarray:
        cfg = self.config
        if self.table is None:
            return hashed_vector(token, cfg.dimension, cfg.seed)
        row = self.table.rows.get(token)
        if row is not None:
            return row.copy()
        if cfg.oov_policy == "error":
            raise OOVError(token)
        self.oov_count += 1
        log.warning("OOV token %r, using hashed fallback (%d so far)", token, self.oov_count)
        return hashed_vector(token, cfg.dimension, cfg.seed)

    def embed_text(self, text: str) -> np.ndarray:
        if self.table is not None:
            key = text.strip()
            if key in self.table.rows:
                return self.table.rows[key].copy()
        tokens = tokenize(text)
        if not tokens:
            return np.zeros(self.dimension)
        if self.table is not None:
            joined = " ".join(tokens)
            if joined in self.table.rows:
                return self.table.rows[joined].copy()
        return self.embed_tokens(tokens)

    def embed_tokens(self, tokens: list[str]) -> np.ndarray:
        if not tokens:
            return np.zeros(self.dimension)
        if len(tokens) == 1:
            return self.embed_token(tokens[0]).copy()
        total = np.zeros(self.dimension)
        for tok in tokens:
            total += self.embed_token(tok)
        return total / len(tokens)


def embed_token(token: str, config: EmbedderConfig) -> np.ndarray:
    return Embedder.from_config(config).embed_token(token).copy()


def embed_text(text: str, config: EmbedderConfig) -> np.ndarray:
    return Embedder.from_config(config).embed_text(text)
