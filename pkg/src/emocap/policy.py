"""Tabular context-conditioned bigram caption policy.

``logits[c, prev, next]`` scores the next token given the context ID and the
previous token. Every caption is framed as ``BOS tokens... EOS``, so the
probability of a caption is a product of row softmaxes and its gradient with
respect to the logits is available in closed form.
"""
from __future__ import annotations

import hashlib
import json
import struct
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import SplitMix64

BOS, EOS = "<bos>", "<eos>"
BOS_ID, EOS_ID = 0, 1
CHECKPOINT_FORMAT = "emocap-policy/1"
GREEDY_TEMPERATURE = 1e-6


class VocabularyError(KeyError):
    def __init__(self, token: str) -> None:
        super().__init__(f"token {token!r} is not in the policy vocabulary")
        self.token = token

    def __str__(self) -> str:
        return self.args[0]


class CheckpointError(ValueError):
    pass


def log_softmax(row: np.ndarray) -> np.ndarray:
    m = row.max(axis=-1, keepdims=True)
    shifted = row - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(row: np.ndarray) -> np.ndarray:
    e = np.exp(row - row.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class PolicyParams:
    vocab: tuple[str, ...]
    logits: np.ndarray
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.vocab = tuple(self.vocab)
        if len(self.vocab) < 3 or self.vocab[BOS_ID] != BOS or self.vocab[EOS_ID] != EOS:
            raise ValueError("vocab needs BOS at 0, EOS at 1 and at least one word")
        if len(set(self.vocab)) != len(self.vocab):
            raise ValueError("vocab has duplicate tokens")
        v = len(self.vocab)
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.ndim != 3 or self.logits.shape[1:] != (v, v) or self.logits.shape[0] < 1:
            raise ValueError(f"logits must have shape (C, {v}, {v}), got {self.logits.shape}")
        if not np.all(np.isfinite(self.logits)):
            raise ValueError("logits must be finite")
        self.index = {tok: i for i, tok in enumerate(self.vocab)}

    @classmethod
    def uniform(cls, words: Sequence[str], n_contexts: int) -> PolicyParams:
        vocab = (BOS, EOS, *words)
        return cls(vocab, np.zeros((n_contexts, len(vocab), len(vocab))))

    @property
    def V(self) -> int:
        return len(self.vocab)

    @property
    def C(self) -> int:
        return self.logits.shape[0]

    def copy(self) -> PolicyParams:
        return PolicyParams(self.vocab, self.logits.copy())

    def encode(self, tokens: Sequence[str]) -> list[int]:
        try:
            return [self.index[t] for t in tokens]
        except KeyError as exc:
            raise VocabularyError(exc.args[0]) from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.vocab[i] for i in ids]

    def check_context(self, context: int) -> None:
        if not 0 <= context < self.C:
            raise ValueError(f"context {context} outside [0, {self.C})")


def transitions(ids: Sequence[int], terminated: bool = True) -> list[tuple[int, int]]:
    """(prev, next) pairs of a framed caption; EOS is appended when terminated."""
    seq = [BOS_ID, *ids, EOS_ID] if terminated else [BOS_ID, *ids]
    return list(zip(seq, seq[1:]))


def step_log_probs(params: PolicyParams, context: int, steps: Sequence[tuple[int, int]]) -> np.ndarray:
    rows = params.logits[context]
    return np.array([log_softmax(rows[p])[n] for p, n in steps])


def log_prob(params: PolicyParams, context: int, sequence: Sequence[str]) -> float:
    """log P(sequence | context), EOS step included."""
    params.check_context(context)
    steps = transitions(params.encode(sequence))
    return float(step_log_probs(params, context, steps).sum())


def grad_steps(params: PolicyParams, context: int, steps: Sequence[tuple[int, int]],
               weights: Sequence[float] | None = None, out: np.ndarray | None = None) -> np.ndarray:
    """Accumulate sum_t w_t * d log pi(next_t | prev_t) / d logits into ``out``."""
    if out is None:
        out = np.zeros_like(params.logits)
    rows = params.logits[context]
    for k, (p, n) in enumerate(steps):
        w = 1.0 if weights is None else weights[k]
        if w == 0.0:
            continue
        out[context, p] -= w * softmax(rows[p])
        out[context, p, n] += w
    return out


def grad_log_prob(params: PolicyParams, context: int, sequence: Sequence[str]) -> np.ndarray:
    """Gradient of :func:`log_prob`: one-hot(next) - softmax(row) per visited row."""
    params.check_context(context)
    return grad_steps(params, context, transitions(params.encode(sequence)))


@dataclass
class Sample:
    tokens: list[str]
    ids: list[int]
    terminated: bool
    log_probs: np.ndarray
    tempered_log_probs: np.ndarray

    @property
    def steps(self) -> list[tuple[int, int]]:
        return transitions(self.ids, self.terminated)


def sample(params: PolicyParams, context: int, temperature: float, max_len: int,
           rng: SplitMix64 | int) -> Sample:
    """Ancestral sampling until EOS or ``max_len`` caption tokens.

    Returns the log-probabilities of the realised steps under the untempered
    policy (used for importance ratios) and under the tempered one. Below
    ``GREEDY_TEMPERATURE`` decoding is greedy.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    params.check_context(context)
    if not isinstance(rng, SplitMix64):
        rng = SplitMix64(rng)
    rows = params.logits[context]
    greedy = temperature < GREEDY_TEMPERATURE
    ids: list[int] = []
    lps: list[float] = []
    tlps: list[float] = []
    prev = BOS_ID
    terminated = False
    while True:
        row = rows[prev]
        base = log_softmax(row)
        if greedy:
            nxt = int(np.argmax(row))
            tlps.append(0.0)
        else:
            tempered = log_softmax(row / temperature)
            cdf = np.cumsum(np.exp(tempered))
            nxt = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), len(row) - 1)
            tlps.append(float(tempered[nxt]))
        lps.append(float(base[nxt]))
        if nxt == EOS_ID:
            terminated = True
            break
        ids.append(nxt)
        if len(ids) >= max_len:
            break
        prev = nxt
    return Sample(params.decode(ids), ids, terminated, np.array(lps), np.array(tlps))


# --- checkpoints ------------------------------------------------------------

def checkpoint_bytes(params: PolicyParams) -> bytes:
    header = json.dumps(
        {"format": CHECKPOINT_FORMAT, "V": params.V, "C": params.C, "vocab": list(params.vocab)},
        ensure_ascii=False, separators=(",", ":"),
    ).encode("utf-8")
    body = params.logits.astype("<f8").tobytes(order="C")
    payload = struct.pack("<Q", len(header)) + header + body
    return payload + hashlib.sha256(payload).digest()


def save_checkpoint(path: str | Path, params: PolicyParams) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path: str | Path) -> PolicyParams:
    """Layout: u64 header length, JSON header, C*V*V little-endian f64, sha256."""
    raw = Path(path).read_bytes()
    if len(raw) < 40:
        raise CheckpointError(f"{path}: truncated checkpoint")
    payload, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    (hlen,) = struct.unpack_from("<Q", payload)
    header = json.loads(payload[8:8 + hlen].decode("utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unknown format {header.get('format')!r}")
    v, c = header["V"], header["C"]
    body = payload[8 + hlen:]
    if len(body) != c * v * v * 8 or len(header["vocab"]) != v:
        raise CheckpointError(f"{path}: body size does not match header")
    logits = np.frombuffer(body, dtype="<f8").reshape(c, v, v).astype(np.float64)
    return PolicyParams(tuple(header["vocab"]), logits)
