"""Composite caption reward: weighted emotion alignment plus BLEU and SPICE."""
from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from .embedding import Embedder, is_null
from .emotion_space import EmotionAnchorSet, RewardUndefined, cosine, project
from .metrics import bleu, spice_lite
from .textproc import tokenize


class DataError(ValueError):
    """A dataset row cannot be scored (for example an empty reference)."""


@dataclass(frozen=True)
class RewardWeights:
    alpha: float = 1.0
    beta: float = 1.0
    emo_floor: float = 0.0
    # lets ablations switch a term off; normal runs keep both weights positive
    allow_zero: bool = False

    def __post_init__(self) -> None:
        lo_ok = (lambda w: w >= 0) if self.allow_zero else (lambda w: w > 0)
        if not (lo_ok(self.alpha) and lo_ok(self.beta)):
            raise ValueError(f"weights must be positive, got alpha={self.alpha} beta={self.beta}")


@dataclass(frozen=True)
class RewardBreakdown:
    r_emo: float
    s_bleu: float
    s_spice: float
    r_total: float
    degenerate: bool = False

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class CaptionScorer:
    """Scores generated captions against references.

    Reference emotion coordinates are cached by text, since GRPO scores every
    group member against the same reference.
    """

    anchors: EmotionAnchorSet
    embedder: Embedder
    weights: RewardWeights = field(default_factory=RewardWeights)
    _ref_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self.anchors.check_embedder(self.embedder)

    def _coords(self, text: str) -> np.ndarray | None:
        t = self.embedder.embed_text(text)
        if is_null(t):
            return None
        return project(t, self.anchors)

    def _reference(self, ref: str):
        hit = self._ref_cache.get(ref)
        if hit is None:
            tokens = tokenize(ref)
            if not tokens:
                raise DataError(f"reference {ref!r} has no tokens")
            coords = self._coords(ref)
            if coords is None or not np.any(coords):
                raise DataError(f"reference {ref!r} has no emotion coordinates")
            hit = (tokens, coords)
            self._ref_cache[ref] = hit
        return hit

    def score_tokens(self, gen_tokens: list[str], ref: str, gen_text: str | None = None) -> RewardBreakdown:
        ref_tokens, ref_coords = self._reference(ref)
        w = self.weights
        degenerate = False
        if gen_text is None:
            gen_text = " ".join(gen_tokens)
        coords = self._coords(gen_text) if gen_tokens else None
        try:
            if coords is None:
                raise RewardUndefined("generated caption has no embedding")
            r_emo = cosine(coords, ref_coords)
        except RewardUndefined:
            r_emo = w.emo_floor
            degenerate = True
        s_bleu = bleu(gen_tokens, ref_tokens, 4, smoothed=True)
        s_spice = spice_lite(gen_tokens, ref_tokens)
        r_total = w.alpha * r_emo + w.beta * (s_bleu + s_spice)
        return RewardBreakdown(r_emo, s_bleu, s_spice, r_total, degenerate)

    def score_pair(self, gen: str, ref: str) -> RewardBreakdown:
        return self.score_tokens(tokenize(gen), ref, gen)

    def score_group(self, gens: Sequence[str], ref: str) -> list[RewardBreakdown]:
        if len(gens) < 2:
            raise ValueError("a rollout group needs at least two captions")
        return [self.score_pair(g, ref) for g in gens]


def score_pair(gen: str, ref: str, anchors: EmotionAnchorSet, embedder: Embedder,
               weights: RewardWeights) -> RewardBreakdown:
    return CaptionScorer(anchors, embedder, weights).score_pair(gen, ref)


def score_group(gens: Sequence[str], ref: str, anchors: EmotionAnchorSet, embedder: Embedder,
                weights: RewardWeights) -> list[RewardBreakdown]:
    return CaptionScorer(anchors, embedder, weights).score_group(gens, ref)


def read_pairs(lines):
    """Parse ``{"gen": ..., "ref": ..., "id": ...}`` records, one per line."""
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            yield rec.get("id", str(lineno)), rec["gen"], rec["ref"]
        except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as exc:
            raise DataError(f"line {lineno}: bad score record ({exc})") from None
