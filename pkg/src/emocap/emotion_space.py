"""Emotion anchors, the emotion coordinate projection and the emotion reward.

An anchor is the centroid of the embedded words of one emotion lexicon. A
text's emotion coordinates are its cosines with every anchor, and the emotion
reward of a generated caption is the cosine between its coordinates and those
of the reference.
"""
from __future__ import annotations

import json
import math
import operator
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embedding import Embedder, TableFormatError, is_null, parse_float_row

LEXICON_FORMAT = "emocap-lexicon/1"
ANCHORS_FORMAT = "emocap-anchors/1"

DEGENERATE_NORM = 1e-12


class AnchorBuildError(ValueError):
    pass


class UndefinedProjection(ValueError):
    """A text embedded to the zero vector, so its cosines are undefined."""


class RewardUndefined(ValueError):
    pass


class FingerprintMismatch(ValueError):
    def __init__(self, expected: str, actual: str, diff: dict) -> None:
        lines = [f"anchor snapshot fingerprint {expected[:12]} != embedder {actual[:12]}"]
        for key, (want, got) in sorted(diff.items()):
            lines.append(f"  {key}: snapshot={want!r} embedder={got!r}")
        super().__init__("\n".join(lines))
        self.diff = diff


@dataclass(frozen=True)
class EmotionLexicon:
    name: str
    words: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("emotion name must be non-empty")
        if not self.words:
            raise ValueError(f"lexicon {self.name!r} has no words")
        seen = set()
        for w in self.words:
            if w in seen:
                raise ValueError(f"lexicon {self.name!r} repeats word {w!r}")
            seen.add(w)


def load_lexicons(path: str | Path) -> list[EmotionLexicon]:
    """Read a lexicon file: ``{"format": ..., "emotions": {name: [words]}}``."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != LEXICON_FORMAT:
        raise ValueError(f"{path}: expected format {LEXICON_FORMAT!r}, got {doc.get('format')!r}")
    emotions = doc.get("emotions")
    if not isinstance(emotions, dict):
        raise ValueError(f"{path}: 'emotions' must map names to word lists")
    return [EmotionLexicon(name, tuple(words)) for name, words in emotions.items()]


def lexicons_to_json(lexicons: Sequence[EmotionLexicon]) -> str:
    doc = {"format": LEXICON_FORMAT, "emotions": {lx.name: list(lx.words) for lx in lexicons}}
    return json.dumps(doc, ensure_ascii=False, indent=2) + "\n"


def build_anchor(lexicon: EmotionLexicon, embedder: Embedder) -> np.ndarray:
    """Centroid of the lexicon's word embeddings, summed in lexicon order."""
    total = np.zeros(embedder.dimension)
    for word in lexicon.words:
        v = embedder.embed_text(word)
        if is_null(v):
            raise AnchorBuildError(f"word {word!r} in lexicon {lexicon.name!r} embeds to zero")
        total = total + v
    anchor = total / len(lexicon.words)
    if np.linalg.norm(anchor) < DEGENERATE_NORM:
        raise AnchorBuildError(f"anchor for {lexicon.name!r} is degenerate (near-zero norm)")
    return anchor


@dataclass(frozen=True, eq=False)
class EmotionAnchorSet:
    labels: tuple[str, ...]
    anchors: np.ndarray
    fingerprint: str
    embedder_info: Mapping | None = None

    def __post_init__(self) -> None:
        n = len(self.labels)
        if n < 2:
            raise ValueError("need at least two emotion anchors")
        if len(set(self.labels)) != n:
            raise ValueError("emotion labels must be unique")
        if self.anchors.ndim != 2 or self.anchors.shape[0] != n:
            raise ValueError("anchors must have shape (n, D)")
        norms = np.linalg.norm(self.anchors, axis=1)
        if np.any(norms < DEGENERATE_NORM):
            raise ValueError("anchors must have nonzero norm")
        self.anchors.setflags(write=False)
        object.__setattr__(self, "_unit", self.anchors / norms[:, None])

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def dimension(self) -> int:
        return self.anchors.shape[1]

    def permuted(self, order: Sequence[int]) -> EmotionAnchorSet:
        return EmotionAnchorSet(
            tuple(self.labels[i] for i in order),
            self.anchors[list(order)].copy(),
            self.fingerprint,
            self.embedder_info,
        )

    def check_embedder(self, embedder: Embedder) -> None:
        actual = embedder.fingerprint()
        if actual == self.fingerprint:
            return
        theirs = dict(self.embedder_info or {})
        ours = embedder.describe()
        diff = {k: (theirs.get(k), ours.get(k)) for k in set(theirs) | set(ours)
                if theirs.get(k) != ours.get(k)}
        raise FingerprintMismatch(self.fingerprint, actual, diff)


def build_anchor_set(lexicons: Sequence[EmotionLexicon], embedder: Embedder) -> EmotionAnchorSet:
    anchors = np.stack([build_anchor(lx, embedder) for lx in lexicons])
    return EmotionAnchorSet(
        tuple(lx.name for lx in lexicons), anchors, embedder.fingerprint(), embedder.describe()
    )


def project(t: np.ndarray, anchors: EmotionAnchorSet) -> np.ndarray:
    """Cosine of ``t`` with every anchor, in anchor order."""
    norm = math.sqrt(float(np.dot(t, t)))
    if norm == 0.0:
        raise UndefinedProjection("cannot project the zero vector")
    # fsum per row: correctly rounded, so a coordinate never depends on anchor order or BLAS
    tl = t.tolist()
    coords = np.array([math.fsum(map(operator.mul, row, tl)) for row in anchors._unit.tolist()]) / norm
    return np.clip(coords, -1.0, 1.0)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu = math.sqrt(float(np.dot(u, u)))
    nv = math.sqrt(float(np.dot(v, v)))
    if nu == 0.0 or nv == 0.0:
        raise RewardUndefined("cosine with a zero vector")
    return min(1.0, max(-1.0, float(np.dot(u, v)) / (nu * nv)))


def text_coordinates(text: str, anchors: EmotionAnchorSet, embedder: Embedder) -> np.ndarray:
    return project(embedder.embed_text(text), anchors)


def emotion_reward(gen: str, ref: str, anchors: EmotionAnchorSet, embedder: Embedder) -> float:
    """Cosine between the emotion coordinates of ``gen`` and ``ref``.

    Raises :class:`RewardUndefined` when either text has no usable embedding.
    """
    try:
        c_gen = text_coordinates(gen, anchors, embedder)
        c_ref = text_coordinates(ref, anchors, embedder)
    except UndefinedProjection as exc:
        raise RewardUndefined(str(exc)) from None
    return cosine(c_gen, c_ref)


# --- anchor snapshots -------------------------------------------------------

def save_anchors(path: str | Path, anchors: EmotionAnchorSet) -> None:
    lines = [
        f"#format={ANCHORS_FORMAT}",
        "#embedder=" + json.dumps(dict(anchors.embedder_info or {}), sort_keys=True, separators=(",", ":")),
        f"n={anchors.n} D={anchors.dimension} fingerprint={anchors.fingerprint}",
    ]
    for label, vec in zip(anchors.labels, anchors.anchors):
        lines.append(label + "\t" + " ".join(repr(float(x)) for x in vec))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_anchors(path: str | Path, embedder: Embedder | None = None) -> EmotionAnchorSet:
    """Read a snapshot; with ``embedder`` given, refuse it on fingerprint mismatch."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    info: dict | None = None
    header = None
    labels: list[str] = []
    rows: list[np.ndarray] = []
    for lineno, line in enumerate(lines, start=1):
        if line.startswith("#embedder="):
            info = json.loads(line[len("#embedder="):])
            continue
        if not line.strip() or line.startswith("#"):
            continue
        if header is None:
            try:
                fields = dict(part.split("=", 1) for part in line.split())
                header = (int(fields["n"]), int(fields["D"]), fields["fingerprint"])
            except (KeyError, ValueError):
                raise TableFormatError(path, lineno, f"malformed header {line!r}") from None
            continue
        label, sep, values = line.partition("\t")
        if not sep or not label:
            raise TableFormatError(path, lineno, "expected '<label>\\t<values>'")
        labels.append(label)
        rows.append(parse_float_row(path, lineno, values.split(), header[1]))
    if header is None:
        raise TableFormatError(path, 1, "missing header")
    n, _, fingerprint = header
    if len(rows) != n:
        raise TableFormatError(path, len(lines), f"header declares n={n}, found {len(rows)} rows")
    anchor_set = EmotionAnchorSet(tuple(labels), np.stack(rows), fingerprint, info)
    if embedder is not None:
        anchor_set.check_embedder(embedder)
    return anchor_set
