"""Caption datasets and the synthetic emotion-caption corpus generator."""
from __future__ import annotations

import json
import re
from collections.abc import Sequence
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .emotion_space import EmotionLexicon, lexicons_to_json
from .rng import SplitMix64, derive_seed
from .textproc import tokenize

DATASET_FORMAT = "emocap-dataset/1"
SPLIT_FORMAT = "emocap-split/1"
SYNTH_FORMAT = "emocap-synth/1"

SLOT = re.compile(r"\{(\w+)\}")
SPEAKER_SLOT = "speaker"
EMOTION_SLOT = "emotion_word"


class SpecError(ValueError):
    pass


class DatasetError(ValueError):
    def __init__(self, path, line: int, message: str) -> None:
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


@dataclass(frozen=True)
class CaptionSample:
    id: str
    context_id: int
    emotion_label: str
    reference_caption: str

    def to_json(self) -> str:
        return json.dumps(
            {"id": self.id, "context_id": self.context_id, "emotion_label": self.emotion_label,
             "reference_caption": self.reference_caption},
            ensure_ascii=False, separators=(",", ":"),
        )


@dataclass
class Dataset:
    samples: list[CaptionSample]
    labels: tuple[str, ...]
    n_contexts: int

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def subset(self, ids: Sequence[str]) -> Dataset:
        by_id = {s.id: s for s in self.samples}
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise KeyError(f"ids not in dataset: {missing[:5]}")
        return Dataset([by_id[i] for i in ids], self.labels, self.n_contexts)

    def words(self) -> list[str]:
        """Sorted token inventory of all references."""
        seen: set[str] = set()
        for s in self.samples:
            seen.update(tokenize(s.reference_caption))
        return sorted(seen)


def dataset_text(ds: Dataset) -> str:
    header = json.dumps({"format": DATASET_FORMAT, "labels": list(ds.labels),
                         "n_contexts": ds.n_contexts}, ensure_ascii=False, separators=(",", ":"))
    return "\n".join([header, *(s.to_json() for s in ds.samples)]) + "\n"


def write_dataset(path: str | Path, ds: Dataset) -> None:
    Path(path).write_text(dataset_text(ds), encoding="utf-8")


def load_dataset(path: str | Path) -> Dataset:
    """Parse a dataset file; an empty file is an empty dataset."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not any(line.strip() for line in lines):
        return Dataset([], (), 0)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError:
        raise DatasetError(path, 1, "header is not JSON") from None
    if not isinstance(header, dict) or header.get("format") != DATASET_FORMAT:
        raise DatasetError(path, 1, f"expected format {DATASET_FORMAT!r}")
    labels = tuple(header.get("labels", ()))
    n_contexts = int(header.get("n_contexts", 0))
    samples: list[CaptionSample] = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(path, lineno, f"malformed record ({exc.msg})") from None
        for key in ("id", "context_id", "emotion_label", "reference_caption"):
            if key not in rec:
                raise DatasetError(path, lineno, f"record missing {key!r}")
        sample = CaptionSample(str(rec["id"]), rec["context_id"], rec["emotion_label"],
                               rec["reference_caption"])
        if not isinstance(sample.context_id, int) or not 0 <= sample.context_id < n_contexts:
            raise DatasetError(path, lineno, f"context_id {sample.context_id!r} outside [0, {n_contexts})")
        if not tokenize(sample.reference_caption):
            raise DatasetError(path, lineno, "reference_caption has no tokens")
        if sample.emotion_label not in labels:
            raise DatasetError(path, lineno, f"unknown emotion label {sample.emotion_label!r}")
        if sample.id in seen:
            raise DatasetError(path, lineno, f"duplicate id {sample.id!r}")
        seen.add(sample.id)
        samples.append(sample)
    return Dataset(samples, labels, n_contexts)


# --- synthetic corpus -------------------------------------------------------

@dataclass
class EmotionSpec:
    label: str
    lexicon: list[str]
    slots: dict[str, list[str]] = field(default_factory=dict)


@dataclass
class SynthSpec:
    emotions: list[EmotionSpec]
    speaker_attrs: list[str]
    templates: list[str]
    samples_per_combination: int = 1
    slots: dict[str, list[str]] = field(default_factory=dict)
    seed: int = 7

    def __post_init__(self) -> None:
        if len(self.emotions) < 2:
            raise SpecError("a synthetic spec needs at least 2 emotions")
        labels = [e.label for e in self.emotions]
        if len(set(labels)) != len(labels):
            raise SpecError("duplicate emotion labels")
        if not self.speaker_attrs or not self.templates:
            raise SpecError("speaker_attrs and templates must be non-empty")
        if self.samples_per_combination < 1:
            raise SpecError("samples_per_combination must be >= 1")
        for emo in self.emotions:
            EmotionLexicon(emo.label, tuple(emo.lexicon))
            for template in self.templates:
                for slot in SLOT.findall(template):
                    if not self._values(emo, slot):
                        raise SpecError(f"slot {{{slot}}} in template {template!r} "
                                        f"has no values for emotion {emo.label!r}")

    def _values(self, emo: EmotionSpec, slot: str) -> list[str]:
        if slot == SPEAKER_SLOT:
            return self.speaker_attrs
        if slot == EMOTION_SLOT:
            return emo.lexicon
        return emo.slots.get(slot) or self.slots.get(slot) or []

    @classmethod
    def from_dict(cls, doc: dict) -> SynthSpec:
        if doc.get("format", SYNTH_FORMAT) != SYNTH_FORMAT:
            raise SpecError(f"expected format {SYNTH_FORMAT!r}")
        try:
            emotions = [EmotionSpec(e["label"], list(e["lexicon"]), dict(e.get("slots", {})))
                        for e in doc["emotions"]]
            return cls(emotions, list(doc["speaker_attrs"]), list(doc["templates"]),
                       int(doc.get("samples_per_combination", 1)), dict(doc.get("slots", {})),
                       int(doc.get("seed", 7)))
        except (KeyError, TypeError) as exc:
            raise SpecError(f"malformed synth spec: {exc}") from None

    @classmethod
    def load(cls, path: str | Path) -> SynthSpec:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise SpecError(f"{path}: not valid JSON ({exc.msg})") from None
        return cls.from_dict(doc)

    @classmethod
    def default(cls) -> SynthSpec:
        text = resources.files("emocap").joinpath("data/default_synth.json").read_text(encoding="utf-8")
        return cls.from_dict(json.loads(text))

    def lexicons(self) -> list[EmotionLexicon]:
        return [EmotionLexicon(e.label, tuple(e.lexicon)) for e in self.emotions]

    def context_id(self, emotion_idx: int, attr_idx: int) -> int:
        return emotion_idx * len(self.speaker_attrs) + attr_idx


@dataclass
class Split:
    train: list[str]
    dev: list[str]
    test: list[str]
    seed: int

    def to_json(self) -> str:
        return json.dumps({"format": SPLIT_FORMAT, "seed": self.seed, "train": self.train,
                           "dev": self.dev, "test": self.test}, indent=1) + "\n"

    def ids(self, name: str) -> list[str]:
        if name not in ("train", "dev", "test"):
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)

    @classmethod
    def load(cls, path: str | Path) -> Split:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if doc.get("format") != SPLIT_FORMAT:
            raise ValueError(f"{path}: expected format {SPLIT_FORMAT!r}")
        return cls(doc["train"], doc["dev"], doc["test"], doc["seed"])


def held_out_size(n: int) -> int:
    """10% of ``n`` rounded half-up, in integer arithmetic."""
    return (n + 5) // 10


def make_split(ids: Sequence[str], seed: int) -> Split:
    order = list(ids)
    SplitMix64(derive_seed(seed, "split")).shuffle(order)
    k = held_out_size(len(order))
    return Split(order[2 * k:], order[:k], order[k:2 * k], seed)


def generate_synthetic(spec: SynthSpec) -> tuple[Dataset, list[EmotionLexicon], Split]:
    rng = SplitMix64(derive_seed(spec.seed, "synth"))
    samples = []
    for e_idx, emo in enumerate(spec.emotions):
        for a_idx, attr in enumerate(spec.speaker_attrs):
            ctx = spec.context_id(e_idx, a_idx)
            for t_idx, template in enumerate(spec.templates):
                for _ in range(spec.samples_per_combination):
                    def fill(m: re.Match) -> str:
                        slot = m.group(1)
                        if slot == SPEAKER_SLOT:
                            return attr
                        return rng.choice(spec._values(emo, slot))
                    caption = SLOT.sub(fill, template)
                    samples.append(CaptionSample(f"syn{len(samples):05d}", ctx, emo.label, caption))
    labels = tuple(e.label for e in spec.emotions)
    ds = Dataset(samples, labels, len(spec.emotions) * len(spec.speaker_attrs))
    return ds, spec.lexicons(), make_split([s.id for s in samples], spec.seed)


def write_synthetic(out_dir: str | Path, spec: SynthSpec) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds, lexicons, split = generate_synthetic(spec)
    paths = {"dataset": out / "dataset.jsonl", "lexicon": out / "lexicon.json",
             "split": out / "split.json"}
    write_dataset(paths["dataset"], ds)
    paths["lexicon"].write_text(lexicons_to_json(lexicons), encoding="utf-8")
    paths["split"].write_text(split.to_json(), encoding="utf-8")
    return paths
