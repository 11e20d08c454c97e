"""Command-line entry point: ``emocap <subcommand> ...``.

Every subcommand writes only inside ``--out-dir`` and leaves a
``manifest.json`` there with the fully resolved configuration, per-field
provenance (default, file, flag or derived) and input/output hashes.
``emocap replay`` re-executes a manifest.

Seeds: ``--seed`` is the run seed. Unless set explicitly, module seeds are
derived from it as ``derive_seed(seed, "<section>")`` for the sft, grpo and
eval sections. gen-synth uses the spec's seed unless ``--seed`` is given. The
embedder seed is part of the embedding function's identity and is never
derived.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .data import (DATASET_FORMAT, SPLIT_FORMAT, SYNTH_FORMAT, Dataset, DatasetError, SpecError,
                   Split, SynthSpec, load_dataset, write_synthetic)
from .embedding import TABLE_FORMAT, Embedder, EmbedderConfig, OOVError, TableFormatError
from .emotion_space import (ANCHORS_FORMAT, LEXICON_FORMAT, AnchorBuildError, FingerprintMismatch,
                            build_anchor_set, load_anchors, load_lexicons, save_anchors)
from .metrics import METRIC_CAVEATS, evaluate_corpus
from .policy import CHECKPOINT_FORMAT, CheckpointError, PolicyParams, load_checkpoint, save_checkpoint
from .reward import CaptionScorer, DataError, RewardWeights, read_pairs
from .rng import derive_seed
from .textproc import tokenize
from .training import (GrpoConfig, SftConfig, TrainingDiverged, as_examples, evaluate_policy,
                       mean_nll, run_grpo, run_sft)

log = logging.getLogger("emocap")

MANIFEST_FORMAT = "emocap-manifest/1"
EVAL_FORMAT = "emocap-eval/1"
SCORES_FORMAT = "emocap-scores/1"

FORMATS = {
    "dataset": DATASET_FORMAT,
    "split": SPLIT_FORMAT,
    "synth-spec": SYNTH_FORMAT,
    "lexicon": LEXICON_FORMAT,
    "anchors": ANCHORS_FORMAT,
    "embedding-table": TABLE_FORMAT,
    "policy-checkpoint": CHECKPOINT_FORMAT,
    "manifest": MANIFEST_FORMAT,
    "eval-report": EVAL_FORMAT,
    "scores": SCORES_FORMAT,
}


@dataclasses.dataclass(frozen=True)
class EvalConfig:
    samples_per_item: int = 4
    temperature: float = 1.0
    max_len: int = 32
    seed: int = 0


SECTIONS = {
    "embedder": EmbedderConfig,
    "reward": RewardWeights,
    "sft": SftConfig,
    "grpo": GrpoConfig,
    "eval": EvalConfig,
}
DERIVED_SEEDS = ("sft", "grpo", "eval")
# short spellings of common flags -> (section, field)
ALIASES = {
    "embedder_backend": ("embedder", "backend"),
    "embedding_table": ("embedder", "table_path"),
    "alpha": ("reward", "alpha"),
    "beta": ("reward", "beta"),
    "steps": ("grpo", "steps"),
}


class CliError(Exception):
    pass


# --- configuration ----------------------------------------------------------

@dataclasses.dataclass
class RunConfig:
    seed: int
    sections: dict[str, dict]
    provenance: dict[str, str]

    def build(self, name: str):
        return SECTIONS[name](**self.sections[name])

    def to_json(self) -> dict:
        return {"seed": self.seed, **self.sections}


def _flag(section: str, name: str) -> str:
    return f"{section}_{name}"


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Merge defaults, the ``--config`` file and flags (flag > file > default)."""
    file_doc: dict = {}
    if getattr(args, "config", None):
        try:
            file_doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from None
    provenance: dict[str, str] = {}
    if args.seed is not None:
        seed, provenance["seed"] = args.seed, "flag"
    elif "seed" in file_doc:
        seed, provenance["seed"] = int(file_doc["seed"]), "file"
    else:
        seed, provenance["seed"] = 0, "default"

    sections: dict[str, dict] = {}
    for section, cls in SECTIONS.items():
        values = {}
        file_section = file_doc.get(section, {})
        unknown = set(file_section) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise CliError(f"unknown {section} config keys: {sorted(unknown)}")
        for f in dataclasses.fields(cls):
            key = f"{section}.{f.name}"
            flag_val = getattr(args, _flag(section, f.name), None)
            if flag_val is not None:
                values[f.name], provenance[key] = flag_val, "flag"
            elif f.name in file_section:
                values[f.name], provenance[key] = file_section[f.name], "file"
            elif f.name == "seed" and section in DERIVED_SEEDS:
                values[f.name], provenance[key] = derive_seed(seed, section), "derived"
            else:
                default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
                values[f.name], provenance[key] = default, "default"
        sections[section] = values
    return RunConfig(seed, sections, provenance)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def make_embedder(cfg: RunConfig) -> Embedder:
    try:
        return Embedder.from_config(cfg.build("embedder"))
    except (OSError, TableFormatError) as exc:
        raise CliError(f"cannot load embedding table: {exc}") from None


def write_manifest(out_dir: Path, command: str, cfg: RunConfig, inputs: dict, outputs: list[str],
                   extra: dict | None = None) -> None:
    doc = {
        "format": MANIFEST_FORMAT,
        "version": __version__,
        "command": command,
        "config": cfg.to_json(),
        "provenance": cfg.provenance,
        "inputs": {k: {"path": str(v), "sha256": _sha256(Path(v))} for k, v in inputs.items()
                   if v is not None},
        "outputs": {name: _sha256(out_dir / name) for name in outputs},
    }
    if extra:
        doc.update(extra)
    (out_dir / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")


# --- subcommands ------------------------------------------------------------

def cmd_gen_synth(inputs: dict, cfg: RunConfig, out: Path) -> dict:
    spec_path = inputs.get("spec")
    try:
        spec = SynthSpec.load(spec_path) if spec_path else SynthSpec.default()
    except FileNotFoundError:
        raise CliError(f"spec file not found: {spec_path}") from None
    if cfg.provenance["seed"] != "default":
        spec.seed = cfg.seed
    paths = write_synthetic(out, spec)
    return {"outputs": sorted(p.name for p in paths.values()), "extra": {"synth_seed": spec.seed}}


def cmd_build_anchors(inputs: dict, cfg: RunConfig, out: Path) -> dict:
    try:
        lexicons = load_lexicons(inputs["lexicon"])
    except FileNotFoundError:
        raise CliError(f"lexicon file not found: {inputs['lexicon']}") from None
    except ValueError as exc:
        raise CliError(f"bad lexicon: {exc}") from None
    embedder = make_embedder(cfg)
    try:
        anchors = build_anchor_set(lexicons, embedder)
    except (AnchorBuildError, OOVError, ValueError) as exc:
        raise CliError(str(exc)) from None
    save_anchors(out / "anchors.txt", anchors)
    print(f"built {anchors.n} anchors, D={anchors.dimension}, fingerprint {anchors.fingerprint[:12]}")
    return {"outputs": ["anchors.txt"]}


def _scorer(inputs: dict, cfg: RunConfig) -> CaptionScorer:
    embedder = make_embedder(cfg)
    try:
        anchors = load_anchors(inputs["anchors"], embedder)
    except FingerprintMismatch as exc:
        raise CliError(f"anchor snapshot refused:\n{exc}") from None
    return CaptionScorer(anchors, embedder, cfg.build("reward"))


def cmd_score(inputs: dict, cfg: RunConfig, out: Path) -> dict:
    scorer = _scorer(inputs, cfg)
    lines = Path(inputs["pairs"]).read_text(encoding="utf-8").splitlines()
    records = []
    for sample_id, gen, ref in read_pairs(lines):
        rec = {"id": sample_id, **scorer.score_pair(gen, ref).as_dict()}
        records.append(json.dumps(rec, ensure_ascii=False, sort_keys=True))
    text = "".join(r + "\n" for r in records)
    (out / "scores.jsonl").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return {"outputs": ["scores.jsonl"]}


def _load_split_items(dataset: Dataset, split_path, split_name: str) -> Dataset:
    if not split_path:
        return dataset
    return dataset.subset(Split.load(split_path).ids(split_name))


def _read_hyps(path: str, refs: Dataset) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if lines and json.loads(lines[0]).get("format") == DATASET_FORMAT:
        hyp_ds = load_dataset(path)
        records = [{"id": s.id, "caption": s.reference_caption} for s in hyp_ds]
    else:
        records = []
        for lineno, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            caption = rec.get("caption", rec.get("gen", rec.get("reference_caption")))
            if caption is None:
                raise CliError(f"{path}:{lineno}: record has no caption field")
            records.append({"id": rec.get("id"), "caption": caption})
    by_id = {r["id"]: r["caption"] for r in records if r["id"] is not None}
    if all(s.id in by_id for s in refs):
        return [by_id[s.id] for s in refs]
    if len(records) != len(refs):
        raise CliError(f"{len(records)} hypotheses for {len(refs)} references")
    return [r["caption"] for r in records]


def cmd_evaluate(inputs: dict, cfg: RunConfig, out: Path) -> dict:
    refs = _load_split_items(load_dataset(inputs["refs"]), inputs.get("split"),
                             inputs.get("split_name") or "test")
    if not len(refs):
        raise CliError("no reference samples to evaluate")
    extra_summary = {}
    ev = cfg.build("eval")
    if inputs.get("policy"):
        params = load_checkpoint(inputs["policy"])
        if not inputs.get("anchors"):
            raise CliError("--policy evaluation needs --anchors")
        scorer = _scorer(inputs, cfg)
        items = [(s.context_id, s.reference_caption) for s in refs]
        res = evaluate_policy(params, items, scorer, ev.samples_per_item, ev.temperature,
                              ev.max_len, ev.seed)
        hyp_texts = res.pop("captions")
        ref_texts = [s.reference_caption for s in refs for _ in range(ev.samples_per_item)]
        ids = [f"{s.id}#{k}" for s in refs for k in range(ev.samples_per_item)]
        extra_summary = res
        extra_summary["nll_per_token"] = mean_nll(params, as_examples(refs))
    elif inputs.get("hyps"):
        hyp_texts = _read_hyps(inputs["hyps"], refs)
        ref_texts = [s.reference_caption for s in refs]
        ids = [s.id for s in refs]
    else:
        raise CliError("evaluate needs --hyps or --policy")
    hyps = [tokenize(h) for h in hyp_texts]
    ref_toks = [tokenize(r) for r in ref_texts]
    report, records = evaluate_corpus(hyps, ref_toks)
    lines = [json.dumps({"format": EVAL_FORMAT, "caveats": list(METRIC_CAVEATS)})]
    for sid, h, r, rec in zip(ids, hyp_texts, ref_texts, records):
        lines.append(json.dumps({"id": sid, "hyp": h, "ref": r, **rec}, ensure_ascii=False,
                                sort_keys=True))
    summary = {**report.as_dict(), **extra_summary}
    lines.append(json.dumps({"summary": summary}, sort_keys=True))
    (out / "report.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(format_table(summary))
    return {"outputs": ["report.jsonl"]}


def format_table(summary: dict) -> str:
    rows = ["# " + c for c in METRIC_CAVEATS]
    cols = ["bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "meteor_lite", "spider", "vocab"]
    rows.append("  ".join(f"{c:>11}" for c in cols))
    rows.append("  ".join(f"{summary[c]:>11}" if c == "vocab" else f"{100 * summary[c]:>11.1f}"
                          for c in cols))
    rows.append(f"cider_d={summary['cider_d']:.4f} spice_lite={summary['spice_lite']:.4f}")
    if "mean_r_total" in summary:
        rows.append(f"mean_r_total={summary['mean_r_total']:.4f} mean_r_emo={summary['mean_r_emo']:.4f} "
                    f"sampled_vocab={summary['vocab']}")
    return "\n".join(rows)


def cmd_train_sft(inputs: dict, cfg: RunConfig, out: Path) -> dict:
    dataset = load_dataset(inputs["dataset"])
    train = _load_split_items(dataset, inputs.get("split"), inputs.get("split_name") or "train")
    if not len(train):
        raise CliError("training set is empty")
    if inputs.get("init"):
        params = load_checkpoint(inputs["init"])
    else:
        params = PolicyParams.uniform(dataset.words(), dataset.n_contexts)
    try:
        params, trainlog = run_sft(cfg.build("sft"), as_examples(train), params)
    except TrainingDiverged as exc:
        if exc.last_good is not None:
            save_checkpoint(out / "last_good.ckpt", exc.last_good)
        raise CliError(str(exc)) from None
    save_checkpoint(out / "policy.ckpt", params)
    trainlog.write(out / "trainlog.jsonl")
    if trainlog.records:
        print(f"sft: {len(trainlog)} steps, final loss {trainlog.records[-1]['loss']:.4f}")
    return {"outputs": ["policy.ckpt", "trainlog.jsonl"],
            "extra": {"optimizer": "plain gradient descent (no momentum)"}}


def cmd_train_grpo(inputs: dict, cfg: RunConfig, out: Path) -> dict:
    dataset = load_dataset(inputs["dataset"])
    train = _load_split_items(dataset, inputs.get("split"), inputs.get("split_name") or "train")
    params = load_checkpoint(inputs["policy"])
    missing = set(dataset.words()) - set(params.vocab)
    if missing:
        raise CliError(f"policy vocabulary lacks dataset tokens: {sorted(missing)[:5]}")
    scorer = _scorer(inputs, cfg)
    items = [(s.context_id, s.reference_caption) for s in train]
    try:
        params, trainlog = run_grpo(cfg.build("grpo"), items, params, scorer)
    except TrainingDiverged as exc:
        if exc.last_good is not None:
            save_checkpoint(out / "last_good.ckpt", exc.last_good)
        raise CliError(str(exc)) from None
    save_checkpoint(out / "policy.ckpt", params)
    trainlog.write(out / "trainlog.jsonl")
    if trainlog.records:
        print(f"grpo: {len(trainlog)} steps, last mean R_total {trainlog.records[-1]['mean_r_total']:.4f}")
    return {"outputs": ["policy.ckpt", "trainlog.jsonl"],
            "extra": {"optimizer": "plain gradient ascent with linear warmup (no momentum)",
                      "kl_reference": "input policy checkpoint (frozen)",
                      "anchor_fingerprint": scorer.anchors.fingerprint}}


COMMANDS = {
    "gen-synth": (cmd_gen_synth, {"spec": False}),
    "build-anchors": (cmd_build_anchors, {"lexicon": True}),
    "score": (cmd_score, {"pairs": True, "anchors": True}),
    "evaluate": (cmd_evaluate, {"refs": True, "hyps": False, "policy": False, "anchors": False,
                                "split": False, "split_name": False}),
    "train-sft": (cmd_train_sft, {"dataset": True, "split": False, "split_name": False, "init": False}),
    "train-grpo": (cmd_train_grpo, {"dataset": True, "policy": True, "anchors": True,
                                    "split": False, "split_name": False}),
}


def execute(command: str, inputs: dict, cfg: RunConfig, out_dir: Path) -> None:
    func, _ = COMMANDS[command]
    out_dir.mkdir(parents=True, exist_ok=True)
    result = func(inputs, cfg, out_dir)
    file_inputs = {k: v for k, v in inputs.items() if k != "split_name"}
    extra = dict(result.get("extra", {}))
    if inputs.get("split_name"):
        extra["split_name"] = inputs["split_name"]
    if cfg.sections["embedder"].get("table_path"):
        file_inputs["embedding_table"] = cfg.sections["embedder"]["table_path"]
    write_manifest(out_dir, command, cfg, file_inputs, result["outputs"], extra)


def replay(manifest_path: str, out_dir: Path, check: bool) -> int:
    doc = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    if doc.get("format") != MANIFEST_FORMAT:
        raise CliError(f"{manifest_path} is not a manifest")
    config = dict(doc["config"])
    seed = config.pop("seed")
    cfg = RunConfig(seed, config, doc["provenance"])
    inputs = {k: v["path"] for k, v in doc["inputs"].items() if k != "embedding_table"}
    for name, meta in doc["inputs"].items():
        if _sha256(Path(meta["path"])) != meta["sha256"]:
            raise CliError(f"input {name} ({meta['path']}) changed since the manifest was written")
    if "split_name" in doc:
        inputs["split_name"] = doc["split_name"]
    execute(doc["command"], inputs, cfg, out_dir)
    if check:
        new = json.loads((out_dir / "manifest.json").read_text(encoding="utf-8"))
        bad = [k for k, v in doc["outputs"].items() if new["outputs"].get(k) != v]
        if bad:
            print(f"replay differs in: {', '.join(bad)}", file=sys.stderr)
            return 1
        print("replay reproduced all outputs byte-for-byte")
    return 0


# --- argument parsing -------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, help="run seed; module seeds derive from it")
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--out-dir", required=True, type=Path)
    alias_of = {v: k for k, v in ALIASES.items()}
    for section, cls in SECTIONS.items():
        group = p.add_argument_group(f"{section} config")
        for f in dataclasses.fields(cls):
            names = [f"--{section}-{f.name}".replace("_", "-")]
            if (section, f.name) in alias_of:
                names.insert(0, "--" + alias_of[section, f.name].replace("_", "-"))
            default = f.default
            kind = bool if isinstance(default, bool) else type(default) if default is not None else str
            if kind is bool:
                group.add_argument(*names, dest=_flag(section, f.name), type=_parse_bool, metavar="BOOL")
            else:
                group.add_argument(*names, dest=_flag(section, f.name), type=kind)


def _parse_bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes"):
        return True
    if text.lower() in ("0", "false", "no"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emocap", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="store_true", help="print file format versions")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")
    for name, (_, files) in COMMANDS.items():
        p = sub.add_parser(name)
        _add_common(p)
        for key, required in files.items():
            p.add_argument("--" + key.replace("_", "-"), dest="in_" + key, required=required)
    rp = sub.add_parser("replay", help="re-run a manifest")
    rp.add_argument("manifest")
    rp.add_argument("--out-dir", required=True, type=Path)
    rp.add_argument("--check", action="store_true", help="compare output hashes")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.version:
        print(f"emocap {__version__}")
        for name, fmt in FORMATS.items():
            print(f"{name}: {fmt}")
        return 0
    if not args.command:
        parser.print_help()
        return 2
    try:
        if args.command == "replay":
            return replay(args.manifest, args.out_dir, args.check)
        cfg = resolve_config(args)
        _, files = COMMANDS[args.command]
        inputs = {k: getattr(args, "in_" + k) for k in files if getattr(args, "in_" + k) is not None}
        for key, path in inputs.items():
            if key != "split_name" and not Path(path).exists():
                raise CliError(f"{key} file not found: {path}")
        execute(args.command, inputs, cfg, args.out_dir)
    except (CliError, SpecError, DatasetError, DataError, CheckpointError, TableFormatError,
            ValueError, KeyError) as exc:
        print(f"emocap {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
