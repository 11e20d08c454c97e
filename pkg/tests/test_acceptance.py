"""Acceptance criteria AC1 to AC8, one test each.

A PASS/FAIL line per criterion is printed in the "acceptance criteria"
section of the pytest terminal summary.
"""
import json
import math
import random
import time

import numpy as np
import pytest

from emocap.cli import main
from emocap.data import generate_synthetic, load_dataset, write_dataset
from emocap.embedding import Embedder, EmbedderConfig
from emocap.emotion_space import (EmotionAnchorSet, EmotionLexicon, build_anchor, build_anchor_set,
                                  cosine, emotion_reward, project)
from emocap.metrics import bleu, cider_d, meteor_lite, rouge_l, spice_lite, stopwords
from emocap.policy import (BOS, EOS, PolicyParams, checkpoint_bytes, grad_log_prob, load_checkpoint,
                           log_prob, save_checkpoint, step_log_probs, transitions)
from emocap.training import (Rollout, SftConfig, group_advantages, k3, kl_penalty, run_sft, sft_loss,
                             surrogate)

from oracles import (bleu_oracle, central_difference, cider_oracle, cosine_oracle, mean_oracle,
                     meteor_oracle, rouge_l_oracle, spice_oracle)

WORDS = ["the", "voice", "is", "loud", "calm", "pace", "quick", "and", "tone", "rises", "a", "slow"]


def test_ac1_metric_oracles(criterion):
    criterion("AC1 metric oracle suite")
    rng = random.Random(1)
    pairs = [([rng.choice(WORDS) for _ in range(rng.randint(0, 9))],
              [rng.choice(WORDS) for _ in range(rng.randint(1, 9))]) for _ in range(200)]
    stop = stopwords()
    start = time.perf_counter()
    worst = 0.0
    for h, r in pairs:
        for n in range(1, 5):
            worst = max(worst, abs(bleu(h, r, n) - bleu_oracle(h, r, n)),
                        abs(bleu(h, r, n, True) - bleu_oracle(h, r, n, True)))
        worst = max(worst, abs(rouge_l(h, r) - rouge_l_oracle(h, r)),
                    abs(meteor_lite(h, r) - meteor_oracle(h, r)),
                    abs(spice_lite(h, r) - spice_oracle(h, r, stop)))
    got, _ = cider_d([p[0] for p in pairs], [p[1] for p in pairs])
    want = cider_oracle([p[0] for p in pairs], [p[1] for p in pairs])
    worst = max(worst, max(abs(a - b) for a, b in zip(got, want)))
    elapsed = time.perf_counter() - start
    criterion("AC1 metric oracle suite", f"max |diff| {worst:.2e}, {elapsed:.2f}s")
    assert worst <= 1e-9
    assert elapsed < 10


def test_ac2_emotion_space(criterion):
    criterion("AC2 emotion-space suite")
    start = time.perf_counter()
    emb = Embedder(EmbedderConfig(dimension=64, seed=3))
    rng = np.random.default_rng(2)
    pyrng = random.Random(2)
    vocab = [f"w{i}" for i in range(400)]
    for size in (1, 2, 5, 17, 50, 100):
        words = tuple(pyrng.sample(vocab, size))
        anchor = build_anchor(EmotionLexicon("e", words), emb)
        assert np.max(np.abs(anchor - mean_oracle([emb.embed_text(w) for w in words]))) <= 1e-12
    lexicons = [EmotionLexicon(f"e{k}", tuple(pyrng.sample(vocab, 8))) for k in range(5)]
    anchors = build_anchor_set(lexicons, emb)
    texts = [" ".join(pyrng.sample(vocab, pyrng.randint(1, 12))) for _ in range(100)]
    for text in texts:
        t = emb.embed_text(text)
        c = project(t, anchors)
        assert np.all((c >= -1) & (c <= 1))
        assert np.max(np.abs(c - [cosine_oracle(t, a) for a in anchors.anchors])) <= 1e-12
        for lam in (1e-3, 1.0, 1e3):
            assert np.max(np.abs(project(lam * t, anchors) - c)) <= 1e-12
        assert abs(emotion_reward(text, text, anchors, emb) - 1.0) <= 1e-9
    for _ in range(50):
        perm = rng.permutation(anchors.n).tolist()
        permuted = anchors.permuted(perm)
        a, b = pyrng.sample(texts, 2)
        ta, tb = emb.embed_text(a), emb.embed_text(b)
        assert np.array_equal(project(ta, permuted), project(ta, anchors)[perm])
        r = cosine(project(ta, anchors), project(tb, anchors))
        assert abs(cosine(project(ta, permuted), project(tb, permuted)) - r) <= 1e-12
    elapsed = time.perf_counter() - start
    criterion("AC2 emotion-space suite", f"{elapsed:.2f}s")
    assert elapsed < 5


def test_ac3_gradient_checks(criterion):
    criterion("AC3 gradient checks")
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    vocab = (BOS, EOS, "a", "b")
    worst_lp = worst_sur = 0.0
    for _ in range(50):
        p = PolicyParams(vocab, rng.normal(size=(1, 4, 4)))
        seq = p.decode(rng.integers(2, 4, size=rng.integers(0, 5)).tolist())
        analytic = grad_log_prob(p, 0, seq)
        numeric = central_difference(lambda x: log_prob(PolicyParams(vocab, x), 0, seq), p.logits.copy())
        worst_lp = max(worst_lp, np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(analytic)), 1e-8))
    for _ in range(50):
        p = PolicyParams(vocab, rng.normal(size=(1, 4, 4)))
        ref = PolicyParams(vocab, rng.normal(size=(1, 4, 4)))
        groups = []
        for _ in range(2):
            group = []
            for adv in group_advantages(rng.normal(size=4)):
                ids = rng.integers(2, 4, size=rng.integers(1, 4)).tolist()
                steps = transitions(ids)
                lp = step_log_probs(p, 0, steps)
                while True:
                    old = lp + rng.normal(scale=0.3, size=lp.shape)
                    if np.all(np.abs(np.abs(np.exp(lp - old) - 1) - 0.2) > 1e-3):
                        break
                group.append(Rollout(0, steps, old, float(adv)))
            groups.append(group)
        _, analytic, _ = surrogate(p, ref, groups, 0.5, 0.2)
        numeric = central_difference(lambda x: surrogate(PolicyParams(vocab, x), ref, groups, 0.5, 0.2)[0],
                                     p.logits.copy())
        worst_sur = max(worst_sur, np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(analytic)), 1e-8))
    elapsed = time.perf_counter() - start
    criterion("AC3 gradient checks", f"log_prob rel {worst_lp:.1e}, surrogate rel {worst_sur:.1e}, {elapsed:.2f}s")
    assert worst_lp <= 1e-6
    assert worst_sur <= 1e-5
    assert elapsed < 30


def test_ac4_advantage_kl(criterion):
    criterion("AC4 advantage/KL analytics")
    adv = group_advantages([0.2, 0.4, 0.6, 0.8])
    assert np.max(np.abs(adv - [-1.34164, -0.44721, 0.44721, 1.34164])) <= 1e-5
    assert np.max(np.abs(adv - np.array([-3, -1, 1, 3]) / math.sqrt(5))) <= 1e-6
    assert np.all(group_advantages([0.3] * 4) == 0.0)
    rng = np.random.default_rng(4)
    vocab = (BOS, EOS, "a", "b", "c")
    p = PolicyParams(vocab, rng.normal(size=(2, 5, 5)))
    assert kl_penalty(p, p.copy(), 1, ["a", "c"]) == 0.0
    low = math.inf
    for _ in range(1000):
        cur = PolicyParams(vocab, rng.normal(scale=3, size=(1, 5, 5)))
        ref = PolicyParams(vocab, rng.normal(scale=3, size=(1, 5, 5)))
        seq = cur.decode(rng.integers(2, 5, size=rng.integers(0, 6)).tolist())
        low = min(low, kl_penalty(cur, ref, 0, seq))
    assert low >= 0.0
    assert np.all(k3(rng.normal(scale=5, size=1000), rng.normal(scale=5, size=1000)) >= 0.0)
    criterion("AC4 advantage/KL analytics", f"min k3 over 1000 draws {low:.2e}")


def test_ac5_sft_sanity(criterion):
    criterion("AC5 SFT sanity")
    words = [f"w{i}" for i in range(8)]
    p = PolicyParams.uniform(words, 1)
    for length in (0, 3, 6):
        loss, _ = sft_loss(p, [(0, words[:length])])
        assert abs(loss - (length + 1) * math.log(10)) <= 1e-9
    corpus = [(0, "the voice is calm".split()), (0, "the pace is slow".split()),
              (1, "the voice is loud".split()), (1, "the pace is quick".split()),
              (0, "calm and slow".split())]
    vocab = sorted({t for _, toks in corpus for t in toks})
    cfg = SftConfig(learning_rate=0.1, epochs=100, batch_size=5, grad_accum=1, seed=5)
    a, log = run_sft(cfg, corpus, PolicyParams.uniform(vocab, 2))
    losses = [r["loss"] for r in log.records]
    assert len(losses) == 100 and all(y < x for x, y in zip(losses, losses[1:]))
    b, _ = run_sft(SftConfig(learning_rate=0.5, epochs=3, seed=5), corpus, PolicyParams.uniform(vocab, 2))
    c, _ = run_sft(SftConfig(learning_rate=0.5, epochs=3, seed=5), corpus, PolicyParams.uniform(vocab, 2))
    assert checkpoint_bytes(b) == checkpoint_bytes(c)
    criterion("AC5 SFT sanity", f"loss {losses[0]:.4f} -> {losses[-1]:.4f}")


# --- end-to-end pipeline (AC6 to AC8) -------------------------------------------

def cli(*argv):
    code = main([str(a) for a in argv])
    assert code == 0, argv
    return code


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-synth -> build-anchors -> train-sft -> train-grpo (alpha 1 and 0) -> evaluate."""
    from conftest import DESK_CONFIG

    root = tmp_path_factory.mktemp("acceptance")
    cfg = ["--config", DESK_CONFIG]
    timings = {}
    t0 = time.perf_counter()
    cli("gen-synth", "--out-dir", root / "synth", *cfg)
    data = root / "synth"
    common = ["--dataset", data / "dataset.jsonl", "--split", data / "split.json"]
    cli("build-anchors", "--lexicon", data / "lexicon.json", "--out-dir", root / "anchors", *cfg)
    anchors = ["--anchors", root / "anchors" / "anchors.txt"]
    cli("train-sft", *common, "--out-dir", root / "sft", *cfg)
    timings["sft"] = time.perf_counter() - t0
    runs = {"sft": root / "sft"}
    for name, alpha in (("grpo", "1.0"), ("grpo_alpha0", "0.0")):
        t = time.perf_counter()
        extra = ["--alpha", alpha] + (["--reward-allow-zero", "true"] if alpha == "0.0" else [])
        cli("train-grpo", *common, "--policy", root / "sft" / "policy.ckpt", *anchors,
            "--out-dir", root / name, *cfg, *extra)
        timings[name] = time.perf_counter() - t
        runs[name] = root / name
    summaries = {}
    for name, run_dir in runs.items():
        t = time.perf_counter()
        out = root / f"eval_{name}"
        # every run is scored under the full reward (alpha = beta = 1)
        cli("evaluate", "--refs", data / "dataset.jsonl", "--split", data / "split.json",
            "--split-name", "test", "--policy", run_dir / "policy.ckpt", *anchors,
            "--out-dir", out, *cfg)
        summaries[name] = json.loads((out / "report.jsonl").read_text().splitlines()[-1])["summary"]
        timings[f"eval_{name}"] = time.perf_counter() - t
    return {"root": root, "summaries": summaries, "timings": timings, "runs": runs}


def test_ac6_grpo_improves(criterion, pipeline):
    criterion("AC6 end-to-end GRPO improvement")
    s, g = pipeline["summaries"]["sft"], pipeline["summaries"]["grpo"]
    t = pipeline["timings"]
    runtime = t["sft"] + t["grpo"] + t["eval_sft"] + t["eval_grpo"]
    gain = g["mean_r_total"] - s["mean_r_total"]
    criterion("AC6 end-to-end GRPO improvement",
              f"R_total {s['mean_r_total']:.4f} -> {g['mean_r_total']:.4f} (+{gain:.4f}), "
              f"vocab {s['vocab']} -> {g['vocab']}, {runtime:.0f}s")
    assert gain >= 0.05
    assert g["vocab"] >= 0.9 * s["vocab"]
    assert runtime < 300


def test_ac7_alpha_ablation(criterion, pipeline):
    criterion("AC7 alpha=0 ablation direction")
    full, ablated = pipeline["summaries"]["grpo"], pipeline["summaries"]["grpo_alpha0"]
    runtime = sum(pipeline["timings"].values())
    criterion("AC7 alpha=0 ablation direction",
              f"R_emo alpha=1 {full['mean_r_emo']:.4f} vs alpha=0 {ablated['mean_r_emo']:.4f}, {runtime:.0f}s")
    assert ablated["mean_r_emo"] < full["mean_r_emo"]
    assert runtime < 600


def test_ac8_determinism_round_trips(criterion, pipeline, tmp_path, default_spec):
    criterion("AC8 determinism and round-trips")
    root = pipeline["root"]
    for name in ("sft", "grpo"):
        path = root / name / "policy.ckpt"
        params = load_checkpoint(path)
        save_checkpoint(tmp_path / f"{name}.ckpt", params)
        assert (tmp_path / f"{name}.ckpt").read_bytes() == path.read_bytes()
    ds, _, _ = generate_synthetic(default_spec)
    write_dataset(tmp_path / "d.jsonl", ds)
    assert load_dataset(tmp_path / "d.jsonl") == ds
    assert load_dataset(root / "synth" / "dataset.jsonl") == ds
    replayed = 0
    for manifest in sorted(root.glob("*/manifest.json")):
        out = tmp_path / ("replay_" + manifest.parent.name)
        assert main(["replay", str(manifest), "--out-dir", str(out), "--check"]) == 0, manifest
        assert (out / "manifest.json").read_bytes() == manifest.read_bytes()
        replayed += 1
    assert replayed == 8
    criterion("AC8 determinism and round-trips", f"{replayed} manifests replayed byte-for-byte")
