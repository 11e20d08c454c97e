import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from emocap.data import generate_synthetic
from emocap.embedding import Embedder, EmbedderConfig
from emocap.emotion_space import build_anchor_set
from emocap.policy import BOS, EOS, EOS_ID, PolicyParams, sample, step_log_probs, transitions
from emocap.reward import CaptionScorer, DataError
from emocap.training import (GrpoConfig, Rollout, SftConfig, TrainingDiverged, TrainLog,
                             as_examples, grad_steps, group_advantages, grpo_step, k3, kl_penalty,
                             mean_nll, run_grpo, run_sft, sft_loss, surrogate, warmup_lr)

from oracles import central_difference


@pytest.fixture(scope="module")
def synth(default_spec):
    ds, lexicons, split = generate_synthetic(default_spec)
    emb = Embedder(EmbedderConfig(dimension=64, seed=0))
    scorer = CaptionScorer(build_anchor_set(lexicons, emb), emb)
    items = [(s.context_id, s.reference_caption) for s in ds.subset(split.train)]
    p0 = PolicyParams.uniform(ds.words(), ds.n_contexts)
    p0.logits += np.random.default_rng(0).normal(size=p0.logits.shape)
    return ds, split, scorer, items, p0


# --- SFT ------------------------------------------------------------------------

def test_uniform_loss_value():
    p = PolicyParams.uniform([f"w{i}" for i in range(8)], 1)
    loss, grad = sft_loss(p, [(0, ["w1", "w2", "w3"])])
    assert abs(loss - 4 * math.log(10)) <= 1e-9
    assert abs(loss - 9.2103) < 1e-4
    assert abs(grad.sum()) <= 1e-12


def test_loss_and_gradient_are_linear_in_batch():
    p = PolicyParams.uniform(["a", "b", "c"], 2)
    p.logits += np.random.default_rng(1).normal(size=p.logits.shape)
    batch = [(0, ["a", "b"]), (1, ["c"]), (1, [])]
    l1, g1 = sft_loss(p, batch)
    l2, g2 = sft_loss(p, batch + batch)
    # equal up to float reassociation of the sums
    assert abs(l2 - 2 * l1) <= 1e-12
    assert np.max(np.abs(g2 - 2 * g1)) <= 1e-12


def test_oov_reference_names_sample():
    p = PolicyParams.uniform(["a"], 1)
    with pytest.raises(DataError, match="sample 1.*'zz'"):
        sft_loss(p, [(0, ["a"]), (0, ["zz"])])


def test_full_batch_descent_is_monotone():
    corpus = [(0, "the voice is calm".split()), (0, "the pace is slow".split()),
              (1, "the voice is loud".split()), (1, "the pace is quick".split()),
              (0, "calm and slow".split())]
    words = sorted({t for _, toks in corpus for t in toks})
    p = PolicyParams.uniform(words, 2)
    cfg = SftConfig(learning_rate=0.1, epochs=100, batch_size=5, grad_accum=1)
    _, log = run_sft(cfg, corpus, p)
    losses = [r["loss"] for r in log.records]
    assert len(losses) == 100
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_epochs_zero_is_noop():
    p = PolicyParams.uniform(["a", "b"], 1)
    p.logits += 0.3
    out, log = run_sft(SftConfig(epochs=0), [(0, ["a"])], p)
    assert out.logits.tobytes() == p.logits.tobytes() and len(log) == 0


def test_sft_deterministic_and_improves_perplexity(synth):
    ds, split, _, _, _ = synth
    train = as_examples(ds.subset(split.train))[:60]
    test = as_examples(ds.subset(split.test))
    p = PolicyParams.uniform(ds.words(), ds.n_contexts)
    cfg = SftConfig(learning_rate=1.0, epochs=2, seed=3)
    a, log_a = run_sft(cfg, train, p)
    b, log_b = run_sft(cfg, train, p)
    assert a.logits.tobytes() == b.logits.tobytes()
    assert log_a.to_jsonl() == log_b.to_jsonl()
    assert abs(mean_nll(p, test) - math.log(p.V)) <= 1e-9
    assert mean_nll(a, test) < math.log(p.V)


def test_sft_rejects_empty_and_bad_config():
    with pytest.raises(ValueError):
        run_sft(SftConfig(), [], PolicyParams.uniform(["a"], 1))
    with pytest.raises(ValueError):
        SftConfig(learning_rate=0)


@pytest.mark.filterwarnings("ignore:overflow")
def test_divergence_guard_keeps_last_good():
    p = PolicyParams.uniform(["a", "b"], 1)
    p.logits[0, 0, 2:] = [1.5e308, -1.5e308]  # log P(b | BOS) overflows to -inf
    with pytest.raises(TrainingDiverged) as err:
        run_sft(SftConfig(learning_rate=1.0), [(0, ["a"]), (0, ["b"])], p)
    assert err.value.last_good.logits.tobytes() == p.logits.tobytes()


def test_trainlog_monotone():
    log = TrainLog()
    log.append({"step": 0})
    with pytest.raises(ValueError):
        log.append({"step": 0})


# --- advantages and KL ----------------------------------------------------------

def test_advantage_values():
    adv = group_advantages([0.2, 0.4, 0.6, 0.8])
    np.testing.assert_allclose(adv, [-1.34164, -0.44721, 0.44721, 1.34164], atol=1e-5)
    assert np.all(group_advantages([0.7] * 4) == 0.0)
    with pytest.raises(ValueError):
        group_advantages([1.0])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=2, max_size=8))
def test_advantage_properties(rewards):
    adv = group_advantages(rewards)
    assert abs(adv.mean()) <= 1e-12
    std = float(np.std(rewards))
    if std >= 1e-4:
        assert abs(np.std(adv) - std / (std + 1e-8)) <= 1e-9
    if std >= 1e-2:
        assert abs(np.std(adv) - 1.0) <= 1e-6


def test_kl_examples():
    p = PolicyParams.uniform(["a"], 1)
    ref = p.copy()
    assert kl_penalty(p, ref, 0, ["a", "a"]) == 0.0
    ref.logits[0, 0] = [0.0, math.log(4), 0.0]
    assert abs(kl_penalty(p, ref, 0, []) - (1 - math.log(2))) <= 1e-12
    assert abs(kl_penalty(p, ref, 0, []) - 0.30685) < 1e-5
    with pytest.raises(ValueError):
        kl_penalty(p, PolicyParams.uniform(["b"], 1), 0, [])


def test_k3_nonnegative_over_random_draws():
    rng = np.random.default_rng(11)
    values = []
    for _ in range(1000):
        p = PolicyParams((BOS, EOS, "a", "b"), rng.normal(scale=3, size=(1, 4, 4)))
        ref = PolicyParams(p.vocab, rng.normal(scale=3, size=(1, 4, 4)))
        seq = p.decode(rng.integers(2, 4, size=rng.integers(0, 5)).tolist())
        values.append(kl_penalty(p, ref, 0, seq))
    assert min(values) >= 0.0
    assert np.all(k3(np.array([-3.0, 0.0, 2.0]), np.array([1.0, 0.0, -1.0])) >= 0)


# --- surrogate gradient -----------------------------------------------------------

def random_rollouts(rng, p, n_groups=2, g=3, clip_eps=0.2):
    groups = []
    for _ in range(n_groups):
        group = []
        for adv in rng.normal(size=g):
            ids = rng.integers(2, p.V, size=rng.integers(0, 4)).tolist()
            steps = transitions(ids, terminated=bool(rng.integers(0, 2)) or not ids)
            lp = step_log_probs(p, 0, steps)
            while True:
                old = lp + rng.normal(scale=0.3, size=lp.shape)
                ratio = np.exp(lp - old)
                # keep clear of the clip kinks so central differences are valid
                if np.all(np.abs(np.abs(ratio - 1) - clip_eps) > 1e-3):
                    break
            group.append(Rollout(0, steps, old, float(adv)))
        groups.append(group)
    return groups


def test_surrogate_gradient_matches_finite_differences():
    rng = np.random.default_rng(21)
    worst = 0.0
    for _ in range(50):
        vocab = (BOS, EOS, "a", "b")
        p = PolicyParams(vocab, rng.normal(size=(1, 4, 4)))
        ref = PolicyParams(vocab, rng.normal(size=(1, 4, 4)))
        groups = random_rollouts(rng, p)
        kl = float(rng.uniform(0, 1))
        _, analytic, _ = surrogate(p, ref, groups, kl, 0.2)

        def f(x):
            return surrogate(PolicyParams(vocab, x), ref, groups, kl, 0.2)[0]

        numeric = central_difference(f, p.logits.copy())
        worst = max(worst, np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(analytic)), 1e-8))
    assert worst <= 1e-5


def test_zero_advantages_give_zero_policy_gradient():
    rng = np.random.default_rng(2)
    p = PolicyParams((BOS, EOS, "a", "b"), rng.normal(size=(1, 4, 4)))
    groups = random_rollouts(rng, p)
    for g in groups:
        for ro in g:
            ro.advantage = 0.0
    _, grad, _ = surrogate(p, p.copy(), groups, 0.0, 0.2)
    assert not np.any(grad)


def test_equal_rewards_step_does_not_move(synth):
    _, _, scorer, items, p0 = synth
    p = p0.copy()
    p.logits[:, :, EOS_ID] = 50.0  # every rollout is the empty caption, rewards all equal
    new, rec = grpo_step(p, p.copy(), items[:4], GrpoConfig(learning_rate=1.0, seed=1), scorer)
    assert rec["adv_min"] == rec["adv_max"] == 0.0
    assert rec["grad_norm"] == 0.0
    assert new.logits.tobytes() == p.logits.tobytes()


# --- GRPO runs -----------------------------------------------------------------------

def test_steps_zero_returns_input(synth):
    _, _, scorer, items, p0 = synth
    out, log = run_grpo(GrpoConfig(steps=0), items, p0, scorer)
    assert out.logits.tobytes() == p0.logits.tobytes() and len(log) == 0


def test_grpo_deterministic(synth):
    _, _, scorer, items, p0 = synth
    cfg = GrpoConfig(steps=5, learning_rate=1.0, seed=9, max_response_len=10)
    a, la = run_grpo(cfg, items, p0, scorer)
    b, lb = run_grpo(cfg, items, p0, scorer)
    assert a.logits.tobytes() == b.logits.tobytes()
    assert la.to_jsonl() == lb.to_jsonl()
    assert [r["step"] for r in la.records] == list(range(5))


def test_kl_domination_at_default_lr(synth):
    _, _, scorer, items, p0 = synth
    cfg = GrpoConfig(steps=10, kl_coeff=1e6, seed=1, max_response_len=8)
    out, _ = run_grpo(cfg, items, p0, scorer)
    assert np.linalg.norm(out.logits - p0.logits) < 1e-3


def test_kl_pulls_towards_reference(synth):
    _, _, scorer, items, p0 = synth
    dist = []
    for kl in (0.0, 2.0, 5.0):
        cfg = GrpoConfig(steps=40, kl_coeff=kl, learning_rate=2.0, seed=1, max_response_len=8)
        out, _ = run_grpo(cfg, items, p0, scorer)
        dist.append(np.linalg.norm(out.logits - p0.logits))
    assert dist[0] > dist[1] > dist[2]


def test_max_grad_norm_bounds_step(synth):
    _, _, scorer, items, p0 = synth
    cfg = GrpoConfig(learning_rate=1.0, max_grad_norm=1e-3, seed=4, max_response_len=8)
    new, rec = grpo_step(p0, p0.copy(), items[:4], cfg, scorer)
    assert rec["grad_norm"] > 1e-3
    assert np.linalg.norm(new.logits - p0.logits) <= 1e-3 * (1 + 1e-12)


def test_warmup_schedule():
    cfg = GrpoConfig(steps=200, learning_rate=1.0, warmup_ratio=0.05)
    assert [warmup_lr(cfg, s) for s in (0, 4, 9, 10, 150)] == [0.1, 0.5, 1.0, 1.0, 1.0]
    assert warmup_lr(GrpoConfig(steps=10, warmup_ratio=0.0, learning_rate=2.0), 0) == 2.0


def test_grpo_config_invariants():
    with pytest.raises(ValueError):
        GrpoConfig(rollout=1)
    with pytest.raises(ValueError):
        GrpoConfig(kl_coeff=-1)
    with pytest.raises(ValueError):
        GrpoConfig(temperature=0)


def test_degenerate_reference_rejected(synth):
    _, _, scorer, _, p0 = synth
    with pytest.raises(DataError):
        run_grpo(GrpoConfig(steps=1), [(0, "!!")], p0, scorer)
