"""Supervised warm start and group-relative policy optimisation.

SFT minimises the summed caption NLL with plain gradient descent. The RL
phase samples ``rollout`` captions per prompt, scores them with the
composite reward, normalises rewards within each group and ascends a clipped
surrogate with a k3 KL penalty towards a frozen reference policy.
"""
from __future__ import annotations

import json
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .policy import PolicyParams, VocabularyError, grad_steps, sample, step_log_probs, transitions
from .reward import CaptionScorer, DataError
from .rng import SplitMix64, derive_seed
from .textproc import tokenize, unique_vocab


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: PolicyParams | None = None) -> None:
        super().__init__(message)
        self.last_good = last_good


@dataclass(frozen=True)
class SftConfig:
    learning_rate: float = 1e-4
    epochs: int = 1
    batch_size: int = 1
    grad_accum: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.batch_size < 1 or self.grad_accum < 1 or self.epochs < 0:
            raise ValueError(f"invalid SFT config {self}")


@dataclass(frozen=True)
class GrpoConfig:
    rollout: int = 4
    kl_coeff: float = 0.5
    max_response_len: int = 32
    temperature: float = 1.0
    learning_rate: float = 1e-4
    batch_size: int = 1
    grad_accum: int = 4
    warmup_ratio: float = 0.05
    clip_eps: float = 0.2
    adv_epsilon: float = 1e-8
    max_grad_norm: float = 0.0
    steps: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.rollout < 2:
            raise ValueError("rollout group size must be >= 2")
        if self.kl_coeff < 0 or self.temperature <= 0 or self.learning_rate <= 0:
            raise ValueError(f"invalid GRPO config {self}")
        if self.batch_size < 1 or self.grad_accum < 1 or self.steps < 0 or self.max_response_len < 1:
            raise ValueError(f"invalid GRPO config {self}")
        if not 0 <= self.warmup_ratio <= 1 or self.max_grad_norm < 0:
            raise ValueError(f"invalid GRPO config {self}")


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    def append(self, record: dict) -> None:
        if self.records and record["step"] <= self.records[-1]["step"]:
            raise ValueError("step index must increase")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in self.records)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")


Example = tuple[int, list[str]]


def as_examples(samples) -> list[Example]:
    return [(s.context_id, tokenize(s.reference_caption)) for s in samples]


# --- SFT --------------------------------------------------------------------

def sft_loss(params: PolicyParams, batch: Sequence[Example]) -> tuple[float, np.ndarray]:
    """Summed negative log-likelihood of the batch and its gradient."""
    loss = 0.0
    grad = np.zeros_like(params.logits)
    for i, (context, tokens) in enumerate(batch):
        params.check_context(context)
        try:
            steps = transitions(params.encode(tokens))
        except VocabularyError as exc:
            raise DataError(f"sample {i}: {exc}") from None
        loss -= float(step_log_probs(params, context, steps).sum())
        grad_steps(params, context, steps, out=grad)
    return loss, -grad


def mean_nll(params: PolicyParams, examples: Sequence[Example]) -> float:
    """Per-token NLL (EOS steps counted); exp of it is the perplexity."""
    loss, _ = sft_loss(params, examples)
    return loss / sum(len(toks) + 1 for _, toks in examples)


def run_sft(config: SftConfig, examples: Sequence[Example],
            params: PolicyParams) -> tuple[PolicyParams, TrainLog]:
    """Gradient descent on the NLL; each update averages ``grad_accum`` micro-batches."""
    if not examples:
        raise ValueError("SFT needs a non-empty dataset")
    params = params.copy()
    log = TrainLog()
    step = 0
    for epoch in range(config.epochs):
        order = list(range(len(examples)))
        SplitMix64(derive_seed(config.seed, "sft", epoch)).shuffle(order)
        micro = [order[i:i + config.batch_size] for i in range(0, len(order), config.batch_size)]
        for start in range(0, len(micro), config.grad_accum):
            group = micro[start:start + config.grad_accum]
            acc = np.zeros_like(params.logits)
            total = 0.0
            for mb in group:
                loss, grad = sft_loss(params, [examples[i] for i in mb])
                total += loss
                acc += grad
            acc /= len(group)
            updated = params.logits - config.learning_rate * acc
            if not math.isfinite(total) or not np.all(np.isfinite(updated)):
                raise TrainingDiverged(f"non-finite SFT loss at step {step}", params)
            params.logits = updated
            log.append({"step": step, "epoch": epoch, "loss": total / len(group),
                        "grad_norm": float(np.linalg.norm(acc))})
            step += 1
    return params, log


# --- GRPO pieces ------------------------------------------------------------

def group_advantages(rewards: Sequence[float], epsilon: float = 1e-8) -> np.ndarray:
    """(r - mean) / (population std + epsilon)."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("need at least two rewards per group")
    centred = r - r.mean()
    # second pass removes the rounding residue of a large common offset
    centred -= centred.mean()
    return centred / (math.sqrt(float(np.mean(centred ** 2))) + epsilon)


def k3(log_ref: np.ndarray, log_cur: np.ndarray) -> np.ndarray:
    """Per-token rho - ln rho - 1 with rho = pi_ref / pi_cur."""
    log_rho = log_ref - log_cur
    return np.exp(log_rho) - log_rho - 1.0


def kl_penalty(params: PolicyParams, ref_params: PolicyParams, context: int,
               sequence: Sequence[str], terminated: bool = True) -> float:
    if params.vocab != ref_params.vocab:
        raise ValueError("policy and reference vocabularies differ")
    steps = transitions(params.encode(sequence), terminated)
    lp = step_log_probs(params, context, steps)
    lr = step_log_probs(ref_params, context, steps)
    return float(np.mean(k3(lr, lp)))


@dataclass
class Rollout:
    context: int
    steps: list[tuple[int, int]]
    old_log_probs: np.ndarray
    advantage: float
    tokens: list[str] = field(default_factory=list)


def surrogate(params: PolicyParams, ref_params: PolicyParams, groups: Sequence[Sequence[Rollout]],
              kl_coeff: float, clip_eps: float) -> tuple[float, np.ndarray, float]:
    """Clipped, KL-penalised GRPO objective over frozen rollouts, and its gradient.

    Token terms are averaged per caption, then over the group, then over the
    prompts. Returns (objective, gradient, mean per-caption KL).
    """
    grad = np.zeros_like(params.logits)
    objective = 0.0
    kl_total = 0.0
    n_roll = 0
    for group in groups:
        for ro in group:
            lp = step_log_probs(params, ro.context, ro.steps)
            lp_ref = step_log_probs(ref_params, ro.context, ro.steps)
            ratio = np.exp(lp - ro.old_log_probs)
            unclipped = ratio * ro.advantage
            clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * ro.advantage
            kl = k3(lp_ref, lp)
            w = 1.0 / (len(ro.steps) * len(group) * len(groups))
            objective += w * float(np.sum(np.minimum(unclipped, clipped) - kl_coeff * kl))
            # d(min)/d lp is ratio*A where the unclipped branch is active, else 0;
            # d(-k3)/d lp = rho_ref - 1
            pg = np.where(unclipped <= clipped, unclipped, 0.0)
            coef = w * (pg + kl_coeff * (np.exp(lp_ref - lp) - 1.0))
            grad_steps(params, ro.context, ro.steps, coef, out=grad)
            kl_total += float(np.mean(kl))
            n_roll += 1
    return objective, grad, kl_total / max(n_roll, 1)


def warmup_lr(config: GrpoConfig, step: int) -> float:
    warm = math.ceil(config.warmup_ratio * config.steps)
    if warm <= 0 or step >= warm:
        return config.learning_rate
    return config.learning_rate * (step + 1) / warm


def grpo_step(params: PolicyParams, ref_params: PolicyParams, batch: Sequence[tuple[int, str]],
              config: GrpoConfig, scorer: CaptionScorer, step: int = 0,
              lr: float | None = None) -> tuple[PolicyParams, dict]:
    """One optimiser step: roll out, score, normalise, ascend the surrogate.

    ``batch`` holds (context, reference caption) pairs and covers all
    gradient-accumulation micro-batches of the step.
    """
    lr = config.learning_rate if lr is None else lr
    groups: list[list[Rollout]] = []
    rewards_all, emo_all, bleu_all, spice_all, adv_all = [], [], [], [], []
    degenerate = 0
    example = None
    for item, (context, ref) in enumerate(batch):
        samples = [
            sample(params, context, config.temperature, config.max_response_len,
                   derive_seed(config.seed, "rollout", step, item, member))
            for member in range(config.rollout)
        ]
        scores = [scorer.score_tokens(s.tokens, ref) for s in samples]
        rewards = [b.r_total for b in scores]
        adv = group_advantages(rewards, config.adv_epsilon)
        groups.append([Rollout(context, s.steps, s.log_probs, float(a), s.tokens)
                       for s, a in zip(samples, adv)])
        rewards_all += rewards
        emo_all += [b.r_emo for b in scores]
        bleu_all += [b.s_bleu for b in scores]
        spice_all += [b.s_spice for b in scores]
        adv_all += adv.tolist()
        degenerate += sum(b.degenerate for b in scores)
        if example is None:
            best = int(np.argmax(rewards))
            example = {"ref": ref, "best": " ".join(samples[best].tokens), "reward": rewards[best]}

    objective, grad, mean_kl = surrogate(params, ref_params, groups, config.kl_coeff, config.clip_eps)
    grad_norm = float(np.linalg.norm(grad))
    if not math.isfinite(grad_norm):
        raise TrainingDiverged(f"non-finite GRPO gradient at step {step}", params)
    if config.max_grad_norm > 0 and grad_norm > config.max_grad_norm:
        grad = grad * (config.max_grad_norm / grad_norm)
    logits = params.logits + lr * grad
    if not np.all(np.isfinite(logits)):
        raise TrainingDiverged(f"non-finite logits after GRPO step {step}", params)
    new = PolicyParams(params.vocab, logits)
    adv_arr = np.array(adv_all)
    record = {
        "step": step,
        "lr": lr,
        "objective": objective,
        "mean_r_total": float(np.mean(rewards_all)),
        "max_r_total": float(np.max(rewards_all)),
        "mean_r_emo": float(np.mean(emo_all)),
        "mean_s_bleu": float(np.mean(bleu_all)),
        "mean_s_spice": float(np.mean(spice_all)),
        "mean_kl": mean_kl,
        "adv_mean": float(adv_arr.mean()),
        "adv_std": float(adv_arr.std()),
        "adv_min": float(adv_arr.min()),
        "adv_max": float(adv_arr.max()),
        "grad_norm": grad_norm,
        "degenerate": degenerate,
        "rollout_streams": f"rollout/{step}/<item>/<member>",
        "example": example,
    }
    return new, record


def run_grpo(config: GrpoConfig, train: Sequence[tuple[int, str]], sft_params: PolicyParams,
             scorer: CaptionScorer) -> tuple[PolicyParams, TrainLog]:
    """Iterate :func:`grpo_step`; the KL reference stays frozen at ``sft_params``."""
    if not train and config.steps:
        raise ValueError("GRPO needs a non-empty dataset")
    for _, ref in train:
        if not tokenize(ref):
            raise DataError(f"reference {ref!r} has no tokens")
    ref_params = sft_params.copy()
    params = sft_params.copy()
    log = TrainLog()
    per_step = config.batch_size * config.grad_accum
    for step in range(config.steps):
        pick = SplitMix64(derive_seed(config.seed, "prompts", step))
        batch = [train[pick.randbelow(len(train))] for _ in range(per_step)]
        params, record = grpo_step(params, ref_params, batch, config, scorer, step,
                                   warmup_lr(config, step))
        log.append(record)
    return params, log


# --- evaluation -------------------------------------------------------------

def evaluate_policy(params: PolicyParams, items: Sequence[tuple[int, str]], scorer: CaptionScorer,
                    samples_per_item: int = 4, temperature: float = 1.0, max_len: int = 32,
                    seed: int = 0) -> dict:
    """Mean reward components and vocabulary of captions sampled on ``items``."""
    captions: list[list[str]] = []
    totals, emos, bleus, spices = [], [], [], []
    for i, (context, ref) in enumerate(items):
        for k in range(samples_per_item):
            s = sample(params, context, temperature, max_len, derive_seed(seed, "eval", i, k))
            b = scorer.score_tokens(s.tokens, ref)
            captions.append(s.tokens)
            totals.append(b.r_total)
            emos.append(b.r_emo)
            bleus.append(b.s_bleu)
            spices.append(b.s_spice)
    return {
        "mean_r_total": float(np.mean(totals)),
        "mean_r_emo": float(np.mean(emos)),
        "mean_s_bleu": float(np.mean(bleus)),
        "mean_s_spice": float(np.mean(spices)),
        "vocab": unique_vocab(captions),
        "n": len(captions),
        "captions": [" ".join(c) for c in captions],
    }


def config_dict(config) -> dict:
    return asdict(config)
