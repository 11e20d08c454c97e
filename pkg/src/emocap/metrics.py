"""Reference-based caption metrics.

``meteor_lite`` and ``spice_lite`` are dependency-free variants: METEOR with
exact matches only (no stemming or synonyms) and SPICE with propositions made
of content words and adjacent content-word pairs instead of a parsed scene
graph. SPIDER is the mean of CIDEr-D and ``spice_lite``.
"""
from __future__ import annotations

import math
from collections import Counter
from collections.abc import Sequence
from dataclasses import asdict, dataclass
from functools import lru_cache
from importlib import resources

from .textproc import unique_vocab

Tokens = Sequence[str]

METRIC_CAVEATS = (
    "bleu1..bleu4: corpus-level, unsmoothed, single reference",
    "meteor_lite: exact-match METEOR variant (no stemming, no synonyms)",
    "spice_lite: content-word + adjacent-content-bigram F1, not scene-graph SPICE",
    "cider_d: CIDEr-D with IDF over the reference corpus, sigma=6, x10",
    "spider: (cider_d + spice_lite) / 2",
    "reward S_BLEU: smoothed sentence BLEU-4",
)


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# --- BLEU -------------------------------------------------------------------

def bleu(hyp: Tokens, ref: Tokens, max_n: int = 4, smoothed: bool = False) -> float:
    """Sentence BLEU with clipped precisions and brevity penalty.

    With ``smoothed`` set, any order with zero clipped matches uses
    ``(0 + 1) / (total + 1)`` instead of zero.
    """
    if not 1 <= max_n <= 4:
        raise ValueError("max_n must be in 1..4")
    c, r = len(hyp), len(ref)
    if c == 0:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        h, rf = ngrams(hyp, n), ngrams(ref, n)
        matched = sum(min(cnt, rf[g]) for g, cnt in h.items())
        total = max(c - n + 1, 0)
        if matched == 0:
            if not smoothed:
                return 0.0
            matched, total = 1, total + 1
        log_sum += math.log(matched / total)
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * math.exp(log_sum / max_n)


def corpus_bleu(hyps: Sequence[Tokens], refs: Sequence[Tokens], max_n: int = 4) -> float:
    """Unsmoothed corpus BLEU: clipped counts and lengths pooled over the corpus."""
    if len(hyps) != len(refs):
        raise ValueError("hyps and refs differ in length")
    matched = [0] * max_n
    totals = [0] * max_n
    c = r = 0
    for hyp, ref in zip(hyps, refs):
        c += len(hyp)
        r += len(ref)
        for n in range(1, max_n + 1):
            h, rf = ngrams(hyp, n), ngrams(ref, n)
            matched[n - 1] += sum(min(cnt, rf[g]) for g, cnt in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if c == 0 or min(matched) == 0:
        return 0.0
    log_sum = sum(math.log(m / t) for m, t in zip(matched, totals))
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * math.exp(log_sum / max_n)


# --- ROUGE-L ----------------------------------------------------------------

def lcs_length(a: Tokens, b: Tokens) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hyp: Tokens, ref: Tokens, beta: float = 1.2) -> float:
    lcs = lcs_length(hyp, ref)
    if lcs == 0:
        return 0.0
    p = lcs / len(hyp)
    r = lcs / len(ref)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


# --- METEOR (exact match) ---------------------------------------------------

def min_chunks(hyp: Tokens, ref: Tokens) -> tuple[int, int]:
    """Maximum exact-match count and the fewest chunks any such alignment has.

    A chunk is a run of matched hyp tokens aligned to consecutive ref
    positions in the same order. Memoised search over hyp positions; the
    state is (position, previous aligned ref index, used ref positions).
    """
    hc, rc = Counter(hyp), Counter(ref)
    need = {w: min(hc[w], rc[w]) for w in hc}
    matches = sum(need.values())
    if matches == 0:
        return 0, 0
    ref_pos = {w: tuple(j for j, x in enumerate(ref) if x == w) for w in need if need[w]}
    # occurrences of each word in hyp[i:]
    remaining = [Counter() for _ in range(len(hyp) + 1)]
    for i in range(len(hyp) - 1, -1, -1):
        remaining[i] = remaining[i + 1].copy()
        remaining[i][hyp[i]] += 1

    @lru_cache(maxsize=None)
    def search(i: int, prev: int, used: frozenset) -> float:
        if i == len(hyp):
            return 0
        w = hyp[i]
        left = need.get(w, 0) - sum(1 for j in ref_pos.get(w, ()) if j in used)
        best = math.inf
        if left > 0:
            for j in ref_pos[w]:
                if j in used:
                    continue
                cost = 0 if prev >= 0 and j == prev + 1 else 1
                best = min(best, cost + search(i + 1, j, used | {j}))
        # skipping is allowed only if later occurrences can still meet the quota
        if left < remaining[i][w]:
            best = min(best, search(i + 1, -1, used))
        return best

    chunks = int(search(0, -1, frozenset()))
    return matches, chunks


def meteor_lite(hyp: Tokens, ref: Tokens, alpha: float = 0.9, beta: float = 3.0,
                gamma: float = 0.5) -> float:
    matches, chunks = min_chunks(hyp, ref)
    if matches == 0:
        return 0.0
    p = matches / len(hyp)
    r = matches / len(ref)
    f_mean = p * r / (alpha * p + (1 - alpha) * r)
    penalty = gamma * (chunks / matches) ** beta
    return f_mean * (1 - penalty)


# --- CIDEr-D ----------------------------------------------------------------

def _tfidf(counts: list[Counter], df: dict, log_n: float) -> tuple[list[dict], list[float]]:
    vecs, norms = [], []
    for n_counts in counts:
        vec = {g: tf * (log_n - math.log(max(1.0, df.get(g, 0.0)))) for g, tf in n_counts.items()}
        vecs.append(vec)
        norms.append(math.sqrt(sum(v * v for v in vec.values())))
    return vecs, norms


def cider_d(hyps: Sequence[Tokens], refs: Sequence[Tokens], max_n: int = 4,
            sigma: float = 6.0) -> tuple[list[float], float]:
    """Per-sample CIDEr-D scores and their mean, one reference per sample."""
    if len(hyps) != len(refs):
        raise ValueError(f"size mismatch: {len(hyps)} hyps vs {len(refs)} refs")
    if not hyps:
        raise ValueError("empty corpus")
    ref_counts = [[ngrams(r, n) for n in range(1, max_n + 1)] for r in refs]
    df: Counter = Counter()
    for per_order in ref_counts:
        for c in per_order:
            df.update(c.keys())
    log_n = math.log(float(len(refs)))
    scores = []
    for hyp, ref, rc in zip(hyps, refs, ref_counts):
        hc = [ngrams(hyp, n) for n in range(1, max_n + 1)]
        vh, nh = _tfidf(hc, df, log_n)
        vr, nr = _tfidf(rc, df, log_n)
        delta = len(hyp) - len(ref)
        total = 0.0
        for n in range(max_n):
            val = sum(min(x, vr[n].get(g, 0.0)) * vr[n].get(g, 0.0) for g, x in vh[n].items())
            if nh[n] != 0 and nr[n] != 0:
                val /= nh[n] * nr[n]
            total += val * math.exp(-(delta ** 2) / (2 * sigma ** 2))
        scores.append(total / max_n * 10.0)
    return scores, sum(scores) / len(scores)


# --- SPICE (lite) -----------------------------------------------------------

@lru_cache(maxsize=1)
def stopwords() -> frozenset[str]:
    text = resources.files("emocap").joinpath("data/stoplist.txt").read_text(encoding="utf-8")
    return frozenset(
        line.strip() for line in text.splitlines() if line.strip() and not line.startswith("#")
    )


def propositions(tokens: Tokens, stop: frozenset[str] | None = None) -> set:
    stop = stopwords() if stop is None else stop
    content = [t for t in tokens if t not in stop]
    props: set = {(t,) for t in content}
    props.update(zip(content, content[1:]))
    return props


def spice_lite(hyp: Tokens, ref: Tokens) -> float:
    ph, pr = propositions(hyp), propositions(ref)
    if not ph or not pr:
        return 0.0
    common = len(ph & pr)
    if common == 0:
        return 0.0
    p = common / len(ph)
    r = common / len(pr)
    return 2 * p * r / (p + r)


# --- report -----------------------------------------------------------------

@dataclass
class MetricReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge_l: float
    meteor_lite: float
    cider_d: float
    spice_lite: float
    spider: float
    vocab: int

    def as_dict(self) -> dict:
        return asdict(self)


def sample_metrics(hyp: Tokens, ref: Tokens) -> dict:
    return {
        "bleu4": bleu(hyp, ref, 4),
        "bleu4_smoothed": bleu(hyp, ref, 4, smoothed=True),
        "rouge_l": rouge_l(hyp, ref),
        "meteor_lite": meteor_lite(hyp, ref),
        "spice_lite": spice_lite(hyp, ref),
    }


def evaluate_corpus(hyps: Sequence[Tokens], refs: Sequence[Tokens]) -> tuple[MetricReport, list[dict]]:
    """Corpus report plus one metric record per sample."""
    if len(hyps) != len(refs):
        raise ValueError(f"size mismatch: {len(hyps)} hyps vs {len(refs)} refs")
    records = [sample_metrics(h, r) for h, r in zip(hyps, refs)]
    cider_scores, cider_mean = cider_d(hyps, refs)
    for rec, cs in zip(records, cider_scores):
        rec["cider_d"] = cs
    n = len(records)
    spice_mean = sum(r["spice_lite"] for r in records) / n
    report = MetricReport(
        bleu1=corpus_bleu(hyps, refs, 1),
        bleu2=corpus_bleu(hyps, refs, 2),
        bleu3=corpus_bleu(hyps, refs, 3),
        bleu4=corpus_bleu(hyps, refs, 4),
        rouge_l=sum(r["rouge_l"] for r in records) / n,
        meteor_lite=sum(r["meteor_lite"] for r in records) / n,
        cider_d=cider_mean,
        spice_lite=spice_mean,
        spider=(cider_mean + spice_mean) / 2,
        vocab=unique_vocab(hyps),
    )
    return report, records
