"""Caption overlap metrics (ROUGE-1/2/L, a synonym-free METEOR variant),
cosine retrieval evaluation, and the batch-size-vs-loss mutual-information
lower bound.

All sequence metrics operate on token sequences of hashables (ids or
words) that the caller has already stripped of special tokens.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np


@dataclass
class RougeScore:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_pr(cls, p, r):
        f1 = 2.0 * p * r / (p + r) if p + r > 0 else 0.0
        return cls(precision=p, recall=r, f1=f1)


ZERO_ROUGE = RougeScore(0.0, 0.0, 0.0)


def _ngrams(seq, n):
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def rouge_n(candidate, reference, n):
    """Clipped n-gram overlap; empty n-gram sets score zero."""
    if n < 1:
        raise ValueError(f"n-gram order must be >= 1, got {n}")
    cand = _ngrams(candidate, n)
    ref = _ngrams(reference, n)
    total_c = sum(cand.values())
    total_r = sum(ref.values())
    if total_c == 0 or total_r == 0:
        return ZERO_ROUGE
    overlap = sum(min(count, ref[g]) for g, count in cand.items())
    return RougeScore.from_pr(overlap / total_c, overlap / total_r)


def _lcs_length(a, b):
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference):
    if not candidate or not reference:
        return ZERO_ROUGE
    lcs = _lcs_length(list(candidate), list(reference))
    return RougeScore.from_pr(lcs / len(candidate), lcs / len(reference))


def _min_chunk_alignment(cand, ref):
    """Maximal one-to-one exact-match alignment with the fewest chunks.

    Returns (matches, chunks).  Depth-first search over per-occurrence
    assignments with a chunk-count bound; candidate captions are short
    (tens of tokens), which keeps this exact search cheap.
    """
    cand_counts, ref_counts = Counter(cand), Counter(ref)
    quota = {w: min(c, ref_counts[w]) for w, c in cand_counts.items()
             if w in ref_counts}
    matches = sum(quota.values())
    if matches == 0:
        return 0, 0
    ref_positions = {}
    for j, w in enumerate(ref):
        if w in quota:
            ref_positions.setdefault(w, []).append(j)
    cand_positions = [i for i, w in enumerate(cand) if w in quota]
    later_same = []
    for k, i in enumerate(cand_positions):
        later_same.append(sum(1 for i2 in cand_positions[k + 1:]
                              if cand[i2] == cand[i]))
    best = [matches + 1]

    def dfs(k, remaining, used, prev_i, prev_j, chunks):
        if chunks >= best[0]:
            return
        if k == len(cand_positions):
            best[0] = chunks
            return
        i = cand_positions[k]
        w = cand[i]
        if remaining[w] > 0:
            for j in ref_positions[w]:
                if j in used:
                    continue
                extra = 0 if (prev_i == i - 1 and prev_j == j - 1) else 1
                remaining[w] -= 1
                used.add(j)
                dfs(k + 1, remaining, used, i, j, chunks + extra)
                used.remove(j)
                remaining[w] += 1
        if later_same[k] >= remaining[w]:
            dfs(k + 1, remaining, used, prev_i, prev_j, chunks)

    dfs(0, dict(quota), set(), -2, -2, 0)
    return matches, best[0]


def meteor_lite(candidate, reference):
    """Exact-unigram METEOR: recall-weighted harmonic mean times a
    fragmentation penalty of 0.5*(chunks/matches)^3."""
    cand, ref = list(candidate), list(reference)
    if not cand or not ref:
        return 0.0
    matches, chunks = _min_chunk_alignment(cand, ref)
    if matches == 0:
        return 0.0
    p = matches / len(cand)
    r = matches / len(ref)
    f_mean = 10.0 * p * r / (r + 9.0 * p)
    penalty = 0.5 * (chunks / matches) ** 3
    return f_mean * (1.0 - penalty)


# ---------------------------------------------------------------------------
# Retrieval
# ---------------------------------------------------------------------------


@dataclass
class RetrievalResult:
    precision: dict  # k -> p@k
    recall: dict  # k -> r@k
    ranked: list  # per query, item indices best-first

    def to_dict(self):
        return {
            "precision": {str(k): v for k, v in self.precision.items()},
            "recall": {str(k): v for k, v in self.recall.items()},
        }


def rank_by_cosine(query_vecs, item_vecs):
    """Item indices sorted by descending cosine per query; ties go to the
    lower item index."""
    q = np.asarray(query_vecs, dtype=np.float64)
    items = np.asarray(item_vecs, dtype=np.float64)

    def unit(m):
        norms = np.linalg.norm(m, axis=1, keepdims=True)
        return m / np.where(norms > 0, norms, 1.0)

    sims = unit(q) @ unit(items).T
    n = items.shape[0]
    idx = np.arange(n)
    return np.stack([idx[np.lexsort((idx, -row))] for row in sims])


def retrieval_eval(queries, items, relevance, embed, k_list):
    """Rank ``items`` for each query by cosine of the embedded vectors.

    ``relevance[qi]`` is the single relevant item index for query ``qi``.
    p@k averages hits-in-top-k/k over queries; r@k is the fraction of
    queries whose relevant item appears in the top k.
    """
    if len(queries) == 0 or len(items) == 0:
        raise ValueError("retrieval over empty queries or items")
    k_list = sorted(set(int(k) for k in k_list))
    if k_list[0] < 1 or k_list[-1] > len(items):
        raise ValueError(
            f"k values must lie in [1, {len(items)}], got {k_list}"
        )
    q_vecs = np.stack([np.asarray(embed(q), dtype=np.float64)
                       for q in queries])
    i_vecs = np.stack([np.asarray(embed(x), dtype=np.float64)
                       for x in items])
    ranked = rank_by_cosine(q_vecs, i_vecs)
    rel = np.asarray([relevance[qi] for qi in range(len(queries))])
    precision, recall = {}, {}
    for k in k_list:
        hits = (ranked[:, :k] == rel[:, None]).any(axis=1)
        precision[k] = float((ranked[:, :k] == rel[:, None]).sum(axis=1)
                             .mean() / k)
        recall[k] = float(hits.mean())
    return RetrievalResult(precision=precision, recall=recall,
                           ranked=[list(map(int, row)) for row in ranked])


# ---------------------------------------------------------------------------
# Mutual information lower bound and report plumbing
# ---------------------------------------------------------------------------


def mi_lower_bound(contrastive_loss_value, n):
    """ln(n) minus the contrastive loss, in nats; may be negative."""
    if n < 1:
        raise ValueError(f"batch size must be >= 1, got {n}")
    return math.log(n) - float(contrastive_loss_value)


def mean_row_entropy(matrix):
    """Mean Shannon entropy (nats) of the rows of a stochastic matrix."""
    p = np.asarray(matrix, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(p > 0, np.log(p), 0.0)
    return float(-(p * logs).sum(axis=1).mean())


@dataclass
class MetricsReport:
    rouge1: RougeScore
    rouge2: RougeScore
    rougeL: RougeScore
    meteor: float
    count: int
    config: dict = field(default_factory=dict)

    def to_dict(self):
        def unpack(s):
            return {"precision": s.precision, "recall": s.recall,
                    "f1": s.f1}

        return {
            "rouge1": unpack(self.rouge1),
            "rouge2": unpack(self.rouge2),
            "rougeL": unpack(self.rougeL),
            "meteor_lite": self.meteor,
            "count": self.count,
            "config": self.config,
        }


def caption_metrics(pairs, config=None):
    """Per-pair metric means over (candidate, reference) token sequences."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("caption_metrics over an empty pair list")

    def mean_rouge(fn):
        scored = [fn(c, r) for c, r in pairs]
        return RougeScore(
            precision=float(np.mean([s.precision for s in scored])),
            recall=float(np.mean([s.recall for s in scored])),
            f1=float(np.mean([s.f1 for s in scored])),
        )

    return MetricsReport(
        rouge1=mean_rouge(lambda c, r: rouge_n(c, r, 1)),
        rouge2=mean_rouge(lambda c, r: rouge_n(c, r, 2)),
        rougeL=mean_rouge(rouge_l),
        meteor=float(np.mean([meteor_lite(c, r) for c, r in pairs])),
        count=len(pairs),
        config=config or {},
    )
