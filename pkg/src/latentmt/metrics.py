"""Evaluation primitives: corpus BLEU, distinct-1, edit distance, tag accuracy."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass


@dataclass
class EvalReport:
    bleu: float
    distinct1: float
    tag_accuracy: float | None
    n_sentences: int
    n_tokens: int

    def lines(self) -> list[str]:
        out = [
            f"sentences\t{self.n_sentences}",
            f"tokens\t{self.n_tokens}",
            f"bleu\t{self.bleu:.4f}",
            f"distinct1\t{self.distinct1:.6f}",
        ]
        if self.tag_accuracy is not None:
            out.append(f"tag_accuracy\t{self.tag_accuracy:.6f}")
        return out


def _ngram_counts(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates, references, max_order: int = 4, smooth: bool = False) -> float:
    """Corpus-level BLEU (percentage), single reference per candidate.

    Geometric mean of pooled clipped n-gram precisions for n = 1..max_order,
    times the brevity penalty exp(min(0, 1 - ref_len/cand_len)). Without
    smoothing any zero precision makes the score 0; with ``smooth`` each
    order's counts get add-one smoothing above unigrams.
    """
    if len(candidates) == 0:
        raise ValueError("bleu: empty candidate list")
    if len(candidates) != len(references):
        raise ValueError(
            f"bleu: {len(candidates)} candidates vs {len(references)} references")

    matched = [0] * max_order
    total = [0] * max_order
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(candidates, references):
        cand = list(cand)
        ref = list(ref)
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            c_counts = _ngram_counts(cand, n)
            r_counts = _ngram_counts(ref, n)
            total[n - 1] += max(len(cand) - n + 1, 0)
            matched[n - 1] += sum(min(c, r_counts[g]) for g, c in c_counts.items())

    if cand_len == 0:
        return 0.0
    log_prec = 0.0
    orders = 0
    for n in range(max_order):
        m, t = matched[n], total[n]
        if t == 0:
            continue  # no n-grams of this order exist; skip, don't zero
        if smooth and n > 0:
            m, t = m + 1, t + 1
        if m == 0:
            return 0.0
        log_prec += math.log(m / t)
        orders += 1
    bp = math.exp(min(0.0, 1.0 - ref_len / cand_len))
    return 100.0 * bp * math.exp(log_prec / orders)


def distinct1(sentences) -> float:
    """Distinct unigram types across all sentences over total token count."""
    if len(sentences) == 0:
        raise ValueError("distinct1: no sentences")
    types = set()
    total = 0
    for s in sentences:
        s = list(s)
        types.update(s)
        total += len(s)
    if total == 0:
        raise ValueError("distinct1: zero total tokens")
    return len(types) / total


def levenshtein(a, b) -> int:
    """Unit-cost insert/delete/substitute edit distance between sequences."""
    a, b = list(a), list(b)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[len(b)]


def tag_accuracy(predicted, gold) -> float:
    """Exact-match fraction over aligned positions."""
    predicted, gold = list(predicted), list(gold)
    if len(predicted) != len(gold):
        raise ValueError(
            f"tag_accuracy: length mismatch {len(predicted)} vs {len(gold)}")
    if not gold:
        return 0.0
    hits = sum(p == g for p, g in zip(predicted, gold))
    return hits / len(gold)
