"""Inference: marginalized beam search, tag-constrained and diverse decoding.

Every expansion is scored by the exact word marginal (the tag sum), so the
search never commits to a tag; the tag recorded alongside each chosen word
is the posterior argmax given that word. Constrained decoding instead pins
the tag sequence and reads exactly one word row per step, which is how both
the gold-tag upper bound and the edit-distance diversity protocol work.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .corpus import BOS_ID, EOS_ID, PAD_ID
from .metrics import levenshtein
from .model import LatentStepOutput, marginal_word_logprobs, tag_posterior

DEFAULT_BANNED = (PAD_ID, BOS_ID)  # never generated; EOS stays available


@dataclass
class Hypothesis:
    tokens: list[int]               # BOS-prefixed
    tags: list[int]                 # one per generated token
    score: float                    # cumulative log-probability
    finished: bool = False
    step_logprobs: list[float] = field(default_factory=list)


@dataclass
class DecodeOutput:
    tokens: list[int]               # generated tokens (no BOS); EOS-final unless cut off
    tags: list[int]                 # aligned with tokens
    score: float
    step_logprobs: list[float]
    rows_used: list[int] | None = None  # tag rows read, constrained mode only

    def content_tokens(self) -> list[int]:
        return self.tokens[:-1] if self.tokens and self.tokens[-1] == EOS_ID \
            else list(self.tokens)

    def content_tags(self) -> list[int]:
        n = len(self.content_tokens())
        return self.tags[:n]


def _masked_marginal(step: LatentStepOutput, banned) -> np.ndarray:
    marg = marginal_word_logprobs(step)
    if banned:
        marg = marg.copy()
        marg[list(banned)] = -np.inf
    return marg


def _argmax_tag(step: LatentStepOutput, word: int) -> int:
    return int(np.argmax(tag_posterior(step, word)))  # first max = lowest id


def _step_all(model, memory, hyps: list[Hypothesis]) -> list[LatentStepOutput]:
    prefixes = [h.tokens for h in hyps]
    if hasattr(model, "decode_step_batch"):
        return model.decode_step_batch(memory, prefixes)
    return [model.decode_step(memory, p) for p in prefixes]


def greedy_decode(model, src_ids, max_len: int,
                  banned=DEFAULT_BANNED) -> DecodeOutput:
    """Argmax of the word marginal at every step; stops at EOS."""
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    memory = model.encode(src_ids)
    hyp = Hypothesis([BOS_ID], [], 0.0)
    for _ in range(max_len):
        step = _step_all(model, memory, [hyp])[0]
        marg = _masked_marginal(step, banned)
        y = int(np.argmax(marg))
        hyp.tokens.append(y)
        hyp.tags.append(_argmax_tag(step, y))
        hyp.score += float(marg[y])
        hyp.step_logprobs.append(float(marg[y]))
        if y == EOS_ID:
            break
    return DecodeOutput(hyp.tokens[1:], hyp.tags, hyp.score, hyp.step_logprobs)


def _rank_key(h: Hypothesis):
    # ties broken toward lexicographically smallest token sequence
    return (-h.score, h.tokens)


def beam_search(model, src_ids, beam_size: int, max_len: int,
                length_penalty: float = 1.0,
                banned=DEFAULT_BANNED) -> list[DecodeOutput]:
    """Top-B decode under the exact word marginal.

    Pruning during search uses raw cumulative scores; the length penalty
    (score / length**penalty) applies only to the final ranking. Finished
    hypotheses are never extended but keep competing, and every finished
    hypothesis that ever made the beam is retained for the final ranking.
    """
    if beam_size < 1:
        raise ValueError(f"beam size must be >= 1, got {beam_size}")
    memory = model.encode(src_ids)
    active = [Hypothesis([BOS_ID], [], 0.0)]
    finished_pool: list[Hypothesis] = []
    for _ in range(max_len):
        open_hyps = [h for h in active if not h.finished]
        if not open_hyps:
            break
        steps = _step_all(model, memory, open_hyps)
        candidates = [h for h in active if h.finished]
        for h, step in zip(open_hyps, steps):
            marg = _masked_marginal(step, banned)
            order = np.argsort(-marg, kind="stable")[:beam_size]
            for y in order:
                y = int(y)
                if not np.isfinite(marg[y]):
                    continue
                candidates.append(Hypothesis(
                    tokens=h.tokens + [y],
                    tags=h.tags + [_argmax_tag(step, y)],
                    score=h.score + float(marg[y]),
                    finished=(y == EOS_ID),
                    step_logprobs=h.step_logprobs + [float(marg[y])],
                ))
        candidates.sort(key=_rank_key)
        active = candidates[:beam_size]
        for h in active:
            if h.finished and h not in finished_pool:
                finished_pool.append(h)

    final = finished_pool + [h for h in active if not h.finished]
    seen = set()
    unique = []
    for h in final:
        key = tuple(h.tokens)
        if key not in seen:
            seen.add(key)
            unique.append(h)
    unique.sort(key=lambda h: (-h.score / max(len(h.tokens) - 1, 1) ** length_penalty,
                               h.tokens))
    return [DecodeOutput(h.tokens[1:], h.tags, h.score, h.step_logprobs)
            for h in unique[:beam_size]]


def constrained_decode(model, src_ids, tag_seq, beam_size: int = 1,
                       banned=DEFAULT_BANNED) -> DecodeOutput:
    """Decode a translation that follows the given tag template.

    Step n reads word log-probabilities from row tag_seq[n] only; EOS is
    withheld from the candidates so the output carries exactly one content
    token per template slot, then EOS is forced (unscored). The tag prior
    log P(z = tag_seq[n] | prefix) is added to the reported score but does
    not enter the word choice, which ranks by the row alone.
    """
    tag_seq = [int(t) for t in tag_seq]
    if not tag_seq:
        raise ValueError("constrained_decode: empty tag sequence")
    memory = model.encode(src_ids)
    word_banned = tuple(set(banned) | {EOS_ID})
    beams = [Hypothesis([BOS_ID], [], 0.0)]
    priors = {tuple(beams[0].tokens): 0.0}
    for tag in tag_seq:
        steps = _step_all(model, memory, beams)
        candidates = []
        cand_priors = {}
        for h, step in zip(beams, steps):
            if not 0 <= tag < len(step.tag_logprobs):
                raise ValueError(
                    f"tag id {tag} outside the {len(step.tag_logprobs)}-tag "
                    "vocabulary")
            row = step.word_logprobs_by_tag[tag].copy()
            row[list(word_banned)] = -np.inf
            prior = priors[tuple(h.tokens)] + float(step.tag_logprobs[tag])
            order = np.argsort(-row, kind="stable")[:beam_size]
            for y in order:
                y = int(y)
                if not np.isfinite(row[y]):
                    continue
                nh = Hypothesis(
                    tokens=h.tokens + [y],
                    tags=h.tags + [tag],
                    score=h.score + float(row[y]),
                    step_logprobs=h.step_logprobs + [float(row[y])],
                )
                candidates.append(nh)
                cand_priors[tuple(nh.tokens)] = prior
        candidates.sort(key=_rank_key)
        beams = candidates[:beam_size]
        priors = {tuple(h.tokens): cand_priors[tuple(h.tokens)] for h in beams}

    best = beams[0]
    # one more step to name the tag that best explains the forced EOS
    final_step = _step_all(model, memory, [best])[0]
    eos_tag = _argmax_tag(final_step, EOS_ID)
    return DecodeOutput(
        tokens=best.tokens[1:] + [EOS_ID],
        tags=best.tags + [eos_tag],
        score=best.score + priors[tuple(best.tokens)],
        step_logprobs=best.step_logprobs,
        rows_used=list(tag_seq),
    )


def top1_tags(model, src_ids, max_len: int) -> list[int]:
    """Most-likely tag template: the content-position tags of the greedy decode."""
    return greedy_decode(model, src_ids, max_len).content_tags()


def sample_tags_at_distance(base, d: int, count: int, rng: np.random.Generator,
                            n_tags: int, max_len: int = 0,
                            max_tries_per_seq: int = 200):
    """Distinct tag sequences at Levenshtein distance exactly d from base.

    Applies d random substitute/insert/delete edits, then keeps only
    candidates whose verified distance equals d (edits can cancel).
    Returns (sequences, exhausted) where exhausted means the retry budget
    ran out before ``count`` distinct sequences were found.
    """
    base = [int(t) for t in base]
    if d < 0:
        raise ValueError("distance must be >= 0")
    if d == 0:
        return [list(base)], False
    if n_tags < 2:
        raise ValueError("need at least 2 tags to move away from the base")
    found: list[list[int]] = []
    seen = {tuple(base)}
    for _ in range(max_tries_per_seq * count):
        if len(found) >= count:
            break
        seq = list(base)
        for _ in range(d):
            op = int(rng.integers(3))
            if op == 0 and seq:  # substitute
                i = int(rng.integers(len(seq)))
                seq[i] = int(rng.integers(n_tags))
            elif op == 1:        # insert
                i = int(rng.integers(len(seq) + 1))
                seq.insert(i, int(rng.integers(n_tags)))
            elif seq:            # delete
                del seq[int(rng.integers(len(seq)))]
        if not seq or (max_len and len(seq) > max_len):
            continue
        key = tuple(seq)
        if key in seen:
            continue
        if levenshtein(seq, base) == d:
            seen.add(key)
            found.append(seq)
    return found, len(found) < count


def diverse_translate(model, src_ids, d: int, w: int, rng: np.random.Generator,
                      max_len: int, beam_size: int = 1) -> list[DecodeOutput]:
    """W translations from tag templates at edit distance d off the top-1 tags.

    When fewer than W distinct templates exist (always the case at d = 0)
    the available ones are reused round-robin so exactly W outputs come
    back and sweeps over d stay comparable.
    """
    if w < 1:
        raise ValueError(f"w must be >= 1, got {w}")
    base = top1_tags(model, src_ids, max_len)
    n_tags = model.config.tag_vocab_size
    seqs, _ = sample_tags_at_distance(base, d, w, rng, n_tags,
                                      max_len=max_len - 1)
    if not seqs:
        seqs = [base]
    templates = [seqs[i % len(seqs)] for i in range(w)]
    return [constrained_decode(model, src_ids, t, beam_size=beam_size)
            for t in templates]


# ---------------------------------------------------------------------------
# timing
# ---------------------------------------------------------------------------

def time_decode(model, sources, beam_size: int, max_len: int,
                repeats: int = 3) -> float:
    """Median seconds per sentence for beam decoding the given sources."""
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for src in sources:
            beam_search(model, src, beam_size, max_len)
        times.append((time.perf_counter() - t0) / len(sources))
    return float(np.median(times))


def bench_decode(model_builder, vz_list, sources, beam_size: int,
                 max_len: int, repeats: int = 3):
    """Wall time per sentence across tag-vocabulary sizes.

    ``model_builder(vz)`` must return models identical except for the tag
    vocabulary. Returns [(vz, seconds_per_sentence), ...] in input order.
    """
    rows = []
    for vz in vz_list:
        model = model_builder(vz)
        rows.append((vz, time_decode(model, sources, beam_size, max_len,
                                     repeats)))
    return rows


def bench_beam(model, beam_list, sources, max_len: int, repeats: int = 3):
    return [(b, time_decode(model, sources, b, max_len, repeats))
            for b in beam_list]
