"""Synthetic parallel corpus with deterministic gold tags.

A grammar assigns every word to a class, maps each source word to a unique
target word, and rewrites class patterns with a per-pattern permutation.
Because the lexicons are disjoint the pattern is recoverable from any source
sentence, so the translation task is exactly solvable and the gold tag of a
target position is the class of the word placed there.

Also houses: vocabulary building with reserved ids, byte-pair encoding with
word-boundary markers and tag propagation onto subwords, tag-set merging,
token-budget batching, and the three-column corpus file format
(source tokens, target tokens, target tag names; tab-separated columns,
space-separated tokens).
"""

from __future__ import annotations

import configparser
import hashlib
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED = ["<pad>", "<bos>", "<eos>", "<unk>"]
PAD_TAG_ID = 0  # fill value for tag slots without supervision


class GrammarError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass
class ParallelExample:
    src: list[str]
    tgt: list[str]
    tags: list[int]  # one per target token


@dataclass
class Pattern:
    src_classes: list[str]
    target_order: list[int]  # target slot j is filled from source slot target_order[j]
    weight: float = 1.0


@dataclass
class SynthGrammar:
    classes: list[str]
    lexicons: dict[str, list[str]]
    word_map: dict[str, str]
    patterns: list[Pattern]

    def class_id(self, name: str) -> int:
        return self.classes.index(name)

    def validate(self) -> None:
        """Raise GrammarError listing every violation found."""
        problems = []
        if not self.classes:
            problems.append("no classes defined")
        if len(set(self.classes)) != len(self.classes):
            problems.append("duplicate class names")
        seen_words: dict[str, str] = {}
        for cls in self.classes:
            words = self.lexicons.get(cls, [])
            if not words:
                problems.append(f"class {cls} has an empty lexicon")
            for w in words:
                if w in seen_words:
                    problems.append(
                        f"word {w!r} appears in both {seen_words[w]} and {cls}")
                seen_words[w] = cls
        for w in seen_words:
            if w not in self.word_map:
                problems.append(f"word {w!r} missing from the translation map")
        targets = [self.word_map[w] for w in seen_words if w in self.word_map]
        if len(set(targets)) != len(targets):
            problems.append("translation map is not injective")
        if not self.patterns:
            problems.append("no patterns defined")
        for i, p in enumerate(self.patterns):
            for cls in p.src_classes:
                if cls not in self.classes:
                    problems.append(f"pattern {i} uses unknown class {cls}")
            if sorted(p.target_order) != list(range(len(p.src_classes))):
                problems.append(
                    f"pattern {i} reordering {p.target_order} is not a "
                    f"permutation of {len(p.src_classes)} slots")
            if p.weight <= 0:
                problems.append(f"pattern {i} has non-positive weight")
        if problems:
            raise GrammarError("invalid grammar: " + "; ".join(problems))

    # ------------------------------------------------------------------
    # sectioned key-value grammar files
    # ------------------------------------------------------------------

    def to_file(self, path) -> None:
        cp = configparser.ConfigParser()
        cp.optionxform = str  # keep word/class case
        cp["classes"] = {"names": " ".join(self.classes)}
        cp["lexicon"] = {c: " ".join(self.lexicons[c]) for c in self.classes}
        cp["map"] = dict(self.word_map)
        cp["patterns"] = {
            f"p{i}": "{} -> {} @ {}".format(
                " ".join(p.src_classes),
                " ".join(str(j) for j in p.target_order),
                p.weight)
            for i, p in enumerate(self.patterns)
        }
        with open(path, "w", encoding="utf-8") as fh:
            cp.write(fh)

    @classmethod
    def from_file(cls, path) -> "SynthGrammar":
        cp = configparser.ConfigParser()
        cp.optionxform = str
        read = cp.read(path, encoding="utf-8")
        if not read:
            raise DataError(f"grammar file not found: {path}")
        try:
            classes = cp["classes"]["names"].split()
            lexicons = {c: cp["lexicon"][c].split() for c in classes}
            word_map = dict(cp["map"])
            patterns = []
            for key in sorted(cp["patterns"]):
                spec_str = cp["patterns"][key]
                lhs, rhs = spec_str.split("->")
                order_part, _, weight_part = rhs.partition("@")
                patterns.append(Pattern(
                    src_classes=lhs.split(),
                    target_order=[int(t) for t in order_part.split()],
                    weight=float(weight_part) if weight_part.strip() else 1.0,
                ))
        except (KeyError, ValueError) as exc:
            raise GrammarError(f"malformed grammar file {path}: {exc}") from exc
        g = cls(classes=classes, lexicons=lexicons, word_map=word_map,
                patterns=patterns)
        g.validate()
        return g


def default_grammar() -> SynthGrammar:
    """Six-class grammar with three reordering patterns.

    Source order follows [DET ADJ NOUN VERB (ADV) PUNCT] templates while the
    target side postposes adjectives, fronts adverbs, or goes verb-final, so
    the model has genuine reordering to learn.
    """
    classes = ["DET", "ADJ", "NOUN", "VERB", "ADV", "PUNCT"]
    lexicons = {c: [f"{c.lower()}{i}" for i in range(8)] for c in classes}
    word_map = {w: "t" + w for words in lexicons.values() for w in words}
    patterns = [
        Pattern(["DET", "ADJ", "NOUN", "VERB", "PUNCT"], [0, 2, 1, 3, 4], 0.4),
        Pattern(["DET", "NOUN", "VERB", "ADV", "PUNCT"], [3, 0, 1, 2, 4], 0.3),
        Pattern(["DET", "ADJ", "NOUN", "VERB", "ADV", "PUNCT"],
                [0, 2, 1, 4, 3, 5], 0.3),
    ]
    return SynthGrammar(classes, lexicons, word_map, patterns)


def generate(grammar: SynthGrammar, n: int, seed: int) -> list[ParallelExample]:
    """Draw n examples; a pure function of (grammar, n, seed)."""
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    grammar.validate()
    weights = np.array([p.weight for p in grammar.patterns], dtype=np.float64)
    weights /= weights.sum()
    examples = []
    for i in range(n):
        gen = np.random.Generator(np.random.Philox(
            np.random.SeedSequence([seed, i])))
        pat = grammar.patterns[int(gen.choice(len(weights), p=weights))]
        src = [grammar.lexicons[c][int(gen.integers(len(grammar.lexicons[c])))]
               for c in pat.src_classes]
        tgt = [grammar.word_map[src[j]] for j in pat.target_order]
        tags = [grammar.class_id(pat.src_classes[j]) for j in pat.target_order]
        examples.append(ParallelExample(src, tgt, tags))
    return examples


def split_examples(examples) -> dict[str, list]:
    """80/10/10 split keyed on a stable hash of the example index."""
    out = {"train": [], "valid": [], "test": []}
    for i, ex in enumerate(examples):
        h = int(hashlib.sha256(str(i).encode()).hexdigest(), 16) % 10
        out["train" if h < 8 else "valid" if h == 8 else "test"].append(ex)
    return out


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------

class Vocab:
    """Token/id bijection with reserved PAD/BOS/EOS/UNK at ids 0..3."""

    def __init__(self, tokens: list[str]):
        for r in RESERVED:
            if r in tokens:
                raise DataError(f"reserved token {r} may not appear in data")
        self.id_to_token = RESERVED + list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise DataError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.id_to_token)

    def encode(self, tokens) -> list[int]:
        return [self.token_to_id.get(t, UNK_ID) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def to_lines(self) -> list[str]:
        return list(self.id_to_token)

    @classmethod
    def from_lines(cls, lines) -> "Vocab":
        lines = [ln for ln in lines if ln]
        if lines[:4] != RESERVED:
            raise DataError("vocabulary file must start with the reserved tokens")
        return cls(lines[4:])


def build_vocab(token_seqs) -> Vocab:
    counts = Counter(t for seq in token_seqs for t in seq)
    ordered = sorted(counts, key=lambda t: (-counts[t], t))
    return Vocab(ordered)


# ---------------------------------------------------------------------------
# Byte-pair encoding with tag propagation
# ---------------------------------------------------------------------------

BPE_MARKER = "@@"


def learn_bpe(token_seqs, n_merges: int) -> list[tuple[str, str]]:
    """Greedy most-frequent-pair merges over the word frequency table.

    Ties break toward the lexicographically smallest pair so the merge
    table is deterministic. n_merges=0 yields character segmentation.
    """
    if n_merges < 0:
        raise ValueError("n_merges must be >= 0")
    word_freq = Counter(t for seq in token_seqs for t in seq)
    words = {w: tuple(w) for w in word_freq}
    merges: list[tuple[str, str]] = []
    for _ in range(n_merges):
        pair_counts: Counter = Counter()
        for w, sym in words.items():
            f = word_freq[w]
            for a, b in zip(sym, sym[1:]):
                pair_counts[(a, b)] += f
        if not pair_counts:
            break
        best = min(pair_counts, key=lambda p: (-pair_counts[p], p))
        merges.append(best)
        words = {w: _merge_pair(sym, best) for w, sym in words.items()}
    return merges


def _merge_pair(symbols: tuple, pair: tuple) -> tuple:
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == pair:
            out.append(symbols[i] + symbols[i + 1])
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def segment_word(word: str, merges) -> list[str]:
    """Split one word into subword pieces; non-final pieces carry '@@'."""
    symbols = tuple(word)
    for pair in merges:
        symbols = _merge_pair(symbols, pair)
    return [s + BPE_MARKER for s in symbols[:-1]] + [symbols[-1]]


def apply_bpe(tokens, merges) -> list[str]:
    pieces = []
    for t in tokens:
        pieces.extend(segment_word(t, merges))
    return pieces


def detokenize_bpe(pieces) -> list[str]:
    words = []
    buf = ""
    for p in pieces:
        if p.endswith(BPE_MARKER):
            buf += p[:-len(BPE_MARKER)]
        else:
            words.append(buf + p)
            buf = ""
    if buf:
        raise DataError("dangling continuation piece at end of sequence")
    return words


def propagate_tags(word_tags, segmentation) -> list[int]:
    """Each subword inherits the tag of the word it came from."""
    if len(word_tags) != len(segmentation):
        raise DataError(
            f"tag/segmentation mismatch: {len(word_tags)} tags for "
            f"{len(segmentation)} words")
    out = []
    for tag, pieces in zip(word_tags, segmentation):
        out.extend([tag] * len(pieces))
    return out


def bpe_encode_example(ex: ParallelExample, merges) -> ParallelExample:
    """Re-segment the target side (words -> subwords), keeping tags aligned."""
    segmentation = [segment_word(w, merges) for w in ex.tgt]
    tgt = [p for pieces in segmentation for p in pieces]
    tags = propagate_tags(ex.tags, segmentation)
    return ParallelExample(list(ex.src), tgt, tags)


# ---------------------------------------------------------------------------
# Tag-set merging
# ---------------------------------------------------------------------------

def merge_tagset(tags, merge_map) -> list[int]:
    """Relabel tags through a total old-id -> new-id map.

    ``merge_map[i]`` is the new id of old tag i; new ids must form the
    contiguous range 0..m-1 where m is the image size.
    """
    merge_map = list(merge_map)
    image = sorted(set(merge_map))
    if image != list(range(len(image))):
        raise ValueError(f"merge map image {image} is not contiguous from 0")
    out = []
    for t in tags:
        if not 0 <= t < len(merge_map):
            raise ValueError(f"tag id {t} outside the {len(merge_map)}-tag inventory")
        out.append(merge_map[t])
    return out


def merge_map_from_names(old_names, groups: dict[str, str]):
    """Build (id map, new name list) from an old-name -> new-name mapping."""
    missing = [n for n in old_names if n not in groups]
    if missing:
        raise ValueError(f"merge map is partial; missing classes: {missing}")
    new_names: list[str] = []
    id_map = []
    for name in old_names:
        tgt = groups[name]
        if tgt not in new_names:
            new_names.append(tgt)
        id_map.append(new_names.index(tgt))
    return id_map, new_names


COARSE3 = {"DET": "NOM", "ADJ": "NOM", "NOUN": "NOM",
           "VERB": "VRB", "ADV": "VRB", "PUNCT": "PCT"}


# ---------------------------------------------------------------------------
# Corpus files
# ---------------------------------------------------------------------------

def write_examples(path, examples, tag_names) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write("{}\t{}\t{}\n".format(
                " ".join(ex.src), " ".join(ex.tgt),
                " ".join(tag_names[t] for t in ex.tags)))


def read_examples(path, tag_names) -> list[ParallelExample]:
    name_to_id = {n: i for i, n in enumerate(tag_names)}
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 columns, got {len(cols)}")
            src, tgt, tags = (c.split() for c in cols)
            if len(tgt) != len(tags):
                raise DataError(
                    f"{path}:{lineno}: {len(tgt)} target tokens but {len(tags)} tags")
            try:
                tag_ids = [name_to_id[t] for t in tags]
            except KeyError as exc:
                raise DataError(f"{path}:{lineno}: unknown tag {exc}") from exc
            out.append(ParallelExample(src, tgt, tag_ids))
    return out


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    """Padded id arrays for one training/eval step.

    Target positions run over content tokens plus the EOS prediction step.
    ``out_mask`` marks real output positions; ``sup_mask`` marks the subset
    with gold-tag supervision (content positions only — the EOS step has no
    gold tag). Padded tag slots hold PAD_TAG_ID and are excluded everywhere.
    """
    src: np.ndarray        # [B, S] int
    src_mask: np.ndarray   # [B, S] float 0/1
    tgt_in: np.ndarray     # [B, T] int, BOS-prefixed
    tgt_out: np.ndarray    # [B, T] int, EOS-terminated
    tags: np.ndarray       # [B, T] int
    out_mask: np.ndarray   # [B, T] float 0/1
    sup_mask: np.ndarray   # [B, T] float 0/1
    n_tokens: int          # sum of out_mask

    @property
    def size(self) -> int:
        return self.src.shape[0]


def encode_example(ex: ParallelExample, src_vocab: Vocab, tgt_vocab: Vocab):
    src_ids = [BOS_ID] + src_vocab.encode(ex.src) + [EOS_ID]
    tgt_ids = tgt_vocab.encode(ex.tgt)
    return src_ids, tgt_ids, list(ex.tags)


def make_batches(examples, src_vocab: Vocab, tgt_vocab: Vocab,
                 tokens_per_batch: int, seed: int) -> list[Batch]:
    """Length-bucketed token-budget batches, order shuffled by seed.

    The budget counts unpadded target content tokens. Examples are sorted
    by length before grouping, so padding waste stays small; the resulting
    batch list is then shuffled deterministically.
    """
    encoded = [encode_example(ex, src_vocab, tgt_vocab) for ex in examples]
    for i, (_, tgt_ids, _) in enumerate(encoded):
        if len(tgt_ids) > tokens_per_batch:
            raise DataError(
                f"example {i} has {len(tgt_ids)} target tokens, over the "
                f"batch budget {tokens_per_batch}: {' '.join(examples[i].tgt)}")
    order = sorted(range(len(encoded)),
                   key=lambda i: (len(encoded[i][1]), len(encoded[i][0]), i))
    groups: list[list[int]] = []
    cur: list[int] = []
    cur_tokens = 0
    for i in order:
        t = len(encoded[i][1])
        if cur and cur_tokens + t > tokens_per_batch:
            groups.append(cur)
            cur, cur_tokens = [], 0
        cur.append(i)
        cur_tokens += t
    if cur:
        groups.append(cur)

    batches = [collate([encoded[i] for i in g]) for g in groups]
    gen = np.random.Generator(np.random.Philox(
        np.random.SeedSequence([seed, 0x5A17])))
    return [batches[i] for i in gen.permutation(len(batches))]


def collate(encoded) -> Batch:
    b = len(encoded)
    s_max = max(len(src) for src, _, _ in encoded)
    t_max = max(len(tgt) for _, tgt, _ in encoded) + 1  # + EOS step
    src = np.full((b, s_max), PAD_ID, dtype=np.int64)
    src_mask = np.zeros((b, s_max))
    tgt_in = np.full((b, t_max), PAD_ID, dtype=np.int64)
    tgt_out = np.full((b, t_max), PAD_ID, dtype=np.int64)
    tags = np.full((b, t_max), PAD_TAG_ID, dtype=np.int64)
    out_mask = np.zeros((b, t_max))
    sup_mask = np.zeros((b, t_max))
    for r, (src_ids, tgt_ids, tag_ids) in enumerate(encoded):
        n = len(tgt_ids)
        src[r, :len(src_ids)] = src_ids
        src_mask[r, :len(src_ids)] = 1.0
        tgt_in[r, 0] = BOS_ID
        tgt_in[r, 1:n + 1] = tgt_ids
        tgt_out[r, :n] = tgt_ids
        tgt_out[r, n] = EOS_ID
        tags[r, :n] = tag_ids
        out_mask[r, :n + 1] = 1.0
        sup_mask[r, :n] = 1.0
    return Batch(src, src_mask, tgt_in, tgt_out, tags, out_mask, sup_mask,
                 int(out_mask.sum()))
