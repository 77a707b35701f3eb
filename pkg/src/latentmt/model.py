"""Transformer encoder-decoder with a tag-marginalizing output head.

At every decoder position the model emits two distributions: a categorical
over tag values and, for each tag value, a categorical over target words
(the tag shifts the decoder state additively before a shared output
projection). The per-position word marginal sums the tag choices exactly,
in log space, so nothing downstream ever commits to a single tag and the
trunk never observes which tag a search procedure picked.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Rng, Tensor
from .corpus import BOS_ID

MASK_BIAS = -1e9  # additive attention mask; large but finite so exp() -> 0


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    src_vocab_size: int
    tgt_vocab_size: int
    tag_vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_layers_enc: int = 2
    n_layers_dec: int = 2
    d_ff: int = 128
    dropout_rate: float = 0.1
    max_len: int = 64

    def validate(self) -> "ModelConfig":
        sizes = dict(src_vocab_size=self.src_vocab_size,
                     tgt_vocab_size=self.tgt_vocab_size,
                     tag_vocab_size=self.tag_vocab_size,
                     d_model=self.d_model, n_heads=self.n_heads,
                     n_layers_enc=self.n_layers_enc,
                     n_layers_dec=self.n_layers_dec,
                     d_ff=self.d_ff, max_len=self.max_len)
        for k, v in sizes.items():
            if v < 1:
                raise ConfigError(f"{k} must be >= 1, got {v}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        return self


@dataclass
class LatentStepOutput:
    """One decoding step: log P(z | .) and per-tag log P(word | z, .)."""
    tag_logprobs: np.ndarray          # [Vz]
    word_logprobs_by_tag: np.ndarray  # [Vz, Vy]


@dataclass
class Memory:
    states: Tensor        # [B, S, d_model]
    src_mask: np.ndarray  # [B, S] 1.0 on real tokens


def marginal_word_logprobs(step: LatentStepOutput) -> np.ndarray:
    """log P(word) = logsumexp_z [ log P(z) + log P(word | z) ]."""
    joint = step.tag_logprobs[:, None] + step.word_logprobs_by_tag
    m = joint.max(axis=0)
    return m + np.log(np.exp(joint - m).sum(axis=0))


def tag_posterior(step: LatentStepOutput, observed_word: int) -> np.ndarray:
    """Normalized q(z) proportional to P(z) * P(observed_word | z)."""
    joint = step.tag_logprobs + step.word_logprobs_by_tag[:, observed_word]
    joint -= joint.max()
    q = np.exp(joint)
    return q / q.sum()


def sinusoid_table(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None].astype(np.float64)
    dim = np.arange(d_model // 2)[None, :].astype(np.float64)
    angle = pos / np.power(10000.0, 2.0 * dim / d_model)
    table = np.zeros((max_len, d_model))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


class LatentTagTransformer:
    """Encoder-decoder trunk plus the two-headed latent output layer."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config.validate()
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        self._build(Rng(seed, path=(0x1417,)))
        self.pos_table = sinusoid_table(config.max_len + 1, config.d_model)

    # ------------------------------------------------------------------
    # parameters
    # ------------------------------------------------------------------

    def _add(self, name: str, shape, rng: Rng, kind: str):
        c = self.config
        if kind == "matrix":
            bound = 1.0 / np.sqrt(c.d_model)
            data = rng.uniform(-bound, bound, shape)
        elif kind == "zeros":
            data = np.zeros(shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            raise ValueError(kind)
        self.params[name] = Tensor(data, requires_grad=True)

    def _add_attn(self, prefix, rng):
        d = self.config.d_model
        for part in ("q", "k", "v", "o"):
            self._add(f"{prefix}.w{part}", (d, d), rng, "matrix")
            self._add(f"{prefix}.b{part}", (d,), rng, "zeros")

    def _add_ln(self, prefix, rng):
        d = self.config.d_model
        self._add(f"{prefix}.g", (d,), rng, "ones")
        self._add(f"{prefix}.b", (d,), rng, "zeros")

    def _add_ff(self, prefix, rng):
        d, f = self.config.d_model, self.config.d_ff
        self._add(f"{prefix}.w1", (d, f), rng, "matrix")
        self._add(f"{prefix}.b1", (f,), rng, "zeros")
        self._add(f"{prefix}.w2", (f, d), rng, "matrix")
        self._add(f"{prefix}.b2", (d,), rng, "zeros")

    def _build(self, rng: Rng):
        c = self.config
        self._add("src_emb", (c.src_vocab_size, c.d_model), rng, "matrix")
        self._add("tgt_emb", (c.tgt_vocab_size, c.d_model), rng, "matrix")
        self._add("tag_emb", (c.tag_vocab_size, c.d_model), rng, "matrix")
        for i in range(c.n_layers_enc):
            self._add_attn(f"enc{i}.attn", rng)
            self._add_ln(f"enc{i}.ln1", rng)
            self._add_ff(f"enc{i}.ff", rng)
            self._add_ln(f"enc{i}.ln2", rng)
        for i in range(c.n_layers_dec):
            self._add_attn(f"dec{i}.self", rng)
            self._add_ln(f"dec{i}.ln1", rng)
            self._add_attn(f"dec{i}.cross", rng)
            self._add_ln(f"dec{i}.ln2", rng)
            self._add_ff(f"dec{i}.ff", rng)
            self._add_ln(f"dec{i}.ln3", rng)
        self._add("out.tag_w", (c.d_model, c.tag_vocab_size), rng, "matrix")
        self._add("out.tag_b", (c.tag_vocab_size,), rng, "zeros")
        self._add("out.word_w", (c.d_model, c.tgt_vocab_size), rng, "matrix")
        self._add("out.word_b", (c.tgt_vocab_size,), rng, "zeros")

    def parameters(self):
        return self.params

    def load_param_arrays(self, arrays: dict):
        for name, p in self.params.items():
            if name not in arrays:
                raise checkpoint.CheckpointError(f"checkpoint missing {name}")
            if arrays[name].shape != p.shape:
                raise checkpoint.CheckpointError(
                    f"{name}: checkpoint shape {arrays[name].shape} vs {p.shape}")
            p.data = np.ascontiguousarray(arrays[name])

    # ------------------------------------------------------------------
    # trunk
    # ------------------------------------------------------------------

    def _linear(self, x: Tensor, w: str, b: str) -> Tensor:
        d_in = x.shape[-1]
        lead = x.shape[:-1]
        flat = ad.reshape(x, (-1, d_in))
        y = ad.bias_add(ad.matmul(flat, self.params[w]), self.params[b])
        return ad.reshape(y, lead + (self.params[w].shape[1],))

    def _heads_split(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        h = self.config.n_heads
        return ad.transpose(ad.reshape(x, (b, t, h, d // h)), (0, 2, 1, 3))

    def _heads_join(self, x: Tensor) -> Tensor:
        b, h, t, dh = x.shape
        return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))

    def _mha(self, prefix, q_in, kv_in, mask_bias, train, drop_rng):
        q = self._heads_split(self._linear(q_in, f"{prefix}.wq", f"{prefix}.bq"))
        k = self._heads_split(self._linear(kv_in, f"{prefix}.wk", f"{prefix}.bk"))
        v = self._heads_split(self._linear(kv_in, f"{prefix}.wv", f"{prefix}.bv"))
        ctx = self._heads_join(ad.attention(q, k, v, mask_bias))
        out = self._linear(ctx, f"{prefix}.wo", f"{prefix}.bo")
        return self._drop(out, train, drop_rng)

    def _ff(self, prefix, x, train, drop_rng):
        h = ad.relu(self._linear(x, f"{prefix}.w1", f"{prefix}.b1"))
        return self._drop(self._linear(h, f"{prefix}.w2", f"{prefix}.b2"),
                          train, drop_rng)

    def _drop(self, x, train, drop_rng):
        if not train or drop_rng is None:
            return x
        return ad.dropout(x, self.config.dropout_rate, drop_rng, train=True)

    def _ln(self, prefix, x):
        return ad.layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    def _embed(self, table: str, ids: np.ndarray, train, drop_rng) -> Tensor:
        c = self.config
        x = ad.scale(ad.embedding(self.params[table], ids), np.sqrt(c.d_model))
        pe = np.broadcast_to(self.pos_table[:ids.shape[1]], x.shape)
        x = ad.add(x, ad.constant(pe.copy()))
        return self._drop(x, train, drop_rng)

    def encode_batch(self, src: np.ndarray, src_mask: np.ndarray,
                     train: bool = False, drop_rng: Rng | None = None) -> Memory:
        c = self.config
        if src.shape[1] > c.max_len:
            raise ConfigError(
                f"source length {src.shape[1]} exceeds max_len {c.max_len}")
        if src.size and src.max() >= c.src_vocab_size:
            raise ConfigError(
                f"source id {src.max()} out of range for |V_x|={c.src_vocab_size}")
        x = self._embed("src_emb", src, train, drop_rng)
        key_bias = np.where(src_mask[:, None, None, :] > 0, 0.0, MASK_BIAS)
        for i in range(c.n_layers_enc):
            a = self._mha(f"enc{i}.attn", x, x, key_bias, train, drop_rng)
            x = self._ln(f"enc{i}.ln1", ad.add(x, a))
            f = self._ff(f"enc{i}.ff", x, train, drop_rng)
            x = self._ln(f"enc{i}.ln2", ad.add(x, f))
        return Memory(states=x, src_mask=src_mask)

    def decode_trunk(self, memory: Memory, tgt_in: np.ndarray,
                     train: bool = False, drop_rng: Rng | None = None) -> Tensor:
        c = self.config
        t = tgt_in.shape[1]
        if t > c.max_len:
            raise ConfigError(f"target length {t} exceeds max_len {c.max_len}")
        if tgt_in.size and tgt_in.max() >= c.tgt_vocab_size:
            raise ConfigError(
                f"target id {tgt_in.max()} out of range for |V_y|={c.tgt_vocab_size}")
        x = self._embed("tgt_emb", tgt_in, train, drop_rng)
        causal = np.where(np.tril(np.ones((t, t))) > 0, 0.0, MASK_BIAS)
        causal = causal[None, None, :, :]
        cross_bias = np.where(memory.src_mask[:, None, None, :] > 0, 0.0, MASK_BIAS)
        for i in range(c.n_layers_dec):
            a = self._mha(f"dec{i}.self", x, x, causal, train, drop_rng)
            x = self._ln(f"dec{i}.ln1", ad.add(x, a))
            a = self._mha(f"dec{i}.cross", x, memory.states, cross_bias,
                          train, drop_rng)
            x = self._ln(f"dec{i}.ln2", ad.add(x, a))
            f = self._ff(f"dec{i}.ff", x, train, drop_rng)
            x = self._ln(f"dec{i}.ln3", ad.add(x, f))
        return x

    # ------------------------------------------------------------------
    # latent output heads
    # ------------------------------------------------------------------

    def latent_heads(self, h: Tensor) -> tuple[Tensor, Tensor]:
        """Map trunk states [B, T, d] to (tag log-probs, per-tag word log-probs).

        The word logits for tag z are (h + tag_emb[z]) @ W + b; distributing
        the projection lets the tag shift be one [Vz, Vy] matrix shared
        across every position, which keeps the cost linear in the tag count.
        """
        b, t, _ = h.shape
        vz, vy = self.config.tag_vocab_size, self.config.tgt_vocab_size
        tag_lp = ad.log_softmax(self._linear(h, "out.tag_w", "out.tag_b"), axis=-1)
        base = self._linear(h, "out.word_w", "out.word_b")       # [B, T, Vy]
        shift = ad.matmul(self.params["tag_emb"], self.params["out.word_w"])
        base4 = ad.repeat_axis(ad.reshape(base, (b, t, 1, vy)), 2, vz)
        shift4 = ad.repeat_axis(ad.reshape(shift, (1, 1, vz, vy)), 0, b)
        shift4 = ad.repeat_axis(shift4, 1, t)
        word_lp = ad.log_softmax(ad.add(base4, shift4), axis=-1)
        return tag_lp, word_lp

    def forward_teacher(self, src, src_mask, tgt_in, train=False, drop_rng=None):
        """Teacher-forced pass: returns (tag_lp [B,T,Vz], word_lp [B,T,Vz,Vy])."""
        memory = self.encode_batch(src, src_mask, train, drop_rng)
        h = self.decode_trunk(memory, tgt_in, train, drop_rng)
        return self.latent_heads(h)

    # ------------------------------------------------------------------
    # single-sentence interface used by inference
    # ------------------------------------------------------------------

    def encode(self, src_ids) -> Memory:
        """Encode one sentence (eval mode, no graph)."""
        src = np.asarray([list(src_ids)], dtype=np.int64)
        with ad.no_grad():
            return self.encode_batch(src, np.ones_like(src, dtype=np.float64))

    def decode_step(self, memory: Memory, y_prefix) -> LatentStepOutput:
        """Distributions for the next position after the given BOS-led prefix."""
        return self.decode_step_batch(memory, [list(y_prefix)])[0]

    def decode_step_batch(self, memory: Memory, prefixes) -> list[LatentStepOutput]:
        """Step several equal-length prefixes of the same source at once."""
        lens = {len(p) for p in prefixes}
        if len(lens) != 1:
            raise ConfigError("decode_step_batch needs equal-length prefixes")
        for p in prefixes:
            if p[0] != BOS_ID:
                raise ConfigError(f"prefix must begin with BOS, got {p[:1]}")
        k = len(prefixes)
        with ad.no_grad():
            states = memory.states
            src_mask = memory.src_mask
            if states.shape[0] == 1 and k > 1:
                states = ad.constant(np.repeat(states.data, k, axis=0))
                src_mask = np.repeat(src_mask, k, axis=0)
            mem = Memory(states=states, src_mask=src_mask)
            h = self.decode_trunk(mem, np.asarray(prefixes, dtype=np.int64))
            h_last = ad.narrow(h, 1, h.shape[1] - 1, 1)        # [k, 1, d]
            tag_lp, word_lp = self.latent_heads(h_last)
        return [
            LatentStepOutput(tag_logprobs=tag_lp.data[i, 0],
                             word_logprobs_by_tag=word_lp.data[i, 0])
            for i in range(k)
        ]

    def sentence_marginal_nll(self, src_ids, tgt_ids) -> float:
        """Teacher-forced negative log-likelihood of exactly ``tgt_ids``.

        Scores the given output tokens and nothing else; append EOS to the
        targets when the stopping decision should count.
        """
        tgt = list(tgt_ids)
        memory = self.encode(src_ids)
        nll = 0.0
        for n, y in enumerate(tgt):
            step = self.decode_step(memory, [BOS_ID] + tgt[:n])
            nll -= float(marginal_word_logprobs(step)[y])
        return nll

    # ------------------------------------------------------------------
    # checkpoints
    # ------------------------------------------------------------------

    def save(self, path, extra_meta: dict | None = None,
             extra_arrays: dict | None = None) -> None:
        meta = {"model_config": asdict(self.config), "seed": self.seed}
        if extra_meta:
            meta.update(extra_meta)
        arrays = {name: p.data for name, p in self.params.items()}
        if extra_arrays:
            arrays.update(extra_arrays)
        checkpoint.save(path, arrays, meta)

    @classmethod
    def load(cls, path) -> tuple["LatentTagTransformer", dict, dict]:
        """Returns (model, meta, non-parameter arrays such as optimizer state)."""
        arrays, meta = checkpoint.load(path)
        config = ModelConfig(**meta["model_config"])
        model = cls(config, seed=int(meta.get("seed", 0)))
        model.load_param_arrays({k: v for k, v in arrays.items()
                                 if k in model.params})
        extras = {k: v for k, v in arrays.items() if k not in model.params}
        return model, meta, extras
