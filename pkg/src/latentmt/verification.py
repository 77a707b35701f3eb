"""Self-checks: full-model gradient verification and decode-time scaling."""

from __future__ import annotations

import numpy as np

from . import decoding, training
from .autodiff import Rng, gradient_check
from .corpus import Batch, BOS_ID, EOS_ID
from .model import LatentTagTransformer, ModelConfig


def tiny_batch(tgt_vocab: int, tag_vocab: int, seed: int = 0) -> Batch:
    """Two short sentences with one padded position each way."""
    gen = np.random.default_rng(seed)

    def ids(vocab, n):
        return gen.integers(4, vocab, size=n).tolist()

    rows = [
        (ids(tgt_vocab, 3), ids(tgt_vocab, 4), gen.integers(0, tag_vocab, 4)),
        (ids(tgt_vocab, 4), ids(tgt_vocab, 3), gen.integers(0, tag_vocab, 3)),
    ]
    from .corpus import collate
    encoded = [([BOS_ID] + src + [EOS_ID], tgt, list(map(int, tags)))
               for src, tgt, tags in rows]
    return collate(encoded)


def model_gradient_checks(seed: int = 0, d_model: int = 64,
                          n_coords: int = 200) -> dict[str, float]:
    """Finite-difference checks of both training objectives on a tiny model.

    Dropout stays on: the mask is re-derived from a fixed counter stream at
    every evaluation, so the loss is a deterministic function of the
    parameters and the analytic/numeric comparison is valid.
    """
    config = ModelConfig(
        src_vocab_size=12, tgt_vocab_size=12, tag_vocab_size=3,
        d_model=d_model, n_heads=4, n_layers_enc=2, n_layers_dec=2,
        d_ff=2 * d_model, dropout_rate=0.1, max_len=16)
    model = LatentTagTransformer(config, seed=seed)
    batch = tiny_batch(config.tgt_vocab_size, config.tag_vocab_size, seed)
    q = training.e_step(model, batch)
    qp = training.regularize_posterior(q, batch.tags, 0.2, batch.sup_mask)
    params = list(model.params.values())

    def em_f():
        return training.em_loss(model, batch, qp, train=True,
                                drop_rng=Rng(seed, (0xF1CED,)))

    def nll_f():
        return training.marginal_nll_loss(model, batch, train=True,
                                          drop_rng=Rng(seed, (0xF1CED,)))

    return {
        "em_lower_bound_loss": gradient_check(em_f, params, n_coords=n_coords,
                                              seed=seed),
        "marginal_nll_loss": gradient_check(nll_f, params, n_coords=n_coords,
                                            seed=seed + 1),
    }


def _bench_sources(n_sentences: int, src_vocab: int, length: int, seed: int):
    gen = np.random.default_rng(seed)
    return [[BOS_ID] + gen.integers(4, src_vocab, size=length).tolist()
            + [EOS_ID] for _ in range(n_sentences)]


def bench_suite(vz_list, beam_list, n_sentences: int = 20, seed: int = 0,
                beam_size: int = 5, max_len: int = 12,
                repeats: int = 3) -> list[tuple[str, float]]:
    """Per-sentence decode times across tag-vocabulary sizes and beam widths."""
    src_vocab = tgt_vocab = 64
    sources = _bench_sources(n_sentences, src_vocab, length=10, seed=seed)

    def build(vz):
        cfg = ModelConfig(src_vocab_size=src_vocab, tgt_vocab_size=tgt_vocab,
                          tag_vocab_size=vz, max_len=32)
        return LatentTagTransformer(cfg, seed=seed)

    rows: list[tuple[str, float]] = []
    if vz_list:
        for vz, secs in decoding.bench_decode(build, vz_list, sources,
                                              beam_size, max_len, repeats):
            rows.append((f"vz={vz} beam={beam_size}", secs))
    if beam_list:
        model = build(max(vz_list) if vz_list else 16)
        for b, secs in decoding.bench_beam(model, beam_list, sources, max_len,
                                           repeats):
            rows.append((f"beam={b} vz={model.config.tag_vocab_size}", secs))
    return rows
