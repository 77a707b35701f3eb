"""Command-line entry point.

Subcommands cover the whole experiment loop: gen-data -> train ->
translate / diverse -> eval, plus grad-check and bench for verification.
Every command is reproducible: flags plus seed determine all output bytes
except wall-clock fields.

Exit codes: 0 success, 2 configuration error, 3 data/IO error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict

import numpy as np

from . import corpus as cp
from . import decoding, metrics, training
from .checkpoint import CheckpointError
from .model import ConfigError, LatentTagTransformer, ModelConfig

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

# every key a config file may set, with type and default
CONFIG_KEYS = {
    "d_model": (int, 64), "n_heads": (int, 4),
    "n_layers_enc": (int, 2), "n_layers_dec": (int, 2),
    "d_ff": (int, 128), "dropout": (float, 0.1), "max_len": (int, 64),
    "k": (int, 1), "lambda": (float, 0.2),
    "beta1": (float, 0.9), "beta2": (float, 0.98), "adam_eps": (float, 1e-9),
    "peak_lr": (float, 3e-3), "warmup_steps": (int, 400),
    "tokens_per_batch": (int, 1024), "epochs": (int, 5),
    "clip_norm": (float, 5.0), "objective": (str, "em"),
    "val_bleu_sentences": (int, 200),
    "beam": (int, 5), "seed": (int, 0), "threads": (int, 0), "vz": (int, 0),
}


def load_config(path=None, overrides=None) -> dict:
    cfg = {k: d for k, (_, d) in CONFIG_KEYS.items()}
    if path:
        if not os.path.exists(path):
            raise cp.DataError(f"config file not found: {path}")
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value")
                key, _, raw = line.partition("=")
                key, raw = key.strip(), raw.strip()
                if key not in CONFIG_KEYS:
                    raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
                typ = CONFIG_KEYS[key][0]
                try:
                    cfg[key] = typ(raw)
                except ValueError as exc:
                    raise ConfigError(f"{path}:{lineno}: bad value for {key}: "
                                      f"{raw!r}") from exc
    for key, val in (overrides or {}).items():
        if val is not None:
            cfg[key] = val
    return cfg


def echo_config(cfg: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k in sorted(cfg):
            fh.write(f"{k}={cfg[k]}\n")


# ---------------------------------------------------------------------------
# corpus / checkpoint helpers
# ---------------------------------------------------------------------------

def _read_tag_names(data_dir) -> list[str]:
    path = os.path.join(data_dir, "tags.vocab")
    if not os.path.exists(path):
        raise cp.DataError(f"missing tag vocabulary: {path}")
    with open(path, encoding="utf-8") as fh:
        return [ln.strip() for ln in fh if ln.strip()]


def _load_split(data_dir, name, tag_names):
    path = os.path.join(data_dir, f"{name}.tsv")
    if not os.path.exists(path):
        raise cp.DataError(f"missing corpus file: {path}")
    return cp.read_examples(path, tag_names)


def _load_vocab(data_dir, name) -> cp.Vocab:
    path = os.path.join(data_dir, f"{name}.vocab")
    if not os.path.exists(path):
        raise cp.DataError(f"missing vocabulary file: {path}")
    with open(path, encoding="utf-8") as fh:
        return cp.Vocab.from_lines([ln.rstrip("\n") for ln in fh])


def _load_model(ckpt_path):
    if not os.path.exists(ckpt_path):
        raise cp.DataError(f"checkpoint not found: {ckpt_path}")
    model, meta, _ = LatentTagTransformer.load(ckpt_path)
    src_vocab = cp.Vocab.from_lines(meta["src_vocab"])
    tgt_vocab = cp.Vocab.from_lines(meta["tgt_vocab"])
    return model, src_vocab, tgt_vocab, list(meta["tag_names"])


def _read_source_lines(path) -> list[list[str]]:
    """Plain token lines, or column 1 of a corpus TSV."""
    if not os.path.exists(path):
        raise cp.DataError(f"input file not found: {path}")
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            out.append(line.split("\t")[0].split())
    return out


def _read_hyp_file(path):
    """Decode-output TSV (id, tokens, tags, score) or plain token lines."""
    if not os.path.exists(path):
        raise cp.DataError(f"file not found: {path}")
    tokens, tags = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) == 4:
                tokens.append(cols[1].split())
                tags.append(cols[2].split())
            else:
                tokens.append(cols[0].split())
                tags.append(None)
    return tokens, tags


def _read_ref_file(path):
    """Corpus TSV (source, target, tags) or plain target token lines."""
    if not os.path.exists(path):
        raise cp.DataError(f"file not found: {path}")
    tokens, tags = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) == 3:
                tokens.append(cols[1].split())
                tags.append(cols[2].split())
            else:
                tokens.append(cols[0].split())
                tags.append(None)
    return tokens, tags


def write_decode_outputs(path, outputs, tgt_vocab, tag_names) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, out in enumerate(outputs):
            words = tgt_vocab.decode(out.content_tokens())
            tag_str = " ".join(tag_names[t] for t in out.content_tags())
            fh.write(f"{i}\t{' '.join(words)}\t{tag_str}\t{out.score:.10g}\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    grammar = cp.default_grammar() if args.grammar == "default" \
        else cp.SynthGrammar.from_file(args.grammar)
    grammar.validate()
    examples = cp.generate(grammar, args.n, args.seed)
    tag_names = list(grammar.classes)

    if args.merge_tags:
        if args.merge_tags == "coarse3":
            groups = dict(cp.COARSE3)
            missing = [c for c in tag_names if c not in groups]
            if missing:
                raise ConfigError(
                    f"coarse3 preset does not cover classes {missing}")
        else:
            groups = {}
            with open(args.merge_tags, encoding="utf-8") as fh:
                for line in fh:
                    parts = line.split()
                    if len(parts) == 2:
                        groups[parts[0]] = parts[1]
        id_map, tag_names = cp.merge_map_from_names(grammar.classes, groups)
        examples = [cp.ParallelExample(ex.src, ex.tgt,
                                       cp.merge_tagset(ex.tags, id_map))
                    for ex in examples]

    if args.bpe_merges is not None:
        src_merges = cp.learn_bpe([ex.src for ex in examples], args.bpe_merges)
        tgt_merges = cp.learn_bpe([ex.tgt for ex in examples], args.bpe_merges)
        examples = [
            cp.ParallelExample(cp.apply_bpe(ex.src, src_merges),
                               *_bpe_target(ex, tgt_merges))
            for ex in examples
        ]

    splits = cp.split_examples(examples)
    os.makedirs(args.out, exist_ok=True)
    for name, exs in splits.items():
        cp.write_examples(os.path.join(args.out, f"{name}.tsv"), exs, tag_names)
    src_vocab = cp.build_vocab([ex.src for ex in examples])
    tgt_vocab = cp.build_vocab([ex.tgt for ex in examples])
    for fname, vocab in (("src.vocab", src_vocab), ("tgt.vocab", tgt_vocab)):
        with open(os.path.join(args.out, fname), "w", encoding="utf-8") as fh:
            fh.write("\n".join(vocab.to_lines()) + "\n")
    with open(os.path.join(args.out, "tags.vocab"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(tag_names) + "\n")
    grammar.to_file(os.path.join(args.out, "grammar.cfg"))
    for ex in examples:
        assert len(ex.tgt) == len(ex.tags)
    print(f"examples: {len(examples)} "
          f"(train {len(splits['train'])}, valid {len(splits['valid'])}, "
          f"test {len(splits['test'])})")
    print(f"|V_x|={len(src_vocab)} |V_y|={len(tgt_vocab)} |V_z|={len(tag_names)}")
    return 0


def _bpe_target(ex, merges):
    seg = [cp.segment_word(w, merges) for w in ex.tgt]
    tgt = [p for pieces in seg for p in pieces]
    tags = cp.propagate_tags(ex.tags, seg)
    return tgt, tags


def _apply_vz(examples, tag_names, vz):
    """--vz override: 1 collapses tags, larger only widens the model head."""
    if vz <= 0 or vz == len(tag_names):
        return examples, tag_names, max(len(tag_names), 1)
    if vz == 1:
        new = {split: [cp.ParallelExample(ex.src, ex.tgt, [0] * len(ex.tags))
                       for ex in exs]
               for split, exs in examples.items()}
        return new, ["ALL"], 1
    if vz < len(tag_names):
        raise ConfigError(
            f"--vz {vz} is smaller than the {len(tag_names)}-tag corpus "
            "inventory; only --vz 1 collapses tags")
    return examples, tag_names, vz


def cmd_train(args) -> int:
    cfg = load_config(args.config, {
        "k": args.k, "lambda": getattr(args, "lambda_"),
        "epochs": args.epochs, "seed": args.seed, "vz": args.vz,
        "tokens_per_batch": args.tokens_per_batch, "peak_lr": args.peak_lr,
        "warmup_steps": args.warmup_steps, "objective": args.objective,
        "dropout": args.dropout,
    })
    tag_names = _read_tag_names(args.data)
    splits = {name: _load_split(args.data, name, tag_names)
              for name in ("train", "valid", "test")}
    src_vocab = _load_vocab(args.data, "src")
    tgt_vocab = _load_vocab(args.data, "tgt")
    splits, tag_names, vz = _apply_vz(splits, tag_names, cfg["vz"])

    model_cfg = ModelConfig(
        src_vocab_size=len(src_vocab), tgt_vocab_size=len(tgt_vocab),
        tag_vocab_size=vz, d_model=cfg["d_model"], n_heads=cfg["n_heads"],
        n_layers_enc=cfg["n_layers_enc"], n_layers_dec=cfg["n_layers_dec"],
        d_ff=cfg["d_ff"], dropout_rate=cfg["dropout"], max_len=cfg["max_len"])
    train_cfg = training.TrainConfig(
        k=cfg["k"], lam=cfg["lambda"], beta1=cfg["beta1"], beta2=cfg["beta2"],
        adam_eps=cfg["adam_eps"], peak_lr=cfg["peak_lr"],
        warmup_steps=cfg["warmup_steps"],
        tokens_per_batch=cfg["tokens_per_batch"], epochs=cfg["epochs"],
        seed=cfg["seed"], clip_norm=cfg["clip_norm"],
        objective=cfg["objective"],
        val_bleu_sentences=cfg["val_bleu_sentences"]).validate()
    model_cfg.validate()

    os.makedirs(args.out, exist_ok=True)
    echo_config(cfg, os.path.join(args.out, "config.txt"))
    model = LatentTagTransformer(model_cfg, seed=cfg["seed"])
    result = training.train(model, splits, src_vocab, tgt_vocab, tag_names,
                            train_cfg, args.out, log_fn=print)
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _decode_many(fn, sources, threads):
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, sources))
    return [fn(s) for s in sources]


def cmd_translate(args) -> int:
    model, src_vocab, tgt_vocab, tag_names = _load_model(args.ckpt)
    sources = _read_source_lines(args.input)
    max_len = args.max_len or model.config.max_len - 1
    name_to_id = {n: i for i, n in enumerate(tag_names)}

    tag_seqs = None
    if args.tags:
        with open(args.tags, encoding="utf-8") as fh:
            lines = [ln.split("\t") for ln in fh.read().splitlines() if ln]
        raw = [ln[2] if len(ln) == 3 else ln[-1] for ln in lines]
        tag_seqs = []
        for ln in raw:
            try:
                tag_seqs.append([name_to_id[t] for t in ln.split()])
            except KeyError as exc:
                raise cp.DataError(f"unknown tag name {exc} in {args.tags}")
        if len(tag_seqs) != len(sources):
            raise cp.DataError(
                f"{len(sources)} input sentences but {len(tag_seqs)} tag lines")

    def run(i_src):
        i, src = i_src
        ids = [cp.BOS_ID] + src_vocab.encode(src) + [cp.EOS_ID]
        if tag_seqs is not None:
            return decoding.constrained_decode(model, ids, tag_seqs[i],
                                               beam_size=args.beam)
        if args.beam == 1:
            return decoding.greedy_decode(model, ids, max_len)
        return decoding.beam_search(model, ids, args.beam, max_len)[0]

    outputs = _decode_many(run, list(enumerate(sources)), args.threads)
    write_decode_outputs(args.out, outputs, tgt_vocab, tag_names)
    print(f"decoded {len(outputs)} sentences -> {args.out}")
    return 0


def cmd_diverse(args) -> int:
    model, src_vocab, tgt_vocab, tag_names = _load_model(args.ckpt)
    refs_tokens, _ = _read_ref_file(args.input)
    sources = _read_source_lines(args.input)
    max_len = args.max_len or model.config.max_len - 1
    d_values = [int(d) for d in args.d.split(",")]
    os.makedirs(args.out, exist_ok=True)

    summary = []
    for d in d_values:
        def run(i_src, d=d):
            i, src = i_src
            ids = [cp.BOS_ID] + src_vocab.encode(src) + [cp.EOS_ID]
            rng = np.random.default_rng([args.seed, d, i])
            return decoding.diverse_translate(model, ids, d, args.w, rng,
                                              max_len)
        per_source = _decode_many(run, list(enumerate(sources)), args.threads)
        flat = [o for outs in per_source for o in outs]
        path = os.path.join(args.out, f"diverse_d{d}.tsv")
        write_decode_outputs(path, flat, tgt_vocab, tag_names)
        # verify the emitted templates really sit at distance d
        for i, outs in enumerate(per_source):
            ids = [cp.BOS_ID] + src_vocab.encode(sources[i]) + [cp.EOS_ID]
            base = decoding.top1_tags(model, ids, max_len)
            for o in outs:
                dist = metrics.levenshtein(o.rows_used, base)
                if dist != d:
                    raise training.NumericError(
                        f"template distance {dist} != requested {d}")
        macro = float(np.mean([
            metrics.distinct1([tgt_vocab.decode(o.content_tokens())
                               for o in outs])
            for outs in per_source]))
        bleu = metrics.bleu(
            [tgt_vocab.decode(o.content_tokens()) for o in flat],
            [refs_tokens[i] for i, outs in enumerate(per_source) for _ in outs])
        summary.append((d, macro, bleu, len(flat)))

    sum_path = os.path.join(args.out, "summary.tsv")
    with open(sum_path, "w", encoding="utf-8") as fh:
        fh.write("d\tdistinct1\tbleu\toutputs\n")
        for d, macro, bleu, n in summary:
            fh.write(f"{d}\t{macro:.6f}\t{bleu:.4f}\t{n}\n")
    for d, macro, bleu, n in summary:
        print(f"d={d}: distinct-1={macro:.4f} bleu={bleu:.2f} ({n} outputs)")
    return 0


def cmd_eval(args) -> int:
    hyp_tokens, hyp_tags = _read_hyp_file(args.hyp)
    ref_tokens, ref_tags = _read_ref_file(args.ref)
    if len(hyp_tokens) != len(ref_tokens):
        raise cp.DataError(
            f"{len(hyp_tokens)} hypotheses vs {len(ref_tokens)} references")
    bleu = metrics.bleu(hyp_tokens, ref_tokens)
    d1 = metrics.distinct1(hyp_tokens)
    acc = None
    if args.tags:
        pred = [t for ts in hyp_tags for t in (ts or [])]
        gold = [t for ts in ref_tags for t in (ts or [])]
        acc = metrics.tag_accuracy(pred, gold)
    report = metrics.EvalReport(
        bleu=bleu, distinct1=d1, tag_accuracy=acc,
        n_sentences=len(hyp_tokens),
        n_tokens=sum(len(t) for t in hyp_tokens))
    print("\n".join(report.lines()))
    return 0


def cmd_grad_check(args) -> int:
    from .verification import model_gradient_checks

    results = model_gradient_checks(seed=args.seed)
    worst = max(results.values())
    for name, err in results.items():
        print(f"{name}: max relative error {err:.3e}")
    if worst > args.tol:
        print(f"FAIL: worst {worst:.3e} > tolerance {args.tol:g}")
        return EXIT_NUMERIC
    print(f"PASS: worst {worst:.3e} <= tolerance {args.tol:g}")
    return 0


def cmd_bench(args) -> int:
    from .verification import bench_suite

    vz_list = [int(v) for v in args.vz_list.split(",")] if args.vz_list else []
    beam_list = [int(b) for b in args.beam_list.split(",")] if args.beam_list \
        else []
    rows = bench_suite(vz_list, beam_list, n_sentences=args.n_sentences,
                       seed=args.seed)
    print("setting\tseconds_per_sentence")
    for name, seconds in rows:
        print(f"{name}\t{seconds:.6f}")
    return 0


def cmd_report(args) -> int:
    steps = training.read_log(os.path.join(args.run, "steps.tsv"))
    epochs = training.read_log(os.path.join(args.run, "epochs.tsv"))
    if not epochs:
        raise cp.DataError(f"no epochs logged under {args.run}")
    last = epochs[-1]
    print(f"epochs: {len(epochs)}  steps: {len(steps)}")
    print(f"final train_nll: {last['train_nll']:.4f}")
    print(f"final val_nll: {last['val_nll']:.4f}")
    print(f"final val_tag_acc: {last['val_tag_acc']:.4f}")
    print(f"best val_bleu: {max(e['val_bleu'] for e in epochs):.2f}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="latentmt",
        description="Latent-tag translation experiments on a synthetic task.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic parallel corpus")
    g.add_argument("--grammar", default="default",
                   help="grammar file, or 'default'")
    g.add_argument("--n", type=int, required=True, help="number of examples")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--bpe-merges", type=int, default=None,
                   help="apply BPE with this many merges (tags propagate)")
    g.add_argument("--merge-tags", default=None,
                   help="'coarse3' or a file of 'OLD NEW' class lines")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model with the EM procedure")
    t.add_argument("--data", required=True, help="gen-data output directory")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--config", default=None, help="key=value config file")
    t.add_argument("--k", type=int, default=None, help="EM steps per batch")
    t.add_argument("--lambda", dest="lambda_", type=float, default=None,
                   help="gold-tag regularization weight")
    t.add_argument("--vz", type=int, default=None,
                   help="tag vocabulary size override (1 = plain baseline)")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--tokens-per-batch", type=int, default=None)
    t.add_argument("--peak-lr", type=float, default=None)
    t.add_argument("--warmup-steps", type=int, default=None)
    t.add_argument("--dropout", type=float, default=None)
    t.add_argument("--objective", choices=("em", "nll"), default=None)
    t.set_defaults(fn=cmd_train)

    tr = sub.add_parser("translate", help="decode a file of source sentences")
    tr.add_argument("--ckpt", required=True)
    tr.add_argument("--input", required=True,
                    help="plain source token lines or a corpus TSV")
    tr.add_argument("--out", required=True, help="decode output file")
    tr.add_argument("--beam", type=int, default=5)
    tr.add_argument("--max-len", type=int, default=None)
    tr.add_argument("--tags", default=None,
                    help="tag templates (constrained decoding / gold-tag bound)")
    tr.add_argument("--threads", type=int, default=0)
    tr.set_defaults(fn=cmd_translate)

    dv = sub.add_parser("diverse", help="tag-template diversity sweep")
    dv.add_argument("--ckpt", required=True)
    dv.add_argument("--input", required=True, help="corpus TSV with references")
    dv.add_argument("--out", required=True, help="output directory")
    dv.add_argument("--d", default="0,2,4", help="edit distances, comma list")
    dv.add_argument("--w", type=int, default=10, help="translations per source")
    dv.add_argument("--seed", type=int, default=0)
    dv.add_argument("--max-len", type=int, default=None)
    dv.add_argument("--threads", type=int, default=0)
    dv.set_defaults(fn=cmd_diverse)

    e = sub.add_parser("eval", help="BLEU / distinct-1 / tag accuracy")
    e.add_argument("--hyp", required=True)
    e.add_argument("--ref", required=True)
    e.add_argument("--tags", action="store_true",
                   help="also score tag accuracy (needs tags in both files)")
    e.set_defaults(fn=cmd_eval)

    gc = sub.add_parser("grad-check",
                        help="finite-difference check of the full model")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.set_defaults(fn=cmd_grad_check)

    b = sub.add_parser("bench", help="decode-time scaling measurements")
    b.add_argument("--vz-list", default="8,16,32")
    b.add_argument("--beam-list", default="")
    b.add_argument("--n-sentences", type=int, default=20)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(fn=cmd_bench)

    r = sub.add_parser("report", help="summarize a training run directory")
    r.add_argument("--run", required=True)
    r.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, cp.GrammarError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (cp.DataError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except training.NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
