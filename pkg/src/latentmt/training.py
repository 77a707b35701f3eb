"""Neural EM training loop.

Each batch alternates an exact E-step (per-position tag posteriors under
the current parameters, no gradients) with a gradient M-step on the
evidence lower bound, K times, recomputing the posterior after every
parameter update. Gold tags enter through posterior interpolation:
q' = (1 - lambda) q + lambda * onehot(gold) on supervised positions.
lambda = 0 is fully unsupervised EM; lambda = 1 is supervised
cross-entropy on both heads.
"""

from __future__ import annotations

import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import metrics as metrics_mod
from .autodiff import Graph, Rng, Tensor, no_grad
from .corpus import BOS_ID, EOS_ID, Batch, make_batches
from .model import ConfigError, LatentTagTransformer

_DROP_STREAM = 0xD120


class NumericError(RuntimeError):
    """Training produced a non-finite quantity."""


@dataclass
class TrainConfig:
    k: int = 1
    lam: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    peak_lr: float = 3e-3
    warmup_steps: int = 400
    tokens_per_batch: int = 1024
    epochs: int = 5
    seed: int = 0
    clip_norm: float = 5.0
    objective: str = "em"       # "em" or "nll" (plain marginal likelihood)
    run_mode: str = ""          # auto-derived label when empty
    val_bleu_sentences: int = 200

    def validate(self) -> "TrainConfig":
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must be in [0, 1], got {self.lam}")
        if self.warmup_steps < 1:
            raise ConfigError(f"warmup_steps must be >= 1, got {self.warmup_steps}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.objective not in ("em", "nll"):
            raise ConfigError(f"unknown objective {self.objective!r}")
        return self

    def mode_label(self, tag_vocab_size: int) -> str:
        if self.run_mode:
            return self.run_mode
        if self.objective == "nll" or tag_vocab_size == 1:
            return "baseline-transformer"
        return "supervised" if self.lam > 0 else "unsupervised"


@dataclass
class Posterior:
    """Per-position tag distributions q(z); mask flags real positions."""
    probs: np.ndarray  # [B, T, Vz]
    mask: np.ndarray   # [B, T]


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def lr_schedule(step: int, peak_lr: float, warmup: int) -> float:
    """Linear warmup to peak at step == warmup, then inverse-sqrt decay."""
    if step < 1:
        raise ValueError(f"schedule step must be >= 1, got {step}")
    return peak_lr * min(step / warmup, np.sqrt(warmup / step))


def adam_update(param, grad, m, v, step, lr,
                beta1=0.9, beta2=0.98, eps=1e-9):
    """One bias-corrected Adam update; mutates param/m/v in place."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1 ** step)
    vhat = v / (1.0 - beta2 ** step)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


class Adam:
    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.98, eps=1e-9):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float, clip_norm: float = 0.0) -> float:
        """Apply one update from the accumulated gradients; returns grad norm."""
        sq = 0.0
        for p in self.params.values():
            if p.grad is not None:
                sq += float((p.grad * p.grad).sum())
        gnorm = float(np.sqrt(sq))
        factor = 1.0
        if clip_norm > 0.0 and gnorm > clip_norm:
            factor = clip_norm / gnorm
        self.t += 1
        for name, p in self.params.items():
            g = p.grad_or_zeros() * factor
            adam_update(p.data, g, self.m[name], self.v[name], self.t, lr,
                        self.beta1, self.beta2, self.eps)
            p.zero_grad()
        return gnorm

    def state_arrays(self) -> dict:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state_arrays(self, arrays: dict, t: int):
        for k in self.m:
            self.m[k] = np.ascontiguousarray(arrays[f"adam.m.{k}"])
            self.v[k] = np.ascontiguousarray(arrays[f"adam.v.{k}"])
        self.t = t


# ---------------------------------------------------------------------------
# E-step, regularization, bounds
# ---------------------------------------------------------------------------

@dataclass
class EvalPass:
    """Teacher-forced eval-mode quantities reused across EM bookkeeping."""
    tag_lp: np.ndarray        # [B, T, Vz]
    word_at_gold: np.ndarray  # [B, T, Vz]
    joint: np.ndarray         # [B, T, Vz]
    marginal: np.ndarray      # [B, T]
    mask: np.ndarray          # [B, T]

    @property
    def nll_total(self) -> float:
        return -float((self.marginal * self.mask).sum())


def eval_forward(model: LatentTagTransformer, batch: Batch) -> EvalPass:
    with no_grad():
        tag_lp, word_lp = model.forward_teacher(
            batch.src, batch.src_mask, batch.tgt_in, train=False)
    vz = model.config.tag_vocab_size
    ids3 = np.broadcast_to(batch.tgt_out[:, :, None], batch.tgt_out.shape + (vz,))
    word_at_gold = np.take_along_axis(
        word_lp.data, ids3[..., None], axis=-1)[..., 0].copy()
    joint = tag_lp.data + word_at_gold
    m = joint.max(axis=-1)
    marginal = m + np.log(np.exp(joint - m[..., None]).sum(axis=-1))
    return EvalPass(tag_lp.data, word_at_gold, joint, marginal, batch.out_mask)


def posterior_from_pass(fwd: EvalPass) -> Posterior:
    q = np.exp(fwd.joint - fwd.marginal[..., None])
    q /= q.sum(axis=-1, keepdims=True)
    return Posterior(probs=q, mask=fwd.mask)


def e_step(model: LatentTagTransformer, batch: Batch) -> Posterior:
    """Exact per-position posteriors q(z) ∝ P(z|.) P(y|z,.) under teacher forcing."""
    return posterior_from_pass(eval_forward(model, batch))


def regularize_posterior(q: Posterior, gold_tags: np.ndarray, lam: float,
                         sup_mask: np.ndarray | None = None) -> Posterior:
    """Blend toward the gold one-hot on supervised positions.

    Positions outside ``sup_mask`` (the EOS prediction step has no gold tag)
    keep the exact posterior.
    """
    vz = q.probs.shape[-1]
    if sup_mask is None:
        sup_mask = q.mask
    sup = sup_mask > 0
    if gold_tags[sup].size and gold_tags[sup].max() >= vz:
        raise ConfigError(
            f"gold tag id {gold_tags[sup].max()} >= tag vocabulary size {vz}")
    onehot = np.zeros_like(q.probs)
    np.put_along_axis(onehot, gold_tags[..., None], 1.0, axis=-1)
    blended = (1.0 - lam) * q.probs + lam * onehot
    probs = np.where(sup[..., None], blended, q.probs)
    return Posterior(probs=probs, mask=q.mask)


def lower_bound_from_pass(fwd: EvalPass, qp: Posterior) -> float:
    """Sum over real positions of E_q'[log P(z,y|.)] + H(q')."""
    p = qp.probs
    ent = -np.where(p > 0, p * np.log(np.maximum(p, 1e-300)), 0.0).sum(axis=-1)
    per_pos = (p * fwd.joint).sum(axis=-1) + ent
    return float((per_pos * fwd.mask).sum())


def lower_bound(model: LatentTagTransformer, batch: Batch, qp: Posterior) -> float:
    return lower_bound_from_pass(eval_forward(model, batch), qp)


# ---------------------------------------------------------------------------
# losses and M-step
# ---------------------------------------------------------------------------

def _word_at_gold_tensor(word_lp: Tensor, batch: Batch, vz: int) -> Tensor:
    ids3 = np.broadcast_to(batch.tgt_out[:, :, None],
                           batch.tgt_out.shape + (vz,)).copy()
    return ad.gather_last(word_lp, ids3)


def em_loss(model: LatentTagTransformer, batch: Batch, qp: Posterior,
            train: bool, drop_rng: Rng | None) -> Tensor:
    """-(1/tokens) sum_n sum_z q'(z) [log P(z|.) + log P(y_n|z,.)].

    The entropy of q' is constant in the parameters and therefore omitted;
    q' itself is data here, no gradient flows into it.
    """
    tag_lp, word_lp = model.forward_teacher(
        batch.src, batch.src_mask, batch.tgt_in, train=train, drop_rng=drop_rng)
    joint = ad.add(tag_lp, _word_at_gold_tensor(word_lp, batch, qp.probs.shape[-1]))
    weights = ad.constant(qp.probs * batch.out_mask[..., None])
    return ad.scale(ad.sum_all(ad.mul(joint, weights)), -1.0 / batch.n_tokens)


def marginal_nll_loss(model: LatentTagTransformer, batch: Batch,
                      train: bool, drop_rng: Rng | None) -> Tensor:
    """-(1/tokens) sum_n log sum_z P(z|.) P(y_n|z,.), the direct objective."""
    tag_lp, word_lp = model.forward_teacher(
        batch.src, batch.src_mask, batch.tgt_in, train=train, drop_rng=drop_rng)
    vz = model.config.tag_vocab_size
    joint = ad.add(tag_lp, _word_at_gold_tensor(word_lp, batch, vz))
    marg = ad.logsumexp(joint, axis=-1)
    masked = ad.mul(marg, ad.constant(batch.out_mask))
    return ad.scale(ad.sum_all(masked), -1.0 / batch.n_tokens)


def m_step(model: LatentTagTransformer, batch: Batch, qp: Posterior,
           optimizer: Adam, lr: float, clip_norm: float = 5.0,
           drop_rng: Rng | None = None, objective: str = "em") -> float:
    """One gradient step on the chosen objective; returns the loss value."""
    with Graph() as graph:
        if objective == "em":
            loss = em_loss(model, batch, qp, train=True, drop_rng=drop_rng)
        else:
            loss = marginal_nll_loss(model, batch, train=True, drop_rng=drop_rng)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(
                f"non-finite training loss {value} (objective={objective}, "
                f"batch of {batch.size} sentences)")
        graph.backward(loss)
    optimizer.step(lr, clip_norm=clip_norm)
    return value


def batch_tag_accuracy(q: Posterior, batch: Batch) -> float:
    pred = q.probs.argmax(axis=-1)
    sup = batch.sup_mask > 0
    if not sup.any():
        return 0.0
    return float((pred[sup] == batch.tags[sup]).mean())


def train_batch(model: LatentTagTransformer, batch: Batch, config: TrainConfig,
                optimizer: Adam, epoch: int = 1) -> list[dict]:
    """K EM iterations on one batch; one metrics record per inner step."""
    records = []
    fwd = eval_forward(model, batch)
    for k in range(1, config.k + 1):
        t0 = time.perf_counter()
        q = posterior_from_pass(fwd)
        tag_acc = batch_tag_accuracy(q, batch)
        qp = regularize_posterior(q, batch.tags, config.lam, batch.sup_mask)
        lr = lr_schedule(optimizer.t + 1, config.peak_lr, config.warmup_steps)
        drop_rng = Rng(config.seed, (_DROP_STREAM, optimizer.t + 1))
        m_step(model, batch, qp, optimizer, lr, config.clip_norm,
               drop_rng, config.objective)
        fwd = eval_forward(model, batch)  # posterior source for the next k
        records.append({
            "epoch": epoch,
            "k": k,
            "nll": fwd.nll_total / batch.n_tokens,
            "lower_bound": lower_bound_from_pass(fwd, qp) / batch.n_tokens,
            "tag_acc": tag_acc,
            "lr": lr,
            "wall_ms": (time.perf_counter() - t0) * 1000.0,
        })
    return records


# ---------------------------------------------------------------------------
# full training runs
# ---------------------------------------------------------------------------

STEP_COLUMNS = ["epoch", "k", "nll", "lower_bound", "tag_acc", "lr", "wall_ms"]
EPOCH_COLUMNS = ["epoch", "train_nll", "val_nll", "val_tag_acc", "val_bleu",
                 "wall_ms"]


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else f"{v:.10g}"


def _write_log(path, columns, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(columns) + "\n")
        for row in rows:
            fh.write("\t".join(_fmt(row[c]) for c in columns) + "\n")


def read_log(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        rows = []
        for line in fh:
            vals = line.split()
            row = {}
            for c, v in zip(header, vals):
                row[c] = int(v) if c in ("epoch", "k") else float(v)
            rows.append(row)
    return rows


@dataclass
class TrainResult:
    checkpoint_path: str
    epoch_rows: list[dict] = field(default_factory=list)
    step_rows: list[dict] = field(default_factory=list)


def evaluate_nll(model, batches) -> tuple[float, float]:
    """(per-token NLL, tag accuracy) over a list of batches."""
    total, tokens = 0.0, 0
    acc_num, acc_den = 0.0, 0
    for b in batches:
        fwd = eval_forward(model, b)
        total += fwd.nll_total
        tokens += b.n_tokens
        q = posterior_from_pass(fwd)
        sup = b.sup_mask > 0
        acc_num += float((q.probs.argmax(-1)[sup] == b.tags[sup]).sum())
        acc_den += int(sup.sum())
    return total / max(tokens, 1), acc_num / max(acc_den, 1)


def validation_bleu(model, examples, src_vocab, tgt_vocab, limit: int) -> float:
    from .decoding import greedy_decode  # local import, no cycle

    subset = examples[:limit]
    if not subset:
        return 0.0
    hyps, refs = [], []
    for ex in subset:
        src_ids = [BOS_ID] + src_vocab.encode(ex.src) + [EOS_ID]
        out = greedy_decode(model, src_ids, max_len=model.config.max_len - 1)
        hyps.append(tgt_vocab.decode(out.content_tokens()))
        refs.append(list(ex.tgt))
    return metrics_mod.bleu(hyps, refs)


def train(model: LatentTagTransformer, splits: dict, src_vocab, tgt_vocab,
          tag_names, config: TrainConfig, out_dir,
          log_fn=None) -> TrainResult:
    """Run the full schedule; deterministic given config.seed.

    Writes steps.tsv / epochs.tsv / checkpoint.bin under ``out_dir`` and
    resumes from checkpoint.bin when one is already present.
    """
    config.validate()
    if config.lam > 0 and config.objective == "em":
        for ex in splits["train"]:
            if len(ex.tags) != len(ex.tgt):
                raise ConfigError("lambda > 0 requires aligned gold tags")
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, "checkpoint.bin")
    steps_path = os.path.join(out_dir, "steps.tsv")
    epochs_path = os.path.join(out_dir, "epochs.tsv")

    optimizer = Adam(model.params, config.beta1, config.beta2, config.adam_eps)
    start_epoch = 1
    step_rows: list[dict] = []
    epoch_rows: list[dict] = []
    if os.path.exists(ckpt_path):
        loaded, meta, extras = LatentTagTransformer.load(ckpt_path)
        model.load_param_arrays({k: p.data for k, p in loaded.params.items()})
        optimizer.load_state_arrays(extras, int(meta["train_state"]["step"]))
        start_epoch = int(meta["train_state"]["epochs_done"]) + 1
        step_rows = [r for r in read_log(steps_path) if r["epoch"] < start_epoch]
        epoch_rows = [r for r in read_log(epochs_path) if r["epoch"] < start_epoch]
        if log_fn:
            log_fn(f"resuming from epoch {start_epoch}")

    valid_batches = make_batches(splits["valid"], src_vocab, tgt_vocab,
                                 config.tokens_per_batch, seed=0) \
        if splits.get("valid") else []
    label = config.mode_label(model.config.tag_vocab_size)

    for epoch in range(start_epoch, config.epochs + 1):
        t0 = time.perf_counter()
        epoch_seed = config.seed * 100003 + epoch
        batches = make_batches(splits["train"], src_vocab, tgt_vocab,
                               config.tokens_per_batch, seed=epoch_seed)
        train_nll_num, train_nll_den = 0.0, 0
        for batch in batches:
            recs = train_batch(model, batch, config, optimizer, epoch=epoch)
            step_rows.extend(recs)
            train_nll_num += recs[-1]["nll"] * batch.n_tokens
            train_nll_den += batch.n_tokens
        val_nll, val_acc = evaluate_nll(model, valid_batches) \
            if valid_batches else (0.0, 0.0)
        val_bleu = validation_bleu(model, splits.get("valid", []), src_vocab,
                                   tgt_vocab, config.val_bleu_sentences) \
            if splits.get("valid") else 0.0
        row = {
            "epoch": epoch,
            "train_nll": train_nll_num / max(train_nll_den, 1),
            "val_nll": val_nll,
            "val_tag_acc": val_acc,
            "val_bleu": val_bleu,
            "wall_ms": (time.perf_counter() - t0) * 1000.0,
        }
        epoch_rows.append(row)
        if log_fn:
            log_fn(f"[{label}] epoch {epoch}: train_nll={row['train_nll']:.4f} "
                   f"val_nll={val_nll:.4f} val_tag_acc={val_acc:.3f} "
                   f"val_bleu={val_bleu:.2f}")
        _write_log(steps_path, STEP_COLUMNS, step_rows)
        _write_log(epochs_path, EPOCH_COLUMNS, epoch_rows)
        model.save(ckpt_path, extra_meta={
            "train_config": asdict(config),
            "run_mode": label,
            "train_state": {"step": optimizer.t, "epochs_done": epoch},
            "src_vocab": src_vocab.to_lines(),
            "tgt_vocab": tgt_vocab.to_lines(),
            "tag_names": list(tag_names),
        }, extra_arrays=optimizer.state_arrays())
    return TrainResult(ckpt_path, epoch_rows, step_rows)
