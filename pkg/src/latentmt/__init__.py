"""Latent-tag translation: exact per-position tag marginalization, EM training."""

from .autodiff import Graph, Rng, Tensor, gradient_check, no_grad
from .corpus import ParallelExample, SynthGrammar, Vocab, default_grammar, generate
from .decoding import (DecodeOutput, Hypothesis, beam_search, constrained_decode,
                       diverse_translate, greedy_decode, top1_tags)
from .metrics import EvalReport, bleu, distinct1, levenshtein, tag_accuracy
from .model import (LatentStepOutput, LatentTagTransformer, Memory, ModelConfig,
                    marginal_word_logprobs, tag_posterior)
from .training import (Adam, Posterior, TrainConfig, adam_update, e_step,
                       lower_bound, lr_schedule, m_step, regularize_posterior,
                       train, train_batch)

__version__ = "0.1.0"
