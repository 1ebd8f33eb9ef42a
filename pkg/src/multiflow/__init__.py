"""Multi-flow sequence-to-sequence generation on a small numpy autodiff core.

Infilling generation with [ATTN] query slots, noise-aware training,
span-by-span generation over a t-statistic span vocabulary, fragment
sampling for pretraining, and insert/drop decoding.
"""

from .data import (Batch, FragmentSamplingConfig, NoiseConfig, TrainingExample, apply_noise, assemble_example,
                   assemble_pair, batch, collate, sample_fragments)
from .decode import DecodeConfig, DecodeState, Hypothesis, beam_decode, greedy_decode, step
from .metrics import EvalPair, bleu, distinct_n, evaluate, rouge_l, rouge_n
from .model import FlowMasks, LossBreakdown, ModelConfig, MultiFlowModel, build_masks, compute_loss
from .optim import AdamState, OptimizerConfig, adam_step, learning_rate
from .spans import SpanVocab, build_span_vocab, count_ngrams, segment_spans, t_statistic
from .tensor import Tensor, backward
from .text import Vocab, build_vocab, encode, load_corpus

__version__ = "0.1.0"
