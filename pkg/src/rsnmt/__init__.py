"""Encoder-decoder Transformer NMT with recurrently stacked layers, on numpy."""

from .data import ParallelCorpus, Vocabulary, build_vocab, make_batches, subsample
from .decoding import DecodeConfig, beam_decode, greedy_decode, recurrence_sweep, translate
from .evaluation import AttentionTrace, attention_entropy, bleu, bootstrap_significance, export_attention
from .model import (ConfigError, ModelConfig, ModelWeights, Recurrent, Vanilla, build_model,
                    count_parameters)
from .tensor import Tensor, Tape, backward, no_grad, precision
from .training import (Checkpoint, TrainConfig, average_checkpoints, load_checkpoint, load_model,
                       save_checkpoint, save_model, train)
from .transfer import DistillConfig, TransferConfig, back_translate, distill_corpus, init_from_teacher

__version__ = "0.1.0"
