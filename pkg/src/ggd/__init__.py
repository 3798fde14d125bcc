"""Gumbel-greedy decoding for attention-based sequence-to-sequence models.

Everything runs on a small numpy reverse-mode autodiff engine
(:mod:`ggd.autodiff`). The main entry points are:

* :mod:`ggd.model` -- GRU encoder-decoder with additive attention
* :mod:`ggd.gumbel` -- Gumbel-Max / Gumbel-Softmax / straight-through tokens
* :mod:`ggd.decoding` -- greedy, sampling and beam decoders
* :mod:`ggd.training` -- teacher forcing, REINFORCE and GGD loops
* :mod:`ggd.estimators` -- scikit-learn style wrappers
"""

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .data import Corpus, SyntheticTaskSpec, Vocab, gen_synthetic
from .estimators import GumbelGreedyTranslator, Seq2SeqTranslator
from .model import EOS, PAD, UNK, ModelConfig, ModelParams
from .training import TrainConfig, ggd_train, train_mle, train_reinforce

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "Corpus",
    "EOS",
    "GumbelGreedyTranslator",
    "ModelConfig",
    "ModelParams",
    "PAD",
    "Seq2SeqTranslator",
    "SyntheticTaskSpec",
    "TrainConfig",
    "UNK",
    "Vocab",
    "gen_synthetic",
    "ggd_train",
    "load_checkpoint",
    "save_checkpoint",
    "train_mle",
    "train_reinforce",
]
