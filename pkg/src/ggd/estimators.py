"""scikit-learn style wrappers around the training loops.

``X`` and ``y`` are sequences of token-id sequences. A trailing EOS is
appended where missing, so plain lists of word ids are accepted.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import Corpus
from .decoding import beam_search, greedy_decode_batch
from .metrics import avg_log_likelihood, corpus_bleu
from .model import EOS, InputError, ModelConfig, ModelParams, log_prob_batch
from .training import MetricsLog, TrainConfig, ggd_train, train_mle


def check_sequences(X, name: str = "X") -> list[list[int]]:
    """Validate a collection of id sequences and terminate each with EOS."""
    if isinstance(X, (str, bytes)) or not hasattr(X, "__len__"):
        raise InputError(f"{name} must be a sequence of id sequences")
    out = []
    for i, s in enumerate(X):
        ids = [int(v) for v in np.asarray(s, dtype=np.int64).ravel()]
        if any(v < 0 for v in ids):
            raise InputError(f"{name}[{i}] contains a negative id")
        if not ids or ids[-1] != EOS:
            ids.append(EOS)
        out.append(ids)
    if not out:
        raise InputError(f"{name} is empty")
    return out


def _vocab_size(seqs, given: int | None) -> int:
    need = max(max(s) for s in seqs) + 1
    if given is None:
        return max(need, EOS + 2)
    if need > given:
        raise InputError(f"id {need - 1} out of range for vocabulary of size {given}")
    return given


def _decode(params: ModelParams, X: list[list[int]], beam_size: int) -> list[list[int]]:
    if beam_size <= 1:
        return [r.tokens for r in greedy_decode_batch(X, params)]
    return [beam_search(x, params, beam_size).tokens for x in X]


class _Seq2SeqMixin:
    beam_size: int

    def predict(self, X) -> list[list[int]]:
        """Decoded translations (greedy when ``beam_size == 1``)."""
        check_is_fitted(self, "params_")
        return _decode(self.params_, check_sequences(X), self.beam_size)

    def score(self, X, y) -> float:
        """Corpus BLEU of :meth:`predict` against ``y``."""
        y = check_sequences(y, "y")
        return corpus_bleu(zip(self.predict(X), y))

    def log_prob(self, X, y) -> np.ndarray:
        """``log p(y_i | X_i)`` for every pair."""
        check_is_fitted(self, "params_")
        X, y = check_sequences(X), check_sequences(y, "y")
        return log_prob_batch(y, X, self.params_).data.copy()

    def avg_log_likelihood(self, X, y) -> float:
        check_is_fitted(self, "params_")
        return avg_log_likelihood(self.params_, list(zip(check_sequences(X), check_sequences(y, "y"))))


class Seq2SeqTranslator(_Seq2SeqMixin, BaseEstimator):
    """Attention GRU translator trained by maximum likelihood.

    Parameters mirror :class:`~ggd.model.ModelConfig` and the MLE fields of
    :class:`~ggd.training.TrainConfig`. Fitted attributes: ``params_``,
    ``log_``, ``config_``.
    """

    def __init__(
        self,
        embed_dim: int = 32,
        hidden_dim: int = 64,
        attention_dim: int = 32,
        src_vocab_size: int | None = None,
        tgt_vocab_size: int | None = None,
        optimizer: str = "adadelta",
        lr: float | None = None,
        batch_size: int = 64,
        max_updates: int = 1000,
        eval_every: int = 100,
        patience: int = 10,
        eval_size: int | None = None,
        beam_size: int = 1,
        seed: int = 0,
    ):
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.attention_dim = attention_dim
        self.src_vocab_size = src_vocab_size
        self.tgt_vocab_size = tgt_vocab_size
        self.optimizer = optimizer
        self.lr = lr
        self.batch_size = batch_size
        self.max_updates = max_updates
        self.eval_every = eval_every
        self.patience = patience
        self.eval_size = eval_size
        self.beam_size = beam_size
        self.seed = seed

    def fit(self, X, y, X_valid=None, y_valid=None) -> "Seq2SeqTranslator":
        X, y = check_sequences(X), check_sequences(y, "y")
        if len(X) != len(y):
            raise InputError(f"{len(X)} sources vs {len(y)} targets")
        if X_valid is None:
            X_valid, y_valid = X, y
        else:
            X_valid, y_valid = check_sequences(X_valid, "X_valid"), check_sequences(y_valid, "y_valid")
        self.config_ = ModelConfig(
            src_vocab=_vocab_size(X + X_valid, self.src_vocab_size),
            tgt_vocab=_vocab_size(y + y_valid, self.tgt_vocab_size),
            embed_dim=self.embed_dim,
            hidden_dim=self.hidden_dim,
            attention_dim=self.attention_dim,
            seed=self.seed,
        )
        cfg = TrainConfig(
            optimizer=self.optimizer,
            lr=self.lr,
            batch_size=self.batch_size,
            max_updates=self.max_updates,
            eval_every=self.eval_every,
            patience=self.patience,
            eval_size=self.eval_size,
            seed=self.seed,
        )
        init = ModelParams.initialize(self.config_)
        self.params_, self.log_ = train_mle(init, Corpus(X, y), Corpus(X_valid, y_valid, "valid"), cfg)
        return self


class GumbelGreedyTranslator(_Seq2SeqMixin, BaseEstimator):
    """Fine-tunes a pretrained translator with Gumbel-Greedy Decoding.

    ``pretrained`` is a fitted :class:`Seq2SeqTranslator` or a
    :class:`~ggd.model.ModelParams`. It seeds both the discriminator and the
    generator. Fitted attributes: ``params_`` (the generator),
    ``discriminator_``, ``log_``, ``best_bleu_``, ``final_bleu_``.
    """

    def __init__(
        self,
        pretrained=None,
        tau: float = 0.5,
        estimator: str = "st-gumbel",
        generator_mode: str = "sampling",
        entropy_reg: bool = True,
        n_g: int = 10,
        n_d: int = 1,
        optimizer: str = "rmsprop",
        lr: float | None = 1e-4,
        disc_optimizer: str = "rmsprop",
        disc_lr: float = 1e-4,
        batch_size: int = 64,
        max_updates: int = 500,
        eval_every: int = 50,
        patience: int = 100,
        eval_size: int | None = None,
        beam_size: int = 1,
        seed: int = 0,
    ):
        self.pretrained = pretrained
        self.tau = tau
        self.estimator = estimator
        self.generator_mode = generator_mode
        self.entropy_reg = entropy_reg
        self.n_g = n_g
        self.n_d = n_d
        self.optimizer = optimizer
        self.lr = lr
        self.disc_optimizer = disc_optimizer
        self.disc_lr = disc_lr
        self.batch_size = batch_size
        self.max_updates = max_updates
        self.eval_every = eval_every
        self.patience = patience
        self.eval_size = eval_size
        self.beam_size = beam_size
        self.seed = seed

    def _pretrained_params(self) -> ModelParams:
        p = self.pretrained
        if isinstance(p, ModelParams):
            return p
        if isinstance(p, Seq2SeqTranslator):
            check_is_fitted(p, "params_")
            return p.params_
        raise InputError("pretrained must be a fitted Seq2SeqTranslator or ModelParams")

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            optimizer=self.optimizer,
            lr=self.lr,
            disc_optimizer=self.disc_optimizer,
            disc_lr=self.disc_lr,
            tau=self.tau,
            batch_size=self.batch_size,
            n_g=self.n_g,
            n_d=self.n_d,
            entropy_reg=self.entropy_reg,
            estimator=self.estimator,
            generator_mode=self.generator_mode,
            max_updates=self.max_updates,
            eval_every=self.eval_every,
            patience=self.patience,
            eval_size=self.eval_size,
            seed=self.seed,
        )

    def fit(self, X, y, X_valid=None, y_valid=None) -> "GumbelGreedyTranslator":
        base = self._pretrained_params()
        X, y = check_sequences(X), check_sequences(y, "y")
        if X_valid is None:
            X_valid, y_valid = X, y
        else:
            X_valid, y_valid = check_sequences(X_valid, "X_valid"), check_sequences(y_valid, "y_valid")
        Corpus(X, y).validate(base.config.src_vocab, base.config.tgt_vocab)
        valid = Corpus(X_valid, y_valid, "valid")
        valid.validate(base.config.src_vocab, base.config.tgt_vocab)
        res = ggd_train(Corpus(X, y), valid, base, self.train_config(), MetricsLog())
        self.params_ = res.generator
        self.discriminator_ = res.discriminator
        self.log_ = res.log
        self.best_bleu_, self.final_bleu_ = res.best_bleu, res.final_bleu
        return self
