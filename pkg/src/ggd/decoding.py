"""Greedy, sampling and beam-search decoders, and the GumbelDec wrapper.

:func:`rollout` is the batched, tape-aware generator used for training: it
runs a decoder step by step and turns every selected word into a
straight-through token whose backward pass goes through a relaxed softmax.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .gumbel import (
    GumbelTrajectory,
    _check_tau,
    gumbel_noise,
    gumbel_softmax,
    infer_noise,
    relaxed_softmax,
)
from .model import (
    EOS,
    EncoderOutputs,
    DecoderState,
    ModelParams,
    decoder_step,
    encode_batch,
    initial_state,
    one_hot,
    start_token,
)

MODES = ("sampling", "greedy", "beam")
ESTIMATORS = ("st-gumbel", "st")


def default_max_len(x: Sequence[int]) -> int:
    n = len(x) - 1 if len(x) and x[-1] == EOS else len(x)
    return 2 * n + 5


@dataclass
class DecodeResult:
    tokens: list[int]
    logits: list[np.ndarray]
    log_prob: float
    trajectory: GumbelTrajectory | None = None

    @property
    def finished(self) -> bool:
        return bool(self.tokens) and self.tokens[-1] == EOS


def _log_softmax(a: np.ndarray) -> np.ndarray:
    z = a - a.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _take_rows(enc: EncoderOutputs, rows: np.ndarray) -> EncoderOutputs:
    return EncoderOutputs(
        Tensor(enc.annotations.data[rows]),
        Tensor(enc.keys.data[rows]),
        enc.mask[rows],
        Tensor(enc.init_hidden.data[rows]),
    )


def _caps(x_batch, max_len) -> np.ndarray:
    if max_len is None:
        return np.array([default_max_len(x) for x in x_batch])
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    return np.full(len(x_batch), int(max_len))


def _decode_loop(
    params: ModelParams,
    x_batch: Sequence[Sequence[int]],
    choose: Callable[[int, np.ndarray], np.ndarray],
    max_len: int | None,
) -> list[DecodeResult]:
    enc = encode_batch(x_batch, params)
    B, K = len(x_batch), params.config.tgt_vocab
    caps = _caps(x_batch, max_len)
    state, prev = initial_state(enc), start_token(B, K)
    done = np.zeros(B, dtype=bool)
    results = [DecodeResult([], [], 0.0) for _ in range(B)]
    for t in range(int(caps.max())):
        state, logits = decoder_step(state, prev, enc, params)
        a = logits.data
        ids = np.asarray(choose(t, a), dtype=np.int64)
        lsm = _log_softmax(a)
        for i in np.flatnonzero(~done):
            r = results[i]
            r.tokens.append(int(ids[i]))
            r.logits.append(a[i].copy())
            r.log_prob += float(lsm[i, ids[i]])
        done |= (ids == EOS) | (t + 1 >= caps)
        if done.all():
            break
        prev = one_hot(ids, K)
    return results


def greedy_decode_batch(x_batch, params: ModelParams, max_len: int | None = None) -> list[DecodeResult]:
    return _decode_loop(params, x_batch, lambda t, a: np.argmax(a, axis=-1), max_len)


def greedy_decode(x: Sequence[int], params: ModelParams, max_len: int | None = None) -> DecodeResult:
    """Pick the most probable word at every step."""
    return greedy_decode_batch([list(x)], params, max_len)[0]


def sample_decode_batch(
    x_batch,
    params: ModelParams,
    rng: np.random.Generator,
    max_len: int | None = None,
    tau: float = 1.0,
    noise_fn: Callable[[tuple[int, ...]], np.ndarray] | None = None,
) -> list[DecodeResult]:
    ro = rollout(params, x_batch, mode="sampling", tau=tau, rng=rng, max_len=max_len, noise_fn=noise_fn)
    return ro.results()


def sample_decode(
    x: Sequence[int],
    params: ModelParams,
    max_len: int | None = None,
    rng: np.random.Generator | None = None,
    tau: float = 1.0,
    noise_fn: Callable[[tuple[int, ...]], np.ndarray] | None = None,
) -> DecodeResult:
    """Ancestral sampling written as greedy decoding of Gumbel-perturbed logits.

    ``noise_fn(shape)`` replaces the Gumbel draws (a testing hook).
    """
    if rng is None and noise_fn is None:
        raise ValueError("sample_decode needs an rng")
    return sample_decode_batch([list(x)], params, rng, max_len, tau, noise_fn)[0]


def beam_search(
    x: Sequence[int], params: ModelParams, beam_size: int, max_len: int | None = None
) -> DecodeResult:
    """Keep the ``beam_size`` best prefixes by total log-probability.

    A hypothesis that emits EOS is set aside and shrinks the live beam by
    one; hypotheses still live at the length cap are finished as-is. The
    finished hypothesis with the highest raw log-probability is returned.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    cap = int(_caps([x], max_len)[0])
    enc1 = encode_batch([list(x)], params)
    K = params.config.tgt_vocab
    enc = enc1
    state, prev = initial_state(enc), start_token(1, K)
    live: list[tuple[list[int], list[np.ndarray], float]] = [([], [], 0.0)]
    finished: list[tuple[list[int], list[np.ndarray], float]] = []
    for t in range(cap):
        state, logits = decoder_step(state, prev, enc, params)
        a = logits.data
        scores = np.array([h[2] for h in live])[:, None] + _log_softmax(a)
        width = beam_size - len(finished)
        order = np.argsort(-scores.reshape(-1), kind="stable")[:width]
        new_live, rows, ids = [], [], []
        for flat in order:
            r, k = divmod(int(flat), K)
            toks, logs, _ = live[r]
            hyp = (toks + [k], logs + [a[r].copy()], float(scores[r, k]))
            if k == EOS or t + 1 >= cap:
                finished.append(hyp)
            else:
                new_live.append(hyp)
                rows.append(r)
                ids.append(k)
        live = new_live
        if not live:
            break
        rows_a = np.array(rows)
        enc = _take_rows(enc, rows_a)
        state = DecoderState(Tensor(state.hidden.data[rows_a]))
        prev = one_hot(ids, K)
    best = max(finished, key=lambda h: h[2])
    return DecodeResult(best[0], best[1], best[2])


# ------------------------------------------------------------ generator


@dataclass
class Rollout:
    """A batch of decoded sentences with their straight-through tokens.

    ``tokens[t]`` is the ``(B, K)`` token fed back at step ``t + 1`` (value:
    one-hot; gradient: relaxed softmax when recorded on a tape).
    """

    tokens: list[Tensor]
    ids: np.ndarray  # (B, T)
    mask: np.ndarray  # (B, T) bool, True up to and including EOS / cap
    logits: np.ndarray  # (B, T, K)
    noise: np.ndarray  # (B, T, K)
    soft: np.ndarray  # (B, T, K)
    tau: float
    log_probs: np.ndarray = field(default=None)  # (B,)

    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    def sequences(self) -> list[list[int]]:
        return [list(map(int, self.ids[i, :n])) for i, n in enumerate(self.lengths())]

    def trajectory(self, i: int) -> GumbelTrajectory:
        n = int(self.lengths()[i])
        return GumbelTrajectory(
            hard=list(map(int, self.ids[i, :n])),
            soft=[self.soft[i, t] for t in range(n)],
            noise=[self.noise[i, t] for t in range(n)],
            logits=[self.logits[i, t] for t in range(n)],
            tau=self.tau,
        )

    def results(self) -> list[DecodeResult]:
        out = []
        for i, n in enumerate(self.lengths()):
            traj = self.trajectory(i)
            out.append(DecodeResult(traj.hard, traj.logits, float(self.log_probs[i]), traj))
        return out


def rollout(
    params: ModelParams,
    x_batch: Sequence[Sequence[int]],
    mode: str = "sampling",
    tau: float = 0.5,
    rng: np.random.Generator | None = None,
    estimator: str = "st-gumbel",
    max_len: int | None = None,
    beam_size: int = 4,
    noise_fn: Callable[[tuple[int, ...]], np.ndarray] | None = None,
) -> Rollout:
    """Decode a batch and pair every word with Gumbel noise and a relaxed token.

    * ``sampling``: noise ``g ~ Gumbel`` is drawn and ``y = argmax(g + a)``.
    * ``greedy`` / ``beam``: words come from the deterministic decoder and
      ``g`` is inferred so that ``argmax(g + a)`` reproduces them.

    The relaxed token is ``softmax((g + a) / tau)`` for ``st-gumbel`` and
    ``softmax(a / tau)`` for plain ``st``. Run inside a :class:`~ggd.autodiff.Tape`
    to get straight-through gradients with respect to ``params``.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown estimator {estimator!r}; expected one of {ESTIMATORS}")
    tau = _check_tau(tau)
    if rng is None and not (mode == "sampling" and noise_fn is not None):
        raise ValueError("rollout needs an rng")
    B, K = len(x_batch), params.config.tgt_vocab
    caps = _caps(x_batch, max_len)
    forced = None
    if mode == "beam":
        seqs = [beam_search(x, params, beam_size, int(c)).tokens for x, c in zip(x_batch, caps)]
        forced = np.full((B, max(map(len, seqs))), EOS, dtype=np.int64)
        for i, s in enumerate(seqs):
            forced[i, : len(s)] = s

    enc = encode_batch(x_batch, params)
    state, prev = initial_state(enc), start_token(B, K)
    done = np.zeros(B, dtype=bool)
    tokens, ids_l, mask_l, logit_l, noise_l, soft_l = [], [], [], [], [], []
    log_probs = np.zeros(B)
    T = int(caps.max()) if forced is None else forced.shape[1]
    for t in range(T):
        state, logits = decoder_step(state, prev, enc, params)
        a = logits.data
        if mode == "sampling":
            g = noise_fn(a.shape) if noise_fn is not None else gumbel_noise(rng, a.shape)
            ids = np.argmax(a + g, axis=-1)
        else:
            ids = np.argmax(a, axis=-1) if forced is None else forced[:, t]
            g = infer_noise(ids, a, rng)
        if estimator == "st-gumbel":
            soft = gumbel_softmax(logits, g, tau)
        else:
            soft = relaxed_softmax(logits, None, tau)
        token = ad.straight_through(one_hot(ids, K), soft)
        active = ~done
        log_probs += np.where(active, _log_softmax(a)[np.arange(B), ids], 0.0)
        tokens.append(token)
        ids_l.append(ids)
        mask_l.append(active.copy())
        logit_l.append(a)
        noise_l.append(g)
        soft_l.append(soft.data)
        done |= (ids == EOS) | (t + 1 >= caps)
        if done.all():
            break
        prev = token
    return Rollout(
        tokens=tokens,
        ids=np.stack(ids_l, axis=1),
        mask=np.stack(mask_l, axis=1),
        logits=np.stack(logit_l, axis=1),
        noise=np.stack(noise_l, axis=1),
        soft=np.stack(soft_l, axis=1),
        tau=tau,
        log_probs=log_probs,
    )


def gumbel_dec_batch(
    mode: str,
    x_batch,
    params: ModelParams,
    tau: float,
    rng: np.random.Generator,
    beam_size: int = 4,
    max_len: int | None = None,
) -> list[GumbelTrajectory]:
    ro = rollout(params, x_batch, mode=mode, tau=tau, rng=rng, max_len=max_len, beam_size=beam_size)
    return [ro.trajectory(i) for i in range(len(x_batch))]


def gumbel_dec(
    mode: str,
    x: Sequence[int],
    params: ModelParams,
    tau: float,
    rng: np.random.Generator,
    beam_size: int = 4,
    max_len: int | None = None,
) -> tuple[list[int], list[np.ndarray], GumbelTrajectory]:
    """Decode ``x`` and return ``(Y, Y_soft, trajectory)``.

    Sampling draws the noise directly; greedy and beam decode first and infer
    the noise afterwards, then form ``Y_soft = softmax((g + a) / tau)``.
    """
    traj = gumbel_dec_batch(mode, [list(x)], params, tau, rng, beam_size, max_len)[0]
    return traj.hard, traj.soft, traj
