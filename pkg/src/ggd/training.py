"""Teacher forcing, REINFORCE and Gumbel-Greedy Decoding training loops.

GGD trains a generator ``phi`` to emit translations that the scoring
network ``theta`` (the discriminator) rates highly. The generator step
pushes the gradient of

    R(Y) = log p_theta(Y|X) - log p_phi'(Y|X)

with respect to the decoded words back through straight-through tokens;
``phi'`` is a frozen copy of ``phi`` taken before every step. The
discriminator step widens ``log p_theta(Y*|X) - log p_theta(Y|X)``.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Batch, ConfigError, Corpus, batch_iter
from .decoding import ESTIMATORS, greedy_decode_batch, rollout
from .gumbel import check_temperature
from .metrics import corpus_bleu, sentence_bleu_smoothed
from .model import ModelParams, encode_batch, log_prob_batch, one_hot, score_tokens
from .rng import stream

logger = logging.getLogger(__name__)

METRICS_COLUMNS = (
    "update",
    "phase",
    "objective",
    "greedy_bleu",
    "disc_score_real",
    "disc_score_gen",
    "tau",
    "seed",
)


# ---------------------------------------------------------------- optimizers


class Optimizer:
    kind = ""

    def __init__(self):
        self.state: dict[str, dict[str, np.ndarray]] = {}

    def _slot(self, name: str, shape, key: str) -> np.ndarray:
        slots = self.state.setdefault(name, {})
        if key not in slots:
            slots[key] = np.zeros(shape)
        elif slots[key].shape != tuple(shape):
            raise ad.ContractError(f"optimizer state for {name} has shape {slots[key].shape}, not {shape}")
        return slots[key]

    def step(self, params: ModelParams, grads: dict[Tensor, np.ndarray]) -> None:
        for name, t in params.tensors.items():
            g = grads.get(t)
            if g is None:
                continue
            if g.shape != t.shape:
                raise ad.ContractError(f"gradient for {name} has shape {g.shape}, not {t.shape}")
            t.data = t.data + self._delta(name, g)

    def _delta(self, name: str, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Adadelta(Optimizer):
    """Zeiler's Adadelta; the step size comes from running RMS ratios."""

    kind = "adadelta"

    def __init__(self, rho: float = 0.95, eps: float = 1e-6, lr: float = 1.0):
        super().__init__()
        self.rho, self.eps, self.lr = rho, eps, lr

    def _delta(self, name, g):
        eg2 = self._slot(name, g.shape, "g2")
        edx2 = self._slot(name, g.shape, "dx2")
        eg2 *= self.rho
        eg2 += (1.0 - self.rho) * g * g
        dx = -np.sqrt(edx2 + self.eps) / np.sqrt(eg2 + self.eps) * g
        edx2 *= self.rho
        edx2 += (1.0 - self.rho) * dx * dx
        return self.lr * dx


class RMSProp(Optimizer):
    kind = "rmsprop"

    def __init__(self, lr: float = 1e-3, rho: float = 0.9, eps: float = 1e-8):
        super().__init__()
        self.lr, self.rho, self.eps = lr, rho, eps

    def _delta(self, name, g):
        v = self._slot(name, g.shape, "v")
        v *= self.rho
        v += (1.0 - self.rho) * g * g
        return -self.lr * g / (np.sqrt(v) + self.eps)


def make_optimizer(kind: str, lr: float | None = None) -> Optimizer:
    if kind == "adadelta":
        return Adadelta() if lr is None else Adadelta(lr=lr)
    if kind == "rmsprop":
        return RMSProp() if lr is None else RMSProp(lr=lr)
    raise ConfigError(f"unknown optimizer {kind!r}")


def optimizer_step(kind: str, params: ModelParams, grads: dict, state: Optimizer | None = None, lr=None):
    """Apply one update of the named optimizer; returns the (stateful) optimizer."""
    opt = state if state is not None else make_optimizer(kind, lr)
    if opt.kind != kind:
        raise ConfigError(f"optimizer state is {opt.kind}, not {kind}")
    opt.step(params, grads)
    return opt


# ---------------------------------------------------------------- config


@dataclass
class TrainConfig:
    optimizer: str = "adadelta"
    lr: float | None = None
    disc_optimizer: str = "rmsprop"
    disc_lr: float = 1e-4
    tau: float = 0.5
    batch_size: int = 32
    n_g: int = 10
    n_d: int = 1
    entropy_reg: bool = True
    estimator: str = "st-gumbel"
    generator_mode: str = "sampling"
    beam_size: int = 4
    max_updates: int = 1000
    max_epochs: int = 100
    eval_every: int = 100
    patience: int = 10
    eval_size: int | None = None
    baseline_decay: float = 0.95
    bucket: int = 20
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.n_g <= 0 or self.n_d < 0:
            raise ConfigError("need n_g > 0 and n_d >= 0")
        check_temperature(self.tau)
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {self.estimator!r}")
        if self.generator_mode not in ("sampling", "greedy", "beam"):
            raise ConfigError(f"unknown generator mode {self.generator_mode!r}")
        if not 0.0 < self.baseline_decay < 1.0:
            raise ConfigError("baseline_decay must lie in (0, 1)")
        for kind in (self.optimizer, self.disc_optimizer):
            if kind not in ("adadelta", "rmsprop"):
                raise ConfigError(f"unknown optimizer {kind!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RewardBaseline:
    """Exponential moving average of recent mean rewards."""

    decay: float = 0.95
    value: float | None = None

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ConfigError("decay must lie in (0, 1)")

    def update(self, reward: float) -> None:
        if self.value is None:
            self.value = float(reward)
        else:
            self.value = self.decay * self.value + (1.0 - self.decay) * float(reward)


# ---------------------------------------------------------------- MLE / RL


def _check_batch(batch: Batch) -> None:
    if len(batch) == 0:
        raise ValueError("empty batch")


def teacher_forcing_grads(params: ModelParams, src, tgt) -> tuple[float, dict]:
    """Mean per-token negative log-likelihood and its gradient."""
    ntok = sum(len(y) for y in tgt)
    with ad.Tape() as tape:
        lp = log_prob_batch(tgt, src, params)
        loss = ad.sum_all(lp) * (-1.0 / ntok)
    return loss.item(), tape.backward(loss)


def teacher_forcing_step(batch: Batch, params: ModelParams, optimizer: Optimizer) -> float:
    _check_batch(batch)
    loss, grads = teacher_forcing_grads(params, batch.src, batch.tgt)
    optimizer.step(params, grads)
    return loss


def reinforce_grads(
    params: ModelParams, src, samples, advantages: np.ndarray
) -> dict[Tensor, np.ndarray]:
    """Gradient of ``-(1/B) sum_i A_i log p(Y_i|X_i)`` (a REINFORCE estimate)."""
    adv = np.asarray(advantages, dtype=np.float64)
    with ad.Tape() as tape:
        lp = log_prob_batch(samples, src, params, require_eos=False)
        loss = ad.sum_all(lp * adv) * (-1.0 / len(src))
    return tape.backward(loss)


def reinforce_step(
    batch: Batch,
    params: ModelParams,
    optimizer: Optimizer,
    baseline: RewardBaseline,
    rng: np.random.Generator,
    max_len: int | None = None,
    reward_fn=sentence_bleu_smoothed,
) -> float:
    """One REINFORCE update with a smoothed sentence-BLEU reward; returns the mean reward."""
    _check_batch(batch)
    ro = rollout(params, batch.src, mode="sampling", tau=1.0, rng=rng, max_len=max_len)
    samples = ro.sequences()
    rewards = np.array([reward_fn(y, ref) for y, ref in zip(samples, batch.tgt)])
    b = baseline.value if baseline.value is not None else float(rewards.mean())
    grads = reinforce_grads(params, batch.src, samples, rewards - b)
    optimizer.step(params, grads)
    baseline.update(float(rewards.mean()))
    return float(rewards.mean())


# ---------------------------------------------------------------- GGD


def score_with_token_grads(
    params: ModelParams, src, ids: np.ndarray, mask: np.ndarray
) -> tuple[np.ndarray, list[np.ndarray]]:
    """``log p(Y|X)`` per sentence and its gradient w.r.t. each ``(B, K)`` token.

    Only the tokens are differentiated; ``params`` are treated as constants.
    """
    K = params.config.tgt_vocab
    const = {n: Tensor(t.data) for n, t in params.tensors.items()}
    frozen = ModelParams.__new__(ModelParams)
    frozen.config, frozen.tensors = params.config, const
    ys = [Tensor(one_hot(ids[:, t], K), requires_grad=True) for t in range(ids.shape[1])]
    with ad.Tape() as tape:
        enc = encode_batch(src, frozen)
        total, _ = score_tokens(enc, ys, mask, frozen)
    grads = tape.vjp([total], [np.ones(len(src))])
    return total.data.copy(), [grads.get(y, np.zeros(y.shape)) for y in ys]


@dataclass
class GeneratorStep:
    objective: float
    rewards: np.ndarray
    grads: dict
    samples: list[list[int]]


def ggd_generator_grads(
    src,
    gen: ModelParams,
    disc: ModelParams,
    cfg: TrainConfig,
    rng: np.random.Generator,
    frozen: ModelParams | None = None,
) -> GeneratorStep:
    """Gradient of the (optionally regularized) discriminator score w.r.t. ``gen``.

    The score is evaluated on the hard words; its derivative with respect to
    those words is carried into ``gen`` by the straight-through tokens.
    """
    if cfg.estimator not in ESTIMATORS:
        raise ConfigError(f"unknown estimator {cfg.estimator!r}")
    with ad.Tape() as tape:
        ro = rollout(
            gen,
            src,
            mode=cfg.generator_mode,
            tau=cfg.tau,
            rng=rng,
            estimator=cfg.estimator,
            beam_size=cfg.beam_size,
        )
    reward, d_tokens = score_with_token_grads(disc, src, ro.ids, ro.mask)
    if cfg.entropy_reg:
        frozen = frozen if frozen is not None else gen.copy()
        lp_self, d_self = score_with_token_grads(frozen, src, ro.ids, ro.mask)
        reward = reward - lp_self
        d_tokens = [a - b for a, b in zip(d_tokens, d_self)]
    B = len(src)
    # minimize -mean(R)
    cotangents = [-d / B for d in d_tokens]
    grads = tape.vjp(ro.tokens, cotangents)
    grads = {t: grads.get(t, np.zeros(t.shape)) for t in gen}
    return GeneratorStep(float(reward.mean()), reward, grads, ro.sequences())


def ggd_generator_step(
    src,
    gen: ModelParams,
    disc: ModelParams,
    cfg: TrainConfig,
    optimizer: Optimizer,
    rng: np.random.Generator,
) -> float:
    step = ggd_generator_grads(src, gen, disc, cfg, rng)
    optimizer.step(gen, step.grads)
    return step.objective


def ggd_discriminator_grads(
    src, tgt, samples, disc: ModelParams
) -> tuple[float, dict[Tensor, np.ndarray]]:
    """Objective ``mean log p(Y*|X) - mean log p(Y|X)`` and the gradient of its negation."""
    B = len(src)
    with ad.Tape() as t_real:
        lp_real = log_prob_batch(tgt, src, disc)
        loss_real = ad.sum_all(lp_real) * (1.0 / B)
    g_real = t_real.backward(loss_real)
    with ad.Tape() as t_gen:
        lp_gen = log_prob_batch(samples, src, disc, require_eos=False)
        loss_gen = ad.sum_all(lp_gen) * (1.0 / B)
    g_gen = t_gen.backward(loss_gen)
    grads = {}
    for t in disc:
        gr = g_real.get(t, 0.0)
        gg = g_gen.get(t, 0.0)
        grads[t] = np.broadcast_to(-(gr - gg), t.shape).copy()
    return loss_real.item() - loss_gen.item(), grads


def ggd_discriminator_step(
    batch: Batch,
    gen: ModelParams,
    disc: ModelParams,
    optimizer: Optimizer,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> float:
    _check_batch(batch)
    ro = rollout(gen, batch.src, mode=cfg.generator_mode, tau=cfg.tau, rng=rng, beam_size=cfg.beam_size)
    objective, grads = ggd_discriminator_grads(batch.src, batch.tgt, ro.sequences(), disc)
    optimizer.step(disc, grads)
    return objective


# ---------------------------------------------------------------- loops


def greedy_bleu(params: ModelParams, corpus: Corpus, batch_size: int = 250) -> tuple[float, list]:
    hyps = []
    for i in range(0, len(corpus), batch_size):
        hyps += [r.tokens for r in greedy_decode_batch(corpus.src[i : i + batch_size], params)]
    return corpus_bleu(zip(hyps, corpus.tgt)), hyps


def mean_score(params: ModelParams, src, tgt, batch_size: int = 250) -> float:
    total = 0.0
    for i in range(0, len(src), batch_size):
        lp = log_prob_batch(tgt[i : i + batch_size], src[i : i + batch_size], params, require_eos=False)
        total += float(lp.data.sum())
    return total / len(src)


class MetricsLog:
    """Append-only metrics table, written as CSV."""

    def __init__(self, path=None):
        self.rows: list[dict] = []
        self.path = path
        if path is not None:
            with open(path, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(METRICS_COLUMNS)

    def append(self, **row) -> None:
        unknown = set(row) - set(METRICS_COLUMNS)
        if unknown:
            raise KeyError(f"unknown metrics columns {sorted(unknown)}")
        full = {c: row.get(c, "") for c in METRICS_COLUMNS}
        self.rows.append(full)
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow([_fmt(full[c]) for c in METRICS_COLUMNS])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in METRICS_COLUMNS])
        return buf.getvalue()

    def column(self, name: str, phase: str | None = None) -> list:
        return [r[name] for r in self.rows if phase is None or r["phase"] == phase]


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _eval_subset(corpus: Corpus, size: int | None) -> Corpus:
    return corpus if size is None or size >= len(corpus) else corpus.subset(range(size))


def train_mle(
    params: ModelParams,
    train: Corpus,
    valid: Corpus,
    cfg: TrainConfig,
    log: MetricsLog | None = None,
) -> tuple[ModelParams, MetricsLog]:
    """Teacher forcing until ``max_updates`` or validation-BLEU patience runs out.

    Returns the parameters of the best validation evaluation.
    """
    cfg.validate()
    log = log if log is not None else MetricsLog()
    params = params.copy()
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    batches = batch_iter(train, cfg.batch_size, stream(cfg.seed, "mle", "batches"), cfg.max_epochs, cfg.bucket)
    val = _eval_subset(valid, cfg.eval_size)
    best, best_bleu, bad, update = params.copy(), -1.0, 0, 0
    for batch in batches:
        loss = teacher_forcing_step(batch, params, opt)
        update += 1
        log.append(update=update, phase="mle", objective=loss, tau="", seed=cfg.seed)
        if update % cfg.eval_every == 0:
            bleu, _ = greedy_bleu(params, val)
            log.append(update=update, phase="eval", greedy_bleu=bleu, tau="", seed=cfg.seed)
            logger.info("mle update %d loss %.4f bleu %.4f", update, loss, bleu)
            if bleu > best_bleu:
                best, best_bleu, bad = params.copy(), bleu, 0
            else:
                bad += 1
            if bad >= cfg.patience:
                break
        if update >= cfg.max_updates:
            break
    return best, log


def train_reinforce(
    params: ModelParams,
    train: Corpus,
    valid: Corpus,
    cfg: TrainConfig,
    log: MetricsLog | None = None,
) -> tuple[ModelParams, MetricsLog]:
    """REINFORCE fine-tuning with a moving-average baseline."""
    cfg.validate()
    log = log if log is not None else MetricsLog()
    params = params.copy()
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    baseline = RewardBaseline(cfg.baseline_decay)
    rng = stream(cfg.seed, "reinforce", "samples")
    batches = batch_iter(train, cfg.batch_size, stream(cfg.seed, "reinforce", "batches"), cfg.max_epochs, cfg.bucket)
    val = _eval_subset(valid, cfg.eval_size)
    best, best_bleu, bad, update = params.copy(), -1.0, 0, 0
    for batch in batches:
        reward = reinforce_step(batch, params, opt, baseline, rng)
        update += 1
        log.append(update=update, phase="reinforce", objective=reward, tau="", seed=cfg.seed)
        if update % cfg.eval_every == 0:
            bleu, _ = greedy_bleu(params, val)
            log.append(update=update, phase="eval", greedy_bleu=bleu, tau="", seed=cfg.seed)
            if bleu > best_bleu:
                best, best_bleu, bad = params.copy(), bleu, 0
            else:
                bad += 1
            if bad >= cfg.patience:
                break
        if update >= cfg.max_updates:
            break
    return best, log


@dataclass
class GGDResult:
    generator: ModelParams
    discriminator: ModelParams
    log: MetricsLog
    best_bleu: float = float("nan")
    final_bleu: float = float("nan")


def _ggd_eval(gen, disc, val: Corpus, update, cfg, log) -> float:
    bleu, hyps = greedy_bleu(gen, val)
    real = mean_score(disc, val.src, val.tgt)
    fake = mean_score(disc, val.src, hyps)
    log.append(
        update=update,
        phase="eval",
        greedy_bleu=bleu,
        disc_score_real=real,
        disc_score_gen=fake,
        tau=cfg.tau,
        seed=cfg.seed,
    )
    logger.info("ggd update %d bleu %.4f real %.4f gen %.4f", update, bleu, real, fake)
    return bleu


def ggd_train(
    train: Corpus,
    valid: Corpus,
    pretrained: ModelParams,
    cfg: TrainConfig,
    log: MetricsLog | None = None,
) -> GGDResult:
    """Alternate ``n_g`` generator and ``n_d`` discriminator updates.

    The generator starts as a copy of the pretrained scorer. Each loop reads
    its own independently shuffled pass over ``train``. Stops after
    ``max_updates`` generator updates or ``patience`` evaluations without a
    new best validation BLEU; the final generator is returned.
    """
    if pretrained is None:
        raise ValueError("GGD needs a pretrained discriminator")
    cfg.validate()
    log = log if log is not None else MetricsLog()
    disc = pretrained.copy()
    gen = pretrained.copy()
    gen_opt = make_optimizer(cfg.optimizer, cfg.lr)
    disc_opt = make_optimizer(cfg.disc_optimizer, cfg.disc_lr)
    d_phi = batch_iter(train, cfg.batch_size, stream(cfg.seed, "ggd", "D_phi"), None, cfg.bucket)
    d_theta = batch_iter(train, cfg.batch_size, stream(cfg.seed, "ggd", "D_theta"), None, cfg.bucket)
    gen_rng = stream(cfg.seed, "ggd", "generator")
    disc_rng = stream(cfg.seed, "ggd", "discriminator")
    val = _eval_subset(valid, cfg.eval_size)

    update = 0
    best = _ggd_eval(gen, disc, val, update, cfg, log)
    last, bad = best, 0
    while update < cfg.max_updates and bad < cfg.patience:
        for _ in range(cfg.n_g):
            batch = next(d_phi)
            obj = ggd_generator_step(batch.src, gen, disc, cfg, gen_opt, gen_rng)
            update += 1
            log.append(update=update, phase="generator", objective=obj, tau=cfg.tau, seed=cfg.seed)
        for _ in range(cfg.n_d):
            batch = next(d_theta)
            obj = ggd_discriminator_step(batch, gen, disc, disc_opt, cfg, disc_rng)
            log.append(update=update, phase="discriminator", objective=obj, tau=cfg.tau, seed=cfg.seed)
        if update % cfg.eval_every < cfg.n_g:
            last = _ggd_eval(gen, disc, val, update, cfg, log)
            if last > best:
                best, bad = last, 0
            else:
                bad += 1
    if log.rows[-1]["phase"] != "eval":
        last = _ggd_eval(gen, disc, val, update, cfg, log)
    return GGDResult(gen, disc, log, best_bleu=max(best, last), final_bleu=last)
