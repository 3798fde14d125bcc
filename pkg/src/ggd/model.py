"""Attention-based GRU encoder-decoder.

The same network plays both roles in GGD training: as a scorer it returns
``log p(Y|X)`` for a given translation, as a generator it is unrolled by one
of the decoders in :mod:`ggd.decoding`.

Target tokens enter the decoder as distributions over the vocabulary
(one row of a ``(B, K)`` matrix per sentence). A one-hot row is an ordinary
word; a relaxed row mixes embedding vectors, which is what makes the score
differentiable with respect to the translation itself.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PAD, EOS, UNK = 0, 1, 2
N_RESERVED = 3


class InputError(ValueError):
    """Token ids or sequences that violate the model's input contract."""


@dataclass(frozen=True)
class ModelConfig:
    src_vocab: int
    tgt_vocab: int
    embed_dim: int = 32
    hidden_dim: int = 64
    attention_dim: int = 32
    seed: int = 0
    init_scale: float = 0.08

    def to_dict(self) -> dict:
        return asdict(self)


def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    E, H, A = cfg.embed_dim, cfg.hidden_dim, cfg.attention_dim
    Ks, Kt = cfg.src_vocab, cfg.tgt_vocab
    return [
        ("src_emb", (Ks, E)),
        ("tgt_emb", (Kt, E)),
        ("enc_fwd_Wx", (E, 3 * H)),
        ("enc_fwd_Wh", (H, 3 * H)),
        ("enc_fwd_b", (3 * H,)),
        ("enc_bwd_Wx", (E, 3 * H)),
        ("enc_bwd_Wh", (H, 3 * H)),
        ("enc_bwd_b", (3 * H,)),
        ("init_W", (2 * H, H)),
        ("init_b", (H,)),
        ("att_W", (H, A)),
        ("att_U", (2 * H, A)),
        ("att_b", (A,)),
        ("att_v", (A,)),
        ("dec_We", (E, 3 * H)),
        ("dec_Wc", (2 * H, 3 * H)),
        ("dec_Wh", (H, 3 * H)),
        ("dec_b", (3 * H,)),
        ("out_Wz", (H, Kt)),
        ("out_Wc", (2 * H, Kt)),
        ("out_b", (Kt,)),
    ]


class ModelParams:
    """All learnable weights of one network, in a fixed declared order."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        expected = _param_shapes(config)
        if [n for n, _ in expected] != list(tensors):
            raise InputError("parameter names/order do not match the configuration")
        for name, shape in expected:
            if tensors[name].shape != shape:
                raise ad.DimensionError(f"{name}: expected {shape}, got {tensors[name].shape}")
        self.tensors = tensors

    @classmethod
    def initialize(cls, config: ModelConfig) -> "ModelParams":
        if min(config.src_vocab, config.tgt_vocab) < 1:
            raise InputError("vocabularies must be non-empty")
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x6D6F64]))
        s = config.init_scale
        tensors = {
            name: Tensor(rng.uniform(-s, s, size=shape), requires_grad=True, name=name)
            for name, shape in _param_shapes(config)
        }
        return cls(config, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.tensors.values())

    def names(self) -> list[str]:
        return list(self.tensors)

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {n: Tensor(t.data.copy(), requires_grad=True, name=n) for n, t in self.tensors.items()},
        )

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.tensors.items():
            t.data = np.array(arrays[name], dtype=np.float64)

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self)

    def allclose(self, other: "ModelParams", atol: float = 0.0) -> bool:
        return all(np.allclose(a.data, b.data, rtol=0, atol=atol) for a, b in zip(self, other))


# ---------------------------------------------------------------- fused ops


def gru_cell(xw: Tensor, h: Tensor, Wh: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """One GRU update given the precomputed input projection ``xw = x Wx + b``.

    Gate layout along the last axis is ``[reset | update | candidate]``.
    Rows with ``mask == 0`` carry ``h`` through unchanged.
    """
    H = h.shape[-1]
    hd, Whd = h.data, Wh.data
    hw = hd @ Whd
    pre = xw.data[:, : 2 * H] + hw[:, : 2 * H]
    gates = 1.0 / (1.0 + np.exp(-pre))
    r, u = gates[:, :H], gates[:, H:]
    hwc = hw[:, 2 * H :]
    c = np.tanh(xw.data[:, 2 * H :] + r * hwc)
    new = u * hd + (1.0 - u) * c
    m = None
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64)[:, None]
        new = m * new + (1.0 - m) * hd

    def backward(g):
        gp = g if m is None else m * g
        dh = gp * u if m is None else (1.0 - m) * g + gp * u
        du = gp * (hd - c)
        dpre_c = gp * (1.0 - u) * (1.0 - c * c)
        dr = dpre_c * hwc
        dxw = np.concatenate([dr * r * (1.0 - r), du * u * (1.0 - u), dpre_c], axis=1)
        dhw = np.concatenate([dxw[:, : 2 * H], dpre_c * r], axis=1)
        dh = dh + dhw @ Whd.T if h.requires_grad else None
        dWh = hd.T @ dhw if Wh.requires_grad else None
        return dxw, dh, dWh

    return ad.custom_op(new, (xw, h, Wh), backward)


def attention(
    z: Tensor,
    W: Tensor,
    b: Tensor,
    v: Tensor,
    annotations: Tensor,
    keys: Tensor,
    mask: np.ndarray,
) -> Tensor:
    """Additive attention context ``sum_j alpha_j h_j``.

    ``alpha = softmax_j(v . tanh(keys_j + z W + b))`` over unmasked source
    positions; ``keys`` is the precomputed ``annotations @ U``.
    """
    maskb = np.asarray(mask, dtype=bool)
    q = z.data @ W.data + b.data
    t = np.tanh(keys.data + q[:, None, :])
    e = t @ v.data
    e = np.where(maskb, e, -np.inf)
    e = np.exp(e - e.max(axis=1, keepdims=True))
    alpha = e / e.sum(axis=1, keepdims=True)
    ann = annotations.data
    ctx = np.einsum("bs,bsd->bd", alpha, ann)

    def backward(g):
        dalpha = np.einsum("bd,bsd->bs", g, ann)
        dann = alpha[:, :, None] * g[:, None, :] if annotations.requires_grad else None
        de = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
        dv = np.einsum("bsa,bs->a", t, de) if v.requires_grad else None
        dpre = de[:, :, None] * v.data * (1.0 - t * t)
        dq = dpre.sum(axis=1)
        return (
            dq @ W.data.T if z.requires_grad else None,
            z.data.T @ dq if W.requires_grad else None,
            dq.sum(axis=0) if b.requires_grad else None,
            dv,
            dann,
            dpre if keys.requires_grad else None,
        )

    return ad.custom_op(ctx, (z, W, b, v, annotations, keys), backward)


def attention_weights(z: np.ndarray, params: ModelParams, enc: "EncoderOutputs") -> np.ndarray:
    """The ``alpha`` matrix used by :func:`attention` (inspection only)."""
    q = z @ params["att_W"].data + params["att_b"].data
    e = np.tanh(enc.keys.data + q[:, None, :]) @ params["att_v"].data
    e = np.where(enc.mask, e, -np.inf)
    e = np.exp(e - e.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def embed(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, ids, g)
        return (full,)

    return ad.custom_op(table.data[ids], (table,), backward)


def stack(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return ad.custom_op(out, tuple(tensors), backward)


# ---------------------------------------------------------------- network


@dataclass
class EncoderOutputs:
    annotations: Tensor  # (B, S, 2H) forward ++ backward states
    keys: Tensor  # (B, S, A) attention projection of the annotations
    mask: np.ndarray  # (B, S) bool
    init_hidden: Tensor  # (B, H)

    @property
    def batch_size(self) -> int:
        return self.mask.shape[0]


@dataclass
class DecoderState:
    hidden: Tensor  # z^t, (B, H)
    embedding: Tensor | None = None  # embedding of the previous token
    context: Tensor | None = None  # attention context used for the last step


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = PAD) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id sequences into a ``(B, S)`` array plus a boolean mask."""
    if len(seqs) == 0:
        raise InputError("empty batch")
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), max(width, 1)), pad, dtype=np.int64)
    mask = np.zeros(ids.shape, dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def _check_source(seqs: Sequence[Sequence[int]], vocab: int) -> None:
    for s in seqs:
        if len(s) == 0:
            raise InputError("source sentence is empty")
        if min(s) < 0 or max(s) >= vocab:
            raise InputError(f"source id out of range for vocabulary of size {vocab}")


def encode_batch(x_batch: Sequence[Sequence[int]], params: ModelParams) -> EncoderOutputs:
    """Bidirectional GRU over a batch of source sentences."""
    _check_source(x_batch, params.config.src_vocab)
    ids, mask = pad_batch(x_batch)
    B, S = ids.shape
    H = params.config.hidden_dim
    zero = Tensor(np.zeros((B, H)))

    def run(prefix: str, order) -> list[Tensor]:
        h, states = zero, [None] * S
        Wx, Wh, b = params[f"{prefix}_Wx"], params[f"{prefix}_Wh"], params[f"{prefix}_b"]
        for j in order:
            xw = embed(params["src_emb"], ids[:, j]) @ Wx + b
            h = gru_cell(xw, h, Wh, mask[:, j])
            states[j] = h
        return states

    fwd = run("enc_fwd", range(S))
    bwd = run("enc_bwd", range(S - 1, -1, -1))
    annotations = ad.concat([stack(fwd), stack(bwd)], axis=-1)
    # backward states at padded positions stay zero; forward ones are masked here
    annotations = annotations * mask[:, :, None].astype(np.float64)
    lengths = mask.sum(axis=1, keepdims=True).astype(np.float64)
    mean = ad.sum_axis(annotations, 1) * (1.0 / lengths)
    init_hidden = mean @ params["init_W"] + params["init_b"]
    keys = annotations @ params["att_U"]
    return EncoderOutputs(annotations, keys, mask, init_hidden)


def encode(x_tokens: Sequence[int], params: ModelParams) -> EncoderOutputs:
    """Encode a single source sentence (batch of one)."""
    return encode_batch([list(x_tokens)], params)


def initial_state(enc: EncoderOutputs) -> DecoderState:
    return DecoderState(hidden=enc.init_hidden)


def start_token(batch_size: int, vocab: int) -> np.ndarray:
    """The all-zero token fed at the first step (zero embedding)."""
    return np.zeros((batch_size, vocab))


def one_hot(ids: Sequence[int] | np.ndarray, vocab: int) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    out = np.zeros(ids.shape + (vocab,))
    np.put_along_axis(out, ids[..., None], 1.0, axis=-1)
    return out


def decoder_step(
    state: DecoderState,
    prev_token: Tensor | np.ndarray,
    enc: EncoderOutputs,
    params: ModelParams,
) -> tuple[DecoderState, Tensor]:
    """Advance the decoder by one word and return the output energies ``a``.

    ``prev_token`` is a ``(B, K)`` distribution over the target vocabulary;
    its embedding is the correspondingly weighted mixture of embedding rows.
    """
    K = params.config.tgt_vocab
    prev_token = ad.as_tensor(prev_token)
    if prev_token.shape != (enc.batch_size, K):
        raise ad.ContractError(f"prev_token must be ({enc.batch_size}, {K}), got {prev_token.shape}")
    emb = prev_token @ params["tgt_emb"]
    ctx = attention(
        state.hidden,
        params["att_W"],
        params["att_b"],
        params["att_v"],
        enc.annotations,
        enc.keys,
        enc.mask,
    )
    xw = emb @ params["dec_We"] + ctx @ params["dec_Wc"] + params["dec_b"]
    hidden = gru_cell(xw, state.hidden, params["dec_Wh"])
    logits = hidden @ params["out_Wz"] + ctx @ params["out_Wc"] + params["out_b"]
    return DecoderState(hidden, emb, ctx), logits


def score_tokens(
    enc: EncoderOutputs,
    tokens: Sequence[Tensor | np.ndarray],
    step_mask: np.ndarray,
    params: ModelParams,
) -> tuple[Tensor, list[Tensor]]:
    """Teacher-forced ``sum_t log softmax(a^t) . y^t`` per sentence.

    ``tokens[t]`` is the ``(B, K)`` target at step ``t`` (one-hot or relaxed);
    it is scored at step ``t`` and fed as input to step ``t + 1``.
    ``step_mask`` is ``(B, T)``; masked steps contribute nothing.
    Returns the ``(B,)`` totals and the per-step ``(B,)`` terms.
    """
    B = enc.batch_size
    state = initial_state(enc)
    prev = start_token(B, params.config.tgt_vocab)
    total, steps = None, []
    step_mask = np.asarray(step_mask, dtype=np.float64)
    for t, y in enumerate(tokens):
        state, logits = decoder_step(state, prev, enc, params)
        term = ad.sum_axis(ad.log_softmax(logits) * y, -1) * step_mask[:, t]
        steps.append(term)
        total = term if total is None else total + term
        prev = y
    return total, steps


def check_target(y_tokens: Sequence[int], vocab: int) -> None:
    if len(y_tokens) == 0 or y_tokens[-1] != EOS:
        raise InputError("target sequence must end with the end-of-sentence token")
    if min(y_tokens) < 0 or max(y_tokens) >= vocab:
        raise InputError(f"target id out of range for vocabulary of size {vocab}")


def target_batch(y_batch: Sequence[Sequence[int]], vocab: int) -> tuple[list[np.ndarray], np.ndarray]:
    """One-hot step matrices and the step mask for a batch of id sequences."""
    ids, mask = pad_batch(y_batch)
    oh = one_hot(ids, vocab)
    return [oh[:, t] for t in range(ids.shape[1])], mask


def log_prob_batch(
    y_batch: Sequence[Sequence[int]],
    x_batch: Sequence[Sequence[int]],
    params: ModelParams,
    require_eos: bool = True,
) -> Tensor:
    """``log p(Y|X)`` for each pair, as a ``(B,)`` tensor."""
    K = params.config.tgt_vocab
    for y in y_batch:
        if require_eos:
            check_target(y, K)
        elif len(y) == 0:
            raise InputError("empty target sequence")
    enc = encode_batch(x_batch, params)
    tokens, mask = target_batch(y_batch, K)
    total, _ = score_tokens(enc, tokens, mask, params)
    return total


def log_prob(y_tokens: Sequence[int], x_tokens: Sequence[int], params: ModelParams) -> Tensor:
    """``log p(Y|X) = sum_t log softmax(a^t)^T y^t`` for one sentence pair."""
    return log_prob_batch([list(y_tokens)], [list(x_tokens)], params)[0]


def step_log_probs(
    y_tokens: Sequence[int], x_tokens: Sequence[int], params: ModelParams
) -> tuple[np.ndarray, np.ndarray]:
    """Per-step log-distributions ``(T, K)`` and the selected log-probabilities ``(T,)``."""
    check_target(y_tokens, params.config.tgt_vocab)
    enc = encode(x_tokens, params)
    K = params.config.tgt_vocab
    state, prev = initial_state(enc), start_token(1, K)
    rows = []
    for y in y_tokens:
        state, logits = decoder_step(state, prev, enc, params)
        rows.append(ad.log_softmax(logits).data[0])
        prev = one_hot([y], K)
    dist = np.array(rows)
    return dist, dist[np.arange(len(y_tokens)), list(y_tokens)]
