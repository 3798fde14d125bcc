"""Vocabularies, parallel corpora, batching and synthetic translation tasks."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .model import EOS, N_RESERVED, PAD, UNK, pad_batch

RESERVED_TOKENS = ("<pad>", "</s>", "<unk>")


class ConfigError(ValueError):
    """Invalid task or run configuration."""


class CorpusError(ValueError):
    """Malformed corpus input."""


class Vocab:
    """Token <-> id bijection with ids 0, 1, 2 reserved for PAD, EOS and UNK."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if len(set(tokens)) != len(tokens):
            raise ConfigError("duplicate tokens in vocabulary")
        if any(t in RESERVED_TOKENS for t in tokens):
            raise ConfigError("reserved token listed as a regular vocabulary entry")
        self.itos = list(RESERVED_TOKENS) + tokens
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    @property
    def tokens(self) -> list[str]:
        """Regular (non-reserved) tokens in id order."""
        return self.itos[N_RESERVED:]

    def encode(self, tokens: Sequence[str], add_eos: bool = True) -> list[int]:
        ids = [self.stoi.get(t, UNK) for t in tokens]
        return ids + [EOS] if add_eos else ids

    def decode(self, ids: Sequence[int]) -> list[str]:
        """Ids to tokens, stopping at the first EOS and skipping PAD."""
        out = []
        for i in ids:
            if i == EOS:
                break
            if i != PAD:
                out.append(self.itos[i])
        return out

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])

    @classmethod
    def build(cls, sentences: Sequence[Sequence[str]]) -> "Vocab":
        seen: dict[str, None] = {}
        for s in sentences:
            for t in s:
                seen.setdefault(t)
        return cls(sorted(seen))


@dataclass
class Corpus:
    """Aligned id sequences; every sequence ends with EOS."""

    src: list[list[int]]
    tgt: list[list[int]]
    split: str = "train"

    def __post_init__(self):
        if len(self.src) != len(self.tgt):
            raise CorpusError(f"{len(self.src)} source vs {len(self.tgt)} target sentences")

    def __len__(self) -> int:
        return len(self.src)

    def pairs(self) -> list[tuple[list[int], list[int]]]:
        return list(zip(self.src, self.tgt))

    def subset(self, indices) -> "Corpus":
        return Corpus([self.src[i] for i in indices], [self.tgt[i] for i in indices], self.split)

    def validate(self, src_vocab: int, tgt_vocab: int) -> None:
        for side, seqs, k in (("source", self.src, src_vocab), ("target", self.tgt, tgt_vocab)):
            for s in seqs:
                if not s or s[-1] != EOS:
                    raise CorpusError(f"{side} sequence does not end with EOS")
                if min(s) < 0 or max(s) >= k:
                    raise CorpusError(f"{side} id out of range for vocabulary of size {k}")


def strip_eos(ids: Sequence[int]) -> list[int]:
    """Tokens before the first EOS, with PAD removed."""
    out = []
    for i in ids:
        if i == EOS:
            break
        if i != PAD:
            out.append(int(i))
    return out


def load_corpus(
    path_src,
    path_tgt,
    src_vocab: Vocab,
    tgt_vocab: Vocab | None = None,
    max_len: int | None = None,
    split: str = "train",
) -> Corpus:
    """Read line-aligned, whitespace-tokenized files.

    Pairs where either side exceeds ``max_len`` tokens (EOS excluded) are
    dropped from both sides.
    """
    tgt_vocab = tgt_vocab or src_vocab
    src_lines = Path(path_src).read_text(encoding="utf-8").splitlines()
    tgt_lines = Path(path_tgt).read_text(encoding="utf-8").splitlines()
    if len(src_lines) != len(tgt_lines):
        raise CorpusError(f"line count mismatch: {len(src_lines)} vs {len(tgt_lines)}")
    src, tgt = [], []
    for s_line, t_line in zip(src_lines, tgt_lines):
        s_tok, t_tok = s_line.split(), t_line.split()
        if max_len is not None and (len(s_tok) > max_len or len(t_tok) > max_len):
            continue
        src.append(src_vocab.encode(s_tok))
        tgt.append(tgt_vocab.encode(t_tok))
    return Corpus(src, tgt, split)


def write_sentences(path, sentences: Sequence[Sequence[int]], vocab: Vocab) -> None:
    Path(path).write_text(
        "".join(" ".join(vocab.decode(s)) + "\n" for s in sentences), encoding="utf-8"
    )


@dataclass
class Batch:
    src: list[list[int]]
    tgt: list[list[int]]
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.src)

    def padded(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """``(src_ids, src_mask, tgt_ids, tgt_mask)``, PAD-filled on the right."""
        s_ids, s_mask = pad_batch(self.src)
        t_ids, t_mask = pad_batch(self.tgt)
        return s_ids, s_mask, t_ids, t_mask


def batch_iter(
    corpus: Corpus,
    batch_size: int,
    rng: np.random.Generator,
    epochs: int | None = 1,
    bucket: int = 0,
) -> Iterator[Batch]:
    """Shuffled mini-batches, reshuffled every epoch.

    With ``bucket > 0`` each run of ``bucket`` consecutive batches is sorted by
    source length before being cut, which cuts padding without making the
    order deterministic across epochs.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if len(corpus) == 0:
        raise CorpusError("empty corpus")
    epoch = 0
    while epochs is None or epoch < epochs:
        order = rng.permutation(len(corpus))
        if bucket > 0:
            chunk = batch_size * bucket
            lengths = np.array([len(corpus.src[i]) for i in order])
            for start in range(0, len(order), chunk):
                seg = slice(start, start + chunk)
                order[seg] = order[seg][np.argsort(lengths[seg], kind="stable")]
        batches = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
        if bucket > 0:
            batches = [batches[i] for i in rng.permutation(len(batches))]
        for idx in batches:
            yield Batch([corpus.src[i] for i in idx], [corpus.tgt[i] for i in idx], idx)
        epoch += 1


@dataclass
class SyntheticTaskSpec:
    """A reverse-and-substitute toy translation task.

    ``vocab_size`` counts the three reserved ids, so ``vocab_size - 3``
    distinct symbols appear in sentences. With ``swap_prob > 0`` each
    reference has adjacent target words swapped at random, so the most
    likely translation is not always the one in the reference.
    """

    vocab_size: int = 30
    min_len: int = 4
    max_len: int = 12
    reverse: bool = True
    cipher: bool = True
    swap_prob: float = 0.15
    n_train: int = 10_000
    n_valid: int = 1_000
    n_test: int = 1_000
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticTask:
    spec: SyntheticTaskSpec
    src_vocab: Vocab
    tgt_vocab: Vocab
    train: Corpus
    valid: Corpus
    test: Corpus
    permutation: np.ndarray

    def translate(self, src_ids: Sequence[int]) -> list[int]:
        """Noise-free reference translation of a source id sequence."""
        body = strip_eos(src_ids)
        if self.spec.reverse:
            body = body[::-1]
        return [int(self.permutation[i - N_RESERVED]) + N_RESERVED for i in body] + [EOS]


def gen_synthetic(spec: SyntheticTaskSpec) -> SyntheticTask:
    """Generate disjoint train/valid/test splits for a synthetic task."""
    if spec.vocab_size < 4:
        raise ConfigError("vocab_size must be at least 4")
    if not 1 <= spec.min_len <= spec.max_len:
        raise ConfigError("need 1 <= min_len <= max_len")
    if not 0.0 <= spec.swap_prob <= 1.0:
        raise ConfigError("swap_prob must lie in [0, 1]")
    n_sym = spec.vocab_size - N_RESERVED
    total = spec.n_train + spec.n_valid + spec.n_test
    capacity = sum(n_sym**k for k in range(spec.min_len, spec.max_len + 1))
    if total > capacity:
        raise ConfigError(f"cannot draw {total} distinct sentences from {capacity} candidates")

    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x73796E]))
    perm = rng.permutation(n_sym) if spec.cipher else np.arange(n_sym)
    src_vocab = Vocab([f"s{i}" for i in range(n_sym)])
    tgt_vocab = Vocab([f"t{i}" for i in range(n_sym)])

    seen: set[tuple[int, ...]] = set()
    sources: list[list[int]] = []
    while len(sources) < total:
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        sent = tuple(int(v) for v in rng.integers(N_RESERVED, spec.vocab_size, size=length))
        if sent in seen:
            continue
        seen.add(sent)
        sources.append(list(sent))

    task = SyntheticTask(spec, src_vocab, tgt_vocab, None, None, None, perm)  # type: ignore[arg-type]
    targets = []
    for s in sources:
        t = task.translate(s)[:-1]
        if spec.swap_prob > 0:
            j = 0
            while j < len(t) - 1:
                if rng.random() < spec.swap_prob:
                    t[j], t[j + 1] = t[j + 1], t[j]
                    j += 2
                else:
                    j += 1
        targets.append(t + [EOS])
    src = [s + [EOS] for s in sources]
    a, b = spec.n_train, spec.n_train + spec.n_valid
    task.train = Corpus(src[:a], targets[:a], "train")
    task.valid = Corpus(src[a:b], targets[a:b], "valid")
    task.test = Corpus(src[b:], targets[b:], "test")
    return task
