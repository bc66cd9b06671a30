"""Vocabularies, parallel corpora and padded batches."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<s>", "</s>", "<unk>")


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            raise ValueError(f"vocabulary must start with reserved tokens {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def encode(self, text: str | Sequence[str]) -> list[int]:
        return encode_sentence(self, text)

    def decode(self, ids: Iterable[int]) -> list[str]:
        """Map ids back to tokens, dropping reserved ids (unk is kept)."""
        return [self.tokens[i] for i in ids if i not in (PAD, BOS, EOS)]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def tokenize(text: str | Sequence[str]) -> list[str]:
    return text.split() if isinstance(text, str) else list(text)


def build_vocab(sentences: Iterable[str | Sequence[str]], max_size: int) -> Vocabulary:
    """Keep the most frequent tokens; ties go to the lexicographically smaller token."""
    if max_size <= len(RESERVED):
        raise ValueError(f"max_size must exceed {len(RESERVED)}, got {max_size}")
    counts = Counter()
    n = 0
    for s in sentences:
        n += 1
        counts.update(t for t in tokenize(s) if t not in RESERVED)
    if n == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [t for t, _ in ranked[: max_size - len(RESERVED)]]
    return Vocabulary(list(RESERVED) + keep)


def encode_sentence(vocab: Vocabulary, text: str | Sequence[str]) -> list[int]:
    return [BOS] + [vocab.id(t) for t in tokenize(text)] + [EOS]


@dataclass
class ParallelCorpus:
    sources: list[list[str]]
    targets: list[list[str]]

    def __post_init__(self):
        if len(self.sources) != len(self.targets):
            raise ValueError(f"unaligned corpus: {len(self.sources)} sources vs "
                             f"{len(self.targets)} targets")

    def __len__(self) -> int:
        return len(self.sources)

    def __iter__(self):
        return iter(zip(self.sources, self.targets))

    def filter_empty(self) -> "ParallelCorpus":
        pairs = [(s, t) for s, t in self if s and t]
        return ParallelCorpus([s for s, _ in pairs], [t for _, t in pairs])

    def __add__(self, other: "ParallelCorpus") -> "ParallelCorpus":
        return ParallelCorpus(self.sources + other.sources, self.targets + other.targets)

    def subset(self, indices) -> "ParallelCorpus":
        return ParallelCorpus([self.sources[i] for i in indices], [self.targets[i] for i in indices])


def read_lines(path) -> list[list[str]]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return [line.split() for line in lines]


def write_lines(path, sentences: Iterable[Sequence[str]]) -> None:
    Path(path).write_text("".join(" ".join(s) + "\n" for s in sentences), encoding="utf-8")


def read_parallel(src_path, tgt_path) -> ParallelCorpus:
    return ParallelCorpus(read_lines(src_path), read_lines(tgt_path))


def write_parallel(corpus: ParallelCorpus, src_path, tgt_path) -> None:
    write_lines(src_path, corpus.sources)
    write_lines(tgt_path, corpus.targets)


@dataclass
class Batch:
    ids: np.ndarray      # [B, L] int64, padded with PAD
    mask: np.ndarray     # [B, L] bool, True on real tokens
    lengths: np.ndarray  # [B]

    @property
    def size(self) -> int:
        return self.ids.shape[0]


def pad_batch(seqs: Sequence[Sequence[int]]) -> Batch:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    width = int(lengths.max()) if len(seqs) else 0
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return Batch(ids, ids != PAD, lengths)


def encode_corpus(corpus: ParallelCorpus, src_vocab: Vocabulary,
                  tgt_vocab: Vocabulary) -> list[tuple[list[int], list[int]]]:
    return [(encode_sentence(src_vocab, s), encode_sentence(tgt_vocab, t)) for s, t in corpus]


def make_batches(pairs: Sequence[tuple[Sequence[int], Sequence[int]]], batch_size_tokens: int,
                 seed: int = 0, max_positions: int | None = None) -> list[tuple[Batch, Batch]]:
    """Length-bucketed, seed-shuffled batches of encoded pairs.

    A batch holds as many pairs as fit in ``batch_size_tokens`` counted as
    ``rows * longest side``. Every pair lands in exactly one batch.
    """
    longest = 0
    for i, (s, t) in enumerate(pairs):
        n = max(len(s), len(t))
        if max_positions is not None and n > max_positions:
            raise ValueError(f"sentence pair {i} has length {n} > max_positions={max_positions}")
        longest = max(longest, n)
    if batch_size_tokens < longest:
        raise ValueError(f"batch_size_tokens={batch_size_tokens} is smaller than the "
                         f"longest sentence ({longest})")
    rng = np.random.default_rng(seed)
    jitter = rng.permutation(len(pairs))
    order = sorted(range(len(pairs)),
                   key=lambda i: (max(len(pairs[i][0]), len(pairs[i][1])), jitter[i]))
    groups: list[list[int]] = []
    cur: list[int] = []
    width = 0
    for i in order:
        n = max(len(pairs[i][0]), len(pairs[i][1]))
        if cur and (len(cur) + 1) * max(width, n) > batch_size_tokens:
            groups.append(cur)
            cur, width = [], 0
        cur.append(i)
        width = max(width, n)
    if cur:
        groups.append(cur)
    batches = []
    for gi in rng.permutation(len(groups)):
        g = groups[gi]
        batches.append((pad_batch([pairs[i][0] for i in g]), pad_batch([pairs[i][1] for i in g])))
    return batches


def subsample(corpus: ParallelCorpus, fraction: float, seed: int = 0) -> ParallelCorpus:
    """Uniform sample of ceil(fraction * n) pairs without replacement, in corpus order."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    n = len(corpus)
    m = math.ceil(round(fraction * n, 9))  # 0.3 * 10 must give 3, not 4
    if m >= n:
        return ParallelCorpus(list(corpus.sources), list(corpus.targets))
    idx = np.sort(np.random.default_rng(seed).choice(n, size=m, replace=False))
    return corpus.subset(idx.tolist())
