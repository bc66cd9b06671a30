"""Synthetic parallel corpora for desk-scale experiments."""

from __future__ import annotations

import numpy as np

from .data import RESERVED, ParallelCorpus

TASKS = ("copy", "reverse", "lexicon")


def symbols(vocab_size: int, prefix: str = "w") -> list[str]:
    """Content symbols for a vocabulary of ``vocab_size`` ids (reserved ids included)."""
    n = vocab_size - len(RESERVED)
    if n < 2:
        raise ValueError(f"vocab_size {vocab_size} leaves fewer than 2 content symbols")
    width = len(str(n - 1))
    return [f"{prefix}{i:0{width}d}" for i in range(n)]


def make_task(task: str, n_pairs: int, vocab_size: int = 50, min_len: int = 4,
              max_len: int = 10, noise: float = 0.0, seed: int = 0,
              lexicon_seed: int = 0) -> ParallelCorpus:
    """Generate ``n_pairs`` sentence pairs.

    copy:    target = source
    reverse: target = reversed source
    lexicon: every source symbol maps to a fixed target symbol (a seeded
             bijection onto a disjoint alphabet); adjacent pairs are swapped,
             so the task needs both lexical and positional knowledge

    The lexicon bijection comes from ``lexicon_seed`` alone, so corpora
    drawn with different ``seed`` values share one language pair.
    ``noise`` replaces each target token by a uniformly random symbol with
    that probability (the clean mapping stays the only systematic signal).
    ``vocab_size`` counts the reserved ids; ``lexicon`` uses that many ids on
    each side.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; choose from {TASKS}")
    if not 1 <= min_len <= max_len:
        raise ValueError("need 1 <= min_len <= max_len")
    rng = np.random.default_rng(seed)
    noise_rng = np.random.default_rng([seed, 1])  # same sources whatever the noise level
    src_sym = symbols(vocab_size, "w")
    tgt_sym = symbols(vocab_size, "v") if task == "lexicon" else src_sym
    mapping = np.random.default_rng(lexicon_seed).permutation(len(src_sym))
    sources, targets = [], []
    for _ in range(n_pairs):
        n = int(rng.integers(min_len, max_len + 1))
        ids = rng.integers(0, len(src_sym), size=n)
        if task == "copy":
            out = ids.copy()
        elif task == "reverse":
            out = ids[::-1].copy()
        else:
            out = mapping[ids]
            for i in range(0, n - 1, 2):
                out[i], out[i + 1] = out[i + 1], out[i]
        if noise > 0:
            flip = noise_rng.random(n) < noise
            out = np.where(flip, noise_rng.integers(0, len(tgt_sym), size=n), out)
        sources.append([src_sym[i] for i in ids])
        targets.append([tgt_sym[i] for i in out])
    return ParallelCorpus(sources, targets)


def split(corpus: ParallelCorpus, n_dev: int, n_test: int) -> tuple[ParallelCorpus, ...]:
    n = len(corpus)
    if n_dev + n_test >= n:
        raise ValueError("dev + test sizes exceed the corpus")
    a, b = n - n_dev - n_test, n - n_test
    idx = list(range(n))
    return corpus.subset(idx[:a]), corpus.subset(idx[a:b]), corpus.subset(idx[b:])
