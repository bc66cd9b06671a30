"""Greedy and beam-search decoding with decode-time recurrence control."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import tensor as T
from .data import BOS, EOS, Batch, Vocabulary, encode_sentence, pad_batch
from .evaluation import AttentionTrace, bleu
from .model import ConfigError, IncrementalDecoder, ModelWeights, decode_forward, encode


@dataclass
class DecodeConfig:
    beam_size: int = 4
    alpha: float = 0.6
    max_len_a: int = 10
    max_len_b: float = 2.0
    enc_recurrences: int | None = None
    dec_recurrences: int | None = None
    capture_attention: bool = False
    timing: bool = False
    batch_size: int = 128

    def validate(self) -> "DecodeConfig":
        if self.beam_size < 1:
            raise ValueError(f"beam_size must be >= 1, got {self.beam_size}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        for name in ("enc_recurrences", "dec_recurrences"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValueError(f"{name} must be >= 1, got {v}")
        return self

    def max_len(self, src_len: int) -> int:
        return max(1, int(self.max_len_a + self.max_len_b * src_len))


def length_penalty(length: int, alpha: float) -> float:
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    return ((5.0 + length) / 6.0) ** alpha


@dataclass
class Hypothesis:
    tokens: list[int]          # generated ids, eos excluded
    score: float               # logprob / length_penalty
    logprob: float
    eos: bool                  # ended with eos (otherwise hit the length cap)

    @property
    def length(self) -> int:
        return len(self.tokens) + int(self.eos)

    def sort_key(self):
        return (-self.score, self.tokens + ([EOS] if self.eos else []))


@dataclass
class DecodeResult:
    hypotheses: list[Hypothesis]
    pools: list[list[Hypothesis]] = field(default_factory=list)
    traces: list[AttentionTrace] | None = None
    seconds: float | None = None

    @property
    def tokens(self) -> list[list[int]]:
        return [h.tokens for h in self.hypotheses]


class Scorer(Protocol):
    def step(self, tokens: np.ndarray) -> np.ndarray: ...
    def select(self, rows: np.ndarray) -> None: ...


def _check_overrides(w: ModelWeights, cfg: DecodeConfig) -> None:
    if not w.config.recurrent and (cfg.enc_recurrences is not None or cfg.dec_recurrences is not None):
        raise ConfigError("recurrence overrides need a recurrently stacked model")


def _model_scorer(w: ModelWeights, src: Batch, cfg: DecodeConfig) -> IncrementalDecoder:
    with T.no_grad():
        memory, _ = encode(w, src.ids, src.mask, cfg.enc_recurrences)
    return IncrementalDecoder(w, memory, src.mask, cfg.dec_recurrences)


def greedy_search(scorer: Scorer, max_lens: Sequence[int]) -> list[Hypothesis]:
    """Argmax decoding; ties go to the lowest token id."""
    B = len(max_lens)
    max_lens = np.asarray(max_lens)
    seqs: list[list[int]] = [[] for _ in range(B)]
    logprob = np.zeros(B)
    done = np.zeros(B, dtype=bool)
    ended = np.zeros(B, dtype=bool)
    last = np.full(B, BOS, dtype=np.int64)
    t = 0
    while not done.all():
        logp = scorer.step(last).astype(np.float64)
        best = logp.argmax(axis=-1)
        for b in np.flatnonzero(~done):
            tok = int(best[b])
            logprob[b] += logp[b, tok]
            if tok == EOS:
                ended[b] = done[b] = True
            else:
                seqs[b].append(tok)
                if t + 1 >= max_lens[b]:
                    done[b] = True
        last = np.where(done, EOS, best)
        t += 1
    return [Hypothesis(seqs[b], float(logprob[b]), float(logprob[b]), bool(ended[b]))
            for b in range(B)]


def beam_search(scorer: Scorer, max_lens: Sequence[int], beam_size: int, alpha: float,
                keep_pools: bool = False):
    """Batched beam search over a row-oriented scorer.

    Candidates are ranked by cumulative log-probability, ties broken by the
    lexicographically smaller token sequence. An eos candidate ranked within
    the top ``beam_size`` becomes a finished hypothesis scored
    ``logprob / length_penalty``; the best ``beam_size`` non-eos candidates
    stay alive. A sentence stops once no live beam can beat its best finished
    score, or at its length cap (live beams are then finished as-is).
    Returns ``(best hypotheses, finished pools)``.
    """
    K = beam_size
    B = len(max_lens)
    max_lens = [int(m) for m in max_lens]
    scorer.select(np.repeat(np.arange(B), K))
    prefixes: list[list[list[int]]] = [[[] for _ in range(K)] for _ in range(B)]
    alive = np.full((B, K), -np.inf)
    alive[:, 0] = 0.0
    pools: list[list[Hypothesis]] = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    last = np.full(B * K, BOS, dtype=np.int64)
    t = 0
    while not done.all():
        logp = scorer.step(last).astype(np.float64)
        V = logp.shape[-1]
        cand = (alive.reshape(-1, 1) + logp).reshape(B, K, V)
        rows = np.repeat(np.arange(B) * K, K)  # default: dead slots copy row 0 of the sentence
        next_alive = np.full((B, K), -np.inf)
        next_last = np.full((B, K), EOS, dtype=np.int64)
        next_prefixes: list[list[list[int]]] = [[[] for _ in range(K)] for _ in range(B)]
        length = t + 1
        for b in range(B):
            if done[b]:
                continue
            final = length >= max_lens[b]
            lp = length_penalty(length, alpha)
            rank = np.empty(K, dtype=np.int64)
            rank[sorted(range(K), key=lambda k: prefixes[b][k])] = np.arange(K)
            flat = cand[b].reshape(-1)
            beam_of = np.repeat(np.arange(K), V)
            tok_of = np.tile(np.arange(V), K)
            order = np.lexsort((tok_of, rank[beam_of], -flat))
            filled = 0
            for pos, c in enumerate(order):
                s = flat[c]
                if not np.isfinite(s) or (filled == K and pos >= K):
                    break
                k, v = int(beam_of[c]), int(tok_of[c])
                if v == EOS:
                    if pos < K:
                        pools[b].append(Hypothesis(list(prefixes[b][k]), s / lp, s, True))
                    continue
                if filled == K:
                    continue
                if final:
                    pools[b].append(Hypothesis(prefixes[b][k] + [v], s / lp, s, False))
                else:
                    next_alive[b, filled] = s
                    next_last[b, filled] = v
                    next_prefixes[b][filled] = prefixes[b][k] + [v]
                    rows[b * K + filled] = b * K + k
                filled += 1
            if final or not np.isfinite(next_alive[b]).any():
                done[b] = True
            elif pools[b]:
                best = max(h.score for h in pools[b])
                bound = next_alive[b].max() / length_penalty(max_lens[b], alpha)
                if best >= bound:
                    done[b] = True
            if done[b]:
                next_alive[b] = -np.inf
        scorer.select(rows)
        alive, prefixes = next_alive, next_prefixes
        last = next_last.reshape(-1)
        t += 1
    best = [min(pool, key=Hypothesis.sort_key) if pool
            else Hypothesis([], -np.inf, -np.inf, False) for pool in pools]
    return best, (pools if keep_pools else [])


def _max_lens(w: ModelWeights, src: Batch, cfg: DecodeConfig) -> list[int]:
    # source lengths exclude the bos/eos wrap; decoder positions cap the output
    return [min(cfg.max_len(int(n) - 2), w.config.max_positions) for n in src.lengths]


def greedy_decode(w: ModelWeights, src: Batch, cfg: DecodeConfig | None = None) -> DecodeResult:
    cfg = (cfg or DecodeConfig()).validate()
    _check_overrides(w, cfg)
    start = time.perf_counter()
    scorer = _model_scorer(w, src, cfg)
    hyps = greedy_search(scorer, _max_lens(w, src, cfg))
    result = DecodeResult(hyps)
    if cfg.capture_attention:
        result.traces = capture_traces(w, src, hyps, cfg)
    if cfg.timing:
        result.seconds = time.perf_counter() - start
    return result


def beam_decode(w: ModelWeights, src: Batch, cfg: DecodeConfig | None = None,
                keep_pools: bool = False) -> DecodeResult:
    cfg = (cfg or DecodeConfig()).validate()
    _check_overrides(w, cfg)
    start = time.perf_counter()
    scorer = _model_scorer(w, src, cfg)
    hyps, pools = beam_search(scorer, _max_lens(w, src, cfg), cfg.beam_size, cfg.alpha, keep_pools)
    result = DecodeResult(hyps, pools)
    if cfg.capture_attention:
        result.traces = capture_traces(w, src, hyps, cfg)
    if cfg.timing:
        result.seconds = time.perf_counter() - start
    return result


def _forced_inputs(hyps: Sequence[Hypothesis]) -> Batch:
    """Decoder inputs reproducing each hypothesis step by step."""
    seqs = []
    for h in hyps:
        steps = h.tokens if h.eos else h.tokens[:-1]
        seqs.append([BOS] + steps)
    return pad_batch(seqs)


def rescore(w: ModelWeights, src: Batch, hyps: Sequence[Hypothesis], alpha: float,
            cfg: DecodeConfig | None = None) -> list[float]:
    """Recompute ``logprob / length_penalty`` of given hypotheses by a forced pass."""
    cfg = cfg or DecodeConfig()
    tgt_in = _forced_inputs(hyps)
    with T.no_grad():
        memory, _ = encode(w, src.ids, src.mask, cfg.enc_recurrences)
        logits, _ = decode_forward(w, memory, src.mask, tgt_in.ids, tgt_in.mask, cfg.dec_recurrences)
        logp = T.log_softmax(logits).data.astype(np.float64)
    scores = []
    for b, h in enumerate(hyps):
        out = h.tokens + ([EOS] if h.eos else [])
        lp = sum(logp[b, t, tok] for t, tok in enumerate(out))
        scores.append(lp / length_penalty(max(len(out), 1), alpha))
    return scores


def capture_traces(w: ModelWeights, src: Batch, hyps: Sequence[Hypothesis],
                   cfg: DecodeConfig, src_vocab: Vocabulary | None = None,
                   tgt_vocab: Vocabulary | None = None) -> list[AttentionTrace]:
    """Cross-attention of every applied decoder layer along each hypothesis."""
    tgt_in = _forced_inputs(hyps)
    with T.no_grad():
        memory, _ = encode(w, src.ids, src.mask, cfg.enc_recurrences)
        _, cross = decode_forward(w, memory, src.mask, tgt_in.ids, tgt_in.mask,
                                  cfg.dec_recurrences, capture=True)
    traces = []
    for b, h in enumerate(hyps):
        S = int(src.lengths[b])
        P = int(tgt_in.lengths[b])
        src_ids = src.ids[b, :S].tolist()
        out_ids = h.tokens + ([EOS] if h.eos else [])
        src_tok = [src_vocab.tokens[i] for i in src_ids] if src_vocab else [str(i) for i in src_ids]
        tgt_tok = [tgt_vocab.tokens[i] for i in out_ids] if tgt_vocab else [str(i) for i in out_ids]
        layers = [np.ascontiguousarray(c[b, :, :P, :S]) for c in cross]
        traces.append(AttentionTrace(src_tok, tgt_tok, layers))
    return traces


# ---------------------------------------------------------------------------
# corpus-level helpers
# ---------------------------------------------------------------------------

@dataclass
class Translation:
    outputs: list[list[str]]
    hypotheses: list[Hypothesis]
    traces: list[AttentionTrace] | None
    seconds: float | None
    failures: dict[int, str] = field(default_factory=dict)


def translate(w: ModelWeights, sources: Sequence[Sequence[str]], src_vocab: Vocabulary,
              tgt_vocab: Vocabulary, cfg: DecodeConfig | None = None,
              greedy: bool = False, skip_errors: bool = False) -> Translation:
    """Decode a list of tokenized sentences, preserving input order.

    Sentences are length-sorted into chunks of ``cfg.batch_size``. With
    ``skip_errors`` a sentence that cannot be decoded (e.g. too long) is
    recorded in ``failures`` and gets an empty output instead of raising.
    """
    cfg = (cfg or DecodeConfig()).validate()
    _check_overrides(w, cfg)
    start = time.perf_counter()
    encoded = [encode_sentence(src_vocab, s) for s in sources]
    failures: dict[int, str] = {}
    usable = []
    for i, ids in enumerate(encoded):
        if len(ids) > w.config.max_positions:
            msg = f"sentence {i} has {len(ids)} positions > max_positions={w.config.max_positions}"
            if not skip_errors:
                raise ConfigError(msg)
            failures[i] = msg
        else:
            usable.append(i)
    order = sorted(usable, key=lambda i: (len(encoded[i]), i))
    hyps: list[Hypothesis | None] = [None] * len(sources)
    traces: list[AttentionTrace | None] | None = [None] * len(sources) if cfg.capture_attention else None
    sub = DecodeConfig(**{**cfg.__dict__, "capture_attention": False, "timing": False})
    for lo in range(0, len(order), cfg.batch_size):
        chunk = order[lo:lo + cfg.batch_size]
        src = pad_batch([encoded[i] for i in chunk])
        res = greedy_decode(w, src, sub) if greedy else beam_decode(w, src, sub)
        if cfg.capture_attention:
            for i, tr in zip(chunk, capture_traces(w, src, res.hypotheses, cfg, src_vocab, tgt_vocab)):
                traces[i] = tr
        for i, h in zip(chunk, res.hypotheses):
            hyps[i] = h
    outputs = [tgt_vocab.decode(h.tokens) if h is not None else [] for h in hyps]
    seconds = time.perf_counter() - start if cfg.timing else None
    return Translation(outputs, hyps, traces, seconds, failures)


@dataclass
class SweepRow:
    dec_recurrences: int
    bleu: float
    seconds: float


def recurrence_sweep(w: ModelWeights, sources, references, src_vocab: Vocabulary,
                     tgt_vocab: Vocabulary, k_values: Sequence[int] = range(1, 9),
                     cfg: DecodeConfig | None = None, greedy: bool = False) -> list[SweepRow]:
    """Decode the same test set with each decoder recurrence count.

    The encoder keeps its training-time recurrence count.
    """
    if not w.config.recurrent:
        raise ConfigError("recurrence sweep needs a recurrently stacked model")
    cfg = cfg or DecodeConfig()
    rows = []
    for k in k_values:
        c = DecodeConfig(**{**cfg.__dict__, "dec_recurrences": k, "enc_recurrences": None,
                            "timing": True, "capture_attention": False})
        tr = translate(w, sources, src_vocab, tgt_vocab, c, greedy=greedy)
        rows.append(SweepRow(k, bleu(tr.outputs, references).bleu, tr.seconds))
    return rows


def format_sweep(rows: Sequence[SweepRow]) -> str:
    lines = [f"{'k_dec':>5}  {'BLEU':>7}  {'seconds':>8}"]
    lines += [f"{r.dec_recurrences:>5}  {r.bleu:>7.2f}  {r.seconds:>8.3f}" for r in rows]
    return "\n".join(lines) + "\n"
