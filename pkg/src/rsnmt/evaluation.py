"""Corpus BLEU, paired bootstrap significance and attention analysis."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np


def _tokens(s, lowercase: bool) -> list[str]:
    toks = s.split() if isinstance(s, str) else list(s)
    return [t.lower() for t in toks] if lowercase else toks


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


@dataclass
class EvalReport:
    bleu: float
    precisions: list[float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    def __str__(self) -> str:
        ps = "/".join(f"{100 * p:.1f}" for p in self.precisions)
        return (f"BLEU = {self.bleu:.2f}, {ps} (BP={self.brevity_penalty:.3f}, "
                f"hyp_len={self.hyp_len}, ref_len={self.ref_len})")


def sentence_stats(hyp, ref, max_order: int = 4, lowercase: bool = True) -> np.ndarray:
    """Sufficient statistics ``[matches_1..N, totals_1..N, hyp_len, ref_len]``."""
    h, r = _tokens(hyp, lowercase), _tokens(ref, lowercase)
    out = np.zeros(2 * max_order + 2, dtype=np.int64)
    for n in range(1, max_order + 1):
        hc, rc = _ngrams(h, n), _ngrams(r, n)
        out[n - 1] = sum(min(c, rc[g]) for g, c in hc.items())
        out[max_order + n - 1] = max(len(h) - n + 1, 0)
    out[-2], out[-1] = len(h), len(r)
    return out


def bleu_from_stats(stats: np.ndarray, max_order: int = 4) -> EvalReport:
    matches, totals = stats[:max_order], stats[max_order:2 * max_order]
    c, r = int(stats[-2]), int(stats[-1])
    precisions = [m / t if t > 0 else 0.0 for m, t in zip(matches, totals)]
    bp = math.exp(min(0.0, 1.0 - r / c)) if c > 0 else 0.0
    if min(precisions) <= 0.0:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / max_order)
    return EvalReport(score, [float(p) for p in precisions], bp if c > 0 else 0.0, c, r)


def bleu(hypotheses: Sequence, references: Sequence, max_order: int = 4,
         lowercase: bool = True) -> EvalReport:
    """Corpus BLEU with one reference per hypothesis and no smoothing."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    total = np.zeros(2 * max_order + 2, dtype=np.int64)
    for h, r in zip(hypotheses, references):
        total += sentence_stats(h, r, max_order, lowercase)
    return bleu_from_stats(total, max_order)


@dataclass
class Significance:
    better: str        # "A", "B" or "tie"
    p_value: float
    wins_a: float      # fraction of resamples where A beats B (ties count half)


def bootstrap_significance(hyp_a: Sequence, hyp_b: Sequence, refs: Sequence,
                           resamples: int = 1000, p: float = 0.05, seed: int = 0,
                           max_order: int = 4, lowercase: bool = True) -> Significance:
    """Paired bootstrap resampling over sentences."""
    if not (len(hyp_a) == len(hyp_b) == len(refs)):
        raise ValueError("hypothesis and reference counts differ")
    sa = np.stack([sentence_stats(h, r, max_order, lowercase) for h, r in zip(hyp_a, refs)])
    sb = np.stack([sentence_stats(h, r, max_order, lowercase) for h, r in zip(hyp_b, refs)])
    rng = np.random.default_rng(seed)
    n = len(refs)
    wins = 0.0
    for _ in range(resamples):
        idx = rng.integers(0, n, size=n)
        a = bleu_from_stats(sa[idx].sum(axis=0), max_order).bleu
        b = bleu_from_stats(sb[idx].sum(axis=0), max_order).bleu
        wins += 1.0 if a > b else 0.5 if a == b else 0.0
    frac = wins / resamples
    if 1.0 - frac < p:
        return Significance("A", 1.0 - frac, frac)
    if frac < p:
        return Significance("B", frac, frac)
    return Significance("tie", min(frac, 1.0 - frac), frac)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def attention_entropy(row, atol: float = 1e-6) -> float:
    """Shannon entropy in nats, with 0 * ln 0 taken as 0."""
    p = np.asarray(row, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("expected a non-empty probability vector")
    if (p < 0).any() or abs(p.sum() - 1.0) > atol:
        raise ValueError(f"row is not a probability distribution (sum={p.sum():.8f})")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum()) + 0.0


@dataclass
class AttentionTrace:
    """Cross-attention captured while producing one target sentence.

    ``layers[l]`` is an array ``[heads, target_positions, source_len]``; entry
    ``[h, t, :]`` is head ``h``'s distribution over source tokens while
    predicting target token ``t``, at the ``l``-th applied decoder layer.
    """
    source: list[str]
    target: list[str]
    layers: list[np.ndarray]

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def n_heads(self) -> int:
        return self.layers[0].shape[0] if self.layers else 0

    @property
    def n_positions(self) -> int:
        return self.layers[0].shape[1] if self.layers else 0

    def row(self, position: int, layer: int, head: int) -> np.ndarray:
        return self.layers[layer][head, position]


@dataclass
class AttentionStats:
    row_entropy: np.ndarray    # [layers, heads, positions]
    mean_entropy: np.ndarray   # [layers, heads]
    drift: np.ndarray          # [layers - 1, heads]: mean L1 distance to the previous layer
    max_entropy: float = field(default=0.0)


def attention_stats(trace: AttentionTrace) -> AttentionStats:
    if not trace.layers:
        raise ValueError("empty attention trace")
    L, H, P = trace.n_layers, trace.n_heads, trace.n_positions
    ent = np.zeros((L, H, P))
    for l, mat in enumerate(trace.layers):
        for h in range(H):
            for t in range(P):
                ent[l, h, t] = attention_entropy(mat[h, t])
    stacked = np.stack([np.asarray(m, dtype=np.float64) for m in trace.layers])
    drift = np.abs(np.diff(stacked, axis=0)).sum(axis=-1).mean(axis=-1) if L > 1 else np.zeros((0, H))
    return AttentionStats(ent, ent.mean(axis=-1), drift, math.log(len(trace.source)) if trace.source else 0.0)


def trace_to_json(trace: AttentionTrace, stats: AttentionStats | None = None,
                  position: int = 0) -> dict:
    stats = stats or attention_stats(trace)
    return {
        "sentence": list(trace.source),
        "target": list(trace.target),
        "position": position,
        "layers": [
            {"index": l, "heads": [{"index": h, "rows": mat[h].astype(np.float64).tolist()}
                                   for h in range(mat.shape[0])]}
            for l, mat in enumerate(trace.layers)
        ],
        "entropies": stats.mean_entropy.tolist(),
        "row_entropies": stats.row_entropy.tolist(),
        "recurrence_drift": stats.drift.tolist(),
    }


def trace_from_json(doc: dict, dtype=np.float32) -> AttentionTrace:
    layers = []
    for layer in sorted(doc["layers"], key=lambda d: d["index"]):
        heads = sorted(layer["heads"], key=lambda d: d["index"])
        layers.append(np.array([h["rows"] for h in heads], dtype=dtype))
    return AttentionTrace(list(doc["sentence"]), list(doc.get("target", [])), layers)


def _shade(p: float) -> str:
    v = int(round(255 * (1.0 - min(max(p, 0.0), 1.0))))
    return f"rgb({v},{v},{v})"


def _svg_grid(values: np.ndarray, row_labels, col_labels, title: str, cell: int = 24) -> str:
    rows, cols = values.shape
    left, top = 70, 40
    width, height = left + cols * cell + 10, top + rows * cell + 70
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}">',
        f'<text x="4" y="16" font-size="12" font-family="monospace">{escape(title)}</text>',
    ]
    for i in range(rows):
        out.append(f'<text x="4" y="{top + i * cell + cell * 0.7:.1f}" font-size="10" '
                   f'font-family="monospace">{escape(str(row_labels[i]))}</text>')
        for j in range(cols):
            v = float(values[i, j])
            out.append(f'<rect class="cell" x="{left + j * cell}" y="{top + i * cell}" '
                       f'width="{cell}" height="{cell}" fill="{_shade(v)}">'
                       f'<title>{v:.4f}</title></rect>')
    for j in range(cols):
        x = left + j * cell + cell / 2
        y = top + rows * cell + 8
        out.append(f'<text x="{x:.1f}" y="{y}" font-size="10" font-family="monospace" '
                   f'transform="rotate(60 {x:.1f} {y})">{escape(str(col_labels[j]))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def export_attention(trace: AttentionTrace, out_dir, stats: AttentionStats | None = None,
                     position: int = 0) -> list[Path]:
    """Write ``attention.json``, one heatmap per layer and an entropy map.

    Each layer heatmap has one row per head and one column per source token,
    showing the attention used to predict target token ``position``; darker
    cells carry more probability. ``entropy.svg`` shows mean row entropy per
    (layer, head), scaled by ln(source length).
    """
    if not trace.layers or trace.n_positions == 0:
        raise ValueError("empty attention trace")
    if not 0 <= position < trace.n_positions:
        raise ValueError(f"position {position} outside 0..{trace.n_positions - 1}")
    stats = stats or attention_stats(trace)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    jpath = out / "attention.json"
    jpath.write_text(json.dumps(trace_to_json(trace, stats, position)), encoding="utf-8")
    paths.append(jpath)
    src = trace.source or [str(i) for i in range(trace.layers[0].shape[-1])]
    for l, mat in enumerate(trace.layers):
        grid = mat[:, position, :]
        p = out / f"layer-{l:02d}.svg"
        p.write_text(_svg_grid(grid, [f"head {h}" for h in range(grid.shape[0])], src,
                               f"layer {l}, target position {position}"), encoding="utf-8")
        paths.append(p)
    scale = stats.max_entropy if stats.max_entropy > 0 else 1.0
    p = out / "entropy.svg"
    p.write_text(_svg_grid(stats.mean_entropy / scale,
                           [f"layer {l}" for l in range(trace.n_layers)],
                           [f"h{h}" for h in range(trace.n_heads)],
                           "mean attention entropy / ln(L)"), encoding="utf-8")
    paths.append(p)
    return paths
