"""Layer-transfer initialisation, sequence-level distillation and back-translation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import ParallelCorpus, Vocabulary, write_parallel
from .decoding import DecodeConfig, translate
from .evaluation import bleu
from .model import ConfigError, LayerWeights, ModelConfig, ModelWeights, build_model
from .training import load_model


@dataclass
class TransferConfig:
    teacher_checkpoint: str
    l_enc: int = 1
    l_dec: int | None = None          # defaults to l_enc
    copy_embeddings: bool = True
    copy_output_projection: bool = True


def _copy_layer(dst: LayerWeights, src: LayerWeights) -> None:
    for (dn, dt), (sn, st) in zip(dst.named("x"), src.named("x")):
        if dn != sn or dt.shape != st.shape:
            raise ConfigError(f"layer parameter {sn} has shape {st.shape}, student expects {dt.shape}")
        dt.data = st.data.astype(dt.data.dtype, copy=True)


def init_from_teacher(student_config: ModelConfig, t: TransferConfig, seed: int = 0,
                      teacher: ModelWeights | None = None) -> ModelWeights:
    """Fresh recurrent student whose shared layers are copies of teacher layers.

    The student's encoder layer copies teacher encoder layer ``l_enc`` and its
    decoder layer copies teacher decoder layer ``l_dec`` (both 1-based).
    Embeddings and the output projection are copied when flagged and when the
    student has a same-shaped counterpart; everything else keeps its fresh
    initialisation. The teacher is never modified.
    """
    if teacher is None:
        teacher, _, _ = load_model(t.teacher_checkpoint)
    tc, sc = teacher.config, student_config.validate()
    if tc.recurrent:
        raise ConfigError("layer transfer needs a vanilla teacher")
    if not sc.recurrent:
        raise ConfigError("layer transfer initialises a recurrently stacked student")
    for name in ("d_model", "d_ff", "n_heads", "src_vocab_size", "tgt_vocab_size"):
        if getattr(tc, name) != getattr(sc, name):
            raise ConfigError(f"teacher {name}={getattr(tc, name)} differs from student "
                              f"{name}={getattr(sc, name)}")
    l_dec = t.l_enc if t.l_dec is None else t.l_dec
    if not 1 <= t.l_enc <= tc.stacking.n_enc:
        raise ConfigError(f"l_enc={t.l_enc} outside 1..{tc.stacking.n_enc}")
    if not 1 <= l_dec <= tc.stacking.n_dec:
        raise ConfigError(f"l_dec={l_dec} outside 1..{tc.stacking.n_dec}")

    student = build_model(sc, seed)
    _copy_layer(student.encoder_layers[0], teacher.encoder_layers[t.l_enc - 1])
    _copy_layer(student.decoder_layers[0], teacher.decoder_layers[l_dec - 1])
    if t.copy_embeddings:
        student.src_embed.data = teacher.src_embed.data.copy()
        if student.tgt_embed is not student.src_embed:
            student.tgt_embed.data = teacher.tgt_embed.data.copy()
    if t.copy_output_projection and student.out_proj is not student.tgt_embed:
        student.out_proj.data = teacher.out_proj.data.copy()
    student.provenance = {
        "init": "layer_transfer",
        "teacher": str(t.teacher_checkpoint),
        "l_enc": t.l_enc,
        "l_dec": l_dec,
    }
    return student


@dataclass
class DistillConfig:
    teacher_checkpoint: str = ""
    beam_size: int = 4
    alpha: float = 0.6
    greedy: bool = False
    mix_original: bool = False
    sample_size: int = 10000
    seed: int = 0
    batch_size: int = 128


@dataclass
class DistillReport:
    n_sources: int
    n_pairs: int
    skipped: dict[int, str] = field(default_factory=dict)
    sample_bleu: float | None = None
    sample_size: int = 0
    seed: int = 0
    teacher: str = ""
    beam_size: int = 4
    alpha: float = 0.6

    def to_dict(self) -> dict:
        d = asdict(self)
        d["skipped"] = {str(k): v for k, v in sorted(self.skipped.items())}
        return d


def _generate(model, sentences: Sequence[Sequence[str]], d: DistillConfig):
    w, src_vocab, tgt_vocab = model
    cfg = DecodeConfig(beam_size=d.beam_size, alpha=d.alpha, batch_size=d.batch_size)
    tr = translate(w, sentences, src_vocab, tgt_vocab, cfg, greedy=d.greedy, skip_errors=True)
    skipped = dict(tr.failures)
    kept = []
    for i, out in enumerate(tr.outputs):
        if i in skipped:
            continue
        if not out:
            skipped[i] = "empty translation"
            continue
        kept.append(i)
    return tr.outputs, kept, skipped


def _load(teacher):
    if isinstance(teacher, (str, Path)):
        return load_model(teacher)
    return teacher


def distill_corpus(teacher, sources: Sequence[Sequence[str]], d: DistillConfig,
                   references: Sequence[Sequence[str]] | None = None):
    """Pair every source with the teacher's translation of it.

    ``teacher`` is a checkpoint path or a ``(weights, src_vocab, tgt_vocab)``
    triple. Returns ``(corpus, report)``; sentences the teacher cannot
    translate are listed in ``report.skipped``. With ``references`` the report
    includes BLEU of a seeded random sample of pseudo-targets against them.
    """
    outputs, kept, skipped = _generate(_load(teacher), sources, d)
    corpus = ParallelCorpus([list(sources[i]) for i in kept], [outputs[i] for i in kept])
    report = DistillReport(len(sources), len(corpus), skipped, seed=d.seed,
                           teacher=str(d.teacher_checkpoint), beam_size=d.beam_size, alpha=d.alpha)
    if references is not None and kept:
        if len(references) != len(sources):
            raise ValueError("references must align with sources")
        rng = np.random.default_rng(d.seed)
        m = min(d.sample_size, len(kept))
        pick = np.sort(rng.choice(len(kept), size=m, replace=False))
        report.sample_size = m
        report.sample_bleu = bleu([outputs[kept[j]] for j in pick],
                                  [references[kept[j]] for j in pick]).bleu
    return corpus, report


def back_translate(reverse_model, monolingual: Sequence[Sequence[str]], d: DistillConfig,
                   original: ParallelCorpus | None = None):
    """Pseudo pairs ``(reverse translation, monolingual sentence)``.

    The monolingual text is the target side. With ``d.mix_original`` the
    original corpus is prepended; shuffling is left to batching.
    """
    outputs, kept, skipped = _generate(_load(reverse_model), monolingual, d)
    pseudo = ParallelCorpus([outputs[i] for i in kept], [list(monolingual[i]) for i in kept])
    report = DistillReport(len(monolingual), len(pseudo), skipped, seed=d.seed,
                           teacher=str(d.teacher_checkpoint), beam_size=d.beam_size, alpha=d.alpha)
    if d.mix_original:
        if original is None:
            raise ValueError("mix_original needs the original corpus")
        return original + pseudo, report
    return pseudo, report


def write_pseudo_corpus(corpus: ParallelCorpus, report: DistillReport, prefix) -> list[Path]:
    """Write ``prefix.src``, ``prefix.tgt`` and the ``prefix.report.json`` sidecar."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    src, tgt = Path(f"{prefix}.src"), Path(f"{prefix}.tgt")
    rep = Path(f"{prefix}.report.json")
    write_parallel(corpus, src, tgt)
    rep.write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    return [src, tgt, rep]
