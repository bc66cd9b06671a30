"""``rsnmt`` command line: every experiment step as a subcommand.

Each subcommand that produces files takes ``--out DIR`` and writes
``DIR/config.json`` holding the fully resolved settings. Settings come from
an optional ``--config`` JSON file with ``model``, ``train``, ``decode`` and
``data`` sections (keys mirror the dataclass field names); explicit flags
override the file. ``--seed`` defaults to ``$RSNMT_SEED``, then 0.

Exit status: 0 on success, 1 on a usage or configuration error, 2 when the
run itself fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

from . import toy
from .data import (ParallelCorpus, build_vocab, encode_corpus, read_lines, read_parallel,
                   subsample, write_lines, write_parallel)
from .decoding import DecodeConfig, format_sweep, recurrence_sweep, translate
from .evaluation import bleu, bootstrap_significance, export_attention
from .model import ConfigError, ModelConfig, Recurrent, Vanilla, build_model, count_parameters, with_stacking
from .training import (CheckpointFormatError, TrainConfig, TrainingError, average_checkpoints,
                       latest_checkpoints, load_model, save_checkpoint, save_model, train)
from .transfer import (DistillConfig, TransferConfig, back_translate, distill_corpus,
                       init_from_teacher, write_pseudo_corpus)

log = logging.getLogger("rsnmt")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------

def _env_seed() -> int:
    raw = os.environ.get("RSNMT_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"RSNMT_SEED must be an integer, got {raw!r}") from None


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: expected a JSON object")
    unknown = set(doc) - {"model", "train", "decode", "data"}
    if unknown:
        raise UsageError(f"{path}: unknown sections {sorted(unknown)}")
    return doc


def _section(doc: dict, name: str, cls, overrides: dict) -> dict:
    sec = dict(doc.get(name, {}))
    names = {f.name for f in fields(cls)}
    unknown = set(sec) - names
    if unknown:
        raise UsageError(f"unknown {name} config keys: {sorted(unknown)}")
    sec.update({k: v for k, v in overrides.items() if v is not None})
    return sec


def _stacking(spec) -> Vanilla | Recurrent:
    if isinstance(spec, (Vanilla, Recurrent)):
        return spec
    spec = dict(spec)
    mode = spec.pop("mode", None)
    if mode == "recurrent":
        return Recurrent(**spec)
    if mode == "vanilla":
        return Vanilla(**spec)
    raise UsageError(f"stacking mode must be 'recurrent' or 'vanilla', got {mode!r}")


def _model_section(doc: dict, a) -> dict:
    sec = _section(doc, "model", ModelConfig, {
        "d_model": a.d_model, "d_ff": a.d_ff, "n_heads": a.heads, "dropout": a.dropout,
        "max_positions": a.max_positions,
        "share_src_tgt_embedding": a.share_embeddings,
        "tie_output_projection": a.tie_output,
    })
    stacking = dict(sec.get("stacking", {"mode": "recurrent", "recurrences": 6}))
    if a.recurrences is not None:
        stacking = {"mode": "recurrent", "recurrences": a.recurrences}
    if a.layers is not None:
        stacking = {"mode": "vanilla", "n_enc": a.layers, "n_dec": a.layers}
    sec["stacking"] = stacking
    return sec


def _decode_config(doc: dict, a) -> DecodeConfig:
    sec = _section(doc, "decode", DecodeConfig, {
        "beam_size": getattr(a, "beam", None), "alpha": getattr(a, "alpha", None),
        "dec_recurrences": getattr(a, "dec_recurrence", None),
        "enc_recurrences": getattr(a, "enc_recurrence", None),
        "batch_size": getattr(a, "batch_size", None),
    })
    return DecodeConfig(**sec).validate()


def _echo(out: Path, command: str, **sections) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command}
    for k, v in sections.items():
        doc[k] = v.to_dict() if isinstance(v, ModelConfig) else asdict(v) if hasattr(v, "__dataclass_fields__") else v
    (out / "config.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(a) -> int:
    doc = _load_config(a.config)
    out = Path(a.out)
    corpus = read_parallel(a.src, a.tgt)
    data = dict(doc.get("data", {}))
    if a.train_fraction is not None:
        data["train_fraction"] = a.train_fraction
    if a.vocab_size is not None:
        data["vocab_size"] = a.vocab_size
    fraction = float(data.get("train_fraction", 1.0))
    vocab_size = int(data.get("vocab_size", 8000))
    if fraction < 1.0:
        corpus = subsample(corpus, fraction, a.seed)
    corpus = corpus.filter_empty()
    if not len(corpus):
        raise UsageError("training corpus is empty")

    tcfg = TrainConfig(**_section(doc, "train", TrainConfig, {
        "total_steps": a.steps, "warmup_steps": a.warmup, "base_lr": a.lr,
        "batch_tokens": a.batch_tokens, "label_smoothing": a.label_smoothing,
        "checkpoint_every": a.checkpoint_every, "keep_last": a.keep_last,
    }))
    tcfg.seed = a.seed
    tcfg.validate()
    msec = _model_section(doc, a)

    if a.init_from_teacher:
        _, src_vocab, tgt_vocab = load_model(a.init_from_teacher)
    elif msec.get("share_src_tgt_embedding"):
        src_vocab = tgt_vocab = build_vocab(corpus.sources + corpus.targets, vocab_size)
    else:
        src_vocab = build_vocab(corpus.sources, vocab_size)
        tgt_vocab = build_vocab(corpus.targets, vocab_size)
    msec["src_vocab_size"], msec["tgt_vocab_size"] = len(src_vocab), len(tgt_vocab)
    mcfg = ModelConfig(**{**msec, "stacking": _stacking(msec["stacking"])}).validate()

    if a.init_from_teacher:
        w = init_from_teacher(mcfg, TransferConfig(a.init_from_teacher, a.l_enc, a.l_dec), a.seed)
    else:
        if a.l_enc is not None or a.l_dec is not None:
            raise UsageError("--l-enc/--l-dec need --init-from-teacher")
        w = build_model(mcfg, a.seed)
    sidecar = Path(a.src).with_suffix(".report.json")
    if sidecar.exists():
        report = json.loads(sidecar.read_text(encoding="utf-8"))
        w.provenance["distilled_from"] = {k: report.get(k) for k in
                                          ("teacher", "beam_size", "alpha", "seed", "n_pairs")}

    data.update({"src": str(a.src), "tgt": str(a.tgt), "train_fraction": fraction,
                 "vocab_size": vocab_size, "pairs": len(corpus)})
    _echo(out, "train", model=mcfg, train=tcfg, data=data, seed=a.seed,
          init_from_teacher=a.init_from_teacher, l_enc=a.l_enc, l_dec=a.l_dec)
    src_vocab.save(out / "vocab.src")
    tgt_vocab.save(out / "vocab.tgt")
    vocab_header = {"vocab": {"src": src_vocab.tokens, "tgt": tgt_vocab.tokens}}

    def progress(step, loss):
        if step % 50 == 0 or step == tcfg.total_steps:
            log.info("step %d loss %.4f", step, loss)

    result = train(w, encode_corpus(corpus, src_vocab, tgt_vocab), tcfg, out,
                   extra_header=vocab_header, on_step=progress)
    save_model(out / "model.rsnmt", w, src_vocab, tgt_vocab, tcfg.total_steps)
    (out / "losses.json").write_text(json.dumps(result.losses) + "\n", encoding="utf-8")
    final = sum(result.losses[-20:]) / max(1, len(result.losses[-20:]))
    print(f"trained {tcfg.total_steps} steps, final loss {final:.4f}, model {out / 'model.rsnmt'}")
    return 0


def cmd_translate(a) -> int:
    start = time.perf_counter()
    doc = _load_config(a.config)
    cfg = _decode_config(doc, a)
    w, src_vocab, tgt_vocab = load_model(a.model)
    sources = read_lines(a.input)
    if a.attention_out:
        cfg.capture_attention = True
    tr = translate(w, sources, src_vocab, tgt_vocab, cfg, greedy=a.greedy, skip_errors=True)
    out = Path(a.out)
    _echo(out, "translate", decode=cfg, model=a.model, input=a.input, greedy=a.greedy, seed=a.seed)
    write_lines(out / "hyp.txt", tr.outputs)
    for i, msg in sorted(tr.failures.items()):
        print(f"warning: {msg}", file=sys.stderr)
    if a.attention_out:
        for i, trace in enumerate(tr.traces or []):
            if trace is not None and trace.n_positions:
                export_attention(trace, Path(a.attention_out) / f"sentence-{i:04d}")
    if a.time:
        seconds = time.perf_counter() - start
        (out / "timing.json").write_text(json.dumps({"seconds": seconds}) + "\n", encoding="utf-8")
        print(f"translated {len(sources)} sentences in {seconds:.3f} s "
              f"(model load and output write included)")
    return 0


def cmd_distill(a) -> int:
    doc = _load_config(a.config)
    dec = _decode_config(doc, a)
    d = DistillConfig(a.teacher, dec.beam_size, dec.alpha, a.greedy, False,
                      a.sample_size, a.seed, dec.batch_size)
    sources = read_lines(a.src)
    refs = read_lines(a.ref) if a.ref else None
    corpus, report = distill_corpus(a.teacher, sources, d, refs)
    out = Path(a.out)
    _echo(out, "distill", distill=d, src=a.src, ref=a.ref)
    write_pseudo_corpus(corpus, report, out / "distilled")
    msg = f"distilled {report.n_pairs}/{report.n_sources} sentences"
    if report.sample_bleu is not None:
        msg += f", sample BLEU vs references {report.sample_bleu:.2f}"
    print(msg)
    return 0


def cmd_augment(a) -> int:
    doc = _load_config(a.config)
    dec = _decode_config(doc, a)
    d = DistillConfig(a.reverse_model, dec.beam_size, dec.alpha, a.greedy, a.mix,
                      0, a.seed, dec.batch_size)
    original = None
    if a.mix:
        if not (a.src and a.tgt):
            raise UsageError("--mix needs --src and --tgt for the original corpus")
        original = read_parallel(a.src, a.tgt)
    corpus, report = back_translate(a.reverse_model, read_lines(a.mono), d, original)
    out = Path(a.out)
    _echo(out, "augment", augment=d, mono=a.mono, src=a.src, tgt=a.tgt)
    write_pseudo_corpus(corpus, report, out / "augmented")
    print(f"wrote {len(corpus)} pairs ({report.n_pairs} back-translated)")
    return 0


def cmd_average(a) -> int:
    if a.last < 1:
        raise UsageError("--last must be >= 1")
    paths = latest_checkpoints(a.dir, a.last)
    if not paths:
        raise UsageError(f"no checkpoints in {a.dir}")
    if len(paths) < a.last:
        print(f"warning: only {len(paths)} checkpoints available", file=sys.stderr)
    ckpt = average_checkpoints(paths)
    ckpt.provenance = {**ckpt.provenance, "averaged": [p.name for p in paths]}
    Path(a.output).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(a.output, ckpt)
    print(f"averaged {len(paths)} checkpoints into {a.output}")
    return 0


def cmd_bleu(a) -> int:
    print(bleu(read_lines(a.hyp), read_lines(a.ref)))
    return 0


def cmd_significance(a) -> int:
    sig = bootstrap_significance(read_lines(a.hyp_a), read_lines(a.hyp_b), read_lines(a.ref),
                                 a.resamples, a.p, a.seed)
    verdict = {"A": "A is better", "B": "B is better", "tie": "no significant difference"}[sig.better]
    print(f"{verdict} (p = {sig.p_value:.4f}, A wins {100 * sig.wins_a:.1f}% of resamples)")
    return 0


def cmd_params(a) -> int:
    doc = _load_config(a.config)
    msec = _model_section(doc, a)
    msec.setdefault("src_vocab_size", 8000)
    msec.setdefault("tgt_vocab_size", 8000)
    if a.vocab_size is not None:
        msec["src_vocab_size"] = msec["tgt_vocab_size"] = a.vocab_size
    base = ModelConfig(**{**msec, "stacking": _stacking(msec["stacking"])}).validate()
    rows = [(f"vanilla {n}-layer", Vanilla(n, n)) for n in a.vanilla]
    rows += [(f"recurrent k={k}", Recurrent(k)) for k in a.recurrent]
    print(f"{'model':<20} {'enc':>4} {'dec':>4} {'stored':>6} {'parameters':>12}")
    for label, stack in rows:
        c = with_stacking(base, stack)
        print(f"{label:<20} {c.enc_depth:>4} {c.dec_depth:>4} {c.n_enc_stored:>6} "
              f"{count_parameters(c):>12,}")
    return 0


def _parse_range(text: str) -> range:
    try:
        if ".." in text:
            lo, hi = text.split("..")
            r = range(int(lo), int(hi) + 1)
        else:
            r = range(int(text), int(text) + 1)
    except ValueError:
        raise UsageError(f"bad range {text!r}; use e.g. 1..8") from None
    if not r or r.start < 1:
        raise UsageError(f"bad range {text!r}; need 1 <= lo <= hi")
    return r


def cmd_sweep(a) -> int:
    doc = _load_config(a.config)
    cfg = _decode_config(doc, a)
    ks = _parse_range(a.range)
    w, src_vocab, tgt_vocab = load_model(a.model)
    rows = recurrence_sweep(w, read_lines(a.src), read_lines(a.ref), src_vocab, tgt_vocab,
                            ks, cfg, greedy=a.greedy)
    out = Path(a.out)
    _echo(out, "sweep-recurrence", decode=cfg, model=a.model, range=[ks.start, ks.stop - 1])
    (out / "sweep.json").write_text(json.dumps([asdict(r) for r in rows], indent=2) + "\n",
                                    encoding="utf-8")
    sys.stdout.write(format_sweep(rows))
    return 0


def cmd_gen_toy(a) -> int:
    total = a.pairs + a.dev + a.test
    corpus = toy.make_task(a.task, total, a.vocab_size, a.min_len, a.max_len, a.noise, a.seed)
    out = Path(a.out)
    _echo(out, "gen-toy", task=a.task, pairs=a.pairs, dev=a.dev, test=a.test,
          vocab_size=a.vocab_size, min_len=a.min_len, max_len=a.max_len, noise=a.noise, seed=a.seed)
    bounds = {"train": (0, a.pairs), "dev": (a.pairs, a.pairs + a.dev),
              "test": (a.pairs + a.dev, total)}
    for name, (lo, hi) in bounds.items():
        if hi > lo:
            write_parallel(corpus.subset(range(lo, hi)), out / f"{name}.src", out / f"{name}.tgt")
    print(f"wrote {a.task} corpus ({a.pairs} train / {a.dev} dev / {a.test} test) to {out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _model_flags(p) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--d-model", type=int)
    g.add_argument("--d-ff", type=int)
    g.add_argument("--heads", type=int)
    g.add_argument("--dropout", type=float)
    g.add_argument("--max-positions", type=int)
    s = g.add_mutually_exclusive_group()
    s.add_argument("--recurrences", type=int, help="recurrent stacking with k applications")
    s.add_argument("--layers", type=int, help="vanilla stacking with N layers per side")
    g.add_argument("--share-embeddings", action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--tie-output", action=argparse.BooleanOptionalAction, default=None)


def _decode_flags(p, sweep: bool = False) -> None:
    g = p.add_argument_group("decoding")
    g.add_argument("--beam", type=int)
    g.add_argument("--alpha", type=float)
    g.add_argument("--greedy", action="store_true")
    g.add_argument("--batch-size", type=int)
    if not sweep:
        g.add_argument("--dec-recurrence", type=int)
        g.add_argument("--enc-recurrence", type=int)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rsnmt", description="Recurrently stacked NMT toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def add(name, fn, help_):
        q = sub.add_parser(name, help=help_)
        q.add_argument("--seed", type=int, default=None, help="default: $RSNMT_SEED or 0")
        q.set_defaults(func=fn)
        return q

    q = add("train", cmd_train, "train a model on a parallel corpus")
    q.add_argument("--src", required=True)
    q.add_argument("--tgt", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--config")
    _model_flags(q)
    g = q.add_argument_group("training")
    g.add_argument("--steps", type=int)
    g.add_argument("--warmup", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--batch-tokens", type=int)
    g.add_argument("--label-smoothing", type=float)
    g.add_argument("--checkpoint-every", type=int)
    g.add_argument("--keep-last", type=int)
    g.add_argument("--vocab-size", type=int)
    g.add_argument("--train-fraction", type=float)
    g.add_argument("--init-from-teacher", metavar="CKPT")
    g.add_argument("--l-enc", type=int)
    g.add_argument("--l-dec", type=int)

    q = add("translate", cmd_translate, "translate a tokenized file")
    q.add_argument("--model", required=True)
    q.add_argument("--input", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--config")
    _decode_flags(q)
    q.add_argument("--time", action="store_true", help="report total wall time")
    q.add_argument("--attention-out", metavar="DIR")

    q = add("distill", cmd_distill, "build a distilled corpus with a teacher")
    q.add_argument("--teacher", required=True)
    q.add_argument("--src", required=True)
    q.add_argument("--ref", help="original targets, for the similarity report")
    q.add_argument("--out", required=True)
    q.add_argument("--config")
    q.add_argument("--sample-size", type=int, default=10000)
    _decode_flags(q)

    q = add("augment", cmd_augment, "back-translate target-side monolingual text")
    q.add_argument("--reverse-model", required=True)
    q.add_argument("--mono", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--mix", action="store_true", help="prepend the original corpus")
    q.add_argument("--src")
    q.add_argument("--tgt")
    q.add_argument("--config")
    _decode_flags(q)

    q = add("average", cmd_average, "average the newest checkpoints of a run")
    q.add_argument("--dir", required=True, help="checkpoint directory")
    q.add_argument("--last", type=int, default=10)
    q.add_argument("--output", required=True)

    q = add("bleu", cmd_bleu, "corpus BLEU of a hypothesis file")
    q.add_argument("hyp")
    q.add_argument("ref")

    q = add("significance", cmd_significance, "paired bootstrap test of two systems")
    q.add_argument("hyp_a")
    q.add_argument("hyp_b")
    q.add_argument("ref")
    q.add_argument("--resamples", type=int, default=1000)
    q.add_argument("--p", type=float, default=0.05)

    q = add("params", cmd_params, "parameter counts across stacking modes")
    q.add_argument("--config")
    q.add_argument("--vocab-size", type=int)
    q.add_argument("--vanilla", type=int, nargs="+", default=[1, 6])
    q.add_argument("--recurrent", type=int, nargs="+", default=[6])
    _model_flags(q)

    q = add("sweep-recurrence", cmd_sweep, "decode with every decoder recurrence count in a range")
    q.add_argument("--model", required=True)
    q.add_argument("--src", required=True)
    q.add_argument("--ref", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--range", default="1..8")
    q.add_argument("--config")
    _decode_flags(q, sweep=True)

    q = add("gen-toy", cmd_gen_toy, "write a synthetic parallel corpus")
    q.add_argument("--task", choices=toy.TASKS, default="reverse")
    q.add_argument("--pairs", type=int, default=2000)
    q.add_argument("--dev", type=int, default=0)
    q.add_argument("--test", type=int, default=0)
    q.add_argument("--vocab-size", type=int, default=50)
    q.add_argument("--min-len", type=int, default=4)
    q.add_argument("--max-len", type=int, default=10)
    q.add_argument("--noise", type=float, default=0.0)
    q.add_argument("--out", required=True)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
        if a.command is None:
            parser.print_help(sys.stderr)
            return 1
        if a.seed is None:
            a.seed = _env_seed()
        logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                            format="%(asctime)s %(message)s", stream=sys.stderr)
        return a.func(a)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 1
    except (OSError, CheckpointFormatError, TrainingError, ValueError) as e:
        print(f"failed: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
