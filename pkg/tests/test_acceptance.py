"""Acceptance criteria, one test per criterion.

Each test prints a ``PASS``/``FAIL`` line with its measurements, and the
same lines are repeated in the terminal summary. Run on its own with::

    pytest tests/test_acceptance.py -v

Criteria 5 to 7 train small models and take several minutes.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import statistics
import time
import zlib
from contextlib import contextmanager

import numpy as np
import pytest

from rsnmt import tensor as T
from rsnmt.cli import run as cli
from rsnmt.data import EOS
from rsnmt.decoding import (DecodeConfig, beam_decode, beam_search, greedy_decode,
                            recurrence_sweep)
from rsnmt.evaluation import (AttentionTrace, attention_entropy, bleu, trace_from_json,
                              trace_to_json)
from rsnmt.model import (ConfigError, ModelConfig, Recurrent, Vanilla, build_model,
                         count_parameters, decode_forward, encode, forward_loss,
                         tied_copy_vanilla, with_stacking)
from rsnmt.training import Checkpoint, average_checkpoints, load_checkpoint, save_checkpoint
from rsnmt.transfer import DistillConfig, TransferConfig, distill_corpus, init_from_teacher

import gradcases
from conftest import random_batch, tiny_config
from oracles import clipped_matches, corpus_bleu, enumerate_best, exact_mean, transformer_params
from test_decoding import HAND_TREE, TreeScorer, hand_table
from toytrend import Setup, fit

RESULTS: list[str] = []


@contextmanager
def criterion(number: int, title: str, budget: float | None = None):
    """Record one PASS/FAIL line; ``notes`` collects measurements to print."""
    notes: list[str] = []
    start = time.perf_counter()
    try:
        yield notes
        seconds = time.perf_counter() - start
        if budget is not None:
            notes.append(f"{seconds:.1f}s of {budget:.0f}s")
            assert seconds < budget, f"took {seconds:.1f}s, budget {budget:.0f}s"
        else:
            notes.append(f"{seconds:.1f}s")
    except BaseException as e:
        line = f"FAIL criterion {number:>2}: {title} [{'; '.join(notes)}] {type(e).__name__}: {e}"
        RESULTS.append(line)
        print(line)
        raise
    line = f"PASS criterion {number:>2}: {title} [{'; '.join(notes)}]"
    RESULTS.append(line)
    print(line)


def _random_config(rng) -> ModelConfig:
    h = int(rng.choice([1, 2, 4, 8]))
    shared = bool(rng.integers(2))
    v_src = int(rng.integers(5, 3000))
    v_tgt = v_src if shared else int(rng.integers(5, 3000))
    return ModelConfig(v_src, v_tgt, h * int(rng.integers(1, 33)), int(rng.integers(1, 2049)), h,
                       Recurrent(1), share_src_tgt_embedding=shared,
                       tie_output_projection=bool(rng.integers(2)))


def test_01_parameter_identity():
    rng = np.random.default_rng(1)
    with criterion(1, "Count(RS(k)) == Count(Vanilla(1,1)); Vanilla grows with N", 1.0) as notes:
        checked = 0
        for _ in range(20):
            cfg = _random_config(rng)
            one = count_parameters(with_stacking(cfg, Vanilla(1, 1)))
            for k in (1, 2, 6, 24):
                assert count_parameters(with_stacking(cfg, Recurrent(k))) == one, (cfg, k)
                checked += 1
            counts = [count_parameters(with_stacking(cfg, Vanilla(n, n))) for n in range(1, 7)]
            assert all(a < b for a, b in zip(counts, counts[1:])), counts
            assert counts[0] == transformer_params(cfg.src_vocab_size, cfg.tgt_vocab_size,
                                                   cfg.d_model, cfg.d_ff, 1, 1,
                                                   cfg.share_src_tgt_embedding,
                                                   cfg.tie_output_projection)
        notes.append(f"{checked} equalities on 20 configs")


def _layer_grads(layers):
    """Per-name gradients of a list of layers, in declaration order."""
    return [{n: p.grad for n, p in layer.named("")} for layer in layers]


def test_02_unrolling_oracle(rng):
    with criterion(2, "RS(k) equals its tied-copy Vanilla(k), forward and gradient", 10.0) as notes:
        worst_fwd = worst_grad = 0.0
        for k in (1, 2, 3, 6):
            w = build_model(tiny_config(Recurrent(k), V=20, d=16, f=32, h=4), seed=k)
            v = tied_copy_vanilla(w)
            assert v.config.stacking == Vanilla(k, k)
            src, tgt = random_batch(rng, 3, 20), random_batch(rng, 3, 20)
            losses = []
            for model in (w, v):
                model.zero_grad()
                with T.Tape() as tape:
                    loss = forward_loss(model, src.ids, src.mask, tgt.ids, tgt.mask)
                T.backward(loss, tape)
                losses.append(loss)
            with T.no_grad():
                outs = []
                for model in (w, v):
                    mem, _ = encode(model, src.ids, src.mask)
                    logits, _ = decode_forward(model, mem, src.mask, tgt.ids[:, :-1],
                                               tgt.mask[:, :-1])
                    outs.append(logits.data)
            assert outs[0].dtype == np.float32
            worst_fwd = max(worst_fwd, float(np.abs(outs[0] - outs[1]).max()))
            for side in ("encoder_layers", "decoder_layers"):
                rs = _layer_grads(getattr(w, side))[0]
                tied = _layer_grads(getattr(v, side))
                for name, g in rs.items():
                    total = sum(t[name] for t in tied)
                    worst_grad = max(worst_grad, float(np.abs(g - total).max()))
        notes.append(f"max |logit diff| {worst_fwd:.1e}, max |grad diff| {worst_grad:.1e}")
        assert worst_fwd <= 1e-5 and worst_grad <= 1e-5


def test_03_gradient_correctness():
    with criterion(3, "analytic gradients match central differences (float64)", 60.0) as notes:
        worst = {}
        for name, gen in gradcases.CASES.items():
            rng = np.random.default_rng(zlib.crc32(name.encode()))
            worst[name] = max(gradcases.check(*gen(rng), rng) for _ in range(50))
        bad = {k: v for k, v in worst.items() if not v < 1e-4}
        top = max(worst, key=worst.get)
        notes.append(f"{len(worst)} ops x 50 cases, worst {worst[top]:.1e} ({top})")
        assert not bad, bad


def test_04_decoding_identities():
    rng = np.random.default_rng(4)
    with criterion(4, "beam1/alpha0 == greedy; k override identity; exhaustive tree", 30.0) as notes:
        for i in range(100):
            stacking = Recurrent(int(rng.integers(1, 4))) if i % 2 else Vanilla(1, 2)
            V = int(rng.integers(8, 20))
            w = build_model(tiny_config(stacking, V=V, d=8, f=16), seed=i)
            src = random_batch(rng, int(rng.integers(1, 4)), V)
            cfg = DecodeConfig(beam_size=1, alpha=0.0, max_len_a=int(rng.integers(1, 8)),
                               max_len_b=1.0)
            g, b = greedy_decode(w, src, cfg).hypotheses, beam_decode(w, src, cfg).hypotheses
            assert [(h.tokens, h.eos) for h in g] == [(h.tokens, h.eos) for h in b], i
        notes.append("100 greedy pairs")
        for k in (1, 2, 4):
            w = build_model(tiny_config(Recurrent(k), V=16), seed=k)
            src = random_batch(rng, 4, 16)
            base = beam_decode(w, src, DecodeConfig(beam_size=3, alpha=0.6, max_len_a=6))
            same = beam_decode(w, src, DecodeConfig(beam_size=3, alpha=0.6, max_len_a=6,
                                                    enc_recurrences=k, dec_recurrences=k))
            assert [(h.tokens, h.score, h.logprob) for h in base.hypotheses] == \
                [(h.tokens, h.score, h.logprob) for h in same.hypotheses]
        notes.append("override bit-identical for k=1,2,4")
        for K in (2, 3):
            for alpha in (0.0, 0.6, 1.0, 2.0):
                best, _ = beam_search(TreeScorer(hand_table), [2], K, alpha)
                seq, score = enumerate_best(hand_table, EOS, 2, alpha)
                assert tuple(best[0].tokens) + ((EOS,) if best[0].eos else ()) == seq
                assert best[0].score == pytest.approx(score, abs=1e-12)
        notes.append(f"hand tree ({len(HAND_TREE)} nodes) matches enumeration")


# ---------------------------------------------------------------------------
# toy trends
# ---------------------------------------------------------------------------

SEEDS = (0, 1, 2)
DEPTH = Setup()


@pytest.fixture(scope="session")
def depth_runs():
    start = time.perf_counter()
    runs = {(k, s): fit(DEPTH, Recurrent(k), s) for s in SEEDS for k in (4, 1)}
    return runs, time.perf_counter() - start


@pytest.mark.slow
def test_05_depth_helps(depth_runs):
    runs, seconds = depth_runs
    with criterion(5, "median BLEU RS(4) >= RS(1) + 2 on toy reversal") as notes:
        rs4 = [runs[4, s].bleu for s in SEEDS]
        rs1 = [runs[1, s].bleu for s in SEEDS]
        notes.append(f"RS(4) {_fmt(rs4)} median {statistics.median(rs4):.2f}")
        notes.append(f"RS(1) {_fmt(rs1)} median {statistics.median(rs1):.2f}")
        notes.append(f"training+eval {seconds:.0f}s of 600s")
        assert statistics.median(rs4) >= statistics.median(rs1) + 2.0
        assert seconds < 600


def _fmt(xs):
    return "[" + ", ".join(f"{x:.1f}" for x in xs) + "]"


@pytest.mark.slow
def test_07_recurrence_sweep_shape(depth_runs):
    runs, _ = depth_runs
    with criterion(7, "decoder recurrence sweep peaks at k_dec in {3,4,5}") as notes:
        _, test, _ = DEPTH.corpora()
        curves = []
        for s in SEEDS:
            r = runs[4, s]
            rows = recurrence_sweep(r.weights, test.sources, test.targets, r.vocab, r.vocab,
                                    range(1, 9), DEPTH.decode_config())
            curves.append([row.bleu for row in rows])
            notes.append(f"seed {s} {_fmt(curves[-1])}")
        median = [statistics.median(c[i] for c in curves) for i in range(8)]
        peak = int(np.argmax(median)) + 1
        notes.append(f"median {_fmt(median)}, peak k_dec={peak}")
        assert peak in (3, 4, 5)
        assert median[0] <= max(median) - 5.0


# one target token in twenty is corrupted; the held-out references are clean
NOISY = Setup(noise=0.05)
# the six-layer post-norm teacher needs a longer schedule to get past its plateau
TEACHER = dataclasses.replace(NOISY, steps=3000)


@pytest.mark.slow
def test_06_distillation_helps():
    with criterion(6, "RS(2) student: distilled corpus >= original - 0.5 BLEU", 1200.0) as notes:
        train_set, _, _ = NOISY.corpora()
        teacher = fit(TEACHER, Vanilla(6, 6), seed=0)
        notes.append(f"teacher Vanilla(6) {teacher.bleu:.1f}")
        d = DistillConfig("in-memory", beam_size=NOISY.beam, alpha=NOISY.alpha)
        distilled, report = distill_corpus((teacher.weights, teacher.vocab, teacher.vocab),
                                           train_set.sources, d, train_set.targets)
        notes.append(f"{report.n_pairs} distilled pairs, BLEU vs noisy targets "
                     f"{report.sample_bleu:.1f}")
        dist = [fit(NOISY, Recurrent(2), s, distilled).bleu for s in SEEDS]
        orig = [fit(NOISY, Recurrent(2), s).bleu for s in SEEDS]
        notes.append(f"distilled {_fmt(dist)} original {_fmt(orig)}")
        assert statistics.median(dist) >= statistics.median(orig) - 0.5


# ---------------------------------------------------------------------------
# algebra, metrics, determinism
# ---------------------------------------------------------------------------

def test_08_checkpoint_algebra(tmp_path):
    with criterion(8, "exact averaging, bit-exact round trip, layer-transfer copy") as notes:
        rng = np.random.default_rng(8)
        with T.precision(np.float64):
            cfg = tiny_config(Recurrent(2), tie_output_projection=False)
            cks = []
            for s in range(3):
                w = build_model(cfg, seed=s)
                for p in w.parameters():
                    p.data = rng.normal(size=p.shape) * 10.0 ** rng.integers(-6, 7, size=p.shape)
                cks.append(Checkpoint.from_weights(w, step=s))
        avg = average_checkpoints(cks)
        for name, arr in avg.arrays.items():
            assert np.array_equal(arr, exact_mean([c.arrays[name] for c in cks])), name
        notes.append(f"mean of 3 exact over {len(avg.arrays)} arrays")

        for dtype in (np.float32, np.float64):
            with T.precision(dtype):
                w = build_model(tiny_config(Vanilla(3, 2)), seed=3)
            save_checkpoint(tmp_path / "ck", Checkpoint.from_weights(w, 5, {"k": 1}))
            back = load_checkpoint(tmp_path / "ck")
            for name, arr in w.state_dict().items():
                assert back.arrays[name].dtype == arr.dtype
                assert back.arrays[name].tobytes() == arr.tobytes()
        notes.append("round trip bit-exact in float32 and float64")

        teacher = build_model(tiny_config(Vanilla(3, 2)), seed=1)
        frozen = copy.deepcopy(teacher.state_dict())
        sc = with_stacking(teacher.config, Recurrent(4))
        for l_enc, l_dec in ((1, 1), (2, 2), (3, 1)):
            s = init_from_teacher(sc, TransferConfig("mem", l_enc, l_dec), teacher=teacher)
            for a, b in ((s.encoder_layers[0], teacher.encoder_layers[l_enc - 1]),
                         (s.decoder_layers[0], teacher.decoder_layers[l_dec - 1])):
                for (_, p), (_, q) in zip(a.named(""), b.named("")):
                    assert p.data.tobytes() == q.data.tobytes() and p is not q
        assert all(np.array_equal(teacher.state_dict()[n], a) for n, a in frozen.items())
        for l_enc, l_dec in ((0, 1), (4, 1), (1, 3), (1, -1)):
            with pytest.raises(ConfigError):
                init_from_teacher(sc, TransferConfig("mem", l_enc, l_dec), teacher=teacher)
        notes.append("transfer copies exact, 4 out-of-range cases rejected")


def test_09_metric_suite(rng, tmp_path):
    with criterion(9, "BLEU, entropy and attention trace invariants") as notes:
        ref = "the quick brown fox jumps over the lazy dog".split()
        assert bleu([ref], [ref]).bleu == 100.0
        assert bleu([["a", "b", "c", "d"]], [["e", "f", "g", "h"]]).bleu == 0.0
        hyp = "the cat sat on the mat today".split()
        ref = "the cat sat on a mat today".split()
        r = bleu([hyp], [ref])
        for n in range(1, 5):
            m, t = clipped_matches(hyp, ref, n)
            assert r.precisions[n - 1] == pytest.approx(m / t, abs=1e-12)
        assert r.bleu == pytest.approx(corpus_bleu([hyp], [ref]), abs=1e-6)
        assert r.bleu == pytest.approx(48.8923022434901, abs=1e-6)
        notes.append(f"hand example BLEU {r.bleu:.4f}")

        assert attention_entropy(np.eye(7)[3]) == 0.0
        for L in (1, 2, 3, 10, 97):
            assert attention_entropy(np.full(L, 1.0 / L)) == pytest.approx(np.log(L), abs=1e-12)

        w = build_model(tiny_config(Recurrent(3), V=16), seed=2)
        src = random_batch(rng, 4, 16)
        rows = 0
        for dec_k in (1, 3, 6):
            res = beam_decode(w, src, DecodeConfig(beam_size=3, max_len_a=6, capture_attention=True,
                                                   dec_recurrences=dec_k))
            for tr in res.traces:
                for layer in tr.layers:
                    assert np.all(np.abs(layer.sum(axis=-1) - 1.0) <= 1e-6)
                    rows += layer.shape[0] * layer.shape[1]
                doc = json.loads(json.dumps(trace_to_json(tr)))
                back = trace_from_json(doc)
                assert isinstance(back, AttentionTrace)
                assert back.source == tr.source and back.target == tr.target
                assert all(a.dtype == b.dtype and np.array_equal(a, b)
                           for a, b in zip(tr.layers, back.layers))
        notes.append(f"{rows} attention rows sum to 1, JSON exact")


def _write_toy(tmp_path):
    assert cli(["gen-toy", "--pairs", "200", "--vocab-size", "16", "--min-len", "2",
                "--max-len", "6", "--out", str(tmp_path / "toy"), "--seed", "1"]) == 0
    return tmp_path / "toy"


def test_10_determinism(tmp_path):
    with criterion(10, "train and distill are byte-reproducible") as notes:
        toy = _write_toy(tmp_path)
        args = ["--src", str(toy / "train.src"), "--tgt", str(toy / "train.tgt"),
                "--d-model", "16", "--d-ff", "32", "--heads", "2", "--dropout", "0.1",
                "--steps", "200", "--warmup", "40", "--lr", "1.0", "--batch-tokens", "120",
                "--checkpoint-every", "100", "--seed", "7"]
        for run_id in ("a", "b"):
            assert cli(["train", "--out", str(tmp_path / run_id), "--layers", "2", *args]) == 0
        for name in ("model.rsnmt", "checkpoints/ckpt-00000100.rsnmt",
                     "checkpoints/ckpt-00000200.rsnmt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        notes.append("two train runs identical")
        for run_id in ("da", "db"):
            assert cli(["distill", "--teacher", str(tmp_path / "a" / "model.rsnmt"),
                        "--src", str(toy / "train.src"), "--ref", str(toy / "train.tgt"),
                        "--out", str(tmp_path / run_id), "--beam", "3", "--sample-size", "25",
                        "--seed", "7"]) == 0
        for name in ("distilled.src", "distilled.tgt", "distilled.report.json"):
            assert (tmp_path / "da" / name).read_bytes() == (tmp_path / "db" / name).read_bytes()
        n = len((tmp_path / "da" / "distilled.src").read_text().splitlines())
        assert n > 0
        notes.append(f"two distill runs identical ({n} pairs)")
