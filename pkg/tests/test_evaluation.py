import json
import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rsnmt.evaluation import (AttentionTrace, attention_entropy, attention_stats, bleu,
                              bootstrap_significance, export_attention, sentence_stats,
                              trace_from_json, trace_to_json)

from oracles import corpus_bleu

CAT_HYP = "the cat sat on the mat".split()
CAT_REF = "the cat is on the mat".split()


def test_identical_is_100():
    assert bleu([CAT_REF], [CAT_REF]).bleu == 100.0


def test_disjoint_is_0():
    assert bleu([["a", "b", "c", "d"]], [["w", "x", "y", "z"]]).bleu == 0.0


def test_cat_example_counts():
    r = bleu([CAT_HYP], [CAT_REF])
    # hand counts: 5/6 unigrams, 3/5 bigrams, 1/4 trigrams, 0/3 4-grams
    assert r.precisions == [5 / 6, 3 / 5, 1 / 4, 0.0]
    assert r.bleu == 0.0


@pytest.mark.parametrize("hyps, refs, want", [
    (["the cat sat on the mat today"], ["the cat sat on a mat today"], 48.8923022434901),
    (["a b c d e", "the cat sat on the mat today"],
     ["a b c d e f g", "the cat sat on a mat today"], 58.56733305775164),
])
def test_frozen_values(hyps, refs, want):
    assert bleu(hyps, refs).bleu == pytest.approx(want, abs=1e-6)


def test_lowercases():
    assert bleu([["The", "CAT", "sat", "down"]], [["the", "cat", "sat", "down"]]).bleu == 100.0
    assert bleu([["The", "CAT", "sat", "down"]], [["the", "cat", "sat", "down"]],
                lowercase=False).bleu == 0.0


def test_brevity_penalty():
    r = bleu(["a b c d"], ["a b c d e f"])
    assert r.brevity_penalty == pytest.approx(math.exp(1 - 6 / 4))


def test_length_mismatch():
    with pytest.raises(ValueError):
        bleu(["a"], [])


words = st.lists(st.sampled_from(list("abcde")), min_size=0, max_size=9)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(words, words), min_size=1, max_size=5))
def test_matches_oracle(pairs):
    hyps, refs = [h for h, _ in pairs], [r for _, r in pairs]
    assert bleu(hyps, refs).bleu == pytest.approx(corpus_bleu(hyps, refs), abs=1e-6)


def test_sentence_stats_layout():
    s = sentence_stats("a a b", "a b b", max_order=2)
    assert s.tolist() == [2, 1, 3, 2, 3, 3]


def test_bootstrap():
    refs = [f"w{i} x{i} y{i} z{i}".split() for i in range(40)]
    good = [list(r) for r in refs]
    bad = [r[:2] + ["q", "q"] for r in refs]
    sig = bootstrap_significance(good, bad, refs, resamples=200, seed=1)
    assert sig.better == "A" and sig.wins_a == 1.0
    tie = bootstrap_significance(good, good, refs, resamples=50)
    assert tie.better == "tie" and tie.wins_a == 0.5
    assert bootstrap_significance(bad, good, refs, resamples=50).better == "B"
    again = bootstrap_significance(good, bad, refs, resamples=200, seed=1)
    assert again == sig


def test_entropy_bounds():
    assert attention_entropy([0.0, 1.0, 0.0]) == 0.0
    for L in (1, 2, 7, 50):
        assert attention_entropy(np.full(L, 1.0 / L)) == pytest.approx(math.log(L), abs=1e-12)


def test_entropy_rejects_non_distributions():
    with pytest.raises(ValueError):
        attention_entropy([0.5, 0.2])
    with pytest.raises(ValueError):
        attention_entropy([1.5, -0.5])
    with pytest.raises(ValueError):
        attention_entropy([])


def _trace(rng, L=3, H=2, P=4, S=5):
    layers = [rng.dirichlet(np.ones(S), size=(H, P)).astype(np.float32) for _ in range(L)]
    return AttentionTrace([f"s{i}" for i in range(S)], [f"t{i}" for i in range(P)], layers)


def test_stats_shapes(rng):
    tr = _trace(rng)
    st_ = attention_stats(tr)
    assert st_.row_entropy.shape == (3, 2, 4)
    assert st_.mean_entropy.shape == (3, 2)
    assert st_.drift.shape == (2, 2)
    assert st_.max_entropy == pytest.approx(math.log(5))


def test_json_roundtrip_exact(rng):
    tr = _trace(rng)
    doc = json.loads(json.dumps(trace_to_json(tr)))
    back = trace_from_json(doc)
    assert back.source == tr.source and back.target == tr.target
    for a, b in zip(tr.layers, back.layers):
        assert a.dtype == b.dtype and np.array_equal(a, b)
    assert list(doc) == ["sentence", "target", "position", "layers", "entropies",
                         "row_entropies", "recurrence_drift"]


def test_export_files(tmp_path, rng):
    tr = _trace(rng)
    paths = export_attention(tr, tmp_path, position=2)
    names = sorted(p.name for p in paths)
    assert names == ["attention.json", "entropy.svg", "layer-00.svg", "layer-01.svg", "layer-02.svg"]
    root = ET.parse(tmp_path / "layer-01.svg").getroot()
    cells = [e for e in root.iter("{http://www.w3.org/2000/svg}rect") if e.get("class") == "cell"]
    assert len(cells) == 2 * 5
    with pytest.raises(ValueError):
        export_attention(tr, tmp_path, position=9)
