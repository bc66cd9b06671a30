import struct

import numpy as np
import pytest

from rsnmt import tensor as T
from rsnmt.data import build_vocab, encode_corpus
from rsnmt.model import ConfigError, Recurrent, Vanilla, build_model
from rsnmt.tensor import Tensor
from rsnmt.toy import make_task
from rsnmt.training import (MAGIC, Adam, Checkpoint, CheckpointFormatError, TrainConfig,
                            TrainingError, average_checkpoints, latest_checkpoints,
                            load_checkpoint, load_model, load_weights, lr_at, save_checkpoint,
                            save_model, train, train_step)

from conftest import random_batch, tiny_config
from oracles import exact_mean, lr


@pytest.mark.parametrize("step", [1, 2, 50, 3999, 4000, 4001, 10**5])
def test_schedule_matches_oracle(step):
    assert lr_at(step, 4000, 512) == pytest.approx(lr(step, 4000, 512), rel=1e-12)


def test_schedule_peak_and_errors():
    assert lr_at(100, 100, 64, 2.0) == pytest.approx(2.0 / (8 * 10))
    with pytest.raises(ValueError):
        lr_at(0, 10, 64)


def test_adam_two_steps_by_hand(f64):
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam([("p", p)], 0.9, 0.98, 1e-9)
    g1, g2 = np.array([0.5, -1.0]), np.array([0.1, 0.3])
    opt.step([("p", p)], 0.1, {"p": g1})
    # first step: m_hat = g, v_hat = g^2, update = g / |g|
    np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-8)
    opt.step([("p", p)], 0.1, {"p": g2})
    m = 0.9 * 0.1 * g1 + 0.1 * g2
    v = 0.98 * 0.02 * g1 ** 2 + 0.02 * g2 ** 2
    upd = (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.98 ** 2)) + 1e-9)
    np.testing.assert_allclose(p.data, np.array([0.9, -1.9]) - 0.1 * upd, atol=1e-12)


def test_train_step_lowers_loss(rng):
    w = build_model(tiny_config(Recurrent(2)), seed=0)
    src, tgt = random_batch(rng, 4, 12), random_batch(rng, 4, 12)
    cfg = TrainConfig(warmup_steps=10, base_lr=1.0, label_smoothing=0.0)
    opt = Adam(w.named_parameters())
    losses = [train_step(w, src, tgt, opt, s, cfg) for s in range(1, 41)]
    assert losses[-1] < 0.5 * losses[0]


def test_non_finite_loss_aborts(rng):
    w = build_model(tiny_config(), seed=0)
    w.encoder_layers[0].ffn_w1.data[:] = np.nan
    src, tgt = random_batch(rng, 2, 12), random_batch(rng, 2, 12)
    with pytest.raises(TrainingError, match="step 7"):
        train_step(w, src, tgt, Adam(w.named_parameters()), 7, TrainConfig())


def _toy_pairs(n=60):
    c = make_task("reverse", n, vocab_size=12, min_len=2, max_len=5, seed=0)
    v = build_vocab(c.sources + c.targets, 12)
    return encode_corpus(c, v, v), v


def test_train_keeps_last_checkpoints(tmp_path):
    pairs, v = _toy_pairs()
    w = build_model(tiny_config(V=len(v)), seed=0)
    cfg = TrainConfig(total_steps=12, warmup_steps=5, batch_tokens=40, checkpoint_every=3, keep_last=2)
    res = train(w, pairs, cfg, tmp_path)
    names = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
    assert names == ["ckpt-00000009.rsnmt", "ckpt-00000012.rsnmt"]
    assert len(res.losses) == 12
    assert [p.name for p in latest_checkpoints(tmp_path / "checkpoints", 1)] == ["ckpt-00000012.rsnmt"]


def test_train_is_deterministic():
    pairs, v = _toy_pairs()
    out = []
    for _ in range(2):
        w = build_model(tiny_config(V=len(v), dropout=0.1), seed=5)
        train(w, pairs, TrainConfig(total_steps=6, warmup_steps=3, batch_tokens=40, seed=5))
        out.append(w.state_dict())
    assert all(np.array_equal(out[0][k], out[1][k]) for k in out[0])


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_checkpoint_roundtrip_is_bit_exact(tmp_path, dtype):
    with T.precision(dtype):
        w = build_model(tiny_config(Vanilla(2, 1), tie_output_projection=False), seed=9)
    w.provenance = {"init": "test"}
    save_checkpoint(tmp_path / "a.rsnmt", Checkpoint.from_weights(w, 17, {"note": 1}))
    ck = load_checkpoint(tmp_path / "a.rsnmt")
    assert ck.step == 17 and ck.extra == {"note": 1} and ck.provenance == {"init": "test"}
    assert ck.config == w.config
    for name, arr in w.state_dict().items():
        assert ck.arrays[name].dtype == dtype
        assert ck.arrays[name].tobytes() == arr.tobytes()
    v = load_weights(tmp_path / "a.rsnmt")
    assert all(np.array_equal(v.state_dict()[k], a) for k, a in w.state_dict().items())


def test_checkpoint_layout(tmp_path):
    w = build_model(tiny_config(), seed=0)
    save_checkpoint(tmp_path / "c", Checkpoint.from_weights(w))
    raw = (tmp_path / "c").read_bytes()
    assert raw.startswith(MAGIC)
    (n,) = struct.unpack_from("<I", raw, len(MAGIC))
    assert raw[len(MAGIC) + 4 + n:].__len__() == sum(a.size * 4 for a in w.state_dict().values())


def test_corrupt_checkpoints(tmp_path):
    w = build_model(tiny_config(), seed=0)
    path = tmp_path / "c"
    save_checkpoint(path, Checkpoint.from_weights(w))
    raw = path.read_bytes()
    (tmp_path / "magic").write_bytes(b"XXXXXX" + raw[6:])
    (tmp_path / "short").write_bytes(raw[:-3])
    (tmp_path / "tiny").write_bytes(raw[:8])
    for name, pattern in [("magic", "magic"), ("short", "data bytes"), ("tiny", "truncated")]:
        with pytest.raises(CheckpointFormatError, match=pattern):
            load_checkpoint(tmp_path / name)


def test_average_is_exact_and_order_free(f64):
    rng = np.random.default_rng(0)
    cfg = tiny_config()
    cks = []
    for s in range(3):
        w = build_model(cfg, seed=s)
        for p in w.parameters():
            p.data = rng.normal(size=p.shape) * 10.0 ** rng.integers(-8, 8, size=p.shape)
        cks.append(Checkpoint.from_weights(w, step=s * 10))
    avg = average_checkpoints(cks)
    rev = average_checkpoints(cks[::-1])
    assert avg.step == 20
    for name in avg.arrays:
        want = exact_mean([c.arrays[name] for c in cks])
        assert np.array_equal(avg.arrays[name], want)
        assert np.array_equal(rev.arrays[name], want)


def test_average_rejects_mismatch():
    a = Checkpoint.from_weights(build_model(tiny_config(Recurrent(2))))
    b = Checkpoint.from_weights(build_model(tiny_config(Recurrent(3))))
    with pytest.raises(ConfigError):
        average_checkpoints([a, b])
    with pytest.raises(ValueError):
        average_checkpoints([])


def test_model_bundle_keeps_vocab(tmp_path):
    pairs, v = _toy_pairs()
    w = build_model(tiny_config(V=len(v)), seed=0)
    save_model(tmp_path / "m", w, v, v, step=3)
    w2, sv, tv = load_model(tmp_path / "m")
    assert sv == v and tv == v
    save_checkpoint(tmp_path / "bare", Checkpoint.from_weights(w))
    with pytest.raises(CheckpointFormatError, match="vocabularies"):
        load_model(tmp_path / "bare")
