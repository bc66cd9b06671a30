"""Teacher-forced training, the warmup schedule, and checkpoint files.

Checkpoint layout (all integers little-endian)::

    b"RSNMT1" | uint32 header_len | header (UTF-8 JSON) | raw arrays

The header carries the model config, step, precision, provenance and an array
manifest ``[{name, shape, offset}]``; arrays follow in manifest order.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import make_batches
from .model import ConfigError, ModelConfig, ModelWeights, build_model, forward_loss

log = logging.getLogger(__name__)

MAGIC = b"RSNMT1"
FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointFormatError(ValueError):
    pass


@dataclass
class TrainConfig:
    total_steps: int = 1000
    warmup_steps: int = 4000
    base_lr: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    label_smoothing: float = 0.1
    batch_tokens: int = 2048
    checkpoint_every: int = 0
    keep_last: int = 10
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.warmup_steps < 1:
            raise ValueError(f"warmup_steps must be >= 1, got {self.warmup_steps}")
        if self.keep_last < 1:
            raise ValueError(f"keep_last must be >= 1, got {self.keep_last}")
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")
        return self


def lr_at(step: int, warmup_steps: int, d_model: int, base_lr: float = 1.0) -> float:
    """Inverse square-root decay after a linear warmup."""
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    return base_lr * d_model ** -0.5 * min(step ** -0.5, step * warmup_steps ** -1.5)


class Adam:
    def __init__(self, named: Sequence[tuple[str, T.Tensor]], beta1=0.9, beta2=0.98, eps=1e-9):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(p.data) for n, p in named}
        self.v = {n: np.zeros_like(p.data) for n, p in named}
        self.t = 0

    def step(self, named: Sequence[tuple[str, T.Tensor]], lr: float,
             grads: dict[str, np.ndarray] | None = None) -> None:
        """Apply one update. ``grads`` overrides ``p.grad`` per name."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for name, p in named:
            g = grads[name] if grads is not None else p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - lr * update).astype(p.data.dtype, copy=False)


def train_step(w: ModelWeights, src, tgt, opt: Adam, step: int, cfg: TrainConfig,
               rng: np.random.Generator | None = None, lr: float | None = None) -> float:
    """One teacher-forced forward/backward pass and one Adam update."""
    w.zero_grad()
    with T.Tape() as tape:
        loss = forward_loss(w, src.ids, src.mask, tgt.ids, tgt.mask,
                            cfg.label_smoothing, rng=rng)
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at step {step}")
    T.backward(loss, tape)
    if lr is None:
        lr = lr_at(step, cfg.warmup_steps, w.config.d_model, cfg.base_lr)
    opt.step(w.named_parameters(), lr)
    return value


@dataclass
class TrainResult:
    weights: ModelWeights
    losses: list[float] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def train(w: ModelWeights, pairs, cfg: TrainConfig, out_dir=None,
          extra_header: dict | None = None,
          on_step: Callable[[int, float], None] | None = None) -> TrainResult:
    """Train ``w`` in place for ``cfg.total_steps`` steps over encoded ``pairs``.

    With ``out_dir`` set, checkpoints are written every ``checkpoint_every``
    steps into ``out_dir/checkpoints``, keeping the newest ``keep_last``.
    """
    cfg.validate()
    opt = Adam(w.named_parameters(), cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed) if w.config.dropout > 0 else None
    result = TrainResult(w)
    ckpt_dir = None
    if out_dir is not None and cfg.checkpoint_every > 0:
        ckpt_dir = Path(out_dir) / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    step, epoch = 0, 0
    while step < cfg.total_steps:
        batches = make_batches(pairs, cfg.batch_tokens, seed=cfg.seed + epoch,
                               max_positions=w.config.max_positions)
        for src, tgt in batches:
            step += 1
            loss = train_step(w, src, tgt, opt, step, cfg, rng)
            result.losses.append(loss)
            if on_step is not None:
                on_step(step, loss)
            if ckpt_dir is not None and step % cfg.checkpoint_every == 0:
                path = ckpt_dir / f"ckpt-{step:08d}.rsnmt"
                save_checkpoint(path, Checkpoint.from_weights(w, step, extra_header))
                result.checkpoints.append(path)
                while len(result.checkpoints) > cfg.keep_last:
                    result.checkpoints.pop(0).unlink(missing_ok=True)
            if step >= cfg.total_steps:
                break
        epoch += 1
    w.zero_grad()
    return result


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: ModelConfig
    arrays: dict[str, np.ndarray]
    step: int = 0
    provenance: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def precision(self) -> str:
        dtypes = {a.dtype for a in self.arrays.values()}
        return "float64" if np.dtype(np.float64) in dtypes else "float32"

    @classmethod
    def from_weights(cls, w: ModelWeights, step: int = 0, extra: dict | None = None) -> "Checkpoint":
        arrays = {name: t.data.copy() for name, t in w.named_parameters()}
        return cls(w.config, arrays, step, dict(w.provenance), dict(extra or {}))

    def to_weights(self) -> ModelWeights:
        with T.precision(self.precision):
            w = build_model(self.config, seed=0)
        w.load_state_dict(self.arrays)
        w.provenance = dict(self.provenance)
        return w


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    dtype = np.dtype("<f8") if ckpt.precision == "float64" else np.dtype("<f4")
    manifest, blobs, offset = [], [], 0
    for name, a in ckpt.arrays.items():
        raw = np.ascontiguousarray(a, dtype=dtype).tobytes()
        manifest.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "step": ckpt.step,
        "precision": ckpt.precision,
        "config": ckpt.config.to_dict(),
        "provenance": ckpt.provenance,
        "extra": ckpt.extra,
        "arrays": manifest,
        "data_bytes": offset,
    }
    head = json.dumps(header, sort_keys=False).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(head)))
        f.write(head)
        for raw in blobs:
            f.write(raw)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic bytes {buf[:len(MAGIC)]!r}")
    pos = len(MAGIC)
    if len(buf) < pos + 4:
        raise CheckpointFormatError(f"{path}: truncated header")
    (hlen,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if len(buf) < pos + hlen:
        raise CheckpointFormatError(f"{path}: truncated header")
    try:
        header = json.loads(buf[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{path}: unreadable header ({e})") from e
    pos += hlen
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported format version {header.get('format_version')}")
    dtype = np.dtype("<f8") if header["precision"] == "float64" else np.dtype("<f4")
    if len(buf) - pos != header["data_bytes"]:
        raise CheckpointFormatError(f"{path}: expected {header['data_bytes']} data bytes, "
                                    f"found {len(buf) - pos}")
    arrays = {}
    for entry in header["arrays"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        start = pos + entry["offset"]
        a = np.frombuffer(buf, dtype=dtype, count=n, offset=start)
        arrays[entry["name"]] = a.reshape(entry["shape"]).astype(dtype.newbyteorder("="))
    return Checkpoint(ModelConfig.from_dict(header["config"]), arrays, header["step"],
                      header.get("provenance", {}), header.get("extra", {}))


def load_weights(path, config: ModelConfig | None = None) -> ModelWeights:
    """Load a checkpoint as weights, optionally insisting on a given structure."""
    ckpt = load_checkpoint(path)
    if config is not None:
        with T.precision(ckpt.precision):
            w = build_model(config, seed=0)
        w.load_state_dict(ckpt.arrays)
        w.provenance = dict(ckpt.provenance)
        return w
    return ckpt.to_weights()


def _exact_mean(values: list[float]) -> float:
    # floats are dyadic rationals; int / int true division rounds correctly
    if not all(math.isfinite(v) for v in values):
        return sum(values) / len(values)
    ratios = [v.as_integer_ratio() for v in values]
    den = max(d for _, d in ratios)
    num = sum(a * (den // d) for a, d in ratios)
    return num / (den * len(values))


def average_checkpoints(paths: Sequence) -> Checkpoint:
    """Elementwise mean of every weight array; the step is the largest input step.

    Each element is summed exactly in integer arithmetic and rounded once, so
    the result is the correctly rounded mean and does not depend on the order
    of ``paths``.
    """
    if not paths:
        raise ValueError("no checkpoints to average")
    ckpts = [p if isinstance(p, Checkpoint) else load_checkpoint(p) for p in paths]
    first = ckpts[0]
    ref_cfg = first.config.to_dict()
    for c, p in zip(ckpts[1:], list(paths)[1:]):
        if c.config.to_dict() != ref_cfg:
            raise ConfigError(f"checkpoint {p} has a different model config")
        if list(c.arrays) != list(first.arrays):
            raise ConfigError(f"checkpoint {p} has different array names")
        for name, a in c.arrays.items():
            if a.shape != first.arrays[name].shape:
                raise ConfigError(f"array {name!r} in {p} has shape {a.shape}, "
                                  f"expected {first.arrays[name].shape}")
    n = len(ckpts)
    out = {}
    for name, ref in first.arrays.items():
        stack = np.stack([c.arrays[name].astype(np.float64).ravel() for c in ckpts], axis=1)
        mean = np.fromiter((_exact_mean(row) for row in stack.tolist()),
                           dtype=np.float64, count=stack.shape[0])
        out[name] = mean.reshape(ref.shape).astype(ref.dtype)
    return Checkpoint(first.config, out, max(c.step for c in ckpts),
                      dict(first.provenance), dict(first.extra))


def latest_checkpoints(directory, last: int) -> list[Path]:
    paths = sorted(Path(directory).glob("ckpt-*.rsnmt"))
    return paths[-last:]


def config_to_json(cfg) -> dict:
    return asdict(cfg)


# ---------------------------------------------------------------------------
# weights + vocabularies in one file
# ---------------------------------------------------------------------------

def save_model(path, w: ModelWeights, src_vocab, tgt_vocab, step: int = 0,
               extra: dict | None = None) -> None:
    """Checkpoint that also carries both vocabularies (in the header)."""
    header = dict(extra or {})
    header["vocab"] = {"src": src_vocab.tokens, "tgt": tgt_vocab.tokens}
    save_checkpoint(path, Checkpoint.from_weights(w, step, header))


def load_model(path):
    """Return ``(weights, src_vocab, tgt_vocab)`` from a :func:`save_model` file."""
    from .data import Vocabulary

    ckpt = load_checkpoint(path)
    vocab = ckpt.extra.get("vocab")
    if vocab is None:
        raise CheckpointFormatError(f"{path}: checkpoint carries no vocabularies")
    return ckpt.to_weights(), Vocabulary(vocab["src"]), Vocabulary(vocab["tgt"])
