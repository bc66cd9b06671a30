"""Encoder-decoder Transformer with vanilla or recurrently stacked layers.

In vanilla mode every layer owns its parameters. In recurrent mode the encoder
and the decoder each store a single layer that is applied ``k`` times, so a
``Recurrent(k)`` model has exactly as many parameters as ``Vanilla(1, 1)``.
Layers are post-norm: ``LayerNorm(x + Sublayer(x))``.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Vanilla:
    n_enc: int = 6
    n_dec: int = 6

    def __post_init__(self):
        if self.n_enc < 1 or self.n_dec < 1:
            raise ConfigError(f"layer counts must be >= 1, got {self.n_enc}, {self.n_dec}")


@dataclass(frozen=True)
class Recurrent:
    recurrences: int = 6

    def __post_init__(self):
        if self.recurrences < 1:
            raise ConfigError(f"recurrences must be >= 1, got {self.recurrences}")


StackingMode = Vanilla | Recurrent


@dataclass
class ModelConfig:
    src_vocab_size: int
    tgt_vocab_size: int
    d_model: int = 64
    d_ff: int = 256
    n_heads: int = 4
    stacking: StackingMode = field(default_factory=lambda: Recurrent(6))
    share_src_tgt_embedding: bool = False
    tie_output_projection: bool = True
    dropout: float = 0.0
    max_positions: int = 256

    def validate(self) -> "ModelConfig":
        if self.d_model < 1 or self.d_ff < 1 or self.n_heads < 1:
            raise ConfigError("widths and head count must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.src_vocab_size < 1 or self.tgt_vocab_size < 1:
            raise ConfigError("vocabulary sizes must be positive")
        if self.share_src_tgt_embedding and self.src_vocab_size != self.tgt_vocab_size:
            raise ConfigError("shared embeddings need equal source/target vocabulary sizes")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if not isinstance(self.stacking, (Vanilla, Recurrent)):
            raise ConfigError(f"unknown stacking mode {self.stacking!r}")
        return self

    @property
    def recurrent(self) -> bool:
        return isinstance(self.stacking, Recurrent)

    @property
    def n_enc_stored(self) -> int:
        return 1 if self.recurrent else self.stacking.n_enc

    @property
    def n_dec_stored(self) -> int:
        return 1 if self.recurrent else self.stacking.n_dec

    @property
    def enc_depth(self) -> int:
        return self.stacking.recurrences if self.recurrent else self.stacking.n_enc

    @property
    def dec_depth(self) -> int:
        return self.stacking.recurrences if self.recurrent else self.stacking.n_dec

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        if self.recurrent:
            d["stacking"] = {"mode": "recurrent", "recurrences": self.stacking.recurrences}
        else:
            d["stacking"] = {"mode": "vanilla", "n_enc": self.stacking.n_enc,
                             "n_dec": self.stacking.n_dec}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        s = dict(d.pop("stacking"))
        mode = s.pop("mode")
        if mode == "recurrent":
            stacking = Recurrent(**s)
        elif mode == "vanilla":
            stacking = Vanilla(**s)
        else:
            raise ConfigError(f"unknown stacking mode {mode!r}")
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(stacking=stacking, **d).validate()


def with_stacking(config: ModelConfig, stacking: StackingMode) -> ModelConfig:
    d = asdict(config)
    d["stacking"] = stacking
    return ModelConfig(**d).validate()


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------

@dataclass
class Attention:
    q: Tensor
    k: Tensor
    v: Tensor
    o: Tensor


@dataclass
class LayerWeights:
    self_attn: Attention
    ln1_gain: Tensor
    ln1_bias: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    ln_ffn_gain: Tensor
    ln_ffn_bias: Tensor
    cross_attn: Attention | None = None
    ln2_gain: Tensor | None = None
    ln2_bias: Tensor | None = None

    def named(self, prefix: str):
        """(name, tensor) pairs in a fixed order."""
        out = []
        for tag, att in (("self_attn", self.self_attn), ("cross_attn", self.cross_attn)):
            if att is None:
                continue
            for p in ("q", "k", "v", "o"):
                out.append((f"{prefix}.{tag}.{p}", getattr(att, p)))
        out += [(f"{prefix}.ln1.gain", self.ln1_gain), (f"{prefix}.ln1.bias", self.ln1_bias)]
        if self.ln2_gain is not None:
            out += [(f"{prefix}.ln2.gain", self.ln2_gain), (f"{prefix}.ln2.bias", self.ln2_bias)]
        out += [
            (f"{prefix}.ffn.w1", self.ffn_w1), (f"{prefix}.ffn.b1", self.ffn_b1),
            (f"{prefix}.ffn.w2", self.ffn_w2), (f"{prefix}.ffn.b2", self.ffn_b2),
            (f"{prefix}.ln_ffn.gain", self.ln_ffn_gain), (f"{prefix}.ln_ffn.bias", self.ln_ffn_bias),
        ]
        return out


@dataclass
class ModelWeights:
    config: ModelConfig
    src_embed: Tensor
    tgt_embed: Tensor
    out_proj: Tensor
    encoder_layers: list[LayerWeights]
    decoder_layers: list[LayerWeights]
    positions: np.ndarray
    provenance: dict = field(default_factory=dict)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """Unique trainable tensors; aliased embeddings appear once."""
        out = [("src_embed", self.src_embed)]
        if self.tgt_embed is not self.src_embed:
            out.append(("tgt_embed", self.tgt_embed))
        if self.out_proj is not self.tgt_embed:
            out.append(("out_proj", self.out_proj))
        for i, layer in enumerate(self.encoder_layers):
            out += layer.named(f"encoder.{i}")
        for i, layer in enumerate(self.decoder_layers):
            out += layer.named(f"decoder.{i}")
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named_parameters()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        expected = {n for n, _ in named}
        missing = expected - set(arrays)
        extra = set(arrays) - expected
        if missing or extra:
            raise ConfigError(f"weight names do not match the model structure: "
                              f"missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for name, t in named:
            a = np.asarray(arrays[name])
            if a.shape != t.shape:
                raise ConfigError(f"array {name!r} has shape {a.shape}, expected {t.shape}")
            t.data = a.astype(t.data.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def clone(self) -> "ModelWeights":
        return copy.deepcopy(self)


def sinusoid_table(n_positions: int, d_model: int) -> np.ndarray:
    pos = np.arange(n_positions)[:, None]
    i = np.arange(0, d_model, 2)[None, :]
    angle = pos / np.power(10000.0, i / d_model)
    table = np.zeros((n_positions, d_model))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return table


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True)


def _ones(n):
    return Tensor(np.ones(n), requires_grad=True)


def _zeros(n):
    return Tensor(np.zeros(n), requires_grad=True)


def _attention(rng, d) -> Attention:
    return Attention(*(_glorot(rng, d, d) for _ in range(4)))


def _layer(rng, cfg: ModelConfig, decoder: bool) -> LayerWeights:
    d, f = cfg.d_model, cfg.d_ff
    layer = LayerWeights(
        self_attn=_attention(rng, d),
        ln1_gain=_ones(d), ln1_bias=_zeros(d),
        ffn_w1=_glorot(rng, d, f), ffn_b1=_zeros(f),
        ffn_w2=_glorot(rng, f, d), ffn_b2=_zeros(d),
        ln_ffn_gain=_ones(d), ln_ffn_bias=_zeros(d),
    )
    if decoder:
        layer.cross_attn = _attention(rng, d)
        layer.ln2_gain, layer.ln2_bias = _ones(d), _zeros(d)
    return layer


def build_model(config: ModelConfig, seed: int = 0) -> ModelWeights:
    config.validate()
    rng = np.random.default_rng(seed)
    d = config.d_model
    src = _glorot(rng, config.src_vocab_size, d)
    tgt = src if config.share_src_tgt_embedding else _glorot(rng, config.tgt_vocab_size, d)
    out = tgt if config.tie_output_projection else _glorot(rng, config.tgt_vocab_size, d)
    enc = [_layer(rng, config, decoder=False) for _ in range(config.n_enc_stored)]
    dec = [_layer(rng, config, decoder=True) for _ in range(config.n_dec_stored)]
    return ModelWeights(config, src, tgt, out, enc, dec,
                        sinusoid_table(config.max_positions, d).astype(T.get_dtype()))


def _attention_count(d: int) -> int:
    return 4 * d * d


def count_parameters(config: ModelConfig) -> int:
    """Trainable parameter count implied by the configuration."""
    config.validate()
    d, f = config.d_model, config.d_ff
    ffn = d * f + f + f * d + d
    enc_layer = _attention_count(d) + 2 * d + ffn + 2 * d
    dec_layer = enc_layer + _attention_count(d) + 2 * d
    n = config.src_vocab_size * d
    if not config.share_src_tgt_embedding:
        n += config.tgt_vocab_size * d
    if not config.tie_output_projection:
        n += config.tgt_vocab_size * d
    return n + config.n_enc_stored * enc_layer + config.n_dec_stored * dec_layer


# ---------------------------------------------------------------------------
# forward computation
# ---------------------------------------------------------------------------

@dataclass
class LayerCache:
    """Projected keys/values kept across incremental decoding steps."""
    self_k: np.ndarray | None = None
    self_v: np.ndarray | None = None
    cross_k: np.ndarray | None = None
    cross_v: np.ndarray | None = None

    def select(self, rows: np.ndarray) -> "LayerCache":
        return LayerCache(*(None if a is None else a[rows] for a in
                            (self.self_k, self.self_v, self.cross_k, self.cross_v)))


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, L, d = x.shape
    return x.reshape(B, L, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    B, h, L, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, h * dh)


def attend(att: Attention, query: Tensor, keys: Tensor | None, keep: np.ndarray,
           n_heads: int, cache: tuple | None = None, rng=None, rate: float = 0.0):
    """Multi-head scaled dot-product attention.

    ``keep`` broadcasts to ``[B, 1, Lq, Lk]`` and marks attendable keys. When
    ``cache`` is given as ``(k, v)`` head-split arrays they are prepended
    (self-attention) or used as-is when ``keys`` is None (cross-attention).
    Returns ``(output, probs, (k, v))``.
    """
    q = _split_heads(query @ att.q, n_heads)
    if keys is not None:
        k = _split_heads(keys @ att.k, n_heads)
        v = _split_heads(keys @ att.v, n_heads)
        if cache is not None and cache[0] is not None:
            k = T.concat([Tensor(cache[0]), k], axis=2)
            v = T.concat([Tensor(cache[1]), v], axis=2)
    else:
        k, v = Tensor(cache[0]), Tensor(cache[1])
    dh = q.shape[-1]
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    probs = T.masked_softmax(scores, keep)
    weights = T.dropout(probs, rate, rng)
    out = _merge_heads(weights @ v) @ att.o
    return out, probs.data, (k.data, v.data)


def _ffn(layer: LayerWeights, x: Tensor, rng, rate) -> Tensor:
    h = T.relu(x @ layer.ffn_w1 + layer.ffn_b1)
    h = T.dropout(h, rate, rng)
    return h @ layer.ffn_w2 + layer.ffn_b2


def encoder_layer(layer: LayerWeights, x: Tensor, keep: np.ndarray, n_heads: int,
                  rng=None, rate: float = 0.0):
    a, probs, _ = attend(layer.self_attn, x, x, keep, n_heads, rng=rng, rate=rate)
    x = T.layer_norm(x + T.dropout(a, rate, rng), layer.ln1_gain, layer.ln1_bias)
    f = _ffn(layer, x, rng, rate)
    x = T.layer_norm(x + T.dropout(f, rate, rng), layer.ln_ffn_gain, layer.ln_ffn_bias)
    return x, probs


def decoder_layer(layer: LayerWeights, x: Tensor, memory: Tensor | None, self_keep, cross_keep,
                  n_heads: int, cache: LayerCache | None = None, rng=None, rate: float = 0.0):
    self_cache = None if cache is None else (cache.self_k, cache.self_v)
    a, self_probs, (sk, sv) = attend(layer.self_attn, x, x, self_keep, n_heads,
                                     cache=self_cache, rng=rng, rate=rate)
    x = T.layer_norm(x + T.dropout(a, rate, rng), layer.ln1_gain, layer.ln1_bias)
    if cache is not None and cache.cross_k is not None:
        c, cross_probs, (ck, cv) = attend(layer.cross_attn, x, None, cross_keep, n_heads,
                                          cache=(cache.cross_k, cache.cross_v), rng=rng, rate=rate)
    else:
        c, cross_probs, (ck, cv) = attend(layer.cross_attn, x, memory, cross_keep, n_heads,
                                          rng=rng, rate=rate)
    x = T.layer_norm(x + T.dropout(c, rate, rng), layer.ln2_gain, layer.ln2_bias)
    f = _ffn(layer, x, rng, rate)
    x = T.layer_norm(x + T.dropout(f, rate, rng), layer.ln_ffn_gain, layer.ln_ffn_bias)
    new_cache = LayerCache(sk, sv, ck, cv) if cache is not None else None
    return x, self_probs, cross_probs, new_cache


def _resolve_depth(stored: list, trained_depth: int, recurrent: bool,
                   recurrences: int | None, side: str) -> list:
    if recurrent:
        k = trained_depth if recurrences is None else recurrences
        if k < 1:
            raise ConfigError(f"{side} recurrences must be >= 1, got {k}")
        return stored * k
    if recurrences is not None and recurrences != len(stored):
        raise ConfigError(f"vanilla {side} has {len(stored)} layers; "
                          f"cannot run with {recurrences} (recurrence override needs recurrent stacking)")
    return stored


def encoder_stack(w: ModelWeights, recurrences: int | None = None) -> list[LayerWeights]:
    return _resolve_depth(w.encoder_layers, w.config.enc_depth, w.config.recurrent,
                          recurrences, "encoder")


def decoder_stack(w: ModelWeights, recurrences: int | None = None) -> list[LayerWeights]:
    return _resolve_depth(w.decoder_layers, w.config.dec_depth, w.config.recurrent,
                          recurrences, "decoder")


def _embed(w: ModelWeights, table: Tensor, ids: np.ndarray, offset: int = 0) -> Tensor:
    L = ids.shape[1]
    if offset + L > w.config.max_positions:
        raise ConfigError(f"sequence length {offset + L} exceeds max_positions={w.config.max_positions}")
    x = T.embedding(table, ids) * math.sqrt(w.config.d_model)
    return x + Tensor(w.positions[offset:offset + L])


def encode(w: ModelWeights, src_ids: np.ndarray, src_mask: np.ndarray,
           recurrences: int | None = None, capture: bool = False, rng=None):
    """Run the encoder stack.

    Returns ``(hidden [B, S, d], trace)`` where ``trace`` is a list of
    self-attention probability arrays ``[B, h, S, S]`` (one per applied layer)
    when ``capture`` is set, else None.
    """
    layers = encoder_stack(w, recurrences)
    rate = w.config.dropout if rng is not None else 0.0
    keep = src_mask[:, None, None, :]
    x = T.dropout(_embed(w, w.src_embed, src_ids), rate, rng)
    trace = [] if capture else None
    for layer in layers:
        x, probs = encoder_layer(layer, x, keep, w.config.n_heads, rng, rate)
        if capture:
            trace.append(probs)
    return x, trace


def causal_keep(tq: int, tk: int, offset: int = 0) -> np.ndarray:
    """[tq, tk] mask: query i (at absolute position offset+i) sees keys <= it."""
    return np.arange(tk)[None, :] <= (offset + np.arange(tq))[:, None]


def decode_forward(w: ModelWeights, memory: Tensor, src_mask: np.ndarray, tgt_in: np.ndarray,
                   tgt_mask: np.ndarray | None = None, recurrences: int | None = None,
                   capture: bool = False, rng=None):
    """Teacher-forced decoder pass over a full target prefix.

    Returns ``(logits [B, T, V], trace)``; ``trace`` holds one cross-attention
    array ``[B, h, T, S]`` per applied decoder layer when ``capture`` is set.
    """
    layers = decoder_stack(w, recurrences)
    rate = w.config.dropout if rng is not None else 0.0
    Tn = tgt_in.shape[1]
    self_keep = causal_keep(Tn, Tn)[None, None]
    if tgt_mask is not None:
        self_keep = self_keep & tgt_mask[:, None, None, :]
    cross_keep = src_mask[:, None, None, :]
    x = T.dropout(_embed(w, w.tgt_embed, tgt_in), rate, rng)
    trace = [] if capture else None
    for layer in layers:
        x, _, cross, _ = decoder_layer(layer, x, memory, self_keep, cross_keep,
                                       w.config.n_heads, rng=rng, rate=rate)
        if capture:
            trace.append(cross)
    return x @ w.out_proj.transpose(), trace


class IncrementalDecoder:
    """Step-by-step decoder with cached keys/values.

    Rows can be reordered between steps (beam search) with :meth:`select`.
    """

    def __init__(self, w: ModelWeights, memory: Tensor, src_mask: np.ndarray,
                 recurrences: int | None = None):
        self.w = w
        self.layers = decoder_stack(w, recurrences)
        self.memory = memory
        self.cross_keep = src_mask[:, None, None, :]
        self.caches = [LayerCache() for _ in self.layers]
        self.offset = 0

    def select(self, rows: np.ndarray) -> None:
        rows = np.asarray(rows)
        self.caches = [c.select(rows) for c in self.caches]
        self.cross_keep = self.cross_keep[rows]
        if self.memory is not None:
            self.memory = Tensor(self.memory.data[rows])

    def step(self, tokens: np.ndarray) -> np.ndarray:
        """Feed one token per row; returns log-probabilities ``[rows, V]``."""
        with T.no_grad():
            x = _embed(self.w, self.w.tgt_embed, np.asarray(tokens)[:, None], self.offset)
            keep = np.ones((1, 1, 1, self.offset + 1), dtype=bool)
            for i, layer in enumerate(self.layers):
                x, _, _, self.caches[i] = decoder_layer(
                    layer, x, self.memory, keep, self.cross_keep, self.w.config.n_heads,
                    cache=self.caches[i])
            self.memory = None  # cross-attention keys/values now live in the caches
            logits = (x @ self.w.out_proj.transpose()).data[:, 0, :]
        self.offset += 1
        return T.log_softmax(Tensor(logits)).data


def forward_loss(w: ModelWeights, src_ids, src_mask, tgt_ids, tgt_mask,
                 label_smoothing: float = 0.0, rng=None,
                 enc_recurrences: int | None = None, dec_recurrences: int | None = None) -> Tensor:
    """Teacher-forced loss for target batches shaped ``[bos, y1 .. yn, eos]``."""
    memory, _ = encode(w, src_ids, src_mask, enc_recurrences, rng=rng)
    tgt_in, tgt_out = tgt_ids[:, :-1], tgt_ids[:, 1:]
    logits, _ = decode_forward(w, memory, src_mask, tgt_in, tgt_mask[:, :-1],
                               dec_recurrences, rng=rng)
    return T.cross_entropy(logits, tgt_out, label_smoothing, pad_id=0)


def tied_copy_vanilla(w: ModelWeights) -> ModelWeights:
    """Unroll a recurrent model into a vanilla model whose layers are copies."""
    cfg = w.config
    if not cfg.recurrent:
        raise ConfigError("tied_copy_vanilla needs a recurrent model")
    k = cfg.stacking.recurrences
    new_cfg = with_stacking(cfg, Vanilla(k, k))
    out = copy.deepcopy(w)
    out.config = new_cfg
    out.encoder_layers = [copy.deepcopy(w.encoder_layers[0]) for _ in range(k)]
    out.decoder_layers = [copy.deepcopy(w.decoder_layers[0]) for _ in range(k)]
    return out
