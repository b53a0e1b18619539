"""Convolutional encoder-decoder with gated convolutions and attention.

The encoder stacks width-preserving GLU convolutions over token+position
embeddings; the decoder stacks causal GLU convolutions and alternates,
layer by layer, between attention over the encoder states (even layers)
and causal intra-attention over its own states (odd layers). Token
embeddings are shared three ways: encoder input, decoder input and the
final output projection. A second position-embedding table covers the
remainder segment in read/remainder mode, with indices restarting after
the boundary marker.

All forward code is written over :mod:`.autodiff` tensors, so the same
functions serve training (under a tape) and inference (tape-free). The
incremental :meth:`ConvSeq2Seq.decode_step` reuses the identical kernels
on single-row tensors against cached per-layer state.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict, field

import numpy as np

from .autodiff import (
    Parameter,
    Tensor,
    add,
    attention,
    conv1d,
    dropout,
    embedding,
    glu,
    log_softmax,
    matmul,
    pick,
    residual,
    scale,
    tensor_sum,
    transpose,
    RESIDUAL_SCALE,
)

POSITION_SET_MODES = ("single", "read_remainder")


class StaleCacheError(ValueError):
    """An incremental decoding cache disagrees with the supplied prefix."""


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    Reference sizes: the news configuration uses 8 layers of width 3 with
    512 hidden units, 340-dim embeddings and dropout 0.2; the headline
    configuration uses 6 layers with 256 hidden units.
    """

    vocab_size: int
    encoder_layers: int = 8
    decoder_layers: int = 8
    kernel_width: int = 3
    hidden_size: int = 512
    embed_size: int = 340
    dropout_rate: float = 0.2
    max_positions: int = 1024
    position_sets: str = "single"
    attention_pattern: str = "alternating"
    tie_embeddings: bool = True
    bos_id: int = 1

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2")
        if self.kernel_width < 1 or self.kernel_width % 2 == 0:
            raise ValueError(f"kernel_width must be odd, got {self.kernel_width}")
        if min(self.encoder_layers, self.decoder_layers) < 1:
            raise ValueError("need at least one layer on each side")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.position_sets not in POSITION_SET_MODES:
            raise ValueError(f"position_sets must be one of {POSITION_SET_MODES}")
        if self.attention_pattern != "alternating":
            raise ValueError("only the alternating attention pattern is supported")
        if not 0 <= self.bos_id < self.vocab_size:
            raise ValueError("bos_id outside the vocabulary")

    @classmethod
    def cnn_dailymail(cls, vocab_size: int, **overrides) -> "ModelConfig":
        base = dict(encoder_layers=8, decoder_layers=8, kernel_width=3,
                    hidden_size=512, embed_size=340, dropout_rate=0.2)
        base.update(overrides)
        return cls(vocab_size=vocab_size, **base)

    @classmethod
    def duc(cls, vocab_size: int, **overrides) -> "ModelConfig":
        base = dict(encoder_layers=6, decoder_layers=6, kernel_width=3,
                    hidden_size=256, embed_size=256, dropout_rate=0.2)
        base.update(overrides)
        return cls(vocab_size=vocab_size, **base)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


@dataclass
class EncoderStates:
    """Attention keys and values for one encoded source, plus its length."""

    keys: Tensor
    values: Tensor
    length: int


@dataclass
class DecoderCache:
    """Per-hypothesis incremental state: consumed prefix, a rolling
    convolution window per layer, and the full state history for each
    intra-attention layer."""

    tokens: list = field(default_factory=list)
    conv_windows: list = field(default_factory=list)
    intra_states: list = field(default_factory=list)

    def clone(self) -> "DecoderCache":
        return DecoderCache(
            tokens=list(self.tokens),
            conv_windows=[w.copy() for w in self.conv_windows],
            intra_states=[list(h) if h is not None else None
                          for h in self.intra_states],
        )


def _validate_ids(ids, vocab_size: int, what: str) -> np.ndarray:
    arr = np.asarray(ids, dtype=np.int64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{what} must be a nonempty 1-d id sequence")
    if arr.min() < 0 or arr.max() >= vocab_size:
        raise ValueError(f"{what} contains ids outside [0, {vocab_size})")
    return arr


class ConvSeq2Seq:
    """The summarization network. Construction is deterministic given the
    seed; all parameters live in an insertion-ordered name->Parameter map."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Parameter] = {}
        rng = np.random.default_rng(seed)
        c = config

        def emb(name, rows, cols):
            return self._add(name, rng.normal(0.0, 0.1, size=(rows, cols)))

        def linear(name, fan_in, fan_out):
            std = math.sqrt((1.0 - c.dropout_rate) / fan_in)
            self._add(name + "_w", rng.normal(0.0, std, size=(fan_in, fan_out)))
            self._add(name + "_b", np.zeros(fan_out))

        def conv(name, width, cin, cout2):
            std = math.sqrt(4.0 * (1.0 - c.dropout_rate) / (width * cin))
            self._add(name + "_w", rng.normal(0.0, std, size=(width, cin, cout2)))
            self._add(name + "_b", np.zeros(cout2))

        tok = emb("token_embedding", c.vocab_size, c.embed_size)
        self._add("enc_positions", rng.normal(0.0, 0.1, (c.max_positions, c.embed_size)))
        if c.position_sets == "read_remainder":
            self._add("enc_positions_remainder",
                      rng.normal(0.0, 0.1, (c.max_positions, c.embed_size)))
        self._add("dec_positions", rng.normal(0.0, 0.1, (c.max_positions, c.embed_size)))

        linear("enc_fc1", c.embed_size, c.hidden_size)
        for l in range(c.encoder_layers):
            conv(f"enc_conv{l}", c.kernel_width, c.hidden_size, 2 * c.hidden_size)
        linear("enc_fc2", c.hidden_size, c.embed_size)

        linear("dec_fc1", c.embed_size, c.hidden_size)
        for l in range(c.decoder_layers):
            conv(f"dec_conv{l}", c.kernel_width, c.hidden_size, 2 * c.hidden_size)
            if l % 2 == 0:  # source attention projects to/from embed space
                linear(f"dec_attn{l}_in", c.hidden_size, c.embed_size)
                linear(f"dec_attn{l}_out", c.embed_size, c.hidden_size)
            else:  # intra-attention stays in hidden space
                linear(f"dec_intra{l}_in", c.hidden_size, c.hidden_size)
                linear(f"dec_intra{l}_out", c.hidden_size, c.hidden_size)
        linear("dec_fc2", c.hidden_size, c.embed_size)

        if c.tie_embeddings:
            enc_in = dec_in = out_proj = tok
        else:
            dec_in = emb("dec_token_embedding", c.vocab_size, c.embed_size)
            out_proj = emb("out_token_embedding", c.vocab_size, c.embed_size)
            enc_in = tok
        # the three places the token representation is used
        self._embed_sites = {"encoder_input": enc_in, "decoder_input": dec_in,
                             "output_projection": out_proj}

    def _add(self, name: str, data) -> Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name}")
        p = Parameter(np.asarray(data, dtype=np.float64), name=name)
        self.params[name] = p
        return p

    # -- bookkeeping --------------------------------------------------------

    def parameters(self) -> dict[str, Parameter]:
        return self.params

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def tied_weight_audit(self) -> dict:
        """Verify the three token-representation use sites resolve to one
        Parameter object and report the parameter-count saving."""
        sites = self._embed_sites
        tied = (sites["encoder_input"] is sites["decoder_input"]
                is sites["output_projection"])
        saving = 2 * self.config.vocab_size * self.config.embed_size
        count = self.num_parameters()
        return {
            "tied": tied,
            "use_sites": sorted(sites),
            "distinct_embeddings": len({id(p) for p in sites.values()}),
            "parameter_count": count,
            "untied_parameter_count": count + saving if tied else count,
            "tying_saving": saving if tied else 0,
        }

    def _linear(self, name: str, x: Tensor) -> Tensor:
        return add(matmul(x, self.params[name + "_w"]), self.params[name + "_b"])

    # -- encoder ------------------------------------------------------------

    def _position_indices(self, sets: np.ndarray) -> np.ndarray:
        """Running position index within each segment: the counter restarts
        at 0 where the set id switches to the remainder set."""
        idx = np.empty_like(sets)
        counters = [0, 0]
        for i, s in enumerate(sets):
            idx[i] = counters[s]
            counters[s] += 1
        return idx

    def encode(self, src_ids, position_sets=None, *, rng=None,
               training: bool = False) -> EncoderStates:
        c = self.config
        src = _validate_ids(src_ids, c.vocab_size, "source")
        if position_sets is None:
            sets = np.zeros(len(src), dtype=np.int64)
        else:
            sets = np.asarray(position_sets, dtype=np.int64)
            if sets.shape != src.shape:
                raise ValueError("position_sets length must match source length")
            if sets.min() < 0 or sets.max() > 1:
                raise ValueError("position set ids must be 0 or 1")
            if sets.max() == 1 and c.position_sets != "read_remainder":
                raise ValueError(
                    "remainder position set used but model was built single-set")
        pos = self._position_indices(sets)
        if pos.max() >= c.max_positions:
            raise ValueError(
                f"position {pos.max()} exceeds max_positions {c.max_positions}")

        tok = embedding(self._embed_sites["encoder_input"], src)
        if sets.max() == 0:
            pe = embedding(self.params["enc_positions"], pos)
        else:
            in0 = (sets == 0)
            pe = add(
                scale(embedding(self.params["enc_positions"],
                                np.where(in0, pos, 0)),
                      in0[:, None].astype(np.float64)),
                scale(embedding(self.params["enc_positions_remainder"],
                                np.where(in0, 0, pos)),
                      (~in0)[:, None].astype(np.float64)),
            )
        e = self._dropout(add(tok, pe), rng, training)

        x = self._linear("enc_fc1", e)
        for l in range(c.encoder_layers):
            res = x
            h = self._dropout(x, rng, training)
            h = add(conv1d(h, self.params[f"enc_conv{l}_w"], "symmetric"),
                    self.params[f"enc_conv{l}_b"])
            h = glu(h)
            x = residual(h, res)
        z = self._linear("enc_fc2", x)
        vals = residual(z, e)  # attention values also carry the input embedding
        return EncoderStates(keys=z, values=vals, length=len(src))

    # -- decoder, teacher-forced -------------------------------------------

    def decode_train(self, target_ids, enc: EncoderStates, *, rng=None,
                     training: bool = False) -> Tensor:
        """Log-probabilities [T, vocab]: row t is the distribution for
        target position t given the begin token and targets before t."""
        tgt = _validate_ids(target_ids, self.config.vocab_size, "target")
        prev = np.concatenate(([self.config.bos_id], tgt[:-1]))
        return self._decode_positions(prev, enc, rng=rng, training=training)

    def _decode_positions(self, prev_ids: np.ndarray, enc: EncoderStates, *,
                          rng=None, training: bool = False) -> Tensor:
        c = self.config
        T = len(prev_ids)
        if T > c.max_positions:
            raise ValueError(f"target length {T} exceeds max_positions")
        pos = np.arange(T)
        g = add(embedding(self._embed_sites["decoder_input"], prev_ids),
                embedding(self.params["dec_positions"], pos))
        g = self._dropout(g, rng, training)

        x = self._linear("dec_fc1", g)
        causal = np.tril(np.ones((T, T), dtype=bool))  # j <= t, self inclusive
        for l in range(c.decoder_layers):
            res = x
            h = self._dropout(x, rng, training)
            h = add(conv1d(h, self.params[f"dec_conv{l}_w"], "causal"),
                    self.params[f"dec_conv{l}_b"])
            h = glu(h)
            if l % 2 == 0:
                d = scale(add(self._linear(f"dec_attn{l}_in", h), g),
                          RESIDUAL_SCALE)
                ctx, _ = attention(d, enc.keys, enc.values)
                ctx = scale(ctx, math.sqrt(enc.length))
                h = residual(self._linear(f"dec_attn{l}_out", ctx), h)
            else:
                q = self._linear(f"dec_intra{l}_in", h)
                ctx, _ = attention(q, h, h, mask=causal)
                h = residual(self._linear(f"dec_intra{l}_out", ctx), h)
            x = residual(h, res)

        y = self._linear("dec_fc2", x)
        y = self._dropout(y, rng, training)
        logits = matmul(y, transpose(self._embed_sites["output_projection"]))
        return log_softmax(logits)

    def _dropout(self, x: Tensor, rng, training: bool) -> Tensor:
        if not training or self.config.dropout_rate == 0.0:
            return x
        if rng is None:
            raise ValueError("training-mode forward needs a random generator")
        return dropout(x, self.config.dropout_rate, rng, training=True)

    # -- decoder, incremental ----------------------------------------------

    def start_cache(self) -> DecoderCache:
        c = self.config
        cache = DecoderCache()
        for l in range(c.decoder_layers):
            cache.conv_windows.append(
                np.zeros((c.kernel_width - 1, c.hidden_size)))
            cache.intra_states.append([] if l % 2 == 1 else None)
        return cache

    def decode_step(self, prefix_ids, enc: EncoderStates,
                    cache: DecoderCache | None = None):
        """Next-token log-probabilities after ``prefix_ids`` (which starts
        with the begin token). The cache, if given, must hold a prefix of
        ``prefix_ids``; only the unconsumed tail is processed. Returns
        ``(log_probs, cache)``.
        """
        prefix = _validate_ids(prefix_ids, self.config.vocab_size, "prefix")
        if cache is None:
            cache = self.start_cache()
        done = len(cache.tokens)
        if done > len(prefix) or list(prefix[:done]) != cache.tokens:
            raise StaleCacheError(
                "decoder cache holds a different prefix than supplied")
        if done == len(prefix):
            raise StaleCacheError("prefix already fully consumed by this cache")
        out = None
        for tok in prefix[done:]:
            out = self._step_one(int(tok), enc, cache)
        return out, cache

    def _step_one(self, tok: int, enc: EncoderStates, cache: DecoderCache):
        c = self.config
        t = len(cache.tokens)
        if t >= c.max_positions:
            raise ValueError(f"position {t} exceeds max_positions")
        g = add(embedding(self._embed_sites["decoder_input"],
                          np.array([tok])),
                embedding(self.params["dec_positions"], np.array([t])))
        x = self._linear("dec_fc1", g)
        for l in range(c.decoder_layers):
            res = x
            window = np.vstack([cache.conv_windows[l], x.data])
            cache.conv_windows[l] = window[1:]
            kernel = self.params[f"dec_conv{l}_w"]
            W, cin, cout = kernel.data.shape
            h = add(matmul(Tensor(window.reshape(1, W * cin)),
                           Tensor(kernel.data.reshape(W * cin, cout))),
                    self.params[f"dec_conv{l}_b"])
            h = glu(h)
            if l % 2 == 0:
                d = scale(add(self._linear(f"dec_attn{l}_in", h), g),
                          RESIDUAL_SCALE)
                ctx, _ = attention(d, enc.keys, enc.values)
                ctx = scale(ctx, math.sqrt(enc.length))
                h = residual(self._linear(f"dec_attn{l}_out", ctx), h)
            else:
                cache.intra_states[l].append(h.data[0])
                hist = Tensor(np.asarray(cache.intra_states[l]))
                q = self._linear(f"dec_intra{l}_in", h)
                ctx, _ = attention(q, hist, hist)
                h = residual(self._linear(f"dec_intra{l}_out", ctx), h)
            x = residual(h, res)
        cache.tokens.append(tok)
        y = self._linear("dec_fc2", x)
        logits = matmul(y, transpose(self._embed_sites["output_projection"]))
        return log_softmax(logits).data[0]

    # -- convenience --------------------------------------------------------

    def sequence_nll(self, src_ids, position_sets, target_ids, *, rng=None,
                     training: bool = False):
        """Summed negative log-likelihood of the target sequence as a
        differentiable scalar, plus the token count."""
        enc = self.encode(src_ids, position_sets, rng=rng, training=training)
        lp = self.decode_train(target_ids, enc, rng=rng, training=training)
        picked = pick(lp, np.asarray(target_ids, dtype=np.int64))
        loss = scale(tensor_sum(picked), -1.0)
        return loss, len(target_ids)

    # -- checkpoint io ------------------------------------------------------

    CHECKPOINT_MAGIC = "ctrlsum-model v1"

    def save(self, path):
        """Header line with the config as JSON, then one block per
        parameter: a "name dim0 dim1 ..." line followed by the values as
        little-endian float32, row-major."""
        with open(path, "wb") as f:
            f.write(f"{self.CHECKPOINT_MAGIC} {self.config.to_json()}\n"
                    .encode("utf-8"))
            for name, p in self.params.items():
                dims = " ".join(str(d) for d in p.data.shape)
                f.write(f"{name} {dims}\n".encode("utf-8"))
                f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "ConvSeq2Seq":
        with open(path, "rb") as f:
            header = f.readline().decode("utf-8").rstrip("\n")
            if not header.startswith(cls.CHECKPOINT_MAGIC + " "):
                raise ValueError(f"{path}: not a {cls.CHECKPOINT_MAGIC} checkpoint")
            config = ModelConfig.from_json(header[len(cls.CHECKPOINT_MAGIC) + 1:])
            model = cls(config, seed=0)
            seen = set()
            while True:
                line = f.readline()
                if not line:
                    break
                parts = line.decode("utf-8").split()
                name, shape = parts[0], tuple(int(d) for d in parts[1:])
                if name not in model.params:
                    raise ValueError(f"{path}: unknown parameter block {name!r}")
                p = model.params[name]
                if shape != p.data.shape:
                    raise ValueError(
                        f"{path}: block {name} has shape {shape}, "
                        f"expected {p.data.shape}")
                n = int(np.prod(shape)) if shape else 1
                raw = f.read(4 * n)
                if len(raw) != 4 * n:
                    raise ValueError(f"{path}: truncated block {name}")
                p.data[...] = np.frombuffer(raw, dtype="<f4").reshape(shape)
                seen.add(name)
            missing = set(model.params) - seen
            if missing:
                raise ValueError(f"{path}: missing blocks {sorted(missing)}")
        return model
