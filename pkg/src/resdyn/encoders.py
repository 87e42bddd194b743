"""Sequence encoders mapping a command/state window to a latent vector.

Five interchangeable architectures: plain and dilated temporal CNNs, a
single-layer LSTM, stacked local dot-product attention, and a one-layer
transformer encoder with sinusoidal positions and mean pooling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, conv1d_output_length, parameter
from .core import ValidationError

KINDS = ("cnn", "dilated_cnn", "lstm", "attention", "transformer")

# structure defaults per architecture: (latent_dim, extras)
_DEFAULTS = {
    "cnn": dict(latent_dim=250, kernel=6, stride=4, dilations=(1, 1),
                channels=(16, 16)),
    "dilated_cnn": dict(latent_dim=200, kernel=6, stride=4, dilations=(5, 1),
                        channels=(16, 16)),
    "lstm": dict(latent_dim=128, hidden=128),
    "attention": dict(latent_dim=200, segment=5, blocks=2, att_dim=32),
    "transformer": dict(latent_dim=64, embed_dim=64, ff_dim=1024, dropout=0.1),
}


@dataclass(frozen=True)
class EncoderSpec:
    kind: str
    window: int = 100
    features: int = 6
    latent_dim: int = 0
    # conv family
    kernel: int = 6
    stride: int = 4
    dilations: tuple = (1, 1)
    channels: tuple = (16, 16)
    # lstm
    hidden: int = 128
    # attention
    segment: int = 5
    blocks: int = 2
    att_dim: int = 32
    # transformer
    embed_dim: int = 64
    ff_dim: int = 1024
    dropout: float = 0.1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown encoder kind {self.kind!r}, want one of {KINDS}")
        positives = (self.window, self.features, self.latent_dim, self.kernel,
                     self.stride, self.hidden, self.segment, self.blocks,
                     self.att_dim, self.embed_dim, self.ff_dim,
                     *self.dilations, *self.channels)
        if any(v <= 0 for v in positives):
            raise ValidationError("encoder hyperparameters must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError(f"dropout {self.dropout} outside [0, 1)")
        n_min = min_window_length(self)
        if self.window < n_min:
            raise ValidationError(
                f"{self.kind} needs a window of at least {n_min} ticks, got {self.window}")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["dilations"] = list(d["dilations"])
        d["channels"] = list(d["channels"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderSpec":
        d = dict(d)
        d["dilations"] = tuple(d.get("dilations", (1, 1)))
        d["channels"] = tuple(d.get("channels", (16, 16)))
        return cls(**d)


def make_spec(kind: str, window: int = 100, features: int = 6, **overrides) -> EncoderSpec:
    """Spec with the shipped defaults for `kind` applied first."""
    if kind not in _DEFAULTS:
        raise ValidationError(f"unknown encoder kind {kind!r}, want one of {KINDS}")
    fields = dict(_DEFAULTS[kind])
    fields.update(overrides)
    if kind == "transformer" and "embed_dim" in overrides and "latent_dim" not in overrides:
        fields["latent_dim"] = overrides["embed_dim"]  # latent is the pooled embedding
    return EncoderSpec(kind=kind, window=window, features=features, **fields)


def _min_window(spec: EncoderSpec) -> int:
    if spec.kind in ("lstm", "transformer"):
        return 1
    if spec.kind == "attention":
        return spec.segment ** spec.blocks
    # conv chain: smallest N for which every layer keeps length >= 1
    for n in range(1, 100000):
        length = n
        ok = True
        for d in spec.dilations:
            length = conv1d_output_length(length, spec.kernel, spec.stride, d)
            if length < 1:
                ok = False
                break
        if ok:
            return n
    raise ValidationError("no valid window length below 100000")


def min_window_length(spec: EncoderSpec) -> int:
    return _min_window(spec)


def conv_chain_lengths(spec: EncoderSpec) -> list[int]:
    lengths, length = [], spec.window
    for d in spec.dilations:
        length = conv1d_output_length(length, spec.kernel, spec.stride, d)
        lengths.append(length)
    return lengths


def init_encoder(spec: EncoderSpec, rng: np.random.Generator) -> dict[str, Tensor]:
    """Fresh parameter set for the given spec; names are stable and used by
    the checkpoint format."""
    f = spec.features

    def normal(name, *shape, scale):
        return parameter(rng.normal(0.0, scale, shape), name)

    def zeros(name, *shape):
        return parameter(np.zeros(shape), name)

    p: dict[str, Tensor] = {}
    if spec.kind in ("cnn", "dilated_cnn"):
        c1, c2 = spec.channels
        k = spec.kernel
        p["conv1_w"] = normal("conv1_w", c1, f, k, scale=math.sqrt(2.0 / (f * k)))
        p["conv1_b"] = zeros("conv1_b", c1)
        p["conv2_w"] = normal("conv2_w", c2, c1, k, scale=math.sqrt(2.0 / (c1 * k)))
        p["conv2_b"] = zeros("conv2_b", c2)
        flat = c2 * conv_chain_lengths(spec)[-1]
        p["fc_w"] = normal("fc_w", flat, spec.latent_dim, scale=math.sqrt(1.0 / flat))
        p["fc_b"] = zeros("fc_b", spec.latent_dim)
    elif spec.kind == "lstm":
        h = spec.hidden
        bound = 1.0 / math.sqrt(h)
        p["wx"] = parameter(rng.uniform(-bound, bound, (f, 4 * h)), "wx")
        p["wh"] = parameter(rng.uniform(-bound, bound, (h, 4 * h)), "wh")
        b = np.zeros(4 * h)
        b[h:2 * h] = 1.0  # forget-gate bias
        p["b"] = parameter(b, "b")
        p["fc_w"] = normal("fc_w", h, spec.latent_dim, scale=math.sqrt(1.0 / h))
        p["fc_b"] = zeros("fc_b", spec.latent_dim)
    elif spec.kind == "attention":
        d_in = f
        for i in range(spec.blocks):
            for nm in ("q", "k", "v"):
                p[f"blk{i}_{nm}"] = normal(f"blk{i}_{nm}", d_in, spec.att_dim,
                                           scale=math.sqrt(1.0 / d_in))
            d_in = spec.att_dim
        segs = spec.window
        for _ in range(spec.blocks):
            segs //= spec.segment
        flat = segs * spec.att_dim
        p["fc_w"] = normal("fc_w", flat, spec.latent_dim, scale=math.sqrt(1.0 / flat))
        p["fc_b"] = zeros("fc_b", spec.latent_dim)
    elif spec.kind == "transformer":
        e = spec.embed_dim
        p["embed_w"] = normal("embed_w", f, e, scale=math.sqrt(1.0 / f))
        p["embed_b"] = zeros("embed_b", e)
        for nm in ("wq", "wk", "wv", "wo"):
            p[nm] = normal(nm, e, e, scale=math.sqrt(1.0 / e))
        p["ln1_g"] = parameter(np.ones(e), "ln1_g")
        p["ln1_b"] = zeros("ln1_b", e)
        p["ff1_w"] = normal("ff1_w", e, spec.ff_dim, scale=math.sqrt(2.0 / e))
        p["ff1_b"] = zeros("ff1_b", spec.ff_dim)
        p["ff2_w"] = normal("ff2_w", spec.ff_dim, e, scale=math.sqrt(1.0 / spec.ff_dim))
        p["ff2_b"] = zeros("ff2_b", e)
        p["ln2_g"] = parameter(np.ones(e), "ln2_g")
        p["ln2_b"] = zeros("ln2_b", e)
        # fixed sinusoidal positions, saved with the weights but not trained
        p["pos"] = Tensor(sinusoidal_positions(spec.window, e))
    return p


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None].astype(float)
    i = np.arange(dim)[None, :].astype(float)
    angle = pos / np.power(10000.0, 2.0 * np.floor(i / 2.0) / dim)
    enc = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return enc


def encode(params: dict[str, Tensor], spec: EncoderSpec, windows: np.ndarray | Tensor,
           train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Latent vectors (B, latent_dim) for a batch of normalized windows
    (B, N, F). N must equal the configured window length."""
    x = windows if isinstance(windows, Tensor) else Tensor(np.asarray(windows, dtype=float))
    if x.data.ndim != 3 or x.data.shape[2] != spec.features:
        raise ValidationError(f"windows must be (B, N, {spec.features}), got {x.data.shape}")
    if x.data.shape[1] != spec.window:
        raise ValidationError(
            f"window length {x.data.shape[1]} differs from configured {spec.window}")
    if spec.kind in ("cnn", "dilated_cnn"):
        return _encode_conv(params, spec, x)
    if spec.kind == "lstm":
        return _encode_lstm(params, spec, x)
    if spec.kind == "attention":
        return _encode_attention(params, spec, x)
    return _encode_transformer(params, spec, x, train, rng)


def _encode_conv(p, spec, x):
    h = ad.transpose(x, (0, 2, 1))  # (B, F, N), channels first
    h = ad.relu(ad.conv1d(h, p["conv1_w"], p["conv1_b"], stride=spec.stride,
                          dilation=spec.dilations[0]))
    h = ad.relu(ad.conv1d(h, p["conv2_w"], p["conv2_b"], stride=spec.stride,
                          dilation=spec.dilations[1]))
    b = h.data.shape[0]
    flat = ad.reshape(h, (b, -1))
    return ad.affine(flat, p["fc_w"], p["fc_b"])


def _encode_lstm(p, spec, x):
    b, n, _ = x.data.shape
    hdim = spec.hidden
    h = Tensor(np.zeros((b, hdim)))
    c = Tensor(np.zeros((b, hdim)))
    for t in range(n):
        xt = x[:, t, :]
        gates = ad.add(ad.add(ad.matmul(xt, p["wx"]), ad.matmul(h, p["wh"])), p["b"])
        i_g = ad.sigmoid(gates[:, 0:hdim])
        f_g = ad.sigmoid(gates[:, hdim:2 * hdim])
        g_g = ad.tanh(gates[:, 2 * hdim:3 * hdim])
        o_g = ad.sigmoid(gates[:, 3 * hdim:4 * hdim])
        c = ad.add(ad.mul(f_g, c), ad.mul(i_g, g_g))
        h = ad.mul(o_g, ad.tanh(c))
    return ad.affine(h, p["fc_w"], p["fc_b"])


def _attention_block(x, wq, wk, wv, segment):
    """Local dot-product self-attention over non-overlapping segments,
    mean-pooled per segment: (B, T, D) -> (B, T//segment, d_att)."""
    b, t, d = x.data.shape
    s = t // segment
    x = x[:, :s * segment, :]
    flat = ad.reshape(x, (b * s * segment, d))
    d_att = wq.data.shape[1]
    q = ad.reshape(ad.matmul(flat, wq), (b * s, segment, d_att))
    k = ad.reshape(ad.matmul(flat, wk), (b * s, segment, d_att))
    v = ad.reshape(ad.matmul(flat, wv), (b * s, segment, d_att))
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(d_att))
    pooled = ad.tmean(ad.matmul(ad.softmax(scores), v), axis=1)
    return ad.reshape(pooled, (b, s, d_att))


def _encode_attention(p, spec, x):
    h = x
    for i in range(spec.blocks):
        h = _attention_block(h, p[f"blk{i}_q"], p[f"blk{i}_k"], p[f"blk{i}_v"],
                             spec.segment)
    b = h.data.shape[0]
    flat = ad.reshape(h, (b, -1))
    return ad.affine(flat, p["fc_w"], p["fc_b"])


def _encode_transformer(p, spec, x, train, rng):
    b, n, f = x.data.shape
    e = spec.embed_dim
    flat = ad.reshape(x, (b * n, f))
    emb = ad.reshape(ad.affine(flat, p["embed_w"], p["embed_b"]), (b, n, e))
    emb = ad.add(emb, p["pos"])
    # single-head self-attention
    flat = ad.reshape(emb, (b * n, e))
    q = ad.reshape(ad.matmul(flat, p["wq"]), (b, n, e))
    k = ad.reshape(ad.matmul(flat, p["wk"]), (b, n, e))
    v = ad.reshape(ad.matmul(flat, p["wv"]), (b, n, e))
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(e))
    att = ad.matmul(ad.softmax(scores), v)
    att = ad.reshape(ad.matmul(ad.reshape(att, (b * n, e)), p["wo"]), (b, n, e))
    sub1 = ad.layer_norm(ad.add(emb, att), p["ln1_g"], p["ln1_b"])
    # position-wise feed-forward with dropout inside
    ff = ad.relu(ad.affine(ad.reshape(sub1, (b * n, e)), p["ff1_w"], p["ff1_b"]))
    ff = ad.dropout(ff, spec.dropout, rng=rng, train=train)
    ff = ad.reshape(ad.affine(ff, p["ff2_w"], p["ff2_b"]), (b, n, e))
    sub2 = ad.layer_norm(ad.add(sub1, ff), p["ln2_g"], p["ln2_b"])
    return ad.tmean(sub2, axis=1)


def encoder_arrays(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: v.data for k, v in params.items()}


def load_encoder_params(spec: EncoderSpec, arrays: dict[str, np.ndarray],
                        rng: np.random.Generator | None = None) -> dict[str, Tensor]:
    fresh = init_encoder(spec, rng or np.random.default_rng(0))
    for name, t in fresh.items():
        if name not in arrays:
            raise ValidationError(f"checkpoint missing encoder tensor {name!r}")
        if tuple(arrays[name].shape) != t.data.shape:
            raise ValidationError(
                f"encoder tensor {name!r} has shape {arrays[name].shape}, want {t.data.shape}")
        t.data = np.array(arrays[name], dtype=float)
    return fresh


def trainable(params: dict[str, Tensor]) -> list[Tensor]:
    return [t for t in params.values() if t.requires_grad]
