"""The recognition network: shared conv backbone, token decoder, MAE branch.

The backbone is a small strided conv stack (downsample factor F = product of
strides).  The primary head is a causal transformer decoder with cross
attention over the position-encoded, row-major-flattened feature map.  The
auxiliary head upsamples the shared feature map back to pixels with two
transposed-conv stages and a sigmoid output.

Parameters live in three disjoint ParamSets (shared / primary / auxiliary),
which is what lets the auxiliary loss update leave the primary head
untouched by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from .tensor import ParamSet, ShapeMismatchError, Tensor
from .tokens import TokenSequence

ATTN_MASK_VALUE = -1e9


@dataclass(frozen=True)
class ArchConfig:
    """Desk-scale defaults: trains in minutes on one CPU core."""

    conv_channels: tuple[int, ...] = (16, 32, 64)
    conv_strides: tuple[int, ...] = (2, 2, 2)
    conv_kernel: int = 3
    d_model: int = 64
    decoder_layers: int = 2
    heads: int = 4
    ffn_dim: int = 256
    max_len: int = 256
    vocab_size: int = 35
    patch_size: int = 4
    positional_encoding: bool = True
    feature_gain: float = 4.0

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by the head count")
        if self.conv_channels[-1] != self.d_model:
            raise ValueError("final conv width must equal d_model")
        if len(self.conv_channels) != len(self.conv_strides):
            raise ValueError("one stride per conv stage required")

    @property
    def downsample(self) -> int:
        f = 1
        for s in self.conv_strides:
            f *= s
        return f


@dataclass
class ModelParams:
    """Named parameters split into shared backbone / primary / auxiliary."""

    shared: ParamSet
    primary: ParamSet
    auxiliary: ParamSet
    arch: ArchConfig

    def all_params(self) -> ParamSet:
        return self.shared.merged(self.primary, self.auxiliary)

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.shared.copy(), self.primary.copy(), self.auxiliary.copy(), self.arch
        )

    def map(self, fn) -> "ModelParams":
        return ModelParams(
            self.shared.map(fn), self.primary.map(fn), self.auxiliary.map(fn), self.arch
        )

    def total_size(self) -> int:
        return (
            self.shared.total_size()
            + self.primary.total_size()
            + self.auxiliary.total_size()
        )


def init_params(arch: ArchConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Fan-in-scaled normal init, deterministic per seed."""
    rng = np.random.default_rng(seed)

    def normal(shape, fan_in):
        return Tensor(
            (rng.standard_normal(shape) / math.sqrt(fan_in)).astype(dtype),
            requires_grad=True,
        )

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    shared = ParamSet()
    c_in = 1
    k = arch.conv_kernel
    for i, c_out in enumerate(arch.conv_channels):
        shared[f"conv{i}.w"] = normal((c_out, c_in, k, k), c_in * k * k)
        shared[f"conv{i}.b"] = zeros((c_out, 1, 1))
        c_in = c_out
    # Per-position feature normalization; the gain starts high so content
    # dominates the positional term in attention keys/values (glyphs occupy
    # a small fraction of positions and would otherwise be drowned out).
    shared["feat_ln.g"] = Tensor(
        np.full(arch.d_model, arch.feature_gain, dtype=dtype), requires_grad=True
    )
    shared["feat_ln.b"] = zeros((arch.d_model,))

    d = arch.d_model
    primary = ParamSet()
    primary["embed.w"] = normal((arch.vocab_size, d), d)
    for l in range(arch.decoder_layers):
        p = f"layer{l}"
        for block in ("self", "cross"):
            for mat in ("q", "k", "v", "o"):
                primary[f"{p}.{block}.w{mat}"] = normal((d, d), d)
                primary[f"{p}.{block}.b{mat}"] = zeros((d,))
        primary[f"{p}.ln1.g"] = ones((d,))
        primary[f"{p}.ln1.b"] = zeros((d,))
        primary[f"{p}.ln2.g"] = ones((d,))
        primary[f"{p}.ln2.b"] = zeros((d,))
        primary[f"{p}.ln3.g"] = ones((d,))
        primary[f"{p}.ln3.b"] = zeros((d,))
        primary[f"{p}.ffn.w1"] = normal((d, arch.ffn_dim), d)
        primary[f"{p}.ffn.b1"] = zeros((arch.ffn_dim,))
        primary[f"{p}.ffn.w2"] = normal((arch.ffn_dim, d), arch.ffn_dim)
        primary[f"{p}.ffn.b2"] = zeros((d,))
    primary["out_ln.g"] = ones((d,))
    primary["out_ln.b"] = zeros((d,))
    primary["out.w"] = normal((d, arch.vocab_size), d)
    primary["out.b"] = zeros((arch.vocab_size,))

    auxiliary = ParamSet()
    c_mid = 16
    auxiliary["deconv0.w"] = normal((d, c_mid, 8, 8), d * 8 * 8 // 16)
    auxiliary["deconv0.b"] = zeros((c_mid, 1, 1))
    auxiliary["deconv1.w"] = normal((c_mid, 1, 4, 4), c_mid * 4 * 4 // 4)
    auxiliary["deconv1.b"] = zeros((1, 1, 1))
    return ModelParams(shared, primary, auxiliary, arch)


# -- positional encodings ------------------------------------------------------


def _sinusoid_table(length: int, dim: int, dtype) -> np.ndarray:
    """Classic interleaved sin/cos table, shape (length, dim)."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2.0 * (i // 2)) / dim)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(dtype)


def positional_encoding_2d(h: int, w: int, d_model: int, dtype) -> np.ndarray:
    """Fixed 2-d encoding: first half of channels encode the row, second half
    the column, so identical features at different positions become distinct."""
    half = d_model // 2
    rows = _sinusoid_table(h, half, dtype)  # (h, half)
    cols = _sinusoid_table(w, d_model - half, dtype)  # (w, d-half)
    pe = np.zeros((d_model, h, w), dtype=dtype)
    pe[:half] = rows.T[:, :, None]
    pe[half:] = cols.T[:, None, :]
    return pe


# -- forward passes ------------------------------------------------------------


def pad_to_multiple(image: np.ndarray, factor: int, fill: float = 1.0):
    """Pad bottom/right to a multiple of ``factor``; white fill for pages.

    Returns (padded, valid_mask) where the mask marks original pixels.
    """
    h, w = image.shape
    hp = ((h + factor - 1) // factor) * factor
    wp = ((w + factor - 1) // factor) * factor
    if (hp, wp) == (h, w):
        return image, np.ones((h, w), dtype=bool)
    out = np.full((hp, wp), fill, dtype=image.dtype)
    out[:h, :w] = image
    mask = np.zeros((hp, wp), dtype=bool)
    mask[:h, :w] = True
    return out, mask


def backbone_batch(shared: ParamSet, images, arch: ArchConfig) -> Tensor:
    """Conv feature maps (B, d_model, H/F, W/F); shared by both heads."""
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.ndim != 3:
        raise ShapeMismatchError(f"expected BxHxW images, got shape {x.shape}")
    b, h, w = x.shape
    f = arch.downsample
    if h % f or w % f:
        raise ShapeMismatchError(
            f"image {h}x{w} must be a multiple of the downsample factor {f}"
        )
    out = ops.reshape(x, (b, 1, h, w))
    pad = arch.conv_kernel // 2
    for i, stride in enumerate(arch.conv_strides):
        out = ops.conv2d(out, shared[f"conv{i}.w"], stride=stride, padding=pad)
        out = ops.relu(ops.add(out, shared[f"conv{i}.b"]))
    return out


def backbone(shared: ParamSet, image, arch: ArchConfig) -> Tensor:
    """Single-image conv feature map (d_model, H/F, W/F)."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.ndim != 2:
        raise ShapeMismatchError(f"expected HxW image, got shape {x.shape}")
    fmap = backbone_batch(shared, ops.reshape(x, (1,) + x.shape), arch)
    return ops.reshape(fmap, fmap.shape[1:])


def encode_batch(shared: ParamSet, images, arch: ArchConfig) -> Tensor:
    """Position-encoded feature sequences (B, N, d_model)."""
    fmap = backbone_batch(shared, images, arch)
    b, d, hh, ww = fmap.shape
    seq = ops.transpose(ops.reshape(fmap, (b, d, hh * ww)), (0, 2, 1))
    seq = ops.layer_norm(seq, shared["feat_ln.g"], shared["feat_ln.b"])
    if arch.positional_encoding:
        pe = positional_encoding_2d(hh, ww, d, fmap.data.dtype)
        pe_seq = pe.reshape(d, hh * ww).T
        seq = ops.add(seq, Tensor(pe_seq))
    return seq


def encode(shared: ParamSet, image, arch: ArchConfig) -> Tensor:
    """Position-encoded feature sequence (N, d_model), N = (H/F) * (W/F).

    The positional term is added to the 2-d map, then positions are read out
    row-major (reading order).
    """
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.ndim != 2:
        raise ShapeMismatchError(f"expected HxW image, got shape {x.shape}")
    seq = encode_batch(shared, ops.reshape(x, (1,) + x.shape), arch)
    return ops.reshape(seq, seq.shape[1:])


def _attention(
    params: ParamSet,
    prefix: str,
    queries: Tensor,
    keys_values: Tensor,
    heads: int,
    mask: np.ndarray | None,
) -> Tensor:
    """Multi-head attention on (B, L, d) queries and (B, M, d) keys/values."""
    b, lq, d = queries.shape
    lk = keys_values.shape[1]
    dh = d // heads

    def proj(x, mat, length):
        y = ops.linear(x, params[f"{prefix}.w{mat}"], params[f"{prefix}.b{mat}"])
        y = ops.transpose(ops.reshape(y, (b, length, heads, dh)), (0, 2, 1, 3))
        return ops.reshape(y, (b * heads, length, dh))

    q = proj(queries, "q", lq)
    k = proj(keys_values, "k", lk)
    v = proj(keys_values, "v", lk)
    scores = ops.mul(
        ops.matmul(q, ops.transpose(k, (0, 2, 1))),
        ops.as_tensor(1.0 / math.sqrt(dh), queries),
    )
    if mask is not None:
        scores = ops.add(scores, Tensor(mask.astype(queries.data.dtype)))
    attn = ops.softmax(scores, axis=-1)
    ctx = ops.matmul(attn, v)  # (b*heads, lq, dh)
    merged = ops.reshape(
        ops.transpose(ops.reshape(ctx, (b, heads, lq, dh)), (0, 2, 1, 3)), (b, lq, d)
    )
    return ops.linear(merged, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def decode_logits_batch(
    primary: ParamSet,
    features: Tensor,
    input_ids: np.ndarray,
    arch: ArchConfig,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Causal decoder over (B, L) input prefixes; logits (B, L, vocab).

    Sequences in a batch must be padded to a common length by the caller
    (pad positions are causal, so they never influence real positions).
    """
    ids = np.asarray(input_ids, dtype=np.int64)
    if ids.ndim != 2 or ids.shape[1] == 0:
        raise ShapeMismatchError("decoder input must be (B, L) with L >= 1")
    if ids.shape[1] > arch.max_len:
        raise ShapeMismatchError(
            f"decoder input length {ids.shape[1]} exceeds max_len {arch.max_len}"
        )
    b, length = ids.shape
    d = arch.d_model
    x = ops.embed_rows(primary["embed.w"], ids)  # (B, L, d)
    x = ops.mul(x, ops.as_tensor(math.sqrt(d), x))  # balance tokens against PE
    if arch.positional_encoding:
        pe = _sinusoid_table(length, d, x.data.dtype)
        x = ops.add(x, Tensor(pe))
    causal = np.triu(np.full((length, length), ATTN_MASK_VALUE), k=1)

    def maybe_drop(t: Tensor) -> Tensor:
        if dropout_rate > 0.0 and rng is not None:
            return ops.dropout(t, dropout_rate, rng)
        return t

    for l in range(arch.decoder_layers):
        p = f"layer{l}"
        normed = ops.layer_norm(x, primary[f"{p}.ln1.g"], primary[f"{p}.ln1.b"])
        x = ops.add(x, maybe_drop(_attention(primary, f"{p}.self", normed, normed, arch.heads, causal)))
        normed = ops.layer_norm(x, primary[f"{p}.ln2.g"], primary[f"{p}.ln2.b"])
        x = ops.add(
            x, maybe_drop(_attention(primary, f"{p}.cross", normed, features, arch.heads, None))
        )
        normed = ops.layer_norm(x, primary[f"{p}.ln3.g"], primary[f"{p}.ln3.b"])
        hidden = ops.relu(ops.linear(normed, primary[f"{p}.ffn.w1"], primary[f"{p}.ffn.b1"]))
        x = ops.add(x, maybe_drop(ops.linear(hidden, primary[f"{p}.ffn.w2"], primary[f"{p}.ffn.b2"])))
    x = ops.layer_norm(x, primary["out_ln.g"], primary["out_ln.b"])
    return ops.linear(x, primary["out.w"], primary["out.b"])


def decode_logits(
    primary: ParamSet,
    features: Tensor,
    input_ids,
    arch: ArchConfig,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Causal decoder over one input prefix; one logit row per position."""
    ids = np.asarray(list(input_ids), dtype=np.int64)
    if ids.size == 0:
        raise ShapeMismatchError("decoder input must contain at least <sos>")
    feats = ops.reshape(features, (1,) + features.shape)
    logits = decode_logits_batch(
        primary, feats, ids[None, :], arch, dropout_rate=dropout_rate, rng=rng
    )
    return ops.reshape(logits, logits.shape[1:])


def decode_step(
    primary: ParamSet, features: Tensor, prefix: TokenSequence, arch: ArchConfig
) -> Tensor:
    """Next-token distribution after the given prefix (starts with <sos>)."""
    ids = list(prefix)
    if not ids or ids[0] != 0:
        raise ValueError("decoder prefix must begin with <sos>")
    if len(ids) >= arch.max_len:
        raise ValueError(f"prefix length {len(ids)} must stay below max_len")
    logits = decode_logits(primary, features, ids, arch)
    last = ops.slice_(logits, (slice(len(ids) - 1, len(ids)), slice(None)))
    return ops.reshape(ops.softmax(last, axis=-1), (logits.shape[1],))


def reconstruct_batch(
    shared: ParamSet, auxiliary: ParamSet, masked, arch: ArchConfig
) -> Tensor:
    """MAE branch on a batch: (B, H, W) masked -> (B, H, W) reconstructions."""
    x = masked if isinstance(masked, Tensor) else Tensor(masked)
    b, h, w = x.shape
    fmap = backbone_batch(shared, x, arch)
    up = ops.conv2d_transpose(fmap, auxiliary["deconv0.w"], stride=4, padding=2)
    up = ops.relu(ops.add(up, auxiliary["deconv0.b"]))
    up = ops.conv2d_transpose(up, auxiliary["deconv1.w"], stride=2, padding=1)
    out = ops.sigmoid(ops.add(up, auxiliary["deconv1.b"]))
    if out.shape != (b, 1, h, w):
        raise ShapeMismatchError(
            f"reconstruction shape {out.shape} does not match input {x.shape}"
        )
    return ops.reshape(out, (b, h, w))


def reconstruct(
    shared: ParamSet, auxiliary: ParamSet, masked, arch: ArchConfig
) -> Tensor:
    """MAE branch: masked image -> reconstruction, same HxW, values in [0,1]."""
    x = masked if isinstance(masked, Tensor) else Tensor(masked)
    if x.ndim != 2:
        raise ShapeMismatchError(f"expected HxW image, got shape {x.shape}")
    out = reconstruct_batch(shared, auxiliary, ops.reshape(x, (1,) + x.shape), arch)
    return ops.reshape(out, out.shape[1:])
