"""Encoder-decoder vision transformer for 2D segmentation.

Data flow for an input ``x: [B, C, H, W]`` with patch size ``P``::

    embed_patches -> multi_scale_block -> num_stacks x (depth x transformer_block)
        (the output of every stack is kept as a skip feature)
    tokens -> [B, d, H/P, W/P] -> (+ gsa) -> 1x1 conv d->K -> resize to H/8
    3 x decoder_stage (x2 each, skips consumed deepest-first; the last stage
        also receives the raw input image) -> multi_scale_block -> 1x1 conv -> J

Ops are free functions taking their parameter holder, mirroring the layer
classes; the classes only own parameters.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from . import rng as rngmod
from .config import DECODER_STAGES, ModelConfig
from .errors import BiasGridMismatch, ShapeMismatch
from .tensor import Tensor, concat, matmul, permute, reduce_sum, reshape, split, take

LINEAR_STD = 0.02


class Module:
    """Parameter container. Parameters are ``Tensor`` attributes with
    ``requires_grad`` set; sub-modules and lists of sub-modules are walked
    recursively in attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


def _linear_weight(rng, n_in: int, n_out: int) -> Tensor:
    return _param(rngmod.truncated_normal(rng, (n_in, n_out), LINEAR_STD))


def _conv_weight(rng, c_out: int, c_in: int, k: int) -> Tensor:
    std = np.sqrt(2.0 / (c_in * k * k))
    return _param(rngmod.truncated_normal(rng, (c_out, c_in, k, k), std))


def _zeros(*shape) -> Tensor:
    return _param(np.zeros(shape))


class Conv(Module):
    def __init__(self, rng, c_in: int, c_out: int, k: int):
        self.weight = _conv_weight(rng, c_out, c_in, k)
        self.bias = _zeros(c_out)
        self.pad = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=1, pad=self.pad)


# ------------------------------------------------------------------ encoder


class PatchEmbedding(Module):
    def __init__(self, rng, cfg: ModelConfig):
        p, c = cfg.patch_size, cfg.in_channels
        self.patch_size = p
        self.proj = _linear_weight(rng, p * p * c, cfg.embed_dim)
        self.pos = _param(rngmod.truncated_normal(rng, (cfg.num_tokens, cfg.embed_dim), LINEAR_STD))


def embed_patches(x: Tensor, pe: PatchEmbedding) -> Tensor:
    """``[B, C, H, W] -> [B, N, d]``; patches in row-major order, each
    flattened as (row, col, channel)."""
    b, c, h, w = x.shape
    p = pe.patch_size
    if h % p or w % p:
        raise ShapeMismatch(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    if pe.proj.shape[0] != p * p * c:
        raise ShapeMismatch(f"patch projection expects {pe.proj.shape[0]} inputs, got {p * p * c}")
    if pe.pos.shape[0] != gh * gw:
        raise ShapeMismatch(f"position table has {pe.pos.shape[0]} rows for {gh * gw} tokens")
    patches = reshape(x, (b, c, gh, p, gw, p))
    patches = permute(patches, (0, 2, 4, 3, 5, 1))
    patches = reshape(patches, (b, gh * gw, p * p * c))
    return matmul(patches, pe.proj) + pe.pos


def tokens_to_map(z: Tensor, gh: int, gw: int) -> Tensor:
    b, n, d = z.shape
    if n != gh * gw:
        raise ShapeMismatch(f"{n} tokens do not form a {gh}x{gw} grid")
    return permute(reshape(z, (b, gh, gw, d)), (0, 3, 1, 2))


def map_to_tokens(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    return reshape(permute(x, (0, 2, 3, 1)), (b, h * w, c))


class MultiScaleContextBlock(Module):
    def __init__(self, rng, channels: int):
        sizes = split_sizes(channels)
        self.conv1 = Conv(rng, sizes[0], sizes[0], 1)
        self.conv3 = Conv(rng, sizes[1], sizes[1], 3)
        self.conv5 = Conv(rng, sizes[2], sizes[2], 5)


def split_sizes(channels: int) -> tuple[int, int, int]:
    """Three-way channel split; the remainder goes to the first group."""
    if channels < 3:
        raise ShapeMismatch(f"multi-scale block needs >= 3 channels, got {channels}")
    third = channels // 3
    return channels - 2 * third, third, third


def multi_scale_block(x: Tensor, m: MultiScaleContextBlock) -> Tensor:
    parts = split(x, split_sizes(x.shape[1]), axis=1)
    return concat([m.conv1(parts[0]), m.conv3(parts[1]), m.conv5(parts[2])], axis=1)


# ---------------------------------------------------------------- attention


def relative_position_index(m: int) -> np.ndarray:
    """``[m*m, m*m]`` index into a ``(2m-1)**2`` table of (drow, dcol) offsets."""
    rows, cols = np.divmod(np.arange(m * m), m)
    drow = rows[:, None] - rows[None, :] + (m - 1)
    dcol = cols[:, None] - cols[None, :] + (m - 1)
    return drow * (2 * m - 1) + dcol


class MultiHeadAttention(Module):
    def __init__(self, rng, cfg: ModelConfig):
        d = cfg.embed_dim
        self.num_heads = cfg.num_heads
        self.w_q = _linear_weight(rng, d, d)
        self.w_k = _linear_weight(rng, d, d)
        self.w_v = _linear_weight(rng, d, d)
        self.w_tmsa = _linear_weight(rng, d, d)
        self.window = cfg.window if cfg.rel_bias else None
        if self.window is not None:
            m = self.window
            self.bias_table = _zeros((2 * m - 1) ** 2, cfg.num_heads)
            self.bias_index = relative_position_index(m)


def relative_bias(attn: MultiHeadAttention) -> Tensor:
    """Per-head bias ``[n_heads, M*M, M*M]`` gathered from the offset table."""
    b = take(attn.bias_table, attn.bias_index)
    return permute(b, (2, 0, 1))


def attention_weights(z: Tensor, attn: MultiHeadAttention) -> tuple[Tensor, Tensor]:
    """Return ``(weights [B, h, N, N], values [B, h, N, d_head])``."""
    b, n, d = z.shape
    heads = attn.num_heads
    dh = d // heads

    def split_heads(t):
        return permute(reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))

    q = split_heads(matmul(z, attn.w_q))
    k = split_heads(matmul(z, attn.w_k))
    v = split_heads(matmul(z, attn.w_v))
    logits = matmul(q, permute(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    if attn.window is not None:
        if n != attn.window**2:
            raise BiasGridMismatch(f"{n} tokens but relative bias expects a {attn.window}x{attn.window} window")
        logits = logits + relative_bias(attn)
    return F.softmax(logits, axis=-1), v


def msa(z: Tensor, attn: MultiHeadAttention) -> Tensor:
    """Per-head scaled dot-product attention; heads concatenated on features."""
    b, n, d = z.shape
    weights, v = attention_weights(z, attn)
    out = matmul(weights, v)
    return reshape(permute(out, (0, 2, 1, 3)), (b, n, d))


def tmsa(z: Tensor, attn: MultiHeadAttention) -> Tensor:
    return matmul(msa(z, attn), attn.w_tmsa)


class TransformerBlock(Module):
    def __init__(self, rng, cfg: ModelConfig):
        d, hid = cfg.embed_dim, cfg.mlp_hidden
        self.norm1_g = _param(np.ones(d))
        self.norm1_b = _zeros(d)
        self.attn = MultiHeadAttention(rng, cfg)
        self.norm2_g = _param(np.ones(d))
        self.norm2_b = _zeros(d)
        self.fc1_w = _linear_weight(rng, d, hid)
        self.fc1_b = _zeros(hid)
        self.fc2_w = _linear_weight(rng, hid, d)
        self.fc2_b = _zeros(d)
        self.activation = F.gelu if cfg.mlp_activation == "gelu" else F.relu


def transformer_block(z: Tensor, blk: TransformerBlock) -> Tensor:
    """Pre-norm residual block: attention sublayer, then MLP sublayer."""
    z1 = tmsa(F.layernorm(z, blk.norm1_g, blk.norm1_b), blk.attn) + z
    h = F.layernorm(z1, blk.norm2_g, blk.norm2_b)
    h = F.linear(blk.activation(F.linear(h, blk.fc1_w, blk.fc1_b)), blk.fc2_w, blk.fc2_b)
    return h + z1


class GlobalSpatialAttention(Module):
    def __init__(self, rng, channels: int, verbatim: bool = False):
        reduced = max(channels // 8, 1)
        self.query = Conv(rng, channels, reduced, 1)
        self.key = Conv(rng, channels, reduced, 1)
        self.value = Conv(rng, channels, channels, 1)
        self.verbatim = verbatim


def gsa_attention_map(feat: Tensor, params: GlobalSpatialAttention) -> Tensor:
    """``[B, n, n]`` map with entry (i, j) = softmax over i of ``M_i . N_j``."""
    b, _, h, w = feat.shape
    m = reshape(params.query(feat), (b, -1, h * w))
    nn = reshape(params.key(feat), (b, -1, h * w))
    return F.softmax(matmul(permute(m, (0, 2, 1)), nn), axis=1)


def gsa(feat: Tensor, params: GlobalSpatialAttention) -> Tensor:
    """Position attention over the spatial grid of ``[B, c, h, w]``.

    Output at position j is ``sum_i B[i, j] * W_i``. With ``verbatim`` the
    ``sum_i B[i, j] * W_j`` form is used instead, which reduces to
    ``W_j`` since every column of ``B`` sums to one.
    """
    b, c, h, w = feat.shape
    attn = gsa_attention_map(feat, params)
    values = reshape(params.value(feat), (b, c, h * w))
    if params.verbatim:
        out = values * reduce_sum(attn, axis=1, keepdims=True)
    else:
        out = matmul(values, attn)
    return reshape(out, (b, c, h, w))


# ------------------------------------------------------------------ decoder


class DecoderStage(Module):
    def __init__(self, rng, c_in: int, width: int, skip_channels: int, mode: str):
        self.mode = mode
        if mode == "transposed_conv":
            self.up_w = _param(rngmod.truncated_normal(rng, (c_in, c_in, 4, 4), np.sqrt(2.0 / (c_in * 4))))
            self.up_b = _zeros(c_in)
        self.process = Conv(rng, c_in, width, 3)
        self.fuse = Conv(rng, width + c_in + skip_channels, width, 3)
        self.width = width


def upsample(x: Tensor, stage: DecoderStage) -> Tensor:
    if stage.mode == "transposed_conv":
        return F.conv_transpose2d(x, stage.up_w, stage.up_b, stride=2, pad=1)
    return F.bilinear_upsample(x, 2)


def decoder_stage(prev: Tensor, skip: Tensor, stage: DecoderStage) -> Tensor:
    """x2 upsample; concat (processed path, upsampled path, skip); 3x3 fuse."""
    up = upsample(prev, stage)
    if skip.shape[0] != up.shape[0] or skip.shape[2:] != up.shape[2:]:
        raise ShapeMismatch(f"skip {skip.shape} does not match upsampled {up.shape}")
    processed = F.gelu(stage.process(up))
    return F.gelu(stage.fuse(concat([processed, up, skip], axis=1)))


# -------------------------------------------------------------------- model


class VitbisModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = rngmod.stream(seed, "init")
        d, k = cfg.embed_dim, cfg.reduced_channels
        self.embed = PatchEmbedding(rng, cfg)
        self.encoder_context = MultiScaleContextBlock(rng, d)
        self.stacks = [_Stack(rng, cfg) for _ in range(cfg.num_stacks)]
        if cfg.use_gsa:
            self.gsa = GlobalSpatialAttention(rng, d, cfg.gsa_verbatim)
        self.reduce = Conv(rng, d, k, 1)
        widths = cfg.decoder_widths
        self.skip_proj = []
        self.decoder = []
        c_prev = k
        for s in range(DECODER_STAGES):
            skip_ch = widths[s] if _skip_stack(cfg, s) is not None else 0
            if s == DECODER_STAGES - 1:
                skip_ch += cfg.in_channels
            if _skip_stack(cfg, s) is not None:
                self.skip_proj.append(Conv(rng, d, widths[s], 1))
            self.decoder.append(DecoderStage(rng, c_prev, widths[s], skip_ch, cfg.upsample_mode))
            c_prev = widths[s]
        self.decoder_context = MultiScaleContextBlock(rng, c_prev)
        self.head = Conv(rng, c_prev, cfg.num_classes, 1)
        self.head.weight = _param(rngmod.truncated_normal(rng, self.head.weight.shape, LINEAR_STD))

    def __call__(self, x: Tensor) -> Tensor:
        return forward(self, x)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ShapeMismatch(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeMismatch(f"{name}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()


class _Stack(Module):
    def __init__(self, rng, cfg):
        self.blocks = [TransformerBlock(rng, cfg) for _ in range(cfg.depth)]


def _skip_stack(cfg: ModelConfig, stage: int) -> int | None:
    """Encoder stack feeding decoder stage ``stage`` (deepest first)."""
    idx = cfg.num_stacks - 1 - stage
    return idx if idx >= 0 else None


def encode(model: VitbisModel, x: Tensor) -> tuple[Tensor, list[Tensor]]:
    """Return the reduced bottleneck map and the per-stack token maps."""
    cfg = model.cfg
    if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.height, cfg.width):
        raise ShapeMismatch(f"expected input [B, {cfg.in_channels}, {cfg.height}, {cfg.width}], got {x.shape}")
    gh, gw = cfg.grid
    z = embed_patches(x, model.embed)
    z = map_to_tokens(multi_scale_block(tokens_to_map(z, gh, gw), model.encoder_context))
    skips = []
    for stack in model.stacks:
        for blk in stack.blocks:
            z = transformer_block(z, blk)
        skips.append(tokens_to_map(z, gh, gw))
    feat = skips[-1]
    if cfg.use_gsa:
        feat = feat + gsa(feat, model.gsa)
    bottleneck = model.reduce(feat)
    step = 2**DECODER_STAGES
    bottleneck = F.resize_bilinear(bottleneck, cfg.height // step, cfg.width // step)
    return bottleneck, skips


def decode(model: VitbisModel, bottleneck: Tensor, skips: list[Tensor], image: Tensor) -> Tensor:
    cfg = model.cfg
    feat = bottleneck
    proj = iter(model.skip_proj)
    for s, stage in enumerate(model.decoder):
        size = (feat.shape[2] * 2, feat.shape[3] * 2)
        parts = []
        idx = _skip_stack(cfg, s)
        if idx is not None:
            parts.append(F.resize_bilinear(next(proj)(skips[idx]), *size))
        if s == DECODER_STAGES - 1:
            parts.append(image)
        skip = concat(parts, axis=1) if len(parts) > 1 else parts[0]
        feat = decoder_stage(feat, skip, stage)
    feat = multi_scale_block(feat, model.decoder_context)
    return model.head(feat)


def forward(model: VitbisModel, x: Tensor) -> Tensor:
    """``[B, C, H, W] -> [B, J, H, W]`` segmentation logits."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    bottleneck, skips = encode(model, x)
    return decode(model, bottleneck, skips, x)
