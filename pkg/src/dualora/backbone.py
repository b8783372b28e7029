"""Frozen miniature vision transformer with adapter hook points.

The backbone is a standard pre-norm ViT: patch embedding (linear, no bias),
a classification token, fixed sinusoidal positional encodings, then N blocks
of multi-head self-attention and an MLP, each wrapped in residual
connections, and a final layer norm applied before the classification token
is read out.

All weights are drawn once at init and permanently frozen. Designated
attention projections (any subset of q, k, v) accept an additive delta
computed from the same normalized input the projection consumes, which is
where low-rank adapters attach.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError

PROJECTIONS = ("q", "k", "v")

# delta functions per attached projection, each mapping the normalized token
# tensor to an additive adjustment of the projection output
DeltaMap = Mapping[str, Callable[[ad.Tensor], ad.Tensor]]


@dataclass(frozen=True)
class BackboneConfig:
    num_blocks: int = 4
    width: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    image_side: int = 16
    patch_side: int = 8
    channels: int = 1
    attach_set: tuple[str, ...] = ("q", "v")

    def __post_init__(self):
        if self.num_blocks < 1 or self.width < 1 or self.heads < 1:
            raise ConfigError("num_blocks, width, and heads must be positive")
        if self.width % self.heads != 0:
            raise ConfigError(f"heads ({self.heads}) must divide width ({self.width})")
        if self.image_side < 1 or self.patch_side < 1 or self.channels < 1:
            raise ConfigError("image dimensions must be positive")
        if self.image_side % self.patch_side != 0:
            raise ConfigError(
                f"patch_side ({self.patch_side}) must divide image_side ({self.image_side})"
            )
        attach = tuple(self.attach_set)
        if not attach:
            raise ConfigError("attach_set must not be empty")
        if len(set(attach)) != len(attach) or any(p not in PROJECTIONS for p in attach):
            raise ConfigError(f"attach_set must be a subset of {PROJECTIONS}, got {attach}")
        object.__setattr__(self, "attach_set", tuple(p for p in PROJECTIONS if p in attach))

    @property
    def num_patches(self) -> int:
        return (self.image_side // self.patch_side) ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_side * self.patch_side

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.mlp_ratio * self.width))


@dataclass
class TokenState:
    """Token matrix flowing through the blocks.

    ``tokens`` is ``(num_tokens, width)`` for a single sample or
    ``(batch, num_tokens, width)`` for a batch; row 0 along the token axis is
    the classification token. ``block_index`` is the number of blocks already
    applied.
    """

    tokens: ad.Tensor
    block_index: int


def sinusoidal_positions(num_tokens: int, width: int) -> np.ndarray:
    """Fixed sin/cos positional table, position 0 belonging to the CLS row."""
    pos = np.arange(num_tokens, dtype=np.float64)[:, None]
    i = np.arange(width, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(i / 2.0) / width)
    table = np.zeros((num_tokens, width))
    table[:, 0::2] = np.sin(angle[:, 0::2])
    table[:, 1::2] = np.cos(angle[:, 1::2])
    return table


@dataclass
class Backbone:
    cfg: BackboneConfig
    params: dict[str, ad.Parameter] = field(default_factory=dict)
    positions: np.ndarray | None = None

    def param(self, name: str) -> ad.Parameter:
        return self.params[name]

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def byte_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].value.tobytes())
        return h.hexdigest()


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator) -> Backbone:
    """Draw all backbone weights (scaled Gaussian, std 1/sqrt(fan_in)) and freeze them.

    Layer norms start as identity (unit gain, zero bias) and the positional
    table is computed, not learned, so it is not a parameter.
    """
    d = cfg.width
    bb = Backbone(cfg=cfg)

    def frozen(name: str, value: np.ndarray) -> None:
        bb.params[name] = ad.Parameter(name, value, trainable=False, tag="backbone")

    def gaussian(shape, fan_in):
        return rng.standard_normal(shape) / np.sqrt(fan_in)

    frozen("embed.W", gaussian((cfg.patch_dim, d), cfg.patch_dim))
    frozen("cls", gaussian((d,), d))
    for i in range(1, cfg.num_blocks + 1):
        frozen(f"block{i}.ln1.g", np.ones(d))
        frozen(f"block{i}.ln1.b", np.zeros(d))
        for p in PROJECTIONS:
            frozen(f"block{i}.W{p}", gaussian((d, d), d))
            frozen(f"block{i}.b{p}", np.zeros(d))
        frozen(f"block{i}.Wo", gaussian((d, d), d))
        frozen(f"block{i}.bo", np.zeros(d))
        frozen(f"block{i}.ln2.g", np.ones(d))
        frozen(f"block{i}.ln2.b", np.zeros(d))
        frozen(f"block{i}.W1", gaussian((d, cfg.mlp_hidden), d))
        frozen(f"block{i}.b1", np.zeros(cfg.mlp_hidden))
        frozen(f"block{i}.W2", gaussian((cfg.mlp_hidden, d), cfg.mlp_hidden))
        frozen(f"block{i}.b2", np.zeros(d))
    frozen("lnf.g", np.ones(d))
    frozen("lnf.b", np.zeros(d))
    bb.positions = sinusoidal_positions(cfg.num_tokens, d)
    return bb


def _extract_patches(image: np.ndarray, cfg: BackboneConfig) -> np.ndarray:
    """Cut (batch, c, H, W) into (batch, num_patches, patch_dim) row-major."""
    b = image.shape[0]
    s = cfg.patch_side
    n = cfg.image_side // s
    x = image.reshape(b, cfg.channels, n, s, n, s)
    x = x.transpose(0, 2, 4, 1, 3, 5)  # (b, n, n, c, s, s)
    return x.reshape(b, n * n, cfg.patch_dim)


def patch_embed(image: np.ndarray, backbone: Backbone) -> TokenState:
    """Project patches, prepend the CLS token, and add positional encodings.

    Accepts a single image ``(channels, H, W)`` or a batch
    ``(batch, channels, H, W)``. Everything upstream of the first block is
    constant with respect to the trainable parameters, so the result enters
    the tape as a constant.
    """
    cfg = backbone.cfg
    image = np.asarray(image, dtype=np.float64)
    single = image.ndim == 3
    if single:
        image = image[None]
    expected = (cfg.channels, cfg.image_side, cfg.image_side)
    if image.ndim != 4 or image.shape[1:] != expected:
        raise ShapeError(f"expected image shape {expected}, got {image.shape[1 if single else 0:]}")
    patches = _extract_patches(image, cfg)
    tokens = patches @ backbone.param("embed.W").value
    cls = np.broadcast_to(backbone.param("cls").value, (image.shape[0], 1, cfg.width))
    tokens = np.concatenate([cls, tokens], axis=1) + backbone.positions
    if single:
        tokens = tokens[0]
    return TokenState(tokens=ad.constant(tokens), block_index=0)


def _attention(backbone: Backbone, i: int, h: ad.Tensor, deltas: DeltaMap) -> ad.Tensor:
    cfg = backbone.cfg
    d, nh = cfg.width, cfg.heads
    dh = d // nh

    def project(p: str) -> ad.Tensor:
        out = ad.add(
            ad.matmul(h, ad.leaf(backbone.param(f"block{i}.W{p}"))),
            ad.leaf(backbone.param(f"block{i}.b{p}")),
        )
        if p in deltas:
            delta = deltas[p](h)
            if delta.shape != out.shape:
                raise ShapeError(
                    f"adapter delta for {p!r} has shape {delta.shape}, expected {out.shape}"
                )
            out = ad.add(out, delta)
        return out

    def split(x: ad.Tensor) -> ad.Tensor:
        x = ad.reshape(x, x.shape[:-1] + (nh, dh))
        return ad.moveaxis(x, -2, -3)  # (..., heads, tokens, dh)

    q = split(project("q"))
    k = split(project("k"))
    v = split(project("v"))
    att = ad.scale(ad.matmul(q, ad.swap_last2(k)), 1.0 / np.sqrt(dh))
    att = ad.softmax_last(att)
    mixed = ad.moveaxis(ad.matmul(att, v), -3, -2)  # (..., tokens, heads, dh)
    mixed = ad.reshape(mixed, mixed.shape[:-2] + (d,))
    out = ad.add(
        ad.matmul(mixed, ad.leaf(backbone.param(f"block{i}.Wo"))),
        ad.leaf(backbone.param(f"block{i}.bo")),
    )
    return out


def block_forward(
    backbone: Backbone, state: TokenState, i: int, deltas: DeltaMap | None = None
) -> TokenState:
    """Apply block ``i`` (1-based) to the token state.

    Each projection named in the config's attach set may receive an additive
    delta; the delta sees the same layer-normalized input the frozen
    projection sees. With no deltas supplied this is the pure frozen block.
    """
    if i < 1 or i > backbone.cfg.num_blocks:
        raise ConfigError(f"block index {i} out of range 1..{backbone.cfg.num_blocks}")
    if state.block_index != i - 1:
        raise ShapeError(
            f"state is after block {state.block_index}, cannot apply block {i}"
        )
    deltas = deltas or {}
    unknown = set(deltas) - set(backbone.cfg.attach_set)
    if unknown:
        raise ConfigError(f"deltas supplied for unattached projections: {sorted(unknown)}")
    x = state.tokens
    h = ad.layer_norm(
        x, ad.leaf(backbone.param(f"block{i}.ln1.g")), ad.leaf(backbone.param(f"block{i}.ln1.b"))
    )
    x = ad.add(x, _attention(backbone, i, h, deltas))
    h2 = ad.layer_norm(
        x, ad.leaf(backbone.param(f"block{i}.ln2.g")), ad.leaf(backbone.param(f"block{i}.ln2.b"))
    )
    m = ad.add(ad.matmul(h2, ad.leaf(backbone.param(f"block{i}.W1"))), ad.leaf(backbone.param(f"block{i}.b1")))
    m = ad.add(ad.matmul(ad.gelu(m), ad.leaf(backbone.param(f"block{i}.W2"))), ad.leaf(backbone.param(f"block{i}.b2")))
    x = ad.add(x, m)
    return TokenState(tokens=x, block_index=i)


def extract_cls(backbone: Backbone, state: TokenState) -> ad.Tensor:
    """Final layer norm, then the CLS row: ``(..., d)``."""
    normed = ad.layer_norm(
        state.tokens, ad.leaf(backbone.param("lnf.g")), ad.leaf(backbone.param("lnf.b"))
    )
    return ad.take_row(normed, 0)
