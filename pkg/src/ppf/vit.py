"""A small pre-norm vision transformer whose last layer can be token-masked.

Parameters live in a flat, ordered ``dict[str, Tensor]`` so they can be
checkpointed by name. Images are ``(B, H, W, C)`` arrays in ``[0, 1]``;
tokens are ordered class token first, then patches in row-major grid order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rollout import FPMask, build_fp_mask, class_token_scores, rollout


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    depth: int = 3
    heads: int = 2
    embed_dim: int = 32
    mlp_ratio: float = 2.0
    n_classes: int = 4
    in_chans: int = 3

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.depth < 1:
            raise ValueError("depth must be at least 1")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid ** 2

    @property
    def n_tokens(self) -> int:
        return self.n_patches + 1

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.mlp_ratio * self.embed_dim))


@dataclass
class EncoderOutput:
    cls: Tensor                 # (B, d)
    tokens: Tensor              # (B, n-1, d)
    attention: list[np.ndarray]  # per layer, head-averaged (B, n, n)
    mask: FPMask
    sequence: Tensor = field(repr=False, default=None)  # (B, n, d)


def trunc_normal(rng: np.random.Generator, shape, std=0.02) -> np.ndarray:
    """Normal(0, std) redrawn until every sample lies within two std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(cfg: ViTConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    d, hid = cfg.embed_dim, cfg.mlp_hidden
    patch_dim = cfg.patch_size ** 2 * cfg.in_chans
    shapes: list[tuple[str, tuple, str]] = [
        ("patch.w", (patch_dim, d), "w"),
        ("patch.b", (d,), "zero"),
        ("cls_token", (1, d), "w"),
        ("pos_embed", (cfg.n_tokens, d), "w"),
    ]
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        shapes += [
            (p + "norm1.w", (d,), "one"), (p + "norm1.b", (d,), "zero"),
            (p + "attn.qkv.w", (d, 3 * d), "w"), (p + "attn.qkv.b", (3 * d,), "zero"),
            (p + "attn.proj.w", (d, d), "w"), (p + "attn.proj.b", (d,), "zero"),
            (p + "norm2.w", (d,), "one"), (p + "norm2.b", (d,), "zero"),
            (p + "mlp.fc1.w", (d, hid), "w"), (p + "mlp.fc1.b", (hid,), "zero"),
            (p + "mlp.fc2.w", (hid, d), "w"), (p + "mlp.fc2.b", (d,), "zero"),
        ]
    shapes += [("norm.w", (d,), "one"), ("norm.b", (d,), "zero")]
    params = {}
    for name, shape, kind in shapes:
        if kind == "w":
            arr = trunc_normal(rng, shape)
        elif kind == "one":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr, requires_grad=True)
    return params


def patchify(images: np.ndarray, cfg: ViTConfig) -> np.ndarray:
    """(B, H, W, C) -> (B, g*g, p*p*C), patches in row-major grid order."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    b, h, w, c = images.shape
    if h != cfg.image_size or w != cfg.image_size or c != cfg.in_chans:
        raise ad.ShapeError(
            f"image shape {(h, w, c)} does not match config "
            f"{(cfg.image_size, cfg.image_size, cfg.in_chans)}")
    g, p = cfg.grid, cfg.patch_size
    x = images.reshape(b, g, p, g, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g * g, p * p * c)


def patch_embed(images, params, cfg: ViTConfig) -> Tensor:
    """Linear patch projection, class token prepended, positions added."""
    patches = patchify(images, cfg)
    b = patches.shape[0]
    tok = ad.matmul(Tensor(patches), params["patch.w"]) + params["patch.b"]
    cls = ad.reshape(params["cls_token"], (1, 1, cfg.embed_dim))
    cls = ad.mul(cls, np.ones((b, 1, 1)))
    x = ad.concat([cls, tok], axis=1)
    return x + ad.reshape(params["pos_embed"], (1, cfg.n_tokens, cfg.embed_dim))


def linear(x: Tensor, params, prefix: str) -> Tensor:
    return ad.matmul(x, params[prefix + ".w"]) + params[prefix + ".b"]


def mhsa(x: Tensor, params, prefix: str, heads: int, keep=None):
    """Multi-head self-attention on ``(B, n, d)`` tokens.

    ``keep`` is an optional boolean ``(B, n-1)`` image-token mask. Masked
    key columns receive zero attention and each row renormalizes over the
    survivors; the class-token column is always kept.

    Returns the projected output and the head-averaged attention ``(B, n, n)``.
    """
    b, n, d = x.shape
    dh = d // heads
    key_mask = None
    if keep is not None:
        keep = np.asarray(keep, dtype=bool)
        if keep.shape != (b, n - 1):
            raise ValueError(f"mask shape {keep.shape} does not match (B, n-1) = {(b, n - 1)}")
        key_mask = np.concatenate([np.ones((b, 1), dtype=bool), keep], axis=1)
        key_mask = key_mask[:, None, None, :]
    qkv = linear(x, params, prefix + ".qkv")
    qkv = ad.transpose(ad.reshape(qkv, (b, n, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    logits = ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
    attn = ad.softmax(logits, key_mask)
    out = ad.matmul(attn, v)
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, n, d))
    return linear(out, params, prefix + ".proj"), attn.data.mean(axis=1)


def block(x: Tensor, params, i: int, cfg: ViTConfig, keep=None):
    p = f"blocks.{i}."
    h = ad.layer_norm(x, params[p + "norm1.w"], params[p + "norm1.b"])
    a, attn = mhsa(h, params, p + "attn", cfg.heads, keep)
    x = x + a
    h = ad.layer_norm(x, params[p + "norm2.w"], params[p + "norm2.b"])
    h = linear(ad.gelu(linear(h, params, p + "mlp.fc1")), params, p + "mlp.fc2")
    return x + h, attn


def forward(images, params, cfg: ViTConfig, k: int | None = None,
            mask_policy="rollout", renormalize: bool = True) -> EncoderOutput:
    """Encode a batch of images.

    Layers ``1..L-1`` run unmasked. The rollout of their attention picks the
    ``k`` image tokens most influential on the class token and layer ``L``
    attends only to those (plus the class token).

    ``mask_policy`` is ``"rollout"`` (default), ``"none"`` (no masking, all
    tokens kept), or an explicit boolean ``(B, n-1)`` keep array.
    """
    x = patch_embed(images, params, cfg)
    b, n = x.shape[0], cfg.n_tokens
    attns = []
    for i in range(cfg.depth - 1):
        x, a = block(x, params, i, cfg)
        attns.append(a)

    if isinstance(mask_policy, str) and mask_policy == "rollout":
        kk = n - 1 if k is None else k
        if attns:
            scores = class_token_scores(rollout(attns, renormalize))
        else:
            scores = np.zeros((b, n - 1))
        mask = build_fp_mask(scores, kk)
        keep = mask.keep
    elif isinstance(mask_policy, str) and mask_policy == "none":
        mask = FPMask(np.ones((b, n - 1), dtype=bool), n - 1, np.zeros((b, n - 1)))
        keep = None
    else:
        keep = np.broadcast_to(np.asarray(mask_policy, dtype=bool), (b, n - 1)).copy()
        mask = FPMask(keep, int(keep[0].sum()), np.zeros((b, n - 1)))

    x, a = block(x, params, cfg.depth - 1, cfg, keep)
    attns.append(a)
    x = ad.layer_norm(x, params["norm.w"], params["norm.b"])
    return EncoderOutput(cls=x[:, 0, :], tokens=x[:, 1:, :], attention=attns,
                         mask=mask, sequence=x)
