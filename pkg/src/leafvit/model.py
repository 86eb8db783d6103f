"""Compact pre-norm vision transformer with an optional extended variant.

The extended ("customized") variant appends one extra transformer block and
one extra GELU feedforward layer (embed_dim -> embed_dim) applied to the class
token after the final norm, before the classifier head.

Parameters live in a flat, insertion-ordered name -> Tensor map; the closed
form ``parameter_count`` must agree exactly with the allocated totals.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .seeding import rng_for
from .tensor import Tensor

CHECKPOINT_MAGIC = b"LVIT"
CHECKPOINT_VERSION = 1


class CheckpointFormatError(ValueError):
    """Raised for unreadable, truncated or mismatched checkpoint files."""


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 224
    patch_size: int = 16
    embed_dim: int = 192
    depth: int = 4                  # base block count; +1 when customized
    heads: int = 4
    mlp_ratio: int = 4
    num_classes: int = 3
    customized: bool = True
    dropout: float = 0.0

    def validate(self) -> None:
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError(f"dropout must be in [0,1), got {self.dropout}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def num_blocks(self) -> int:
        return self.depth + (1 if self.customized else 0)

    @property
    def hidden_dim(self) -> int:
        return int(self.mlp_ratio * self.embed_dim)


def parameter_count(config: ViTConfig) -> int:
    """Exact analytic element count of every learned tensor."""
    config.validate()
    d = config.embed_dim
    k = config.num_classes
    rd = config.hidden_dim
    patch_dim = config.patch_size * config.patch_size * 3
    per_block = (d * 3 * d + 3 * d) + (d * d + d) + 4 * d + (d * rd + rd) + (rd * d + d)
    total = patch_dim * d + d                    # patch projection
    total += d                                   # class token
    total += (1 + config.num_patches) * d        # positional embeddings
    total += config.num_blocks * per_block
    total += 2 * d                               # final norm
    if config.customized:
        total += d * d + d                       # extra feedforward
    total += d * k + k                           # head
    return total


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within two sigma."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(np.float32)


def build_params(config: ViTConfig, init_seed: int) -> dict[str, Tensor]:
    config.validate()
    rng = rng_for(init_seed)
    d = config.embed_dim
    patch_dim = config.patch_size * config.patch_size * 3

    params: dict[str, Tensor] = {}

    def weight(name, shape):
        params[name] = Tensor(_trunc_normal(rng, shape), requires_grad=True, name=name)

    def zeros(name, shape):
        params[name] = Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True, name=name)

    def ones(name, shape):
        params[name] = Tensor(np.ones(shape, dtype=np.float32), requires_grad=True, name=name)

    weight("patch_embed.weight", (patch_dim, d))
    zeros("patch_embed.bias", (d,))
    weight("cls_token", (1, 1, d))
    weight("pos_embed", (1, 1 + config.num_patches, d))
    for i in range(config.num_blocks):
        ones(f"blocks.{i}.ln1.gamma", (d,))
        zeros(f"blocks.{i}.ln1.beta", (d,))
        weight(f"blocks.{i}.qkv.weight", (d, 3 * d))
        zeros(f"blocks.{i}.qkv.bias", (3 * d,))
        weight(f"blocks.{i}.attn_out.weight", (d, d))
        zeros(f"blocks.{i}.attn_out.bias", (d,))
        ones(f"blocks.{i}.ln2.gamma", (d,))
        zeros(f"blocks.{i}.ln2.beta", (d,))
        weight(f"blocks.{i}.mlp.fc1.weight", (d, config.hidden_dim))
        zeros(f"blocks.{i}.mlp.fc1.bias", (config.hidden_dim,))
        weight(f"blocks.{i}.mlp.fc2.weight", (config.hidden_dim, d))
        zeros(f"blocks.{i}.mlp.fc2.bias", (d,))
    ones("final_norm.gamma", (d,))
    zeros("final_norm.beta", (d,))
    if config.customized:
        weight("extra_ffn.weight", (d, d))
        zeros("extra_ffn.bias", (d,))
    weight("head.weight", (d, config.num_classes))
    zeros("head.bias", (config.num_classes,))
    return params


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(b, H, W, 3) float images -> (b, N, patch_size^2 * 3) row-major patch rows."""
    b, h, w, c = images.shape
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(b, gh, patch_size, gw, patch_size, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(b, gh * gw, patch_size * patch_size * c))


def unpatchify(patches: np.ndarray, patch_size: int, image_size: int, channels: int = 3) -> np.ndarray:
    """Inverse of ``patchify`` for square images."""
    b, n, _ = patches.shape
    g = image_size // patch_size
    x = patches.reshape(b, g, g, patch_size, patch_size, channels)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(b, image_size, image_size, channels))


class VisionTransformer:
    """Config plus parameter map; ``forward`` is pure given the parameters."""

    def __init__(self, config: ViTConfig, params: dict[str, Tensor]):
        config.validate()
        self.config = config
        self.params = params

    @staticmethod
    def build(config: ViTConfig, init_seed: int = 0) -> "VisionTransformer":
        return VisionTransformer(config, build_params(config, init_seed))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> "VisionTransformer":
        return VisionTransformer(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "VisionTransformer":
        fresh = {}
        for k, v in self.params.items():
            fresh[k] = Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)
        return VisionTransformer(self.config, fresh)

    # -- forward ----------------------------------------------------------

    def block_forward(
        self,
        i: int,
        x: Tensor,
        train: bool = False,
        rng: np.random.Generator | None = None,
        captured: dict | None = None,
    ) -> Tensor:
        """One pre-norm block: x + attn(LN(x)), then x + mlp(LN(x)).

        When ``captured`` is given, the block's attention tensor is stored in
        it under "attention".
        """
        p = self.params
        cfg = self.config
        b, n, d = x.shape
        heads = cfg.heads
        dh = d // heads

        h = T.layer_norm(x, p[f"blocks.{i}.ln1.gamma"], p[f"blocks.{i}.ln1.beta"])
        w_qkv = p[f"blocks.{i}.qkv.weight"]
        b_qkv = p[f"blocks.{i}.qkv.bias"]

        def head_proj(lo: int) -> Tensor:
            sl = slice(lo * d, (lo + 1) * d)
            proj = T.linear(h, w_qkv[:, sl], b_qkv[sl])
            return T.transpose(T.reshape(proj, (b, n, heads, dh)), (0, 2, 1, 3))

        q = head_proj(0) * (1.0 / np.sqrt(dh))
        k = head_proj(1)
        v = head_proj(2)
        att = T.softmax(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), axis=-1)
        if captured is not None:
            captured["attention"] = att
        if train and cfg.dropout > 0.0:
            att = T.dropout(att, cfg.dropout, rng)
        o = T.matmul(att, v)                             # (b, heads, n, dh)
        o = T.reshape(T.transpose(o, (0, 2, 1, 3)), (b, n, d))
        o = T.linear(o, p[f"blocks.{i}.attn_out.weight"], p[f"blocks.{i}.attn_out.bias"])
        if train and cfg.dropout > 0.0:
            o = T.dropout(o, cfg.dropout, rng)
        x = x + o

        h2 = T.layer_norm(x, p[f"blocks.{i}.ln2.gamma"], p[f"blocks.{i}.ln2.beta"])
        m = T.gelu(T.linear(h2, p[f"blocks.{i}.mlp.fc1.weight"], p[f"blocks.{i}.mlp.fc1.bias"]))
        if train and cfg.dropout > 0.0:
            m = T.dropout(m, cfg.dropout, rng)
        m = T.linear(m, p[f"blocks.{i}.mlp.fc2.weight"], p[f"blocks.{i}.mlp.fc2.bias"])
        if train and cfg.dropout > 0.0:
            m = T.dropout(m, cfg.dropout, rng)
        return x + m

    def forward(
        self,
        images: np.ndarray,
        train: bool = False,
        rng: np.random.Generator | None = None,
        capture_block: int | None = None,
    ):
        """Logits for a batch of (b, H, W, 3) float images.

        With ``capture_block=i``, also returns {"tokens_in": Tensor, "attention":
        Tensor} for block i — the token activations entering the block and its
        attention weights — retained for explanation methods.
        """
        cfg = self.config
        p = self.params
        if images.ndim != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, 3):
            raise T.ShapeError(
                f"expected (b, {cfg.image_size}, {cfg.image_size}, 3) images, got {images.shape}"
            )
        if capture_block is not None and not (0 <= capture_block < cfg.num_blocks):
            raise ValueError(f"capture_block {capture_block} out of range [0, {cfg.num_blocks})")
        dtype = p["patch_embed.weight"].dtype
        b = images.shape[0]

        patches = Tensor(patchify(images.astype(dtype), cfg.patch_size))
        x = T.linear(patches, p["patch_embed.weight"], p["patch_embed.bias"])
        cls = T.broadcast_to(p["cls_token"], (b, 1, cfg.embed_dim))
        x = T.concat([cls, x], axis=1)
        x = x + p["pos_embed"]
        if train and cfg.dropout > 0.0:
            x = T.dropout(x, cfg.dropout, rng)

        captured = None
        for i in range(cfg.num_blocks):
            if capture_block == i:
                captured = {"tokens_in": x}
                x = self.block_forward(i, x, train, rng, captured)
            else:
                x = self.block_forward(i, x, train, rng)

        x = T.layer_norm(x, p["final_norm.gamma"], p["final_norm.beta"])
        cls_out = x[:, 0]
        if cfg.customized:
            cls_out = T.gelu(T.linear(cls_out, p["extra_ffn.weight"], p["extra_ffn.bias"]))
        logits = T.linear(cls_out, p["head.weight"], p["head.bias"])
        if capture_block is not None:
            return logits, captured
        return logits


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(path: str | Path, model: VisionTransformer) -> None:
    """Binary checkpoint: magic, version, config echo, named float32 tensors."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg_blob = json.dumps(asdict(model.config), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg_blob)))
    buf.write(cfg_blob)
    buf.write(struct.pack("<I", len(model.params)))
    for name, t in model.params.items():
        name_b = name.encode("utf-8")
        buf.write(struct.pack("<H", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<B", t.data.ndim))
        buf.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path, expect_config: ViTConfig | None = None) -> VisionTransformer:
    raw = Path(path).read_bytes()
    view = io.BytesIO(raw)

    def read(n: int) -> bytes:
        chunk = view.read(n)
        if len(chunk) != n:
            raise CheckpointFormatError(f"{path}: truncated checkpoint file")
        return chunk

    if read(4) != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic bytes, not a checkpoint")
    (version,) = struct.unpack("<I", read(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", read(4))
    cfg_dict = json.loads(read(cfg_len).decode("utf-8"))
    config = ViTConfig(**cfg_dict)
    if expect_config is not None and config != expect_config:
        raise CheckpointFormatError(
            f"{path}: checkpoint config {cfg_dict} does not match the requested config"
        )
    (n_tensors,) = struct.unpack("<I", read(4))
    params: dict[str, Tensor] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<H", read(2))
        name = read(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", read(1))
        shape = struct.unpack(f"<{ndim}I", read(4 * ndim))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(read(4 * count), dtype="<f4").reshape(shape).copy()
        params[name] = Tensor(data, requires_grad=True, name=name)
    if view.read(1):
        raise CheckpointFormatError(f"{path}: trailing bytes after last tensor")
    return VisionTransformer(config, params)
