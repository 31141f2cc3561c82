"""Vision transformer whose attention heads can be switched on per subnet."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class SubnetMode(enum.Enum):
    FULL = "full"
    SHARED = "shared"
    PERSONALIZED = "personalized"


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 16
    patch_size: int = 4
    embed_dim: int = 32
    num_heads: int = 4
    num_layers: int = 3
    mlp_hidden: Optional[int] = None
    num_classes: int = 2
    channels: int = 1

    def __post_init__(self):
        for f in ("image_size", "patch_size", "embed_dim", "num_heads", "num_layers", "num_classes", "channels"):
            if getattr(self, f) <= 0:
                raise ConfigError(f"{f} must be positive, got {getattr(self, f)}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"patch_size {self.patch_size} does not divide image_size {self.image_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"num_heads {self.num_heads} does not divide embed_dim {self.embed_dim}")
        if self.mlp_hidden is None:
            object.__setattr__(self, "mlp_hidden", 4 * self.embed_dim)
        elif self.mlp_hidden <= 0:
            raise ConfigError(f"mlp_hidden must be positive, got {self.mlp_hidden}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


def param_shapes(cfg: ViTConfig) -> dict[str, tuple]:
    d, dh = cfg.embed_dim, cfg.head_dim
    shapes = {
        "embed.W": (cfg.patch_dim, d),
        "embed.pos": (cfg.num_patches + 1, d),
        "embed.cls": (d,),
        "norm.gain": (d,),
        "norm.bias": (d,),
        "head.W": (d, cfg.num_classes),
        "head.b": (cfg.num_classes,),
    }
    for l in range(cfg.num_layers):
        b = f"block{l}"
        for ln in ("ln0", "ln1"):
            shapes[f"{b}.{ln}.gain"] = (d,)
            shapes[f"{b}.{ln}.bias"] = (d,)
        for k in range(cfg.num_heads):
            shapes[f"{b}.head{k}.qkv"] = (d, 3 * dh)
            shapes[f"{b}.head{k}.proj"] = (dh, d)
        shapes[f"{b}.mlp.W1"] = (d, cfg.mlp_hidden)
        shapes[f"{b}.mlp.b1"] = (cfg.mlp_hidden,)
        shapes[f"{b}.mlp.W2"] = (cfg.mlp_hidden, d)
        shapes[f"{b}.mlp.b2"] = (d,)
    return dict(sorted(shapes.items()))


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return (x * std).astype(T.DTYPE)


def init_params(cfg: ViTConfig, seed: int, std: float = 0.02) -> dict[str, Tensor]:
    """Seeded initial parameters in lexicographic name order."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "gain":
            arr = np.ones(shape, dtype=T.DTYPE)
        elif leaf in ("bias", "b", "b1", "b2"):
            arr = np.zeros(shape, dtype=T.DTYPE)
        else:
            arr = _trunc_normal(rng, shape, std)
        out[name] = Tensor(arr, requires_grad=True, name=name)
    return out


def patchify(images, cfg: ViTConfig) -> Tensor:
    """[B, D, D, ch] (or [B, D, D]) images -> [B, N, P*P*ch] raster-ordered patches."""
    x = images.data if isinstance(images, Tensor) else np.asarray(images)
    if x.ndim == 3:
        x = x[..., None]
    D, P, ch = cfg.image_size, cfg.patch_size, cfg.channels
    if x.ndim != 4 or x.shape[1:] != (D, D, ch):
        raise T.DataError(f"expected images [B, {D}, {D}, {ch}], got {tuple(x.shape)}")
    b = x.shape[0]
    g = D // P
    x = x.reshape(b, g, P, g, P, ch).transpose(0, 1, 3, 2, 4, 5)
    dtype = x.dtype if x.dtype in (np.float32, np.float64) else T.DTYPE
    return Tensor(np.ascontiguousarray(x.reshape(b, g * g, P * P * ch), dtype=dtype))


def embed(patches: Tensor, W: Tensor, pos: Tensor, cls: Tensor) -> Tensor:
    """z0 = [cls; patches @ W] + pos."""
    b, n, _ = patches.shape
    d = W.shape[1]
    if pos.shape != (n + 1, d) or cls.shape != (d,):
        raise T.ShapeError(f"embed: pos {pos.shape}, cls {cls.shape} for {n} patches, dim {d}")
    tok = T.matmul(patches, W)
    cls_tok = T.add(T.reshape(cls, (1, 1, d)), Tensor(np.zeros((b, 1, d), dtype=W.data.dtype)))
    return T.add(T.concat([cls_tok, tok], axis=1), pos)


class ViTModel:
    """Forward passes over a flat name -> Tensor parameter map.

    Heads ``0 .. personalized_heads-1`` of every layer form the personalized
    subnet, the remaining heads the shared subnet.
    """

    def __init__(self, cfg: ViTConfig, params: Mapping[str, Tensor], personalized_heads: int = 0):
        self.cfg = cfg
        self.params = params
        if not 0 <= personalized_heads <= cfg.num_heads:
            raise ConfigError(f"personalized_heads must be in [0, {cfg.num_heads}], got {personalized_heads}")
        self.personalized_heads = personalized_heads

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.params[name]
        except KeyError:
            raise StateError(f"parameter {name!r} is not initialized") from None

    def active_heads(self, mode: SubnetMode, personalized_heads: Optional[int] = None) -> list[int]:
        p = self.personalized_heads if personalized_heads is None else personalized_heads
        if not 0 <= p <= self.cfg.num_heads:
            raise ConfigError(f"personalized head count {p} out of [0, {self.cfg.num_heads}]")
        if mode is SubnetMode.FULL:
            return list(range(self.cfg.num_heads))
        if mode is SubnetMode.SHARED:
            return list(range(p, self.cfg.num_heads))
        return list(range(p))

    def msa_forward(self, z: Tensor, layer: int, mode: SubnetMode = SubnetMode.FULL,
                    personalized_heads: Optional[int] = None) -> Tensor:
        heads = self.active_heads(mode, personalized_heads)
        b, t, d = z.shape
        if not heads:
            return Tensor(np.zeros(z.shape, dtype=z.data.dtype))
        dh, ka = self.cfg.head_dim, len(heads)
        pre = f"block{layer}"
        w_qkv = T.concat([self[f"{pre}.head{k}.qkv"] for k in heads], axis=1)
        w_out = T.concat([self[f"{pre}.head{k}.proj"] for k in heads], axis=0)
        qkv = T.matmul(z, w_qkv)
        qkv = T.transpose(T.reshape(qkv, (b, t, ka, 3, dh)), (3, 0, 2, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        attn = T.softmax(scores)
        heads_out = T.matmul(attn, v)
        merged = T.reshape(T.transpose(heads_out, (0, 2, 1, 3)), (b, t, ka * dh))
        return T.matmul(merged, w_out)

    def mlp_forward(self, z: Tensor, layer: int) -> Tensor:
        pre = f"block{layer}.mlp"
        h = T.gelu(T.add(T.matmul(z, self[f"{pre}.W1"]), self[f"{pre}.b1"]))
        return T.add(T.matmul(h, self[f"{pre}.W2"]), self[f"{pre}.b2"])

    def block_forward(self, z: Tensor, layer: int, mode: SubnetMode = SubnetMode.FULL) -> Tensor:
        pre = f"block{layer}"
        h = T.layer_norm(z, self[f"{pre}.ln0.gain"], self[f"{pre}.ln0.bias"])
        z = T.add(self.msa_forward(h, layer, mode), z)
        h = T.layer_norm(z, self[f"{pre}.ln1.gain"], self[f"{pre}.ln1.bias"])
        return T.add(self.mlp_forward(h, layer), z)

    def embed(self, images) -> Tensor:
        patches = patchify(images, self.cfg)
        W = self["embed.W"]
        if patches.data.dtype != W.data.dtype:
            patches = Tensor(patches.data.astype(W.data.dtype))
        return embed(patches, W, self["embed.pos"], self["embed.cls"])

    def forward(self, images, mode: SubnetMode = SubnetMode.FULL) -> Tensor:
        z = self.embed(images)
        for l in range(self.cfg.num_layers):
            z = self.block_forward(z, l, mode)
        z = T.layer_norm(z, self["norm.gain"], self["norm.bias"])
        cls = z[:, 0, :]
        return T.add(T.matmul(cls, self["head.W"]), self["head.b"])

    __call__ = forward

    def predict_proba(self, images, batch_size: int = 256) -> np.ndarray:
        """Class probabilities from the full model, no tape recording."""
        x = np.asarray(images)
        outs = []
        for i in range(0, len(x), batch_size):
            logits = self.forward(x[i:i + batch_size], SubnetMode.FULL)
            outs.append(T._stable_softmax(logits.data, 1.0))
        if not outs:
            return np.zeros((0, self.cfg.num_classes), dtype=T.DTYPE)
        return np.concatenate(outs, axis=0)
