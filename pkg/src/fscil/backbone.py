"""Compact convolutional-tokenizer transformer encoder with batch-norm.

The tokenizer applies 1-3 conv layers (each conv -> channel BN -> ReLU ->
optional max-pool) and flattens the spatial grid into a token sequence; no
class token and no positional embedding are added.  Encoder blocks are
pre-norm residual blocks whose norms are batch-norm layers, and the FFN
carries its own internal BN whose position is selectable ("between" the two
linear layers, the default, or "before" the first one).  A learned scalar
score pools the final token sequence into a single feature vector.

No projection carries a bias; the batch-norm shifts play that role.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError
from .numerics import (
    SeededRng,
    Tensor,
    batch_norm,
    broadcast_to,
    concat,
    conv2d,
    gelu,
    maxpool2d,
    relu,
    reshape,
    softmax,
)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def trunc_normal(rng: SeededRng, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) clipped to two standard deviations."""
    return np.clip(rng.normal(size=shape, scale=std), -2 * std, 2 * std)


@dataclass
class BackboneConfig:
    image_size: int = 4
    in_channels: int = 1
    conv_channels: tuple = ()
    conv_kernel: int = 3
    conv_stride: int = 1
    conv_padding: int = 1
    pool_size: int = 2
    pool_stride: int = 2
    embed_dim: int = 32
    layers: int = 2
    heads: int = 2
    ffn_hidden: int = 64
    bn_placement: str = "between"
    final_norm: bool = True
    prefix_capable: bool = True

    def __post_init__(self):
        if not self.conv_channels:
            self.conv_channels = (self.embed_dim,)
        self.conv_channels = tuple(self.conv_channels)
        if not 1 <= len(self.conv_channels) <= 3:
            raise ArgumentError("tokenizer supports 1-3 conv layers")
        if self.conv_channels[-1] != self.embed_dim:
            raise ArgumentError("last tokenizer channel count must equal embed_dim")
        if self.embed_dim % self.heads != 0:
            raise ArgumentError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.bn_placement not in ("between", "before"):
            raise ArgumentError(f"bn_placement must be 'between' or 'before', got {self.bn_placement!r}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    def grid_after_tokenizer(self) -> int:
        """Spatial side length after all conv/pool stages (conv arithmetic)."""
        side = self.image_size
        for _ in self.conv_channels:
            if side + 2 * self.conv_padding < self.conv_kernel:
                raise ArgumentError(f"kernel {self.conv_kernel} larger than padded input {side + 2 * self.conv_padding}")
            side = (side + 2 * self.conv_padding - self.conv_kernel) // self.conv_stride + 1
            if self.pool_size:
                if side < self.pool_size:
                    raise ArgumentError(f"pool window {self.pool_size} larger than feature map {side}")
                side = (side - self.pool_size) // self.pool_stride + 1
        return side

    def token_count(self) -> int:
        return self.grid_after_tokenizer() ** 2

    def flop_estimate(self) -> int:
        """Leading-order multiply count for one image forward pass."""
        n, d, dp = self.token_count(), self.embed_dim, self.ffn_hidden
        per_block = 4 * n * d * d + 2 * n * n * d + 2 * n * d * dp
        return self.layers * per_block + 2 * n * d

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "in_channels": self.in_channels,
            "conv_channels": list(self.conv_channels),
            "conv_kernel": self.conv_kernel,
            "conv_stride": self.conv_stride,
            "conv_padding": self.conv_padding,
            "pool_size": self.pool_size,
            "pool_stride": self.pool_stride,
            "embed_dim": self.embed_dim,
            "layers": self.layers,
            "heads": self.heads,
            "ffn_hidden": self.ffn_hidden,
            "bn_placement": self.bn_placement,
            "final_norm": self.final_norm,
            "prefix_capable": self.prefix_capable,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        d["conv_channels"] = tuple(d.get("conv_channels", ()))
        return cls(**d)


class BatchNorm:
    """Per-feature scale/shift with running statistics."""

    def __init__(self, num_features: int, feature_axis: int = -1):
        self.gamma = Tensor(np.ones(num_features), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features), requires_grad=True)
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)
        self.feature_axis = feature_axis

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            mode,
            feature_axis=self.feature_axis,
            eps=BN_EPS,
            momentum=BN_MOMENTUM,
        )

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}

    def buffers(self, prefix: str) -> dict:
        return {f"{prefix}.running_mean": self.running_mean, f"{prefix}.running_var": self.running_var}


class Linear:
    """Dense projection; init std defaults to the transformer setting."""

    def __init__(self, rng: SeededRng, in_dim: int, out_dim: int, bias: bool = True, std: float = 0.02):
        self.weight = Tensor(trunc_normal(rng, (in_dim, out_dim), std=std), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out

    def params(self, prefix: str) -> dict:
        out = {f"{prefix}.weight": self.weight}
        if self.bias is not None:
            out[f"{prefix}.bias"] = self.bias
        return out


class ConvTokenizer:
    """Conv stack producing the token sequence X in R^{n x d}."""

    def __init__(self, rng: SeededRng, cfg: BackboneConfig):
        self.cfg = cfg
        self.weights = []
        self.norms = []
        in_c = cfg.in_channels
        for i, out_c in enumerate(cfg.conv_channels):
            fan = in_c * cfg.conv_kernel * cfg.conv_kernel
            w = rng.child(f"conv{i}").normal(size=(out_c, in_c, cfg.conv_kernel, cfg.conv_kernel))
            self.weights.append(Tensor(w / np.sqrt(fan), requires_grad=True))
            self.norms.append(BatchNorm(out_c, feature_axis=1))
            in_c = out_c

    def __call__(self, images: Tensor, mode: str) -> Tensor:
        x = images
        for w, bn in zip(self.weights, self.norms):
            x = conv2d(x, w, stride=self.cfg.conv_stride, padding=self.cfg.conv_padding)
            x = relu(bn(x, mode))
            if self.cfg.pool_size:
                x = maxpool2d(x, self.cfg.pool_size, self.cfg.pool_stride)
        b, c, h, w_ = x.shape
        return reshape(x, (b, c, h * w_)).swapaxes(1, 2)

    def params(self, prefix: str) -> dict:
        out = {}
        for i, (w, bn) in enumerate(zip(self.weights, self.norms)):
            out[f"{prefix}.conv{i}.weight"] = w
            out.update(bn.params(f"{prefix}.bn{i}"))
        return out

    def buffers(self, prefix: str) -> dict:
        out = {}
        for i, bn in enumerate(self.norms):
            out.update(bn.buffers(f"{prefix}.bn{i}"))
        return out


class EncoderBlock:
    """Pre-norm residual block: BN -> MHSA -> add, BN -> FFN -> add."""

    def __init__(self, rng: SeededRng, cfg: BackboneConfig):
        self.cfg = cfg
        d, dk, h = cfg.embed_dim, cfg.head_dim, cfg.heads
        self.q = [Tensor(trunc_normal(rng.child(f"q{i}"), (d, dk)), requires_grad=True) for i in range(h)]
        self.k = [Tensor(trunc_normal(rng.child(f"k{i}"), (d, dk)), requires_grad=True) for i in range(h)]
        self.v = [Tensor(trunc_normal(rng.child(f"v{i}"), (d, dk)), requires_grad=True) for i in range(h)]
        self.out_proj = Tensor(trunc_normal(rng.child("out"), (d, d)), requires_grad=True)
        self.theta1 = Tensor(trunc_normal(rng.child("ffn1"), (d, cfg.ffn_hidden)), requires_grad=True)
        self.theta2 = Tensor(trunc_normal(rng.child("ffn2"), (cfg.ffn_hidden, d)), requires_grad=True)
        self.attn_bn = BatchNorm(d)
        self.ffn_bn = BatchNorm(d)
        self.ffn_bn_mid = BatchNorm(cfg.ffn_hidden)
        self.ffn_bn_in = BatchNorm(d)

    def attention(self, x: Tensor, prefix_kv=None):
        """MHSA over tokens; keys/values optionally get prepended prefixes.

        Returns (output, attention maps), maps as a detached (H, ..., n,
        n + Lp/2) numpy array whose rows sum to 1.
        """
        dk = self.cfg.head_dim
        scale = 1.0 / np.sqrt(dk)
        heads = []
        maps = []
        for i in range(self.cfg.heads):
            q = x @ self.q[i]
            k = x @ self.k[i]
            v = x @ self.v[i]
            if prefix_kv is not None:
                pk, pv = prefix_kv
                k_pre = pk @ self.k[i]
                v_pre = pv @ self.v[i]
                if x.ndim == 3:
                    b = x.shape[0]
                    k_pre = broadcast_to(reshape(k_pre, (1,) + k_pre.shape), (b,) + k_pre.shape)
                    v_pre = broadcast_to(reshape(v_pre, (1,) + v_pre.shape), (b,) + v_pre.shape)
                k = concat([k_pre, k], axis=-2)
                v = concat([v_pre, v], axis=-2)
            att = softmax((q @ k.swapaxes(-1, -2)) * scale, axis=-1)
            heads.append(att @ v)
            maps.append(att.data)
        out = concat(heads, axis=-1) @ self.out_proj
        return out, np.stack(maps)

    def ffn(self, x: Tensor, mode: str, placement: str | None = None) -> Tensor:
        placement = placement or self.cfg.bn_placement
        if placement == "between":
            return gelu(self.ffn_bn_mid(x @ self.theta1, mode)) @ self.theta2
        if placement == "before":
            return gelu(self.ffn_bn_in(x, mode) @ self.theta1) @ self.theta2
        raise ArgumentError(f"unknown FFN BN placement {placement!r}")

    def __call__(self, x: Tensor, mode: str, prefix_kv=None):
        attn_out, maps = self.attention(self.attn_bn(x, mode), prefix_kv=prefix_kv)
        x = x + attn_out
        x = x + self.ffn(self.ffn_bn(x, mode), mode)
        return x, maps

    def params(self, prefix: str) -> dict:
        out = {}
        for i in range(self.cfg.heads):
            out[f"{prefix}.q{i}"] = self.q[i]
            out[f"{prefix}.k{i}"] = self.k[i]
            out[f"{prefix}.v{i}"] = self.v[i]
        out[f"{prefix}.out_proj"] = self.out_proj
        out[f"{prefix}.theta1"] = self.theta1
        out[f"{prefix}.theta2"] = self.theta2
        for name, bn in (("attn_bn", self.attn_bn), ("ffn_bn", self.ffn_bn), ("ffn_bn_mid", self.ffn_bn_mid), ("ffn_bn_in", self.ffn_bn_in)):
            out.update(bn.params(f"{prefix}.{name}"))
        return out

    def buffers(self, prefix: str) -> dict:
        out = {}
        for name, bn in (("attn_bn", self.attn_bn), ("ffn_bn", self.ffn_bn), ("ffn_bn_mid", self.ffn_bn_mid), ("ffn_bn_in", self.ffn_bn_in)):
            out.update(bn.buffers(f"{prefix}.{name}"))
        return out


class Encoder:
    """Full backbone: tokenizer -> L blocks -> final BN -> sequence pool."""

    def __init__(self, cfg: BackboneConfig, rng: SeededRng):
        self.cfg = cfg
        self.mode = "train"
        self.tokenizer = ConvTokenizer(rng.child("tokenizer"), cfg)
        self.blocks = [EncoderBlock(rng.child(f"block{i}"), cfg) for i in range(cfg.layers)]
        self.final_bn = BatchNorm(cfg.embed_dim) if cfg.final_norm else None
        self.pool_score = Tensor(trunc_normal(rng.child("pool"), (cfg.embed_dim, 1)), requires_grad=True)

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def tokenize(self, images: Tensor) -> Tensor:
        if images.ndim == 3:
            images = reshape(images, (1,) + images.shape)
        if images.shape[-1] != self.cfg.image_size or images.shape[-2] != self.cfg.image_size:
            raise ArgumentError(f"expected {self.cfg.image_size}x{self.cfg.image_size} images, got {images.shape}")
        return self.tokenizer(images, self.mode)

    def sequence_pool(self, tokens: Tensor) -> Tensor:
        if tokens.shape[-2] < 1:
            raise ArgumentError("sequence_pool needs at least one token")
        weights = softmax(tokens @ self.pool_score, axis=-2)
        return (tokens * weights).sum(axis=-2)

    def forward(self, images: Tensor, prefixes=None) -> Tensor:
        """images (B, C, H, W) -> pooled feature z (B, d)."""
        x = self.tokenize(images)
        for i, block in enumerate(self.blocks):
            kv = prefixes.layer_kv(i) if prefixes is not None else None
            x, _ = block(x, self.mode, prefix_kv=kv)
        if self.final_bn is not None:
            x = self.final_bn(x, self.mode)
        return self.sequence_pool(x)

    def __call__(self, images: Tensor, prefixes=None) -> Tensor:
        return self.forward(images, prefixes=prefixes)

    def params(self) -> dict:
        out = self.tokenizer.params("tokenizer")
        for i, block in enumerate(self.blocks):
            out.update(block.params(f"blocks.{i}"))
        if self.final_bn is not None:
            out.update(self.final_bn.params("final_bn"))
        out["pool_score"] = self.pool_score
        return out

    def buffers(self) -> dict:
        out = self.tokenizer.buffers("tokenizer")
        for i, block in enumerate(self.blocks):
            out.update(block.buffers(f"blocks.{i}"))
        if self.final_bn is not None:
            out.update(self.final_bn.buffers("final_bn"))
        return out

    def set_requires_grad(self, flag: bool):
        for p in self.params().values():
            p.requires_grad = flag

    def copy(self) -> "Encoder":
        clone = Encoder(self.cfg, SeededRng(0))
        copy_state(self, clone)
        clone.mode = self.mode
        return clone


# -- spec-level operation aliases -------------------------------------------


def conv_tokenize(images: Tensor, encoder: Encoder) -> Tensor:
    """Token sequence X (B, n, d) for a batch of images."""
    return encoder.tokenize(images)


def mhsa_forward(x: Tensor, block: EncoderBlock):
    """Plain multi-head self-attention: (output, attention maps)."""
    return block.attention(x)


def ffn_forward(x: Tensor, block: EncoderBlock, placement: str, mode: str = "eval") -> Tensor:
    return block.ffn(x, mode, placement=placement)


def sequence_pool(tokens: Tensor, encoder: Encoder) -> Tensor:
    return encoder.sequence_pool(tokens)


def encoder_forward(images: Tensor, encoder: Encoder, prefixes=None) -> Tensor:
    return encoder.forward(images, prefixes=prefixes)


# -- state persistence --------------------------------------------------------


def state_arrays(model) -> dict:
    """Flat name -> ndarray map covering parameters and buffers."""
    out = {name: p.data for name, p in model.params().items()}
    if hasattr(model, "buffers"):
        out.update(model.buffers())
    return out


def copy_state(src, dst):
    """Copy all parameter/buffer values from one model to a same-shaped one."""
    src_arrays = state_arrays(src)
    for name, p in dst.params().items():
        p.data = src_arrays[name].copy()
    if hasattr(dst, "buffers"):
        for name, buf in dst.buffers().items():
            buf[...] = src_arrays[name]


def hash_state(model) -> str:
    """Order-independent digest of every parameter and buffer byte."""
    import hashlib

    digest = hashlib.sha256()
    for name in sorted(state_arrays(model)):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(state_arrays(model)[name]).tobytes())
    return digest.hexdigest()


def save_state(path, models: dict):
    """Write a JSON checkpoint: canonical name -> {shape, values}."""
    payload = {}
    for scope, model in models.items():
        for name, arr in state_arrays(model).items():
            payload[f"{scope}.{name}"] = {"shape": list(arr.shape), "values": np.asarray(arr).reshape(-1).tolist()}
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_state(path, models: dict):
    """Load a checkpoint written by `save_state` into live models."""
    with open(path) as fh:
        payload = json.load(fh)
    for scope, model in models.items():
        for name, p in model.params().items():
            entry = payload[f"{scope}.{name}"]
            p.data = np.array(entry["values"]).reshape(entry["shape"])
        if hasattr(model, "buffers"):
            for name, buf in model.buffers().items():
                entry = payload[f"{scope}.{name}"]
                buf[...] = np.array(entry["values"]).reshape(entry["shape"])
