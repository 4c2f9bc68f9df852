#!/usr/bin/env python3
"""The compact transformer backbone, step by step.

Convolutional tokenization (no class token, no positional embedding),
batch-norm encoder blocks, prefix-augmented attention, and sequence pooling.
"""

import numpy as np

from fscil.backbone import BackboneConfig, Encoder, mhsa_forward
from fscil.delta_params import PrefixSet, prefix_mhsa
from fscil.numerics import SeededRng, Tensor

# Tokenizer geometry is pure convolution arithmetic: a 28x28 image through a
# 7x7 conv (stride 2, padding 2) and a 2x2 max-pool leaves a 6x6 grid.
cfg = BackboneConfig(
    image_size=28, conv_channels=(32,), conv_kernel=7, conv_stride=2, conv_padding=2,
    pool_size=2, pool_stride=2, embed_dim=32, layers=2, heads=4, ffn_hidden=64,
)
print("tokens per image:", cfg.token_count())
print("leading-order multiplies per image:", cfg.flop_estimate())

rng = SeededRng(7)
encoder = Encoder(cfg, rng).eval()
images = Tensor(rng.child("imgs").normal(size=(2, 1, 28, 28)))
tokens = encoder.tokenize(images)
print("token sequence:", tokens.shape)

# Attention maps are row-stochastic: each token's weights sum to one.
out, maps = mhsa_forward(tokens, encoder.blocks[0])
print("attention maps (heads, batch, n, n):", maps.shape, "row sums ~", maps.sum(axis=-1).round(9).min())

# Prefixes lengthen only the key/value side; the output shape is unchanged.
prefixes = PrefixSet(session=1, layers=cfg.layers, prefix_len=8, dim=cfg.embed_dim, rng=rng.child("prefix"))
pre_out, pre_maps = prefix_mhsa(tokens, encoder.blocks[0], prefixes, layer=0)
print("with prefixes: output", pre_out.shape, "- attention rows now span", pre_maps.shape[-1], "columns")

# The pooled feature is a score-weighted mixture of tokens.
z = encoder.forward(images)
print("pooled feature:", z.shape)

# Both FFN norm placements are available; "between" is the default wiring.
x = Tensor(rng.child("ffn").normal(size=(5, cfg.embed_dim)))
between = encoder.blocks[0].ffn(x, "eval", placement="between")
before = encoder.blocks[0].ffn(x, "eval", placement="before")
print("FFN placements agree in shape:", between.shape == before.shape)
