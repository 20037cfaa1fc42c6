"""Frame tokenization: conv stack -> patch split -> linear embedding -> positions.

Each frame passes through a small stack of conv layers (conv -> ReLU ->
max-pool), the resulting feature map is split into non-overlapping PxP
patches, each patch is flattened (rows, then cols, then channels) and mapped
to a D-dimensional embedding by a trainable linear projection. The learnable
absolute positional table is added only on the spatial branch; the temporal
branch consumes the raw patch embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TokenizerConfig:
    """Conv stack and patch-embedding hyperparameters.

    ``conv_layers`` entries are (c_in, c_out, kernel, stride, padding);
    every conv is followed by ReLU and a shared max-pool stage.
    """

    conv_layers: tuple = ((3, 64, 7, 2, 1), (64, 384, 7, 2, 1))
    pool: tuple = (3, 2, 1)  # kernel, stride, padding
    patch_size: int = 1
    embed_dim: int = 384

    @property
    def out_channels(self) -> int:
        return self.conv_layers[-1][1]

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.out_channels


def feature_map_shape(h: int, w: int, cfg: TokenizerConfig):
    """(channels, h, w) of the conv-stack output for an h x w frame."""
    pk, ps, pp = cfg.pool
    for (_, _, k, s, p) in cfg.conv_layers:
        h = ad.conv_out_len(h, k, s, p)
        w = ad.conv_out_len(w, k, s, p)
        h = ad.conv_out_len(h, pk, ps, pp)
        w = ad.conv_out_len(w, pk, ps, pp)
    return cfg.out_channels, h, w


def token_grid_shape(h: int, w: int, cfg: TokenizerConfig):
    """Token grid (h', w', N) after the conv stack and PxP patch split."""
    _, fh, fw = feature_map_shape(h, w, cfg)
    p = cfg.patch_size
    if fh % p or fw % p:
        raise ConfigError(
            f"feature map {fh}x{fw} not divisible by patch size {p}"
        )
    gh, gw = fh // p, fw // p
    return gh, gw, gh * gw


def conv_tokenize(frames: Tensor, cfg: TokenizerConfig, conv_params) -> Tensor:
    """Run the conv stack over [..., 3, H, W] frames.

    ``conv_params`` is a list of (weight, bias) tensors, one per conv layer.
    """
    if len(conv_params) != len(cfg.conv_layers):
        raise ConfigError(
            f"expected {len(cfg.conv_layers)} conv parameter pairs, "
            f"got {len(conv_params)}"
        )
    pk, ps, pp = cfg.pool
    x = frames
    for (w, b), (_, _, k, s, p) in zip(conv_params, cfg.conv_layers):
        x = ad.conv2d(x, w, b, stride=s, padding=p)
        x = ad.relu(x)
        x = ad.max_pool2d(x, pk, ps, pp)
    return x


def embed_patches(fmap: Tensor, cfg: TokenizerConfig, proj: Tensor) -> Tensor:
    """Split [..., c, h, w] into PxP patches and project each to D dims.

    Patch vectors are flattened rows -> cols -> channels; the output token
    order is row-major over the patch grid.
    """
    p = cfg.patch_size
    *lead, c, h, w = fmap.shape
    if h % p or w % p:
        raise ConfigError(f"feature map {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    nd = fmap.ndim
    # [..., c, h, w] -> [..., h, w, c]
    x = ad.transpose(fmap, tuple(range(nd - 3)) + (nd - 2, nd - 1, nd - 3))
    x = ad.reshape(x, tuple(lead) + (gh, p, gw, p, c))
    nd = x.ndim
    # -> [..., gh, gw, p, p, c]; patch interior stays rows, cols, channels
    x = ad.transpose(x, tuple(range(nd - 5)) + (nd - 5, nd - 3, nd - 4, nd - 2, nd - 1))
    x = ad.reshape(x, tuple(lead) + (gh * gw, p * p * c))
    if proj.shape[0] != p * p * c:
        raise ConfigError(
            f"projection expects patch dim {proj.shape[0]}, got {p * p * c}"
        )
    return ad.matmul(x, proj)


def add_absolute_position(tokens: Tensor, pos_table: Tensor) -> Tensor:
    """Elementwise x_patch + x_pos; table broadcasts over leading dims."""
    if tokens.shape[-2:] != pos_table.shape:
        raise ConfigError(
            f"position table {pos_table.shape} does not match tokens "
            f"{tokens.shape[-2:]}"
        )
    return ad.add(tokens, pos_table)


def init_tokenizer_params(cfg: TokenizerConfig, n_tokens: int, rng: np.random.Generator):
    """Named parameter tensors: conv kernels/biases, projection, abs-pos table.

    Kaiming-uniform conv kernels, truncated-normal (0.02) projection and
    position table, zero biases.
    """
    params = {}
    for i, (cin, cout, k, _, _) in enumerate(cfg.conv_layers):
        params[f"tok.conv{i}.w"] = Tensor(
            ad.kaiming_uniform((cout, cin, k, k), cin * k * k, rng), requires_grad=True
        )
        params[f"tok.conv{i}.b"] = Tensor(np.zeros(cout), requires_grad=True)
    params["tok.embed.E"] = Tensor(
        ad.trunc_normal((cfg.patch_dim, cfg.embed_dim), 0.02, rng), requires_grad=True
    )
    params["tok.pos"] = Tensor(
        ad.trunc_normal((n_tokens, cfg.embed_dim), 0.02, rng), requires_grad=True
    )
    return params
