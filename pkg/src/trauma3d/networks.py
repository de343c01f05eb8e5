"""3D U-Net, feature tokens and the detection / classification heads."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv3d, ConvTranspose3d, Dropout, Linear, Module, Parameter
from .tensor import Tensor
from .volume import ConfigurationError


@dataclass
class UNetConfig:
    levels: int = 2
    base_channels: int = 8
    bottleneck_channels: int = 32
    in_channels: int = 1

    def channels(self, level):
        return self.base_channels * 2 ** level

    def check_dims(self, dims):
        f = 2 ** self.levels
        if any(d % f for d in dims):
            raise ConfigurationError(f"input dims {tuple(dims)} must be divisible by 2^levels = {f}")
        return tuple(d // f for d in dims)


@dataclass
class FeatureGrid:
    values: Tensor  # (C, Dz, Dy, Dx)

    @property
    def channels(self):
        return self.values.shape[0]

    @property
    def dims(self):
        return self.values.shape[1:]

    @property
    def n_voxels(self):
        return int(np.prod(self.dims))

    def coords(self):
        """Voxel centres mapped to [0,1]^3, row-major, shape (N, 3)."""
        axes = [(np.arange(n) + 0.5) / n for n in self.dims]
        zz, yy, xx = np.meshgrid(*axes, indexing="ij")
        return np.stack([zz.ravel(), yy.ravel(), xx.ravel()], axis=1)


@dataclass
class TokenSet:
    features: Tensor       # (N, C)
    positions: np.ndarray  # (N, 3) in [0,1]
    indices: np.ndarray


class ConvBlock(Module):
    def __init__(self, c_in, c_out, rng):
        self.conv1 = Conv3d(c_in, c_out, rng)
        self.conv2 = Conv3d(c_out, c_out, rng)

    def forward(self, x):
        return T.relu(self.conv2(T.relu(self.conv1(x))))


class Encoder(Module):
    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.levels = []
        c_in = cfg.in_channels
        for lvl in range(cfg.levels):
            block = ConvBlock(c_in, cfg.channels(lvl), rng)
            setattr(self, f"level{lvl}", block)
            self.levels.append(block)
            c_in = cfg.channels(lvl)
        self.bottleneck = ConvBlock(c_in, cfg.bottleneck_channels, rng)

    def forward(self, x):
        skips = []
        for block in self.levels:
            x = block(x)
            skips.append(x)
            x = T.max_pool3d(x)
        return self.bottleneck(x), skips


class UpBlock(Module):
    def __init__(self, c_in, c_out, rng):
        self.up = ConvTranspose3d(c_in, c_out, rng)
        self.conv1 = Conv3d(2 * c_out, c_out, rng)

    def forward(self, x, skip):
        x = self.up(x)
        return T.relu(self.conv1(T.concatenate([x, skip], axis=0)))


class Decoder(Module):
    def __init__(self, cfg, rng):
        self.levels = {}
        c_in = cfg.bottleneck_channels
        for lvl in reversed(range(cfg.levels)):
            block = UpBlock(c_in, cfg.channels(lvl), rng)
            setattr(self, f"level{lvl}", block)
            self.levels[lvl] = block
            c_in = cfg.channels(lvl)
        self.head = Conv3d(c_in, cfg.in_channels, rng, k=1, padding=0)

    def forward(self, x, skips):
        for lvl in reversed(range(len(skips))):
            x = self.levels[lvl](x, skips[lvl])
        return self.head(x)


def as_input(vol):
    """Volume / ndarray (D,H,W) / Tensor (C,D,H,W) -> Tensor (C,D,H,W) in the default dtype."""
    if isinstance(vol, Tensor):
        return vol if vol.ndim == 4 else T.reshape(vol, (1,) + vol.shape)
    arr = getattr(vol, "voxels", vol)
    arr = np.asarray(arr, dtype=T.default_dtype())
    return Tensor(arr[None] if arr.ndim == 3 else arr)


class UNet(Module):
    """Encoder-decoder with skip connections; ``forward`` returns (bottleneck grid, reconstruction)."""

    def __init__(self, cfg=None, seed=0):
        cfg = cfg or UNetConfig()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng)
        self.decoder = Decoder(cfg, rng)

    def forward(self, vol):
        x = as_input(vol)
        self.cfg.check_dims(x.shape[1:])
        bottleneck, skips = self.encoder(x)
        return FeatureGrid(bottleneck), self.decoder(bottleneck, skips)

    def encode(self, vol, frozen=False):
        return encoder_only(self.encoder, vol, frozen)


def unet_forward(model, vol):
    return model(vol)


def encoder_only(encoder, vol, frozen=False):
    """Bottleneck FeatureGrid; with ``frozen`` no graph is recorded."""
    x = as_input(vol)
    encoder.cfg.check_dims(x.shape[1:])
    if frozen:
        with T.no_grad():
            return FeatureGrid(encoder(x)[0])
    return FeatureGrid(encoder(x)[0])


def sample_tokens(grid, n, seed=0, method="uniform"):
    """Pick ``n`` voxels of ``grid`` as tokens (all of them, row-major, when n >= N)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    N = grid.n_voxels
    if n >= N:
        idx = np.arange(N)
    elif method == "uniform":
        idx = np.sort(np.random.default_rng(seed).choice(N, size=n, replace=False))
    elif method == "farthest":
        idx = _farthest_point(grid.coords(), n, seed)
    else:
        raise ValueError(f"unknown sampling method {method!r}")
    flat = T.transpose(T.reshape(grid.values, (grid.channels, N)), (1, 0))
    feats = flat if n >= N else T.index(flat, idx)
    return TokenSet(feats, grid.coords()[idx], idx)


def _farthest_point(coords, n, seed):
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(len(coords)))]
    dist = np.full(len(coords), np.inf)
    for _ in range(n - 1):
        dist = np.minimum(dist, ((coords - coords[chosen[-1]]) ** 2).sum(1))
        chosen.append(int(np.argmax(dist)))
    return np.asarray(chosen)


class PredictionHeads(Module):
    """Category logits (C+1 incl. no-object), logistic centres, softplus sizes."""

    def __init__(self, d, n_classes, rng):
        self.cls = Linear(d, n_classes + 1, rng)
        self.center_hidden = Linear(d, d, rng)
        self.center = Linear(d, 3, rng)
        self.size_hidden = Linear(d, d, rng)
        self.size = Linear(d, 3, rng)

    def raw(self, q):
        """Logits plus pre-activation centres and sizes."""
        return self.cls(q), self.center(T.relu(self.center_hidden(q))), self.size(T.relu(self.size_hidden(q)))

    def forward(self, q):
        z, c, s = self.raw(q)
        return z, T.sigmoid(c), T.softplus(s)


def prediction_heads(heads, query_embeddings):
    return heads(query_embeddings)


class ClassificationHead(Module):
    """in -> hidden (ReLU, dropout) -> n_out logits; 256/128/7 gives 33,799 parameters."""

    def __init__(self, n_in=256, hidden=128, n_out=7, dropout=0.5, seed=0):
        rng = np.random.default_rng(seed)
        self.n_in = n_in
        self.fc1 = Linear(n_in, hidden, rng)
        self.drop = Dropout(dropout, seed=seed)
        self.fc2 = Linear(hidden, n_out, rng)

    def forward(self, features):
        if features.shape[-1] != self.n_in:
            raise ConfigurationError(f"feature width {features.shape[-1]} != head input {self.n_in}")
        return self.fc2(self.drop(T.relu(self.fc1(features))))


def global_avg_pool(grid):
    values = grid.values if isinstance(grid, FeatureGrid) else grid
    return T.mean(values, axis=(1, 2, 3))


class MIMModel(Module):
    """U-Net plus the learned scalar that replaces masked voxels."""

    def __init__(self, cfg=None, seed=0):
        self.unet = UNet(cfg, seed)
        self.mask_token = Parameter(np.zeros(()))

    @property
    def cfg(self):
        return self.unet.cfg

    def forward(self, patch, mask):
        x = as_input(patch)
        m = Tensor(np.asarray(mask, dtype=x.dtype)[None])
        x_in = x * (1.0 - m) + self.mask_token * m
        return self.unet(x_in)


def encoder_state(state, prefix="unet/encoder/"):
    """Extract ``encoder/...`` parameters from a MIM or detector checkpoint dict."""
    out = {}
    for name, arr in state.items():
        for p in (prefix, "encoder/"):
            if name.startswith(p):
                out[name[len(p):]] = arr
                break
    return out
