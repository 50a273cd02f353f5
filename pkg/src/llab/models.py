"""
Toy ViT encoders, the pixel reconstructor and their training loops.

Encoders map an ``(H, W, 3)`` image to an ``(h, w, c)`` grid of patch tokens
(no class token, no final norm). The reconstructor inverts unit-normalised
token grids back to pixels.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import DataError, FrozenParameterError, NumericalError, ShapeError
from .images import ImageSet, augment
from .nn import LayerNorm, Linear, Module, ResBlock, TransformerBlock
from .optim import Adam, LrSchedule, lr_at
from .tensor import Parameter, Tensor

log = logging.getLogger(__name__)

OBJECTIVES = ("contrastive", "masked-recon", "autoencoder")


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    base_lr: float = 3e-4
    schedule: str = "cyclic"
    max_lr: float = 1e-3
    cycle_length: int = 4000
    seed: int = 0
    objective: str | None = None
    mask_ratio: float = 0.6
    temperature: float = 0.1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie in (0, 1)")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.objective is not None and self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")

    def lr_schedule(self) -> LrSchedule:
        return LrSchedule(self.schedule, self.base_lr, self.max_lr, self.cycle_length)


def patchify(pixels: np.ndarray, p: int) -> np.ndarray:
    """(B, H, W, 3) -> (B, h*w, p*p*3); tokens row-major, patch pixels (dy, dx, rgb)."""
    b, hh, ww, ch = pixels.shape
    h, w = hh // p, ww // p
    x = pixels.reshape(b, h, p, w, p, ch).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h * w, p * p * ch)


def unpatchify(patches: np.ndarray, h: int, w: int, p: int) -> np.ndarray:
    b = patches.shape[0]
    x = patches.reshape(b, h, w, p, p, 3).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h * p, w * p, 3)


class Encoder(Module):
    def __init__(self, resolution: int = 32, patch_size: int = 4, dim: int = 64, depth: int = 4,
                 heads: int = 4, objective: str = "masked-recon", seed: int = 0):
        if resolution % patch_size:
            raise ShapeError(f"resolution {resolution} not divisible by patch size {patch_size}")
        rng = np.random.default_rng(seed)
        self.resolution = resolution
        self.patch_size = patch_size
        self.dim = dim
        self.depth = depth
        self.heads = heads
        self.objective = objective
        self.grid = resolution // patch_size
        self.patch_embed = Linear(3 * patch_size**2, dim, rng)
        self.pos = Parameter(rng.standard_normal((self.grid**2, dim)) * 0.02)
        self.blocks = [TransformerBlock(dim, heads, rng) for _ in range(depth)]

    def config(self) -> dict:
        return {"resolution": self.resolution, "patch_size": self.patch_size, "dim": self.dim,
                "depth": self.depth, "heads": self.heads, "objective": self.objective}

    def _check(self, pixels: np.ndarray):
        if pixels.ndim != 4 or pixels.shape[1:] != (self.resolution, self.resolution, 3):
            raise ShapeError(f"encoder expects (B, {self.resolution}, {self.resolution}, 3), "
                             f"got {pixels.shape}")

    def embed(self, pixels: np.ndarray, mask: np.ndarray | None = None,
              mask_token: Tensor | None = None) -> Tensor:
        """Patch embedding plus positions; masked tokens replaced by ``mask_token``."""
        self._check(pixels)
        x = self.patch_embed(Tensor(patchify(pixels, self.patch_size)))
        if mask is not None:
            m = Tensor(np.broadcast_to(mask[..., None], x.shape).astype(np.float64))
            x = x * (1.0 - m) + T.broadcast_to(mask_token, x.shape) * m
        return x + T.broadcast_to(self.pos, x.shape)

    def forward(self, pixels: np.ndarray, mask=None, mask_token=None) -> Tensor:
        x = self.embed(pixels, mask, mask_token)
        for blk in self.blocks:
            x = blk(x)
        return x


def encode(enc: Encoder, images: np.ndarray, batch: int = 64) -> np.ndarray:
    """Token grid(s) for one image (h, w, c) or a batch (B, h, w, c)."""
    single = images.ndim == 3
    pixels = images[None] if single else images
    if pixels.shape[1] % enc.patch_size or pixels.shape[2] % enc.patch_size:
        raise ShapeError(f"image dims {pixels.shape[1:3]} not divisible by {enc.patch_size}")
    out = []
    with T.no_grad():
        for s in range(0, len(pixels), batch):
            out.append(enc.forward(pixels[s:s + batch]).data)
    g = enc.grid
    f = np.concatenate(out).reshape(len(pixels), g, g, enc.dim)
    return f[0] if single else f


def normalize_tokens(f: np.ndarray) -> np.ndarray:
    """Scale each spatial token (last axis) to unit L2 norm."""
    norms = np.linalg.norm(f, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise NumericalError("zero-norm token cannot be normalised")
    return f / norms


def channel_activation_maps(f: np.ndarray, channels) -> list[np.ndarray]:
    """Min-max normalised (h, w) slices of the chosen channels; constant maps become 0.5."""
    c = f.shape[-1]
    grids = []
    for ch in channels:
        if not 0 <= ch < c:
            raise IndexError(f"channel {ch} out of range for {c} channels")
        g = f[..., ch]
        lo, hi = g.min(), g.max()
        grids.append(np.full(g.shape, 0.5) if hi - lo <= 0 else (g - lo) / (hi - lo))
    return grids


class Reconstructor(Module):
    """Transformer trunk over the token grid, then upsampling + residual stages."""

    def __init__(self, grid: int = 8, dim: int = 64, patch_size: int = 4, depth: int = 4,
                 heads: int = 4, seed: int = 0, min_channels: int = 16):
        stages = int(round(math.log2(patch_size)))
        if 2**stages != patch_size:
            raise ValueError("reconstructor needs a power-of-two patch size")
        rng = np.random.default_rng(seed)
        self.grid = grid
        self.dim = dim
        self.patch_size = patch_size
        self.depth = depth
        self.heads = heads
        self.min_channels = min_channels
        self.pos = Parameter(rng.standard_normal((grid * grid, dim)) * 0.02)
        self.blocks = [TransformerBlock(dim, heads, rng) for _ in range(depth)]
        self.norm = LayerNorm(dim)
        self.reduce = []
        self.res = []
        ch = dim
        for _ in range(stages):
            nxt = max(min_channels, ch // 2)
            self.reduce.append(Linear(ch, nxt, rng))
            self.res.append(ResBlock(nxt, rng))
            ch = nxt
        self.head = Linear(ch, 3, rng)

    def config(self) -> dict:
        return {"grid": self.grid, "dim": self.dim, "patch_size": self.patch_size,
                "depth": self.depth, "heads": self.heads, "min_channels": self.min_channels}

    def forward(self, feats: np.ndarray) -> Tensor:
        b, h, w, c = feats.shape
        if (h, w, c) != (self.grid, self.grid, self.dim):
            raise ShapeError(f"reconstructor expects (B, {self.grid}, {self.grid}, {self.dim}), "
                             f"got {feats.shape}")
        x = Tensor(feats.reshape(b, h * w, c))
        x = x + T.broadcast_to(self.pos, x.shape)
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x).reshape(b, h, w, c)
        for red, res in zip(self.reduce, self.res):
            x = res(T.upsample2x(red(x)))
        return self.head(x)


def reconstruct(rec: Reconstructor, f: np.ndarray, batch: int = 64) -> np.ndarray:
    """Pixels in [0, 1] from one (h, w, c) grid or a batch."""
    single = f.ndim == 3
    feats = f[None] if single else f
    out = []
    with T.no_grad():
        for s in range(0, len(feats), batch):
            out.append(rec.forward(feats[s:s + batch]).data)
    img = np.clip(np.concatenate(out), 0.0, 1.0)
    return img[0] if single else img


# training


def info_nce(z1: Tensor, z2: Tensor, temperature: float) -> Tensor:
    """Symmetric InfoNCE between two batches of unit embeddings; positives on the diagonal."""
    labels = np.arange(z1.shape[0])
    logits = T.matmul(z1, z2.transpose(1, 0)) * (1.0 / temperature)
    back = T.matmul(z2, z1.transpose(1, 0)) * (1.0 / temperature)
    return (T.cross_entropy(logits, labels) + T.cross_entropy(back, labels)) * 0.5


class _ObjectiveHead(Module):
    """Throwaway parameters used only during encoder pretraining."""

    def __init__(self, enc: Encoder, objective: str, rng: np.random.Generator):
        p = enc.patch_size
        if objective == "contrastive":
            self.proj = Linear(enc.dim, enc.dim, rng)
        else:
            self.decode = Linear(enc.dim, 3 * p * p, rng)
        if objective == "masked-recon":
            self.mask_token = Parameter(rng.standard_normal(enc.dim) * 0.02)


def _objective_loss(enc: Encoder, head: _ObjectiveHead, cfg: TrainConfig, pixels: np.ndarray,
                    rng: np.random.Generator, aug_seed: tuple) -> Tensor:
    if cfg.objective == "contrastive":
        views = []
        for v in range(2):
            views.append(np.stack([augment(img, aug_seed + (v, k)) for k, img in enumerate(pixels)]))
        z = []
        for view in views:
            pooled = enc.forward(view).mean(axis=1)
            z.append(T.l2_normalize(head.proj(pooled)))
        return info_nce(z[0], z[1], cfg.temperature)
    target = patchify(pixels, enc.patch_size)
    if cfg.objective == "autoencoder":
        return T.mse_loss(head.decode(enc.forward(pixels)), target)
    b, n = target.shape[:2]
    k = max(1, int(round(cfg.mask_ratio * n)))
    mask = np.zeros((b, n))
    for row in mask:
        row[rng.permutation(n)[:k]] = 1.0
    pred = head.decode(enc.forward(pixels, mask, head.mask_token))
    m = Tensor(np.broadcast_to(mask[..., None], target.shape).copy())
    return T.mse_loss(pred * m, target * m.data) * (n / k)


def _run_epochs(cfg: TrainConfig, n_items: int, params, step_fn: Callable, label: str,
                on_epoch: Callable | None = None) -> list[float]:
    opt = Adam(params, cfg.base_lr, (cfg.beta1, cfg.beta2))
    sched = cfg.lr_schedule()
    rng = np.random.default_rng(cfg.seed)
    curve, step = [], 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n_items)
        total, count = 0.0, 0
        for s in range(0, n_items, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            opt.zero_grad()
            loss = step_fn(idx, rng, (cfg.seed, epoch, s))
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"{label}: non-finite loss at epoch {epoch + 1}, step {step} "
                                     f"(lr={lr_at(sched, step):.3g})")
            loss.backward()
            opt.step(lr_at(sched, step))
            step += 1
            total += value * len(idx)
            count += len(idx)
        curve.append(total / count)
        log.info("%s epoch %d/%d loss %.6f", label, epoch + 1, cfg.epochs, curve[-1])
        if on_epoch is not None:
            on_epoch(epoch, curve[-1])
    return curve


def pretrain_encoder(cfg: TrainConfig, images: ImageSet, resolution: int | None = None,
                     patch_size: int = 4, dim: int = 64, depth: int = 4,
                     heads: int = 4) -> tuple[Encoder, list[float]]:
    """Train an encoder under ``cfg.objective`` and return it frozen with its loss curve."""
    images.require("encoder-pretrain")
    if len(images) == 0:
        raise DataError("empty pretraining corpus")
    if cfg.objective is None:
        raise ValueError("TrainConfig.objective must be set for encoder pretraining")
    res = resolution or images.pixels.shape[1]
    enc = Encoder(res, patch_size, dim, depth, heads, cfg.objective, seed=cfg.seed)
    head = _ObjectiveHead(enc, cfg.objective, np.random.default_rng([cfg.seed, 1]))
    pixels = images.pixels

    def step(idx, rng, aug_seed):
        return _objective_loss(enc, head, cfg, pixels[idx], rng, aug_seed)

    curve = _run_epochs(cfg, len(images), enc.parameters() + head.parameters(), step,
                        f"encoder[{cfg.objective}]")
    enc.freeze()
    return enc, curve


def features_for(enc: Encoder, pixels: np.ndarray) -> np.ndarray:
    """Normalised token grids, the reconstructor's input space."""
    return normalize_tokens(encode(enc, pixels))


def train_reconstructor(enc: Encoder, cfg: TrainConfig, images: ImageSet,
                        val: ImageSet | None = None, depth: int = 4, heads: int = 4,
                        min_channels: int = 16) -> tuple[Reconstructor, dict]:
    """Fit a reconstructor on frozen, normalised encoder features with an L2 loss.

    Returns the model and a history dict with per-epoch ``train_loss`` and
    (when ``val`` is given) ``val_mse``.
    """
    if not enc.frozen:
        raise FrozenParameterError("encoder must be frozen before reconstructor training")
    images.require("reconstructor-train")
    before = enc.param_hash()
    feats = features_for(enc, images.pixels)
    val_feats = features_for(enc, val.pixels) if val is not None else None
    rec = Reconstructor(enc.grid, enc.dim, enc.patch_size, depth, heads,
                        seed=cfg.seed + 7919, min_channels=min_channels)
    targets = images.pixels
    history = {"train_loss": [], "val_mse": []}

    def step(idx, rng, aug_seed):
        return T.mse_loss(rec.forward(feats[idx]), targets[idx])

    def epoch_done(epoch, loss):
        if val_feats is not None:
            history["val_mse"].append(validation_mse(rec, val_feats, val.pixels))

    history["train_loss"] = _run_epochs(cfg, len(images), rec.parameters(), step,
                                        "reconstructor", epoch_done)
    if enc.param_hash() != before:
        raise RuntimeError("encoder parameters changed during reconstructor training")
    return rec, history


def validation_mse(rec: Reconstructor, feats: np.ndarray, pixels: np.ndarray) -> float:
    """Unclamped per-pixel MSE, matching the training loss."""
    out = []
    with T.no_grad():
        for s in range(0, len(feats), 64):
            out.append(rec.forward(feats[s:s + 64]).data)
    return float(np.mean((np.concatenate(out) - pixels) ** 2))
