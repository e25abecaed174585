"""Perceptual distance, SSIM and Fréchet distance.

The perceptual distance is an LPIPS-style feature distance. Its default
feature extractor is a seeded, frozen random conv stack, so it needs no
downloaded weights; any callable returning a list of ``(N, C, H, W)``
feature maps can be plugged in instead (a trained toy classifier, or an
adapter around a real LPIPS network).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg
import torch
import torch.nn as nn
import torch.nn.functional as F

from .generator import LRELU_SLOPE, ShapeError, to_nchw

log = logging.getLogger(__name__)

LUMA = (0.299, 0.587, 0.114)


class RandomFeatureNet(nn.Module):
    """Fixed random conv stack; layer ``i`` downsamples by ``strides[i]``."""

    def __init__(self, in_channels=3, widths=(16, 32, 32, 32), strides=(1, 2, 2, 2), seed=0):
        super().__init__()
        if len(widths) != len(strides):
            raise ValueError("widths and strides must have equal length")
        g = torch.Generator().manual_seed(seed)
        self.strides = tuple(strides)
        self.weights = nn.ParameterList()
        prev = in_channels
        for width in widths:
            w = torch.randn(width, prev, 3, 3, generator=g) * math.sqrt(2.0 / (prev * 9))
            self.weights.append(nn.Parameter(w, requires_grad=False))
            prev = width
        self.descriptor = {"kind": "random", "in_channels": in_channels, "widths": list(widths),
                           "strides": list(strides), "seed": seed}

    def forward(self, x):
        feats = []
        for w, s in zip(self.weights, self.strides):
            x = F.leaky_relu(F.conv2d(x, w.to(x.dtype), stride=s, padding=1), LRELU_SLOPE)
            feats.append(x)
        return feats


@dataclass
class PerceptualMetric:
    """Handle bundling a feature extractor with per-layer weights.

    ``normalize`` unit-normalizes the channel vector at every location
    (as LPIPS does). ``root`` reports the square root of the weighted mean
    squared difference; with one layer and ``normalize=False`` that is a
    Euclidean distance in feature space and obeys the triangle inequality.
    """

    feature_net: Callable
    layer_weights: Sequence[float] = (1.0, 1.0, 1.0, 1.0)
    normalize: bool = True
    root: bool = False
    descriptor: dict = field(default_factory=dict)

    def __post_init__(self):
        self.layer_weights = tuple(float(w) for w in self.layer_weights)
        if any(w < 0 for w in self.layer_weights):
            raise ValueError("layer weights must be non-negative")
        if not self.descriptor:
            self.descriptor = dict(getattr(self.feature_net, "descriptor", {"kind": "custom"}))
        self.descriptor.update(layer_weights=list(self.layer_weights),
                               normalize=self.normalize, root=self.root)

    def features(self, x: torch.Tensor) -> list:
        feats = list(self.feature_net(x))[: len(self.layer_weights)]
        if len(feats) < len(self.layer_weights):
            raise ValueError("feature net returned fewer layers than there are weights")
        if self.normalize:
            feats = [f / (f.pow(2).sum(dim=1, keepdim=True).sqrt() + 1e-10) for f in feats]
        return feats

    def feature_distance(self, fx: Sequence[torch.Tensor], fy: Sequence[torch.Tensor]) -> torch.Tensor:
        """Per-sample distance between precomputed feature lists."""
        total = 0.0
        for w, a, b in zip(self.layer_weights, fx, fy):
            if w:
                total = total + w * (a - b).pow(2).flatten(1).mean(dim=1)
        if not torch.is_tensor(total):
            total = fx[0].new_zeros(fx[0].shape[0])
        return total.sqrt() if self.root else total

    def batch(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        if x.shape != y.shape:
            raise ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
        return self.feature_distance(self.features(x), self.features(y))


def default_metric(channels: int = 3, seed: int = 0) -> PerceptualMetric:
    return PerceptualMetric(RandomFeatureNet(channels, seed=seed))


def euclidean_metric(channels: int = 3, seed: int = 0) -> PerceptualMetric:
    """Single-layer, unnormalized, rooted: a true metric on feature space."""
    net = RandomFeatureNet(channels, widths=(32,), strides=(2,), seed=seed)
    return PerceptualMetric(net, layer_weights=(1.0,), normalize=False, root=True)


def _pair_tensors(x, y):
    tx = x if torch.is_tensor(x) else to_nchw(x)
    ty = y if torch.is_tensor(y) else to_nchw(y)
    if tx.ndim == 3:
        tx = tx[None]
    if ty.ndim == 3:
        ty = ty[None]
    if tx.shape != ty.shape:
        raise ShapeError(f"shape mismatch {tuple(tx.shape)} vs {tuple(ty.shape)}")
    return tx, ty


@torch.no_grad()
def perceptual_distance(handle: PerceptualMetric, x, y) -> float:
    """Distance between two images given as ``(H, W, C)`` arrays (or NCHW tensors)."""
    tx, ty = _pair_tensors(x, y)
    return float(handle.batch(tx, ty).mean())


# -- SSIM ------------------------------------------------------------------------

def _gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[-1] == 3:
            return img @ np.asarray(LUMA)
        if img.shape[-1] == 1:
            return img[..., 0]
    if img.ndim != 2:
        raise ShapeError(f"expected an (H, W[, C]) image, got {img.shape}")
    return img


def ssim(x, y, data_range: float = 2.0, win_size: int = 8) -> float:
    """Mean SSIM over all ``win_size`` x ``win_size`` windows (stride 1).

    Colour inputs are converted to luma first. Window statistics use
    population (1/N) moments; ``data_range`` defaults to 2 for [-1, 1] images.
    """
    x, y = np.asarray(x), np.asarray(y)
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {y.shape}")
    gx, gy = _gray(x), _gray(y)
    win = min(win_size, *gx.shape)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    view = np.lib.stride_tricks.sliding_window_view
    wx, wy = view(gx, (win, win)), view(gy, (win, win))
    mx, my = wx.mean(axis=(-1, -2)), wy.mean(axis=(-1, -2))
    vx = (wx ** 2).mean(axis=(-1, -2)) - mx ** 2
    vy = (wy ** 2).mean(axis=(-1, -2)) - my ** 2
    cxy = (wx * wy).mean(axis=(-1, -2)) - mx * my
    smap = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
    return float(smap.mean())


# -- Fréchet distance ------------------------------------------------------------

@dataclass
class FrechetResult:
    distance: float
    jitter: float
    n_a: int
    n_b: int
    dim: int
    warning: Optional[str] = None

    def __float__(self):
        return self.distance


@torch.no_grad()
def pooled_features(images, handle: PerceptualMetric, batch: int = 64) -> np.ndarray:
    """Spatially averaged, concatenated (unnormalized) features per image."""
    t = images if torch.is_tensor(images) else to_nchw(images)
    out = []
    for i in range(0, len(t), batch):
        feats = handle.feature_net(t[i:i + batch])[: len(handle.layer_weights)]
        out.append(torch.cat([f.mean(dim=(2, 3)) for f in feats], dim=1).double().numpy())
    return np.concatenate(out)


def _gaussian_fit(f: np.ndarray):
    mu = f.mean(axis=0)
    if len(f) < 2:
        return mu, np.zeros((f.shape[1], f.shape[1]))
    return mu, np.atleast_2d(np.cov(f, rowvar=False))


def frechet_from_features(fa: np.ndarray, fb: np.ndarray) -> FrechetResult:
    fa, fb = np.asarray(fa, np.float64), np.asarray(fb, np.float64)
    if fa.ndim != 2 or fb.ndim != 2 or fa.shape[1] != fb.shape[1]:
        raise ShapeError("feature sets must be (n, d) with equal d")
    dim = fa.shape[1]
    warning = None
    if min(len(fa), len(fb)) < 2 * dim:
        warning = f"fewer than 2*{dim} samples per set; covariance estimates are unreliable"
        log.warning(warning)
    mu_a, s_a = _gaussian_fit(fa)
    mu_b, s_b = _gaussian_fit(fb)
    jitter = 0.0
    covmean, _ = scipy.linalg.sqrtm(s_a @ s_b, disp=False)
    if not np.isfinite(covmean).all():
        jitter = 1e-6
        eye = np.eye(dim) * jitter
        covmean, _ = scipy.linalg.sqrtm((s_a + eye) @ (s_b + eye), disp=False)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    diff = mu_a - mu_b
    value = diff @ diff + np.trace(s_a) + np.trace(s_b) - 2.0 * np.trace(covmean)
    return FrechetResult(max(float(value), 0.0), jitter, len(fa), len(fb), dim, warning)


def frechet_distance(set_a, set_b, handle: PerceptualMetric) -> FrechetResult:
    """Fréchet distance between Gaussian fits of pooled features of two image sets."""
    return frechet_from_features(pooled_features(set_a, handle), pooled_features(set_b, handle))
