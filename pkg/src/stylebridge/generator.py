"""Style-based generator: mapping network, modulated synthesis blocks and
deterministic forward synthesis with per-layer style injection.

Images cross the public API as ``(H, W, C)`` float32 arrays in ``[-1, 1]``.
Internally everything runs on ``(N, C, H, W)`` torch tensors.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

LRELU_SLOPE = 0.2
SLOTS_PER_BLOCK = 2
INIT_RES = 4

_DEFAULT_CHANNELS = {4: 32, 8: 32, 16: 32, 32: 16, 64: 8, 128: 8, 256: 8}


class ShapeError(ValueError):
    """Raised when a code, plan or image does not fit the model."""


@dataclass(frozen=True)
class GeneratorConfig:
    z_dim: int = 64
    w_dim: int = 64
    mapping_layers: int = 3
    resolution: int = 64
    img_channels: int = 3
    channels: Optional[tuple] = None
    architecture: str = "skip"

    def __post_init__(self):
        if self.resolution < INIT_RES or self.resolution & (self.resolution - 1):
            raise ValueError(f"resolution must be a power of two >= 4, got {self.resolution}")
        if self.img_channels not in (1, 3):
            raise ValueError("img_channels must be 1 or 3")
        if self.architecture not in ("skip", "origin"):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.channels is not None:
            object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
            if len(self.channels) != len(self.resolutions):
                raise ValueError("need one channel count per resolution")

    @property
    def resolutions(self) -> tuple:
        res, out = INIT_RES, []
        while res <= self.resolution:
            out.append(res)
            res *= 2
        return tuple(out)

    @property
    def num_layers(self) -> int:
        """Number of style-consuming layers (two slots per resolution block)."""
        return SLOTS_PER_BLOCK * len(self.resolutions)

    def channels_at(self, res: int) -> int:
        if self.channels is not None:
            return self.channels[self.resolutions.index(res)]
        return _DEFAULT_CHANNELS.get(res, 8)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = [self.channels_at(r) for r in self.resolutions]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        if d.get("channels") is not None:
            d["channels"] = tuple(d["channels"])
        return cls(**d)


class EqualLinear(nn.Module):
    """Dense layer with runtime weight scaling (equalized learning rate)."""

    def __init__(self, in_dim, out_dim, bias_init=0.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_dim, in_dim))
        self.bias = nn.Parameter(torch.full((out_dim,), float(bias_init)))
        self.scale = 1.0 / math.sqrt(in_dim)

    def effective_weight(self):
        return self.weight * self.scale

    def forward(self, x):
        return F.linear(x, self.effective_weight(), self.bias)


class ModulatedConv(nn.Module):
    """Style-modulated convolution with optional demodulation, noise and
    activation. ``torgb`` layers use ``demodulate=False, activate=False``."""

    def __init__(self, in_ch, out_ch, kernel, w_dim, demodulate=True,
                 upsample=False, activate=True, use_noise=True):
        super().__init__()
        self.affine = EqualLinear(w_dim, in_ch, bias_init=1.0)
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(out_ch))
        if use_noise:
            self.noise_strength = nn.Parameter(torch.zeros([]))
        else:
            self.noise_strength = None
        self.scale = 1.0 / math.sqrt(in_ch * kernel * kernel)
        self.demodulate = demodulate
        self.upsample = upsample
        self.activate = activate
        self.padding = kernel // 2

    def forward(self, x, w, noise=None):
        n, c, h, wd = x.shape
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            h, wd = h * 2, wd * 2
        styles = self.affine(w)
        weight = self.weight * self.scale
        # Modulating the input instead of the weights keeps one shared conv
        # for the whole batch; demodulation then rescales output channels.
        x = F.conv2d(x * styles[:, :, None, None], weight, padding=self.padding)
        if self.demodulate:
            energy = styles.pow(2) @ weight.pow(2).sum(dim=(2, 3)).t()
            x = x * torch.rsqrt(energy + 1e-8)[:, :, None, None]
        if self.noise_strength is not None and noise is not None:
            x = x + noise * self.noise_strength
        x = x + self.bias[None, :, None, None]
        if self.activate:
            x = F.leaky_relu(x, LRELU_SLOPE)
        return x


class SynthesisBlock(nn.Module):
    def __init__(self, res, in_ch, out_ch, w_dim, img_channels):
        super().__init__()
        self.res = res
        if res == INIT_RES:
            self.const = nn.Parameter(torch.randn(1, out_ch, INIT_RES, INIT_RES))
            in_ch = out_ch
        self.conv0 = ModulatedConv(in_ch, out_ch, 3, w_dim, upsample=res > INIT_RES)
        self.conv1 = ModulatedConv(out_ch, out_ch, 3, w_dim)
        self.torgb = ModulatedConv(out_ch, img_channels, 1, w_dim, demodulate=False,
                                   activate=False, use_noise=False)


class GeneratorModel(nn.Module):
    """Mapping network ``map.*`` plus resolution-indexed synthesis blocks
    ``synth.b<res>.*``.

    ``metadata`` is a JSON-serializable dict (domain tag, seed, lineage,
    recipe). Treat instances as immutable once built: training and surgery
    always return new models.
    """

    def __init__(self, config: GeneratorConfig = GeneratorConfig(), seed: int = 0,
                 metadata: Optional[dict] = None):
        super().__init__()
        self.config = config
        self.metadata = dict(metadata or {})
        self.metadata.setdefault("init_seed", seed)
        gen = torch.random.fork_rng(devices=[])
        with gen:
            torch.manual_seed(seed)
            self.map = nn.ModuleList(
                EqualLinear(config.z_dim if i == 0 else config.w_dim, config.w_dim)
                for i in range(config.mapping_layers)
            )
            blocks = {}
            prev = config.channels_at(INIT_RES)
            for res in config.resolutions:
                ch = config.channels_at(res)
                blocks[f"b{res}"] = SynthesisBlock(res, prev, ch, config.w_dim, config.img_channels)
                prev = ch
            self.synth = nn.ModuleDict(blocks)

    # -- structure -----------------------------------------------------------

    @property
    def num_layers(self) -> int:
        return self.config.num_layers

    @property
    def resolution(self) -> int:
        return self.config.resolution

    def style_layers(self):
        """Yield ``(slot_index, name, conv)`` for every style-consuming conv."""
        for b, res in enumerate(self.config.resolutions):
            block = self.synth[f"b{res}"]
            yield SLOTS_PER_BLOCK * b, f"synth.b{res}.conv0", block.conv0
            yield SLOTS_PER_BLOCK * b + 1, f"synth.b{res}.conv1", block.conv1

    def signature(self) -> dict:
        """Architecture signature; two models can exchange blocks iff equal."""
        return {
            "config": self.config.to_dict(),
            "params": [[n, list(p.shape)] for n, p in self.named_parameters()],
        }

    def digest(self) -> str:
        """sha256 over architecture and raw parameter bytes."""
        h = hashlib.sha256()
        h.update(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        for name, p in sorted(self.state_dict().items()):
            t = p.detach().cpu().contiguous()
            h.update(name.encode())
            h.update(str(t.dtype).encode())
            h.update(json.dumps(list(t.shape)).encode())
            h.update(t.numpy().tobytes())
        return h.hexdigest()

    def clone(self, **metadata) -> "GeneratorModel":
        other = copy.deepcopy(self)
        other.metadata.update(metadata)
        return other

    # -- forward passes ------------------------------------------------------

    def mapping(self, z: torch.Tensor) -> torch.Tensor:
        x = z * torch.rsqrt(z.pow(2).mean(dim=1, keepdim=True) + 1e-8)
        for layer in self.map:
            x = F.leaky_relu(layer(x), LRELU_SLOPE)
        return x

    def synthesis(self, ws: torch.Tensor, noise: Optional[Sequence[torch.Tensor]] = None,
                  taps: Optional[dict] = None) -> torch.Tensor:
        """Run synthesis on per-layer codes ``ws`` of shape ``(N, L, w_dim)``.

        Returns the raw (unclamped) image batch. When ``taps`` is a dict it is
        filled with the activation after every style slot (``"slot<j>"``) and
        the running skip image after each block (``"rgb<res>"``).
        """
        n, num, _ = ws.shape
        if num != self.num_layers:
            raise ShapeError(f"expected {self.num_layers} per-layer codes, got {num}")
        x = img = None
        for b, res in enumerate(self.config.resolutions):
            block = self.synth[f"b{res}"]
            j = SLOTS_PER_BLOCK * b
            if x is None:
                x = block.const.expand(n, -1, -1, -1)
            x = block.conv0(x, ws[:, j], None if noise is None else noise[j])
            if taps is not None:
                taps[f"slot{j}"] = x
            x = block.conv1(x, ws[:, j + 1], None if noise is None else noise[j + 1])
            if taps is not None:
                taps[f"slot{j + 1}"] = x
            if self.config.architecture == "skip" or res == self.config.resolution:
                y = block.torgb(x, ws[:, j + 1])
                if img is not None:
                    img = F.interpolate(img, scale_factor=2, mode="bilinear", align_corners=False)
                    y = y + img
                img = y
                if taps is not None:
                    taps[f"rgb{res}"] = img
        return img

    def make_noise(self, seeds: Sequence[int]) -> list:
        """Per-slot Gaussian noise fields, one independent draw per seed."""
        per_sample = []
        for seed in seeds:
            g = torch.Generator().manual_seed(int(seed))
            fields = []
            for res in self.config.resolutions:
                for _ in range(SLOTS_PER_BLOCK):
                    fields.append(torch.randn(1, 1, res, res, generator=g))
            per_sample.append(fields)
        dtype = next(self.parameters()).dtype
        return [torch.cat([s[j] for s in per_sample]).to(dtype) for j in range(self.num_layers)]


@dataclass
class StylePlan:
    """One embedded code per style-consuming layer.

    Layers ``< split_index`` carry the content code, the rest carry the
    appearance code.
    """

    codes: np.ndarray
    split_index: int

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.float32)
        if self.codes.ndim != 2:
            raise ShapeError("plan codes must be (layers, w_dim)")
        if not 0 <= self.split_index <= len(self.codes):
            raise ValueError(f"split_index {self.split_index} outside [0, {len(self.codes)}]")

    def __len__(self):
        return len(self.codes)


def sample_z(seed: int, n: int, dim: int = 64) -> np.ndarray:
    """Draw ``n`` standard-normal latent codes; row ``i`` is one LatentCode."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, dim)).astype(np.float32)


def _as_batch(x, dim: int, what: str) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x, dtype=np.float32))
    if t.ndim == 1:
        t = t[None]
    if t.shape[-1] != dim:
        raise ShapeError(f"{what} has dimension {t.shape[-1]}, model expects {dim}")
    if not torch.isfinite(t).all():
        raise ValueError(f"{what} has non-finite entries")
    return t


@torch.no_grad()
def map_latent(model: GeneratorModel, z) -> np.ndarray:
    """w = f(z). Accepts one code ``(d_z,)`` or a batch ``(n, d_z)``."""
    zt = _as_batch(z, model.config.z_dim, "latent code")
    dtype = next(model.parameters()).dtype
    w = model.mapping(zt.to(dtype)).float().numpy()
    return w[0] if np.ndim(z) == 1 else w


def make_style_plan(w_c, w_a=None, split_index: Optional[int] = None, *,
                    num_layers: int) -> StylePlan:
    """Build a StylePlan; without ``w_a`` the whole plan carries ``w_c``."""
    w_c = np.asarray(w_c, dtype=np.float32)
    if w_a is None:
        split_index = num_layers
        w_a = w_c
    elif split_index is None:
        raise ValueError("split_index is required when an appearance code is given")
    if not 0 <= split_index <= num_layers:
        raise ValueError(f"split_index {split_index} outside [0, {num_layers}]")
    w_a = np.asarray(w_a, dtype=np.float32)
    if w_a.shape != w_c.shape:
        raise ShapeError("content and appearance codes differ in shape")
    codes = np.stack([w_c if i < split_index else w_a for i in range(num_layers)])
    return StylePlan(codes, split_index)


def plan_tensor(model: GeneratorModel, plans: Sequence[StylePlan]) -> torch.Tensor:
    for plan in plans:
        if len(plan) != model.num_layers:
            raise ShapeError(f"plan has {len(plan)} layers, model has {model.num_layers}")
        if plan.codes.shape[1] != model.config.w_dim:
            raise ShapeError("plan code dimension does not match model w_dim")
    dtype = next(model.parameters()).dtype
    return torch.from_numpy(np.stack([p.codes for p in plans])).to(dtype)


def to_hwc(images: torch.Tensor) -> np.ndarray:
    """``(N, C, H, W)`` tensor -> ``(N, H, W, C)`` float32 array."""
    return images.detach().permute(0, 2, 3, 1).float().numpy()


def to_nchw(images) -> torch.Tensor:
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"expected (H, W, C) image(s), got shape {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


@torch.no_grad()
def synthesize(model: GeneratorModel, plan: StylePlan, noise_seed: int = 0,
               return_activations: bool = False):
    """Render one image at the model's full resolution, clamped to [-1, 1].

    With ``return_activations`` also returns a dict of per-layer activation
    arrays (keys as in :meth:`GeneratorModel.synthesis`).
    """
    ws = plan_tensor(model, [plan])
    taps = {} if return_activations else None
    img = model.synthesis(ws, model.make_noise([noise_seed]), taps=taps)
    out = to_hwc(img.clamp(-1, 1))[0]
    if return_activations:
        return out, {k: v[0].float().numpy() for k, v in taps.items()}
    return out


@torch.no_grad()
def synthesize_batch(model: GeneratorModel, ws: torch.Tensor, noise_seeds: Sequence[int]) -> torch.Tensor:
    """Batched synthesis from per-layer codes ``(N, L, w_dim)``; clamped NCHW."""
    return model.synthesis(ws, model.make_noise(noise_seeds)).clamp(-1, 1)


def broadcast_w(w: torch.Tensor, num_layers: int) -> torch.Tensor:
    """``(N, w_dim)`` -> ``(N, L, w_dim)`` pure-content plan tensor."""
    return w[:, None, :].expand(-1, num_layers, -1)
