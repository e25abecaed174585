"""Toy image domains, PNG I/O and directory ingestion.

All domains share one glyph geometry distribution (disk, square, ring or
bar at a random position and size) and differ only in how the glyph is
rendered, so a generator moved from one domain to another can keep the
geometry while changing appearance.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import torch
from PIL import Image

DOMAINS = ("glyph", "inverted", "striped", "tinted")

SHAPES = ("disk", "square", "ring", "bar")


def _geometry(rng: np.random.Generator, n: int) -> dict:
    return {
        "shape": rng.integers(0, len(SHAPES), n),
        "cx": rng.uniform(0.3, 0.7, n),
        "cy": rng.uniform(0.3, 0.7, n),
        "size": rng.uniform(0.14, 0.28, n),
        "angle": rng.uniform(0, np.pi, n),
        "hue": rng.uniform(0, 1, n),
    }


def _masks(geo: dict, res: int) -> np.ndarray:
    """Soft glyph coverage masks in [0, 1], shape (n, res, res)."""
    t = (np.arange(res) + 0.5) / res
    yy, xx = np.meshgrid(t, t, indexing="ij")
    dx = xx[None] - geo["cx"][:, None, None]
    dy = yy[None] - geo["cy"][:, None, None]
    s = geo["size"][:, None, None]
    ca, sa = np.cos(geo["angle"])[:, None, None], np.sin(geo["angle"])[:, None, None]
    u, v = ca * dx + sa * dy, -sa * dx + ca * dy
    r = np.sqrt(dx ** 2 + dy ** 2)
    sdf = np.stack([
        r - s,                                          # disk
        np.maximum(np.abs(u), np.abs(v)) - 0.85 * s,    # square
        np.abs(r - 0.75 * s) - 0.25 * s,                # ring
        np.maximum(np.abs(u) - 1.1 * s, np.abs(v) - 0.35 * s),  # bar
    ])
    pick = sdf[geo["shape"], np.arange(len(geo["shape"]))]
    edge = 1.5 / res
    return 1.0 / (1.0 + np.exp(np.clip(pick / edge, -50, 50)))


def _warm(hue):
    h = hue[:, None]
    return np.concatenate([0.75 + 0.25 * h, 0.35 + 0.5 * h, 0.1 + 0.15 * (1 - h)], axis=1)


def render_domain(domain: str, n: int, seed: int, res: int = 64, channels: int = 3) -> np.ndarray:
    """Render ``n`` images of ``domain`` as ``(n, res, res, channels)`` in [-1, 1]."""
    if domain not in DOMAINS:
        raise ValueError(f"unknown domain {domain!r}; choose from {DOMAINS}")
    rng = np.random.default_rng([seed, DOMAINS.index(domain)])
    geo = _geometry(rng, n)
    m = _masks(geo, res)[..., None]
    fg = _warm(geo["hue"])[:, None, None, :]
    bg = np.full((n, 1, 1, 3), 0.08)
    if domain == "glyph":
        img = m * fg + (1 - m) * bg
    elif domain == "inverted":
        img = 1.0 - (m * fg + (1 - m) * bg)
    elif domain == "striped":
        rows = (np.arange(res) + 0.5) / res
        stripes = 0.5 + 0.5 * np.sign(np.sin(2 * np.pi * rows * res / 8.0))
        stripes = stripes[None, :, None, None]
        cool = fg[..., ::-1]
        inner = stripes * cool + (1 - stripes) * 0.35 * cool
        img = m * inner + (1 - m) * 0.5
    else:  # tinted
        tint = np.array([0.55, 0.2, 0.6])
        grad = np.linspace(0.15, 0.45, res)[None, :, None, None] * np.array([0.2, 0.9, 0.4])
        img = m * (0.4 * fg[..., [1, 2, 0]] + tint) + (1 - m) * grad
    img = np.clip(img, 0, 1) * 2 - 1
    if channels == 1:
        img = img @ np.array([0.299, 0.587, 0.114])[:, None]
    return img.astype(np.float32)


def to_training_tensor(images: np.ndarray) -> torch.Tensor:
    """``(N, H, W, C)`` array -> contiguous ``(N, C, H, W)`` float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.asarray(images, np.float32).transpose(0, 3, 1, 2)))


def domain_dataset(domain: str, n: int, seed: int, res: int = 64, channels: int = 3) -> torch.Tensor:
    return to_training_tensor(render_domain(domain, n, seed, res, channels))


# -- image files --------------------------------------------------------------

def write_png(path, image: np.ndarray) -> None:
    """Write an ``(H, W, C)`` image in [-1, 1] as 8-bit PNG."""
    arr = np.asarray(image, dtype=np.float32)
    u8 = np.clip(np.rint((arr + 1.0) * 127.5), 0, 255).astype(np.uint8)
    if u8.shape[-1] == 1:
        u8 = u8[..., 0]
    Image.fromarray(u8).save(path, format="PNG")


def read_png(path, resolution: Optional[int] = None, channels: int = 3) -> np.ndarray:
    """Read an image, center-crop to square, resize, and scale to [-1, 1]."""
    with Image.open(path) as im:
        im = im.convert("RGB" if channels == 3 else "L")
        w, h = im.size
        side = min(w, h)
        left, top = (w - side) // 2, (h - side) // 2
        im = im.crop((left, top, left + side, top + side))
        if resolution is not None and side != resolution:
            im = im.resize((resolution, resolution), Image.BICUBIC)
        arr = np.asarray(im, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr / 127.5 - 1.0


def read_manifest(directory) -> list:
    """Parse ``manifest.txt``: one ``filename[,label]`` per line, ``#`` comments."""
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        files = sorted(p.name for p in directory.iterdir() if p.suffix.lower() == ".png")
        return [(f, None) for f in files]
    entries = []
    for line in manifest.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        name, _, label = line.partition(",")
        entries.append((name.strip(), label.strip() or None))
    return entries


def load_image_folder(directory, resolution: int, channels: int = 3) -> np.ndarray:
    directory = Path(directory)
    entries = read_manifest(directory)
    if not entries:
        raise ValueError(f"no images found in {directory}")
    return np.stack([read_png(directory / name, resolution, channels) for name, _ in entries])


def export_domain(directory, domain: str, n: int, seed: int, res: int = 64) -> Path:
    """Render a toy domain into ``directory`` as PNGs plus a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    images = render_domain(domain, n, seed, res)
    lines = []
    for i, img in enumerate(images):
        name = f"{domain}_{i:05d}.png"
        write_png(directory / name, img)
        lines.append(f"{name},{domain}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")
    return directory


def iter_batches(images: np.ndarray, batch: int) -> Iterable[np.ndarray]:
    for i in range(0, len(images), batch):
        yield images[i:i + batch]
