"""Checkpoint-level model surgery: layer swap, transformation and model distance."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .generator import GeneratorModel, broadcast_w, sample_z
from .metrics import PerceptualMetric, default_metric
from .training import FREEZE_FC, FreezeSet, TrainConfig, finetune, lineage_record


class ArchitectureMismatchError(ValueError):
    pass


def swappable_resolutions(model: GeneratorModel) -> tuple:
    """Ordered coarse list for swapping: every block from 8x8 up (4x4 never moves)."""
    return model.config.resolutions[1:]


def swapped_names(model: GeneratorModel, depth: int, conv_only: bool = False) -> set:
    """Parameter names taken from the source model for a swap of ``depth``."""
    coarse = swappable_resolutions(model)
    if not 0 <= depth <= len(coarse):
        raise ValueError(f"swap depth {depth} outside [0, {len(coarse)}]")
    prefixes = tuple(f"synth.b{r}." for r in coarse[:depth])
    names = set()
    for name, _ in model.named_parameters():
        if not name.startswith(prefixes):
            continue
        if conv_only and not name.endswith(("conv0.weight", "conv1.weight")):
            continue
        names.add(name)
    return names


def swap_layers(source: GeneratorModel, tuned: GeneratorModel, depth: int,
                conv_only: bool = False) -> GeneratorModel:
    """Copy the ``depth`` coarsest swappable blocks (from 8x8) of ``source``
    into a copy of ``tuned``.

    Whole blocks move (modulated convs, their style affines, noise scales,
    biases and toRGB); ``conv_only`` restricts the swap to conv weights.
    """
    if source.signature() != tuned.signature():
        raise ArchitectureMismatchError("source and tuned models differ in architecture")
    take = swapped_names(tuned, depth, conv_only)
    out = tuned.clone()
    src = source.state_dict()
    with torch.no_grad():
        for name, p in out.named_parameters():
            if name in take:
                p.copy_(src[name])
    tuned_rec = lineage_record(tuned)
    out.metadata = {
        "op": "swap",
        "domain": tuned.metadata.get("domain"),
        "init_seed": tuned.metadata.get("init_seed"),
        "parent": tuned_rec["digest"],
        "swap_source": source.digest(),
        "swap_depth": depth,
        "swap_conv_only": conv_only,
        "lineage": list(tuned.metadata.get("lineage", [])) + [tuned_rec],
    }
    if "recipe" in tuned.metadata:
        out.metadata["recipe"] = dict(tuned.metadata["recipe"], swap_depth=depth)
    return out


@dataclass(frozen=True)
class TransformationRecipe:
    freeze: FreezeSet = FREEZE_FC
    finetune_cfg: TrainConfig = field(default_factory=TrainConfig.finetune_default)
    swap_depth: int = 0
    swap_conv_only: bool = False

    def __post_init__(self):
        if self.swap_depth < 0:
            raise ValueError("swap_depth must be >= 0")

    def to_dict(self) -> dict:
        return {"freeze": self.freeze.to_dict(), "finetune_cfg": self.finetune_cfg.to_dict(),
                "swap_depth": self.swap_depth, "swap_conv_only": self.swap_conv_only}

    @classmethod
    def from_dict(cls, d: dict) -> "TransformationRecipe":
        return cls(FreezeSet.from_dict(d["freeze"]), TrainConfig.from_dict(d["finetune_cfg"]),
                   int(d["swap_depth"]), bool(d.get("swap_conv_only", False)))


def transform(base: GeneratorModel, target_dataset, recipe: TransformationRecipe,
              discriminator=None, domain: Optional[str] = None, workdir=None) -> GeneratorModel:
    """Fine-tune ``base`` on the target data, then swap coarse blocks back from ``base``.

    With ``workdir`` the intermediate fine-tuned generator is written to
    ``workdir/finetuned.ckpt`` and its loss trace to ``workdir/finetune_loss.csv``.
    """
    from .checkpoint import save_checkpoint

    log_path = None
    if workdir is not None:
        workdir = Path(workdir)
        workdir.mkdir(parents=True, exist_ok=True)
        log_path = workdir / "finetune_loss.csv"
    tuned = finetune(base, target_dataset, recipe.freeze, recipe.finetune_cfg,
                     discriminator=discriminator, domain=domain, log_path=log_path)
    if workdir is not None:
        save_checkpoint(tuned, workdir / "finetuned.ckpt")
    if recipe.swap_depth > len(swappable_resolutions(base)):
        raise ValueError(f"swap depth {recipe.swap_depth} exceeds the model's coarse blocks")
    out = swap_layers(base, tuned, recipe.swap_depth, recipe.swap_conv_only)
    out.metadata["op"] = "transform"
    out.metadata["recipe"] = recipe.to_dict()
    return out


# -- model distance --------------------------------------------------------------

@dataclass
class ModelDistanceReport:
    estimate: float
    std_error: float
    n_samples: int
    seed: int
    per_sample: list
    metric: dict = field(default_factory=dict)

    @classmethod
    def from_samples(cls, per_sample, seed, metric=None) -> "ModelDistanceReport":
        arr = np.asarray(per_sample, dtype=np.float64)
        n = len(arr)
        se = float(arr.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        return cls(float(arr.mean()), se, n, int(seed), arr.tolist(), dict(metric or {}))

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelDistanceReport":
        return cls(**d)


def derive_seed(master: int, index: int) -> int:
    """Per-sample seed; independent of how samples are batched or distributed."""
    return int(np.random.SeedSequence([int(master), int(index)]).generate_state(1)[0])


def _check_compatible(g1: GeneratorModel, g2: GeneratorModel):
    c1, c2 = g1.config, g2.config
    if c1.z_dim != c2.z_dim:
        raise ArchitectureMismatchError("models disagree on latent dimension")
    if (c1.resolution, c1.img_channels) != (c2.resolution, c2.img_channels):
        raise ArchitectureMismatchError("models disagree on output resolution or channels")


@torch.no_grad()
def render_from_z(model: GeneratorModel, z: torch.Tensor, noise_seeds) -> torch.Tensor:
    """Pure-content synthesis for a batch of latent codes, clamped NCHW."""
    ws = broadcast_w(model.mapping(z), model.num_layers)
    return model.synthesis(ws, model.make_noise(noise_seeds)).clamp(-1, 1)


_CHUNK = 32


@torch.no_grad()
def model_distance(g1: GeneratorModel, g2: GeneratorModel, n: int = 256, seed: int = 0,
                   metric: Optional[PerceptualMetric] = None) -> ModelDistanceReport:
    """Monte-Carlo estimate of the expected perceptual distance between the
    two models' outputs on shared latent codes and shared noise."""
    _check_compatible(g1, g2)
    if n < 1:
        raise ValueError("n must be >= 1")
    metric = metric or default_metric(g1.config.img_channels)
    z_all = torch.from_numpy(sample_z(seed, n, g1.config.z_dim))
    seeds = [derive_seed(seed, i) for i in range(n)]
    per_sample = []
    for lo in range(0, n, _CHUNK):
        z = z_all[lo:lo + _CHUNK]
        s = seeds[lo:lo + _CHUNK]
        x1 = render_from_z(g1, z, s)
        x2 = render_from_z(g2, z, s)
        per_sample.extend(metric.batch(x1, x2).double().tolist())
    return ModelDistanceReport.from_samples(per_sample, seed, metric.descriptor)
