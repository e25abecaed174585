"""End-to-end translation: invert under the source model, render with the target.

Every workflow here is a plain composition of :mod:`.latent` and
:mod:`.generator` calls with explicit seeds, so running the steps by hand
gives bit-identical output.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .checkpoint import load_checkpoint
from .data import read_png
from .generator import GeneratorModel, make_style_plan, map_latent, sample_z, synthesize
from .latent import InversionConfig, InversionResult, SemanticBasis, extract_affine, invert, semantic_basis
from .metrics import PerceptualMetric
from .surgery import ArchitectureMismatchError

log = logging.getLogger(__name__)

MODES = ("single", "multimodal", "reference")
INVERSION_MODES = ("baseline", "constrained")


class LineageWarning(UserWarning):
    pass


def default_split_index(model: GeneratorModel, coarse_max: int = 32) -> int:
    """First style slot of the first block finer than ``coarse_max``.

    Appearance codes then drive only the finest blocks; a model with no such
    block gets a pure-content plan.
    """
    for b, res in enumerate(model.config.resolutions):
        if res > coarse_max:
            return 2 * b
    return model.num_layers


ModelRef = Union[GeneratorModel, str, Path]
ImageRef = Union[np.ndarray, str, Path]


def _model(ref: ModelRef) -> GeneratorModel:
    return ref if isinstance(ref, GeneratorModel) else load_checkpoint(ref)


def _image(ref: ImageRef, model: GeneratorModel) -> np.ndarray:
    if isinstance(ref, (str, Path)):
        return read_png(ref, model.resolution, model.config.img_channels)
    return np.asarray(ref, dtype=np.float32)


def check_compatible(a: GeneratorModel, b: GeneratorModel) -> None:
    if a.signature() != b.signature():
        raise ArchitectureMismatchError("source and target models are not architecturally compatible")


@dataclass
class TranslationRequest:
    input_image: ImageRef
    source_model: ModelRef
    target_model: ModelRef
    mode: str = "single"
    n: int = 1
    style_seed: int = 0
    reference: Optional[ImageRef] = None
    split_index: Optional[int] = None
    inversion: str = "baseline"
    inversion_cfg: InversionConfig = field(default_factory=InversionConfig)
    basis: Optional[SemanticBasis] = None
    metric: Optional[PerceptualMetric] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.inversion not in INVERSION_MODES:
            raise ValueError(f"inversion must be one of {INVERSION_MODES}")
        if self.mode == "multimodal" and self.n < 1:
            raise ValueError("n must be >= 1")
        if self.mode == "reference" and self.reference is None:
            raise ValueError("reference mode needs a reference image")
        for ref in (self.input_image, self.reference):
            if isinstance(ref, (str, Path)) and not Path(ref).exists():
                raise FileNotFoundError(ref)

    def resolve(self):
        source, target = _model(self.source_model), _model(self.target_model)
        check_compatible(source, target)
        k = default_split_index(target) if self.split_index is None else self.split_index
        if not 0 <= k <= target.num_layers:
            raise ValueError(f"split index {k} outside [0, {target.num_layers}]")
        return source, target, k


def invert_image(image, model: GeneratorModel, mode: str = "baseline",
                 cfg: InversionConfig = InversionConfig(), basis=None, metric=None) -> InversionResult:
    if mode == "constrained" and basis is None:
        basis = semantic_basis(extract_affine(model))
    return invert(image, model, mode, basis=basis, cfg=cfg, metric=metric)


def _content_code(req: TranslationRequest, source: GeneratorModel) -> np.ndarray:
    image = _image(req.input_image, source)
    return invert_image(image, source, req.inversion, req.inversion_cfg, req.basis, req.metric).w


def translate(req: TranslationRequest) -> np.ndarray:
    """Single-output translation: ``G_target(Inv(input, G_source))``."""
    source, target, _ = req.resolve()
    w = _content_code(req, source)
    plan = make_style_plan(w, num_layers=target.num_layers)
    return synthesize(target, plan, req.inversion_cfg.noise_seed)


def appearance_codes(target: GeneratorModel, n: int, seed: int) -> np.ndarray:
    return map_latent(target, sample_z(seed, n, target.config.z_dim))


def translate_multimodal(req: TranslationRequest) -> list:
    """``n`` outputs sharing the inverted content code, each with its own
    appearance code ``f(z_a)`` on the layers from the split index on."""
    source, target, k = req.resolve()
    w_c = _content_code(req, source)
    outputs = []
    for w_a in appearance_codes(target, req.n, req.style_seed):
        plan = make_style_plan(w_c, w_a, k, num_layers=target.num_layers)
        outputs.append(synthesize(target, plan, req.inversion_cfg.noise_seed))
    return outputs


def translate_reference(req: TranslationRequest) -> np.ndarray:
    """Appearance from a target-domain reference image, inverted under the target model."""
    source, target, k = req.resolve()
    w_c = _content_code(req, source)
    ref = _image(req.reference, target)
    target_basis = None
    if req.inversion == "constrained":
        target_basis = semantic_basis(extract_affine(target))
    w_a = invert_image(ref, target, req.inversion, req.inversion_cfg, target_basis, req.metric).w
    plan = make_style_plan(w_c, w_a, k, num_layers=target.num_layers)
    return synthesize(target, plan, req.inversion_cfg.noise_seed)


def run(req: TranslationRequest):
    return {"single": translate, "multimodal": translate_multimodal,
            "reference": translate_reference}[req.mode](req)


# -- multi-domain --------------------------------------------------------------

def lineage_root(model: GeneratorModel) -> Optional[str]:
    lineage = model.metadata.get("lineage") or []
    if lineage:
        return lineage[0]["digest"]
    if model.metadata.get("op") == "train_base":
        return model.digest()
    return None


class ModelRegistry:
    """Tag -> model map, optionally backed by a JSON file of checkpoint paths."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self._paths = {}
        self._models = {}
        if self.path is not None and self.path.exists():
            self._paths = json.loads(self.path.read_text())

    def add(self, tag: str, model: ModelRef) -> None:
        if isinstance(model, GeneratorModel):
            self._models[tag] = model
            self._paths.pop(tag, None)
        else:
            self._paths[tag] = str(Path(model).resolve())
            self._models.pop(tag, None)
            self._save()

    def _save(self):
        if self.path is not None:
            self.path.write_text(json.dumps(self._paths, sort_keys=True, indent=1) + "\n")

    def get(self, tag: str) -> GeneratorModel:
        if tag not in self._models:
            if tag not in self._paths:
                raise KeyError(f"no model registered under {tag!r}")
            self._models[tag] = load_checkpoint(self._paths[tag])
        return self._models[tag]

    def tags(self) -> list:
        return sorted(set(self._paths) | set(self._models))

    def describe(self) -> list:
        rows = []
        for tag in self.tags():
            m = self.get(tag)
            rows.append({"tag": tag, "domain": m.metadata.get("domain"), "op": m.metadata.get("op"),
                         "root": lineage_root(m), "path": self._paths.get(tag)})
        return rows


def shares_lineage(a: GeneratorModel, b: GeneratorModel) -> bool:
    ra, rb = lineage_root(a), lineage_root(b)
    return ra is not None and ra == rb


def multidomain_translate(image, registry: ModelRegistry, from_tag: str, to_tag: str,
                          inversion: str = "baseline", cfg: InversionConfig = InversionConfig(),
                          metric=None) -> np.ndarray:
    """Translate between two registered models; no model is trained or modified.

    Models that do not share a base lineage still translate, with a
    :class:`LineageWarning`.
    """
    source, target = registry.get(from_tag), registry.get(to_tag)
    if not shares_lineage(source, target):
        warnings.warn(f"models {from_tag!r} and {to_tag!r} do not share a base lineage",
                      LineageWarning, stacklevel=2)
    req = TranslationRequest(image, source, target, inversion=inversion, inversion_cfg=cfg,
                             metric=metric)
    return translate(req)
