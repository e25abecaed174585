"""Semantic basis of the style affines, latent editing and image inversion.

The basis is ``V = A^T A`` where ``A`` stacks the weights of the per-layer
style affines (the layers that consume ``w`` directly). Its eigenvectors are
edit directions; inversion can optimize either ``w`` directly or a point
``v`` with ``w = V v``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .generator import (
    GeneratorModel,
    ShapeError,
    broadcast_w,
    sample_z,
    to_hwc,
    to_nchw,
)
from .metrics import PerceptualMetric, default_metric

log = logging.getLogger(__name__)


class InversionError(RuntimeError):
    pass


class BasisMismatchError(ValueError):
    pass


@dataclass
class StyleAffineStack:
    A: np.ndarray
    b: np.ndarray
    layer_names: list = field(default_factory=list)
    source_model_digest: Optional[str] = None

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.A.ndim != 2 or self.b.shape != (self.A.shape[0],):
            raise ShapeError(f"A must be (m, d) and b (m,), got {self.A.shape} and {self.b.shape}")


def stack_affines(pairs: Sequence, names: Sequence[str] = (), digest=None) -> StyleAffineStack:
    """Stack ``(weight, bias)`` pairs row-wise, in the given order."""
    if not pairs:
        raise ValueError("no affine layers to stack")
    A = np.concatenate([np.asarray(w, dtype=np.float64) for w, _ in pairs], axis=0)
    b = np.concatenate([np.asarray(b, dtype=np.float64).reshape(-1) for _, b in pairs])
    return StyleAffineStack(A, b, list(names), digest)


AFFINE_SELECTIONS = ("conv", "all", "first")


@torch.no_grad()
def extract_affine(model: GeneratorModel, layers: str = "conv") -> StyleAffineStack:
    """Stack the style-affine weights of ``model`` ordered by style slot.

    ``layers="conv"`` takes the two modulated convs of every block,
    ``"all"`` adds each block's toRGB affine after its second conv, and
    ``"first"`` keeps only the affine of slot 0.
    """
    if layers not in AFFINE_SELECTIONS:
        raise ValueError(f"layers must be one of {AFFINE_SELECTIONS}")
    pairs, names = [], []
    for slot, name, conv in model.style_layers():
        pairs.append((conv.affine.effective_weight().double().numpy(),
                      conv.affine.bias.double().numpy()))
        names.append(name + ".affine")
        if layers == "all" and name.endswith("conv1"):
            torgb = model.synth[name.split(".")[1]].torgb
            pairs.append((torgb.affine.effective_weight().double().numpy(),
                          torgb.affine.bias.double().numpy()))
            names.append(name.rsplit(".", 1)[0] + ".torgb.affine")
        if layers == "first":
            break
    return stack_affines(pairs, names, model.digest())


@dataclass
class SemanticBasis:
    """Eigen-factorization of ``A^T A``.

    ``eigenvectors`` holds unit columns sorted by descending eigenvalue.
    When truncated to ``top_k`` directions, ``V`` is the rank-k
    reconstruction, so ``V n_i = lambda_i n_i`` holds for every kept pair.
    """

    V: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    source_model_digest: Optional[str] = None

    @property
    def rank(self) -> int:
        return len(self.eigenvalues)

    def embed(self, v) -> np.ndarray:
        """``w = V v`` (equal to ``v^T V`` since V is symmetric)."""
        return self.V @ np.asarray(v, dtype=np.float64)

    def preimage(self, w, tol: float = 1e-10) -> np.ndarray:
        """Least-norm ``v`` with ``V v`` the projection of ``w`` onto span(V)."""
        keep = self.eigenvalues > tol
        n, lam = self.eigenvectors[:, keep], self.eigenvalues[keep]
        return n @ ((n.T @ np.asarray(w, dtype=np.float64)) / lam)


def semantic_basis(stack: StyleAffineStack, top_k: Optional[int] = None) -> SemanticBasis:
    A = stack.A
    if A.size == 0:
        raise ValueError("affine stack is empty")
    if not np.isfinite(A).all():
        raise ValueError("affine stack has non-finite entries")
    gram = A.T @ A
    gram = 0.5 * (gram + gram.T)
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(evals, kind="stable")[::-1]
    evals, evecs = np.clip(evals[order], 0.0, None), evecs[:, order]
    # fix each eigenvector's sign so its largest-magnitude entry is positive
    pivots = np.argmax(np.abs(evecs), axis=0)
    evecs = evecs * np.sign(evecs[pivots, np.arange(evecs.shape[1])])
    d = gram.shape[0]
    k = d if top_k is None else int(top_k)
    if not 1 <= k <= d:
        raise ValueError(f"top_k must be in [1, {d}]")
    if k == d:
        V = gram
    else:
        evals, evecs = evals[:k], evecs[:, :k]
        V = (evecs * evals) @ evecs.T
        V = 0.5 * (V + V.T)
    return SemanticBasis(V, evals, evecs, stack.source_model_digest)


def edit_latent(w, basis: SemanticBasis, direction_index: int, alpha: float) -> np.ndarray:
    """Move ``w`` by ``alpha`` along eigenvector ``direction_index``."""
    if not 0 <= direction_index < basis.rank:
        raise IndexError(f"direction {direction_index} outside [0, {basis.rank})")
    return np.asarray(w, dtype=np.float64) + alpha * basis.eigenvectors[:, direction_index]


# -- inversion -------------------------------------------------------------------

@dataclass(frozen=True)
class InversionConfig:
    steps: int = 1000
    learning_rate: float = 0.05
    betas: tuple = (0.9, 0.999)
    noise_seed: int = 0
    w_avg_samples: int = 1000
    w_avg_seed: int = 2024
    pixel_weight: float = 1.0
    feature_weight: float = 1.0

    def with_steps(self, steps: int) -> "InversionConfig":
        return InversionConfig(steps, self.learning_rate, self.betas, self.noise_seed,
                               self.w_avg_samples, self.w_avg_seed, self.pixel_weight,
                               self.feature_weight)


@dataclass
class InversionResult:
    w: np.ndarray
    loss_trace: list
    final_image: np.ndarray
    steps: int
    mode: str = "baseline"
    v: Optional[np.ndarray] = None


@torch.no_grad()
def mean_embedded_code(model: GeneratorModel, n: int = 1000, seed: int = 2024) -> np.ndarray:
    z = torch.from_numpy(sample_z(seed, n, model.config.z_dim))
    return model.mapping(z.to(next(model.parameters()).dtype)).mean(dim=0).double().numpy()


def _targets(images, model: GeneratorModel) -> torch.Tensor:
    t = images if torch.is_tensor(images) else to_nchw(images)
    if t.ndim == 3:
        t = t[None]
    expected = (model.config.img_channels, model.resolution, model.resolution)
    if tuple(t.shape[1:]) != expected:
        raise ShapeError(f"image shape {tuple(t.shape[1:])} does not match model output {expected}")
    return t.to(next(model.parameters()).dtype)


class InversionObjective:
    """Per-sample ``mean|I - G(w)| + ||phi(I) - phi(G(w))||`` with fixed noise.

    ``phi`` is the metric's (normalized, weighted) feature stack, so the
    feature term is the square root of the perceptual distance.
    """

    def __init__(self, model: GeneratorModel, targets, metric: Optional[PerceptualMetric] = None,
                 noise_seed: int = 0, pixel_weight: float = 1.0, feature_weight: float = 1.0):
        self.model = model
        self.metric = metric or default_metric(model.config.img_channels)
        self.targets = _targets(targets, model)
        n = len(self.targets)
        self.noise = model.make_noise([noise_seed] * n)
        self.pixel_weight = pixel_weight
        self.feature_weight = feature_weight
        with torch.no_grad():
            self.target_feats = [f.detach() for f in self.metric.features(self.targets)]

    def render(self, w: torch.Tensor) -> torch.Tensor:
        return self.model.synthesis(broadcast_w(w, self.model.num_layers), self.noise)

    def __call__(self, w: torch.Tensor) -> torch.Tensor:
        img = self.render(w)
        pix = (img - self.targets).abs().flatten(1).mean(dim=1)
        fd = self.metric.feature_distance(self.metric.features(img), self.target_feats)
        if not self.metric.root:
            fd = torch.sqrt(fd + 1e-12)
        return self.pixel_weight * pix + self.feature_weight * fd


def _optimize(objective: InversionObjective, init: torch.Tensor, to_w, steps: int,
              lr: float, betas) -> tuple:
    """Adam with cosine-decayed learning rate, keeping each sample's best iterate.

    Returns ``(best_params, traces)``; every trace has ``steps + 1`` entries and
    its last entry is the loss of the returned iterate.
    """
    param = init.clone().requires_grad_(True)
    opt = torch.optim.Adam([param], lr=lr, betas=tuple(betas))
    n = len(init)
    best = param.detach().clone()
    best_loss = torch.full((n,), math.inf, dtype=torch.float64)
    traces = [[] for _ in range(n)]
    for t in range(steps + 1):
        loss = objective(to_w(param))
        values = loss.detach().double()
        if not torch.isfinite(values).all():
            bad = torch.nonzero(~torch.isfinite(values)).flatten().tolist()
            raise InversionError(f"non-finite inversion loss at step {t} for samples {bad}")
        improved = values < best_loss
        best_loss = torch.where(improved, values, best_loss)
        best[improved] = param.detach()[improved]
        for i, v in enumerate(values.tolist()):
            traces[i].append(v)
        if t == steps:
            break
        for group in opt.param_groups:
            group["lr"] = lr * 0.5 * (1.0 + math.cos(math.pi * t / steps))
        # grad w.r.t. the latent only, so generator .grad fields stay untouched
        (param.grad,) = torch.autograd.grad(loss.sum(), param)
        opt.step()
    for i in range(n):
        traces[i][-1] = float(best_loss[i])
    return best, traces


@torch.no_grad()
def _render_final(objective: InversionObjective, ws: np.ndarray) -> np.ndarray:
    w = torch.from_numpy(np.asarray(ws)).to(objective.targets.dtype)
    return to_hwc(objective.render(w).clamp(-1, 1))


def project_w_batch(images, model: GeneratorModel, cfg: InversionConfig = InversionConfig(),
                    metric: Optional[PerceptualMetric] = None) -> list:
    """Baseline inversion of several images at once (each optimized independently)."""
    objective = InversionObjective(model, images, metric, cfg.noise_seed,
                                   cfg.pixel_weight, cfg.feature_weight)
    n = len(objective.targets)
    w_avg = mean_embedded_code(model, cfg.w_avg_samples, cfg.w_avg_seed)
    init = torch.from_numpy(np.tile(w_avg, (n, 1))).to(objective.targets.dtype)
    best, traces = _optimize(objective, init, lambda w: w, cfg.steps, cfg.learning_rate, cfg.betas)
    ws = best.double().numpy()
    finals = _render_final(objective, ws)
    return [InversionResult(ws[i], traces[i], finals[i], cfg.steps, "baseline") for i in range(n)]


def project_w(image, model: GeneratorModel, steps: Optional[int] = None,
              cfg: InversionConfig = InversionConfig(),
              metric: Optional[PerceptualMetric] = None) -> InversionResult:
    """Invert one image by optimizing ``w`` from the mean embedded code."""
    if steps is not None:
        cfg = cfg.with_steps(steps)
    return project_w_batch(image, model, cfg, metric)[0]


def constrained_lr_scale(basis: SemanticBasis, tol: float = 1e-10) -> float:
    """Mean of the non-negligible eigenvalues.

    Dividing the learning rate by this keeps typical step sizes in ``w``
    comparable to the baseline optimizer.
    """
    lam = basis.eigenvalues[basis.eigenvalues > tol]
    return float(lam.mean()) if len(lam) else 1.0


def invert_constrained_batch(images, model: GeneratorModel, basis: SemanticBasis,
                             cfg: InversionConfig = InversionConfig(),
                             metric: Optional[PerceptualMetric] = None) -> list:
    if basis.source_model_digest is not None and basis.source_model_digest != model.digest():
        raise BasisMismatchError("semantic basis was extracted from a different model")
    if basis.V.shape != (model.config.w_dim,) * 2:
        raise BasisMismatchError("basis dimension does not match model w_dim")
    objective = InversionObjective(model, images, metric, cfg.noise_seed,
                                   cfg.pixel_weight, cfg.feature_weight)
    n = len(objective.targets)
    dtype = objective.targets.dtype
    v_avg = basis.preimage(mean_embedded_code(model, cfg.w_avg_samples, cfg.w_avg_seed))
    init = torch.from_numpy(np.tile(v_avg, (n, 1))).to(dtype)
    V = torch.from_numpy(basis.V).to(dtype)
    lr = cfg.learning_rate / constrained_lr_scale(basis)
    best, traces = _optimize(objective, init, lambda v: v @ V, cfg.steps, lr, cfg.betas)
    vs = best.double().numpy()
    ws = np.stack([basis.embed(v) for v in vs])
    finals = _render_final(objective, ws)
    return [InversionResult(ws[i], traces[i], finals[i], cfg.steps, "constrained", vs[i])
            for i in range(n)]


def invert_constrained(image, model: GeneratorModel, basis: SemanticBasis,
                       steps: Optional[int] = None, cfg: InversionConfig = InversionConfig(),
                       metric: Optional[PerceptualMetric] = None) -> InversionResult:
    """Invert one image by optimizing ``v`` with ``w = V v`` held exactly."""
    if steps is not None:
        cfg = cfg.with_steps(steps)
    return invert_constrained_batch(image, model, basis, cfg, metric)[0]


def invert(image, model: GeneratorModel, mode: str = "baseline", basis=None,
           cfg: InversionConfig = InversionConfig(), metric=None) -> InversionResult:
    """Dispatch on ``mode``; constrained mode builds the full-rank basis if none is given."""
    if mode == "baseline":
        return project_w(image, model, cfg=cfg, metric=metric)
    if mode == "constrained":
        if basis is None:
            basis = semantic_basis(extract_affine(model))
        return invert_constrained(image, model, basis, cfg=cfg, metric=metric)
    raise ValueError(f"unknown inversion mode {mode!r}")
