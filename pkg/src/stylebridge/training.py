"""Adversarial training and fine-tuning with parameter-freeze manifests."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .generator import (
    INIT_RES,
    LRELU_SLOPE,
    GeneratorConfig,
    GeneratorModel,
    ShapeError,
    broadcast_w,
)

log = logging.getLogger(__name__)

ADAM_BETAS = (0.0, 0.99)


class TrainingDivergedError(RuntimeError):
    pass


class FreezeError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 8
    learning_rate: float = 0.002
    seed: int = 0
    log_every: int = 50
    style_mixing: float = 0.9
    # FreezeD-style: keep the first n (highest-resolution) discriminator blocks fixed.
    freeze_d_blocks: int = 0
    r1_gamma: float = 0.5

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1 or self.log_every < 1:
            raise ValueError("batch_size and log_every must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    @classmethod
    def finetune_default(cls, seed: int = 0) -> "TrainConfig":
        """500 steps at the base learning rate.

        A tenth of the base rate leaves an unfrozen mapping network nearly
        where it started after 500 steps, which hides the effect of freezing it.
        """
        return cls(iterations=500, learning_rate=0.002, seed=seed)


@dataclass(frozen=True)
class FreezeSet:
    """Parameter-name prefixes excluded from gradient updates."""

    name_patterns: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "name_patterns", tuple(self.name_patterns))

    def resolve(self, model: nn.Module) -> set:
        names = [n for n, _ in model.named_parameters()]
        frozen = set()
        for pattern in self.name_patterns:
            hits = [n for n in names if n.startswith(pattern)]
            if not hits:
                raise FreezeError(f"freeze pattern {pattern!r} matches no parameter")
            frozen.update(hits)
        return frozen

    def to_dict(self) -> dict:
        return {"name_patterns": list(self.name_patterns)}

    @classmethod
    def from_dict(cls, d: dict) -> "FreezeSet":
        return cls(tuple(d["name_patterns"]))


FREEZE_FC = FreezeSet(("map.",))
FREEZE_NONE = FreezeSet(())


class EqualConv2d(nn.Module):
    def __init__(self, in_ch, out_ch, kernel):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(out_ch))
        self.scale = 1.0 / math.sqrt(in_ch * kernel * kernel)
        self.padding = kernel // 2

    def forward(self, x):
        return F.conv2d(x, self.weight * self.scale, self.bias, padding=self.padding)


class DiscBlock(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv0 = EqualConv2d(in_ch, in_ch, 3)
        self.conv1 = EqualConv2d(in_ch, out_ch, 3)

    def forward(self, x):
        x = F.leaky_relu(self.conv0(x), LRELU_SLOPE)
        x = F.leaky_relu(self.conv1(x), LRELU_SLOPE)
        return F.avg_pool2d(x, 2)


class Discriminator(nn.Module):
    """Conv stack mirroring the generator ladder downward, scalar logit head."""

    def __init__(self, config: GeneratorConfig = GeneratorConfig(), seed: int = 0):
        super().__init__()
        self.config = config
        res_down = list(reversed(config.resolutions))
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed + 7919)
            self.fromrgb = EqualConv2d(config.img_channels, config.channels_at(res_down[0]), 1)
            self.blocks = nn.ModuleList(
                DiscBlock(config.channels_at(r), config.channels_at(r // 2))
                for r in res_down[:-1]
            )
            ch = config.channels_at(INIT_RES)
            self.conv = EqualConv2d(ch + 1, ch, 3)
            self.fc = nn.Linear(ch * INIT_RES * INIT_RES, ch)
            self.out = nn.Linear(ch, 1)

    def forward(self, img):
        if img.shape[-1] != self.config.resolution:
            raise ShapeError(f"discriminator expects {self.config.resolution}px images")
        x = F.leaky_relu(self.fromrgb(img), LRELU_SLOPE)
        for block in self.blocks:
            x = block(x)
        # minibatch standard deviation feature
        std = x.std(dim=0, unbiased=False).mean() if x.shape[0] > 1 else x.new_zeros([])
        x = torch.cat([x, std.expand(x.shape[0], 1, *x.shape[2:])], dim=1)
        x = F.leaky_relu(self.conv(x), LRELU_SLOPE)
        x = F.leaky_relu(self.fc(x.flatten(1)), LRELU_SLOPE)
        return self.out(x).squeeze(1)

    def frozen_names(self, n_blocks: int) -> set:
        names = {f"fromrgb.{k}" for k in ("weight", "bias")} if n_blocks > 0 else set()
        for i in range(min(n_blocks, len(self.blocks))):
            names.update(f"blocks.{i}.{n}" for n, _ in self.blocks[i].named_parameters())
        return names


def adversarial_losses(d_real, d_fake):
    """Logistic GAN losses from discriminator logits.

    Returns ``(g_loss, d_loss)`` with ``d_loss = -E[log s(real)] -
    E[log(1 - s(fake))]`` and the non-saturating ``g_loss = -E[log s(fake)]``.
    Tensor inputs give differentiable tensors; anything else is evaluated in
    float64 and returned as Python floats.
    """
    as_float = not (torch.is_tensor(d_real) and torch.is_tensor(d_fake))
    if as_float:
        d_real = torch.as_tensor(np.asarray(d_real, dtype=np.float64)).reshape(-1)
        d_fake = torch.as_tensor(np.asarray(d_fake, dtype=np.float64)).reshape(-1)
    if d_real.numel() == 0 or d_fake.numel() == 0:
        raise ValueError("logit batches must be non-empty")
    d_loss = F.softplus(-d_real).mean() + F.softplus(d_fake).mean()
    g_loss = F.softplus(-d_fake).mean()
    if as_float:
        return float(g_loss), float(d_loss)
    return g_loss, d_loss


def _check_dataset(data: torch.Tensor, config: GeneratorConfig) -> torch.Tensor:
    data = torch.as_tensor(data)
    if data.ndim != 4 or len(data) == 0:
        raise ShapeError("dataset must be a non-empty (N, C, H, W) batch")
    if data.shape[1] != config.img_channels or data.shape[2:] != (config.resolution,) * 2:
        raise ShapeError(
            f"dataset images are {tuple(data.shape[1:])}, model expects "
            f"({config.img_channels}, {config.resolution}, {config.resolution})"
        )
    return data.float()


def _random_noise(model: GeneratorModel, n: int, gen: torch.Generator):
    return [torch.randn(n, 1, r, r, generator=gen)
            for r in model.config.resolutions for _ in range(2)]


def _sample_ws(model, n, gen, mixing):
    z = torch.randn(n, model.config.z_dim, generator=gen)
    ws = broadcast_w(model.mapping(z), model.num_layers)
    if mixing > 0 and torch.rand([], generator=gen).item() < mixing:
        z2 = torch.randn(n, model.config.z_dim, generator=gen)
        w2 = model.mapping(z2)
        cut = int(torch.randint(1, model.num_layers, [], generator=gen))
        ws = torch.cat([ws[:, :cut], broadcast_w(w2, model.num_layers - cut)], dim=1)
    return ws


class LossLog:
    """Append-only ``step,g_loss,d_loss`` trace, mirrored to CSV if a path is given."""

    def __init__(self, path: Optional[Path] = None):
        self.rows = []
        self.path = Path(path) if path is not None else None
        if self.path is not None and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("step,g_loss,d_loss\n")

    def append(self, step, g_loss, d_loss):
        row = (step, g_loss, d_loss)
        self.rows.append(row)
        if self.path is not None:
            with self.path.open("a", newline="") as fh:
                csv.writer(fh).writerow([step, repr(g_loss), repr(d_loss)])


def run_gan_training(G: GeneratorModel, D: Discriminator, data: torch.Tensor, cfg: TrainConfig,
                     frozen: Sequence[str] = (), loss_log: Optional[LossLog] = None):
    """Alternate discriminator and generator Adam steps in place.

    Parameters named in ``frozen`` get no optimizer and are left untouched.
    Batch order, latent draws and noise come from one generator seeded by
    ``cfg.seed``.
    """
    frozen = set(frozen)
    d_frozen = D.frozen_names(cfg.freeze_d_blocks)
    g_params = [p for n, p in G.named_parameters() if n not in frozen]
    d_params = [p for n, p in D.named_parameters() if n not in d_frozen]
    for n, p in G.named_parameters():
        p.requires_grad_(n not in frozen)
    for n, p in D.named_parameters():
        p.requires_grad_(n not in d_frozen)
    loss_log = loss_log if loss_log is not None else LossLog()
    if cfg.iterations == 0:
        return loss_log
    if not g_params:
        log.info("every generator parameter is frozen; skipping optimization")
        return loss_log
    opt_g = torch.optim.Adam(g_params, lr=cfg.learning_rate, betas=ADAM_BETAS)
    opt_d = torch.optim.Adam(d_params, lr=cfg.learning_rate, betas=ADAM_BETAS)
    gen = torch.Generator().manual_seed(cfg.seed)
    n_data, bs = len(data), cfg.batch_size

    for step in range(cfg.iterations):
        # discriminator
        real = data[torch.randint(n_data, (bs,), generator=gen)]
        with torch.no_grad():
            ws = _sample_ws(G, bs, gen, cfg.style_mixing)
            fake = G.synthesis(ws, _random_noise(G, bs, gen))
        if cfg.r1_gamma > 0:
            real.requires_grad_(True)
        d_real = D(real)
        _, d_loss = adversarial_losses(d_real, D(fake))
        d_total = d_loss
        if cfg.r1_gamma > 0:
            (grad,) = torch.autograd.grad(d_real.sum(), real, create_graph=True)
            d_total = d_total + 0.5 * cfg.r1_gamma * grad.pow(2).sum(dim=(1, 2, 3)).mean()
        opt_d.zero_grad(set_to_none=True)
        d_total.backward()
        opt_d.step()

        # generator
        ws = _sample_ws(G, bs, gen, cfg.style_mixing)
        fake = G.synthesis(ws, _random_noise(G, bs, gen))
        g_loss, _ = adversarial_losses(d_real.detach(), D(fake))
        opt_g.zero_grad(set_to_none=True)
        g_loss.backward()
        opt_g.step()

        gl, dl = g_loss.item(), d_loss.item()
        if not (math.isfinite(gl) and math.isfinite(dl)):
            raise TrainingDivergedError(f"non-finite loss at step {step}: g={gl} d={dl}")
        if step % cfg.log_every == 0 or step == cfg.iterations - 1:
            loss_log.append(step, gl, dl)
            log.debug("step %d g_loss %.4f d_loss %.4f", step, gl, dl)

    for p in G.parameters():
        p.requires_grad_(True)
    for p in D.parameters():
        p.requires_grad_(True)
    opt_g.zero_grad(set_to_none=True)
    opt_d.zero_grad(set_to_none=True)
    return loss_log


def lineage_record(model: GeneratorModel) -> dict:
    return {"digest": model.digest(), "op": model.metadata.get("op", "init"),
            "domain": model.metadata.get("domain")}


def train_base(dataset, cfg: TrainConfig, config: GeneratorConfig = GeneratorConfig(),
               domain: str = "A", log_path=None, return_discriminator: bool = False):
    """Train a generator from scratch on ``dataset`` (``(N, C, H, W)`` in [-1, 1]).

    The result is the lineage root: its metadata records the domain tag and
    training seed. With ``return_discriminator`` the trained discriminator is
    returned too, so fine-tuning can start from it.
    """
    data = _check_dataset(dataset, config)
    G = GeneratorModel(config, seed=cfg.seed)
    D = Discriminator(config, seed=cfg.seed)
    trace = run_gan_training(G, D, data, cfg, loss_log=LossLog(log_path))
    G.metadata.update({
        "op": "train_base",
        "domain": domain,
        "train_seed": cfg.seed,
        "train_config": cfg.to_dict(),
        "lineage": [],
        "final_losses": list(trace.rows[-1][1:]) if trace.rows else None,
    })
    return (G, D) if return_discriminator else G


def finetune(base: GeneratorModel, target_dataset, freeze: FreezeSet, cfg: TrainConfig,
             discriminator: Optional[Discriminator] = None, domain: Optional[str] = None,
             log_path=None, return_discriminator: bool = False):
    """Fine-tune a copy of ``base`` on the target domain.

    Parameters matched by ``freeze`` stay bit-identical to ``base``. The
    discriminator starts from ``discriminator`` when given (it is copied, not
    modified), else from a fresh initialization.
    """
    data = _check_dataset(target_dataset, base.config)
    frozen = freeze.resolve(base)
    G = base.clone()
    if discriminator is not None:
        D = Discriminator(base.config)
        D.load_state_dict(discriminator.state_dict())
    else:
        D = Discriminator(base.config, seed=cfg.seed)
    trace = run_gan_training(G, D, data, cfg, frozen=frozen, loss_log=LossLog(log_path))
    base_rec = lineage_record(base)
    G.metadata = {
        "op": "finetune",
        "domain": domain if domain is not None else base.metadata.get("domain"),
        "init_seed": base.metadata.get("init_seed"),
        "parent": base_rec["digest"],
        "lineage": list(base.metadata.get("lineage", [])) + [base_rec],
        "recipe": {"freeze": freeze.to_dict(), "finetune_cfg": cfg.to_dict()},
        "final_losses": list(trace.rows[-1][1:]) if trace.rows else None,
    }
    return (G, D) if return_discriminator else G
