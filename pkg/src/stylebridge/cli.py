"""Command-line interface (``stylebridge <command> --help``).

Every command is deterministic given its arguments and seeds: output files
(checkpoints, PNGs, JSON reports, loss traces) are byte-identical across
runs. Timings go to stderr only.
"""

from __future__ import annotations

import json
import logging
import sys
import time
from pathlib import Path

import click
import numpy as np
import torch

from . import config as config_mod
from .checkpoint import (
    load_checkpoint,
    load_discriminator,
    save_checkpoint,
    save_discriminator,
    write_container,
)
from .data import DOMAINS, domain_dataset, load_image_folder, read_png, to_training_tensor, write_png
from .generator import GeneratorConfig, make_style_plan, map_latent, sample_z, synthesize
from .latent import InversionConfig, extract_affine, semantic_basis
from .pipeline import ModelRegistry, TranslationRequest, invert_image, run
from .surgery import TransformationRecipe, model_distance, swap_layers, transform
from .training import FREEZE_FC, FreezeSet, TrainConfig, finetune, train_base


def _report(path, payload) -> None:
    text = json.dumps(payload, sort_keys=True, indent=1) + "\n"
    if path is None:
        click.echo(text, nl=False)
    else:
        Path(path).write_text(text)


def _timed(label):
    class _T:
        def __enter__(self):
            self.t = time.perf_counter()

        def __exit__(self, *exc):
            click.echo(f"[{label}] {time.perf_counter() - self.t:.3f}s", err=True)

    return _T()


def _dataset(data_dir, toy, cfg, seed):
    if (data_dir is None) == (toy is None):
        raise click.UsageError("give exactly one of --data DIR or --toy DOMAIN")
    if toy is not None:
        return domain_dataset(toy, cfg["toy_images"], seed, cfg["resolution"], cfg["img_channels"]), toy
    images = load_image_folder(data_dir, cfg["resolution"], cfg["img_channels"])
    return to_training_tensor(images), Path(data_dir).name


def _inv_cfg(cfg, steps, seed=None):
    return InversionConfig(steps=cfg["inversion_steps"] if steps is None else steps,
                           learning_rate=cfg["inversion_learning_rate"],
                           noise_seed=cfg["noise_seed"] if seed is None else seed)


config_option = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                             help="key=value config file; flags override it.")
data_options = [
    click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False),
                 help="Image directory (manifest.txt optional)."),
    click.option("--toy", type=click.Choice(DOMAINS), help="Procedural toy domain."),
]


def _with(options):
    def deco(f):
        for opt in reversed(options):
            f = opt(f)
        return f
    return deco


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose):
    """Image-to-image translation with transformed style-based generators."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)


@main.command("show-config")
@config_option
def show_config(config_path):
    """Print every setting with its effective value."""
    click.echo(config_mod.format_config(config_mod.load_config(config_path)), nl=False)


@main.command()
@config_option
@_with(data_options)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--iterations", type=int)
@click.option("--seed", type=int)
@click.option("--lr", "learning_rate", type=float)
@click.option("--batch-size", type=int)
@click.option("--domain-tag", default=None)
def train(config_path, data_dir, toy, out, domain_tag, **flags):
    """Train a base generator. Writes OUT, OUT.disc and OUT.loss.csv."""
    cfg = config_mod.load_config(config_path, flags)
    data, tag = _dataset(data_dir, toy, cfg, cfg["seed"])
    gcfg = GeneratorConfig(cfg["z_dim"], cfg["w_dim"], cfg["mapping_layers"], cfg["resolution"],
                           cfg["img_channels"])
    tcfg = TrainConfig(cfg["iterations"], cfg["batch_size"], cfg["learning_rate"], cfg["seed"],
                       cfg["log_every"], cfg["style_mixing"], cfg["freeze_d_blocks"], cfg["r1_gamma"])
    loss_path = Path(out + ".loss.csv")
    loss_path.unlink(missing_ok=True)
    with _timed("train"):
        G, D = train_base(data, tcfg, gcfg, domain=domain_tag or tag, log_path=loss_path,
                          return_discriminator=True)
    save_checkpoint(G, out)
    save_discriminator(D, out + ".disc")


@main.command("finetune")
@config_option
@_with(data_options)
@click.option("--base", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--disc", type=click.Path(exists=True, dir_okay=False),
              help="Discriminator to start from (default: BASE.disc if present).")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--freeze-fc", is_flag=True, help="Freeze the mapping network.")
@click.option("--freeze", "patterns", multiple=True, help="Extra parameter-name prefix to freeze.")
@click.option("--iterations", "finetune_iterations", type=int)
@click.option("--lr", "finetune_learning_rate", type=float)
@click.option("--seed", type=int)
@click.option("--domain-tag", default=None)
def finetune_cmd(config_path, data_dir, toy, base, disc, out, freeze_fc, patterns, domain_tag, **flags):
    """Fine-tune BASE on target data."""
    cfg = config_mod.load_config(config_path, flags)
    data, tag = _dataset(data_dir, toy, cfg, cfg["seed"] + 1)
    G0 = load_checkpoint(base)
    D0 = _maybe_disc(base, disc)
    freeze = FreezeSet((FREEZE_FC.name_patterns if freeze_fc else ()) + tuple(patterns))
    tcfg = TrainConfig(cfg["finetune_iterations"], cfg["batch_size"], cfg["finetune_learning_rate"],
                       cfg["seed"], cfg["log_every"], cfg["style_mixing"], cfg["freeze_d_blocks"],
                       cfg["r1_gamma"])
    loss_path = Path(out + ".loss.csv")
    loss_path.unlink(missing_ok=True)
    with _timed("finetune"):
        G = finetune(G0, data, freeze, tcfg, discriminator=D0, domain=domain_tag or tag,
                     log_path=loss_path)
    save_checkpoint(G, out)


def _maybe_disc(base, disc):
    if disc is not None:
        return load_discriminator(disc)
    default = Path(base + ".disc")
    return load_discriminator(default) if default.exists() else None


@main.command()
@click.option("--source", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--tuned", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--l", "depth", required=True, type=int, help="Number of coarse blocks (from 8x8) to swap.")
@click.option("--conv-only", is_flag=True, help="Swap conv weights only, keep tuned affines.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def swap(source, tuned, depth, conv_only, out):
    """Layer-swap SOURCE's coarse blocks into TUNED."""
    src, tun = load_checkpoint(source), load_checkpoint(tuned)
    with _timed("swap"):
        model = swap_layers(src, tun, depth, conv_only)
    save_checkpoint(model, out)


@main.command("transform")
@config_option
@_with(data_options)
@click.option("--base", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--disc", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--l", "swap_depth", type=int)
@click.option("--no-freeze-fc", is_flag=True)
@click.option("--iterations", "finetune_iterations", type=int)
@click.option("--lr", "finetune_learning_rate", type=float)
@click.option("--seed", type=int)
@click.option("--workdir", type=click.Path(file_okay=False), help="Keep the fine-tuned checkpoint here.")
@click.option("--domain-tag", default=None)
def transform_cmd(config_path, data_dir, toy, base, disc, out, no_freeze_fc, workdir, domain_tag, **flags):
    """Fine-tune then layer-swap: the full model transformation."""
    cfg = config_mod.load_config(config_path, flags)
    data, tag = _dataset(data_dir, toy, cfg, cfg["seed"] + 1)
    tcfg = TrainConfig(cfg["finetune_iterations"], cfg["batch_size"], cfg["finetune_learning_rate"],
                       cfg["seed"], cfg["log_every"], cfg["style_mixing"], cfg["freeze_d_blocks"],
                       cfg["r1_gamma"])
    recipe = TransformationRecipe(FreezeSet(()) if no_freeze_fc else FREEZE_FC, tcfg, cfg["swap_depth"])
    with _timed("transform"):
        model = transform(load_checkpoint(base), data, recipe, discriminator=_maybe_disc(base, disc),
                          domain=domain_tag or tag, workdir=workdir)
    save_checkpoint(model, out)


@main.command()
@click.option("--a", "model_a", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--b", "model_b", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--n", type=int, default=256, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), help="Report path (default: stdout).")
def distance(model_a, model_b, n, seed, out):
    """Monte-Carlo model distance between two generators."""
    with _timed("distance"):
        report = model_distance(load_checkpoint(model_a), load_checkpoint(model_b), n, seed)
    _report(out, report.to_dict())


@main.command()
@click.option("--model", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--top-k", type=int, default=0, help="Keep the top-k directions (0 = all).")
@click.option("--layers", type=click.Choice(["conv", "all", "first"]), default="conv", show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), help="Basis container path.")
@click.option("--report", type=click.Path(dir_okay=False), help="Eigenvalue report (default: stdout).")
def directions(model, top_k, layers, out, report):
    """Semantic directions: eigenvectors of the stacked style affines' Gram matrix."""
    G = load_checkpoint(model)
    basis = semantic_basis(extract_affine(G, layers), top_k or None)
    if out:
        write_container(out, "basis", {"V": basis.V, "eigenvalues": basis.eigenvalues,
                                       "eigenvectors": basis.eigenvectors},
                        metadata={"source_model_digest": basis.source_model_digest, "layers": layers})
    _report(report, {"eigenvalues": basis.eigenvalues.tolist(), "rank": basis.rank,
                     "layers": layers, "source_model_digest": basis.source_model_digest})


@main.command()
@config_option
@click.option("--model", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--image", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--mode", type=click.Choice(["baseline", "constrained"]), default="baseline", show_default=True)
@click.option("--steps", type=int)
@click.option("--top-k", type=int, default=0)
@click.option("--out", required=True, help="Output prefix: PREFIX.png, PREFIX.trace.txt, PREFIX.latent")
def invert(config_path, model, image, mode, steps, top_k, out):
    """Invert IMAGE into the embedded space of MODEL."""
    cfg = config_mod.load_config(config_path)
    G = load_checkpoint(model)
    basis = None
    if mode == "constrained":
        basis = semantic_basis(extract_affine(G), top_k or None)
    img = read_png(image, G.resolution, G.config.img_channels)
    with _timed("invert"):
        res = invert_image(img, G, mode, _inv_cfg(cfg, steps), basis)
    write_png(out + ".png", res.final_image)
    Path(out + ".trace.txt").write_text("".join(f"{i} {v!r}\n" for i, v in enumerate(res.loss_trace)))
    tensors = {"w": res.w}
    if res.v is not None:
        tensors["v"] = res.v
    tensors["loss_trace"] = np.asarray(res.loss_trace)
    write_container(out + ".latent", "latent", tensors,
                    metadata={"mode": mode, "steps": res.steps, "model_digest": G.digest()})


@main.command()
@config_option
@click.option("--source", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--target", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--image", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--mode", type=click.Choice(["single", "multimodal", "reference"]), default="single",
              show_default=True)
@click.option("--k", "split_index", type=int, help="Split index (default: first slot above 32x32).")
@click.option("--n", "styles", type=int, default=5, show_default=True)
@click.option("--style-seed", type=int, default=0, show_default=True)
@click.option("--reference", type=click.Path(exists=True, dir_okay=False))
@click.option("--inversion", type=click.Choice(["baseline", "constrained"]), default="baseline",
              show_default=True)
@click.option("--steps", type=int)
@click.option("--out", required=True, help="PNG path (single/reference) or prefix (multimodal).")
def translate(config_path, source, target, image, mode, split_index, styles, style_seed,
              reference, inversion, steps, out):
    """Translate IMAGE from SOURCE's domain into TARGET's."""
    cfg = config_mod.load_config(config_path)
    req = TranslationRequest(image, source, target, mode=mode, n=styles, style_seed=style_seed,
                             reference=reference, split_index=split_index, inversion=inversion,
                             inversion_cfg=_inv_cfg(cfg, steps))
    with _timed("translate"):
        result = run(req)
    if mode == "multimodal":
        for i, img in enumerate(result):
            write_png(f"{out}_{i:02d}.png", img)
    else:
        write_png(out, result)


@main.command()
@click.option("--model", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--n", type=int, default=1, show_default=True)
@click.option("--noise-seed", type=int, default=0, show_default=True)
@click.option("--out", required=True, help="Output prefix: PREFIX_<i>.png")
def sample(model, seed, n, noise_seed, out):
    """Render N samples from seeded latent codes."""
    G = load_checkpoint(model)
    with _timed("synthesis"):
        for i, w in enumerate(map_latent(G, sample_z(seed, n, G.config.z_dim))):
            write_png(f"{out}_{i:02d}.png", synthesize(G, make_style_plan(w, num_layers=G.num_layers),
                                                        noise_seed))


@main.group()
def registry():
    """Named models for multi-domain translation."""


@registry.command("add")
@click.argument("tag")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.option("--registry", "reg_path", default="registry.json", show_default=True)
def registry_add(tag, checkpoint, reg_path):
    reg = ModelRegistry(reg_path)
    reg.add(tag, checkpoint)


@registry.command("list")
@click.option("--registry", "reg_path", default="registry.json", show_default=True)
def registry_list(reg_path):
    _report(None, ModelRegistry(reg_path).describe())


if __name__ == "__main__":
    sys.exit(main())
