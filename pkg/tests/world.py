"""Trained toy models shared by the acceptance suite, cached on disk.

Training everything from scratch takes roughly half an hour on one CPU
core. Results are cached under ``STYLEBRIDGE_TEST_CACHE`` (default
``<repo>/.cache/acceptance``) in a directory keyed by a hash of the package
sources and the recipe below, so any code change retrains.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import torch

import stylebridge
from stylebridge.checkpoint import load_checkpoint, load_discriminator, save_checkpoint, save_discriminator
from stylebridge.classifier import DomainClassifier, train_classifier
from stylebridge.data import domain_dataset
from stylebridge.generator import GeneratorModel
from stylebridge.surgery import swap_layers
from stylebridge.training import FREEZE_FC, FREEZE_NONE, TrainConfig, finetune, train_base

ROOT = Path(__file__).resolve().parents[1]

BASE_DOMAIN = "glyph"
TARGET_B = "tinted"
TARGET_C = "inverted"
N_TRAIN = 2000
BASE_SEED = 0
INDEPENDENT_SEED = 5
FINETUNE_SEED = 1
TRANSFORM_DEPTH = 1
CLASSIFIER_DOMAINS = (BASE_DOMAIN, TARGET_B, TARGET_C)

RECIPE = {
    "base": TrainConfig(iterations=2000, seed=BASE_SEED).to_dict(),
    "independent": TrainConfig(iterations=2000, seed=INDEPENDENT_SEED).to_dict(),
    "finetune": TrainConfig.finetune_default(seed=FINETUNE_SEED).to_dict(),
    "domains": [BASE_DOMAIN, TARGET_B, TARGET_C],
    "n_train": N_TRAIN,
    "transform_depth": TRANSFORM_DEPTH,
    "classifier": {"n_per_domain": 600, "steps": 400, "seed": 0},
}


def cache_key() -> str:
    h = hashlib.sha256()
    src = Path(stylebridge.__file__).parent
    for path in sorted(src.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    h.update(json.dumps(RECIPE, sort_keys=True).encode())
    h.update(torch.__version__.encode())
    return h.hexdigest()[:16]


def cache_dir() -> Path:
    base = Path(os.environ.get("STYLEBRIDGE_TEST_CACHE", ROOT / ".cache" / "acceptance"))
    d = base / cache_key()
    d.mkdir(parents=True, exist_ok=True)
    return d


def _cached(path: Path, build, save, load):
    if path.exists():
        return load(path)
    obj = build()
    tmp = path.with_suffix(path.suffix + ".tmp")
    save(obj, tmp)
    tmp.replace(path)
    return load(path)


def _generator(path, build):
    return _cached(path, build, lambda m, p: save_checkpoint(m, p), load_checkpoint)


@dataclass
class ToyWorld:
    base: GeneratorModel
    independent: GeneratorModel
    ft: GeneratorModel
    fcft: GeneratorModel
    fcft_c: GeneratorModel
    model_b: GeneratorModel
    model_c: GeneratorModel
    classifier: DomainClassifier
    directory: Path


def build_world() -> ToyWorld:
    d = cache_dir()
    data = {dom: domain_dataset(dom, N_TRAIN, BASE_SEED) for dom in (BASE_DOMAIN,)}

    def base_pair():
        G, D = train_base(data[BASE_DOMAIN], TrainConfig.from_dict(RECIPE["base"]),
                          domain=BASE_DOMAIN, return_discriminator=True)
        save_discriminator(D, d / "base.disc")
        return G

    base = _generator(d / "base.ckpt", base_pair)
    disc = load_discriminator(d / "base.disc")
    ft_cfg = TrainConfig.from_dict(RECIPE["finetune"])
    target_b = domain_dataset(TARGET_B, N_TRAIN, FINETUNE_SEED)
    target_c = domain_dataset(TARGET_C, N_TRAIN, FINETUNE_SEED)

    independent = _generator(d / "independent.ckpt", lambda: train_base(
        domain_dataset(TARGET_B, N_TRAIN, INDEPENDENT_SEED),
        TrainConfig.from_dict(RECIPE["independent"]), domain=TARGET_B))
    fcft = _generator(d / "fcft_b.ckpt", lambda: finetune(
        base, target_b, FREEZE_FC, ft_cfg, discriminator=disc, domain=TARGET_B))
    ft = _generator(d / "ft_b.ckpt", lambda: finetune(
        base, target_b, FREEZE_NONE, ft_cfg, discriminator=disc, domain=TARGET_B))
    fcft_c = _generator(d / "fcft_c.ckpt", lambda: finetune(
        base, target_c, FREEZE_FC, ft_cfg, discriminator=disc, domain=TARGET_C))
    model_b = swap_layers(base, fcft, TRANSFORM_DEPTH)
    model_c = swap_layers(base, fcft_c, TRANSFORM_DEPTH)

    cl = RECIPE["classifier"]
    classifier = _cached(
        d / "classifier.pt",
        lambda: train_classifier(CLASSIFIER_DOMAINS, cl["n_per_domain"], cl["steps"], seed=cl["seed"]),
        lambda c, p: torch.save(c.state_dict(), p),
        _load_classifier,
    )
    return ToyWorld(base, independent, ft, fcft, fcft_c, model_b, model_c, classifier, d)


def _load_classifier(path):
    clf = DomainClassifier(CLASSIFIER_DOMAINS)
    clf.load_state_dict(torch.load(path, weights_only=True))
    clf.eval()
    return clf
