"""Small shared builders for the unit tests."""

import numpy as np
import torch

from stylebridge.generator import GeneratorConfig, GeneratorModel

TINY = GeneratorConfig(z_dim=8, w_dim=8, mapping_layers=2, resolution=16, channels=(8, 8, 8))


def tiny_model(seed=0, config=TINY, **metadata):
    model = GeneratorModel(config, seed=seed, metadata=metadata)
    # give noise and biases non-trivial values so they take part in every check
    g = torch.Generator().manual_seed(seed + 100)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("noise_strength"):
                p.copy_(0.1 * torch.randn([], generator=g))
            elif name.endswith(".bias") and "affine" not in name:
                p.copy_(0.1 * torch.randn(p.shape, generator=g))
    return model


def lrelu(x):
    return np.where(x >= 0, x, 0.2 * x)


def params_equal(a, b, names=None):
    sa, sb = a.state_dict(), b.state_dict()
    names = sa.keys() if names is None else names
    return all(torch.equal(sa[n], sb[n]) for n in names)
