"""Small CNN that tells the toy domains apart.

Trained only on rendered domain images, never on generator output, so it
serves as an independent judge of which domain a generated image falls in.
Its conv features can also back a :class:`PerceptualMetric`.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import render_domain
from .generator import LRELU_SLOPE, to_nchw
from .metrics import PerceptualMetric


class DomainClassifier(nn.Module):
    def __init__(self, domains: Sequence[str], in_channels: int = 3, seed: int = 0):
        super().__init__()
        self.domains = tuple(domains)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.convs = nn.ModuleList([
                nn.Conv2d(in_channels, 16, 3, stride=2, padding=1),
                nn.Conv2d(16, 32, 3, stride=2, padding=1),
                nn.Conv2d(32, 32, 3, stride=2, padding=1),
            ])
            self.head = nn.Linear(32, len(self.domains))
        self.descriptor = {"kind": "classifier", "domains": list(self.domains), "seed": seed}

    def features(self, x):
        feats = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), LRELU_SLOPE)
            feats.append(x)
        return feats

    def forward(self, x):
        return self.head(self.features(x)[-1].mean(dim=(2, 3)))

    @torch.no_grad()
    def predict(self, images) -> list:
        x = images if torch.is_tensor(images) else to_nchw(images)
        return [self.domains[i] for i in self(x.float()).argmax(dim=1).tolist()]

    def accuracy(self, images, domain: str) -> float:
        preds = self.predict(images)
        return sum(p == domain for p in preds) / len(preds)

    def as_metric(self) -> PerceptualMetric:
        for p in self.parameters():
            p.requires_grad_(False)
        return PerceptualMetric(self.features, layer_weights=(1.0, 1.0, 1.0),
                                descriptor=dict(self.descriptor))


def train_classifier(domains: Sequence[str], n_per_domain: int = 600, steps: int = 400,
                     res: int = 64, seed: int = 0, noise_std: float = 0.1) -> DomainClassifier:
    """Fit a classifier on freshly rendered images (seeds disjoint from GAN data).

    Training images get additive Gaussian noise so that small rendering
    artifacts do not flip the decision.
    """
    clf = DomainClassifier(domains, seed=seed)
    images = np.concatenate([render_domain(d, n_per_domain, 10_000 + seed, res) for d in domains])
    labels = torch.arange(len(domains)).repeat_interleave(n_per_domain)
    x_all = to_nchw(images)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(clf.parameters(), lr=2e-3)
    for _ in range(steps):
        idx = torch.randint(len(x_all), (32,), generator=gen)
        x = x_all[idx] + noise_std * torch.randn(32, *x_all.shape[1:], generator=gen)
        loss = F.cross_entropy(clf(x), labels[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    clf.eval()
    return clf
