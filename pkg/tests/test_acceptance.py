"""Acceptance suite on the toy glyph domains.

Models come from :mod:`world` (trained once, then cached). Each test is
tagged with the criterion it covers; the terminal summary prints one
PASS/FAIL line per criterion with the measured numbers.
"""

import itertools
import math
import os
import time
import warnings

import numpy as np
import pytest
import scipy.linalg
import torch
from click.testing import CliRunner

from stylebridge.checkpoint import load_checkpoint, save_checkpoint
from stylebridge.cli import main
from stylebridge.data import export_domain, render_domain
from stylebridge.generator import (
    GeneratorConfig,
    GeneratorModel,
    make_style_plan,
    map_latent,
    sample_z,
    synthesize,
)
from stylebridge.latent import (
    InversionConfig,
    InversionObjective,
    extract_affine,
    invert_constrained_batch,
    project_w_batch,
    semantic_basis,
)
from stylebridge.metrics import default_metric, perceptual_distance, ssim
from stylebridge.pipeline import (
    LineageWarning,
    ModelRegistry,
    TranslationRequest,
    appearance_codes,
    default_split_index,
    invert_image,
    multidomain_translate,
    translate_multimodal,
)
from stylebridge.surgery import model_distance, swap_layers

import world

pytestmark = pytest.mark.slow

DISTANCE_N = 256
DISTANCE_SEED = 0
SUITE_SIZE = 20
SUITE_Z_SEED = 2025
SUITE_NOISE_SEED = 0
PERTURB_SIGMA = 0.05
PERTURB_SEED = 1
INVERSION_STEPS = 1000
TRANSLATION_SEED = 4242


@pytest.fixture(scope="session")
def toy():
    return world.build_world()


@pytest.fixture(scope="session")
def metric():
    return default_metric()


def _gap_ok(hi, lo):
    """``hi`` exceeds ``lo`` by more than twice their combined standard error."""
    return hi.estimate - lo.estimate > 2.0 * math.hypot(hi.std_error, lo.std_error)


# -- 1 ---------------------------------------------------------------------------

@pytest.mark.criterion(1, "transformation ordering: independent > FT > FC-FT")
def test_transformation_ordering(toy, detail):
    t = time.perf_counter()
    d_ind = model_distance(toy.base, toy.independent, DISTANCE_N, DISTANCE_SEED)
    d_ft = model_distance(toy.base, toy.ft, DISTANCE_N, DISTANCE_SEED)
    d_fcft = model_distance(toy.base, toy.fcft, DISTANCE_N, DISTANCE_SEED)
    for name, r in (("independent", d_ind), ("FT", d_ft), ("FC-FT", d_fcft)):
        detail(f"{name} {r.estimate:.4f}±{r.std_error:.4f}")
    detail(f"{time.perf_counter() - t:.0f}s for distances")
    assert _gap_ok(d_ind, d_ft)
    assert _gap_ok(d_ft, d_fcft)


# -- 2 ---------------------------------------------------------------------------

@pytest.mark.criterion(2, "layer-swap monotonicity and l=0 identity")
def test_layer_swap_monotone(toy, detail):
    reports = [model_distance(toy.base, swap_layers(toy.base, toy.fcft, l), DISTANCE_N, DISTANCE_SEED)
               for l in range(4)]
    detail("d(A, LS_l) = " + ", ".join(f"{r.estimate:.4f}" for r in reports))
    for prev, cur in zip(reports, reports[1:]):
        allowed = 2.0 * max(prev.std_error, cur.std_error)
        assert cur.estimate <= prev.estimate + allowed


@pytest.mark.criterion(2, "layer-swap monotonicity and l=0 identity")
def test_layer_swap_zero_is_identity(toy):
    out = swap_layers(toy.base, toy.fcft, 0)
    assert out.digest() == toy.fcft.digest()
    for name, p in toy.fcft.state_dict().items():
        assert torch.equal(out.state_dict()[name], p)


# -- 3 ---------------------------------------------------------------------------

@pytest.mark.criterion(3, "freeze-FC exactness")
@pytest.mark.parametrize("which", ["fcft", "fcft_c"])
def test_freeze_fc_exact(toy, which, detail):
    tuned = getattr(toy, which)
    base_state, tuned_state = toy.base.state_dict(), tuned.state_dict()
    mapping = [n for n in base_state if n.startswith("map.")]
    assert mapping
    for name in mapping:
        assert torch.equal(base_state[name], tuned_state[name]), name
    z = sample_z(31337, 256, toy.base.config.z_dim)
    assert np.array_equal(map_latent(toy.base, z), map_latent(tuned, z))
    moved = [n for n in base_state if not torch.equal(base_state[n], tuned_state[n])]
    assert moved and not any(n.startswith("map.") for n in moved)
    detail(f"{which}: {len(mapping)} mapping tensors equal, {len(moved)} synthesis tensors moved")


# -- 4 ---------------------------------------------------------------------------

@pytest.mark.criterion(4, "eigenanalysis correctness")
@pytest.mark.parametrize("layers", ["conv", "all", "first"])
def test_eigenanalysis(toy, layers, detail):
    stack = extract_affine(toy.base, layers)
    assert stack.A.shape[1] <= 128
    basis = semantic_basis(stack)
    gram = stack.A.T @ stack.A
    residuals = [np.linalg.norm(gram @ basis.eigenvectors[:, i] - basis.eigenvalues[i] * basis.eigenvectors[:, i])
                 for i in range(basis.rank)]
    N = basis.eigenvectors
    ortho = np.abs(N.T @ N - np.eye(N.shape[1])).max()
    ref = np.sort(scipy.linalg.eig(gram, right=False).real)[::-1]
    detail(f"{layers}: max residual {max(residuals):.1e}, orthonormality {ortho:.1e}")
    assert max(residuals) < 1e-6
    assert ortho < 1e-8
    assert np.allclose(basis.eigenvalues, ref, rtol=1e-8, atol=1e-8 * ref[0])


# -- 5 and 6 ---------------------------------------------------------------------

@pytest.fixture(scope="session")
def suite(toy):
    """Twenty images rendered by the base model from seeded codes."""
    G = toy.base
    ws = map_latent(G, sample_z(SUITE_Z_SEED, SUITE_SIZE, G.config.z_dim))
    return np.stack([synthesize(G, make_style_plan(w, num_layers=G.num_layers), SUITE_NOISE_SEED)
                     for w in ws])


@pytest.fixture(scope="session")
def perturbed_suite(suite):
    """The same images with seeded Gaussian pixel noise, so neither mode can fit them exactly."""
    rng = np.random.default_rng(PERTURB_SEED)
    noisy = suite + PERTURB_SIGMA * rng.standard_normal(suite.shape)
    return np.clip(noisy, -1.0, 1.0).astype(np.float32)


def _invert_both(model, images):
    cfg = InversionConfig(steps=INVERSION_STEPS, noise_seed=SUITE_NOISE_SEED)
    basis = semantic_basis(extract_affine(model))
    return {
        "baseline": project_w_batch(images, model, cfg),
        "constrained": invert_constrained_batch(images, model, basis, cfg),
    }


@pytest.fixture(scope="session")
def inversions(toy, suite):
    return _invert_both(toy.base, suite)


@pytest.fixture(scope="session")
def perturbed_inversions(toy, perturbed_suite):
    return _invert_both(toy.base, perturbed_suite)


@pytest.mark.criterion(5, "inversion round trip and gradient check")
@pytest.mark.parametrize("mode", ["baseline", "constrained"])
def test_inversion_round_trip(suite, inversions, metric, mode, detail):
    unrelated = np.mean([perceptual_distance(metric, suite[i], suite[j])
                         for i, j in itertools.combinations(range(SUITE_SIZE), 2)])
    recon = [perceptual_distance(metric, r.final_image, x) for r, x in zip(inversions[mode], suite)]
    ratio = np.mean(recon) / unrelated
    detail(f"{mode}: mean recon {np.mean(recon):.5f} = {100 * ratio:.2f}% of unrelated "
           f"{unrelated:.4f} (worst {100 * max(recon) / unrelated:.1f}%)")
    assert all(r.steps <= INVERSION_STEPS for r in inversions[mode])
    assert ratio < 0.05


@pytest.mark.criterion(5, "inversion round trip and gradient check")
def test_inversion_gradient_finite_differences(detail):
    torch.manual_seed(0)
    cfg = GeneratorConfig(z_dim=8, w_dim=8, mapping_layers=2, resolution=4, channels=(8,))
    model = GeneratorModel(cfg, seed=2).double()
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("noise_strength"):
                p.fill_(0.1)
    metric = default_metric(seed=4)
    metric.feature_net.double()
    target = torch.rand(1, 3, 4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(1)) * 2 - 1
    objective = InversionObjective(model, target, metric, noise_seed=0)
    w0 = torch.randn(1, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
    w = w0.clone().requires_grad_(True)
    objective(w).sum().backward()
    analytic = w.grad.clone()
    numeric = torch.zeros_like(analytic)
    eps = 1e-6
    with torch.no_grad():
        for j in range(8):
            e = torch.zeros_like(w0)
            e[0, j] = eps
            numeric[0, j] = (objective(w0 + e).sum() - objective(w0 - e).sum()) / (2 * eps)
    rel = float((analytic - numeric).norm() / numeric.norm())
    detail(f"finite-difference rel. err {rel:.1e}")
    assert rel < 1e-3


@pytest.mark.criterion(6, "inversion ordering: SSIM constrained >= baseline")
def test_inversion_ssim_ordering(perturbed_suite, perturbed_inversions, detail):
    scores = {mode: float(np.mean([ssim(r.final_image, x) for r, x in zip(res, perturbed_suite)]))
              for mode, res in perturbed_inversions.items()}
    detail(f"SSIM constrained {scores['constrained']:.4f} vs baseline {scores['baseline']:.4f}")
    assert scores["constrained"] >= scores["baseline"]


# -- 7 ---------------------------------------------------------------------------

@pytest.mark.criterion(7, "multi-modal contract")
def test_multimodal_contract(toy, suite, metric, detail):
    target = toy.model_b
    req = TranslationRequest(suite[0], toy.base, target, mode="multimodal", n=5, style_seed=11,
                             inversion_cfg=InversionConfig(steps=200))
    outputs = translate_multimodal(req)
    assert len(outputs) == 5
    # rebuild the plans to inspect the pre-split activations of each style
    k = default_split_index(target)
    w_c = invert_image(suite[0], toy.base, "baseline", req.inversion_cfg).w
    taps = []
    for w_a, out in zip(appearance_codes(target, 5, 11), outputs):
        img, acts = synthesize(target, make_style_plan(w_c, w_a, k, num_layers=target.num_layers),
                               req.inversion_cfg.noise_seed, return_activations=True)
        assert np.array_equal(img, out)
        taps.append(acts)
    for acts in taps[1:]:
        for j in range(k):
            assert np.array_equal(acts[f"slot{j}"], taps[0][f"slot{j}"])
    dists = [perceptual_distance(metric, outputs[i], outputs[j])
             for i, j in itertools.combinations(range(5), 2)]
    detail(f"split {k}; min pairwise distance {min(dists):.2e}")
    assert min(dists) > 0


# -- 8 ---------------------------------------------------------------------------

@pytest.mark.criterion(8, "multi-domain zero-training translation")
def test_multidomain_translation(toy, monkeypatch, detail):
    registry = ModelRegistry()
    registry.add(world.TARGET_B, toy.model_b)
    registry.add(world.TARGET_C, toy.model_c)
    before = {tag: registry.get(tag).digest() for tag in registry.tags()}

    def no_training(*args, **kwargs):
        raise AssertionError("translation must not train any model")

    monkeypatch.setattr("stylebridge.training.run_gan_training", no_training)
    monkeypatch.setattr("stylebridge.surgery.finetune", no_training)
    images = render_domain(world.TARGET_B, SUITE_SIZE, TRANSLATION_SEED)
    cfg = InversionConfig(steps=INVERSION_STEPS)
    with warnings.catch_warnings():
        warnings.simplefilter("error", LineageWarning)
        outputs = [multidomain_translate(img, registry, world.TARGET_B, world.TARGET_C, cfg=cfg)
                   for img in images]
    for tag, digest in before.items():
        assert registry.get(tag).digest() == digest
    for p in itertools.chain(toy.model_b.parameters(), toy.model_c.parameters()):
        assert p.grad is None
    accuracy = toy.classifier.accuracy(np.stack(outputs), world.TARGET_C)
    source_accuracy = toy.classifier.accuracy(images, world.TARGET_B)
    detail(f"{world.TARGET_B}->{world.TARGET_C} accuracy {accuracy:.2f} "
           f"(classifier on inputs {source_accuracy:.2f})")
    assert accuracy >= 0.8


# -- 9 ---------------------------------------------------------------------------

@pytest.mark.criterion(9, "determinism and persistence")
def test_checkpoint_round_trip_bit_exact(toy, tmp_path, detail):
    for name in ("base", "fcft", "model_b"):
        model = getattr(toy, name)
        save_checkpoint(model, tmp_path / f"{name}.ckpt")
        loaded = load_checkpoint(tmp_path / f"{name}.ckpt")
        for key, p in model.state_dict().items():
            assert torch.equal(loaded.state_dict()[key], p)
        save_checkpoint(loaded, tmp_path / f"{name}.again.ckpt")
        assert (tmp_path / f"{name}.ckpt").read_bytes() == (tmp_path / f"{name}.again.ckpt").read_bytes()
    detail("checkpoints re-save byte-identically")


@pytest.mark.criterion(9, "determinism and persistence")
def test_cli_outputs_byte_identical(toy, tmp_path, detail):
    save_checkpoint(toy.base, tmp_path / "A.ckpt")
    save_checkpoint(toy.model_b, tmp_path / "B.ckpt")
    export_domain(tmp_path / "imgs", world.BASE_DOMAIN, 1, 9)
    image = tmp_path / "imgs" / f"{world.BASE_DOMAIN}_00000.png"
    commands = {
        "swap": (["swap", "--source", "A.ckpt", "--tuned", "B.ckpt", "--l", "2", "--out", "{d}/s.ckpt"],
                 ["s.ckpt"]),
        "distance": (["distance", "--a", "A.ckpt", "--b", "B.ckpt", "--n", "16", "--out", "{d}/d.json"],
                     ["d.json"]),
        "directions": (["directions", "--model", "A.ckpt", "--out", "{d}/basis", "--report", "{d}/e.json"],
                       ["basis", "e.json"]),
        "invert": (["invert", "--model", "A.ckpt", "--image", str(image), "--mode", "constrained",
                    "--steps", "20", "--out", "{d}/inv"], ["inv.png", "inv.trace.txt", "inv.latent"]),
        "translate": (["translate", "--source", "A.ckpt", "--target", "B.ckpt", "--image", str(image),
                       "--mode", "multimodal", "--n", "2", "--steps", "20", "--out", "{d}/t"],
                      ["t_00.png", "t_01.png"]),
        "sample": (["sample", "--model", "B.ckpt", "--n", "2", "--out", "{d}/x"], ["x_00.png", "x_01.png"]),
        "finetune": (["finetune", "--toy", world.TARGET_B, "--base", "A.ckpt", "--freeze-fc",
                      "--iterations", "2", "--out", "{d}/f.ckpt"], ["f.ckpt", "f.ckpt.loss.csv"]),
    }
    runner = CliRunner()
    with runner.isolated_filesystem(temp_dir=tmp_path) as cwd:
        for src in ("A.ckpt", "B.ckpt"):
            (tmp_path / src).replace(f"{cwd}/{src}")
        for name, (args, files) in commands.items():
            blobs = []
            for run in ("r1", "r2"):
                d = f"{cwd}/{name}_{run}"
                os.makedirs(d)
                result = runner.invoke(main, [a.format(d=d) for a in args], catch_exceptions=False)
                assert result.exit_code == 0, result.output
                blobs.append([open(f"{d}/{f}", "rb").read() for f in files])
            assert blobs[0] == blobs[1], name
    detail(f"{len(commands)} commands reproduced byte-identically")
