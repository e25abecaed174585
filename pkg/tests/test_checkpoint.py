import struct

import numpy as np
import pytest
import torch

from stylebridge.checkpoint import (
    CheckpointError,
    CheckpointVersionError,
    decode,
    encode,
    load_checkpoint,
    load_discriminator,
    read_container,
    save_checkpoint,
    save_discriminator,
)
from stylebridge.generator import make_style_plan, map_latent, sample_z, synthesize
from stylebridge.training import Discriminator

from helpers import TINY, params_equal, tiny_model


def test_generator_round_trip_is_bit_exact(tmp_path):
    model = tiny_model(seed=2, domain="glyph", op="train_base", lineage=[])
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(model, p1)
    loaded = load_checkpoint(p1)
    assert params_equal(model, loaded)
    assert loaded.metadata == model.metadata
    assert loaded.config == model.config
    save_checkpoint(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    w = map_latent(model, sample_z(0, 1, TINY.z_dim)[0])
    plan = make_style_plan(w, num_layers=model.num_layers)
    assert np.array_equal(synthesize(model, plan, 1), synthesize(loaded, plan, 1))


def test_discriminator_round_trip(tmp_path):
    disc = Discriminator(TINY, seed=4)
    save_discriminator(disc, tmp_path / "d.ckpt")
    loaded = load_discriminator(tmp_path / "d.ckpt")
    assert all(torch.equal(a, b) for a, b in zip(disc.state_dict().values(), loaded.state_dict().values()))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "d.ckpt")


def test_header_layout(tmp_path):
    raw = encode("latent", {"w": np.arange(3, dtype=np.float32)}, metadata={"k": 1})
    magic, version, hlen = struct.unpack_from("<8sIQ", raw)
    assert magic == b"STYLBRDG" and version == 1
    data = raw[20 + hlen:-32]
    assert np.array_equal(np.frombuffer(data, "<f4"), np.arange(3, dtype=np.float32))
    header, tensors = decode(raw)
    assert header["kind"] == "latent" and header["metadata"] == {"k": 1}


def test_truncated_file_is_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model(), path)
    raw = path.read_bytes()
    for cut in (10, len(raw) // 2, len(raw) - 1):
        path.write_bytes(raw[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


def test_modified_byte_is_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model(), path)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_unknown_version_is_rejected(tmp_path):
    raw = bytearray(encode("latent", {"w": np.zeros(2, np.float32)}))
    raw[8:12] = struct.pack("<I", 99)
    with pytest.raises(CheckpointVersionError):
        decode(bytes(raw))


def test_missing_tensor_is_rejected(tmp_path):
    model = tiny_model()
    state = dict(model.state_dict())
    state.pop(next(iter(state)))
    (tmp_path / "bad.ckpt").write_bytes(encode("generator", state, model.config.to_dict(), {}))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_kind_check(tmp_path):
    (tmp_path / "x").write_bytes(encode("latent", {"w": np.zeros(1, np.float32)}))
    with pytest.raises(CheckpointError):
        read_container(tmp_path / "x", "generator")
