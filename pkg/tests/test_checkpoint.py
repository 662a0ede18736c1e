"""Checkpoint serialization: bitwise round trips and corruption detection."""

import struct

import numpy as np
import pytest

from driftadapt.autograd import Tensor
from driftadapt.checkpoint import (
    MAGIC,
    Checkpoint,
    apply_checkpoint,
    checkpoint_from_model,
    load_checkpoint,
    save_checkpoint,
)
from driftadapt.errors import ConfigError, FormatError
from driftadapt.model import ModelSpec, build_model, forward_segment
from driftadapt.rng import stream


@pytest.fixture()
def trained_like_model():
    """A model with non-default stats, as if training had filled them in."""
    m = build_model(ModelSpec(), seed=11)
    rng = stream(11, 98)
    for layer in m.bn_layers.values():
        layer.src_mu = rng.standard_normal(layer.channels).astype(np.float32)
        layer.src_sigma = (0.5 + rng.random(layer.channels)).astype(np.float32)
    return m


def test_file_round_trip_is_bitwise(tmp_path, trained_like_model):
    ckpt = checkpoint_from_model(trained_like_model)
    path = tmp_path / "model.dacp"
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert back.fingerprint == ckpt.fingerprint
    assert set(back.params) == set(ckpt.params)
    for name, arr in ckpt.params.items():
        assert np.array_equal(back.params[name], arr)
        assert back.params[name].dtype == np.float32
    assert set(back.src_stats) == set(ckpt.src_stats)
    for name, (mu, sg) in ckpt.src_stats.items():
        assert np.array_equal(back.src_stats[name][0], mu)
        assert np.array_equal(back.src_stats[name][1], sg)


def test_apply_reproduces_forward_pass(tmp_path, trained_like_model):
    img = Tensor(stream(0, 97).random((1, 3, 32, 32), dtype=np.float32))
    want = forward_segment(trained_like_model, img).data
    path = tmp_path / "model.dacp"
    save_checkpoint(checkpoint_from_model(trained_like_model), path)

    fresh = build_model(ModelSpec(), seed=999)
    apply_checkpoint(fresh, load_checkpoint(path))
    got = forward_segment(fresh, img).data
    assert np.array_equal(got, want)


def test_apply_resets_optimizer_state(trained_like_model):
    m = trained_like_model
    m.store.step_count = 7
    p = m.store["head.classifier.bias"]
    p.m = np.ones(14)
    p.v = np.ones(14)
    apply_checkpoint(m, checkpoint_from_model(m))
    assert m.store.step_count == 0
    assert p.m is None and p.v is None


def test_fingerprint_mismatch_rejected(trained_like_model):
    ckpt = checkpoint_from_model(trained_like_model)
    other = build_model(ModelSpec(head_widths=(16,)), seed=1)
    with pytest.raises(ConfigError):
        apply_checkpoint(other, ckpt)


def test_missing_param_rejected(trained_like_model):
    ckpt = checkpoint_from_model(trained_like_model)
    del ckpt.params["head.classifier.bias"]
    with pytest.raises(FormatError, match="head.classifier.bias"):
        apply_checkpoint(trained_like_model, ckpt)


def test_wrong_shape_rejected(trained_like_model):
    ckpt = checkpoint_from_model(trained_like_model)
    ckpt.params["head.classifier.bias"] = np.zeros(7, dtype=np.float32)
    with pytest.raises(FormatError, match="shape"):
        apply_checkpoint(trained_like_model, ckpt)


def test_missing_file_rejected(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_checkpoint(tmp_path / "nope.dacp")


class TestCorruption:
    @pytest.fixture()
    def saved(self, tmp_path, trained_like_model):
        path = tmp_path / "model.dacp"
        save_checkpoint(checkpoint_from_model(trained_like_model), path)
        return path

    def test_bad_magic(self, saved):
        blob = bytearray(saved.read_bytes())
        blob[0] ^= 0xFF
        saved.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(saved)

    def test_unsupported_version(self, saved):
        blob = bytearray(saved.read_bytes())
        blob[4:8] = struct.pack("<I", 99)
        saved.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="version"):
            load_checkpoint(saved)

    def test_truncated_file(self, saved):
        blob = saved.read_bytes()
        saved.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(FormatError, match="truncated"):
            load_checkpoint(saved)

    def test_trailing_garbage(self, saved):
        saved.write_bytes(saved.read_bytes() + b"\x00\x00\x00\x00")
        with pytest.raises(FormatError, match="trailing"):
            load_checkpoint(saved)

    def test_non_finite_values(self, tmp_path):
        ckpt = Checkpoint(fingerprint=1)
        ckpt.params["w"] = np.array([1.0, np.nan], dtype=np.float32)
        path = tmp_path / "bad.dacp"
        save_checkpoint(ckpt, path)
        with pytest.raises(FormatError, match="non-finite"):
            load_checkpoint(path)

    def test_orphan_sigma(self, tmp_path):
        ckpt = Checkpoint(fingerprint=1)
        ckpt.params["layer.src_sigma"] = np.ones(4, dtype=np.float32)
        path = tmp_path / "orphan.dacp"
        save_checkpoint(ckpt, path)
        with pytest.raises(FormatError, match="src_mu"):
            load_checkpoint(path)

    def test_not_even_a_header(self, tmp_path):
        path = tmp_path / "tiny.dacp"
        path.write_bytes(MAGIC[:2])
        with pytest.raises(FormatError, match="truncated"):
            load_checkpoint(path)
