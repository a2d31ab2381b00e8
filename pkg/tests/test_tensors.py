import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxalign.tensors import (
    DisplacementField,
    FeatureVolume,
    LabelVolume,
    MVFError,
    VelocityField,
    Volume,
    read_mvf,
    write_mvf,
)


def test_volume_invariants():
    v = Volume(np.zeros((2, 3, 4)), spacing=(1.8, 1.8, 10.0))
    assert v.dims == (2, 3, 4)
    assert v.spacing == (1.8, 1.8, 10.0)
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        Volume(np.full((2, 2, 2), np.nan))
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2)), spacing=(0.0, 1.0, 1.0))


def test_volume_immutable():
    v = Volume(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1.0


def test_label_volume_invariants():
    lv = LabelVolume(np.array([[[0, 1], [2, 2]], [[0, 0], [1, 5]]]))
    assert lv.label_set == (0, 1, 2, 5)
    assert lv.foreground_labels == (1, 2, 5)
    with pytest.raises(ValueError):
        LabelVolume(np.full((2, 2, 2), -1))
    with pytest.raises(ValueError):
        LabelVolume(np.full((2, 2, 2), 0.5))


def test_field_invariants():
    f = DisplacementField.zeros((2, 3, 4))
    assert f.dims == (2, 3, 4)
    assert VelocityField is DisplacementField
    with pytest.raises(ValueError):
        DisplacementField(np.zeros((2, 2, 2, 2)))


def test_feature_volume_invariants():
    fv = FeatureVolume(np.zeros((5, 2, 2, 2)))
    assert fv.channels == 5
    with pytest.raises(ValueError):
        FeatureVolume(np.zeros((2, 2, 2)))


def test_write_smallest_volume(tmp_path):
    path = tmp_path / "tiny.mvf"
    write_mvf(path, Volume(np.zeros((1, 1, 1))))
    raw = path.read_bytes()
    assert len(raw) == 36  # 4 magic + 1 dtype + 1 ndim + 2 pad + 24 dims + 4 payload
    assert raw[:4] == b"MVF1"
    assert raw[4] == 0 and raw[5] == 3
    assert raw[6:8] == b"\x00\x00"
    assert struct.unpack("<3Q", raw[8:32]) == (1, 1, 1)
    assert raw[32:] == b"\x00\x00\x00\x00"


def test_write_field_header(tmp_path):
    path = tmp_path / "f.mvf"
    write_mvf(path, DisplacementField.zeros((2, 2, 2)))
    raw = path.read_bytes()
    assert raw[5] == 4
    assert struct.unpack("<4Q", raw[8:40]) == (3, 2, 2, 2)
    assert len(raw) - 40 == 96  # 24 f32 vectors


def test_feature_roundtrip_payload_identical(tmp_path, rng):
    fv = FeatureVolume(rng.random((4, 8, 8, 8)).astype(np.float32))
    p1 = tmp_path / "a.mvf"
    p2 = tmp_path / "b.mvf"
    write_mvf(p1, fv)
    back = read_mvf(p1)
    assert isinstance(back, FeatureVolume)
    write_mvf(p2, back)
    assert p1.read_bytes() == p2.read_bytes()


def test_label_roundtrip_exact(tmp_path):
    labels = np.zeros((3, 3, 3), dtype=np.int32)
    labels[1] = 1
    labels[2] = 2
    lv = LabelVolume(labels)
    path = tmp_path / "l.mvf"
    write_mvf(path, lv)
    back = read_mvf(path)
    assert isinstance(back, LabelVolume)
    assert np.array_equal(back.labels, labels)
    assert back.label_set == (0, 1, 2)


def test_volume_spacing_sidecar(tmp_path, rng):
    v = Volume(rng.random((3, 4, 5)), spacing=(1.8, 1.8, 10.0))
    path = tmp_path / "v.mvf"
    write_mvf(path, v)
    assert (tmp_path / "v.meta.json").exists()
    back = read_mvf(path)
    assert back.spacing == (1.8, 1.8, 10.0)
    (tmp_path / "v.meta.json").unlink()
    assert read_mvf(path).spacing == (1.0, 1.0, 1.0)


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.mvf"
    good = b"MVF1" + bytes([0, 3, 0, 0]) + struct.pack("<3Q", 1, 1, 1) + b"\x00" * 4
    path.write_bytes(b"MVF0" + good[4:])
    with pytest.raises(MVFError, match="magic"):
        read_mvf(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "trunc.mvf"
    good = b"MVF1" + bytes([0, 3, 0, 0]) + struct.pack("<3Q", 2, 2, 2) + b"\x00" * 32
    path.write_bytes(good[:-8])
    with pytest.raises(MVFError, match="truncated"):
        read_mvf(path)


def test_unknown_dtype_code(tmp_path):
    path = tmp_path / "dt.mvf"
    path.write_bytes(b"MVF1" + bytes([9, 3, 0, 0]) + struct.pack("<3Q", 1, 1, 1) + b"\x00" * 4)
    with pytest.raises(MVFError, match="dtype"):
        read_mvf(path)


def test_dims_overflow(tmp_path):
    path = tmp_path / "ovf.mvf"
    path.write_bytes(b"MVF1" + bytes([0, 3, 0, 0]) + struct.pack("<3Q", 2**40, 2**40, 2))
    with pytest.raises(MVFError, match="overflow"):
        read_mvf(path)


def test_field_kind_required_for_vector_reads(tmp_path, rng):
    f = DisplacementField(rng.normal(size=(3, 2, 3, 4)))
    path = tmp_path / "f.mvf"
    write_mvf(path, f)
    auto = read_mvf(path)
    assert isinstance(auto, FeatureVolume)  # 4D defaults to features
    field = read_mvf(path, kind="field")
    assert isinstance(field, DisplacementField)
    assert np.allclose(field.vectors, f.vectors, atol=1e-6)


def test_kind_mismatch_errors(tmp_path, rng):
    vol_path = tmp_path / "v.mvf"
    write_mvf(vol_path, Volume(rng.random((2, 2, 2))))
    with pytest.raises(MVFError):
        read_mvf(vol_path, kind="features")
    with pytest.raises(MVFError):
        read_mvf(vol_path, kind="field")
    feat_path = tmp_path / "f.mvf"
    write_mvf(feat_path, FeatureVolume(rng.random((2, 2, 2, 2))))
    with pytest.raises(MVFError):
        read_mvf(feat_path, kind="field")  # leading dim is 2, not 3


@st.composite
def tensors(draw):
    kind = draw(st.sampled_from(["volume", "features", "labels", "field"]))
    dims = tuple(draw(st.integers(1, 5)) for _ in range(3))
    rng = np.random.default_rng(draw(st.integers(0, 2**31)))
    if kind == "volume":
        return Volume(rng.normal(size=dims))
    if kind == "features":
        c = draw(st.integers(1, 4))
        return FeatureVolume(rng.normal(size=(c, *dims)))
    if kind == "labels":
        return LabelVolume(rng.integers(0, 4, dims))
    return DisplacementField(rng.normal(size=(3, *dims)))


@given(tensors())
@settings(max_examples=40, deadline=None)
def test_file_roundtrip_byte_identity(tmp_path_factory, tensor):
    # write -> read -> write reproduces the file byte for byte
    base = tmp_path_factory.mktemp("mvf")
    p1 = base / "t1.mvf"
    p2 = base / "t2.mvf"
    write_mvf(p1, tensor)
    kind = "field" if isinstance(tensor, DisplacementField) else "auto"
    write_mvf(p2, read_mvf(p1, kind=kind))
    assert p1.read_bytes() == p2.read_bytes()
