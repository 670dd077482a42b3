"""Manifest+blob container: roundtrips, integrity checks, dataset persistence."""
import json
import os

import numpy as np
import pytest

from hoigen.container import (load_canonical, load_container,
                              load_contact_labels, load_dataset,
                              read_manifest, save_canonical, save_container,
                              save_contact_labels, save_dataset)
from hoigen.errors import (ArrayShapeError, ContractError, DataFormatError,
                           PayloadError, SchemaVersionError)


@pytest.fixture
def arrays():
    rng = np.random.default_rng(0)
    return {"weights": rng.standard_normal((4, 7)).astype(np.float32),
            "ids": np.arange(12, dtype=np.int32).reshape(3, 4),
            "scalar_row": np.array([3.5], dtype=np.float32)}


def test_roundtrip_is_bitwise_and_order_preserving(tmp_path, arrays):
    path = str(tmp_path / "box")
    save_container(path, arrays, "unit-test", meta={"note": "hi", "k": 3})
    loaded, meta = load_container(path, kind="unit-test")
    assert list(loaded) == list(arrays)
    for name in arrays:
        assert loaded[name].dtype == arrays[name].dtype
        assert np.array_equal(loaded[name], arrays[name])
    assert meta == {"note": "hi", "k": 3}


def test_kind_mismatch_rejected(tmp_path, arrays):
    path = str(tmp_path / "box")
    save_container(path, arrays, "unit-test")
    with pytest.raises(DataFormatError):
        load_container(path, kind="something-else")


def test_unsupported_dtype_rejected(tmp_path):
    with pytest.raises(ContractError):
        save_container(str(tmp_path / "bad"),
                       {"x": np.zeros(3, dtype=np.float64)}, "unit-test")


def test_corrupted_blob_fails_checksum(tmp_path, arrays):
    path = str(tmp_path / "box")
    save_container(path, arrays, "unit-test")
    blob = os.path.join(path, "arrays.bin")
    raw = bytearray(open(blob, "rb").read())
    raw[5] ^= 0xFF
    open(blob, "wb").write(bytes(raw))
    with pytest.raises(PayloadError):
        load_container(path)
    # corruption is tolerated only when the caller opts out of verification
    loaded, _ = load_container(path, verify_checksum=False)
    assert set(loaded) == set(arrays)


def test_truncated_blob_rejected(tmp_path, arrays):
    path = str(tmp_path / "box")
    save_container(path, arrays, "unit-test")
    blob = os.path.join(path, "arrays.bin")
    raw = open(blob, "rb").read()
    open(blob, "wb").write(raw[:-8])
    with pytest.raises(PayloadError):
        load_container(path)


def test_manifest_validation(tmp_path, arrays):
    path = str(tmp_path / "box")
    save_container(path, arrays, "unit-test")
    mpath = os.path.join(path, "manifest.json")

    manifest = json.load(open(mpath))
    manifest["schema_version"] = 999
    json.dump(manifest, open(mpath, "w"))
    with pytest.raises(SchemaVersionError):
        read_manifest(path)

    manifest["schema_version"] = 1
    del manifest["blob_bytes"]
    json.dump(manifest, open(mpath, "w"))
    with pytest.raises(DataFormatError):
        read_manifest(path)

    open(mpath, "w").write("{not json")
    with pytest.raises(DataFormatError):
        read_manifest(path)

    os.remove(mpath)
    with pytest.raises(DataFormatError):
        load_container(path)


def test_declared_shape_mismatch_rejected(tmp_path, arrays):
    path = str(tmp_path / "box")
    save_container(path, arrays, "unit-test")
    mpath = os.path.join(path, "manifest.json")
    manifest = json.load(open(mpath))
    manifest["arrays"][0]["dtype"] = "float16"
    json.dump(manifest, open(mpath, "w"))
    with pytest.raises(ArrayShapeError):
        load_container(path, verify_checksum=False)


def test_dataset_roundtrip_bitwise(tmp_path, micro_world):
    path = str(tmp_path / "ds")
    save_dataset(path, micro_world)
    back = load_dataset(path)
    for split in ("train", "val", "test"):
        orig, loaded = micro_world.split(split), back.split(split)
        assert len(orig) == len(loaded)
        for a, b in zip(orig, loaded):
            assert a.sample_id == b.sample_id
            assert np.array_equal(a.body.frames, b.body.frames)
            assert np.array_equal(a.obj.frames, b.obj.frames)
            assert np.array_equal(a.geometry.points, b.geometry.points)
            assert np.array_equal(a.text.tokens, b.text.tokens)
            assert a.text.text == b.text.text
            assert a.contact_window == b.contact_window
            assert a.geometry.anchor_index == b.geometry.anchor_index


def test_dataset_manifest_count_mismatch_detected(tmp_path, micro_world):
    path = str(tmp_path / "ds")
    save_dataset(path, micro_world)
    mpath = os.path.join(path, "dataset.json")
    if not os.path.exists(mpath):
        candidates = [f for f in os.listdir(path) if f.endswith(".json")]
        mpath = os.path.join(path, candidates[0])
    root = json.load(open(mpath))
    root["splits"]["train"]["num_samples"] += 1
    json.dump(root, open(mpath, "w"))
    with pytest.raises(ArrayShapeError):
        load_dataset(path)


def test_canonical_namespace_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    by_action = {0: rng.standard_normal((8, 72)).astype(np.float32),
                 2: rng.standard_normal((8, 72)).astype(np.float32)}
    counts = {0: 5, 2: 7}
    path = str(tmp_path / "ds")
    save_canonical(path, by_action, counts)
    back, back_counts = load_canonical(path)
    assert back_counts == counts
    for a in by_action:
        assert np.array_equal(back[a], by_action[a])


def test_contact_namespace_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    labels = {"train": (np.arange(5, dtype=np.int32),
                        (rng.random((5, 16)) > 0.5).astype(np.int32))}
    path = str(tmp_path / "ds")
    save_contact_labels(path, labels, meta={"threshold_m": 0.05})
    back, meta = load_contact_labels(path)
    assert meta["threshold_m"] == 0.05
    assert np.array_equal(back["train"][0], labels["train"][0])
    assert np.array_equal(back["train"][1], labels["train"][1])
