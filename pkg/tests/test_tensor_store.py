from __future__ import annotations

import json
import os
import struct

import numpy as np
import pytest

from objdiscover.tensor_store import (
    DatasetManifest,
    FeatureTensor,
    GlobalDescriptor,
    GroundTruthBox,
    ImageRecord,
    IoFailure,
    MalformedHeader,
    NonFiniteValue,
    ParseError,
    ShapeMismatch,
    load_array,
    load_global_descriptor,
    load_manifest,
    load_tensor,
    save_global_descriptor,
    save_manifest,
    save_tensor,
    validate_manifest,
)
from objdiscover.geometry import Box


def random_tensor(rng, h=None, w=None, d=None) -> FeatureTensor:
    h = h or int(rng.integers(1, 9))
    w = w or int(rng.integers(1, 9))
    d = d or int(rng.integers(1, 17))
    return FeatureTensor.from_array(rng.normal(size=(h, w, d)).astype(np.float32), layer_tag="t")


def test_round_trip_identity(tmp_path, rng):
    t = random_tensor(rng)
    save_tensor(t, tmp_path / "t.npy")
    back = load_tensor(tmp_path / "t.npy", layer_tag="t")
    assert back.values.dtype == np.float32
    np.testing.assert_array_equal(back.values, t.values)


def test_round_trip_bit_exact_many(tmp_path, rng):
    # Byte-comparison oracle: write, read, write again, compare raw bytes.
    for case in range(1000):
        t = random_tensor(rng)
        p1, p2 = tmp_path / f"a{case}.npy", tmp_path / f"b{case}.npy"
        save_tensor(t, p1)
        save_tensor(load_tensor(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()


def test_numpy_interop(tmp_path, rng):
    t = random_tensor(rng, 4, 5, 6)
    save_tensor(t, tmp_path / "ours.npy")
    via_numpy = np.load(tmp_path / "ours.npy")
    np.testing.assert_array_equal(via_numpy, t.values)
    np.save(tmp_path / "theirs.npy", t.values)
    back = load_tensor(tmp_path / "theirs.npy")
    np.testing.assert_array_equal(back.values, t.values)


def test_shape_mismatch_on_short_payload(tmp_path):
    arr = np.ones((2, 2, 3), dtype=np.float32)
    save_tensor(FeatureTensor.from_array(arr), tmp_path / "t.npy")
    raw = (tmp_path / "t.npy").read_bytes()
    (tmp_path / "bad.npy").write_bytes(raw[:-4])  # 11 floats for a (2,2,3) header
    with pytest.raises(ShapeMismatch) as err:
        load_tensor(tmp_path / "bad.npy")
    assert "bad.npy" in str(err.value)


def test_nonfinite_is_a_hard_error(tmp_path):
    arr = np.ones((2, 2, 2), dtype=np.float32)
    arr[1, 0, 1] = np.nan
    np.save(tmp_path / "nan.npy", arr)
    with pytest.raises(NonFiniteValue) as err:
        load_tensor(tmp_path / "nan.npy")
    assert "offset" in str(err.value)


def test_malformed_headers_never_return_tensors(tmp_path, rng):
    good = (tmp_path / "good.npy")
    save_tensor(random_tensor(rng, 3, 3, 4), good)
    raw = bytearray(good.read_bytes())
    for case in range(200):
        corrupted = bytearray(raw)
        mode = case % 4
        if mode == 0:
            corrupted[case % 6] ^= 0xFF  # break the magic
        elif mode == 1:
            corrupted[6] = 9  # bogus version
        elif mode == 2:
            pos = 10 + case % 40
            corrupted[pos] = rng.integers(0, 256)
        else:
            struct.pack_into("<H", corrupted, 8, 1 + case)  # lie about header length
        bad = tmp_path / "fuzz.npy"
        bad.write_bytes(bytes(corrupted))
        try:
            t = load_tensor(bad)
        except (MalformedHeader, ShapeMismatch, NonFiniteValue):
            continue
        t.validate()  # if it loaded anyway, the invariants must hold


def test_save_to_readonly_dir_raises(tmp_path):
    ro = tmp_path / "ro"
    ro.mkdir()
    os.chmod(ro, 0o500)
    try:
        try:
            (ro / "probe").write_text("x")
        except OSError:
            pass
        else:
            pytest.skip("running with privileges that ignore directory modes")
        with pytest.raises(IoFailure):
            save_tensor(FeatureTensor.from_array(np.ones((1, 1, 1), dtype=np.float32)), ro / "t.npy")
    finally:
        os.chmod(ro, 0o700)


def test_save_to_missing_parent_raises(tmp_path):
    with pytest.raises(IoFailure):
        save_tensor(FeatureTensor.from_array(np.ones((1, 1, 1), dtype=np.float32)),
                    tmp_path / "nope" / "t.npy")


def test_concurrent_saves_to_distinct_paths(tmp_path, rng):
    from concurrent.futures import ThreadPoolExecutor

    tensors = [random_tensor(rng) for _ in range(16)]
    paths = [tmp_path / f"c{i}.npy" for i in range(16)]
    with ThreadPoolExecutor(max_workers=8) as pool:
        list(pool.map(lambda tp: save_tensor(tp[0], tp[1]), zip(tensors, paths)))
    for t, p in zip(tensors, paths):
        np.testing.assert_array_equal(load_tensor(p).values, t.values)


def test_descriptor_round_trip(tmp_path, rng):
    d = GlobalDescriptor.from_vector("img", rng.normal(size=64).astype(np.float32))
    save_global_descriptor(d, tmp_path / "d.npy")
    back = load_global_descriptor(tmp_path / "d.npy", "img")
    np.testing.assert_array_equal(back.vector, d.vector)
    assert back.norm == pytest.approx(float(np.linalg.norm(d.vector.astype(np.float64))), rel=1e-5)


def _manifest_fixture(tmp_path, rng, n=3):
    records = []
    for idx in range(n):
        image_id = f"img{idx}"
        save_tensor(random_tensor(rng, 4, 4, 3), tmp_path / f"{image_id}.npy")
        save_global_descriptor(
            GlobalDescriptor.from_vector(image_id, rng.normal(size=8).astype(np.float32)),
            tmp_path / f"{image_id}_desc.npy",
        )
        records.append(
            ImageRecord(
                image_id=image_id,
                original_width=100,
                original_height=80,
                tensor_paths={"feat": f"{image_id}.npy"},
                descriptor_path=f"{image_id}_desc.npy",
                ground_truth=[GroundTruthBox(Box(0, 0, 50, 40), "thing")],
                class_label="thing",
            )
        )
    return DatasetManifest(images=records, root=tmp_path)


def test_valid_manifest_round_trip(tmp_path, rng):
    manifest = _manifest_fixture(tmp_path, rng)
    save_manifest(manifest, tmp_path / "manifest.json")
    back = load_manifest(tmp_path / "manifest.json")
    assert validate_manifest(back) == []
    assert [r.image_id for r in back.images] == [r.image_id for r in manifest.images]
    assert back.images[0].ground_truth[0].box == Box(0, 0, 50, 40)


def test_duplicate_id_reported(tmp_path, rng):
    manifest = _manifest_fixture(tmp_path, rng)
    manifest.images[1].image_id = manifest.images[0].image_id
    violations = validate_manifest(manifest)
    assert any("duplicate" in v for v in violations)


def test_out_of_bounds_ground_truth_reported(tmp_path, rng):
    manifest = _manifest_fixture(tmp_path, rng)
    manifest.images[2].ground_truth = [GroundTruthBox(Box(0, 0, 101, 40))]
    violations = validate_manifest(manifest)
    assert any("exceeds image bounds" in v for v in violations)


def test_unresolvable_path_reported(tmp_path, rng):
    manifest = _manifest_fixture(tmp_path, rng)
    manifest.images[0].tensor_paths["feat"] = "missing.npy"
    violations = validate_manifest(manifest)
    assert any("does not resolve" in v for v in violations)


def test_parse_error_has_context(tmp_path):
    bad = tmp_path / "m.json"
    bad.write_text('{"images": [{"image_id": 5}]}', encoding="utf-8")
    with pytest.raises(ParseError) as err:
        load_manifest(bad)
    assert "image_id" in str(err.value)
    bad.write_text("{not json", encoding="utf-8")
    with pytest.raises(ParseError) as err:
        load_manifest(bad)
    assert "line 1" in str(err.value)


def test_manifest_relocatable(tmp_path, rng):
    manifest = _manifest_fixture(tmp_path, rng)
    save_manifest(manifest, tmp_path / "manifest.json")
    moved = tmp_path / "moved"
    moved.mkdir()
    for p in tmp_path.iterdir():
        if p.suffix in (".npy", ".json"):
            (moved / p.name).write_bytes(p.read_bytes())
    back = load_manifest(moved / "manifest.json")
    assert validate_manifest(back) == []
