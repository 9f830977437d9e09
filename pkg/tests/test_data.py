import json

import numpy as np
import pytest

from vlur.data import (
    DatasetManifest,
    build_synthetic_dataset,
    derive_seed,
    generate_clean_images,
    load_dataset,
    read_image,
    sample_negative_indices,
    sample_negatives,
    scan_cdd_layout,
    write_image,
)
from vlur.errors import DataError
from vlur.types import ALL_TYPES


def test_png_roundtrip_is_exact_on_8bit_values(tmp_path, rng):
    img = rng.integers(0, 256, (10, 12, 3)) / 255.0
    write_image(tmp_path / "a.png", img)
    np.testing.assert_array_equal(read_image(tmp_path / "a.png"), img)


def test_read_image_errors(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"not an image")
    with pytest.raises(DataError):
        read_image(tmp_path / "bad.png")


def test_derive_seed_distinct():
    seeds = {derive_seed(0, i, j) for i in range(20) for j in range(20)}
    assert len(seeds) == 400
    assert derive_seed(1, 2) == derive_seed(1, 2)


def test_synthetic_dataset_balanced_and_roundtrips(tiny_dataset):
    m = tiny_dataset
    assert len(m) == 22
    assert {t: m.types().count(t) for t in ALL_TYPES} == {t: 2 for t in ALL_TYPES}
    loaded, pairs = load_dataset(m.resolve(f"manifest_{m.split}.json"))
    assert loaded.to_dict()["entries"] == m.to_dict()["entries"]
    for clean, degraded, t in pairs:
        assert clean.shape == degraded.shape == (32, 32, 3)
    # every entry has its own seed
    seeds = [e.params["rng_seed"] for e in m.entries]
    assert len(set(seeds)) == len(seeds)


def test_manifest_json_layout(tiny_dataset):
    raw = json.loads(tiny_dataset.resolve("manifest_test.json").read_text())
    assert raw["root"] == "." and raw["split"] == "test"
    assert set(raw["entries"][0]) >= {"clean", "degraded", "type"}
    assert raw["entries"][0]["type"] in {t.value for t in ALL_TYPES}


def test_build_is_deterministic(tmp_path):
    clean = generate_clean_images(tmp_path / "c", 2, size=16, seed=1)
    a = build_synthetic_dataset(None, tmp_path / "a", 1, seed=3, clean_files=clean)
    b = build_synthetic_dataset(None, tmp_path / "b", 1, seed=3, clean_files=clean)
    for (c1, d1, _), (c2, d2, _) in zip(a.iter_pairs(), b.iter_pairs()):
        np.testing.assert_array_equal(d1, d2)


def test_build_empty_dir_errors(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(DataError):
        build_synthetic_dataset(tmp_path / "empty", tmp_path / "out", 1, seed=0)


def test_shape_mismatch_names_file(tmp_path, rng):
    write_image(tmp_path / "clear" / "x.png", rng.random((8, 8, 3)))
    write_image(tmp_path / "rain" / "x.png", rng.random((8, 10, 3)))
    m = scan_cdd_layout(tmp_path)
    with pytest.raises(DataError, match="x.png"):
        m.load_pair(0)


def test_cdd_layout_scan(tmp_path, rng):
    for name in ("a", "b"):
        write_image(tmp_path / "clear" / f"{name}.png", rng.random((8, 8, 3)))
    for folder in ("haze", "low_rain", "haze-low-snow", "lowlight", "README"):
        for name in ("a", "b"):
            write_image(tmp_path / folder / f"{name}.png", rng.random((8, 8, 3)))
    m, pairs = load_dataset(tmp_path)
    assert sorted({t.value for t in m.types()}) == ["haze", "haze+low+snow", "low", "low+rain"]
    assert len(list(pairs)) == 8


def test_missing_file_detected(tiny_dataset, tmp_path):
    d = tiny_dataset.to_dict()
    d["entries"][0]["degraded"] = "nope.png"
    m = DatasetManifest.from_dict(d)
    with pytest.raises(DataError):
        m.validate()


def test_negatives_contract(tiny_dataset):
    own = tiny_dataset.entries[3].type
    assert sample_negatives(3, tiny_dataset, 0, seed=1) == []
    idx = sample_negative_indices(3, tiny_dataset, 4, seed=1)
    assert all(tiny_dataset.entries[i].type != own for i in idx)
    assert idx == sample_negative_indices(3, tiny_dataset, 4, seed=1)
    imgs = sample_negatives(3, tiny_dataset, 2, seed=1)
    assert len(imgs) == 2 and imgs[0].shape == (32, 32, 3)
    with pytest.raises(DataError):
        sample_negative_indices(3, tiny_dataset, 21, seed=1)
