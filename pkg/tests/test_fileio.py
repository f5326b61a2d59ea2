from __future__ import annotations

import numpy as np
import pytest

from hybridrecon.fileio import (load_dataset, read_pgm, read_ppm, read_raw, save_dataset, sha256_file,
                                write_pgm, write_ppm, write_raw)
from hybridrecon.scenes import flatland_rig, generate_dataset, get_scene, spiral_rig


def test_ppm_pgm_roundtrip(tmp_path, rng):
    img = np.round(rng.uniform(0, 1, (5, 7, 3)) * 255) / 255
    write_ppm(tmp_path / "a.ppm", img)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")
    assert np.allclose(read_ppm(tmp_path / "a.ppm"), img, atol=1e-12)
    gray = np.array([0.0, 1.0, 0.5, 2.0])
    write_pgm(tmp_path / "m.pgm", gray)
    assert np.allclose(read_pgm(tmp_path / "m.pgm")[0], [0, 1, 128 / 255, 1])


def test_raw_is_lossless(tmp_path, rng):
    img = rng.normal(size=(3, 4, 3))
    write_raw(tmp_path / "x.f64", img)
    assert np.array_equal(read_raw(tmp_path / "x.f64"), img)
    (tmp_path / "bad.f64").write_bytes(b"nonsense" * 4)
    with pytest.raises(ValueError):
        read_raw(tmp_path / "bad.f64")


@pytest.mark.parametrize("name,rig", [("flat2d-lshape", flatland_rig(6, 32)), ("bowl3d", spiral_rig(3, 12))])
def test_dataset_roundtrip(tmp_path, name, rig):
    ds = generate_dataset(get_scene(name), seed=2, rig=rig)
    paths = save_dataset(ds, tmp_path / "d")
    assert paths[0].name == "scene.json" and len(paths) == 1 + 3 * len(rig)
    back = load_dataset(tmp_path / "d")
    assert back.scene.to_dict() == ds.scene.to_dict() and back.seed == 2
    for a, b in zip(ds.images, back.images):
        assert np.array_equal(a, b)
    for a, b in zip(ds.masks, back.masks):
        assert np.array_equal(a, b)
    for ca, cb in zip(ds.cameras, back.cameras):
        oa, da = ca.rays()
        ob, db = cb.rays()
        assert np.array_equal(oa, ob) and np.array_equal(da, db)


def test_save_is_byte_deterministic(tmp_path):
    ds = generate_dataset(get_scene("flat2d-disk"), seed=0, rig=flatland_rig(4, 16))
    a = save_dataset(ds, tmp_path / "a")
    b = save_dataset(generate_dataset(get_scene("flat2d-disk"), seed=0, rig=flatland_rig(4, 16)), tmp_path / "b")
    assert [sha256_file(p) for p in a] == [sha256_file(p) for p in b]


def test_load_missing_directory(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path)
