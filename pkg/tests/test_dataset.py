import numpy as np
import pytest

from simgrasp.dataset import (
    DatasetError,
    decode_image_u8,
    encode_image_u8,
    export_dataset,
    load_dataset,
)
from simgrasp.scenes import STYLE_REAL, STYLE_SIM, SceneSpec, generate_scene, render


@pytest.fixture(scope="module")
def small_dataset():
    spec = SceneSpec(seed=3, object_count_range=(1, 2), clutter_level=0.5)
    scenes = [generate_scene(spec, seed=s) for s in range(4)]
    images = [{"sim": render(s, STYLE_SIM), "real": render(s, STYLE_REAL)} for s in scenes]
    return scenes, images


def test_round_trip(tmp_path, small_dataset):
    scenes, images = small_dataset
    export_dataset(scenes, images, tmp_path)
    scenes2, images2, manifest = load_dataset(tmp_path)
    assert len(manifest.entries) == len(scenes)
    for a, b in zip(scenes, scenes2):
        assert np.array_equal(a.semantic_map, b.semantic_map)
        assert np.array_equal(a.instance_map, b.instance_map)
        assert a.objects == b.objects
        assert (a.style_tag, a.seed, a.num_classes) == (b.style_tag, b.seed, b.num_classes)
    # Images round-trip exactly once quantized to the 8-bit encoding.
    for orig, loaded in zip(images, images2):
        for style in ("sim", "real"):
            assert np.array_equal(decode_image_u8(encode_image_u8(orig[style])), loaded[style])


def test_reexport_is_exact_fixed_point(tmp_path, small_dataset):
    scenes, images = small_dataset
    export_dataset(scenes, images, tmp_path / "a")
    s2, i2, m2 = load_dataset(tmp_path / "a")
    export_dataset(s2, i2, tmp_path / "b")
    s3, i3, m3 = load_dataset(tmp_path / "b")
    assert m2.to_json() == m3.to_json()
    for a, b in zip(i2, i3):
        assert np.array_equal(a["sim"], b["sim"])
        assert np.array_equal(a["real"], b["real"])


def test_semantic_map_bytewise(tmp_path, small_dataset):
    scenes, images = small_dataset
    export_dataset(scenes, images, tmp_path)
    _, _, manifest = load_dataset(tmp_path)
    k = 2
    from simgrasp.dataset import load_label
    reloaded = load_label(tmp_path / manifest.entries[k].semantic_map)
    assert reloaded.dtype == np.uint8
    assert np.array_equal(reloaded, scenes[k].semantic_map)
    assert reloaded.tobytes() == scenes[k].semantic_map.astype(np.uint8).tobytes()


def test_entry_count_and_missing_style(tmp_path, small_dataset):
    scenes, images = small_dataset
    stripped = [{"sim": None, "real": p["real"]} for p in images]
    manifest = export_dataset(scenes, stripped, tmp_path)
    assert len(manifest.entries) == len(scenes)
    assert all(e.sim_image is None for e in manifest.entries)
    _, images2, _ = load_dataset(tmp_path)
    assert all(p["sim"] is None and p["real"] is not None for p in images2)


def test_length_mismatch_raises(tmp_path, small_dataset):
    scenes, images = small_dataset
    with pytest.raises(DatasetError):
        export_dataset(scenes, images[:-1], tmp_path)


def test_manifest_schema_version(tmp_path, small_dataset):
    scenes, images = small_dataset
    export_dataset(scenes, images, tmp_path)
    import json
    d = json.loads((tmp_path / "manifest.json").read_text())
    assert d["schema_version"] == "1"
    d["schema_version"] = "99"
    (tmp_path / "manifest.json").write_text(json.dumps(d))
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)
