import hashlib
import json

import numpy as np
import pytest
from PIL import Image

from dproto.dataset import (
    BACKGROUND_LEVEL,
    SyntheticSpec,
    generate,
    ingest_folder,
    load_manifest,
    shape_mask,
)
from dproto.errors import DataError, MalformedImageError, ManifestError
from dproto.trainer import LabeledImages

SMALL = SyntheticSpec(classes=4, per_class=5, image_size=24, clutter=1, noise=0.02, seed=7)


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_generation_is_byte_identical_for_the_same_seed(tmp_path):
    generate(SMALL, tmp_path / "a")
    generate(SMALL, tmp_path / "b", threads=3)
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")


def test_split_counts(tmp_path):
    manifest = generate(SMALL, tmp_path / "d")
    assert len(manifest) == 20
    assert len(manifest.split("train")) == 16
    assert len(manifest.split("test")) == 4
    assert sorted(manifest.labels("test")) == [0, 1, 2, 3]
    assert manifest.class_names == ["square", "circle", "triangle", "cross"]


def test_clean_images_only_differ_from_background_inside_the_mask(tmp_path):
    spec = SyntheticSpec(classes=4, per_class=2, image_size=20, clutter=0, noise=0.0, seed=1)
    manifest = generate(spec, tmp_path / "d")
    for entry in manifest:
        image = manifest.load_image(entry)
        mask = manifest.load_mask(entry)
        foreground = np.any(np.abs(image - BACKGROUND_LEVEL / 255.0) > 1e-9, axis=2)
        assert foreground.any()
        assert not (foreground & ~mask).any()


def test_masks_match_a_rerender_of_the_recorded_shape(tmp_path):
    manifest = generate(SMALL, tmp_path / "d")
    for entry in manifest:
        rerender = shape_mask(entry.shape, SMALL.image_size)
        np.testing.assert_array_equal(manifest.load_mask(entry), rerender)


def test_round_trip_keeps_labels_and_masks(tmp_path):
    generated = generate(SMALL, tmp_path / "d")
    loaded = load_manifest(tmp_path / "d" / "manifest.json")
    assert loaded.labels() == generated.labels()
    digest = lambda m, e: hashlib.sha256(m.load_mask(e).tobytes()).hexdigest()  # noqa: E731
    assert [digest(loaded, e) for e in loaded] == [digest(generated, e) for e in generated]
    data = LabeledImages.from_manifest(loaded, "train")
    assert data.images.shape == (16, 24, 24, 3)
    assert data.images.min() >= 0.0 and data.images.max() <= 1.0


def test_refuses_non_empty_directory(tmp_path):
    generate(SMALL, tmp_path / "d")
    with pytest.raises(DataError):
        generate(SMALL, tmp_path / "d")
    generate(SMALL, tmp_path / "d", force=True)


@pytest.mark.parametrize("kwargs", [{"classes": 0}, {"classes": 5}, {"image_size": 8}, {"test_fraction": 1.0}])
def test_invalid_specs(kwargs, tmp_path):
    with pytest.raises(ValueError):
        generate(SyntheticSpec(**kwargs), tmp_path / "d")


def test_missing_file_is_named(tmp_path):
    generate(SMALL, tmp_path / "d")
    missing = tmp_path / "d" / "images" / "00003.ppm"
    missing.unlink()
    with pytest.raises(DataError, match="00003.ppm"):
        load_manifest(tmp_path / "d")


def test_truncated_image_reports_byte_offset(tmp_path):
    generate(SMALL, tmp_path / "d")
    victim = tmp_path / "d" / "images" / "00000.ppm"
    victim.write_bytes(victim.read_bytes()[:100])
    with pytest.raises(MalformedImageError, match="octet 100"):
        load_manifest(tmp_path / "d")


def test_unsupported_version(tmp_path):
    generate(SMALL, tmp_path / "d")
    path = tmp_path / "d" / "manifest.json"
    data = json.loads(path.read_text(encoding="utf-8"))
    data["format_version"] = 99
    path.write_text(json.dumps(data), encoding="utf-8")
    with pytest.raises(ManifestError):
        load_manifest(path)


def test_missing_manifest(tmp_path):
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "nowhere.json")


def test_ingest_class_folders(tmp_path):
    root = tmp_path / "raw"
    rng = np.random.default_rng(0)
    for name in ("chats", "chiens"):
        (root / name).mkdir(parents=True)
        for i in range(3):
            pixels = (rng.uniform(size=(30, 40, 3)) * 255).astype(np.uint8)
            Image.fromarray(pixels).save(root / name / f"img{i}.png")
    mask = np.zeros((30, 40), dtype=np.uint8)
    mask[5:20, 10:30] = 255
    Image.fromarray(mask).save(root / "chats" / "img0_mask.png")
    (root / "chiens" / ".cache.png").write_bytes(b"ignored")

    manifest = ingest_folder(root, tmp_path / "out", image_size=16, test_fraction=0.0, seed=1)
    assert manifest.class_names == ["chats", "chiens"]
    assert len(manifest) == 6
    assert sum(e.mask is not None for e in manifest) == 1
    reloaded = load_manifest(tmp_path / "out")
    entry = next(e for e in reloaded if e.mask is not None)
    assert reloaded.load_image(entry).shape == (16, 16, 3)
    assert reloaded.load_mask(entry).any()


def test_ingest_requires_class_folders(tmp_path):
    (tmp_path / "raw").mkdir()
    with pytest.raises(DataError):
        ingest_folder(tmp_path / "raw", tmp_path / "out")
