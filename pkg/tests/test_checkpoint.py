import json
import struct

import numpy as np
import pytest

from dproto import checkpoint
from dproto.checkpoint import MAGIC, load, load_bytes, save, save_bytes
from dproto.errors import DataError
from dproto.trainer import push_prototypes


def _header(data: bytes) -> dict:
    (length,) = struct.unpack("<Q", data[len(MAGIC):len(MAGIC) + 8])
    return json.loads(data[len(MAGIC) + 8:len(MAGIC) + 8 + length])


def test_bytes_are_stable_across_a_round_trip(model):
    model.epochs_trained = 3
    first = save_bytes(model)
    assert first.startswith(MAGIC)
    assert save_bytes(load_bytes(first)) == first


def test_pushed_model_keeps_its_provenance(model, data):
    push_prototypes(model, data, augmentations=2, seed=0)
    model.epochs_trained = 1
    first = save_bytes(model)
    reloaded = load_bytes(first)
    assert save_bytes(reloaded) == first
    assert reloaded.is_pushed
    for a, b in zip(model.sources, reloaded.sources):
        assert (a.image_id, list(a.mask_ids), a.augmentations) == (b.image_id, list(b.mask_ids), b.augmentations)
    header = _header(first)
    assert header["format_version"] == 1
    assert header["class_names"] == ["gauche", "droite"]


def test_every_variant_mask_of_a_push_is_kept(model, data):
    push_prototypes(model, data, augmentations=3, seed=1)
    model.epochs_trained = 1
    first = save_bytes(model)
    header = _header(first)
    assert set(header["tensors"]) >= {"masks", "prototype_classes"}
    assert "provenance" not in header["tensors"]
    for saved, source in zip(header["prototype_sources"], model.sources):
        assert len(saved["mask_ids"]) == 3
        assert saved["mask_ids"] == list(source.mask_ids)
    assert [list(s.mask_ids) for s in load_bytes(first).sources] == [list(s.mask_ids) for s in model.sources]


def test_reloaded_model_predicts_the_same(model, data, tmp_path):
    model.epochs_trained = 1
    path = save(model, tmp_path / "model.dproto")
    assert path.read_bytes()[:8] == b"DPROTO1\n"
    reloaded = load(path)
    np.testing.assert_array_equal(reloaded.predict_proba(data.images), model.predict_proba(data.images))
    np.testing.assert_array_equal(reloaded.prototypes.data, model.prototypes.data)
    assert reloaded.epochs_trained == 1


def test_tensor_directory_partitions_the_payload(model):
    data = save_bytes(model)
    header = _header(data)
    entries = sorted(header["tensors"].values(), key=lambda e: e["offset"])
    position = 0
    for entry in entries:
        assert entry["offset"] == position
        assert entry["length"] == 8 * int(np.prod(entry["shape"]))
        position += entry["length"]
    head_len = struct.unpack("<Q", data[8:16])[0]
    assert len(data) == 16 + head_len + position


@pytest.mark.parametrize("mutate", [
    lambda d: b"XPROTO1\n" + d[8:],
    lambda d: d[:12],
    lambda d: d[:40],
    lambda d: d[:-8],
    lambda d: d + b"\x00",
])
def test_corrupted_checkpoints_are_rejected(model, mutate):
    with pytest.raises(DataError):
        load_bytes(mutate(save_bytes(model)))


def test_unknown_version_is_rejected(model):
    data = save_bytes(model)
    header = _header(data)
    header["format_version"] = 2
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with pytest.raises(DataError, match="version"):
        load_bytes(MAGIC + struct.pack("<Q", len(head)) + head + data[16 + struct.unpack("<Q", data[8:16])[0]:])


def test_missing_file(tmp_path):
    with pytest.raises(DataError, match="introuvable"):
        checkpoint.load(tmp_path / "nowhere.dproto")
