import json

import numpy as np
import pytest
from PIL import Image

from dynamite import data
from dynamite.data import Dataset, GenParams, GenerationError, DatasetError


def test_generation_deterministic():
    d1 = data.generate(7, 5)
    d2 = data.generate(7, 5)
    for a, b in zip(d1, d2):
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.labels, b.labels)
        assert a.objects == b.objects


def test_single_disc():
    params = GenParams(min_objects=1, max_objects=1, shapes=("disc",))
    d = data.generate(3, 4, params)
    for s in d:
        assert set(np.unique(s.labels)) == {0, 1}
        assert s.objects[0]["shape"] == "disc"


def test_min_area_respected():
    params = GenParams()
    d = data.generate(11, 100, params)
    floor = params.min_area_fraction * params.size**2
    for s in d:
        for obj in s.objects:
            assert (s.labels == obj["id"]).sum() >= floor


def test_labels_contiguous_partition():
    d = data.generate(5, 20)
    for s in d:
        present = set(np.unique(s.labels)) - {0}
        assert present == set(range(1, s.n_objects + 1))


def test_impossible_constraints_raise():
    params = GenParams(min_objects=4, max_objects=4, min_area_fraction=0.4,
                       occlusion=False, max_retries=10)
    with pytest.raises(GenerationError):
        data.generate(0, 1, params)


def test_no_occlusion_means_disjoint_shapes():
    params = GenParams(min_objects=2, max_objects=3, occlusion=False,
                       max_retries=400)
    d = data.generate(9, 5, params)
    for s in d:
        # with occlusion off, each object's mask is its full drawn shape
        assert s.n_objects >= 2


def test_round_trip_bit_exact(tmp_path):
    d = data.generate(1, 10)
    data.save(d, tmp_path / "ds")
    loaded = data.load(tmp_path / "ds")
    assert len(loaded) == len(d)
    for a, b in zip(d, loaded):
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.labels, b.labels)
        assert [o["id"] for o in a.objects] == [o["id"] for o in b.objects]


def test_manifest_counts(tmp_path):
    d = data.generate(2, 7)
    data.save(d, tmp_path / "ds")
    manifest = json.loads((tmp_path / "ds" / "manifest.json").read_text())
    assert len(manifest["samples"]) == 7
    assert len(data.load(tmp_path / "ds")) == 7


def test_tampered_checksum_rejected(tmp_path):
    d = data.generate(4, 2)
    data.save(d, tmp_path / "ds")
    target = tmp_path / "ds" / "00000_img.png"
    img = np.asarray(Image.open(target)).copy()
    img[0, 0] = 255 - img[0, 0]
    Image.fromarray(img).save(target)
    with pytest.raises(DatasetError, match="checksum"):
        data.load(tmp_path / "ds")


def test_missing_manifest(tmp_path):
    with pytest.raises(DatasetError, match="manifest"):
        data.load(tmp_path / "nope")


def test_import_external_pairs(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 255, size=(32, 32, 3), dtype=np.uint8)
    labels = np.zeros((32, 32), dtype=np.uint16)
    labels[4:10, 4:10] = 1
    Image.fromarray(img).save(tmp_path / "i.png")
    Image.fromarray(labels).save(tmp_path / "l.png")
    ds = data.import_pairs([(tmp_path / "i.png", tmp_path / "l.png")], tmp_path / "out")
    assert len(ds) == 1
    reloaded = data.load(tmp_path / "out")
    assert np.array_equal(reloaded[0].labels, labels.astype(np.int32))
    assert reloaded[0].objects[0]["shape"] == "imported"
