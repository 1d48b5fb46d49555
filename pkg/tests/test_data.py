import json

import numpy as np
import pytest
import torch
from PIL import Image

from freestyle.data import (DatasetSpec, generate, load_image, read_dataset, save_image, select_contents,
                            write_dataset)
from freestyle.errors import ConfigError, StorageError
from freestyle.metrics import band_energy_ratio


@pytest.fixture(scope="module")
def small():
    return generate(DatasetSpec(samples_per_cell=8, seed=3))


def test_counting(small):
    assert len(small) == 128
    cells, counts = np.unique(np.stack([small.shape_ids, small.style_ids], 1), axis=0, return_counts=True)
    assert len(cells) == 16 and (counts == 8).all()


def test_deterministic():
    a = generate(DatasetSpec(samples_per_cell=2, seed=5))
    b = generate(DatasetSpec(samples_per_cell=2, seed=5))
    c = generate(DatasetSpec(samples_per_cell=2, seed=6))
    assert torch.equal(a.images, b.images) and (a.masks == b.masks).all()
    assert not torch.equal(a.images, c.images)


def test_samples_valid(small):
    assert small.images.shape == (128, 3, 32, 32)
    assert torch.isfinite(small.images).all() and small.images.abs().max() <= 1
    assert small.masks.reshape(len(small), -1).any(1).all()
    # background outside the mask
    outside = small.images.permute(0, 2, 3, 1)[torch.from_numpy(~small.masks)]
    assert outside.abs().max() == 0


def test_position_jitter(small):
    centroids = [np.argwhere(m).mean(0) for m in small.masks[small.shape_ids == 0]]
    assert np.ptp(np.array(centroids), axis=0).max() > 1.0


def test_flat_vs_checker_band_energy(small):
    # texture only inside the mask; compare the mean high-band share
    flat = band_energy_ratio(small.images[torch.from_numpy(small.style_ids == 0)]).mean()
    checker = band_energy_ratio(small.images[torch.from_numpy(small.style_ids == 2)]).mean()
    assert checker - flat > 0.1


def test_spec_validation():
    with pytest.raises(ConfigError):
        DatasetSpec(num_styles=1)
    with pytest.raises(ConfigError):
        DatasetSpec(num_shapes=9)


def test_image_black_white(tmp_path):
    Image.fromarray(np.zeros((4, 5, 3), np.uint8)).save(tmp_path / "k.png")
    Image.fromarray(np.full((4, 5, 3), 255, np.uint8)).save(tmp_path / "w.png")
    assert torch.equal(load_image(tmp_path / "k.png"), torch.full((1, 3, 4, 5), -1.0))
    assert torch.equal(load_image(tmp_path / "w.png"), torch.full((1, 3, 4, 5), 1.0))


def test_image_roundtrip_bound_and_file_exact(tmp_path):
    x = torch.rand(3, 9, 7) * 2 - 1
    save_image(x, tmp_path / "a.png")
    y = load_image(tmp_path / "a.png")[0]
    assert (x - y).abs().max() <= 1 / 255 + 1e-7
    save_image(y, tmp_path / "b.png")
    assert (np.asarray(Image.open(tmp_path / "a.png")) == np.asarray(Image.open(tmp_path / "b.png"))).all()


def test_image_errors(tmp_path):
    with pytest.raises(StorageError, match="missing.png"):
        load_image(tmp_path / "missing.png")
    Image.fromarray(np.zeros((4, 4), np.uint8)).save(tmp_path / "g.png")
    with pytest.raises(StorageError, match="g.png"):
        load_image(tmp_path / "g.png")
    (tmp_path / "junk.png").write_bytes(b"not an image")
    with pytest.raises(StorageError):
        load_image(tmp_path / "junk.png")


def test_dataset_roundtrip(tmp_path):
    ds = generate(DatasetSpec(samples_per_cell=1))
    manifest = write_dataset(ds, tmp_path)
    rows = [json.loads(line) for line in manifest.read_text().splitlines()]
    assert len(rows) == len(ds) and set(rows[0]) == {"path", "shape_id", "style_id"}
    back = read_dataset(tmp_path)
    assert (back.images - ds.images).abs().max() <= 1 / 255 + 1e-7
    assert (back.style_ids == ds.style_ids).all() and (back.shape_ids == ds.shape_ids).all()
    assert (back.masks == ds.masks).all()


def test_split_stratified(small):
    train, test = small.split(0.25, seed=1)
    assert len(train) + len(test) == len(small)
    for k in range(4):
        assert (test.style_ids == k).sum() == 8


def test_select_contents_round_robin(small):
    picked = select_contents(small, 8)
    assert len(picked) == 8
    assert len(set(zip(picked.shape_ids.tolist(), picked.style_ids.tolist()))) == 8
