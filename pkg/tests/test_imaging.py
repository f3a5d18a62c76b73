import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from apparelreid.exceptions import ChannelError, ContractViolation, IngestionError
from apparelreid.imaging import (DatasetManifest, FileMaskProvider, ManifestRecord, PairRecord,
                                 augment_cloth, composite_mask, finetune_augment, hflip,
                                 load_and_normalize, load_mask, normalize_array, read_pairs,
                                 resized_crop, save_image, save_mask, to_uint8, write_pairs)

from conftest import random_images, random_masks


def _png(path, arr, mode="RGB"):
    Image.fromarray(arr, mode=mode).save(path)
    return path


def test_normalization_endpoints_and_mid_gray(tmp_path):
    arr = np.zeros((256, 128, 3), np.uint8)
    arr[:, :64] = 255
    arr[:, 64:96] = 128
    x = load_and_normalize(_png(tmp_path / "a.png", arr))
    assert x.shape == (3, 256, 128)
    assert x.dtype == torch.float32
    assert float(x[:, :, :60].min()) == 1.0
    assert float(x[:, :, 100:].max()) == -1.0
    assert abs(float(x[:, :, 70:90].mean())) < 1e-2


def test_resize_to_requested_size(tmp_path):
    arr = np.full((100, 50, 3), 200, np.uint8)
    x = load_and_normalize(_png(tmp_path / "a.png", arr), size=(64, 32))
    assert x.shape == (3, 64, 32)
    assert torch.allclose(x, torch.full_like(x, 200 / 127.5 - 1))


def test_rejects_non_rgb(tmp_path):
    path = _png(tmp_path / "g.png", np.zeros((64, 32), np.uint8), mode="L")
    with pytest.raises(ChannelError, match="mode 'L'"):
        load_and_normalize(path, (64, 32))
    rgba = Image.new("RGBA", (32, 64))
    rgba.save(tmp_path / "a.png")
    with pytest.raises(ChannelError):
        load_and_normalize(tmp_path / "a.png", (64, 32))
    with pytest.raises(ChannelError):
        normalize_array(np.zeros((4, 4)))


def test_unreadable_file_names_path(tmp_path):
    bad = tmp_path / "broken.png"
    bad.write_bytes(b"not an image")
    with pytest.raises(IngestionError, match="broken.png"):
        load_and_normalize(bad)
    with pytest.raises(IngestionError, match="missing.png"):
        load_and_normalize(tmp_path / "missing.png")


def test_save_load_roundtrip_is_lossless_on_8bit_grid(tmp_path, rng):
    arr = rng.integers(0, 256, (64, 32, 3), dtype=np.uint8)
    x = normalize_array(arr)
    np.testing.assert_array_equal(to_uint8(x), arr)
    save_image(x, tmp_path / "x.png")
    assert torch.equal(load_and_normalize(tmp_path / "x.png", (64, 32)), x)


def test_mask_file_roundtrip(tmp_path):
    m = random_masks(1)[0]
    save_mask(m, tmp_path / "m.png")
    assert torch.equal(load_mask(tmp_path / "m.png", (64, 32)), m)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4))
def test_mask_split_recombines_exactly(seed, n):
    x = random_images(n, seed=seed, dtype=torch.float64)
    m = random_masks(n, seed=seed, dtype=torch.float64)
    cloth, rest = composite_mask(x, m)
    assert torch.equal(cloth + rest, x)
    # each pixel lands in exactly one output
    assert torch.all((cloth == 0) | (rest == 0) | (x == 0))


def test_mask_extremes():
    x = random_images(2)
    ones = torch.ones(2, 1, 64, 32)
    cloth, rest = composite_mask(x, ones)
    assert torch.equal(cloth, x) and torch.equal(rest, torch.zeros_like(x))
    cloth, rest = composite_mask(x, torch.zeros(64, 32))
    assert torch.equal(rest, x) and torch.equal(cloth, torch.zeros_like(x))


def test_single_image_and_broadcast_mask():
    x = random_images(3)
    m = random_masks(1)
    cloth, _ = composite_mask(x, m)
    assert cloth.shape == x.shape
    c1, r1 = composite_mask(x[0], m[0])
    assert c1.shape == (3, 64, 32)
    assert torch.equal(c1, cloth[0])


@pytest.mark.parametrize("mask, msg", [
    (torch.full((1, 1, 64, 32), 0.5), "0 or 1"),
    (torch.ones(1, 1, 32, 32), "does not match"),
    (torch.ones(2, 1, 64, 32), "mask batch"),
])
def test_mask_contract_errors(mask, msg):
    with pytest.raises(ContractViolation, match=msg):
        composite_mask(random_images(3), mask)


def test_augmentation_deterministic_under_seed():
    x = random_images(4)
    a = augment_cloth(x, np.random.default_rng(7))
    b = augment_cloth(x, np.random.default_rng(7))
    assert torch.equal(a, b)
    assert a.shape == x.shape
    c = finetune_augment(x, np.random.default_rng(8))
    assert not torch.equal(a, c)


def test_augmentation_of_constant_image_is_constant():
    x = torch.full((2, 3, 64, 32), 0.3)
    out = augment_cloth(x, np.random.default_rng(1))
    assert torch.allclose(out, x, atol=1e-6)


def test_flip_only_and_identity_crop():
    x = random_images(1)[0]
    assert torch.equal(augment_cloth(x, 0, flip_prob=1.0, scale=(1.0, 1.0)), hflip(x))
    assert torch.equal(augment_cloth(x, 0, flip_prob=0.0, scale=(1.0, 1.0)), x)
    assert torch.equal(hflip(hflip(x)), x)
    assert torch.equal(resized_crop(x, 0, 0, 64, 32), x)


def test_flip_commutes_with_symmetric_image():
    half = random_images(1, size=(64, 16))[0]
    x = torch.cat([half, hflip(half)], dim=-1)
    assert torch.equal(augment_cloth(x, 0, flip_prob=1.0, scale=(1.0, 1.0)), x)


def test_manifest_roundtrip(tmp_path):
    recs = [ManifestRecord("images/a.png", 3, "g1", "cam0", "masks/a.png"),
            ManifestRecord("images/b.png", None, "g2")]
    m = DatasetManifest(recs)
    m.save(tmp_path / "manifest.jsonl")
    back = DatasetManifest.load(tmp_path / "manifest.jsonl")
    assert back.records == recs
    assert back.image_path(0) == tmp_path / "images/a.png"
    assert back.mask_path(1) is None
    assert back.dumps() == m.dumps()
    assert json.loads(m.dumps().splitlines()[0])["person_id"] == 3


def test_manifest_rejects_empty_group_and_bad_lines():
    with pytest.raises(ContractViolation):
        ManifestRecord("a.png", 1, "")
    with pytest.raises(ContractViolation, match="line 2"):
        DatasetManifest.loads('{"image_path": "a", "person_id": 1, "group_id": "g"}\n{"x": 1}\n')


def test_check_paths_reports_missing(tmp_path):
    m = DatasetManifest([ManifestRecord("nope.png", 1, "g")], str(tmp_path))
    with pytest.raises(IngestionError, match="nope.png"):
        m.check_paths()


def test_pairs_roundtrip_resolves_relative(tmp_path):
    pairs = [PairRecord("o/a.png", "set0/a.png", 0), PairRecord("/abs/b.png", "set1/b.png", 1)]
    write_pairs(pairs, tmp_path / "pairs.jsonl")
    back = read_pairs(tmp_path / "pairs.jsonl")
    assert back[0].original == str(tmp_path / "o/a.png")
    assert back[1].original == "/abs/b.png"
    assert [p.set_index for p in back] == [0, 1]
    with pytest.raises(ContractViolation):
        PairRecord("a.png", "a.png", 0)


def test_file_mask_provider_skips_missing(tiny_corpus):
    prov = FileMaskProvider()
    assert prov.mask_for(tiny_corpus, 0, (64, 32)).shape == (1, 64, 32)
    broken = DatasetManifest([ManifestRecord("x.png", 1, "g", mask_path="none.png")], "/tmp")
    assert prov.mask_for(broken, 0) is None
