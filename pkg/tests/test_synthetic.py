import hashlib

import numpy as np
import pytest
import torch

from apparelreid.exceptions import ConfigurationError
from apparelreid.imaging import load_and_normalize, load_mask
from apparelreid.synthetic import (generate_synthetic_corpus, render_person, sample_cloth,
                                   sample_person)


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_counts_and_labels(tiny_corpus):
    assert len(tiny_corpus) == 4 * 2 * 2
    assert sorted(set(tiny_corpus.person_ids)) == [0, 1, 2, 3]
    groups = {(r.person_id, r.group_id) for r in tiny_corpus}
    assert len(groups) == 8
    tiny_corpus.check_paths()


def test_byte_identical_under_seed(tmp_path):
    generate_synthetic_corpus(tmp_path / "a", 2, 2, 1, seed=11, size=(64, 32))
    generate_synthetic_corpus(tmp_path / "b", 2, 2, 1, seed=11, size=(64, 32))
    generate_synthetic_corpus(tmp_path / "c", 2, 2, 1, seed=12, size=(64, 32))
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    assert _digest(tmp_path / "a") != _digest(tmp_path / "c")


def test_mask_is_exact_cloth_region():
    rng = np.random.default_rng(0)
    person = sample_person(rng)
    cloth = sample_cloth(rng)
    rgb, region = render_person(person, cloth, np.random.default_rng(1), size=(64, 32))
    assert rgb.shape == (64, 32, 3) and rgb.dtype == np.uint8
    assert region.dtype == bool and 0 < region.mean() < 0.6
    # a different cloth on the same person changes only the masked region, up to noise
    other = sample_cloth(np.random.default_rng(5))
    rgb2, region2 = render_person(person, other, np.random.default_rng(1), size=(64, 32))
    assert np.array_equal(region, region2)
    diff = np.abs(rgb.astype(int) - rgb2.astype(int)).mean(axis=2)
    assert diff[region].mean() > 5 * diff[~region].mean()


def test_written_masks_match_images(tiny_corpus):
    x = load_and_normalize(tiny_corpus.image_path(0), (64, 32))
    m = load_mask(tiny_corpus.mask_path(0), (64, 32))
    assert set(torch.unique(m).tolist()) == {0.0, 1.0}
    assert x.shape[-2:] == m.shape[-2:]


def test_same_identity_keeps_appearance_across_cloths(tiny_corpus):
    # the rest region (face, legs, background) is closer within an identity than across
    def rest(i):
        x = load_and_normalize(tiny_corpus.image_path(i), (64, 32))
        return x * (1 - load_mask(tiny_corpus.mask_path(i), (64, 32)))

    recs = list(tiny_corpus)
    same = [(i, j) for i in range(len(recs)) for j in range(i + 1, len(recs))
            if recs[i].person_id == recs[j].person_id and recs[i].group_id != recs[j].group_id]
    diff = [(i, j) for i in range(len(recs)) for j in range(i + 1, len(recs))
            if recs[i].person_id != recs[j].person_id]
    d_same = np.mean([float((rest(i) - rest(j)).abs().mean()) for i, j in same])
    d_diff = np.mean([float((rest(i) - rest(j)).abs().mean()) for i, j in diff])
    assert d_same < d_diff


@pytest.mark.parametrize("args", [(0, 1, 1), (1, 0, 1), (1, 1, 0)])
def test_rejects_empty_counts(tmp_path, args):
    with pytest.raises(ConfigurationError):
        generate_synthetic_corpus(tmp_path, *args)


def test_fixed_cameras_share_scene(tmp_path):
    m = generate_synthetic_corpus(tmp_path, 3, 2, 4, seed=1, size=(64, 32), num_cameras=2)
    cams = {r.camera_id for r in m}
    assert cams <= {"cam0", "cam1"}
    corners = {}
    for i, r in enumerate(m):
        x = load_and_normalize(m.image_path(i), (64, 32))
        corners.setdefault(r.camera_id, []).append(x[:, 0, 0])
    for values in corners.values():
        spread = torch.stack(values).std(0).max()
        assert spread < 0.15


def test_rejects_zero_cameras(tmp_path):
    with pytest.raises(ConfigurationError):
        generate_synthetic_corpus(tmp_path, 2, 1, 1, num_cameras=0)
