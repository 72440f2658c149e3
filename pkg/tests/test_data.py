import os
from collections import Counter

import numpy as np
import pytest

from cfil.data import (
    MANIFEST_HEADER,
    NUM_FOLDS,
    RELATIONS,
    ManifestError,
    SyntheticFamilyModel,
    assign_folds,
    build_dataset,
    generate,
    load_manifest,
    make_pairs,
    manifest_text,
    save_manifest,
)
from cfil.errors import ConfigurationError


def check_protocol(dataset, family_count):
    """Enumerate every pair and assert the protocol invariants; returns the fold map."""
    pos = [p for p in dataset.pairs if p.label == 1]
    neg = [p for p in dataset.pairs if p.label == 0]
    assert len(pos) == len(neg) == family_count
    family_fold = {}
    for p in dataset.pairs:
        assert family_fold.setdefault(p.family_id, p.fold) == p.fold
    for p in pos:
        assert p.parent_key == f"family{p.family_id:05d}_parent"
        assert p.child_key == f"family{p.family_id:05d}_child"
    child_of = {p.child_key: p.family_id for p in pos}
    for p in neg:
        donor = child_of[p.child_key]
        assert donor != p.family_id
        assert family_fold[donor] == p.fold
    assert sorted(p.child_key for p in neg) == sorted(child_of)
    assert sorted(p.parent_key for p in neg) == sorted(p.parent_key for p in pos)
    sizes = Counter(family_fold.values())
    assert set(sizes) == set(range(1, NUM_FOLDS + 1))
    assert max(sizes.values()) - min(sizes.values()) <= 1
    for k in range(1, NUM_FOLDS + 1):
        train, test = dataset.select_split(k)
        assert len(train) + len(test) == len(dataset)
        assert not {id(p) for p in train} & {id(p) for p in test}
        assert not {p.family_id for p in train} & {p.family_id for p in test}
        test_folds = {p.fold for p in test}
        assert test_folds == {k}
        assert len({p.fold for p in train}) == NUM_FOLDS - 1
    return family_fold


@pytest.fixture(scope="module")
def dataset():
    return build_dataset(SyntheticFamilyModel(family_count=40), seed=7)


def test_generate_deterministic_and_bounded():
    m = SyntheticFamilyModel(family_count=6, image_size=16)
    a, b = generate(m, 3), generate(m, 3)
    for fa, fb in zip(a, b):
        np.testing.assert_array_equal(fa.parent_image, fb.parent_image)
        np.testing.assert_array_equal(fa.child_image, fb.child_image)
        assert fa.parent_image.shape == (3, 16, 16) and fa.parent_image.dtype == np.float32
        assert fa.parent_image.min() >= 0 and fa.parent_image.max() <= 1
    assert not np.array_equal(a[0].parent_image, generate(m, 4)[0].parent_image)


def test_rho_one_sigma_zero_identical_images():
    for f in generate(SyntheticFamilyModel(family_count=5, rho=1.0, sigma=0.0), 1):
        np.testing.assert_array_equal(f.parent_image, f.child_image)


def _pixel_correlation(rho, seed=0, count=500):
    fams = generate(SyntheticFamilyModel(family_count=count, rho=rho, image_size=16), seed)
    p = np.stack([f.parent_image.reshape(-1) for f in fams]).astype(np.float64)
    c = np.stack([f.child_image.reshape(-1) for f in fams]).astype(np.float64)
    p -= p.mean(axis=0)
    c -= c.mean(axis=0)
    per_pixel = (p * c).sum(axis=0) / np.sqrt((p * p).sum(axis=0) * (c * c).sum(axis=0))
    return float(per_pixel.mean())


def test_rho_zero_uncorrelated_and_monotone():
    zero = _pixel_correlation(0.0)
    assert abs(zero) < 0.05
    assert _pixel_correlation(0.5) < _pixel_correlation(0.9)
    assert _pixel_correlation(0.5) > zero + 0.2


def test_relations_are_declared_genders(dataset):
    for p in dataset.pairs:
        assert p.relation in RELATIONS
    assert {p.relation for p in dataset.pairs if p.label == 1} == set(RELATIONS)


def test_protocol_invariants(dataset):
    check_protocol(dataset, 40)


def test_protocol_over_50_regenerations():
    for seed in range(50):
        fams = generate(SyntheticFamilyModel(family_count=10 + seed % 7, image_size=8, coarse_size=4), seed)
        folds = assign_folds(fams, seed)
        from cfil.data import Dataset

        check_protocol(Dataset(make_pairs(fams, seed, folds)), len(fams))


def test_counts_and_fold_sizes():
    ds = build_dataset(SyntheticFamilyModel(family_count=100, image_size=8, coarse_size=4), 0)
    assert sum(p.label for p in ds.pairs) == 100 and len(ds) == 200
    ten = build_dataset(SyntheticFamilyModel(family_count=10, image_size=8, coarse_size=4), 0)
    assert sorted(Counter(ten.folds().values()).values()) == [2] * 5


def test_family_minimums():
    with pytest.raises(ConfigurationError, match="5-fold"):
        SyntheticFamilyModel(family_count=3).validate()
    with pytest.raises(ConfigurationError, match="at least 2 per fold"):
        build_dataset(SyntheticFamilyModel(family_count=7, image_size=8, coarse_size=4), 0)
    with pytest.raises(ConfigurationError):
        SyntheticFamilyModel(rho=1.5).validate()


def test_unfolded_pairs_derange_globally():
    fams = generate(SyntheticFamilyModel(family_count=5, image_size=8, coarse_size=4), 2)
    pairs = make_pairs(fams, 2)
    assert all(p.fold == 1 for p in pairs)
    assert all(p.parent_key[:11] != p.child_key[:11] for p in pairs if p.label == 0)


def test_select_split_rejects_bad_fold(dataset):
    with pytest.raises(ConfigurationError):
        dataset.select_split(6)


def test_manifest_round_trip(tmp_path):
    ds = build_dataset(SyntheticFamilyModel(family_count=10, image_size=16), 5)
    path = save_manifest(ds, tmp_path / "d")
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(MANIFEST_HEADER)
    assert len(lines) == len(ds) + 1
    back = load_manifest(tmp_path / "d")
    assert back.pairs == ds.pairs
    for a, b in zip(ds.pairs, back.pairs):
        np.testing.assert_array_equal(a.parent_image, b.parent_image)
        np.testing.assert_array_equal(a.child_image, b.child_image)
    assert manifest_text(back) == manifest_text(ds)


def test_manifest_bytes_deterministic(tmp_path):
    m = SyntheticFamilyModel(family_count=10, image_size=16)
    save_manifest(build_dataset(m, 1), tmp_path / "a")
    save_manifest(build_dataset(m, 1), tmp_path / "b")
    names = sorted(os.listdir(tmp_path / "a" / "images"))
    assert names == sorted(os.listdir(tmp_path / "b" / "images"))
    for rel in ["manifest.csv", *(f"images/{n}" for n in names)]:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


@pytest.mark.parametrize(
    "mutate,match",
    [
        (lambda rows: rows[1].__setitem__(6, "7"), "line 2: fold 7"),
        (lambda rows: rows[2].__setitem__(3, "maybe"), "line 3: label"),
        (lambda rows: rows[1].__setitem__(4, "B-S"), "relation"),
        (lambda rows: rows[1].pop(), "line 2: expected 7 fields"),
        (lambda rows: rows[0].__setitem__(0, "id"), "line 1: header"),
    ],
)
def test_malformed_manifest(tmp_path, mutate, match):
    ds = build_dataset(SyntheticFamilyModel(family_count=10, image_size=8, coarse_size=4), 0)
    path = save_manifest(ds, tmp_path)
    rows = [line.split(",") for line in path.read_text().splitlines()]
    mutate(rows)
    path.write_text("\n".join(",".join(r) for r in rows) + "\n")
    with pytest.raises(ManifestError, match=match):
        load_manifest(path)


def test_missing_image(tmp_path):
    ds = build_dataset(SyntheticFamilyModel(family_count=10, image_size=8, coarse_size=4), 0)
    save_manifest(ds, tmp_path)
    os.remove(tmp_path / "images" / "family00003_child.cft")
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path)
