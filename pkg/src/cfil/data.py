"""Synthetic kinship pairs and the cross-validation protocol.

Each family has one parent and one child. Both draw their latent code from
a shared family code, ``z = sqrt(rho) * z_family + sqrt(1 - rho) * noise``,
so ``rho`` is the parent/child latent correlation. A fixed seeded linear
decoder renders a latent code as a smooth 3 x S x S image; pixel noise of
scale ``sigma`` is added before a sigmoid keeps values in [0, 1].

Protocol:

* families are dealt into five folds, stratified by relation, so every
  family lives in exactly one fold;
* each family contributes one positive pair;
* negatives re-pair parents with children of *other* families in the same
  fold by a seeded cyclic shift, so every image appears in exactly one
  negative pair and no negative ever crosses a fold boundary.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .rng import STREAM_DECODER, STREAM_FAMILIES, STREAM_FOLDS, STREAM_PAIRS, make_rng
from .serialization import FormatError, load_tensor, save_tensor

NUM_FOLDS = 5
RELATIONS = ("F-S", "F-D", "M-S", "M-D")
POSITIVE, NEGATIVE = "positive", "negative"
MANIFEST_NAME = "manifest.csv"
MANIFEST_HEADER = ("pair_id", "parent_path", "child_path", "label", "relation", "family_id", "fold")


class ManifestError(FormatError):
    """Malformed manifest row; the message carries the line number."""


@dataclass(frozen=True)
class SyntheticFamilyModel:
    family_count: int = 200
    latent_dim: int = 64
    rho: float = 0.9
    sigma: float = 0.1
    image_size: int = 64
    coarse_size: int = 8
    contrast: float = 1.5

    def validate(self) -> None:
        if self.family_count < NUM_FOLDS:
            raise ConfigurationError(
                f"need at least {NUM_FOLDS} families for {NUM_FOLDS}-fold cross-validation, got {self.family_count}"
            )
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigurationError(f"rho must lie in [0, 1], got {self.rho}")
        if self.sigma < 0:
            raise ConfigurationError(f"sigma must be non-negative, got {self.sigma}")
        if self.latent_dim < 1 or self.coarse_size < 1 or self.image_size < self.coarse_size:
            raise ConfigurationError("latent_dim, coarse_size must be >= 1 and image_size >= coarse_size")


@dataclass
class Family:
    family_id: int
    parent_gender: str  # "F" or "M"
    child_gender: str  # "S" or "D"
    parent_image: np.ndarray
    child_image: np.ndarray

    @property
    def relation(self) -> str:
        return f"{self.parent_gender}-{self.child_gender}"


@dataclass
class PairSample:
    pair_id: int
    parent_key: str
    child_key: str
    label: int  # 1 = kin, 0 = not kin
    relation: str
    family_id: int
    fold: int
    parent_image: np.ndarray = field(repr=False, compare=False, default=None)
    child_image: np.ndarray = field(repr=False, compare=False, default=None)


def _interp_matrix(out_size: int, in_size: int) -> np.ndarray:
    """Linear interpolation from in_size samples to out_size (align-corners)."""
    m = np.zeros((out_size, in_size))
    if in_size == 1:
        m[:, 0] = 1.0
        return m
    pos = np.linspace(0.0, in_size - 1.0, out_size)
    lo = np.minimum(np.floor(pos).astype(int), in_size - 2)
    frac = pos - lo
    m[np.arange(out_size), lo] = 1.0 - frac
    m[np.arange(out_size), lo + 1] = frac
    return m


class Decoder:
    """Fixed linear map latent -> 3 x S x S, followed by a sigmoid."""

    def __init__(self, model: SyntheticFamilyModel, seed: int):
        rng = make_rng(seed, STREAM_DECODER)
        c = model.coarse_size
        scale = model.contrast / math.sqrt(model.latent_dim)
        self.coarse = rng.normal(0.0, scale, size=(model.latent_dim, 3, c, c))
        self.up = _interp_matrix(model.image_size, c)

    def linear(self, z: np.ndarray) -> np.ndarray:
        coarse = np.tensordot(z, self.coarse, axes=(0, 0))
        return np.einsum("hi,cij,wj->chw", self.up, coarse, self.up)

    def render(self, z: np.ndarray, noise: np.ndarray) -> np.ndarray:
        pre = self.linear(z) + noise
        return (1.0 / (1.0 + np.exp(-pre))).astype(np.float32)


def generate(model: SyntheticFamilyModel, seed: int) -> list[Family]:
    """Render ``model.family_count`` families; deterministic in ``seed``."""
    model.validate()
    decoder = Decoder(model, seed)
    shape = (3, model.image_size, model.image_size)
    a, b = math.sqrt(model.rho), math.sqrt(1.0 - model.rho)
    families = []
    for fid in range(model.family_count):
        rng = make_rng(seed, STREAM_FAMILIES, fid)
        parent_gender = "F" if rng.integers(2) == 0 else "M"
        child_gender = "S" if rng.integers(2) == 0 else "D"
        shared = rng.standard_normal(model.latent_dim)
        z_parent = a * shared + b * rng.standard_normal(model.latent_dim)
        z_child = a * shared + b * rng.standard_normal(model.latent_dim)
        noise_parent = model.sigma * rng.standard_normal(shape)
        noise_child = model.sigma * rng.standard_normal(shape)
        families.append(
            Family(
                fid,
                parent_gender,
                child_gender,
                decoder.render(z_parent, noise_parent),
                decoder.render(z_child, noise_child),
            )
        )
    return families


def assign_folds(families: list[Family], seed: int, folds: int = NUM_FOLDS) -> dict[int, int]:
    """Map family_id -> fold in 1..folds.

    Families are shuffled within each relation, then dealt round-robin
    without restarting between relations, so fold sizes and per-relation
    counts per fold each differ by at most one.
    """
    if len(families) < folds:
        raise ConfigurationError(f"need at least {folds} families to build {folds} folds, got {len(families)}")
    rng = make_rng(seed, STREAM_FOLDS)
    ordered = []
    for rel in RELATIONS:
        group = [f.family_id for f in families if f.relation == rel]
        ordered.extend(group[i] for i in rng.permutation(len(group)))
    offset = int(rng.integers(folds))
    return {fid: (offset + pos) % folds + 1 for pos, fid in enumerate(ordered)}


def _coprime_shift(rng: np.random.Generator, m: int) -> int:
    choices = [r for r in range(1, m) if math.gcd(r, m) == 1]
    return choices[int(rng.integers(len(choices)))]


def make_pairs(families: list[Family], seed: int, folds: dict[int, int] | None = None) -> list[PairSample]:
    """One positive pair per family plus one deranged negative per family.

    With ``folds`` the derangement runs inside each fold; without it, across
    all families (every family then reports fold 1).
    """
    if len(families) < 2:
        raise ConfigurationError("need at least 2 families to build negative pairs")
    folds = folds or {f.family_id: 1 for f in families}
    by_id = {f.family_id: f for f in families}
    pairs: list[PairSample] = []

    def pair(parent: Family, child: Family, label: int) -> PairSample:
        return PairSample(
            pair_id=len(pairs),
            parent_key=f"family{parent.family_id:05d}_parent",
            child_key=f"family{child.family_id:05d}_child",
            label=label,
            relation=f"{parent.parent_gender}-{child.child_gender}",
            family_id=parent.family_id,
            fold=folds[parent.family_id],
            parent_image=parent.parent_image,
            child_image=child.child_image,
        )

    for f in families:
        pairs.append(pair(f, f, 1))

    rng = make_rng(seed, STREAM_PAIRS)
    for fold in sorted(set(folds.values())):
        members = sorted(fid for fid, k in folds.items() if k == fold)
        if len(members) < 2:
            raise ConfigurationError(
                f"fold {fold} holds {len(members)} family; fold-internal negatives need at least 2 per fold "
                f"(at least {2 * NUM_FOLDS} families)"
            )
        order = [members[i] for i in rng.permutation(len(members))]
        shift = _coprime_shift(rng, len(order))
        for t, fid in enumerate(order):
            donor = order[(t + shift) % len(order)]
            pairs.append(pair(by_id[fid], by_id[donor], 0))
    return pairs


@dataclass
class Dataset:
    pairs: list[PairSample]

    def __len__(self) -> int:
        return len(self.pairs)

    def folds(self) -> dict[int, int]:
        return {p.family_id: p.fold for p in self.pairs if p.label == 1}

    def select_split(self, fold_k: int) -> tuple[list[PairSample], list[PairSample]]:
        """Train on every fold except ``fold_k``; test on ``fold_k``."""
        if not 1 <= fold_k <= NUM_FOLDS:
            raise ConfigurationError(f"fold must be in 1..{NUM_FOLDS}, got {fold_k}")
        train = [p for p in self.pairs if p.fold != fold_k]
        test = [p for p in self.pairs if p.fold == fold_k]
        return train, test


def build_dataset(model: SyntheticFamilyModel, seed: int) -> Dataset:
    families = generate(model, seed)
    folds = assign_folds(families, seed)
    return Dataset(make_pairs(families, seed, folds))


def stack(pairs: list[PairSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    parents = np.stack([p.parent_image for p in pairs])
    children = np.stack([p.child_image for p in pairs])
    labels = np.array([p.label for p in pairs], dtype=np.int64)
    return parents, children, labels


# ---------------------------------------------------------------------------
# manifest IO


def manifest_text(dataset: Dataset) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for p in dataset.pairs:
        writer.writerow([
            p.pair_id,
            f"images/{p.parent_key}.cft",
            f"images/{p.child_key}.cft",
            POSITIVE if p.label == 1 else NEGATIVE,
            p.relation,
            p.family_id,
            p.fold,
        ])
    return buf.getvalue()


def save_manifest(dataset: Dataset, out_dir: str | os.PathLike) -> Path:
    """Write ``manifest.csv`` plus one CFT1 file per image under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    written: set[str] = set()
    for p in dataset.pairs:
        for key, img in ((p.parent_key, p.parent_image), (p.child_key, p.child_image)):
            if key not in written:
                save_tensor(out / "images" / f"{key}.cft", img)
                written.add(key)
    path = out / MANIFEST_NAME
    path.write_text(manifest_text(dataset), encoding="utf-8")
    return path


def _manifest_path(path: str | os.PathLike) -> Path:
    p = Path(path)
    return p / MANIFEST_NAME if p.is_dir() else p


def _parse_row(row: list[str], line: int) -> tuple:
    if len(row) != len(MANIFEST_HEADER):
        raise ManifestError(f"line {line}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
    pair_id, parent_path, child_path, label, relation, family_id, fold = row
    try:
        pair_id_i, family_i, fold_i = int(pair_id), int(family_id), int(fold)
    except ValueError:
        raise ManifestError(f"line {line}: pair_id, family_id and fold must be integers") from None
    if label not in (POSITIVE, NEGATIVE):
        raise ManifestError(f"line {line}: label {label!r} is not {POSITIVE!r} or {NEGATIVE!r}")
    if relation not in RELATIONS:
        raise ManifestError(f"line {line}: unknown relation {relation!r}")
    if not 1 <= fold_i <= NUM_FOLDS:
        raise ManifestError(f"line {line}: fold {fold_i} outside 1..{NUM_FOLDS}")
    if not parent_path or not child_path:
        raise ManifestError(f"line {line}: empty image path")
    return pair_id_i, parent_path, child_path, 1 if label == POSITIVE else 0, relation, family_i, fold_i


def load_manifest(path: str | os.PathLike) -> Dataset:
    """Read a manifest (file or directory holding ``manifest.csv``) and its images."""
    manifest = _manifest_path(path)
    base = manifest.parent
    with open(manifest, encoding="utf-8", newline="") as fp:
        rows = list(csv.reader(fp))
    if not rows or tuple(rows[0]) != MANIFEST_HEADER:
        raise ManifestError(f"line 1: header must be {','.join(MANIFEST_HEADER)}")
    cache: dict[str, np.ndarray] = {}

    def image(rel: str) -> np.ndarray:
        if rel not in cache:
            full = base / rel
            if not full.is_file():
                raise FileNotFoundError(f"image file not found: {full}")
            cache[rel] = load_tensor(full)
        return cache[rel]

    pairs = []
    for line, row in enumerate(rows[1:], start=2):
        pid, ppath, cpath, label, relation, fid, fold = _parse_row(row, line)
        pairs.append(PairSample(
            pair_id=pid,
            parent_key=Path(ppath).stem,
            child_key=Path(cpath).stem,
            label=label,
            relation=relation,
            family_id=fid,
            fold=fold,
            parent_image=image(ppath),
            child_image=image(cpath),
        ))
    return Dataset(pairs)
