"""Synthetic hypersphere-cluster datasets and evaluation protocols.

Each class is a uniformly random unit direction in D_in dimensions;
samples are that direction plus an isotropic Gaussian perturbation with
per-component standard deviation noise_sigma/sqrt(D_in) (so the expected
perturbation length is noise_sigma regardless of dimension), re-projected
onto the sphere. Generation uses counter-based Philox streams and is
bit-reproducible for a given seed on any platform.

Dataset files (``.mdds``) are a single JSON header line followed by raw
little-endian float64 inputs, int32 labels and uint8 split tags.
"""

import enum
import json
from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import CorruptDataset, InsufficientSamples, InvalidConfig, IoFailure

DATASET_FORMAT = "mdds"
DATASET_VERSION = 1


class Split(enum.IntEnum):
    TRAIN = 0
    EVAL = 1


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int
    split: np.ndarray
    seed: int

    def validate(self):
        m = self.inputs.shape[0]
        if self.inputs.ndim != 2:
            raise CorruptDataset("inputs must be a 2-D matrix")
        if self.labels.shape != (m,) or self.split.shape != (m,):
            raise CorruptDataset("labels/split length must match inputs")
        if self.labels.size == 0:
            raise CorruptDataset("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise CorruptDataset(f"labels out of range [0, {self.n_classes})")
        if not np.isin(self.split, (Split.TRAIN, Split.EVAL)).all():
            raise CorruptDataset("split tags must be TRAIN or EVAL")
        counts = np.bincount(self.labels, minlength=self.n_classes)
        if counts.min() < 2:
            raise CorruptDataset("every class needs at least 2 samples")

    @property
    def n_samples(self) -> int:
        return self.inputs.shape[0]

    @property
    def in_dim(self) -> int:
        return self.inputs.shape[1]

    def indices_of(self, split: Split) -> np.ndarray:
        return np.nonzero(self.split == split)[0]


@dataclass(frozen=True)
class VerificationProtocol:
    """Pairs of EVAL sample indices with a same-identity flag."""

    index_a: np.ndarray
    index_b: np.ndarray
    same: np.ndarray

    @property
    def n_pairs(self) -> int:
        return self.index_a.shape[0]


@dataclass(frozen=True)
class IdentificationProtocol:
    """One probe and one gallery sample per probe identity, plus
    distractor samples from disjoint identities."""

    probes: np.ndarray
    gallery: np.ndarray
    distractors: np.ndarray

    @property
    def n_probes(self) -> int:
        return self.probes.shape[0]


def class_directions(n_classes: int, in_dim: int, seed: int) -> np.ndarray:
    """The unit class directions a given seed generates (rows)."""
    gen = rng.stream(seed, rng.DIRECTIONS)
    dirs = gen.standard_normal((n_classes, in_dim))
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def generate_synthetic(n_classes: int, per_class: int, in_dim: int,
                       noise_sigma: float, seed: int) -> Dataset:
    """Sample hypersphere clusters with an 80/20 TRAIN/EVAL split per class."""
    if n_classes < 2:
        raise InvalidConfig(f"need n_classes >= 2, got {n_classes}")
    if per_class < 2:
        raise InvalidConfig(f"need per_class >= 2, got {per_class}")
    if in_dim < 2:
        raise InvalidConfig(f"need in_dim >= 2, got {in_dim}")
    if noise_sigma < 0:
        raise InvalidConfig(f"need noise_sigma >= 0, got {noise_sigma}")

    dirs = class_directions(n_classes, in_dim, seed)
    noise_gen = rng.stream(seed, rng.NOISE)
    component_sigma = noise_sigma / np.sqrt(in_dim)

    raw = np.repeat(dirs, per_class, axis=0)
    raw += component_sigma * noise_gen.standard_normal(raw.shape)
    inputs = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    labels = np.repeat(np.arange(n_classes, dtype=np.int32), per_class)

    n_train = min(per_class - 1, max(1, int(0.8 * per_class)))
    split_one = np.full(per_class, Split.EVAL, dtype=np.uint8)
    split_one[:n_train] = Split.TRAIN
    split = np.tile(split_one, n_classes)

    ds = Dataset(inputs=inputs, labels=labels, n_classes=n_classes,
                 split=split, seed=seed)
    ds.validate()
    return ds


def build_verification_pairs(dataset: Dataset, n_pos: int, n_neg: int,
                             seed: int) -> VerificationProtocol:
    """Sample distinct same-class and different-class EVAL pairs."""
    if n_pos < 0 or n_neg < 0:
        raise InvalidConfig("pair counts must be non-negative")
    gen = rng.stream(seed, rng.PAIRS)
    eval_idx = dataset.indices_of(Split.EVAL)
    labels = dataset.labels[eval_idx]

    pos_pairs = []
    for c in range(dataset.n_classes):
        members = eval_idx[labels == c]
        for i in range(len(members)):
            for j in range(i + 1, len(members)):
                pos_pairs.append((members[i], members[j]))
    if n_pos > len(pos_pairs):
        raise InsufficientSamples(
            f"requested {n_pos} positive pairs, only {len(pos_pairs)} exist")
    chosen = gen.choice(len(pos_pairs), size=n_pos, replace=False) if n_pos else []
    pairs = [pos_pairs[int(k)] for k in chosen]
    same = [True] * n_pos

    n_eval = len(eval_idx)
    label_of = dict(zip(eval_idx.tolist(), labels.tolist()))
    total_neg = n_eval * (n_eval - 1) // 2 - len(pos_pairs)
    if n_neg > total_neg:
        raise InsufficientSamples(
            f"requested {n_neg} negative pairs, only {total_neg} exist")
    seen = set()
    while len(seen) < n_neg:
        a, b = (int(v) for v in gen.choice(n_eval, size=2, replace=False))
        ia, ib = int(eval_idx[a]), int(eval_idx[b])
        if ia > ib:
            ia, ib = ib, ia
        if label_of[ia] == label_of[ib] or (ia, ib) in seen:
            continue
        seen.add((ia, ib))
        pairs.append((ia, ib))
        same.append(False)

    arr = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    return VerificationProtocol(index_a=arr[:, 0], index_b=arr[:, 1],
                                same=np.array(same, dtype=bool))


def build_identification(dataset: Dataset, n_probe_identities: int,
                         n_distractors: int, seed: int) -> IdentificationProtocol:
    """Pick probe identities (one probe + one gallery EVAL sample each) and
    distractor EVAL samples from the remaining identities."""
    if n_probe_identities < 1:
        raise InvalidConfig("need at least one probe identity")
    if n_distractors < 0:
        raise InvalidConfig("distractor count must be non-negative")
    gen = rng.stream(seed, rng.IDENT)
    eval_idx = dataset.indices_of(Split.EVAL)
    labels = dataset.labels[eval_idx]

    eligible = [c for c in range(dataset.n_classes) if (labels == c).sum() >= 2]
    if n_probe_identities > len(eligible):
        raise InsufficientSamples(
            f"requested {n_probe_identities} probe identities, "
            f"only {len(eligible)} have >= 2 EVAL samples")
    probe_classes = sorted(
        int(eligible[k]) for k in gen.choice(len(eligible), size=n_probe_identities,
                                             replace=False))
    probes, gallery = [], []
    for c in probe_classes:
        members = eval_idx[labels == c]
        pick = gen.choice(len(members), size=2, replace=False)
        probes.append(int(members[pick[0]]))
        gallery.append(int(members[pick[1]]))

    probe_set = set(probe_classes)
    pool = eval_idx[~np.isin(labels, probe_classes)]
    if n_distractors > len(pool):
        raise InsufficientSamples(
            f"requested {n_distractors} distractors, only {len(pool)} EVAL "
            f"samples of non-probe identities exist")
    chosen = gen.choice(len(pool), size=n_distractors, replace=False)
    distractors = np.sort(pool[chosen])
    assert not probe_set & set(dataset.labels[distractors].tolist())

    return IdentificationProtocol(
        probes=np.array(probes, dtype=np.int64),
        gallery=np.array(gallery, dtype=np.int64),
        distractors=distractors.astype(np.int64),
    )


def dataset_save(dataset: Dataset, path) -> None:
    dataset.validate()
    header = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "n_samples": int(dataset.n_samples),
        "in_dim": int(dataset.in_dim),
        "n_classes": int(dataset.n_classes),
        "seed": int(dataset.seed),
    }
    try:
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
            fh.write(np.ascontiguousarray(dataset.inputs, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(dataset.labels, dtype="<i4").tobytes())
            fh.write(np.ascontiguousarray(dataset.split, dtype="u1").tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write dataset {path}: {exc}") from exc


def dataset_load(path) -> Dataset:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read dataset {path}: {exc}") from exc
    nl = blob.find(b"\n")
    if nl < 0:
        raise CorruptDataset(f"{path}: missing header line")
    try:
        header = json.loads(blob[:nl].decode("utf-8"))
        if header["format"] != DATASET_FORMAT:
            raise CorruptDataset(f"{path}: not an mdds file")
        if header["version"] != DATASET_VERSION:
            raise CorruptDataset(f"{path}: unsupported version {header['version']}")
        m, d = int(header["n_samples"]), int(header["in_dim"])
        n_classes, seed = int(header["n_classes"]), int(header["seed"])
    except (KeyError, ValueError, UnicodeDecodeError) as exc:
        raise CorruptDataset(f"{path}: invalid header: {exc}") from exc

    off = nl + 1
    expect = m * d * 8 + m * 4 + m
    if len(blob) - off != expect:
        raise CorruptDataset(
            f"{path}: payload is {len(blob) - off} bytes, expected {expect}")
    inputs = np.frombuffer(blob, dtype="<f8", count=m * d,
                           offset=off).astype(np.float64).reshape(m, d)
    off += m * d * 8
    labels = np.frombuffer(blob, dtype="<i4", count=m, offset=off).astype(np.int32)
    off += m * 4
    split = np.frombuffer(blob, dtype="u1", count=m, offset=off).copy()
    ds = Dataset(inputs=inputs, labels=labels, n_classes=n_classes,
                 split=split, seed=seed)
    try:
        ds.validate()
    except CorruptDataset as exc:
        raise CorruptDataset(f"{path}: {exc}") from exc
    return ds
