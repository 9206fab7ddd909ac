"""Synthetic multi-scale datasets, stain normalization, splits, batching and I/O.

The synthetic benchmark stands in for a multi-magnification histopathology
set: every class is an oriented sinusoidal grating, and every domain renders
the same gratings at its own scale factor, so absolute frequency shifts from
domain to domain while orientation does not.
"""

from __future__ import annotations

import dataclasses
import math
import struct
import zlib
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .config import parse_floats, parse_ints, read_key_values

__all__ = [
    "ChecksumError",
    "DomainDataset",
    "FormatError",
    "MagicError",
    "ReinhardResult",
    "SampleSet",
    "SyntheticSpec",
    "TruncatedError",
    "batch_iter",
    "epoch_batches",
    "generate_synthetic",
    "import_raw_directory",
    "lab_stats",
    "lab_to_rgb",
    "load_mdt",
    "pool",
    "reinhard_normalize",
    "relabel",
    "render_patch",
    "rgb_to_lab",
    "sample_triplets",
    "save_mdt",
    "split_45_45_10",
]


@dataclasses.dataclass(frozen=True)
class SampleSet:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise ValueError(f"bad sample set shapes x={x.shape} y={y.shape}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return len(self.y)

    @classmethod
    def empty(cls, input_dim: int) -> "SampleSet":
        return cls(np.zeros((0, input_dim)), np.zeros(0, dtype=np.int64))


@dataclasses.dataclass(frozen=True)
class DomainDataset:
    domain: int
    train: SampleSet
    val: SampleSet
    test: SampleSet

    @property
    def input_dim(self) -> int:
        return self.train.x.shape[1]

    def split(self, name: str) -> SampleSet:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


def pool(sets: Sequence[SampleSet]) -> SampleSet:
    return SampleSet(np.concatenate([s.x for s in sets]), np.concatenate([s.y for s in sets]))


def relabel(datasets: Sequence[DomainDataset], mapping: Sequence[int]) -> list[DomainDataset]:
    """Map class ids through ``mapping`` (e.g. tumor type to malignancy)."""
    table = np.asarray(mapping, dtype=np.int64)

    def remap(s):
        return SampleSet(s.x, table[s.y])

    return [DomainDataset(d.domain, remap(d.train), remap(d.val), remap(d.test)) for d in datasets]


# ---------------------------------------------------------------------------
# Reinhard stain normalization

_RGB2LMS = np.array([
    [0.3811, 0.5783, 0.0402],
    [0.1967, 0.7244, 0.0782],
    [0.0241, 0.1288, 0.8444],
])
_LMS2LAB = np.diag([1 / math.sqrt(3), 1 / math.sqrt(6), 1 / math.sqrt(2)]) @ np.array([
    [1.0, 1.0, 1.0],
    [1.0, 1.0, -2.0],
    [1.0, -1.0, 0.0],
])
_LMS2RGB = np.linalg.inv(_RGB2LMS)
_LAB2LMS = np.linalg.inv(_LMS2LAB)
LMS_FLOOR = 1e-10


def rgb_to_lab(image: np.ndarray) -> np.ndarray:
    """RGB in [0, 1] to the decorrelated log-LMS (l, alpha, beta) space."""
    image = np.asarray(image, dtype=np.float64)
    lms = image @ _RGB2LMS.T
    return np.log10(np.maximum(lms, LMS_FLOOR)) @ _LMS2LAB.T


def lab_to_rgb(lab: np.ndarray) -> np.ndarray:
    lms = 10.0 ** (np.asarray(lab) @ _LAB2LMS.T)
    return lms @ _LMS2RGB.T


def lab_stats(image: np.ndarray) -> np.ndarray:
    """Per-channel (mean, std) in lab space, shape (3, 2)."""
    lab = rgb_to_lab(image).reshape(-1, 3)
    return np.stack([lab.mean(axis=0), lab.std(axis=0)], axis=1)


@dataclasses.dataclass(frozen=True)
class ReinhardResult:
    image: np.ndarray
    passthrough: tuple[bool, bool, bool]
    clipped_fraction: float


def reinhard_normalize(image: np.ndarray, target_stats: np.ndarray, std_floor: float = 1e-12) -> ReinhardResult:
    """Match per-channel lab mean/std of ``image`` (H x W x 3) to ``target_stats``.

    A channel whose source std is at most ``std_floor`` is shifted to the
    target mean but not rescaled, and flagged in ``passthrough``.
    """
    image = np.asarray(image, dtype=np.float64)
    target = np.asarray(target_stats, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got {image.shape}")
    if target.shape != (3, 2) or np.any(target[:, 1] <= 0):
        raise ValueError("target_stats must be (3, 2) with positive stds")
    lab = rgb_to_lab(image)
    flat = lab.reshape(-1, 3)
    mu, sd = flat.mean(axis=0), flat.std(axis=0)
    passthrough = sd <= std_floor
    scale = np.where(passthrough, 1.0, target[:, 1] / np.where(passthrough, 1.0, sd))
    out_lab = (lab - mu) * scale + target[:, 0]
    rgb = lab_to_rgb(out_lab)
    clipped = float(np.mean((rgb < 0) | (rgb > 1)))
    return ReinhardResult(np.clip(rgb, 0.0, 1.0), tuple(bool(p) for p in passthrough), clipped)


# ---------------------------------------------------------------------------
# synthetic benchmark


@dataclasses.dataclass(frozen=True)
class SyntheticSpec:
    num_domains: int = 4
    num_classes: int = 8
    samples_per_class: int = 250
    patch_side: int = 8
    scales: tuple[float, ...] = (1.0, 1.4, 1.96, 2.74)
    noise: float = 0.1
    seed: int = 0
    base_frequency: float = 0.1
    band_ratio: float = 1.6
    phase_jitter: float = math.pi / 3
    stain_jitter: float = 0.08
    normalize_stain: bool = True
    superclasses: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        object.__setattr__(self, "superclasses", tuple(int(s) for s in self.superclasses))
        if self.num_domains < 2 or self.num_classes < 2:
            raise ValueError("need at least 2 domains and 2 classes")
        if len(self.scales) != self.num_domains:
            raise ValueError(f"expected {self.num_domains} scale factors, got {len(self.scales)}")
        if any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise ValueError("scale factors must be strictly increasing")
        if self.superclasses and len(self.superclasses) != self.num_classes:
            raise ValueError("superclasses needs one entry per class")

    @property
    def input_dim(self) -> int:
        return 3 * self.patch_side ** 2

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "SyntheticSpec":
        casts = {
            "num_domains": int, "num_classes": int, "samples_per_class": int, "patch_side": int,
            "noise": float, "seed": int, "base_frequency": float, "band_ratio": float,
            "phase_jitter": float, "stain_jitter": float, "scales": parse_floats,
            "superclasses": parse_ints,
            "normalize_stain": lambda v: v.strip().lower() in ("1", "true", "yes"),
        }
        unknown = set(values) - set(casts)
        if unknown:
            raise ValueError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**{k: casts[k](v) for k, v in values.items()})

    @classmethod
    def from_file(cls, path) -> "SyntheticSpec":
        return cls.from_mapping(read_key_values(path))


# stain target: hematoxylin-like purple on a white background
_STAIN_COLOR = np.array([0.55, 0.25, 0.6])


def _class_params(spec: SyntheticSpec, c: int) -> tuple[float, float, float]:
    """(orientation, frequency, base phase) of class ``c``.

    Classes come in orientation groups of two frequency bands, so class
    identity needs both cues and the frequency cue moves with scale.
    """
    n_orient = math.ceil(spec.num_classes / 2)
    orient = math.pi * (c % n_orient) / n_orient
    freq = spec.base_frequency * spec.band_ratio ** (c // n_orient)
    phase = 0.7 * c
    return orient, freq, phase


def render_patch(spec: SyntheticSpec, c: int, k: int, phase: float, stain: np.ndarray | None = None,
                 noise: np.ndarray | None = None) -> np.ndarray:
    """Render one H x W x 3 patch of class ``c`` in domain ``k``.

    ``phase`` is the per-sample offset; ``stain`` and ``noise`` default to the
    nominal stain color and no noise.
    """
    orient, freq, base = _class_params(spec, c)
    side = spec.patch_side
    v, u = np.mgrid[0:side, 0:side].astype(np.float64)
    u -= (side - 1) / 2
    v -= (side - 1) / 2
    f = freq * spec.scales[k]
    g = 0.5 + 0.5 * np.sin(2 * math.pi * f * (u * math.cos(orient) + v * math.sin(orient)) + base + phase)
    stain = _STAIN_COLOR if stain is None else stain
    rgb = 1.0 - g[..., None] * (1.0 - stain)
    if noise is not None:
        rgb = rgb + noise
    return np.clip(rgb, 0.0, 1.0)


def _reference_stats(spec: SyntheticSpec) -> np.ndarray:
    return lab_stats(render_patch(spec, 0, 0, 0.0))


def generate_synthetic(spec: SyntheticSpec) -> list[DomainDataset]:
    """Build one stratified 45/45/10 :class:`DomainDataset` per domain."""
    rng = np.random.default_rng(spec.seed)
    target = _reference_stats(spec)
    side = spec.patch_side
    out = []
    for k in range(spec.num_domains):
        xs, ys = [], []
        for c in range(spec.num_classes):
            for _ in range(spec.samples_per_class):
                phase = rng.uniform(-spec.phase_jitter, spec.phase_jitter)
                stain = np.clip(_STAIN_COLOR + rng.normal(0, spec.stain_jitter, 3), 0.05, 0.95)
                noise = rng.normal(0, spec.noise, (side, side, 3)) if spec.noise > 0 else None
                patch = render_patch(spec, c, k, phase, stain, noise)
                if spec.normalize_stain:
                    patch = reinhard_normalize(patch, target).image
                xs.append(patch.reshape(-1))
                ys.append(c)
        x, y = np.array(xs), np.array(ys)
        tr, va, te = split_45_45_10(y, rng)
        out.append(DomainDataset(k, SampleSet(x[tr], y[tr]), SampleSet(x[va], y[va]), SampleSet(x[te], y[te])))
    if spec.superclasses:
        out = relabel(out, spec.superclasses)
    return out


# ---------------------------------------------------------------------------
# splitting, batching, triplets


def _split_sizes(n: int) -> tuple[int, int]:
    n_train = int(math.floor(0.45 * n + 0.5))
    n_val = int(math.floor(0.9 * n + 0.5)) - n_train
    return n_train, n_val


def _stratified_counts(class_sizes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Per-class (train, val, test) counts: each within one of its exact share, totals exact.

    Starts from the floors and hands out the leftover units as a 0/1 matrix
    with the required row and column sums (greedy, largest demand first).
    """
    fracs = np.array([0.45, 0.45, 0.10])
    n_train, n_val = _split_sizes(int(class_sizes.sum()))
    totals = np.array([n_train, n_val, int(class_sizes.sum()) - n_train - n_val])
    counts = np.floor(np.outer(class_sizes, fracs) + 1e-9).astype(np.int64)
    row_need = class_sizes - counts.sum(axis=1)
    col_need = totals - counts.sum(axis=0)
    for c in sorted(range(len(class_sizes)), key=lambda c: (-row_need[c], rng.random())):
        order = sorted(range(3), key=lambda p: (-col_need[p], rng.random()))
        for p in order[:row_need[c]]:
            if col_need[p] <= 0:
                raise AssertionError("stratified rounding failed")  # unreachable for 3 parts
            counts[c, p] += 1
            col_need[p] -= 1
    return counts


def split_45_45_10(labels, seed) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stratified index split into train/val/test at 45/45/10.

    Each class is shuffled and cut into its own three parts. Part totals are
    exact and every class lands within one sample of its own proportions.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if n < 10:
        raise ValueError(f"need at least 10 samples to split, got {n}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    classes = np.unique(labels)
    members = []
    for c in classes:
        idx = np.flatnonzero(labels == c)
        if len(idx) < 3:
            raise ValueError(f"class {c} has {len(idx)} samples; stratification needs at least 3")
        members.append(rng.permutation(idx))
    counts = _stratified_counts(np.array([len(m) for m in members]), rng)
    parts = [[], [], []]
    for idx, (a, b, _) in zip(members, counts):
        parts[0].append(idx[:a])
        parts[1].append(idx[a:a + b])
        parts[2].append(idx[a + b:])
    return tuple(np.sort(np.concatenate(p)) for p in parts)


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One shuffled pass over ``range(n)``; the last short batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def batch_iter(samples: SampleSet, batch_size: int, rng: np.random.Generator) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Endless stream of ``(x, y)`` batches, reshuffled every epoch."""
    while True:
        for idx in epoch_batches(len(samples), batch_size, rng):
            yield samples.x[idx], samples.y[idx]


class TripletSamplingError(ValueError):
    """The pooled batch cannot form a single valid triplet."""


def sample_triplets(labels, domains, R: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw ``R`` (anchor, positive, negative) index triplets from a pooled batch.

    Anchors are uniform over samples whose class has another member.
    Positives share the anchor's class and come from a different domain when
    one is available; negatives are uniform over other classes.
    """
    labels = np.asarray(labels)
    domains = np.asarray(domains)
    if R < 1:
        raise ValueError("R must be >= 1")
    if len(np.unique(labels)) < 2:
        raise TripletSamplingError("triplet sampling needs at least two classes")
    counts = {c: int(np.sum(labels == c)) for c in np.unique(labels)}
    eligible = np.flatnonzero([counts[c] >= 2 for c in labels])
    if len(eligible) == 0:
        raise TripletSamplingError("no class has two samples to form a positive pair")
    anchors = rng.choice(eligible, size=R)
    pos = np.empty(R, dtype=np.int64)
    neg = np.empty(R, dtype=np.int64)
    for r, a in enumerate(anchors):
        same = np.flatnonzero(labels == labels[a])
        same = same[same != a]
        cross = same[domains[same] != domains[a]]
        pos[r] = rng.choice(cross if len(cross) else same)
        neg[r] = rng.choice(np.flatnonzero(labels != labels[a]))
    return anchors.astype(np.int64), pos, neg


# ---------------------------------------------------------------------------
# MDT binary format


class FormatError(ValueError):
    pass


class MagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


MDT_MAGIC = b"MDT1"
MDT_VERSION = 1
_HEADER = struct.Struct("<IIIIQ")
_SPLITS = ("train", "val", "test")


def save_mdt(datasets: Sequence[DomainDataset], path, num_classes: int | None = None,
             input_dim: int | None = None) -> None:
    """Write datasets as MDT1: header, per-sample records, CRC-32 trailer."""
    datasets = list(datasets)
    if input_dim is None:
        input_dim = datasets[0].input_dim if datasets else 0
    if num_classes is None:
        ys = [s.y for d in datasets for s in (d.train, d.val, d.test) if len(s)]
        num_classes = int(max(y.max() for y in ys)) + 1 if ys else 0
    count = sum(len(d.split(s)) for d in datasets for s in _SPLITS)
    body = bytearray(_HEADER.pack(MDT_VERSION, len(datasets), num_classes, input_dim, count))
    record = np.dtype([("domain", "u1"), ("label", "<u2"), ("split", "u1"), ("x", "<f8", (input_dim,))])
    for d in datasets:
        for tag, name in enumerate(_SPLITS):
            s = d.split(name)
            if s.x.shape[1] != input_dim:
                raise ValueError(f"domain {d.domain} {name}: width {s.x.shape[1]} != {input_dim}")
            recs = np.zeros(len(s), dtype=record)
            recs["domain"] = d.domain
            recs["label"] = s.y
            recs["split"] = tag
            recs["x"] = s.x
            body += recs.tobytes()
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    Path(path).write_bytes(MDT_MAGIC + bytes(body) + struct.pack("<I", crc))


def load_mdt(path) -> list[DomainDataset]:
    raw = Path(path).read_bytes()
    if raw[:4] != MDT_MAGIC:
        raise MagicError(f"bad magic {raw[:4]!r}, expected {MDT_MAGIC!r}")
    if len(raw) < 4 + _HEADER.size + 4:
        raise TruncatedError("file too short for an MDT header")
    version, K, C, input_dim, count = _HEADER.unpack_from(raw, 4)
    if version != MDT_VERSION:
        raise FormatError(f"unsupported MDT version {version}")
    rec_size = 4 + 8 * input_dim
    expected = 4 + _HEADER.size + count * rec_size + 4
    if len(raw) < expected:
        raise TruncatedError(f"payload truncated: {len(raw)} bytes, expected {expected}")
    if len(raw) > expected:
        raise FormatError(f"{len(raw) - expected} trailing bytes after checksum")
    body = raw[4:expected - 4]
    (stored,) = struct.unpack_from("<I", raw, expected - 4)
    actual = zlib.crc32(body) & 0xFFFFFFFF
    if actual != stored:
        raise ChecksumError(f"CRC-32 mismatch over bytes [4, {expected - 4}): stored {stored:08x}, computed {actual:08x}")
    record = np.dtype([("domain", "u1"), ("label", "<u2"), ("split", "u1"), ("x", "<f8", (input_dim,))])
    recs = np.frombuffer(body, dtype=record, count=count, offset=_HEADER.size)
    if count and (recs["domain"].max() >= K or recs["split"].max() > 2):
        raise FormatError("record has out-of-range domain or split tag")
    out = []
    for k in range(K):
        parts = []
        for tag in range(3):
            sel = recs[(recs["domain"] == k) & (recs["split"] == tag)]
            parts.append(SampleSet(np.array(sel["x"], dtype=np.float64).reshape(-1, input_dim),
                                   sel["label"].astype(np.int64)))
        out.append(DomainDataset(k, *parts))
    return out


def import_raw_directory(manifest, input_dim: int | None = None, seed: int = 0) -> list[DomainDataset]:
    """Load user data listed in a manifest of ``path label domain`` lines.

    Each path names a raw little-endian float64 vector, relative to the
    manifest's directory. Domains are split 45/45/10 per class.
    """
    manifest = Path(manifest)
    root = manifest.parent
    xs, ys, ds = [], [], []
    for lineno, raw in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 3:
            raise ValueError(f"{manifest}:{lineno}: expected 'path label domain'")
        vec = np.fromfile(root / parts[0], dtype="<f8").astype(np.float64)
        if input_dim is None:
            input_dim = len(vec)
        if len(vec) != input_dim:
            raise ValueError(f"{parts[0]}: {len(vec)} values, expected {input_dim}")
        xs.append(vec)
        ys.append(int(parts[1]))
        ds.append(int(parts[2]))
    x, y, d = np.array(xs).reshape(len(xs), -1), np.array(ys, dtype=np.int64), np.array(ds)
    rng = np.random.default_rng(seed)
    out = []
    for k in range(int(d.max()) + 1 if len(d) else 0):
        sel = np.flatnonzero(d == k)
        tr, va, te = split_45_45_10(y[sel], rng)
        xk, yk = x[sel], y[sel]
        out.append(DomainDataset(k, SampleSet(xk[tr], yk[tr]), SampleSet(xk[va], yk[va]), SampleSet(xk[te], yk[te])))
    return out
