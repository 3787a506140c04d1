"""Deterministic two-domain synthetic detection benchmark.

Each image is a G x G grid of observation vectors. An object of class k
stamps a class prototype plus a linear encoding of its box into its center
cell; background cells carry a background prototype. The target domain
applies, per class, a fixed rotation-plus-translation whose magnitude is
the configured class gap, and a global style shift to every cell. Class
gaps are therefore known ground truth against which transferability
estimates can be checked.

Everything is a pure function of (config, domain, count, split_seed); each
sample's noise stream is derived from the seed and the sample index, so
generation is order-independent and bit-reproducible.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict
from typing import Iterable, NamedTuple

import numpy as np

from .binfile import read_container, write_container
from .rng import make_rng

BOX_SIZE_MIN = 0.08
BOX_SIZE_MAX = 0.30
BOX_REF_SIZE = 0.15          # mid-range reference for the log-size encoding
PROTO_SCALE = 1.0
POSENC_SCALE = 0.6
ROT_RAD_PER_GAP = 0.7        # rotation angle per unit class gap


class Annotation(NamedTuple):
    class_id: int            # 1..K
    cx: float
    cy: float
    w: float
    h: float

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)


@dataclass(frozen=True)
class GenConfig:
    grid_size: int = 8
    obs_dim: int = 16
    num_classes: int = 3
    objects_min: int = 1
    objects_max: int = 4
    noise_sigma: float = 0.1
    class_gaps: tuple[float, ...] = (0.0, 0.5, 1.5)
    style_shift: float = 0.3
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.num_classes < 1:
            problems.append(f"num_classes must be >= 1, got {self.num_classes}")
        if len(self.class_gaps) != self.num_classes:
            problems.append(
                f"class_gaps has {len(self.class_gaps)} entries for {self.num_classes} classes")
        if any(g < 0 for g in self.class_gaps):
            problems.append("class_gaps must be nonnegative")
        if not 1 <= self.objects_min <= self.objects_max:
            problems.append(f"bad objects range [{self.objects_min}, {self.objects_max}]")
        if self.objects_max > self.grid_size ** 2:
            problems.append("objects_max exceeds the number of grid cells")
        if self.noise_sigma < 0 or self.style_shift < 0:
            problems.append("noise_sigma and style_shift must be nonnegative")
        if problems:
            raise ValueError("; ".join(problems))
        object.__setattr__(self, "class_gaps", tuple(float(g) for g in self.class_gaps))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_gaps"] = list(self.class_gaps)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        d = dict(d)
        d["class_gaps"] = tuple(d["class_gaps"])
        return cls(**d)


class DomainStructure:
    """Fixed (seed-derived) vectors shared by both domains of a benchmark."""

    def __init__(self, config: GenConfig):
        rng = make_rng(config.seed, "structure")
        dim, k = config.obs_dim, config.num_classes

        def unit(n: int = 1) -> np.ndarray:
            v = rng.standard_normal((n, dim))
            return v / np.linalg.norm(v, axis=1, keepdims=True)

        self.background = PROTO_SCALE * unit()[0]
        self.prototypes = PROTO_SCALE * unit(k)              # row k-1 = class k
        self.box_encoder = rng.standard_normal((dim, 4))     # linear box embedding
        self.style_dir = unit()[0]
        self.shift_dirs = unit(k)
        # rotation planes: orthonormal pair per class
        self.rot_planes = []
        for _ in range(k):
            q = np.linalg.qr(rng.standard_normal((dim, 2)))[0]
            self.rot_planes.append((q[:, 0], q[:, 1]))

    def rotation(self, class_id: int, gap: float) -> np.ndarray:
        q1, q2 = self.rot_planes[class_id - 1]
        theta = ROT_RAD_PER_GAP * gap
        c, s = np.cos(theta), np.sin(theta)
        eye = np.eye(q1.size)
        return (eye + (c - 1.0) * (np.outer(q1, q1) + np.outer(q2, q2))
                + s * (np.outer(q2, q1) - np.outer(q1, q2)))


def target_transform(config: GenConfig, class_id: int, vec: np.ndarray) -> np.ndarray:
    """Per-class target-domain perturbation (identity when the gap is zero)."""
    structure = DomainStructure(config)
    gap = config.class_gaps[class_id - 1]
    rot = structure.rotation(class_id, gap)
    return rot @ vec + gap * structure.shift_dirs[class_id - 1]


class LabelGuard:
    """Counts reads of annotations that are flagged unavailable to training."""

    def __init__(self):
        self.count = 0


class Sample:
    """One grid image: cells (G, G, obs_dim), annotations, domain tag.

    Cell (u, v) covers x in [u/G, (u+1)/G) and y in [v/G, (v+1)/G).
    When `labels_hidden` is set, every read through `.annotations` bumps the
    guard counter; evaluation code must use `annotations_for_eval()`.
    """

    __slots__ = ("cells", "_annotations", "domain", "labels_hidden", "guard")

    def __init__(self, cells: np.ndarray, annotations: list[Annotation], domain: str,
                 labels_hidden: bool = False, guard: LabelGuard | None = None):
        self.cells = cells
        self._annotations = list(annotations)
        self.domain = domain
        self.labels_hidden = labels_hidden
        self.guard = guard if guard is not None else LabelGuard()

    @property
    def annotations(self) -> list[Annotation]:
        if self.labels_hidden:
            self.guard.count += 1
        return list(self._annotations)

    def annotations_for_eval(self) -> list[Annotation]:
        return list(self._annotations)


@dataclass
class Dataset:
    samples: list[Sample]
    gen_config: GenConfig
    split: str                      # train | test
    domain: str                     # source | target
    guard: LabelGuard = field(default_factory=LabelGuard)

    def __len__(self) -> int:
        return len(self.samples)

    def hide_labels(self) -> "Dataset":
        """Copy with annotations flagged unavailable to training."""
        guard = LabelGuard()
        samples = [Sample(s.cells, s._annotations, s.domain, True, guard)
                   for s in self.samples]
        return Dataset(samples, self.gen_config, self.split, self.domain, guard)


def _draw_box(rng: np.random.Generator, cell: int, grid: int) -> tuple[float, float]:
    """Center coordinate and size for one axis, keeping the box inside [0,1]."""
    lo = max(0.1, 0.04 * grid - cell)
    hi = min(0.9, 0.96 * grid - cell)
    c = (cell + rng.uniform(lo, hi)) / grid
    size_hi = min(BOX_SIZE_MAX, 2.0 * c, 2.0 * (1.0 - c))
    return c, rng.uniform(BOX_SIZE_MIN, size_hi)


def _generate_sample(config: GenConfig, structure: DomainStructure, domain: str,
                     split_seed: int, index: int, guard: LabelGuard) -> Sample:
    g, dim = config.grid_size, config.obs_dim
    rng = make_rng(config.seed, "sample", domain, split_seed, index)
    n_obj = int(rng.integers(config.objects_min, config.objects_max + 1))
    cells_flat = rng.choice(g * g, size=n_obj, replace=False)
    classes = rng.integers(1, config.num_classes + 1, size=n_obj)

    cells = np.tile(structure.background, (g, g, 1))
    annotations = []
    rotations = {k: structure.rotation(k, config.class_gaps[k - 1])
                 for k in np.unique(classes)}
    for flat, k in zip(cells_flat, classes):
        u, v = int(flat) // g, int(flat) % g
        cx, w = _draw_box(rng, u, g)
        cy, h = _draw_box(rng, v, g)
        fx, fy = cx * g - u, cy * g - v
        box_feats = np.array([fx - 0.5, fy - 0.5,
                              np.log(w / BOX_REF_SIZE), np.log(h / BOX_REF_SIZE)])
        signal = structure.prototypes[k - 1] + POSENC_SCALE * (structure.box_encoder @ box_feats)
        if domain == "target":
            gap = config.class_gaps[k - 1]
            signal = rotations[int(k)] @ signal + gap * structure.shift_dirs[k - 1]
        cells[u, v] = signal
        annotations.append(Annotation(int(k), float(cx), float(cy), float(w), float(h)))

    cells += config.noise_sigma * rng.standard_normal((g, g, dim))
    if domain == "target":
        cells += config.style_shift * structure.style_dir
    return Sample(cells, annotations, domain, guard=guard)


def generate_dataset(config: GenConfig, domain: str, count: int, split_seed: int) -> Dataset:
    if domain not in ("source", "target"):
        raise ValueError(f"domain must be 'source' or 'target', got {domain!r}")
    if count <= 0:
        raise ValueError(f"count must be >= 1, got {count}")
    structure = DomainStructure(config)
    guard = LabelGuard()
    samples = [_generate_sample(config, structure, domain, split_seed, i, guard)
               for i in range(count)]
    split = "train" if split_seed % 2 == 0 else "test"
    return Dataset(samples, config, split, domain, guard)


def sample_ufda_subset(dataset: Dataset, n: int, seed: int) -> Dataset:
    """Union of n images drawn per class, labels flagged unavailable.

    An image containing several classes may satisfy several quotas, so the
    result holds between n and n*K images.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    by_class: dict[int, list[int]] = {k: [] for k in range(1, dataset.gen_config.num_classes + 1)}
    for i, s in enumerate(dataset.samples):
        for k in {a.class_id for a in s.annotations_for_eval()}:
            by_class[k].append(i)
    chosen: set[int] = set()
    rng = make_rng(seed, "ufda-subset")
    for k in sorted(by_class):
        pool = by_class[k]
        if len(pool) < n:
            raise ValueError(
                f"class {k} appears in only {len(pool)} images, need {n}")
        chosen.update(int(i) for i in rng.choice(pool, size=n, replace=False))
    guard = LabelGuard()
    samples = [Sample(dataset.samples[i].cells, dataset.samples[i]._annotations,
                      dataset.samples[i].domain, True, guard)
               for i in sorted(chosen)]
    return Dataset(samples, dataset.gen_config, dataset.split, dataset.domain, guard)


def dataset_digest(dataset: Dataset) -> str:
    """SHA-256 over a canonical byte serialization (config, tags, samples)."""
    h = hashlib.sha256()
    h.update(json.dumps(dataset.gen_config.to_dict(), sort_keys=True).encode())
    h.update(f"|{dataset.split}|{dataset.domain}|{len(dataset.samples)}|".encode())
    for s in dataset.samples:
        h.update(np.ascontiguousarray(s.cells, dtype="<f8").tobytes())
        anns = s.annotations_for_eval()
        h.update(struct.pack("<q", len(anns)))
        for a in anns:
            h.update(struct.pack("<q4d", a.class_id, a.cx, a.cy, a.w, a.h))
    return h.hexdigest()


def save_dataset(dataset: Dataset, path: str) -> None:
    cells = np.stack([s.cells for s in dataset.samples])
    rows = []
    for i, s in enumerate(dataset.samples):
        for a in s.annotations_for_eval():
            rows.append([i, a.class_id, a.cx, a.cy, a.w, a.h])
    table = np.asarray(rows, dtype=np.float64).reshape(-1, 6)
    header = {
        "kind": "dataset",
        "gen_config": dataset.gen_config.to_dict(),
        "split": dataset.split,
        "domain": dataset.domain,
        "labels_hidden": [bool(s.labels_hidden) for s in dataset.samples],
        "digest": dataset_digest(dataset),
    }
    write_container(path, header, {"cells": cells, "annotations": table})


def load_dataset(path: str) -> Dataset:
    header, arrays = read_container(path)
    if header.get("kind") != "dataset":
        raise ValueError(f"{path}: not a dataset file")
    config = GenConfig.from_dict(header["gen_config"])
    cells, table = arrays["cells"], arrays["annotations"]
    per_sample: dict[int, list[Annotation]] = {}
    for row in table:
        per_sample.setdefault(int(row[0]), []).append(
            Annotation(int(row[1]), *[float(x) for x in row[2:]]))
    guard = LabelGuard()
    samples = [Sample(cells[i], per_sample.get(i, []), header["domain"],
                      header["labels_hidden"][i], guard)
               for i in range(cells.shape[0])]
    return Dataset(samples, config, header["split"], header["domain"], guard)


def class_mean_gap(source: Iterable[Sample], target: Iterable[Sample],
                   config: GenConfig) -> np.ndarray:
    """Distance between class-conditional mean observations across domains."""
    k = config.num_classes
    g = config.grid_size
    sums = {d: np.zeros((k, config.obs_dim)) for d in ("source", "target")}
    counts = {d: np.zeros(k) for d in ("source", "target")}
    for tag, split in (("source", source), ("target", target)):
        for s in split:
            for a in s.annotations_for_eval():
                u, v = min(int(a.cx * g), g - 1), min(int(a.cy * g), g - 1)
                sums[tag][a.class_id - 1] += s.cells[u, v]
                counts[tag][a.class_id - 1] += 1
    means_s = sums["source"] / np.maximum(counts["source"], 1)[:, None]
    means_t = sums["target"] / np.maximum(counts["target"], 1)[:, None]
    return np.linalg.norm(means_s - means_t, axis=1)
