"""Seeded ellipsoid phantoms standing in for annotated 3D scans."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import volume_io
from .errors import FormatError, IoError, SpecError


@dataclass
class ShapeClass:
    count: int = 4
    radius_min: float = 5.0
    radius_max: float = 9.0
    intensity_mean: float = 1.0
    intensity_std: float = 0.25


@dataclass
class PhantomSpec:
    shape: tuple = (32, 32, 32)
    num_classes: int = 2
    classes: list = field(default_factory=lambda: [ShapeClass()])
    background_mean: float = 0.0
    background_std: float = 0.1
    noise_std: float = 0.35
    blur_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.classes = [c if isinstance(c, ShapeClass) else ShapeClass(**c) for c in self.classes]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape"] = list(self.shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return cls(**d)

    def validate(self) -> None:
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise SpecError(f"volume shape must be three positive extents, got {self.shape}")
        if self.num_classes < 2:
            raise SpecError("need at least two classes")
        if len(self.classes) != self.num_classes - 1:
            raise SpecError(f"{self.num_classes} classes need {self.num_classes - 1} foreground shape specs")
        for c in self.classes:
            if c.count < 0 or c.radius_min <= 0 or c.radius_min > c.radius_max:
                raise SpecError(f"invalid shape class {c}")
            if 2 * math.ceil(c.radius_max) + 1 > min(self.shape):
                raise SpecError(f"radius {c.radius_max} does not fit in volume {self.shape}")
        if self.noise_std < 0 or self.blur_sigma < 0:
            raise SpecError("noise and blur must be non-negative")


@dataclass
class Sample:
    image: np.ndarray   # [1, D, H, W] float64, standardized
    label: np.ndarray   # [D, H, W] uint8


@dataclass
class Dataset:
    labeled: list
    unlabeled: list
    test: list
    spec: PhantomSpec | None = None


MAX_ATTEMPTS = 1000


def _ellipsoid(grid, center, radii) -> np.ndarray:
    zz, yy, xx = grid
    return (((zz - center[0]) / radii[0]) ** 2 + ((yy - center[1]) / radii[1]) ** 2
            + ((xx - center[2]) / radii[2]) ** 2) <= 1.0


def generate(spec: PhantomSpec) -> Sample:
    """Place non-overlapping axis-aligned ellipsoids and render a noisy image."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    grid = np.indices(spec.shape, dtype=np.float64)
    label = np.zeros(spec.shape, dtype=np.uint8)
    intensity = np.full(spec.shape, rng.normal(spec.background_mean, spec.background_std))
    for cls_index, cls in enumerate(spec.classes, start=1):
        placed, attempts = 0, 0
        while placed < cls.count and attempts < MAX_ATTEMPTS:
            attempts += 1
            radii = rng.uniform(cls.radius_min, cls.radius_max, size=3)
            lo = np.ceil(radii)
            hi = np.array(spec.shape) - 1 - np.ceil(radii)
            center = rng.uniform(lo, hi)
            mask = _ellipsoid(grid, center, radii)
            if not mask.any() or label[mask].any():
                continue
            label[mask] = cls_index
            intensity[mask] = rng.normal(cls.intensity_mean, cls.intensity_std)
            placed += 1
    image = gaussian_filter(intensity, spec.blur_sigma) if spec.blur_sigma > 0 else intensity
    if spec.noise_std > 0:
        image = image + rng.normal(0.0, spec.noise_std, size=spec.shape)
    return Sample(image=standardize(image)[None], label=label)


def standardize(image: np.ndarray) -> np.ndarray:
    std = image.std()
    if std == 0:
        return np.zeros_like(image)
    return (image - image.mean()) / std


def split_counts(count: int, labeled_ratio: float) -> tuple[int, int]:
    if not 0.0 < labeled_ratio <= 1.0:
        raise SpecError(f"labeled ratio must lie in (0, 1], got {labeled_ratio}")
    n_lab = int(math.floor(count * labeled_ratio + 1e-9))
    if n_lab < 1:
        raise SpecError(f"ratio {labeled_ratio} of {count} leaves no labeled sample")
    return n_lab, count - n_lab


def sample_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def make_dataset(spec: PhantomSpec, count: int, labeled_ratio: float, seed: int,
                 test_count: int = 10) -> Dataset:
    """Generate ``count`` training phantoms split labeled/unlabeled, plus a test set.

    ``floor(count * ratio)`` samples are labeled; the rest are unlabeled.
    Test phantoms are drawn from independent seeds.
    """
    if count < 10:
        raise SpecError("need at least 10 training samples")
    n_lab, _ = split_counts(count, labeled_ratio)
    seeds = sample_seeds(seed, count + test_count)
    pool = [generate(replace(spec, seed=s)) for s in seeds[:count]]
    test = [generate(replace(spec, seed=s)) for s in seeds[count:]]
    order = np.random.default_rng(seed).permutation(count)
    labeled = [pool[i] for i in order[:n_lab]]
    unlabeled = [pool[i] for i in order[n_lab:]]
    return Dataset(labeled=labeled, unlabeled=unlabeled, test=test, spec=spec)


def resplit(dataset: Dataset, labeled_ratio: float, seed: int) -> Dataset:
    """Re-divide the labeled+unlabeled pool with a new ratio (test set untouched)."""
    pool = dataset.labeled + dataset.unlabeled
    n_lab, _ = split_counts(len(pool), labeled_ratio)
    order = np.random.default_rng(seed).permutation(len(pool))
    return Dataset(labeled=[pool[i] for i in order[:n_lab]], unlabeled=[pool[i] for i in order[n_lab:]],
                   test=dataset.test, spec=dataset.spec)


MANIFEST = "manifest.json"


def save_dataset(dataset: Dataset, out_dir, meta: dict | None = None) -> str:
    """Write every sample as EPLV files plus a JSON manifest; return the manifest path.

    Unlabeled samples keep their label files for evaluation only; the trainer
    reads just their images.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    splits = {}
    for split in ("labeled", "unlabeled", "test"):
        rows = []
        for i, s in enumerate(getattr(dataset, split)):
            name = f"{split}_{i:04d}"
            volume_io.write(out / "images" / f"{name}.eplv", s.image)
            volume_io.write(out / "labels" / f"{name}.eplv", s.label)
            rows.append({"id": name, "image": f"images/{name}.eplv", "label": f"labels/{name}.eplv"})
        splits[split] = rows
    doc = {"spec": dataset.spec.to_dict() if dataset.spec else None, "splits": splits,
           "counts": {k: len(v) for k, v in splits.items()}, **(meta or {})}
    path = out / MANIFEST
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return str(path)


def load_dataset(data_dir) -> Dataset:
    root = Path(data_dir)
    try:
        doc = json.loads((root / MANIFEST).read_text())
    except FileNotFoundError as exc:
        raise IoError(f"no {MANIFEST} in {root}") from exc
    except ValueError as exc:
        raise FormatError(f"corrupt manifest: {exc}") from exc

    def load(rows):
        return [Sample(image=volume_io.read(root / r["image"]), label=volume_io.read(root / r["label"])) for r in rows]

    spec = PhantomSpec.from_dict(doc["spec"]) if doc.get("spec") else None
    return Dataset(labeled=load(doc["splits"]["labeled"]), unlabeled=load(doc["splits"]["unlabeled"]),
                   test=load(doc["splits"]["test"]), spec=spec)
