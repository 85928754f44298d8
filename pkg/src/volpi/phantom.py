"""Synthetic 3D multi-channel phantoms with nested lesions and exact volumes.

A phantom mimics a multi-sequence brain study at desk scale: an integer
label grid built from nested random ellipsoids (class 3 core inside a
class 1 shell inside a class 2 outer shell for the default 4-class setup),
channel intensities drawn from a per-(class, channel) table plus Gaussian
noise, and ground-truth per-class volumes that are exact by construction.

This module also owns the on-disk dataset format (per-case directory with
``meta.json`` + raw little-endian payloads, dataset-level ``manifest.json``)
and deterministic train/calibration/test splitting.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from volpi.errors import FormatError
from volpi.seeding import derive_seed

MAX_GENERATION_ATTEMPTS = 100

INTENSITY_DTYPE = "f32"


def default_intensity_table(n_classes: int, n_channels: int) -> tuple[tuple[float, ...], ...]:
    """Per-(class, channel) mean intensities with distinct class signatures.

    Background sits at a low constant; each foreground class lights up a
    dedicated primary channel plus a weaker secondary one, so classes are
    separable from intensities alone.
    """
    table = np.full((n_classes, n_channels), 0.2)
    table[0, :] = 0.1
    for c in range(1, n_classes):
        table[c, (c - 1) % n_channels] = 0.75
        table[c, c % n_channels] = 0.5
    return tuple(tuple(float(v) for v in row) for row in table)


@dataclass(frozen=True)
class PhantomSpec:
    """Generation recipe for one family of phantoms."""

    grid_size: tuple[int, int, int] = (32, 32, 32)
    n_channels: int = 4
    n_classes: int = 4
    voxel_spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    lesion_count_range: tuple[int, int] = (1, 3)
    lesion_radius_range_mm: tuple[float, float] = (4.0, 10.0)
    noise_sigma: float = 0.05
    intensity_table: tuple[tuple[float, ...], ...] | None = None
    class_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        d, h, w = self.grid_size
        if min(d, h, w) < 8:
            raise ValueError(f"grid_size must be >= 8 per axis, got {self.grid_size}")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2 (background + foreground)")
        if self.n_channels < 1:
            raise ValueError("n_channels must be >= 1")
        if min(self.voxel_spacing_mm) <= 0:
            raise ValueError("voxel_spacing_mm must be positive")
        lo, hi = self.lesion_count_range
        if not (1 <= lo <= hi):
            raise ValueError(f"bad lesion_count_range {self.lesion_count_range}")
        r_lo, r_hi = self.lesion_radius_range_mm
        if not (0 < r_lo <= r_hi):
            raise ValueError(f"bad lesion_radius_range_mm {self.lesion_radius_range_mm}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        extents = [n * s for n, s in zip(self.grid_size, self.voxel_spacing_mm)]
        if 2.0 * r_hi > min(extents):
            raise ValueError(
                f"max lesion radius {r_hi} mm does not fit the grid "
                f"(min extent {min(extents)} mm)"
            )
        if self.intensity_table is None:
            object.__setattr__(
                self, "intensity_table", default_intensity_table(self.n_classes, self.n_channels)
            )
        table = np.asarray(self.intensity_table, dtype=float)
        if table.shape != (self.n_classes, self.n_channels):
            raise ValueError(
                f"intensity_table shape {table.shape} != "
                f"({self.n_classes}, {self.n_channels})"
            )
        if not self.class_names:
            names = ["background"] + [f"class_{c}" for c in range(1, self.n_classes)]
            object.__setattr__(self, "class_names", tuple(names))
        if len(self.class_names) != self.n_classes:
            raise ValueError("class_names length must equal n_classes")

    def to_dict(self) -> dict:
        return {
            "grid_size": list(self.grid_size),
            "n_channels": self.n_channels,
            "n_classes": self.n_classes,
            "voxel_spacing_mm": list(self.voxel_spacing_mm),
            "lesion_count_range": list(self.lesion_count_range),
            "lesion_radius_range_mm": list(self.lesion_radius_range_mm),
            "noise_sigma": self.noise_sigma,
            "intensity_table": [list(r) for r in self.intensity_table],
            "class_names": list(self.class_names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        kwargs = {}
        for key in (
            "grid_size",
            "voxel_spacing_mm",
            "lesion_count_range",
            "lesion_radius_range_mm",
            "class_names",
        ):
            if key in d:
                kwargs[key] = tuple(d[key])
        for key in ("n_channels", "n_classes", "noise_sigma"):
            if key in d:
                kwargs[key] = d[key]
        if d.get("intensity_table") is not None:
            kwargs["intensity_table"] = tuple(tuple(r) for r in d["intensity_table"])
        return cls(**kwargs)


@dataclass(eq=False)
class PhantomCase:
    """One synthetic subject: intensities, labels, and exact truth volumes."""

    intensities: np.ndarray  # [C, D, H, W] float32
    labels: np.ndarray  # [D, H, W] uint8
    spacing_mm: tuple[float, float, float]
    true_volumes_mL: np.ndarray  # [N-1] float64
    case_id: str
    seed: int

    def equals(self, other: "PhantomCase") -> bool:
        return (
            self.case_id == other.case_id
            and self.seed == other.seed
            and self.spacing_mm == other.spacing_mm
            and np.array_equal(self.intensities, other.intensities)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.true_volumes_mL, other.true_volumes_mL)
        )


@dataclass(frozen=True)
class DatasetSplit:
    train_ids: tuple[str, ...]
    calibration_ids: tuple[str, ...]
    test_ids: tuple[str, ...]


def true_volumes(labels: np.ndarray, spacing_mm, n_classes: int | None = None) -> np.ndarray:
    """Per-foreground-class volumes in mL from an integer label grid.

    volume[c] = count(labels == c) * voxel volume / 1000; background
    (class 0) is excluded from the returned vector.
    """
    labels = np.asarray(labels)
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    voxel_mm3 = float(np.prod(np.asarray(spacing_mm, dtype=float)))
    counts = np.bincount(labels.ravel().astype(np.int64), minlength=n_classes)
    return counts[1:n_classes].astype(float) * voxel_mm3 / 1000.0


def _nesting_order(n_classes: int) -> list[int]:
    # Outermost to innermost; for the default 4 classes this paints the
    # class 2 outer shell, then the class 1 shell, then the class 3 core.
    if n_classes == 2:
        return [1]
    order = [2, 1]
    order.extend(range(3, n_classes))
    return order


def _ellipsoid_mask(coords, center_mm, semi_axes_mm) -> np.ndarray:
    zz, yy, xx = coords
    r = (
        ((zz - center_mm[0]) / semi_axes_mm[0]) ** 2
        + ((yy - center_mm[1]) / semi_axes_mm[1]) ** 2
        + ((xx - center_mm[2]) / semi_axes_mm[2]) ** 2
    )
    return r <= 1.0


def generate_phantom(spec: PhantomSpec, seed: int, case_id: str | None = None) -> PhantomCase:
    """Deterministically build one phantom from (spec, seed).

    Lesions are nested ellipsoids with randomized centers and semi-axes;
    generation retries (bounded) until every foreground class has nonzero
    volume, so coverage statistics never see degenerate truths.
    """
    rng = np.random.default_rng(derive_seed("phantom", seed))
    d, h, w = spec.grid_size
    spacing = np.asarray(spec.voxel_spacing_mm, dtype=float)
    extents = np.array([d, h, w], dtype=float) * spacing
    r_lo, r_hi = spec.lesion_radius_range_mm
    order = _nesting_order(spec.n_classes)

    axes = [(np.arange(n) + 0.5) * s for n, s in zip((d, h, w), spacing)]
    coords = np.meshgrid(*axes, indexing="ij", sparse=True)

    labels = None
    for _ in range(MAX_GENERATION_ATTEMPTS):
        candidate = np.zeros((d, h, w), dtype=np.uint8)
        n_lesions = int(rng.integers(spec.lesion_count_range[0], spec.lesion_count_range[1] + 1))
        for _ in range(n_lesions):
            outer = rng.uniform(r_lo, r_hi, size=3)
            center = np.array([rng.uniform(outer[a], extents[a] - outer[a]) for a in range(3)])
            semi = outer
            for cls in order:
                candidate[_ellipsoid_mask(coords, center, semi)] = cls
                semi = semi * rng.uniform(0.55, 0.75)
        present = np.isin(np.arange(1, spec.n_classes), candidate)
        if present.all():
            labels = candidate
            break
    if labels is None:
        raise ValueError(
            f"could not realize all {spec.n_classes - 1} foreground classes in "
            f"{MAX_GENERATION_ATTEMPTS} attempts; spec too constrained"
        )

    table = np.asarray(spec.intensity_table, dtype=np.float32)
    clean = table[labels.astype(np.int64)]  # [D, H, W, C]
    clean = np.moveaxis(clean, -1, 0)  # [C, D, H, W]
    noise = rng.normal(0.0, spec.noise_sigma, size=clean.shape).astype(np.float32)
    intensities = (clean + noise).astype(np.float32)

    return PhantomCase(
        intensities=intensities,
        labels=labels,
        spacing_mm=tuple(float(s) for s in spec.voxel_spacing_mm),
        true_volumes_mL=true_volumes(labels, spacing, n_classes=spec.n_classes),
        case_id=case_id if case_id is not None else f"case_{seed:08d}",
        seed=seed,
    )


def _dump_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_case(case: PhantomCase, case_dir: str) -> None:
    """Persist one case as meta.json + intensities.bin + labels.bin."""
    os.makedirs(case_dir, exist_ok=True)
    c, rest = case.intensities.shape[0], case.intensities.shape[1:]
    meta = {
        "case_id": case.case_id,
        "seed": case.seed,
        "shape": [int(c), *map(int, rest)],
        "dtype": INTENSITY_DTYPE,
        "spacing_mm": list(case.spacing_mm),
        "class_names": [f"class_{i}" for i in range(len(case.true_volumes_mL) + 1)],
        "true_volumes_mL": [float(v) for v in case.true_volumes_mL],
    }
    meta["class_names"][0] = "background"
    _dump_json(os.path.join(case_dir, "meta.json"), meta)
    with open(os.path.join(case_dir, "intensities.bin"), "wb") as fh:
        fh.write(np.ascontiguousarray(case.intensities, dtype="<f4").tobytes())
    with open(os.path.join(case_dir, "labels.bin"), "wb") as fh:
        fh.write(np.ascontiguousarray(case.labels, dtype=np.uint8).tobytes())


REQUIRED_META_FIELDS = (
    "case_id",
    "seed",
    "shape",
    "dtype",
    "spacing_mm",
    "true_volumes_mL",
)


def read_case(case_dir: str) -> PhantomCase:
    """Load a case directory, validating header/payload consistency."""
    meta_path = os.path.join(case_dir, "meta.json")
    try:
        with open(meta_path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        raise FormatError(f"missing meta.json in {case_dir}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt meta.json in {case_dir}: {exc}") from None
    for fld in REQUIRED_META_FIELDS:
        if fld not in meta:
            raise FormatError(f"meta.json missing field '{fld}' in {case_dir}")
    if meta["dtype"] != INTENSITY_DTYPE:
        raise FormatError(f"unsupported dtype '{meta['dtype']}' in field 'dtype'")
    shape = tuple(int(v) for v in meta["shape"])
    if len(shape) != 4:
        raise FormatError(f"field 'shape' must be [C, D, H, W], got {meta['shape']}")

    with open(os.path.join(case_dir, "intensities.bin"), "rb") as fh:
        raw = fh.read()
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise FormatError(
            f"intensities.bin holds {len(raw)} bytes, header shape {shape} "
            f"requires {expected}"
        )
    intensities = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()

    with open(os.path.join(case_dir, "labels.bin"), "rb") as fh:
        raw = fh.read()
    expected = int(np.prod(shape[1:]))
    if len(raw) != expected:
        raise FormatError(
            f"labels.bin holds {len(raw)} bytes, header shape {shape[1:]} "
            f"requires {expected}"
        )
    labels = np.frombuffer(raw, dtype=np.uint8).reshape(shape[1:]).copy()

    spacing = tuple(float(s) for s in meta["spacing_mm"])
    stored = np.asarray(meta["true_volumes_mL"], dtype=float)
    n_classes = stored.size + 1
    recomputed = true_volumes(labels, spacing, n_classes=n_classes)
    if not np.array_equal(stored, recomputed):
        raise FormatError(
            f"field 'true_volumes_mL' {stored.tolist()} inconsistent with "
            f"label payload (recomputed {recomputed.tolist()})"
        )
    return PhantomCase(
        intensities=intensities,
        labels=labels,
        spacing_mm=spacing,
        true_volumes_mL=stored,
        case_id=str(meta["case_id"]),
        seed=int(meta["seed"]),
    )


def split_dataset(ids, fractions, seed: int) -> DatasetSplit:
    """Deterministic disjoint split with largest-remainder fold sizes."""
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    fractions = [float(f) for f in fractions]
    if len(fractions) != 3:
        raise ValueError("need exactly 3 fractions (train, calibration, test)")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    n = len(ids)
    exact = [f * n for f in fractions]
    sizes = [math.floor(e) for e in exact]
    remainders = [e - s for e, s in zip(exact, sizes)]
    leftover = n - sum(sizes)
    # Ties in fractional remainders break toward the earlier fold.
    for idx in sorted(range(3), key=lambda i: (-remainders[i], i))[:leftover]:
        sizes[idx] += 1
    if min(sizes) == 0:
        names = ("train", "calibration", "test")
        empty = names[sizes.index(0)]
        raise ValueError(f"{empty} fold would be empty for n={n}, fractions={fractions}")
    rng = np.random.default_rng(derive_seed("split", seed))
    order = rng.permutation(n)
    shuffled = [sorted(ids)[i] for i in order]
    a, b = sizes[0], sizes[0] + sizes[1]
    return DatasetSplit(
        train_ids=tuple(shuffled[:a]),
        calibration_ids=tuple(shuffled[a:b]),
        test_ids=tuple(shuffled[b:]),
    )


def case_dir(root: str, case_id: str) -> str:
    return os.path.join(root, "cases", case_id)


def write_manifest(root: str, spec: PhantomSpec, case_ids, split: DatasetSplit) -> None:
    payload = {
        "spec": spec.to_dict(),
        "case_ids": list(case_ids),
        "split": {
            "train_ids": list(split.train_ids),
            "calibration_ids": list(split.calibration_ids),
            "test_ids": list(split.test_ids),
        },
    }
    _dump_json(os.path.join(root, "manifest.json"), payload)


def read_manifest(root: str) -> tuple[PhantomSpec, list[str], DatasetSplit]:
    path = os.path.join(root, "manifest.json")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except FileNotFoundError:
        raise FormatError(f"missing manifest.json under {root}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt manifest.json: {exc}") from None
    for fld in ("spec", "case_ids", "split"):
        if fld not in payload:
            raise FormatError(f"manifest.json missing field '{fld}'")
    spec = PhantomSpec.from_dict(payload["spec"])
    split = DatasetSplit(
        train_ids=tuple(payload["split"]["train_ids"]),
        calibration_ids=tuple(payload["split"]["calibration_ids"]),
        test_ids=tuple(payload["split"]["test_ids"]),
    )
    return spec, list(payload["case_ids"]), split


def load_cases(root: str, ids) -> list[PhantomCase]:
    return [read_case(case_dir(root, cid)) for cid in ids]
