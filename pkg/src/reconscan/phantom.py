"""Synthetic 3D phantoms: healthy baseline anatomy plus injected anomalies.

The healthy phantom is a stack of nested ellipsoids with smooth intensity
ramps, mirror-symmetric about the first (left-right) axis, plus optional
Gaussian noise. Anomalies are local, parameterized edits inside an
axis-aligned region; voxels outside the region are untouched bit-for-bit
and the mean absolute change inside grows monotonically with magnitude.

Deliberately simple geometry: the point is a controllable benchmark with
known inliers/outliers, not anatomical realism.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .data_pipeline import Label, Volume, save_volume
from .errors import RegionError, SpecError

# desk-scale defaults: 64^3 grid, informative slices [28, 44)
DESK_EXTENT = 64
DESK_SLICE_RANGE = (28, 44)

MIN_EXTENT = 32
MAX_NOISE_SIGMA = 0.2


@dataclass(frozen=True)
class Ellipsoid:
    """One smooth-ramped ellipsoid in normalized [-1, 1] coordinates.

    ``intensity`` is added inside the shape (negative values carve
    cavities); ``mirrored`` also applies the left-right twin.
    """

    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]
    intensity: float
    ramp: float = 0.08
    mirrored: bool = False


def default_anatomy() -> tuple[Ellipsoid, ...]:
    return (
        Ellipsoid((0.0, 0.0, 0.0), (0.88, 0.82, 0.82), 0.35),  # head
        Ellipsoid((0.0, 0.0, 0.0), (0.70, 0.64, 0.62), 0.30),  # brain
        Ellipsoid((0.0, -0.05, 0.0), (0.46, 0.42, 0.40), 0.15),  # deep tissue
        Ellipsoid((0.20, 0.05, 0.0), (0.13, 0.20, 0.26), -0.45, mirrored=True),  # cavities
    )


@dataclass(frozen=True)
class PhantomSpec:
    extents: tuple[int, int, int] = (DESK_EXTENT, DESK_EXTENT, DESK_EXTENT)
    shapes: tuple[Ellipsoid, ...] = field(default_factory=default_anatomy)
    noise_sigma: float = 0.02
    seed: int = 0

    def validate(self) -> None:
        if len(self.extents) != 3 or any(e < MIN_EXTENT for e in self.extents):
            raise SpecError(
                f"phantom extents must all be >= {MIN_EXTENT}, got {self.extents}"
            )
        if not (0.0 <= self.noise_sigma <= MAX_NOISE_SIGMA):
            raise SpecError(
                f"noise sigma must lie in [0, {MAX_NOISE_SIGMA}], got {self.noise_sigma}"
            )
        if not self.shapes:
            raise SpecError("phantom needs at least one shape")


class AnomalyKind(str, Enum):
    CAVITY_ENLARGE = "cavity_enlarge"
    WALL_THICKEN = "wall_thicken"
    TEXTURE_SHIFT = "texture_shift"


@dataclass(frozen=True)
class Region:
    """Half-open axis-aligned voxel box [lo, hi) per axis."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(a, b) for a, b in zip(self.lo, self.hi))


@dataclass(frozen=True)
class AnomalySpec:
    kind: AnomalyKind
    magnitude: float
    region: Region

    def validate(self, extents: tuple[int, int, int]) -> None:
        if not (0.0 < self.magnitude <= 1.0):
            raise SpecError(f"anomaly magnitude must lie in (0, 1], got {self.magnitude}")
        for lo, hi, extent in zip(self.region.lo, self.region.hi, extents):
            if not (0 <= lo < hi <= extent):
                raise RegionError(
                    f"region [{self.region.lo}, {self.region.hi}) exceeds grid {extents}"
                )


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _axis_coords(n: int) -> np.ndarray:
    # symmetric about the grid center so index i and n-1-i negate exactly
    half = (n - 1) / 2.0
    return (np.arange(n, dtype=np.float64) - half) / half


def _ellipsoid_field(shape: Ellipsoid, coords) -> np.ndarray:
    x, y, z = coords
    cx, cy, cz = shape.center
    ax, ay, az = shape.semi_axes
    r = np.sqrt(
        ((x[:, None, None] - cx) / ax) ** 2
        + ((y[None, :, None] - cy) / ay) ** 2
        + ((z[None, None, :] - cz) / az) ** 2
    )
    return shape.intensity * _smoothstep((1.0 - r) / shape.ramp)


def base_field(spec: PhantomSpec) -> np.ndarray:
    """The noiseless anatomy; mirror-symmetric about axis 0 by construction."""
    spec.validate()
    nx, ny, nz = spec.extents
    coords = (_axis_coords(nx), _axis_coords(ny), _axis_coords(nz))
    field_sum = np.zeros(spec.extents, dtype=np.float64)
    for shape in spec.shapes:
        field_sum += _ellipsoid_field(shape, coords)
        if shape.mirrored:
            cx, cy, cz = shape.center
            twin = Ellipsoid(
                (-cx, cy, cz), shape.semi_axes, shape.intensity, shape.ramp
            )
            field_sum += _ellipsoid_field(twin, coords)
    return np.clip(field_sum, 0.0, None)


def generate_healthy(
    spec: PhantomSpec, subject_id: str = "phantom", scan_id: str = "phantom-scan",
    timepoint: int = 0,
) -> Volume:
    """Deterministic healthy phantom for the given spec and seed."""
    base = base_field(spec)
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        base = np.clip(base + rng.normal(0.0, spec.noise_sigma, base.shape), 0.0, None)
    return Volume(
        voxels=base.astype(np.float32),
        subject_id=subject_id,
        scan_id=scan_id,
        timepoint=timepoint,
        label=Label.HEALTHY,
    )


def _region_weight(region: Region) -> np.ndarray:
    # separable quartic bump: 1 at the region center, 0 at its faces
    axes = []
    for lo, hi in zip(region.lo, region.hi):
        n = hi - lo
        center = (n - 1) / 2.0
        half = max(center, 0.5)
        t = (np.arange(n, dtype=np.float64) - center) / half
        axes.append((1.0 - np.clip(t * t, 0.0, 1.0)) ** 2)
    return (
        axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    )


def inject_anomaly(volume: Volume, anomaly: AnomalySpec) -> Volume:
    """Apply a local structural edit; only the region changes."""
    if volume.label != Label.HEALTHY:
        raise SpecError("anomalies are injected into healthy volumes only")
    anomaly.validate(volume.shape)
    voxels = volume.voxels.copy()
    sl = anomaly.region.slices()
    patch = voxels[sl].astype(np.float64)
    w = _region_weight(anomaly.region)
    m = anomaly.magnitude
    if anomaly.kind == AnomalyKind.CAVITY_ENLARGE:
        patch = patch * (1.0 - m * w)
    elif anomaly.kind == AnomalyKind.WALL_THICKEN:
        patch = patch + m * w * (0.9 - patch)
    elif anomaly.kind == AnomalyKind.TEXTURE_SHIFT:
        lo = anomaly.region.lo
        grids = np.meshgrid(
            *[np.arange(a, b) for a, b in zip(lo, anomaly.region.hi)], indexing="ij"
        )
        ripple = np.sin(2.0 * np.pi * (grids[0] + grids[1] + grids[2]) / 4.0)
        patch = patch + m * 0.25 * w * ripple
    else:  # pragma: no cover
        raise SpecError(f"unknown anomaly kind {anomaly.kind}")
    voxels[sl] = patch.astype(np.float32)
    return Volume(
        voxels=voxels,
        subject_id=volume.subject_id,
        scan_id=volume.scan_id,
        timepoint=volume.timepoint,
        label=Label.ANOMALOUS,
    )


def default_anomaly_region(extents: tuple[int, int, int]) -> Region:
    """A box around the right cavity, spanning the desk-scale slice range."""
    nx, ny, nz = extents
    lo = (int(round(0.41 * nx)), int(round(0.31 * ny)), int(round(0.28 * nz)))
    hi = (int(round(0.80 * nx)), int(round(0.75 * ny)), int(round(0.72 * nz)))
    return Region(lo, hi)


@dataclass
class CohortConfig:
    """Roster of phantom subjects mirroring a small longitudinal study."""

    extent: int = DESK_EXTENT
    n_train_healthy: int = 6
    n_test_healthy: int = 3
    n_test_anomalous: int = 10
    scans_per_subject: int = 2
    noise_sigma: float = 0.02
    anomaly_kind: AnomalyKind = AnomalyKind.CAVITY_ENLARGE
    magnitude_range: tuple[float, float] = (0.6, 1.0)
    jitter: float = 0.04
    seed: int = 0
    volume_format: str = "npy"


def _jittered_anatomy(rng: np.random.Generator, jitter: float) -> tuple[Ellipsoid, ...]:
    shapes = []
    for shape in default_anatomy():
        scale = rng.uniform(1.0 - jitter, 1.0 + jitter, size=3)
        gain = rng.uniform(1.0 - jitter, 1.0 + jitter)
        shapes.append(
            Ellipsoid(
                shape.center,
                tuple(float(a * s) for a, s in zip(shape.semi_axes, scale)),
                float(shape.intensity * gain),
                shape.ramp,
                shape.mirrored,
            )
        )
    return tuple(shapes)


def generate_cohort(config: CohortConfig, out_dir) -> Path:
    """Write a labeled phantom cohort plus its CSV manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    extents = (config.extent,) * 3
    master = np.random.default_rng(config.seed)
    rows = []
    specs_log = []

    roster = (
        [("train-h", i, Label.HEALTHY) for i in range(config.n_train_healthy)]
        + [("test-h", i, Label.HEALTHY) for i in range(config.n_test_healthy)]
        + [("test-a", i, Label.ANOMALOUS) for i in range(config.n_test_anomalous)]
    )
    for group, idx, label in roster:
        subject_id = f"{group}{idx:02d}"
        subject_rng = np.random.default_rng(master.integers(0, 2**63 - 1))
        shapes = _jittered_anatomy(subject_rng, config.jitter)
        magnitude = float(
            subject_rng.uniform(*config.magnitude_range)
        )
        for timepoint in range(config.scans_per_subject):
            scan_id = f"{subject_id}-t{timepoint}"
            scan_seed = int(subject_rng.integers(0, 2**63 - 1))
            spec = PhantomSpec(
                extents=extents,
                shapes=shapes,
                noise_sigma=config.noise_sigma,
                seed=scan_seed,
            )
            volume = generate_healthy(spec, subject_id, scan_id, timepoint)
            anomaly = None
            if label == Label.ANOMALOUS:
                anomaly = AnomalySpec(
                    kind=config.anomaly_kind,
                    magnitude=magnitude,
                    region=default_anomaly_region(extents),
                )
                volume = inject_anomaly(volume, anomaly)
            suffix = {"npy": ".npy", "nii": ".nii", "nii.gz": ".nii.gz"}.get(
                config.volume_format
            )
            if suffix is None:
                raise SpecError(f"unknown volume format {config.volume_format!r}")
            filename = f"{scan_id}{suffix}"
            save_volume(volume, out_dir / filename)
            rows.append((subject_id, scan_id, timepoint, label.value, filename))
            specs_log.append(
                {
                    "scan_id": scan_id,
                    "phantom": {
                        "extents": list(extents),
                        "noise_sigma": config.noise_sigma,
                        "seed": scan_seed,
                        "shapes": [asdict(s) for s in shapes],
                    },
                    "anomaly": None
                    if anomaly is None
                    else {
                        "kind": anomaly.kind.value,
                        "magnitude": anomaly.magnitude,
                        "region": {"lo": list(anomaly.region.lo), "hi": list(anomaly.region.hi)},
                    },
                }
            )

    manifest_path = out_dir / "manifest.csv"
    with open(manifest_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "scan_id", "timepoint", "label", "path"])
        writer.writerows(rows)
    (out_dir / "cohort.json").write_text(
        json.dumps({"config": asdict(config), "scans": specs_log}, indent=2, sort_keys=True, default=str)
    )
    return manifest_path
