"""Volume ingestion, per-plane slice extraction, and window-pair construction.

A scan enters as a 3D intensity grid (NIfTI, .npy, or a directory of
per-slice PNG/JPG images). Slices are pulled along one anatomical plane
inside an informative index range, min-max normalized per scan, and paired
into sliding (input stack, target stack) windows where the target stack
starts right after the input stack. Splits are subject-disjoint and train
pairs come from healthy scans only.

Axis convention for a voxel grid ``v[x, y, z]``:

* SAGITTAL slices index axis 0 -> slice shape (Y, Z)
* CORONAL  slices index axis 1 -> slice shape (X, Z)
* AXIAL    slices index axis 2 -> slice shape (X, Y)

Window archive container (``.rswa``, little-endian):

* header: magic ``RSWINARC`` (8s), version u16, plane u8, label-coding u8,
  height u32, width u32, in_len u16, out_len u16, count u64
* then ``count`` records: subject_id (u16 length + utf-8), scan_id
  (u16 length + utf-8), label u8, first input slice index i32, input
  float32[H*W*in_len], target float32[H*W*out_len] (C-order, H x W x C)

A JSON manifest sidecar carries per-scan window counts and labels.
"""

from __future__ import annotations

import csv
import json
import random
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import (
    DimensionError,
    EmptyDataError,
    FormatError,
    LeakageError,
    NonFiniteError,
    RangeError,
    TooShortError,
)
from .nifti import read_nifti, write_nifti

DEFAULT_SLICE_RANGE = (120, 180)


class Plane(str, Enum):
    AXIAL = "axial"
    CORONAL = "coronal"
    SAGITTAL = "sagittal"

    @property
    def axis(self) -> int:
        return {Plane.SAGITTAL: 0, Plane.CORONAL: 1, Plane.AXIAL: 2}[self]


class Label(str, Enum):
    HEALTHY = "healthy"
    ANOMALOUS = "anomalous"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class ScanMeta:
    subject_id: str
    scan_id: str
    timepoint: int = 0
    label: Label = Label.UNKNOWN


@dataclass
class Volume:
    """A 3D intensity grid plus scan identity."""

    voxels: np.ndarray
    subject_id: str
    scan_id: str
    timepoint: int = 0
    label: Label = Label.UNKNOWN

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise DimensionError(
                f"scan {self.scan_id!r}: expected a 3D grid, got {self.voxels.ndim}D"
            )
        if not np.isfinite(self.voxels).all():
            raise NonFiniteError(f"scan {self.scan_id!r}: non-finite voxel values")
        if self.timepoint < 0:
            raise FormatError(f"scan {self.scan_id!r}: negative timepoint")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass
class SliceSequence:
    """Ordered, normalized 2D slices along one plane of a single scan."""

    plane: Plane
    slices: np.ndarray  # (count, H, W), values in [0, 1]
    first_index: int
    subject_id: str = ""
    scan_id: str = ""

    def __len__(self) -> int:
        return self.slices.shape[0]

    @property
    def height(self) -> int:
        return self.slices.shape[1]

    @property
    def width(self) -> int:
        return self.slices.shape[2]


@dataclass
class SliceStack:
    """A group of adjacent slices stacked on the channel axis."""

    data: np.ndarray  # (H, W, C), values in [0, 1]
    plane: Plane
    slice_indices: tuple[int, ...]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass
class WindowPair:
    """One training/scoring unit: an input stack and the stack right after it."""

    input: SliceStack
    target: SliceStack
    subject_id: str
    scan_id: str
    plane: Plane


@dataclass
class DatasetSplit:
    train: list[WindowPair]
    test: list[WindowPair]
    manifest: dict


@dataclass
class SplitConfig:
    slice_lo: int = DEFAULT_SLICE_RANGE[0]
    slice_hi: int = DEFAULT_SLICE_RANGE[1]
    in_len: int = 3
    out_len: int = 3
    stride: int = 1
    n_test_healthy: int = 1
    test_subjects: tuple[str, ...] | None = None
    seed: int = 0


def load_volume(path, meta: ScanMeta) -> Volume:
    """Load a 3D scan from NIfTI, .npy/.npz, or a directory of 2D images."""
    path = Path(path)
    if not path.exists():
        raise FormatError(f"no such file or directory: {path}")
    if path.is_dir():
        voxels = _load_slice_dir(path)
    else:
        name = path.name.lower()
        if name.endswith((".nii", ".nii.gz")):
            voxels = read_nifti(path)
        elif name.endswith(".npy"):
            try:
                voxels = np.load(path)
            except ValueError as exc:
                raise FormatError(f"{path}: cannot parse .npy ({exc})") from exc
        elif name.endswith(".npz"):
            try:
                archive = np.load(path)
                voxels = archive[archive.files[0]]
            except (ValueError, IndexError) as exc:
                raise FormatError(f"{path}: cannot parse .npz ({exc})") from exc
        else:
            raise FormatError(f"{path}: unrecognized volume format")
    voxels = np.asarray(voxels)
    if voxels.ndim != 3:
        raise DimensionError(f"{path}: expected 3D data, got {voxels.ndim}D")
    if not np.issubdtype(voxels.dtype, np.number):
        raise FormatError(f"{path}: non-numeric voxel data ({voxels.dtype})")
    voxels = voxels.astype(np.float32)
    if not np.isfinite(voxels).all():
        raise NonFiniteError(f"{path}: non-finite voxel values")
    return Volume(
        voxels=voxels,
        subject_id=meta.subject_id,
        scan_id=meta.scan_id,
        timepoint=meta.timepoint,
        label=meta.label,
    )


def _load_slice_dir(path: Path) -> np.ndarray:
    from PIL import Image

    files = sorted(
        p for p in path.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg")
    )
    if not files:
        raise FormatError(f"{path}: no PNG/JPG slices found")
    slices = []
    for p in files:
        try:
            img = Image.open(p).convert("F")
        except OSError as exc:
            raise FormatError(f"{p}: cannot decode image ({exc})") from exc
        slices.append(np.asarray(img, dtype=np.float32))
    shapes = {s.shape for s in slices}
    if len(shapes) != 1:
        raise DimensionError(f"{path}: slice images disagree on shape {shapes}")
    # slice k of the directory becomes index k on the last axis
    return np.stack(slices, axis=-1)


def save_volume(volume: Volume, path) -> None:
    """Write a volume in a format ``load_volume`` accepts (.npy, .nii, .nii.gz)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    name = path.name.lower()
    if name.endswith((".nii", ".nii.gz")):
        write_nifti(path, volume.voxels)
    elif name.endswith(".npy"):
        np.save(path, volume.voxels.astype(np.float32))
    else:
        raise FormatError(f"{path}: unsupported output format")


def read_scan_manifest(path) -> list[tuple[Path, ScanMeta]]:
    """Read a CSV manifest: subject_id, scan_id, timepoint, label, path."""
    path = Path(path)
    if not path.exists():
        raise FormatError(f"no such manifest: {path}")
    rows: list[tuple[Path, ScanMeta]] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"subject_id", "scan_id", "timepoint", "label", "path"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise FormatError(
                f"{path}: manifest must have columns {sorted(required)}"
            )
        for row in reader:
            try:
                label = Label(row["label"].strip().lower())
                timepoint = int(row["timepoint"])
            except (ValueError, KeyError) as exc:
                raise FormatError(f"{path}: bad manifest row {row} ({exc})") from exc
            meta = ScanMeta(
                subject_id=row["subject_id"].strip(),
                scan_id=row["scan_id"].strip(),
                timepoint=timepoint,
                label=label,
            )
            volume_path = Path(row["path"])
            if not volume_path.is_absolute():
                volume_path = path.parent / volume_path
            rows.append((volume_path, meta))
    if not rows:
        raise EmptyDataError(f"{path}: manifest lists no scans")
    return rows


def minmax_normalize(values: np.ndarray) -> np.ndarray:
    """Rescale to [0, 1] by the array's own min/max; constant input maps to 0."""
    values = np.asarray(values, dtype=np.float32)
    lo = float(values.min())
    hi = float(values.max())
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def extract_plane(
    volume: Volume,
    plane: Plane,
    slice_range: tuple[int, int] = DEFAULT_SLICE_RANGE,
) -> SliceSequence:
    """Pull slices [lo, hi) along a plane, min-max normalized per scan."""
    lo, hi = slice_range
    extent = volume.voxels.shape[plane.axis]
    if not (0 <= lo < hi <= extent):
        raise RangeError(
            f"scan {volume.scan_id!r}: slice range [{lo}, {hi}) exceeds "
            f"{plane.value} extent {extent}"
        )
    normalized = minmax_normalize(volume.voxels)
    taken = np.take(normalized, np.arange(lo, hi), axis=plane.axis)
    # reorder so the slice index leads: (count, H, W)
    slices = np.moveaxis(taken, plane.axis, 0)
    return SliceSequence(
        plane=plane,
        slices=np.ascontiguousarray(slices, dtype=np.float32),
        first_index=lo,
        subject_id=volume.subject_id,
        scan_id=volume.scan_id,
    )


def window_count(length: int, in_len: int, out_len: int, stride: int) -> int:
    return (length - in_len - out_len) // stride + 1


def build_windows(
    seq: SliceSequence, in_len: int = 3, out_len: int = 3, stride: int = 1
) -> list[WindowPair]:
    """Enumerate sliding (input, target) stacks over a slice sequence."""
    if in_len < 1 or out_len < 1 or stride < 1:
        raise RangeError("in_len, out_len and stride must all be >= 1")
    n = len(seq)
    if n < in_len + out_len:
        raise TooShortError(
            f"scan {seq.scan_id!r}: {n} slices cannot host a "
            f"{in_len}-{out_len} window"
        )
    pairs = []
    for start in range(0, n - in_len - out_len + 1, stride):
        mid = start + in_len
        end = mid + out_len
        input_stack = SliceStack(
            data=np.ascontiguousarray(
                np.transpose(seq.slices[start:mid], (1, 2, 0))
            ),
            plane=seq.plane,
            slice_indices=tuple(range(seq.first_index + start, seq.first_index + mid)),
        )
        target_stack = SliceStack(
            data=np.ascontiguousarray(
                np.transpose(seq.slices[mid:end], (1, 2, 0))
            ),
            plane=seq.plane,
            slice_indices=tuple(range(seq.first_index + mid, seq.first_index + end)),
        )
        pairs.append(
            WindowPair(
                input=input_stack,
                target=target_stack,
                subject_id=seq.subject_id,
                scan_id=seq.scan_id,
                plane=seq.plane,
            )
        )
    return pairs


def make_split(
    volumes: list[Volume], plane: Plane, config: SplitConfig
) -> DatasetSplit:
    """Subject-disjoint split: train = healthy-only, test = held-out + anomalous."""
    if not volumes:
        raise EmptyDataError("no volumes to split")
    subjects: dict[str, list[Volume]] = {}
    for vol in volumes:
        subjects.setdefault(vol.subject_id, []).append(vol)
    healthy_subjects = sorted(
        s for s, vols in subjects.items() if all(v.label == Label.HEALTHY for v in vols)
    )
    other_subjects = sorted(set(subjects) - set(healthy_subjects))

    if config.test_subjects is not None:
        test_healthy = sorted(set(config.test_subjects) & set(healthy_subjects))
        missing = set(config.test_subjects) - set(subjects)
        if missing:
            raise LeakageError(f"unknown test subjects requested: {sorted(missing)}")
    else:
        rng = random.Random(config.seed)
        pool = list(healthy_subjects)
        k = min(config.n_test_healthy, len(pool))
        test_healthy = sorted(rng.sample(pool, k)) if k else []
    train_subjects = sorted(set(healthy_subjects) - set(test_healthy))
    if not train_subjects or not test_healthy:
        raise LeakageError(
            f"cannot split {len(healthy_subjects)} healthy subject(s) into "
            "disjoint train and test groups"
        )

    test_subjects = sorted(set(test_healthy) | set(other_subjects))
    if set(train_subjects) & set(test_subjects):
        raise LeakageError("train and test would share subjects")

    train_pairs: list[WindowPair] = []
    test_pairs: list[WindowPair] = []
    per_scan: dict[str, int] = {}
    scan_labels: dict[str, str] = {}
    scan_subjects: dict[str, str] = {}
    slice_range = (config.slice_lo, config.slice_hi)
    for vol in sorted(volumes, key=lambda v: (v.subject_id, v.scan_id)):
        seq = extract_plane(vol, plane, slice_range)
        pairs = build_windows(seq, config.in_len, config.out_len, config.stride)
        per_scan[vol.scan_id] = len(pairs)
        scan_labels[vol.scan_id] = vol.label.value
        scan_subjects[vol.scan_id] = vol.subject_id
        if vol.subject_id in train_subjects:
            train_pairs.extend(pairs)
        else:
            test_pairs.extend(pairs)

    manifest = {
        "plane": plane.value,
        "slice_range": [config.slice_lo, config.slice_hi],
        "window": {
            "in_len": config.in_len,
            "out_len": config.out_len,
            "stride": config.stride,
        },
        "seed": config.seed,
        "n_train_subjects": len(train_subjects),
        "n_test_subjects": len(test_subjects),
        "train_subjects": train_subjects,
        "test_subjects": test_subjects,
        "n_train_scans": sum(
            1 for s, subj in scan_subjects.items() if subj in train_subjects
        ),
        "n_test_scans": sum(
            1 for s, subj in scan_subjects.items() if subj in test_subjects
        ),
        "per_scan_windows": dict(sorted(per_scan.items())),
        "scan_labels": dict(sorted(scan_labels.items())),
        "scan_subjects": dict(sorted(scan_subjects.items())),
    }
    return DatasetSplit(train=train_pairs, test=test_pairs, manifest=manifest)


_ARCHIVE_MAGIC = b"RSWINARC"
_ARCHIVE_VERSION = 1
_PLANE_CODES = {Plane.AXIAL: 0, Plane.CORONAL: 1, Plane.SAGITTAL: 2}
_LABEL_CODES = {Label.HEALTHY: 0, Label.ANOMALOUS: 1, Label.UNKNOWN: 2}
_HEADER = struct.Struct("<8sHBBIIHHQ")


def _write_str(fh, text: str) -> None:
    raw = text.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)


def _read_str(fh) -> str:
    (length,) = struct.unpack("<H", fh.read(2))
    return fh.read(length).decode("utf-8")


def save_window_archive(
    path, pairs: list[WindowPair], labels: dict[str, Label] | None = None
) -> None:
    """Write window pairs to the versioned binary container."""
    if not pairs:
        raise EmptyDataError("refusing to write an empty window archive")
    labels = labels or {}
    first = pairs[0]
    height, width, in_len = first.input.data.shape
    out_len = first.target.data.shape[2]
    plane = first.plane
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(
                _ARCHIVE_MAGIC,
                _ARCHIVE_VERSION,
                _PLANE_CODES[plane],
                0,
                height,
                width,
                in_len,
                out_len,
                len(pairs),
            )
        )
        for pair in pairs:
            if pair.input.data.shape != (height, width, in_len):
                raise FormatError(
                    f"window for scan {pair.scan_id!r} disagrees with archive geometry"
                )
            _write_str(fh, pair.subject_id)
            _write_str(fh, pair.scan_id)
            label = labels.get(pair.scan_id, Label.UNKNOWN)
            fh.write(struct.pack("<B", _LABEL_CODES[label]))
            fh.write(struct.pack("<i", pair.input.slice_indices[0]))
            fh.write(pair.input.data.astype(np.float32).tobytes(order="C"))
            fh.write(pair.target.data.astype(np.float32).tobytes(order="C"))


def load_window_archive(path) -> tuple[list[WindowPair], dict[str, Label]]:
    """Read a window archive; returns (pairs, per-scan labels)."""
    path = Path(path)
    if not path.exists():
        raise FormatError(f"no such archive: {path}")
    code_to_plane = {v: k for k, v in _PLANE_CODES.items()}
    code_to_label = {v: k for k, v in _LABEL_CODES.items()}
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
        if len(raw) < _HEADER.size:
            raise FormatError(f"{path}: truncated header")
        magic, version, plane_code, _, height, width, in_len, out_len, count = (
            _HEADER.unpack(raw)
        )
        if magic != _ARCHIVE_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != _ARCHIVE_VERSION:
            raise FormatError(f"{path}: unsupported archive version {version}")
        plane = code_to_plane[plane_code]
        pairs: list[WindowPair] = []
        labels: dict[str, Label] = {}
        in_bytes = height * width * in_len * 4
        out_bytes = height * width * out_len * 4
        for _ in range(count):
            subject_id = _read_str(fh)
            scan_id = _read_str(fh)
            (label_code,) = struct.unpack("<B", fh.read(1))
            (first_idx,) = struct.unpack("<i", fh.read(4))
            input_data = np.frombuffer(fh.read(in_bytes), dtype="<f4").reshape(
                height, width, in_len
            )
            target_data = np.frombuffer(fh.read(out_bytes), dtype="<f4").reshape(
                height, width, out_len
            )
            labels[scan_id] = code_to_label[label_code]
            pairs.append(
                WindowPair(
                    input=SliceStack(
                        data=input_data.copy(),
                        plane=plane,
                        slice_indices=tuple(range(first_idx, first_idx + in_len)),
                    ),
                    target=SliceStack(
                        data=target_data.copy(),
                        plane=plane,
                        slice_indices=tuple(
                            range(first_idx + in_len, first_idx + in_len + out_len)
                        ),
                    ),
                    subject_id=subject_id,
                    scan_id=scan_id,
                    plane=plane,
                )
            )
    return pairs, labels


def write_split(out_dir, split: DatasetSplit, plane: Plane) -> dict:
    """Persist a split as train/test archives plus a JSON manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labels = {
        scan: Label(lab) for scan, lab in split.manifest["scan_labels"].items()
    }
    files = {}
    if split.train:
        train_path = out_dir / f"train_{plane.value}.rswa"
        save_window_archive(train_path, split.train, labels)
        files["train"] = train_path.name
    if split.test:
        test_path = out_dir / f"test_{plane.value}.rswa"
        save_window_archive(test_path, split.test, labels)
        files["test"] = test_path.name
    manifest = dict(split.manifest)
    manifest["files"] = files
    manifest_path = out_dir / f"windows_{plane.value}.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest
