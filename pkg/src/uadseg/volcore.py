"""Volume data model, raw-binary file I/O, normalization, and slice splitting.

On-disk format is a directory holding ``header.json`` plus one little-endian
raw file per array: ``<tag>.f32`` for each modality (C order, z outermost)
and ``seg.u8`` for labels. The format round-trips bit-exactly, which the
checkpointing and determinism tests rely on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MODALITY_TAGS = ("t1c", "t1n", "t2f", "t2w")

LABEL_LEGEND = {0: "background", 1: "NET", 2: "SNFH", 3: "ET"}

ZSCORE_EPSILON = 1e-8


class VolumeError(Exception):
    """Base error for volume loading/consistency problems."""


class MissingModalityError(VolumeError):
    def __init__(self, tag, path):
        self.tag = tag
        super().__init__(f"modality {tag!r} declared in header but {path} is missing")


class NonFiniteDataError(VolumeError):
    def __init__(self, tag, flat_index):
        self.tag = tag
        self.flat_index = flat_index
        super().__init__(f"non-finite value in modality {tag!r} at flat index {flat_index}")


class ShapeMismatchError(VolumeError):
    def __init__(self, what, a, b):
        super().__init__(f"{what}: shape {a} vs {b}")


@dataclass
class MultimodalVolume:
    """4-modality 3D intensity volume, data indexed (modality, z, y, x)."""

    modalities: list[str]
    data: np.ndarray  # float32, shape (M, D, H, W)
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise VolumeError(f"volume data must be 4D (M,D,H,W), got shape {self.data.shape}")
        if len(self.modalities) != self.data.shape[0]:
            raise VolumeError(
                f"{len(self.modalities)} modality tags for {self.data.shape[0]} channels"
            )
        if len(set(self.modalities)) != len(self.modalities):
            raise VolumeError(f"duplicate modality tags: {self.modalities}")
        if min(self.data.shape) < 1:
            raise VolumeError(f"degenerate volume shape {self.data.shape}")
        if any(s <= 0 for s in self.spacing_mm):
            raise VolumeError(f"non-positive spacing {self.spacing_mm}")

    @property
    def shape(self):
        return self.data.shape

    def modality(self, tag: str) -> np.ndarray:
        """3D array (D,H,W) for one modality tag."""
        try:
            return self.data[self.modalities.index(tag)]
        except ValueError:
            raise MissingModalityError(tag, "<in-memory volume>") from None


@dataclass
class LabelVolume:
    """Voxel labels {0 background, 1 NET, 2 SNFH, 3 ET}, shape (D, H, W)."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.uint8)
        if self.data.ndim != 3:
            raise VolumeError(f"label data must be 3D (D,H,W), got shape {self.data.shape}")
        bad = self.data > 3
        if bad.any():
            raise VolumeError(
                f"label values outside {{0,1,2,3}}: found {int(self.data[bad].flat[0])}"
            )

    @property
    def shape(self):
        return self.data.shape

    def region_mask(self, region: str) -> np.ndarray:
        """Binary mask for a BraTS region name (ET/NET/SNFH/TC/WT)."""
        labels = {"ET": (3,), "NET": (1,), "SNFH": (2,), "TC": (1, 3), "WT": (1, 2, 3)}[region]
        return np.isin(self.data, labels)


@dataclass
class NormalizationRecord:
    """Per-modality statistics so z-scoring can be inverted."""

    modality: str
    mean: float
    std: float
    epsilon: float = ZSCORE_EPSILON


@dataclass
class SliceBatch:
    """Stack of channel-concatenated axial slices, data shape (N, M, H, W)."""

    data: np.ndarray
    z_indices: np.ndarray = field(default=None)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise VolumeError(f"slice batch must be 4D (N,M,H,W), got {self.data.shape}")
        if self.z_indices is None:
            self.z_indices = np.arange(self.data.shape[0])
        self.z_indices = np.asarray(self.z_indices, dtype=np.int64)

    def __len__(self):
        return self.data.shape[0]


def _read_header(path: Path) -> dict:
    header_path = path / "header.json"
    if not header_path.exists():
        raise VolumeError(f"no header.json in {path}")
    with open(header_path) as fh:
        return json.load(fh)


def load_volume(path) -> MultimodalVolume:
    """Load a multimodal volume from a volcore directory.

    Raises MissingModalityError / NonFiniteDataError / VolumeError on
    missing files, byte-count mismatch, non-finite values, duplicate tags.
    """
    path = Path(path)
    header = _read_header(path)
    shape = header["shape"]
    if len(shape) != 4:
        raise VolumeError(f"header shape must be [M,D,H,W], got {shape}")
    m, d, h, w = (int(s) for s in shape)
    tags = list(header["modalities"])
    if len(tags) != m:
        raise VolumeError(f"header declares M={m} but {len(tags)} modality tags")
    if len(set(tags)) != len(tags):
        raise VolumeError(f"duplicate modality tags in header: {tags}")
    if header.get("dtype", "f32le") != "f32le" or header.get("order", "zyx") != "zyx":
        raise VolumeError(f"unsupported dtype/order in header: {header}")

    expected = d * h * w * 4
    data = np.empty((m, d, h, w), dtype=np.float32)
    for i, tag in enumerate(tags):
        raw_path = path / f"{tag}.f32"
        if not raw_path.exists():
            raise MissingModalityError(tag, raw_path)
        raw = raw_path.read_bytes()
        if len(raw) != expected:
            raise VolumeError(
                f"modality {tag!r}: expected {expected} bytes for shape "
                f"({d},{h},{w}), file has {len(raw)}"
            )
        arr = np.frombuffer(raw, dtype="<f4").reshape(d, h, w)
        finite = np.isfinite(arr)
        if not finite.all():
            raise NonFiniteDataError(tag, int(np.flatnonzero(~finite)[0]))
        data[i] = arr
    spacing = tuple(float(s) for s in header.get("spacing_mm", (1.0, 1.0, 1.0)))
    return MultimodalVolume(modalities=tags, data=data, spacing_mm=spacing)


def save_volume(vol: MultimodalVolume, path) -> None:
    """Write a volume to a volcore directory; load(save(v)) is bit-identical."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    m, d, h, w = vol.shape
    header = {
        "shape": [m, d, h, w],
        "spacing_mm": list(vol.spacing_mm),
        "modalities": list(vol.modalities),
        "dtype": "f32le",
        "order": "zyx",
    }
    with open(path / "header.json", "w") as fh:
        json.dump(header, fh, indent=1, sort_keys=True)
    for i, tag in enumerate(vol.modalities):
        (path / f"{tag}.f32").write_bytes(
            np.ascontiguousarray(vol.data[i], dtype="<f4").tobytes()
        )


def load_labels(path) -> LabelVolume:
    """Load ``seg.u8`` labels; works for case dirs and label-only dirs."""
    path = Path(path)
    header = _read_header(path)
    shape = header["shape"]
    d, h, w = (int(s) for s in (shape[1:] if len(shape) == 4 else shape))
    raw_path = path / "seg.u8"
    if not raw_path.exists():
        raise VolumeError(f"no seg.u8 in {path}")
    raw = raw_path.read_bytes()
    if len(raw) != d * h * w:
        raise VolumeError(f"seg.u8: expected {d * h * w} bytes, got {len(raw)}")
    return LabelVolume(data=np.frombuffer(raw, dtype=np.uint8).reshape(d, h, w))


def save_labels(labels: LabelVolume, path, spacing_mm=(1.0, 1.0, 1.0)) -> None:
    """Write labels as ``seg.u8``; adds a label-only header if none exists."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if not (path / "header.json").exists():
        header = {
            "shape": list(labels.shape),
            "spacing_mm": list(spacing_mm),
            "modalities": [],
            "dtype": "u8",
            "order": "zyx",
        }
        with open(path / "header.json", "w") as fh:
            json.dump(header, fh, indent=1, sort_keys=True)
    (path / "seg.u8").write_bytes(np.ascontiguousarray(labels.data).tobytes())


def zscore_normalize(vol: MultimodalVolume):
    """Per-volume, per-modality z-score: (x - mean) / max(std, epsilon).

    Returns the normalized volume and one NormalizationRecord per modality.
    A constant modality maps to all zeros via the epsilon guard.
    """
    out = np.empty_like(vol.data)
    records = []
    for i, tag in enumerate(vol.modalities):
        mean = float(vol.data[i].mean(dtype=np.float64))
        std = float(vol.data[i].std(dtype=np.float64))
        out[i] = (vol.data[i] - np.float32(mean)) / np.float32(max(std, ZSCORE_EPSILON))
        records.append(NormalizationRecord(modality=tag, mean=mean, std=std))
    return (
        MultimodalVolume(modalities=list(vol.modalities), data=out, spacing_mm=vol.spacing_mm),
        records,
    )


def denormalize(vol: MultimodalVolume, records: list[NormalizationRecord]) -> MultimodalVolume:
    """Invert zscore_normalize (exact up to the epsilon guard)."""
    out = np.empty_like(vol.data)
    for i, rec in enumerate(records):
        out[i] = vol.data[i] * np.float32(max(rec.std, rec.epsilon)) + np.float32(rec.mean)
    return MultimodalVolume(modalities=list(vol.modalities), data=out, spacing_mm=vol.spacing_mm)


def split_pseudo_volumes(vol: MultimodalVolume, labels: LabelVolume):
    """Split axial slices into healthy and anomalous stacks.

    A slice is anomalous iff any of its label voxels is nonzero. Healthy
    slices form the training pseudo-volume, anomalous ones the validation
    pseudo-volume; z order is preserved in both.
    """
    if vol.shape[1:] != labels.shape:
        raise ShapeMismatchError("volume vs labels", vol.shape[1:], labels.shape)
    anomalous_z = (labels.data.reshape(labels.shape[0], -1) != 0).any(axis=1)
    healthy_idx = np.flatnonzero(~anomalous_z)
    anom_idx = np.flatnonzero(anomalous_z)
    # (M, D, H, W) -> (D, M, H, W) so each batch row is one channel-stacked slice
    slices = np.transpose(vol.data, (1, 0, 2, 3))
    return (
        SliceBatch(data=slices[healthy_idx], z_indices=healthy_idx),
        SliceBatch(data=slices[anom_idx], z_indices=anom_idx),
    )
