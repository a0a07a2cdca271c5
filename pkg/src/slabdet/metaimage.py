"""MetaImage (.mhd/.raw) volumes, nodule annotation CSVs, and coordinate maps.

Volumes are stored with axis order (z, y, x) and x-fastest raster layout,
matching the on-disk order of the .raw payload. Header files list DimSize,
ElementSpacing and Offset in (x, y, z) order, so parsing and writing reverse
those triples.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np


class MetaImageError(ValueError):
    """Malformed or unsupported MetaImage content."""


class AnnotationError(ValueError):
    """Malformed annotation CSV content."""


#: ElementType header value -> numpy scalar kind (little-endian base).
ELEMENT_TYPES = {
    "MET_SHORT": np.dtype("<i2"),
    "MET_UCHAR": np.dtype("u1"),
    "MET_FLOAT": np.dtype("<f4"),
}

_MANDATORY_KEYS = ("NDims", "DimSize", "ElementSpacing", "Offset", "ElementType", "ElementDataFile")


@dataclass(frozen=True)
class VolumeMeta:
    """Grid geometry of a volume: (z, y, x) dims, mm spacing, world origin."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    element_type: str = "MET_FLOAT"
    big_endian: bool = False

    def __post_init__(self):
        if any(d < 1 for d in self.dims):
            raise MetaImageError(f"all dims must be >= 1, got {self.dims}")
        if any(s <= 0 for s in self.spacing):
            raise MetaImageError(f"all spacing components must be > 0, got {self.spacing}")
        if self.element_type not in ELEMENT_TYPES:
            raise MetaImageError(f"unsupported element type {self.element_type!r}")

    @property
    def voxel_count(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def dtype(self) -> np.dtype:
        base = ELEMENT_TYPES[self.element_type]
        return base.newbyteorder(">") if self.big_endian and base.itemsize > 1 else base


@dataclass(frozen=True)
class CtVolume:
    """A CT volume in Hounsfield units with its grid geometry."""

    meta: VolumeMeta
    voxels: np.ndarray  # shape meta.dims, axis order (z, y, x)

    def __post_init__(self):
        if self.voxels.shape != self.meta.dims:
            raise MetaImageError(
                f"voxel shape {self.voxels.shape} does not match dims {self.meta.dims}"
            )


@dataclass(frozen=True)
class NoduleAnnotation:
    series_id: str
    center_world: tuple[float, float, float]  # (x, y, z) mm, as annotated
    diameter_mm: float

    def __post_init__(self):
        if self.diameter_mm <= 0:
            raise AnnotationError(f"diameter_mm must be > 0, got {self.diameter_mm}")


def _parse_bool(value: str) -> bool:
    return value.strip().lower() == "true"


def parse_mhd_header(text: str) -> tuple[VolumeMeta, str]:
    """Parse .mhd header text into a VolumeMeta plus the payload filename."""
    fields: dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or "=" not in line:
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()

    for key in _MANDATORY_KEYS:
        if key not in fields:
            raise MetaImageError(f"missing mandatory key {key}")
    if int(fields["NDims"]) != 3:
        raise MetaImageError(f"NDims must be 3, got {fields['NDims']}")
    if _parse_bool(fields.get("CompressedData", "False")):
        raise MetaImageError("compressed payloads are unsupported")
    element_type = fields["ElementType"]
    if element_type not in ELEMENT_TYPES:
        raise MetaImageError(f"unsupported element type {element_type!r}")

    dims_xyz = [int(v) for v in fields["DimSize"].split()]
    spacing_xyz = [float(v) for v in fields["ElementSpacing"].split()]
    origin_xyz = [float(v) for v in fields["Offset"].split()]
    if len(dims_xyz) != 3 or len(spacing_xyz) != 3 or len(origin_xyz) != 3:
        raise MetaImageError("DimSize, ElementSpacing and Offset must each have 3 entries")

    big_endian = _parse_bool(
        fields.get("BinaryDataByteOrderMSB", fields.get("ElementByteOrderMSB", "False"))
    )
    meta = VolumeMeta(
        dims=tuple(reversed(dims_xyz)),
        spacing=tuple(reversed(spacing_xyz)),
        origin=tuple(reversed(origin_xyz)),
        element_type=element_type,
        big_endian=big_endian,
    )
    return meta, fields["ElementDataFile"]


def load_volume(meta: VolumeMeta, raw: bytes) -> CtVolume:
    """Decode a .raw payload against its header metadata."""
    width = meta.dtype.itemsize
    expected = meta.voxel_count * width
    if len(raw) != expected:
        raise MetaImageError(
            f"payload length {len(raw)} does not match {meta.voxel_count} voxels x {width} bytes"
        )
    voxels = np.frombuffer(raw, dtype=meta.dtype).reshape(meta.dims)
    return CtVolume(meta=meta, voxels=voxels)


def read_volume(mhd_path: str | Path) -> CtVolume:
    mhd_path = Path(mhd_path)
    meta, data_file = parse_mhd_header(mhd_path.read_text())
    raw_path = mhd_path if data_file == "LOCAL" else mhd_path.parent / data_file
    raw = raw_path.read_bytes()
    return load_volume(meta, raw)


def write_mhd(vol: CtVolume, basename: str | Path) -> tuple[Path, Path]:
    """Write header + payload; parsing them back reproduces ``vol`` bit-exactly."""
    basename = Path(basename)
    mhd_path = basename.with_suffix(".mhd")
    raw_path = basename.with_suffix(".raw")
    meta = vol.meta
    dz, dy, dx = meta.dims
    sz, sy, sx = meta.spacing
    oz, oy, ox = meta.origin
    header = "\n".join(
        [
            "ObjectType = Image",
            "NDims = 3",
            "BinaryData = True",
            f"BinaryDataByteOrderMSB = {meta.big_endian}",
            "CompressedData = False",
            f"DimSize = {dx} {dy} {dz}",
            f"ElementSpacing = {sx:.17g} {sy:.17g} {sz:.17g}",
            f"Offset = {ox:.17g} {oy:.17g} {oz:.17g}",
            f"ElementType = {meta.element_type}",
            f"ElementDataFile = {raw_path.name}",
        ]
    )
    mhd_path.write_text(header + "\n")
    raw_path.write_bytes(np.ascontiguousarray(vol.voxels, dtype=meta.dtype).tobytes())
    return mhd_path, raw_path


def world_to_voxel(p_world: np.ndarray, meta: VolumeMeta) -> np.ndarray:
    """World mm (z, y, x) -> continuous voxel coordinates (z, y, x)."""
    p = np.asarray(p_world, dtype=np.float64)
    return (p - np.asarray(meta.origin)) / np.asarray(meta.spacing)


def voxel_to_world(p_voxel: np.ndarray, meta: VolumeMeta) -> np.ndarray:
    p = np.asarray(p_voxel, dtype=np.float64)
    return p * np.asarray(meta.spacing) + np.asarray(meta.origin)


def parse_annotations(csv_text: str) -> list[NoduleAnnotation]:
    """Parse a nodule annotation CSV (seriesuid, coordX/Y/Z, diameter_mm)."""
    reader = csv.DictReader(csv_text.splitlines())
    required = {"seriesuid", "coordX", "coordY", "coordZ", "diameter_mm"}
    if reader.fieldnames is None:
        raise AnnotationError("empty annotation file (no header row)")
    missing = required - set(reader.fieldnames)
    if missing:
        raise AnnotationError(f"missing columns: {sorted(missing)}")
    annotations = []
    for line_no, row in enumerate(reader, start=2):
        try:
            annotations.append(
                NoduleAnnotation(
                    series_id=row["seriesuid"],
                    center_world=(float(row["coordX"]), float(row["coordY"]), float(row["coordZ"])),
                    diameter_mm=float(row["diameter_mm"]),
                )
            )
        except (TypeError, ValueError) as exc:
            raise AnnotationError(f"malformed row at line {line_no}: {exc}") from exc
    return annotations


def read_annotations(path: str | Path) -> list[NoduleAnnotation]:
    return parse_annotations(Path(path).read_text())


def with_float_voxels(vol: CtVolume) -> CtVolume:
    """Copy of the volume with float32 voxels (used after value-changing ops)."""
    meta = replace(vol.meta, element_type="MET_FLOAT", big_endian=False)
    return CtVolume(meta=meta, voxels=vol.voxels.astype(np.float32))
