"""Slab maximum intensity projection and 2D ground-truth box construction.

A slab is a contiguous run of slices collapsed to one image by per-pixel
maximum over z. Nodule annotations project into the slab whose z-interval
contains their world z-center, as square boxes in normalized center-size
coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metaimage import CtVolume, NoduleAnnotation, VolumeMeta


class ProjectionError(ValueError):
    pass


@dataclass(frozen=True)
class MipSlab:
    """One projected slab: image, world z-interval, and its place in the scan."""

    image: np.ndarray  # (H, W)
    z_range_mm: tuple[float, float]  # [start, end) in world mm
    scan_id: str
    slab_index: int


@dataclass(frozen=True)
class GroundTruthBox:
    """Normalized center-size box; diameter_mm kept for size banding."""

    cx: float
    cy: float
    w: float
    h: float
    diameter_mm: float

    def __post_init__(self):
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ProjectionError(f"box center out of range: ({self.cx}, {self.cy})")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ProjectionError(f"box size out of range: ({self.w}, {self.h})")


def slab_slice_count(thickness_mm: float, spacing_z: float) -> int:
    """Number of slices covering thickness_mm, rounded up."""
    return max(1, int(np.ceil(thickness_mm / spacing_z - 1e-9)))


def mip(vol: CtVolume, z_start_index: int, thickness_mm: float = 7.5,
        scan_id: str = "", slab_index: int = 0) -> MipSlab:
    """Project slices [z_start_index, z_start_index + slices(thickness)) by max.

    The slab is clipped at the volume bounds; a slab that misses the volume
    entirely is an error.
    """
    n_z = vol.meta.dims[0]
    s_z = vol.meta.spacing[0]
    count = slab_slice_count(thickness_mm, s_z)
    lo = max(0, z_start_index)
    hi = min(n_z, z_start_index + count)
    if lo >= hi:
        raise ProjectionError(
            f"slab [{z_start_index}, {z_start_index + count}) outside volume of {n_z} slices"
        )
    image = np.max(vol.voxels[lo:hi], axis=0)
    origin_z = vol.meta.origin[0]
    z_range = (origin_z + lo * s_z, origin_z + hi * s_z)
    return MipSlab(image=image, z_range_mm=z_range, scan_id=scan_id, slab_index=slab_index)


def slab_partition(n_slices: int, spacing_z: float, thickness_mm: float = 7.5,
                   stride_mm: float | None = None) -> list[tuple[int, int]]:
    """Slab index ranges tiling [0, n_slices), in slice-index space.

    Start indices advance by the stride (rounded to whole slices, at least
    one); each slab spans the rounded-up slice count for the thickness,
    clipped at the end. A clipped slab survives only if it still covers at
    least half the full slice count. Default stride equals the thickness,
    giving non-overlapping slabs.
    """
    if thickness_mm <= 0 or (stride_mm is not None and stride_mm <= 0):
        raise ProjectionError("thickness and stride must be > 0")
    if n_slices < 1:
        raise ProjectionError("empty retained range")
    if stride_mm is None:
        stride_mm = thickness_mm
    count = slab_slice_count(thickness_mm, spacing_z)
    step = max(1, int(np.floor(stride_mm / spacing_z + 0.5)))
    ranges = []
    for start in range(0, n_slices, step):
        end = min(n_slices, start + count)
        if 2 * (end - start) >= count:
            ranges.append((start, end))
    return ranges


def project_annotation(n: NoduleAnnotation, slab: MipSlab, meta: VolumeMeta,
                       min_side_px: int = 8) -> GroundTruthBox | None:
    """Box for a nodule on a slab, or None when its z-center misses the slab.

    The box is square with side diameter_mm converted to pixels (floored at
    ``min_side_px``), centered at the nodule's in-plane voxel position, in
    normalized pixel-center coordinates.
    """
    wx, wy, wz = n.center_world
    if not (slab.z_range_mm[0] <= wz < slab.z_range_mm[1]):
        return None
    _, oy, ox = meta.origin
    _, sy, sx = meta.spacing
    h_img, w_img = slab.image.shape
    vx = (wx - ox) / sx
    vy = (wy - oy) / sy
    cx = min(max((vx + 0.5) / w_img, 0.0), 1.0)
    cy = min(max((vy + 0.5) / h_img, 0.0), 1.0)
    w = min(max(n.diameter_mm / sx, float(min_side_px)) / w_img, 1.0)
    h = min(max(n.diameter_mm / sy, float(min_side_px)) / h_img, 1.0)
    return GroundTruthBox(cx=cx, cy=cy, w=w, h=h, diameter_mm=n.diameter_mm)


def project_scan(vol: CtVolume, annotations: list[NoduleAnnotation], scan_id: str,
                 thickness_mm: float = 7.5, stride_mm: float | None = None):
    """All slabs of a scan with their projected boxes.

    Returns a list of (MipSlab, [GroundTruthBox.]) pairs.
    """
    ranges = slab_partition(vol.meta.dims[0], vol.meta.spacing[0], thickness_mm, stride_mm)
    out = []
    for idx, (lo, _) in enumerate(ranges):
        slab = mip(vol, lo, thickness_mm, scan_id=scan_id, slab_index=idx)
        boxes = []
        for ann in annotations:
            box = project_annotation(ann, slab, vol.meta)
            if box is not None:
                boxes.append(box)
        out.append((slab, boxes))
    return out
