"""Synthetic chest CT corpus: blobs versus tubes.

Each scan is an elliptical soft-tissue body holding two ellipsoidal
air-filled lungs. Bright compact spheres play the role of nodules and thin
oblique cylinders play the role of vessels; both live strictly inside the
lungs so the masking stage keeps them. Geometry is generated per scan from
a counter-based stream, so any scan can be rebuilt independently.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .metaimage import CtVolume, NoduleAnnotation, VolumeMeta, write_mhd

HU_AIR = -1000.0
HU_LUNG = -900.0
HU_BODY = 40.0
HU_VESSEL = 30.0
HU_NODULE = 80.0

# in-plane geometry as fractions of the slice size
BODY_SEMI = (0.42, 0.46)       # (y, x)
LUNG_SEMI = (0.26, 0.17)
LUNG_OFFSET_X = 0.20
NODULE_MARGIN_MM = 3.0


class SynthError(ValueError):
    """Invalid synthesis configuration."""


@dataclass(frozen=True)
class SynthConfig:
    n_scans: int = 60
    dims: tuple = (72, 96, 96)        # (z, y, x)
    spacing: tuple = (2.5, 1.0, 1.0)  # mm
    noise_sd_hu: float = 10.0
    nodule_count_probs: tuple = (0.35, 0.45, 0.2)   # P(0), P(1), P(2) nodules
    diameter_range_mm: tuple = (4.0, 20.0)
    vessels_per_lung: tuple = (2, 4)
    vessel_radius_mm: tuple = (0.8, 1.6)
    vessel_drift: float = 0.35        # max in-plane mm drift per mm of z
    seed: int = 0

    def __post_init__(self):
        if self.n_scans < 1:
            raise SynthError("n_scans must be >= 1")
        if len(self.dims) != 3 or any(d < 8 for d in self.dims):
            raise SynthError(f"dims too small: {self.dims}")
        if abs(sum(self.nodule_count_probs) - 1.0) > 1e-9:
            raise SynthError("nodule_count_probs must sum to 1")
        if self.diameter_range_mm[0] <= 0:
            raise SynthError("diameters must be positive")


def _scan_rng(seed: int, scan_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence((seed, scan_index))))


def _lung_geometry(config: SynthConfig):
    """Lung ellipsoid centers and semi-axes in mm, in (z, y, x) order."""
    nz, ny, nx = config.dims
    sz, sy, sx = config.spacing
    extent = (nz * sz, ny * sy, nx * sx)
    center_y = extent[1] / 2
    semi = (0.44 * extent[0], LUNG_SEMI[0] * extent[1], LUNG_SEMI[1] * extent[2])
    centers = []
    for side in (-1.0, 1.0):
        center_x = extent[2] / 2 + side * LUNG_OFFSET_X * extent[2]
        centers.append((extent[0] / 2, center_y, center_x))
    return centers, semi


def _ellipsoid_mask(zz, yy, xx, center, semi):
    return ((zz - center[0]) / semi[0]) ** 2 + \
           ((yy - center[1]) / semi[1]) ** 2 + \
           ((xx - center[2]) / semi[2]) ** 2 <= 1.0


def _sample_nodule(rng, config, centers, semi):
    """Center (z, y, x) in mm plus diameter, strictly inside one lung."""
    lo, hi = config.diameter_range_mm
    u = rng.random()
    if u < 0.4:
        diameter = rng.uniform(lo, 7.0)
    elif u < 0.85:
        diameter = rng.uniform(7.0, 15.0)
    else:
        diameter = rng.uniform(15.0, hi)
    radius = diameter / 2
    center = centers[int(rng.integers(0, len(centers)))]
    # the in-plane cross-section shrinks toward the poles; keep z where the
    # scaled x semi-axis still holds the nodule plus margin
    s_min = min(0.95, (radius + NODULE_MARGIN_MM) / semi[2])
    dz_max = semi[0] * np.sqrt(max(0.0, 1.0 - s_min * s_min)) * 0.9
    dz = rng.uniform(-dz_max, dz_max)
    scale = np.sqrt(1.0 - (dz / semi[0]) ** 2)
    ay = scale * semi[1] - radius - NODULE_MARGIN_MM
    ax = scale * semi[2] - radius - NODULE_MARGIN_MM
    theta = rng.uniform(0.0, 2 * np.pi)
    rho = np.sqrt(rng.random())
    return (center[0] + dz,
            center[1] + rho * np.cos(theta) * max(0.0, ay),
            center[2] + rho * np.sin(theta) * max(0.0, ax)), diameter


def generate_scan(config: SynthConfig, scan_index: int):
    """Build one volume; returns (CtVolume of int16 HU, annotations)."""
    rng = _scan_rng(config.seed, scan_index)
    nz, ny, nx = config.dims
    sz, sy, sx = config.spacing
    extent = (nz * sz, ny * sy, nx * sx)
    z_mm = (np.arange(nz) + 0.5) * sz
    y_mm = (np.arange(ny) + 0.5) * sy
    x_mm = (np.arange(nx) + 0.5) * sx
    zz = z_mm[:, None, None]
    yy = y_mm[None, :, None]
    xx = x_mm[None, None, :]

    body = (((yy - extent[1] / 2) / (BODY_SEMI[0] * extent[1])) ** 2 +
            ((xx - extent[2] / 2) / (BODY_SEMI[1] * extent[2])) ** 2) <= 1.0
    body = np.broadcast_to(body, (nz, ny, nx))
    hu = np.where(body, HU_BODY, HU_AIR)

    centers, semi = _lung_geometry(config)
    lungs = np.zeros((nz, ny, nx), dtype=bool)
    for center in centers:
        lungs |= _ellipsoid_mask(zz, yy, xx, center, semi)
    hu = np.where(lungs, HU_LUNG, hu)

    # vessels: oblique thin cylinders spanning each lung in z
    for lung_idx, center in enumerate(centers):
        count = int(rng.integers(config.vessels_per_lung[0],
                                 config.vessels_per_lung[1] + 1))
        for _ in range(count):
            y0 = center[1] + rng.uniform(-0.5, 0.5) * semi[1]
            x0 = center[2] + rng.uniform(-0.5, 0.5) * semi[2]
            dy = rng.uniform(-config.vessel_drift, config.vessel_drift)
            dx = rng.uniform(-config.vessel_drift, config.vessel_drift)
            radius = rng.uniform(*config.vessel_radius_mm)
            cy = y0 + dy * (z_mm - center[0])
            cx = x0 + dx * (z_mm - center[0])
            dist2 = (yy - cy[:, None, None]) ** 2 + (xx - cx[:, None, None]) ** 2
            hu = np.where(lungs & (dist2 <= radius * radius), HU_VESSEL, hu)

    annotations = []
    count = int(rng.choice(len(config.nodule_count_probs),
                           p=config.nodule_count_probs))
    scan_id = f"synth-{scan_index:03d}"
    origin = (0.0, -extent[1] / 2, -extent[2] / 2)  # (z, y, x)
    for _ in range(count):
        (cz, cy_mm, cx_mm), diameter = _sample_nodule(rng, config, centers, semi)
        radius = diameter / 2
        dist2 = (zz - cz) ** 2 + (yy - cy_mm) ** 2 + (xx - cx_mm) ** 2
        hu = np.where(dist2 <= radius * radius, HU_NODULE, hu)
        # grid positions put voxel i at (i + 0.5) * s; world puts it at
        # origin + i * s, so conversion subtracts half a voxel
        annotations.append(NoduleAnnotation(
            series_id=scan_id,
            center_world=(float(cx_mm - sx / 2 + origin[2]),
                          float(cy_mm - sy / 2 + origin[1]),
                          float(cz - sz / 2 + origin[0])),
            diameter_mm=float(diameter),
        ))

    hu = hu + rng.normal(0.0, config.noise_sd_hu, size=hu.shape)
    voxels = np.clip(np.rint(hu), -32768, 32767).astype(np.int16)
    meta = VolumeMeta(dims=(nz, ny, nx), spacing=(sz, sy, sx), origin=origin,
                      element_type="MET_SHORT")
    return CtVolume(meta=meta, voxels=voxels), annotations


def generate_corpus(config: SynthConfig, out_dir):
    """Write all scans plus one annotations CSV; returns per-scan counts."""
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    summary = []
    for index in range(config.n_scans):
        vol, annotations = generate_scan(config, index)
        scan_id = f"synth-{index:03d}"
        write_mhd(vol, os.path.join(out_dir, f"{scan_id}.mhd"))
        for ann in annotations:
            rows.append({"seriesuid": ann.series_id,
                         "coordX": repr(ann.center_world[0]),
                         "coordY": repr(ann.center_world[1]),
                         "coordZ": repr(ann.center_world[2]),
                         "diameter_mm": repr(ann.diameter_mm)})
        summary.append((scan_id, len(annotations)))
    with open(os.path.join(out_dir, "annotations.csv"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["seriesuid", "coordX", "coordY", "coordZ", "diameter_mm"])
        writer.writeheader()
        writer.writerows(rows)
    return summary
