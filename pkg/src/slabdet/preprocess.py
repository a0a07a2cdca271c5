"""Lung isolation pipeline: resample, window, threshold, mask, enhance.

Stages, in order: resample to isotropic spacing, clamp to a lung HU window
and normalize to [0, 1], pick one Otsu threshold per scan, build per-slice
lung masks, drop peripheral slices with little lung area, run CLAHE, and
zero everything outside the mask.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .metaimage import CtVolume


class PreprocessError(ValueError):
    pass


@dataclass(frozen=True)
class ResampleSpec:
    """Per-axis (z, y, x) scale factors between source and target spacing."""

    source_spacing: tuple[float, float, float]
    target_spacing: tuple[float, float, float]
    factor: tuple[float, float, float]

    @classmethod
    def from_spacings(cls, source, target) -> "ResampleSpec":
        source = tuple(float(v) for v in source)
        target = tuple(float(v) for v in target)
        if any(v <= 0 for v in source) or any(v <= 0 for v in target):
            raise PreprocessError(f"spacings must be > 0, got {source} -> {target}")
        factor = tuple(s / t for s, t in zip(source, target))
        return cls(source_spacing=source, target_spacing=target, factor=factor)

    def output_dims(self, dims: tuple[int, int, int]) -> tuple[int, int, int]:
        # round-half-up, never below 1
        return tuple(max(1, int(np.floor(d * r + 0.5))) for d, r in zip(dims, self.factor))


def _interp_axis(arr: np.ndarray, axis: int, factor: float, out_len: int) -> np.ndarray:
    """Linear interpolation along one axis at output index i -> source index i/factor."""
    n = arr.shape[axis]
    if out_len == n and factor == 1.0:
        return arr
    coords = np.arange(out_len, dtype=np.float64) / factor
    coords = np.clip(coords, 0.0, n - 1.0)
    i0 = np.floor(coords).astype(np.intp)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = coords - i0
    a0 = np.take(arr, i0, axis=axis)
    a1 = np.take(arr, i1, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = out_len
    f = frac.reshape(shape)
    return (1.0 - f) * a0 + f * a1


def resample(vol: CtVolume, target_spacing=(1.0, 1.0, 1.0)) -> CtVolume:
    """Resample to ``target_spacing`` with trilinear interpolation.

    Trilinear interpolation is separable, so the volume is interpolated one
    axis at a time. An exact factor of 1 on every axis returns the input
    untouched.
    """
    spec = ResampleSpec.from_spacings(vol.meta.spacing, target_spacing)
    if all(r == 1.0 for r in spec.factor):
        return vol
    out_dims = spec.output_dims(vol.meta.dims)
    data = vol.voxels.astype(np.float64)
    for axis in range(3):
        data = _interp_axis(data, axis, spec.factor[axis], out_dims[axis])
    meta = replace(
        vol.meta,
        dims=out_dims,
        spacing=spec.target_spacing,
        element_type="MET_FLOAT",
        big_endian=False,
    )
    return CtVolume(meta=meta, voxels=data.astype(np.float32))


def normalize_window(values: np.ndarray, lo: float = -1000.0, hi: float = 400.0) -> np.ndarray:
    """Clamp to [lo, hi] and rescale to [0, 1]."""
    if hi <= lo:
        raise PreprocessError(f"window must satisfy hi > lo, got ({lo}, {hi})")
    return (np.clip(values.astype(np.float64), lo, hi) - lo) / (hi - lo)


def otsu_bin_index(counts) -> int:
    """Split index t (classes: bins <= t vs > t) maximizing between-class variance.

    Comparisons are exact: the variance ratio N^2/D is compared across
    candidates by cross multiplication in arbitrary-precision integers, so
    the winner never depends on float rounding. Ties keep the lowest index.
    """
    counts = [int(c) for c in counts]
    if len(counts) < 2:
        raise PreprocessError("need at least two histogram bins")
    total = sum(counts)
    total_sum = sum(i * c for i, c in enumerate(counts))
    best_t = -1
    best_num = 0  # squared numerator of best variance
    best_den = 1
    w0 = 0
    s0 = 0
    for t in range(len(counts) - 1):
        w0 += counts[t]
        s0 += t * counts[t]
        w1 = total - w0
        if w0 == 0:
            continue
        if w1 == 0:
            break
        num = s0 * w1 - (total_sum - s0) * w0
        den = w0 * w1
        # num^2/den > best_num/best_den  <=>  num^2 * best_den > best_num * den
        if best_t < 0 or num * num * best_den > best_num * den:
            best_t = t
            best_num = num * num
            best_den = den
    if best_t < 0:
        raise PreprocessError("constant input: no valid threshold split")
    return best_t


def otsu_threshold(values: np.ndarray, bin_count: int = 256) -> float:
    """Otsu threshold of a sample set, taken at the winning bin's upper edge."""
    values = np.asarray(values).ravel()
    vmin = float(values.min())
    vmax = float(values.max())
    if vmin == vmax:
        raise PreprocessError("constant input: no valid threshold split")
    counts, _ = np.histogram(values, bins=bin_count, range=(vmin, vmax))
    t = otsu_bin_index(counts)
    return vmin + (t + 1) * (vmax - vmin) / bin_count


_STRUCT_4 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
_STRUCT_8 = np.ones((3, 3), dtype=bool)


def connected_components(mask: np.ndarray, connectivity: int = 8):
    """Label connected set-pixel regions; returns (labels, sizes).

    ``sizes[k]`` is the pixel count of label k+1.
    """
    if connectivity not in (4, 8):
        raise PreprocessError(f"connectivity must be 4 or 8, got {connectivity}")
    structure = _STRUCT_8 if connectivity == 8 else _STRUCT_4
    labels, count = ndimage.label(mask, structure=structure)
    sizes = np.bincount(labels.ravel(), minlength=count + 1)[1:]
    return labels, sizes


def disk_element(radius: int) -> np.ndarray:
    if radius < 0:
        raise PreprocessError(f"radius must be >= 0, got {radius}")
    span = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(span, span, indexing="ij")
    return dy * dy + dx * dx <= radius * radius


def erode(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary erosion by a disk; pixels outside the image count as unset."""
    mask = np.asarray(mask, dtype=bool)
    if radius == 0:
        return mask.copy()
    return ndimage.binary_erosion(mask, structure=disk_element(radius), border_value=0)


def lung_mask(
    slice_hu: np.ndarray,
    threshold: float,
    erosion_radius: int = 2,
    keep_components: int = 2,
) -> np.ndarray:
    """Binary lung mask of one slice; all-False when no lung is found.

    Below-threshold pixels are air-like candidates. Components touching the
    image border are outside air and dropped; of the interior components the
    largest (up to ``keep_components``) survive. Holes are filled so bright
    interior structure stays inside the mask, then the boundary is pulled in
    by erosion.
    """
    candidates = np.asarray(slice_hu) < threshold
    labels, sizes = connected_components(candidates, connectivity=8)
    if sizes.size == 0:
        return np.zeros(candidates.shape, dtype=bool)
    border = np.zeros(candidates.shape, dtype=bool)
    border[0, :] = border[-1, :] = True
    border[:, 0] = border[:, -1] = True
    border_labels = np.unique(labels[border & candidates])
    keep = np.ones(sizes.size + 1, dtype=bool)
    keep[0] = False
    keep[border_labels] = False
    interior = np.flatnonzero(keep[1:]) + 1
    if interior.size == 0:
        return np.zeros(candidates.shape, dtype=bool)
    # stable sort keeps the lower label on size ties
    order = interior[np.argsort(-sizes[interior - 1], kind="stable")]
    chosen = order[:keep_components]
    mask = np.isin(labels, chosen)
    mask = ndimage.binary_fill_holes(mask)
    return erode(mask, erosion_radius)


def remove_peripheral_slices(masks: np.ndarray, area_fraction_min: float = 0.03):
    """Contiguous z-range whose mask area reaches the per-scan cutoff.

    Returns (lo, hi) with hi exclusive, spanning first to last passing slice,
    or None when every slice fails (flagged-empty scan).
    """
    areas = np.asarray([int(np.count_nonzero(m)) for m in masks])
    max_area = areas.max(initial=0)
    if max_area == 0:
        return None
    passing = np.flatnonzero(areas >= area_fraction_min * max_area)
    return int(passing[0]), int(passing[-1]) + 1


@dataclass(frozen=True)
class ClaheParams:
    tile_grid: tuple[int, int] = (8, 8)
    clip_limit: float = 2.0
    bin_count: int = 256

    def __post_init__(self):
        if self.tile_grid[0] < 1 or self.tile_grid[1] < 1:
            raise PreprocessError(f"tile counts must be >= 1, got {self.tile_grid}")
        if self.clip_limit < 1.0:
            raise PreprocessError(f"clip_limit must be >= 1.0, got {self.clip_limit}")
        if self.bin_count < 2:
            raise PreprocessError(f"bin_count must be >= 2, got {self.bin_count}")


def _tile_edges(length: int, tiles: int) -> np.ndarray:
    # spread the remainder over the leading tiles, like np.array_split
    return np.array([round(i * length / tiles) for i in range(tiles + 1)], dtype=np.intp)


def _clipped_lut(tile: np.ndarray, params: ClaheParams) -> np.ndarray:
    bins = params.bin_count
    idx = np.minimum((tile * bins).astype(np.intp), bins - 1)
    hist = np.bincount(idx.ravel(), minlength=bins).astype(np.float64)
    n = tile.size
    clip = params.clip_limit * n / bins
    excess = np.maximum(hist - clip, 0.0).sum()
    hist = np.minimum(hist, clip) + excess / bins
    lut = np.cumsum(hist) / n
    return np.clip(lut, 0.0, 1.0)


def clahe(image: np.ndarray, params: ClaheParams = ClaheParams()) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization on a [0, 1] image.

    Each tile gets its own clipped-histogram equalization mapping; per-pixel
    output bilinearly blends the mappings of the four nearest tile centers.
    Outside the outermost centers the pixel clamps to the edge tile row or
    column, so corners follow a single mapping.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    rows, cols = params.tile_grid
    if rows > h or cols > w:
        raise PreprocessError(f"tile grid {params.tile_grid} exceeds image shape {(h, w)}")
    if image.min() < 0.0 or image.max() > 1.0:
        raise PreprocessError("image values must lie in [0, 1]")

    ye = _tile_edges(h, rows)
    xe = _tile_edges(w, cols)
    luts = np.empty((rows, cols, params.bin_count), dtype=np.float64)
    for r in range(rows):
        for c in range(cols):
            luts[r, c] = _clipped_lut(image[ye[r]:ye[r + 1], xe[c]:xe[c + 1]], params)

    yc = (ye[:-1] + ye[1:] - 1) / 2.0
    xc = (xe[:-1] + xe[1:] - 1) / 2.0
    r0 = np.clip(np.searchsorted(yc, np.arange(h), side="right") - 1, 0, rows - 1)
    c0 = np.clip(np.searchsorted(xc, np.arange(w), side="right") - 1, 0, cols - 1)
    r1 = np.minimum(r0 + 1, rows - 1)
    c1 = np.minimum(c0 + 1, cols - 1)
    wy = np.where(r1 > r0, (np.arange(h) - yc[r0]) / np.where(r1 > r0, yc[r1] - yc[r0], 1.0), 0.0)
    wx = np.where(c1 > c0, (np.arange(w) - xc[c0]) / np.where(c1 > c0, xc[c1] - xc[c0], 1.0), 0.0)
    wy = np.clip(wy, 0.0, 1.0)[:, None]
    wx = np.clip(wx, 0.0, 1.0)[None, :]

    bins = np.minimum((image * params.bin_count).astype(np.intp), params.bin_count - 1)
    r0g = np.broadcast_to(r0[:, None], (h, w))
    r1g = np.broadcast_to(r1[:, None], (h, w))
    c0g = np.broadcast_to(c0[None, :], (h, w))
    c1g = np.broadcast_to(c1[None, :], (h, w))
    out = (
        (1 - wy) * (1 - wx) * luts[r0g, c0g, bins]
        + (1 - wy) * wx * luts[r0g, c1g, bins]
        + wy * (1 - wx) * luts[r1g, c0g, bins]
        + wy * wx * luts[r1g, c1g, bins]
    )
    return out


@dataclass(frozen=True)
class PreprocessConfig:
    target_spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    hu_window: tuple[float, float] = (-1000.0, 400.0)
    otsu_bins: int = 256
    erosion_radius: int = 2
    area_fraction_min: float = 0.03
    clahe_params: ClaheParams = ClaheParams()


@dataclass(frozen=True)
class PreprocessReport:
    """Per-scan record: threshold used, kept z-range, surviving-pixel ratio."""

    threshold: float
    z_range: tuple[int, int]
    reduction_ratio: float
    empty: bool


def preprocess_scan(vol: CtVolume, cfg: PreprocessConfig = PreprocessConfig()):
    """Full per-scan pipeline; returns (processed volume, report).

    An empty result (no lung found anywhere) comes back as an all-zero
    volume with ``report.empty`` set rather than an exception, so scan-level
    batch jobs can skip and continue.
    """
    iso = resample(vol, cfg.target_spacing)
    norm = normalize_window(iso.voxels, *cfg.hu_window)
    nonzero_before = int(np.count_nonzero(norm))

    try:
        threshold = otsu_threshold(norm, cfg.otsu_bins)
    except PreprocessError:
        meta = replace(iso.meta, element_type="MET_FLOAT", big_endian=False)
        empty = CtVolume(meta=meta, voxels=np.zeros(iso.meta.dims, dtype=np.float32))
        return empty, PreprocessReport(float("nan"), (0, 0), 0.0, True)

    masks = np.stack(
        [lung_mask(norm[z], threshold, cfg.erosion_radius) for z in range(norm.shape[0])]
    )
    z_range = remove_peripheral_slices(masks, cfg.area_fraction_min)
    if z_range is None:
        meta = replace(iso.meta, element_type="MET_FLOAT", big_endian=False)
        empty = CtVolume(meta=meta, voxels=np.zeros(iso.meta.dims, dtype=np.float32))
        return empty, PreprocessReport(threshold, (0, 0), 0.0, True)

    lo, hi = z_range
    out = np.empty((hi - lo,) + norm.shape[1:], dtype=np.float32)
    for z in range(lo, hi):
        enhanced = clahe(norm[z], cfg.clahe_params)
        out[z - lo] = np.where(masks[z], enhanced, 0.0)

    oz, oy, ox = iso.meta.origin
    sz = iso.meta.spacing[0]
    meta = replace(
        iso.meta,
        dims=out.shape,
        origin=(oz + lo * sz, oy, ox),
        element_type="MET_FLOAT",
        big_endian=False,
    )
    ratio = float(np.count_nonzero(out)) / nonzero_before if nonzero_before else 0.0
    return CtVolume(meta=meta, voxels=out), PreprocessReport(threshold, (lo, hi), ratio, False)
