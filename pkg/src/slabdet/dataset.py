"""Slab dataset assembly: splitting, positive-rate control, augmentation.

Splitting happens at scan granularity so near-duplicate slabs from one scan
can never land on both sides of a role boundary. All randomness flows from
explicit 64-bit seeds through numpy's PCG64 generator; reruns with the same
inputs and seed produce byte-identical manifests.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, replace

import numpy as np

from ._kernels import bilinear_forward
from .projection import GroundTruthBox

log = logging.getLogger(__name__)

ROLES = ("train", "val", "test")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    scan_id: str
    slab_index: int
    role: str
    path: str
    boxes: tuple[GroundTruthBox, ...]

    @property
    def positive(self) -> bool:
        return len(self.boxes) > 0


@dataclass(frozen=True)
class SplitManifest:
    entries: tuple[ManifestEntry, ...]
    seed: int
    achieved_rates: tuple[tuple[str, float], ...]

    def role_entries(self, role: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.role == role]


def _rates(entries) -> tuple[tuple[str, float], ...]:
    out = []
    for role in ROLES:
        members = [e for e in entries if e.role == role]
        pos = sum(e.positive for e in members)
        out.append((role, pos / len(members) if members else 0.0))
    return tuple(out)


def split(records, seed: int, ratios=(0.7, 0.2, 0.1)) -> SplitManifest:
    """Assign whole scans to train/val/test, balancing slab counts greedily.

    ``records`` are role-less ManifestEntry objects (role ignored). Scans are
    shuffled by PCG64(seed), then each goes to the role with the largest
    remaining slab deficit; ties favor the earlier role in train/val/test
    order.
    """
    if len(ratios) != len(ROLES) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DatasetError(f"ratios must be {len(ROLES)} values summing to 1, got {ratios}")
    records = list(records)
    by_scan: dict[str, list] = {}
    for rec in records:
        by_scan.setdefault(rec.scan_id, []).append(rec)
    scan_ids = list(by_scan)
    if len(scan_ids) < len(ROLES):
        raise DatasetError(f"need at least {len(ROLES)} scans, got {len(scan_ids)}")

    rng = np.random.default_rng(np.random.PCG64(seed))
    order = [scan_ids[i] for i in rng.permutation(len(scan_ids))]

    total = len(records)
    targets = [r * total for r in ratios]
    assigned = [0, 0, 0]
    role_of: dict[str, str] = {}
    for sid in order:
        deficits = [targets[i] - assigned[i] for i in range(len(ROLES))]
        pick = max(range(len(ROLES)), key=lambda i: (deficits[i], -i))
        role_of[sid] = ROLES[pick]
        assigned[pick] += len(by_scan[sid])

    entries = tuple(replace(rec, role=role_of[rec.scan_id]) for rec in records)
    return SplitManifest(entries=entries, seed=seed, achieved_rates=_rates(entries))


def enforce_sparsity(manifest: SplitManifest, role: str, target_rate: float) -> SplitManifest:
    """Subsample one role so its positive fraction lands on target_rate.

    Negatives are dropped uniformly at random (seeded from the manifest seed
    and the role name). When even zero dropped negatives cannot reach a low
    target, positives are subsampled instead and all negatives stay.
    """
    if role not in ROLES:
        raise DatasetError(f"unknown role {role!r}")
    if not 0.0 < target_rate < 1.0:
        raise DatasetError(f"target_rate must be in (0, 1), got {target_rate}")
    members = manifest.role_entries(role)
    pos_idx = [i for i, e in enumerate(members) if e.positive]
    neg_idx = [i for i, e in enumerate(members) if not e.positive]
    if not pos_idx or not neg_idx:
        raise DatasetError(f"role {role!r} needs at least one positive and one negative slab")

    rng = np.random.default_rng(np.random.PCG64(
        np.random.SeedSequence((manifest.seed, zlib.crc32(role.encode())))
    ))
    n_pos = len(pos_idx)
    wanted_neg = int(round(n_pos / target_rate)) - n_pos
    if wanted_neg <= len(neg_idx):
        chosen = rng.choice(len(neg_idx), size=wanted_neg, replace=False)
        keep = set(pos_idx) | {neg_idx[i] for i in chosen}
    else:
        wanted_pos = int(round(target_rate * len(neg_idx) / (1.0 - target_rate)))
        wanted_pos = max(1, min(n_pos, wanted_pos))
        chosen = rng.choice(len(pos_idx), size=wanted_pos, replace=False)
        keep = set(neg_idx) | {pos_idx[i] for i in chosen}

    kept_role = [e for i, e in enumerate(members) if i in keep]
    kept_ids = {(e.scan_id, e.slab_index) for e in kept_role}
    entries = tuple(
        e for e in manifest.entries
        if e.role != role or (e.scan_id, e.slab_index) in kept_ids
    )
    return SplitManifest(entries=entries, seed=manifest.seed, achieved_rates=_rates(entries))


def rebuild(manifest: SplitManifest, entries) -> SplitManifest:
    """New manifest with the given entries; rates are recomputed."""
    entries = tuple(entries)
    return SplitManifest(entries=entries, seed=manifest.seed, achieved_rates=_rates(entries))


@dataclass(frozen=True)
class AugmentationSpec:
    """One sampled augmentation: flips, rotation, brightness scale, noise SD.

    noise_sd_fraction is the Gaussian SD as a fraction of the image value
    range; 0 disables noise (identity case), otherwise it must lie in the
    sampled interval.
    """

    hflip: bool = False
    vflip: bool = False
    rotation_deg: float = 0.0
    brightness_factor: float = 1.0
    noise_sd_fraction: float = 0.0

    def __post_init__(self):
        if not -15.0 <= self.rotation_deg <= 15.0:
            raise DatasetError(f"rotation_deg outside [-15, 15]: {self.rotation_deg}")
        if not 0.85 <= self.brightness_factor <= 1.15:
            raise DatasetError(f"brightness_factor outside [0.85, 1.15]: {self.brightness_factor}")
        if self.noise_sd_fraction != 0.0 and not 1e-5 <= self.noise_sd_fraction <= 0.0018:
            raise DatasetError(f"noise_sd_fraction outside [1e-5, 0.0018]: {self.noise_sd_fraction}")


def sample_augmentation(rng: np.random.Generator) -> AugmentationSpec:
    return AugmentationSpec(
        hflip=bool(rng.random() < 0.5),
        vflip=bool(rng.random() < 0.5),
        rotation_deg=float(rng.uniform(-15.0, 15.0)),
        brightness_factor=float(rng.uniform(0.85, 1.15)),
        noise_sd_fraction=float(rng.uniform(1e-5, 0.0018)),
    )


def slab_rng(seed: int, slab_id: str) -> np.random.Generator:
    """Per-slab generator: order of processing cannot change the draw."""
    return np.random.default_rng(np.random.PCG64(
        np.random.SeedSequence((seed, zlib.crc32(slab_id.encode())))
    ))


def _rotate_image(image: np.ndarray, theta_rad: float) -> np.ndarray:
    h, w = image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.mgrid[0:h, 0:w]
    dx = xs - cx
    dy = ys - cy
    cos_t, sin_t = np.cos(-theta_rad), np.sin(-theta_rad)
    src_x = cos_t * dx - sin_t * dy + cx
    src_y = sin_t * dx + cos_t * dy + cy
    pts = np.stack([src_x.ravel(), src_y.ravel()], axis=1)
    out = bilinear_forward(image[:, :, None].astype(np.float64), pts)
    return out[:, 0].reshape(h, w)


def _rotate_box(box: GroundTruthBox, theta_rad: float, h: int, w: int) -> GroundTruthBox | None:
    cx_px = box.cx * w - 0.5
    cy_px = box.cy * h - 0.5
    hw = box.w * w / 2.0
    hh = box.h * h / 2.0
    corners = np.array([
        [cx_px - hw, cy_px - hh], [cx_px + hw, cy_px - hh],
        [cx_px - hw, cy_px + hh], [cx_px + hw, cy_px + hh],
    ])
    center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    cos_t, sin_t = np.cos(theta_rad), np.sin(theta_rad)
    rot = np.array([[cos_t, -sin_t], [sin_t, cos_t]])
    moved = (corners - center) @ rot.T + center
    x0 = (moved[:, 0].min() + 0.5) / w
    x1 = (moved[:, 0].max() + 0.5) / w
    y0 = (moved[:, 1].min() + 0.5) / h
    y1 = (moved[:, 1].max() + 0.5) / h
    x0, x1 = max(x0, 0.0), min(x1, 1.0)
    y0, y1 = max(y0, 0.0), min(y1, 1.0)
    if x1 - x0 <= 0.0 or y1 - y0 <= 0.0:
        return None
    return GroundTruthBox(
        cx=(x0 + x1) / 2.0, cy=(y0 + y1) / 2.0,
        w=x1 - x0, h=y1 - y0, diameter_mm=box.diameter_mm,
    )


def augment(image: np.ndarray, boxes, spec: AugmentationSpec,
            rng: np.random.Generator | None = None):
    """Apply one augmentation spec to an image and its boxes.

    Returns (image, surviving boxes); boxes whose rotated hull leaves the
    frame entirely are dropped and counted in a warning.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    boxes = list(boxes)
    if spec.hflip:
        image = image[:, ::-1]
        boxes = [replace(b, cx=1.0 - b.cx) for b in boxes]
    if spec.vflip:
        image = image[::-1, :]
        boxes = [replace(b, cy=1.0 - b.cy) for b in boxes]
    if spec.rotation_deg != 0.0:
        theta = float(np.deg2rad(spec.rotation_deg))
        image = _rotate_image(np.ascontiguousarray(image), theta)
        rotated = [_rotate_box(b, theta, h, w) for b in boxes]
        dropped = sum(b is None for b in rotated)
        if dropped:
            log.warning("augmentation dropped %d box(es) rotated out of frame", dropped)
        boxes = [b for b in rotated if b is not None]
    if spec.brightness_factor != 1.0:
        image = np.clip(image * spec.brightness_factor, 0.0, 1.0)
    if spec.noise_sd_fraction != 0.0:
        if rng is None:
            raise DatasetError("noise augmentation needs a generator")
        image = np.clip(image + rng.normal(0.0, spec.noise_sd_fraction, image.shape), 0.0, 1.0)
    return np.ascontiguousarray(image), boxes


# ---- manifest files ----

def _format_entry(e: ManifestEntry) -> str:
    parts = [e.scan_id, str(e.slab_index), e.role, e.path]
    for b in e.boxes:
        parts.extend(repr(float(v)) for v in (b.cx, b.cy, b.w, b.h, b.diameter_mm))
    return ",".join(parts)


def dump_manifest(manifest: SplitManifest) -> str:
    lines = ["# slab manifest", f"# seed: {manifest.seed}"]
    rates = " ".join(f"{role}={rate:.6f}" for role, rate in manifest.achieved_rates)
    lines.append(f"# rates: {rates}")
    lines.extend(_format_entry(e) for e in manifest.entries)
    return "\n".join(lines) + "\n"


def parse_manifest(text: str) -> SplitManifest:
    seed = 0
    entries = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            if line.startswith("# seed:"):
                seed = int(line.split(":", 1)[1])
            continue
        parts = line.split(",")
        if len(parts) < 4 or (len(parts) - 4) % 5 != 0:
            raise DatasetError(f"malformed manifest line: {line!r}")
        boxes = []
        for i in range(4, len(parts), 5):
            cx, cy, bw, bh, d = (float(v) for v in parts[i:i + 5])
            boxes.append(GroundTruthBox(cx=cx, cy=cy, w=bw, h=bh, diameter_mm=d))
        if parts[2] not in ROLES:
            raise DatasetError(f"unknown role {parts[2]!r} in manifest")
        entries.append(ManifestEntry(
            scan_id=parts[0], slab_index=int(parts[1]), role=parts[2],
            path=parts[3], boxes=tuple(boxes),
        ))
    entries = tuple(entries)
    return SplitManifest(entries=entries, seed=seed, achieved_rates=_rates(entries))
