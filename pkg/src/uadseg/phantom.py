"""Seeded synthetic brain-like phantoms with ground-truth tumor subregions.

Each phantom is an ellipsoidal "brain" of smoothed noise texture on a dark
background. Tumors are nested spheres: an enhancing core (bright in t1c),
a non-enhancing shell around it (dark in t1c, not bright in t2f), and an
outer FLAIR-hyperintense region (bright in t2f). Intensities are chosen so
that, after per-volume z-scoring, tumor contrasts comfortably straddle the
fixed 1.2 residual floor used downstream while healthy tissue stays below.

Generation is pure: a PhantomSpec fully determines the output (Philox
counter-based RNG, no global state).
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.ndimage import gaussian_filter

from .volcore import MODALITY_TAGS, LabelVolume, MultimodalVolume

RNG_ALGORITHM = "numpy-philox"

# Sphere radii of the nested subregions, as fractions of the whole-tumor radius.
ET_CORE_FRACTION = 0.45
NET_SHELL_FRACTION = 0.65

# Whole-tumor radius range in voxels (before the size cap for multi-tumor specs).
TUMOR_RADIUS_RANGE = (5.0, 9.0)

MAX_TUMOR_BRAIN_FRACTION = 0.05
MIN_TUMOR_BRAIN_FRACTION = 0.001


class PhantomSpecError(ValueError):
    """Spec validation failure (e.g. tumor cannot fit inside the brain)."""


def default_intensity_model() -> dict:
    """Raw-intensity mean/std per tissue per modality.

    Brain sits at 10 +- 1 on a ~0 background, so after per-volume z-scoring
    healthy tissue lands near +1.4 with noise std ~0.2, enhancing regions
    near +3.5, and the hypointense NET core below brain level in t1c.
    """
    base = {tag: (10.0, 1.0) for tag in MODALITY_TAGS}
    model = {
        "background": {tag: (0.0, 0.05) for tag in MODALITY_TAGS},
        "brain": dict(base),
        "ET": dict(base, t1c=(20.0, 1.0), t2f=(20.0, 1.0)),
        "NET": dict(base, t1c=(6.0, 1.0)),
        "SNFH": dict(base, t2f=(20.0, 1.0)),
    }
    return model


@dataclass
class PhantomSpec:
    shape: tuple[int, int, int] = (32, 96, 96)
    seed: int = 0
    tumor_present: bool = True
    tumor_count: int = 1
    intensity_model: dict = field(default_factory=default_intensity_model)
    smoothness_sigma: float = 1.0

    def __post_init__(self):
        if len(self.shape) != 3 or min(self.shape) < 8:
            raise PhantomSpecError(f"shape must be 3 dims of at least 8, got {self.shape}")
        if self.tumor_count < 0:
            raise PhantomSpecError("tumor_count must be >= 0")
        if self.smoothness_sigma < 0:
            raise PhantomSpecError("smoothness_sigma must be >= 0")

    def to_json_dict(self) -> dict:
        out = asdict(self)
        out["shape"] = list(self.shape)
        out["rng"] = RNG_ALGORITHM
        return out


@dataclass
class PhantomInfo:
    """Generation facts recorded in the phantom_spec.json sidecar."""

    brain_voxels: int
    tumor_voxels: int
    tumor_centers: list
    tumor_radii: list


def _brain_ellipsoid(shape, rng):
    """Brain mask plus the coordinate grids used for tumor placement."""
    d, h, w = shape
    semi = np.array([0.45 * d, 0.42 * h, 0.42 * w]) * rng.uniform(0.95, 1.05, size=3)
    center = np.array([d / 2.0, h / 2.0, w / 2.0]) + rng.uniform(-1.5, 1.5, size=3)
    zz, yy, xx = np.meshgrid(
        np.arange(d, dtype=np.float64),
        np.arange(h, dtype=np.float64),
        np.arange(w, dtype=np.float64),
        indexing="ij",
    )
    ecoord = np.sqrt(
        ((zz - center[0]) / semi[0]) ** 2
        + ((yy - center[1]) / semi[1]) ** 2
        + ((xx - center[2]) / semi[2]) ** 2
    )
    return ecoord <= 1.0, (zz, yy, xx), center, semi


def _place_tumors(spec, rng, grids, brain_center, brain_semi, brain_voxels):
    """Sample non-overlapping nested-sphere tumors fully inside the brain."""
    zz, yy, xx = grids
    min_semi = float(brain_semi.min())
    r_lo, r_hi = TUMOR_RADIUS_RANGE
    if spec.tumor_count > 0:
        # Cap radii so tumors fit inside the brain and the total tumor volume
        # stays under the brain-fraction limit.
        cap = (MAX_TUMOR_BRAIN_FRACTION * brain_voxels * 3.0 / (4.0 * np.pi * spec.tumor_count)) ** (1.0 / 3.0)
        r_hi = min(r_hi, cap, 0.8 * min_semi - 2.0)
        r_lo = min(r_lo, max(2.5, 0.6 * r_hi))
        if r_hi < r_lo:
            raise PhantomSpecError(
                f"cannot fit {spec.tumor_count} tumor(s) of radius >= {r_lo:.1f} inside "
                f"brain semi-axes {np.round(brain_semi, 1)} under the "
                f"{MAX_TUMOR_BRAIN_FRACTION:.0%} volume limit"
            )

    labels = np.zeros(spec.shape, dtype=np.uint8)
    centers, radii = [], []
    for _ in range(spec.tumor_count):
        radius = float(rng.uniform(r_lo, r_hi))
        for _attempt in range(200):
            cand = brain_center + (rng.uniform(-1.0, 1.0, size=3) * (brain_semi - radius - 2.0))
            ecoord = np.sqrt(float(np.sum(((cand - brain_center) / brain_semi) ** 2)))
            if ecoord + (radius + 2.0) / min_semi > 0.98:
                continue
            if all(np.linalg.norm(cand - c) >= radius + r + 3.0 for c, r in zip(centers, radii)):
                break
        else:
            raise PhantomSpecError(f"could not place {spec.tumor_count} separated tumors")
        dist = np.sqrt((zz - cand[0]) ** 2 + (yy - cand[1]) ** 2 + (xx - cand[2]) ** 2)
        et = dist <= ET_CORE_FRACTION * radius
        net = (dist <= NET_SHELL_FRACTION * radius) & ~et
        snfh = (dist <= radius) & ~(dist <= NET_SHELL_FRACTION * radius)
        labels[snfh] = 2
        labels[net] = 1
        labels[et] = 3
        centers.append([float(v) for v in cand])
        radii.append(radius)
    return labels, centers, radii


def generate_phantom_detailed(spec: PhantomSpec):
    """Generate (volume, labels, info); bit-identical for identical specs."""
    rng = np.random.Generator(np.random.Philox(spec.seed))
    brain, grids, brain_center, brain_semi = _brain_ellipsoid(spec.shape, rng)
    brain_voxels = int(brain.sum())

    if spec.tumor_present and spec.tumor_count > 0:
        labels, centers, radii = _place_tumors(spec, rng, grids, brain_center, brain_semi, brain_voxels)
    else:
        labels = np.zeros(spec.shape, dtype=np.uint8)
        centers, radii = [], []

    tumor_voxels = int((labels != 0).sum())
    if spec.tumor_present and spec.tumor_count > 0:
        frac = tumor_voxels / brain_voxels
        if not (MIN_TUMOR_BRAIN_FRACTION <= frac <= MAX_TUMOR_BRAIN_FRACTION):
            raise PhantomSpecError(f"tumor fraction {frac:.4%} outside generator contract")

    tissue_masks = {
        "brain": brain & (labels == 0),
        "ET": labels == 3,
        "NET": labels == 1,
        "SNFH": labels == 2,
    }
    data = np.empty((len(MODALITY_TAGS),) + tuple(spec.shape), dtype=np.float32)
    for m, tag in enumerate(MODALITY_TAGS):
        bg_mean, bg_std = spec.intensity_model["background"][tag]
        mean_field = np.full(spec.shape, bg_mean, dtype=np.float64)
        std_field = np.full(spec.shape, bg_std, dtype=np.float64)
        for tissue, mask in tissue_masks.items():
            mean, std = spec.intensity_model[tissue][tag]
            mean_field[mask] = mean
            std_field[mask] = std
        if spec.smoothness_sigma > 0:
            mean_field = gaussian_filter(mean_field, spec.smoothness_sigma)
            std_field = gaussian_filter(std_field, spec.smoothness_sigma)
        noise = rng.standard_normal(spec.shape)
        if spec.smoothness_sigma > 0:
            noise = gaussian_filter(noise, spec.smoothness_sigma)
            noise /= noise.std()
        data[m] = (mean_field + std_field * noise).astype(np.float32)

    vol = MultimodalVolume(modalities=list(MODALITY_TAGS), data=data)
    info = PhantomInfo(
        brain_voxels=brain_voxels,
        tumor_voxels=tumor_voxels,
        tumor_centers=centers,
        tumor_radii=radii,
    )
    return vol, LabelVolume(data=labels), info


def generate_phantom(spec: PhantomSpec):
    """Generate (MultimodalVolume, LabelVolume) for a spec."""
    vol, labels, _ = generate_phantom_detailed(spec)
    return vol, labels


def brain_mask(spec: PhantomSpec) -> np.ndarray:
    """Brain mask of the phantom a spec generates.

    The ellipsoid is drawn from the seed before anything else, so replaying
    those draws reproduces it exactly.
    """
    rng = np.random.Generator(np.random.Philox(spec.seed))
    mask, _, _, _ = _brain_ellipsoid(spec.shape, rng)
    return mask
