"""Synthetic spleen-like phantoms for desk-scale training and testing.

Random streams: every phantom seed feeds a ``numpy.random.SeedSequence``
that spawns five independent Philox (counter-based) streams, used in this
order: 0 spleen shape, 1 spleen pose, 2 distractors, 3 bias field,
4 noise. Cohort members get per-scan seeds from
``SeedSequence(cohort_seed).spawn(n)``, so results are portable across
platforms and independent of draw counts in other components.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from .volume import IntensityVolume, LabelVolume, Modality, VolumeHeader

STYLES = ("T1", "T2")

# (spleen, background, distractor) means before bias and noise
_STYLE_LEVELS = {
    "T1": (0.80, 0.30, 0.58),
    "T2": (0.25, 0.72, 0.48),
}


@dataclass(frozen=True)
class PhantomSpec:
    side: int = 64
    semi_axis_range: tuple[float, float] = (10.0, 18.0)
    translation_jitter: float = 0.15  # fraction of the side
    style: str = "T1"
    distractor_count: tuple[int, int] = (1, 3)
    distractor_axis_range: tuple[float, float] = (2.5, 5.0)
    noise_sigma: float = 0.04
    bias_amplitude: float = 0.10
    spacing: tuple[float, float, float] = (1.5, 1.5, 2.0)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.semi_axis_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad semi_axis_range {self.semi_axis_range}")
        if 2 * hi + 2 > self.side:
            raise ValueError(f"infeasible spec: semi-axes up to {hi} do not fit a {self.side}^3 grid")
        if self.style not in STYLES:
            raise ValueError(f"style must be one of {STYLES}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.distractor_count[0] < 0 or self.distractor_count[0] > self.distractor_count[1]:
            raise ValueError(f"bad distractor_count {self.distractor_count}")

    def to_dict(self) -> dict:
        return asdict(self)


def _streams(seed: int) -> list[np.random.Generator]:
    children = np.random.SeedSequence(int(seed)).spawn(5)
    return [np.random.Generator(np.random.Philox(c)) for c in children]


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation matrix from a normalized Gaussian quaternion."""
    q = rng.standard_normal(4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def _grid(side: int) -> np.ndarray:
    idx = np.arange(side, dtype=np.float64)
    return np.stack(np.meshgrid(idx, idx, idx, indexing="ij"), axis=-1)


def ellipsoid_mask(side: int, center, axes, rotation) -> np.ndarray:
    """Voxels whose index coordinates satisfy sum((R^T (p - c))_i / a_i)^2 <= 1."""
    local = (_grid(side) - np.asarray(center)) @ np.asarray(rotation)
    return np.sum((local / np.asarray(axes)) ** 2, axis=-1) <= 1.0


def _bias_field(rng: np.random.Generator, side: int, amplitude: float) -> np.ndarray:
    if amplitude == 0:
        return np.zeros((side,) * 3)
    u = np.linspace(-1.0, 1.0, side)
    x, y, z = np.meshgrid(u, u, u, indexing="ij")
    terms = [x, y, z, x * x, y * y, z * z, x * y, x * z, y * z]
    coef = rng.uniform(-1.0, 1.0, len(terms))
    field = sum(c * t for c, t in zip(coef, terms))
    peak = np.abs(field).max()
    return field * (amplitude / peak) if peak > 0 else field


@dataclass(frozen=True)
class PhantomGeometry:
    center: tuple[float, float, float]
    axes: tuple[float, float, float]
    rotation: np.ndarray


def phantom_geometry(spec: PhantomSpec) -> PhantomGeometry:
    """Spleen pose and shape drawn from the shape and pose streams of ``spec.seed``."""
    shape_rng, pose_rng = _streams(spec.seed)[:2]
    lo, hi = spec.semi_axis_range
    axes = tuple(float(a) for a in shape_rng.uniform(lo, hi, 3))
    rotation = random_rotation(pose_rng)
    reach = max(axes) + 1
    mid = (spec.side - 1) / 2.0
    jitter = min(spec.translation_jitter * spec.side, max(0.0, mid - reach))
    center = tuple(float(c) for c in mid + pose_rng.uniform(-jitter, jitter, 3))
    return PhantomGeometry(center, axes, rotation)


def generate_phantom(spec: PhantomSpec) -> tuple[IntensityVolume, LabelVolume]:
    """Rasterized rotated-ellipsoid label and a styled intensity volume.

    Distractor blobs appear in the intensity only, never in the label.
    """
    _, _, distractor_rng, bias_rng, noise_rng = _streams(spec.seed)
    geom = phantom_geometry(spec)
    side = spec.side
    label = ellipsoid_mask(side, geom.center, geom.axes, geom.rotation)

    fg, bg, dist_level = _STYLE_LEVELS[spec.style]
    image = np.full((side,) * 3, bg, dtype=np.float64)
    lo_n, hi_n = spec.distractor_count
    n_distractors = int(distractor_rng.integers(lo_n, hi_n + 1))
    d_lo, d_hi = spec.distractor_axis_range
    for _ in range(n_distractors):
        axes = distractor_rng.uniform(d_lo, d_hi, 3)
        rot = random_rotation(distractor_rng)
        reach = float(axes.max()) + 1
        center = distractor_rng.uniform(reach, side - 1 - reach, 3)
        blob = ellipsoid_mask(side, center, axes, rot) & ~label
        image[blob] = dist_level
    image[label] = fg

    image *= 1.0 + _bias_field(bias_rng, side, spec.bias_amplitude)
    if spec.noise_sigma > 0:
        image += noise_rng.normal(0.0, spec.noise_sigma, image.shape)

    modality = Modality.T1W if spec.style == "T1" else Modality.T2W
    header = VolumeHeader((side,) * 3, spec.spacing, modality)
    return IntensityVolume(header, image.astype(np.float32)), LabelVolume(header, label.astype(np.uint8))


@dataclass(frozen=True)
class CohortEntry:
    scan_id: str
    subject_id: str
    style: str
    seed: int

    @property
    def modality(self) -> str:
        return "T1w" if self.style == "T1" else "T2w"


def cohort_entries(n: int, seed: int, scans_per_subject: int = 2) -> list[CohortEntry]:
    """Scan ids, pseudo-subjects, alternating styles and derived seeds for a cohort."""
    if n < 1:
        raise ValueError("cohort size must be >= 1")
    children = np.random.SeedSequence(int(seed)).spawn(n)
    return [
        CohortEntry(
            scan_id=f"phantom_{i:03d}",
            subject_id=f"subject_{i // scans_per_subject:03d}",
            style=STYLES[i % 2],
            seed=int(child.generate_state(1)[0]),
        )
        for i, child in enumerate(children)
    ]


def generate_cohort(n: int, base_spec: PhantomSpec, seed: int) -> list[tuple[IntensityVolume, LabelVolume]]:
    return [generate_phantom(replace(base_spec, style=e.style, seed=e.seed)) for e in cohort_entries(n, seed)]
