"""
phantom.py

Synthetic abdominal CT phantoms with known ground truth.

Each phantom is built masks first: an ellipsoidal liver, spherical tumors
placed fully inside it, a distractor organ of liver intensity (so the
largest-component filter has work to do), a fatty body and air around it.
Tissue means plus per-tissue Gaussian noise and a boundary blur give the HU
image.

The clinical record of a phantom follows a known linear model of its tumor
burden:

    TLVR = intercept + sum_j coefficients[j] * feature_j + noise

All features but one are drawn at random; the anchor feature is solved so
the relation holds exactly, which makes the generator its own oracle for
the clinical fit.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .clinical import compute_tlvr
from .errors import InfeasibleSpec, IoError, OutOfRange
from .volio import (
    BINARY_FEATURES,
    FEATURE_SCHEMA,
    LABEL_BACKGROUND,
    LABEL_LIVER,
    LABEL_TUMOR,
    ClinicalRecord,
    Mask,
    Volume,
    read_clinical_csv,
    read_mask,
    read_nifti,
    write_clinical_csv,
    write_mask,
    write_nifti,
)

logger = logging.getLogger(__name__)

MAX_PLACEMENT_TRIES = 200

DEFAULT_COEFFICIENTS = {
    "afp": 0.002,
    "tnm": 0.01,
    "clip_score": 0.008,
    "t_involvement": 0.03,
    "metastasis": 0.015,
    "lymphnodes": 0.01,
}


@dataclass(frozen=True)
class PhantomSpec:
    """
    Geometry, intensities and clinical model of a phantom family.

    Lengths are in mm, world position of voxel i is i * spacing.

    Attributes:
        dims, spacing: grid size and voxel size.
        liver_center, liver_radii: liver ellipsoid.
        tumor_count (int): tumors per phantom.
        tumor_radius_range (tuple): min/max tumor radius.
        distractor_center, distractor_radii: liver-intensity organ, or None.
        body_radii (tuple): in-plane radii of the fat cylinder.
        hu_air, hu_fat, hu_liver, hu_tumor (float): tissue means.
        sd_fat, sd_liver, sd_tumor (float): tissue noise standard deviations.
        blur_sigma (float): boundary blur in voxels.
        coefficients (dict): raw clinical coefficients, one must be the anchor.
        intercept (float): clinical model intercept.
        noise_sigma (float): clinical model noise.
        anchor_feature (str): continuous feature solved from the model.
    """

    dims: tuple = (64, 64, 32)
    spacing: tuple = (1.5, 1.5, 3.0)
    liver_center: tuple = (48.0, 45.0, 48.0)
    liver_radii: tuple = (30.0, 24.0, 30.0)
    tumor_count: int = 2
    tumor_radius_range: tuple = (8.0, 12.0)
    distractor_center: tuple = (78.0, 70.0, 48.0)
    distractor_radii: tuple = (8.0, 8.0, 12.0)
    body_radii: tuple = (46.0, 44.0)
    hu_air: float = -1000.0
    hu_fat: float = -80.0
    hu_liver: float = 60.0
    hu_tumor: float = 110.0
    sd_fat: float = 10.0
    sd_liver: float = 10.0
    sd_tumor: float = 10.0
    blur_sigma: float = 0.75
    coefficients: dict = field(default_factory=lambda: dict(DEFAULT_COEFFICIENTS))
    intercept: float = -0.3
    noise_sigma: float = 0.005
    anchor_feature: str = "afp"

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise InfeasibleSpec(f"dims must be 3 positive integers, got {self.dims}")
        if min(self.spacing) <= 0 or min(self.liver_radii) <= 0:
            raise InfeasibleSpec("spacing and liver radii must be positive")
        if self.tumor_count < 0:
            raise InfeasibleSpec("tumor_count must be >= 0")
        lo, hi = self.tumor_radius_range
        if not 0 < lo <= hi:
            raise InfeasibleSpec(f"invalid tumor radius range {self.tumor_radius_range}")
        if self.noise_sigma < 0 or min(self.sd_fat, self.sd_liver, self.sd_tumor, self.blur_sigma) < 0:
            raise InfeasibleSpec("noise levels must be non-negative")
        if self.anchor_feature not in self.coefficients or self.coefficients[self.anchor_feature] == 0:
            raise InfeasibleSpec(f"anchor feature {self.anchor_feature!r} needs a nonzero coefficient")
        unknown = set(self.coefficients) - set(FEATURE_SCHEMA)
        if unknown:
            raise InfeasibleSpec(f"coefficients for unknown features: {sorted(unknown)}")

    @classmethod
    def high_contrast(cls, **changes):
        return cls(**changes)

    @classmethod
    def low_contrast(cls, **changes):
        settings = dict(hu_tumor=78.0, sd_liver=12.0, sd_tumor=12.0)
        settings.update(changes)
        return cls(**settings)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def coefficient_vector(self, names=FEATURE_SCHEMA):
        return np.array([self.coefficients.get(n, 0.0) for n in names])


@dataclass(frozen=True, eq=False)
class PhantomCase:
    """One generated case."""

    volume: Volume
    liver: Mask
    tumor: Mask
    record: ClinicalRecord

    @property
    def patient_id(self):
        return self.record.patient_id

    @property
    def tlvr(self):
        return compute_tlvr(self.liver, self.tumor)


# ______________________________________________________________________________
# Geometry


def _world_grid(spec):
    axes = [np.arange(n, dtype=np.float64) * s for n, s in zip(spec.dims, spec.spacing)]
    return np.meshgrid(*axes, indexing="ij")


def _ellipsoid(grid, center, radii):
    total = np.zeros(grid[0].shape)
    for coord, c, r in zip(grid, center, radii):
        total += ((coord - c) / r) ** 2
    return total <= 1.0


def _place_tumors(spec, grid, liver, rng):
    tumor = np.zeros(liver.shape, dtype=bool)
    if spec.tumor_count == 0:
        return tumor
    candidates = np.argwhere(liver)
    for k in range(spec.tumor_count):
        for _ in range(MAX_PLACEMENT_TRIES):
            radius = rng.uniform(*spec.tumor_radius_range)
            index = candidates[rng.integers(len(candidates))]
            center = index * np.asarray(spec.spacing)
            sphere = _ellipsoid(grid, center, (radius, radius, radius))
            if sphere.any() and not np.any(sphere & ~liver):
                tumor |= sphere
                break
        else:
            raise InfeasibleSpec(
                f"tumor {k + 1} of radius in {spec.tumor_radius_range} does not fit in the liver")
    return tumor


def _clinical_record(spec, tlvr, patient_id, rng):
    features = {}
    for name in FEATURE_SCHEMA:
        if name in BINARY_FEATURES or name == "t_involvement":
            features[name] = float(rng.random() < 0.4)
        elif name == "clip_score":
            features[name] = float(rng.integers(0, 7))
        elif name == "tnm":
            features[name] = float(rng.integers(1, 8))
        elif name == "age":
            features[name] = float(np.round(rng.normal(62.0, 9.0), 1))
        elif name == "ttp":
            features[name] = float(np.round(abs(rng.normal(9.0, 4.0)), 2))
        elif name == "interval_bl":
            features[name] = float(np.round(abs(rng.normal(30.0, 12.0)), 1))
        else:
            features[name] = float(np.round(abs(rng.normal(100.0, 40.0)), 2))
    noise = rng.normal(0.0, spec.noise_sigma) if spec.noise_sigma > 0 else 0.0
    anchor = spec.anchor_feature
    rest = sum(c * features[n] for n, c in spec.coefficients.items() if n != anchor)
    features[anchor] = (tlvr - noise - spec.intercept - rest) / spec.coefficients[anchor]
    return ClinicalRecord(patient_id, features)


def clinical_value(spec, record):
    """Noise-free model value intercept + sum_j c_j f_j of a record."""
    return spec.intercept + sum(c * record.value(n) for n, c in spec.coefficients.items())


def generate_phantom(spec=PhantomSpec(), seed=0, patient_id=None):
    """
    Generate one phantom.

    Args:
        spec (PhantomSpec): family settings.
        seed (int): all randomness derives from this seed.
        patient_id (str): record identifier (default "phantom-<seed>").

    Returns:
        tuple: (HU Volume, liver Mask, tumor Mask, ClinicalRecord). The liver
        mask labels liver tissue LIVER and tumor tissue TUMOR; the tumor mask
        carries TUMOR only.

    Raises:
        InfeasibleSpec: tumors cannot be placed inside the liver.
    """
    rng = np.random.default_rng(seed)
    grid = _world_grid(spec)
    liver = _ellipsoid(grid, spec.liver_center, spec.liver_radii)
    if not liver.any():
        raise InfeasibleSpec("liver ellipsoid misses the grid")
    tumor = _place_tumors(spec, grid, liver, rng)

    body = _ellipsoid(grid[:2], spec.liver_center[:2], spec.body_radii) | liver
    mean = np.full(spec.dims, spec.hu_air)
    sd = np.zeros(spec.dims)
    mean[body], sd[body] = spec.hu_fat, spec.sd_fat
    if spec.distractor_center is not None:
        distractor = _ellipsoid(grid, spec.distractor_center, spec.distractor_radii) & ~liver
        mean[distractor], sd[distractor] = spec.hu_liver, spec.sd_liver
    mean[liver], sd[liver] = spec.hu_liver, spec.sd_liver
    mean[tumor], sd[tumor] = spec.hu_tumor, spec.sd_tumor

    if spec.blur_sigma > 0:
        mean = ndimage.gaussian_filter(mean, spec.blur_sigma, mode="nearest")
    hu = mean + sd * rng.standard_normal(spec.dims)
    volume = Volume(hu.astype(np.float32), spec.spacing)

    labels = np.where(tumor, LABEL_TUMOR, np.where(liver, LABEL_LIVER, LABEL_BACKGROUND))
    liver_mask = Mask(labels.astype(np.uint8), spec.spacing)
    tumor_mask = Mask.from_bool(tumor, liver_mask, LABEL_TUMOR)

    tlvr = compute_tlvr(liver_mask, tumor_mask)
    record = _clinical_record(spec, tlvr, patient_id or f"phantom-{seed:04d}", rng)
    logger.debug("phantom seed %d: %d tumor voxels, tlvr %.4f", seed, int(tumor.sum()), tlvr)
    return volume, liver_mask, tumor_mask, record


def generate_cohort(spec=PhantomSpec(), n=8, seed=0):
    """n phantoms with seeds seed, seed + 1, ... as PhantomCases."""
    cases = [PhantomCase(*generate_phantom(spec, seed + k)) for k in range(n)]
    logger.info("generated %d phantoms (seeds %d..%d)", n, seed, seed + n - 1)
    return cases


def perturb_labels(mask, rng, radius=1, p=0.5, label=LABEL_TUMOR):
    """
    Label noise: dilate `label` with probability p, else erode it.

    Args:
        mask (Mask): ground truth.
        rng (np.random.Generator): randomness source.
        radius (int): structuring-element radius (6-connected ball).

    Returns:
        Mask with only `label` changed.
    """
    if radius < 0 or not 0.0 <= p <= 1.0:
        raise OutOfRange(f"invalid label noise radius={radius}, p={p}")
    if radius == 0:
        return mask
    selected = mask.labels == label
    structure = ndimage.iterate_structure(ndimage.generate_binary_structure(3, 1), radius)
    if rng.random() < p:
        changed = ndimage.binary_dilation(selected, structure)
    else:
        changed = ndimage.binary_erosion(selected, structure)
    labels = np.where(changed, label, np.where(selected, LABEL_BACKGROUND, mask.labels))
    return mask.with_labels(labels.astype(np.uint8))


# ______________________________________________________________________________
# Cohort files


def case_paths(directory, patient_id):
    directory = Path(directory)
    return {
        "image": directory / f"{patient_id}_image.nii",
        "liver": directory / f"{patient_id}_liver.nii",
        "tumor": directory / f"{patient_id}_tumor.nii",
    }


def write_cohort(cases, directory):
    """NIfTI image and masks per case plus one clinical.csv."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {directory}: {exc}") from exc
    for case in cases:
        paths = case_paths(directory, case.patient_id)
        write_nifti(case.volume, paths["image"])
        write_mask(case.liver, paths["liver"])
        write_mask(case.tumor, paths["tumor"])
    write_clinical_csv([c.record for c in cases], directory / "clinical.csv")


def read_cohort(directory, allow_extra=False):
    """Inverse of write_cohort; `allow_extra` is passed to read_clinical_csv."""
    directory = Path(directory)
    cases = []
    for record in read_clinical_csv(directory / "clinical.csv", allow_extra):
        paths = case_paths(directory, record.patient_id)
        cases.append(PhantomCase(
            read_nifti(paths["image"]),
            read_mask(paths["liver"]),
            read_mask(paths["tumor"]),
            record,
        ))
    return cases
