"""
postprocess.py

Output refinement.

 - largest_component / fill_holes: liver clean-up. Foreground components
   use 26-connectivity, hole reachability uses 6-connectivity.
 - active_contour_refine: morphological Chan-Vese evolution seeded with the
   predicted tumor. The region term is evaluated in 3D; curvature smoothing
   works per axial slice with the four 2D line structuring elements.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DegenerateRegionsWarning, EmptyMask, OutOfRange
from .volio import LABEL_BACKGROUND, LABEL_TUMOR, Mask, check_aligned

logger = logging.getLogger(__name__)

FULL_CONNECTIVITY = np.ones((3, 3, 3), dtype=bool)
FACE_CONNECTIVITY = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class ContourConfig:
    """Active-contour settings; two iterations is the pipeline default."""

    iterations: int = 2
    lambda1: float = 1.0
    lambda2: float = 1.0
    smoothing_passes: int = 1

    def __post_init__(self):
        values = (self.iterations, self.lambda1, self.lambda2, self.smoothing_passes)
        if any(v < 0 for v in values):
            raise OutOfRange(f"contour settings must be non-negative, got {values}")


@dataclass
class ContourTrace:
    """
    Result of run_active_contour.

    Attributes:
        mask (Mask): refined mask.
        energies (list): (before, after) region energy of every attachment
            step, both evaluated with that step's region means.
        means (list): (c_inside, c_outside) per iteration.
        degenerate (bool): a region emptied and the last valid mask was kept.
    """

    mask: Mask
    energies: list = field(default_factory=list)
    means: list = field(default_factory=list)
    degenerate: bool = False


# ______________________________________________________________________________
# Components and holes


def largest_component(mask, label):
    """
    Keep only the largest 26-connected component of `label`.

    Other labels are left untouched. Equal-size components are resolved in
    favour of the one holding the smallest linear index (x fastest).
    """
    selected = mask.labels == label
    components, count = ndimage.label(selected, structure=FULL_CONNECTIVITY)
    if count <= 1:
        return mask
    indices = np.arange(1, count + 1)
    sizes = ndimage.sum_labels(selected, components, indices)
    linear = np.arange(selected.size).reshape(selected.shape, order="F")
    first = ndimage.minimum(linear, components, indices)
    # sort by size descending, then first index ascending
    keep = indices[np.lexsort((first, -sizes))[0]]
    labels = np.where(selected & (components != keep), LABEL_BACKGROUND, mask.labels)
    logger.debug("largest component of label %d: kept %d of %d", label, int(sizes[keep - 1]), count)
    return mask.with_labels(labels)


def fill_holes(mask, label):
    """Relabel background voxels that cannot reach the border (6-connected) to `label`."""
    background = mask.labels == LABEL_BACKGROUND
    filled = ndimage.binary_fill_holes(~background, structure=FACE_CONNECTIVITY)
    holes = filled & background
    if not holes.any():
        return mask
    return mask.with_labels(np.where(holes, label, mask.labels))


# ______________________________________________________________________________
# Morphological curvature operators

_LINE_ELEMENTS = tuple(
    element.astype(bool)[:, :, np.newaxis]
    for element in (
        np.eye(3),
        np.array([[0, 1, 0]] * 3),
        np.flipud(np.eye(3)),
        np.rot90([[0, 1, 0]] * 3),
    )
)


def sup_inf(u):
    """Union of erosions by the line elements (per axial slice)."""
    return np.any([ndimage.binary_erosion(u, element) for element in _LINE_ELEMENTS], axis=0)


def inf_sup(u):
    """Intersection of dilations by the line elements (per axial slice)."""
    return np.all([ndimage.binary_dilation(u, element) for element in _LINE_ELEMENTS], axis=0)


def curvature_smooth(u, passes, start=0):
    """
    Apply `passes` smoothing passes, alternating SI.IS and IS.SI.

    Args:
        u (np.ndarray): boolean level set.
        passes (int): number of passes.
        start (int): parity of the first pass, so the alternation carries
            over between iterations.
    """
    for k in range(start, start + passes):
        u = sup_inf(inf_sup(u)) if k % 2 == 0 else inf_sup(sup_inf(u))
    return u


# ______________________________________________________________________________
# Active contour without edges


def region_energy(image, u, c_in, c_out, lambda1=1.0, lambda2=1.0, domain=None):
    """sum_in lambda1 (I - c_in)^2 + sum_out lambda2 (I - c_out)^2 over the domain."""
    domain = np.ones(u.shape, dtype=bool) if domain is None else domain
    inside = u & domain
    outside = ~u & domain
    return float(lambda1 * np.sum((image[inside] - c_in) ** 2)
                 + lambda2 * np.sum((image[outside] - c_out) ** 2))


def _boundary(u):
    """Voxels where the discrete gradient of the level set is nonzero."""
    level = u.astype(np.float64)
    axes = [axis for axis in range(level.ndim) if level.shape[axis] > 1]
    if not axes:
        return np.zeros(u.shape, dtype=bool)
    grads = np.gradient(level, axis=axes)
    if len(axes) == 1:
        grads = [grads]
    return np.any([g != 0 for g in grads], axis=0)


def run_active_contour(intensity, init, cfg=ContourConfig(), domain=None, label=LABEL_TUMOR):
    """
    Morphological Chan-Vese evolution with a full trace.

    Args:
        intensity (Volume): normalized image.
        init (Mask): initial contour; any non-background label is inside.
        cfg (ContourConfig): iterations, region weights, smoothing passes.
        domain (np.ndarray or Mask): optional region restricting the means
            and the updates; voxels outside keep their initial state.
        label (int): label written on the refined foreground.

    Returns:
        ContourTrace.

    Raises:
        EmptyMask: init has no inside or no outside voxel in the domain.
    """
    check_aligned(intensity, init)
    image = intensity.data.astype(np.float64)
    u0 = init.foreground()
    if isinstance(domain, Mask):
        check_aligned(intensity, domain)
        domain = domain.foreground()
    region = np.ones(u0.shape, dtype=bool) if domain is None else np.asarray(domain, dtype=bool)

    trace = ContourTrace(Mask.from_bool(u0, init, label))
    if cfg.iterations == 0:
        trace.mask = init
        return trace
    if not (u0 & region).any() or not (~u0 & region).any():
        raise EmptyMask("active contour needs both an inside and an outside region")

    u = u0.copy()
    valid = u0
    for iteration in range(cfg.iterations):
        inside = u & region
        outside = ~u & region
        if not inside.any() or not outside.any():
            message = f"contour region emptied at iteration {iteration}; keeping last valid mask"
            logger.warning(message)
            warnings.warn(message, DegenerateRegionsWarning, stacklevel=2)
            trace.degenerate = True
            break
        valid = u
        c_in = float(image[inside].mean())
        c_out = float(image[outside].mean())
        trace.means.append((c_in, c_out))

        before = region_energy(image, u, c_in, c_out, cfg.lambda1, cfg.lambda2, region)
        attach = cfg.lambda1 * (image - c_in) ** 2 - cfg.lambda2 * (image - c_out) ** 2
        active = _boundary(u) & region
        candidate = u.copy()
        candidate[active & (attach < 0)] = True
        candidate[active & (attach > 0)] = False
        after = region_energy(image, candidate, c_in, c_out, cfg.lambda1, cfg.lambda2, region)
        trace.energies.append((before, after))

        candidate = curvature_smooth(candidate, cfg.smoothing_passes, iteration * cfg.smoothing_passes)
        candidate = np.where(region, candidate, u0)
        logger.debug("contour iteration %d: c_in %.4f c_out %.4f energy %.4f -> %.4f",
                     iteration, c_in, c_out, before, after)
        u = candidate
    else:
        if (u & region).any() and (~u & region).any():
            valid = u
        else:
            message = "contour region emptied by the last iteration; keeping last valid mask"
            logger.warning(message)
            warnings.warn(message, DegenerateRegionsWarning, stacklevel=2)
            trace.degenerate = True

    trace.mask = Mask.from_bool(valid, init, label)
    return trace


def active_contour_refine(intensity, init, cfg=ContourConfig(), domain=None, label=LABEL_TUMOR):
    """Refined Mask of run_active_contour (see there)."""
    return run_active_contour(intensity, init, cfg, domain, label).mask
