"""
preprocess.py

Customized preprocessing chains for the global (liver) and local (tumor)
tasks:

    liver:  orientation -> HU window -> normalize -> crop/pad
    tumor:  orientation -> HU window -> normalize -> mask outside liver
            -> liver bounding box -> crop/pad

Every step is a pure function over Volume/Mask; the composite helpers only
chain them and return the crop placement so predictions can be pasted back
into whole-volume coordinates. tile_placements covers grids larger than
the crop target for inference.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np

from .errors import EmptyMask, KindMismatch, OutOfRange
from .volio import IDENTITY, LABEL_BACKGROUND, Mask, Volume, check_aligned

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class HuWindow:
    """Closed HU interval [lo, hi] used for clamping."""

    lo: float
    hi: float

    def __post_init__(self):
        if not float(self.lo) < float(self.hi):
            raise OutOfRange(f"HU window needs lo < hi, got ({self.lo}, {self.hi})")


LIVER_WINDOW = HuWindow(-150.0, 250.0)
TUMOR_WINDOW = HuWindow(-200.0, 250.0)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned voxel box; both corners inclusive."""

    min_corner: tuple
    max_corner: tuple

    def __post_init__(self):
        lo = tuple(int(v) for v in self.min_corner)
        hi = tuple(int(v) for v in self.max_corner)
        if len(lo) != 3 or len(hi) != 3 or any(a > b for a, b in zip(lo, hi)):
            raise OutOfRange(f"invalid bounding box {lo} -> {hi}")
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)

    @property
    def extent(self):
        return tuple(b - a + 1 for a, b in zip(self.min_corner, self.max_corner))

    @classmethod
    def full(cls, dims):
        return cls((0, 0, 0), tuple(d - 1 for d in dims))

    def fits(self, dims):
        return all(0 <= a and b < d for a, b, d in zip(self.min_corner, self.max_corner, dims))


@dataclass(frozen=True)
class Center:
    """Deterministic centred sub-window selection."""


@dataclass(frozen=True)
class Random:
    """Uniform sub-window offsets, reproducible from `seed`."""

    seed: int = 0


@dataclass(frozen=True)
class CropPlacement:
    """
    Where a crop came from and where it went.

    For each axis, source voxels [src_start, src_start + extent) of the full
    grid land at [dst_start, dst_start + extent) of the target grid.
    """

    src_start: tuple
    dst_start: tuple
    extent: tuple
    target: tuple
    source_dims: tuple


# ______________________________________________________________________________
# Single steps


def _grid_values(grid):
    return grid.labels if isinstance(grid, Mask) else grid.data


def _rebuild(grid, values, spacing=None, orientation=None):
    spacing = grid.spacing if spacing is None else spacing
    orientation = grid.orientation if orientation is None else orientation
    if isinstance(grid, Mask):
        return Mask(values, spacing, orientation, grid.label_map)
    return Volume(values, spacing, orientation, grid.kind)


def standardize_orientation(grid):
    """
    Reorder storage so axes run (R, A, S); orientation becomes identity.

    Works for Volume and Mask. Values are moved, never changed.
    """
    orientation = grid.orientation
    if orientation.is_identity:
        return grid
    perm = [orientation.axes.index(k) for k in range(3)]
    values = np.transpose(_grid_values(grid), perm)
    flip_axes = [k for k in range(3) if orientation.flips[perm[k]]]
    if flip_axes:
        values = np.flip(values, axis=flip_axes)
    spacing = tuple(grid.spacing[perm[k]] for k in range(3))
    return _rebuild(grid, np.ascontiguousarray(values), spacing, IDENTITY)


def window_and_normalize(volume, window):
    """Clamp HU to the window and rescale linearly to [0, 1]."""
    if volume.kind != "HU":
        raise KindMismatch(f"windowing needs an HU volume, got {volume.kind}")
    lo, hi = float(window.lo), float(window.hi)
    values = (np.clip(volume.data.astype(np.float64), lo, hi) - lo) / (hi - lo)
    return volume.with_data(values, kind="normalized")


def mask_outside_liver(volume, liver):
    """Zero every voxel outside the liver (liver or tumor labels count as inside)."""
    if volume.kind == "HU":
        raise KindMismatch("mask_outside_liver expects a normalized volume")
    check_aligned(volume, liver)
    inside = liver.foreground()
    return volume.with_data(np.where(inside, volume.data, 0.0))


def liver_bbox(liver, margin=2):
    """Tight box around the liver foreground, grown by `margin` and clipped to dims."""
    coords = np.argwhere(liver.foreground())
    if coords.size == 0:
        raise EmptyMask("liver mask has no foreground voxel")
    lo = np.maximum(coords.min(axis=0) - margin, 0)
    hi = np.minimum(coords.max(axis=0) + margin, np.array(liver.dims) - 1)
    return BoundingBox(tuple(lo), tuple(hi))


def plan_crop(box, target, mode=Center(), source_dims=None):
    """
    Decide the crop/pad placement of `box` into a grid of size `target`.

    Per axis: a box longer than the target gets a sub-window (random offset
    under Random, centred under Center); a shorter box is centred and padded.
    """
    target = tuple(int(t) for t in target)
    if len(target) != 3 or min(target) < 1:
        raise OutOfRange(f"crop target must be 3 positive integers, got {target}")
    rng = np.random.default_rng(mode.seed) if isinstance(mode, Random) else None
    src, dst, ext = [], [], []
    for lo, length, size in zip(box.min_corner, box.extent, target):
        if length > size:
            slack = length - size
            offset = int(rng.integers(0, slack + 1)) if rng is not None else slack // 2
            src.append(lo + offset)
            dst.append(0)
            ext.append(size)
        else:
            src.append(lo)
            dst.append((size - length) // 2)
            ext.append(length)
    dims = tuple(source_dims) if source_dims is not None else tuple(box.max_corner[i] + 1 for i in range(3))
    return CropPlacement(tuple(src), tuple(dst), tuple(ext), target, dims)


def tile_placements(dims, target):
    """
    Placements of `target`-sized tiles that together cover a `dims` grid.

    Per axis, an axis no longer than the tile is covered once and padded;
    a longer one gets tiles every `size` voxels plus a last tile flush with
    the far edge, so neighbouring tiles may overlap.

    Returns:
        list: CropPlacements in C order of their tile starts.
    """
    dims = tuple(int(d) for d in dims)
    target = tuple(int(t) for t in target)
    if len(target) != 3 or min(target) < 1:
        raise OutOfRange(f"crop target must be 3 positive integers, got {target}")
    axes = []
    for length, size in zip(dims, target):
        if length <= size:
            axes.append([(0, length)])
        else:
            starts = list(range(0, length - size, size)) + [length - size]
            axes.append([(s, size) for s in starts])
    placements = []
    for tile in itertools.product(*axes):
        lo = tuple(s for s, _ in tile)
        hi = tuple(s + e - 1 for s, e in tile)
        placements.append(plan_crop(BoundingBox(lo, hi), target, Center(), dims))
    return placements


def _window(starts, extents):
    return tuple(slice(s, s + e) for s, e in zip(starts, extents))


def apply_crop(grid, placement):
    """Cut and pad `grid` according to a placement; pad value 0 / background."""
    values = _grid_values(grid)
    out = np.zeros(placement.target, dtype=values.dtype)
    if isinstance(grid, Mask):
        out[...] = LABEL_BACKGROUND
    out[_window(placement.dst_start, placement.extent)] = \
        values[_window(placement.src_start, placement.extent)]
    return _rebuild(grid, out)


def crop_or_pad(grid, box, target, mode=Center()):
    """
    Restrict `grid` to `box` and bring it to size `target`.

    Args:
        grid: Volume or Mask.
        box (BoundingBox): region of interest inside grid.dims.
        target (tuple): output dims.
        mode: Center() or Random(seed).

    Returns:
        Same type as `grid`, dims == target.
    """
    if not box.fits(grid.dims):
        raise OutOfRange(f"box {box} does not fit dims {grid.dims}")
    return apply_crop(grid, plan_crop(box, target, mode, grid.dims))


def uncrop(grid, placement, like=None):
    """
    Paste a cropped grid (or array) back into the full source grid.

    Voxels outside the crop window become 0 / background.
    """
    values = _grid_values(grid) if isinstance(grid, (Mask, Volume)) else np.asarray(grid)
    full = np.zeros(placement.source_dims, dtype=values.dtype)
    full[_window(placement.src_start, placement.extent)] = \
        values[_window(placement.dst_start, placement.extent)]
    if isinstance(grid, (Mask, Volume)):
        template = like if like is not None else grid
        spacing, orientation = template.spacing, template.orientation
        return _rebuild(grid, full, spacing, orientation)
    return full


# ______________________________________________________________________________
# Composite chains


def preprocess_liver(volume, window=LIVER_WINDOW, target=None, mode=Center()):
    """
    Global-branch chain on a whole HU volume.

    Returns:
        tuple: (normalized crop Volume, CropPlacement, oriented normalized Volume)
    """
    oriented = standardize_orientation(volume)
    normalized = window_and_normalize(oriented, window)
    target = normalized.dims if target is None else target
    placement = plan_crop(BoundingBox.full(normalized.dims), target, mode, normalized.dims)
    return apply_crop(normalized, placement), placement, normalized


def preprocess_tumor(volume, liver, window=TUMOR_WINDOW, target=(256, 256, 32),
                     margin=2, mode=Center()):
    """
    Local-branch chain: window inside the liver, then crop the liver box.

    Args:
        volume (Volume): HU volume.
        liver (Mask): liver (or liver + tumor) mask on the same grid.

    Returns:
        tuple: (normalized masked crop Volume, CropPlacement)
    """
    oriented = standardize_orientation(volume)
    liver = standardize_orientation(liver)
    normalized = window_and_normalize(oriented, window)
    masked = mask_outside_liver(normalized, liver)
    box = liver_bbox(liver, margin)
    placement = plan_crop(box, target, mode, masked.dims)
    logger.debug("tumor crop: box %s -> target %s", box, placement.target)
    return apply_crop(masked, placement), placement
