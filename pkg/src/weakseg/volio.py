"""
volio.py

Core grid types and their file formats.

 - Orientation, Volume and Mask: immutable 3D grids indexed (x, y, z) with
   voxel spacing in mm and the storage-axis -> anatomical-axis mapping.
 - NIfTI-1 single-file reader/writer (".nii", uncompressed) on top of
   nibabel's Nifti1Header and Nifti1Image. The parser works on raw bytes so
   every input either yields a Volume or a NiftiError.
 - Clinical CSV reader/writer with the fixed feature schema and codebook.

Codebook (categorical clinical variables):
    binary variables      yes/no, y/n, true/false, 1/0  -> 1.0 / 0.0
    t_involvement         "<50%" -> 0.0, ">=50%" (or ">50%") -> 1.0
    clip_score            integer CLIP score 0..6, kept as is
    tnm                   I, II, IIIA, IIIB, IIIC, IVA, IVB -> 1..7
                          (plain integers 1..7 are accepted too)
    afp, age, ttp, interval_bl  real numbers
    empty cell or "NA"    missing (value NaN, missing-flag set)
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import nibabel as nib
import numpy as np
import pandas as pd
from nibabel.orientations import io_orientation
from nibabel.spatialimages import HeaderDataError

from .errors import (
    BadMagic,
    InvalidHeader,
    IoError,
    KindMismatch,
    MissingColumn,
    NonFinite,
    OutOfRange,
    ShapeMismatch,
    TruncatedFile,
    UnknownColumn,
    UnparsableCell,
    UnsupportedDatatype,
)

logger = logging.getLogger(__name__)

KINDS = ("HU", "normalized", "probability")

LABEL_BACKGROUND = 0
LABEL_LIVER = 1
LABEL_TUMOR = 2
DEFAULT_LABEL_MAP = {
    LABEL_BACKGROUND: "background",
    LABEL_LIVER: "liver",
    LABEL_TUMOR: "tumor",
}

# ______________________________________________________________________________
# Grid types


@dataclass(frozen=True)
class Orientation:
    """
    Maps storage axes to anatomical axes.

    Attributes:
        axes (tuple): axes[i] is the anatomical axis (0=R, 1=A, 2=S) that
            storage axis i runs along.
        flips (tuple): flips[i] is True when increasing storage index i runs
            towards L, P or I instead of R, A or S.
    """

    axes: tuple = (0, 1, 2)
    flips: tuple = (False, False, False)

    def __post_init__(self):
        object.__setattr__(self, "axes", tuple(int(a) for a in self.axes))
        object.__setattr__(self, "flips", tuple(bool(f) for f in self.flips))
        if sorted(self.axes) != [0, 1, 2] or len(self.flips) != 3:
            raise ValueError(f"not an axis permutation: {self.axes}, {self.flips}")

    @property
    def is_identity(self):
        return self.axes == (0, 1, 2) and not any(self.flips)

    def codes(self):
        """Axis codes of the storage axes, e.g. "RAS" or "LPS"."""
        letters = (("R", "L"), ("A", "P"), ("S", "I"))
        return "".join(letters[a][int(f)] for a, f in zip(self.axes, self.flips))


IDENTITY = Orientation()


def _as_spacing(spacing):
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(math.isfinite(s) and s > 0 for s in spacing):
        raise OutOfRange(f"spacing must be 3 positive reals, got {spacing}")
    return spacing


def _freeze(array):
    array = np.ascontiguousarray(array)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Volume:
    """
    A 3D scalar grid of 32-bit reals.

    Attributes:
        data (np.ndarray): array of shape dims, indexed (x, y, z).
        spacing (tuple): voxel size in mm per storage axis.
        orientation (Orientation): storage -> anatomical axis mapping.
        kind (str): "HU", "normalized" or "probability".
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    orientation: Orientation = IDENTITY
    kind: str = "HU"

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeMismatch(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        if self.kind not in KINDS:
            raise KindMismatch(f"unknown volume kind {self.kind!r}")
        if self.kind in ("normalized", "probability"):
            if not (np.all(data >= 0.0) and np.all(data <= 1.0)):
                raise OutOfRange(f"{self.kind} volume values must lie in [0, 1]")
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    @property
    def dims(self):
        return tuple(int(d) for d in self.data.shape)

    def with_data(self, data, kind=None):
        """Same geometry, new voxel values."""
        return Volume(data, self.spacing, self.orientation, kind or self.kind)


@dataclass(frozen=True, eq=False)
class Mask:
    """
    A 3D label grid aligned to a Volume.

    Attributes:
        labels (np.ndarray): uint8 array of shape dims, indexed (x, y, z).
        spacing (tuple): voxel size in mm.
        orientation (Orientation): storage -> anatomical axis mapping.
        label_map (dict): label value -> class name.
    """

    labels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    orientation: Orientation = IDENTITY
    label_map: Mapping = field(default_factory=lambda: dict(DEFAULT_LABEL_MAP))

    def __post_init__(self):
        raw = np.asarray(self.labels)
        if raw.ndim != 3 or min(raw.shape) < 1:
            raise ShapeMismatch(f"mask labels must be a non-empty 3D array, got shape {raw.shape}")
        if raw.dtype.kind == "b":
            raw = raw.astype(np.uint8)
        if raw.size and (raw.min() < 0 or raw.max() > 255 or np.any(raw != np.round(raw))):
            raise OutOfRange("mask labels must be small unsigned integers")
        labels = raw.astype(np.uint8)
        label_map = {int(k): str(v) for k, v in dict(self.label_map).items()}
        unknown = set(np.unique(labels).tolist()) - set(label_map)
        if unknown:
            raise OutOfRange(f"labels {sorted(unknown)} missing from label_map")
        object.__setattr__(self, "labels", _freeze(labels))
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))
        object.__setattr__(self, "label_map", label_map)

    @property
    def dims(self):
        return tuple(int(d) for d in self.labels.shape)

    def foreground(self, labels=None):
        """Boolean grid of voxels carrying any of `labels` (default: non-background)."""
        if labels is None:
            return self.labels != LABEL_BACKGROUND
        if isinstance(labels, (int, np.integer)):
            return self.labels == labels
        return np.isin(self.labels, list(labels))

    def count(self, labels=None):
        return int(np.count_nonzero(self.foreground(labels)))

    def with_labels(self, labels):
        """Same geometry and label map, new labels."""
        return Mask(labels, self.spacing, self.orientation, self.label_map)

    @classmethod
    def from_bool(cls, foreground, like, label=LABEL_TUMOR):
        """Binary grid -> Mask with `label` on foreground, geometry copied from `like`."""
        foreground = np.asarray(foreground, dtype=bool)
        labels = np.where(foreground, label, LABEL_BACKGROUND).astype(np.uint8)
        label_map = dict(getattr(like, "label_map", DEFAULT_LABEL_MAP))
        return cls(labels, like.spacing, like.orientation, label_map)


def same_grid(a, b):
    """True when two grids share dims, spacing (to 1e-6) and orientation."""
    return (
        a.dims == b.dims
        and np.allclose(a.spacing, b.spacing, rtol=0.0, atol=1e-6)
        and a.orientation == b.orientation
    )


def check_aligned(a, b):
    if not same_grid(a, b):
        raise ShapeMismatch(
            f"grids are not aligned: dims {a.dims} vs {b.dims}, "
            f"spacing {a.spacing} vs {b.spacing}"
        )


# ______________________________________________________________________________
# NIfTI-1

NIFTI_HEADER_SIZE = 348
NIFTI_VOX_OFFSET = 352
_MAGICS = (b"n+1\x00", b"ni1\x00")
_DESCRIP_PREFIX = b"weakseg kind="

# NIfTI datatype code -> numpy type code; nibabel supplies the byte order
NIFTI_DATATYPES = {2: "u1", 4: "i2", 8: "i4", 16: "f4", 64: "f8"}


def _orientation_from_affine(affine):
    """Nearest axis permutation of a 4x4 affine; None if degenerate."""
    if affine is None or not np.all(np.isfinite(affine)):
        return None
    try:
        with np.errstate(all="ignore"):
            ornt = io_orientation(affine)
    except (ValueError, np.linalg.LinAlgError):
        return None
    if np.any(np.isnan(ornt)):
        return None
    axes = tuple(int(a) for a in ornt[:, 0])
    if sorted(axes) != [0, 1, 2]:
        return None
    return Orientation(axes, tuple(bool(s < 0) for s in ornt[:, 1]))


def _coded_affine(getter):
    try:
        affine, code = getter(coded=True)
    except (HeaderDataError, ValueError, FloatingPointError):
        return None
    return affine if int(code) > 0 else None


def _decode_orientation(hdr):
    """sform if sform_code > 0, else qform if qform_code > 0, else identity."""
    for getter in (hdr.get_sform, hdr.get_qform):
        decoded = _orientation_from_affine(_coded_affine(getter))
        if decoded is not None:
            return decoded
    return IDENTITY


def _decode_kind(descrip):
    raw = bytes(descrip).split(b"\x00", 1)[0]
    if raw.startswith(_DESCRIP_PREFIX):
        kind = raw[len(_DESCRIP_PREFIX):].decode("ascii", errors="replace").strip()
        if kind in KINDS:
            return kind
    return "HU"


def _read_header(buffer):
    """Header of `buffer` with nibabel's byte-order detection; extensions are skipped."""
    try:
        return nib.Nifti1Header.from_fileobj(io.BytesIO(buffer[:NIFTI_HEADER_SIZE]), check=False)
    except Exception as exc:
        raise InvalidHeader(f"unreadable NIfTI-1 header: {exc}") from exc


def parse_nifti(buffer):
    """
    Parse an in-memory single-file NIfTI-1 image into a Volume.

    Both byte orders are accepted; nibabel detects the order from dim[0]
    and sizeof_hdr.

    Args:
        buffer (bytes): whole file contents.

    Returns:
        Volume: dims from dim[1..3], spacing from pixdim[1..3], data cast to
        float32 after scl_slope/scl_inter scaling when the slope is finite
        and non-zero.

    Raises:
        NiftiError: one of BadMagic, InvalidHeader, UnsupportedDatatype,
        TruncatedFile or NonFinite. No other exception escapes.
    """
    buffer = bytes(buffer)
    if len(buffer) < NIFTI_HEADER_SIZE:
        raise TruncatedFile(f"{len(buffer)} bytes is shorter than the {NIFTI_HEADER_SIZE}-byte header")

    hdr = _read_header(buffer)
    if int(hdr["sizeof_hdr"]) != NIFTI_HEADER_SIZE:
        raise InvalidHeader("sizeof_hdr is not 348 in either byte order")
    if buffer[344:348] not in _MAGICS:
        raise BadMagic(f"magic {buffer[344:348]!r} is not a NIfTI-1 magic")

    dim = [int(d) for d in hdr["dim"]]
    if not (dim[0] == 3 or (dim[0] == 4 and dim[4] == 1)):
        raise InvalidHeader(f"only 3D images are supported, dim = {dim}")
    dims = tuple(dim[1:4])
    if min(dims) < 1:
        raise InvalidHeader(f"non-positive dimension in {dims}")

    code = int(hdr["datatype"])
    if code not in NIFTI_DATATYPES:
        raise UnsupportedDatatype(f"datatype code {code} is not supported")
    dtype = hdr.get_data_dtype()

    pixdim = [float(p) for p in hdr["pixdim"][1:4]]
    if not all(math.isfinite(p) and p > 0 for p in pixdim):
        raise InvalidHeader(f"pixdim[1..3] must be positive, got {pixdim}")

    vox_offset = float(hdr["vox_offset"])
    if not math.isfinite(vox_offset) or vox_offset < NIFTI_HEADER_SIZE:
        raise InvalidHeader(f"vox_offset {vox_offset} points inside the header")
    offset = int(vox_offset)

    count = dims[0] * dims[1] * dims[2]
    if offset + count * dtype.itemsize > len(buffer):
        raise TruncatedFile(
            f"need {count * dtype.itemsize} data bytes at offset {offset}, "
            f"file has {len(buffer)} bytes"
        )
    raw = np.frombuffer(buffer, dtype=dtype, count=count, offset=offset)

    try:
        slope, inter = hdr.get_slope_inter()
    except HeaderDataError as exc:
        raise InvalidHeader(str(exc)) from exc
    with np.errstate(over="ignore", invalid="ignore"):
        if slope is not None and not (slope == 1.0 and inter == 0.0):
            values = raw.astype(np.float64) * float(slope) + float(inter)
        else:
            values = raw
        data = values.astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise NonFinite("NaN or Inf voxel in image data")
    data = data.reshape(dims, order="F")

    orientation = _decode_orientation(hdr)
    kind = _decode_kind(hdr["descrip"].item())
    try:
        return Volume(data, tuple(pixdim), orientation, kind)
    except OutOfRange:
        return Volume(data, tuple(pixdim), orientation, "HU")


def read_nifti(path):
    """Read a single-file NIfTI-1 image from `path`."""
    try:
        buffer = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    volume = parse_nifti(buffer)
    logger.debug("read %s: dims %s spacing %s", path, volume.dims, volume.spacing)
    return volume


def volume_affine(volume):
    """4x4 voxel -> RAS+ mm affine of a grid (no translation)."""
    affine = np.eye(4)
    affine[:3, :3] = 0.0
    orientation = volume.orientation
    for column, (axis, flip) in enumerate(zip(orientation.axes, orientation.flips)):
        affine[axis, column] = -volume.spacing[column] if flip else volume.spacing[column]
    return affine


def encode_nifti(volume):
    """Serialise a Volume as float32 NIfTI-1 bytes (little endian, sform set)."""
    affine = volume_affine(volume)
    data = np.asarray(volume.data, dtype="<f4")
    image = nib.Nifti1Image(data, affine)
    image.set_sform(affine, code="scanner")
    header = image.header
    header.set_data_dtype(np.float32)
    header.set_zooms(volume.spacing)
    header.set_xyzt_units("mm")
    header["vox_offset"] = NIFTI_VOX_OFFSET
    header["descrip"] = _DESCRIP_PREFIX + volume.kind.encode("ascii")
    return image.to_bytes()


def write_nifti(volume, path):
    """Write `volume` to `path` as a single-file float32 NIfTI-1 image."""
    try:
        Path(path).write_bytes(encode_nifti(volume))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    logger.debug("wrote %s", path)


def mask_to_volume(mask):
    return Volume(mask.labels.astype(np.float32), mask.spacing, mask.orientation, "HU")


def volume_to_mask(volume, label_map=None):
    """Round-trip helper: an integer-valued Volume -> Mask."""
    return Mask(volume.data, volume.spacing, volume.orientation,
                label_map or dict(DEFAULT_LABEL_MAP))


def write_mask(mask, path):
    write_nifti(mask_to_volume(mask), path)


def read_mask(path, label_map=None):
    return volume_to_mask(read_nifti(path), label_map)


# ______________________________________________________________________________
# Clinical records

FEATURE_SCHEMA = (
    "t_involvement",
    "personal_history_of_cancer",
    "lymphnodes",
    "clip_score",
    "tnm",
    "metastasis",
    "evidence_of_cirrhosis",
    "alcohol",
    "afp",
    "smoking",
    "diabetes",
    "family_history",
    "age",
    "ttp",
    "interval_bl",
)
BINARY_FEATURES = frozenset({
    "personal_history_of_cancer",
    "lymphnodes",
    "metastasis",
    "evidence_of_cirrhosis",
    "alcohol",
    "smoking",
    "diabetes",
    "family_history",
})
CONTINUOUS_FEATURES = frozenset({"afp", "age", "ttp", "interval_bl"})
TNM_STAGES = ("I", "II", "IIIA", "IIIB", "IIIC", "IVA", "IVB")
CLIP_RANGE = range(0, 7)

_BINARY_CODES = {"yes": 1.0, "y": 1.0, "true": 1.0, "1": 1.0,
                 "no": 0.0, "n": 0.0, "false": 0.0, "0": 0.0}
_INVOLVEMENT_CODES = {"<50%": 0.0, ">=50%": 1.0, ">50%": 1.0, "≥50%": 1.0}
_MISSING_CELLS = ("", "na", "n/a", "nan")


@dataclass(frozen=True)
class ClinicalRecord:
    """
    One patient's risk-factor vector.

    Attributes:
        patient_id (str): identifier.
        features (dict): feature name -> value (NaN when missing).
        missing (dict): feature name -> missing-flag.
    """

    patient_id: str
    features: Mapping
    missing: Mapping = None

    def __post_init__(self):
        features = {str(k): float(v) for k, v in dict(self.features).items()}
        missing = {k: bool(math.isnan(v)) for k, v in features.items()}
        if self.missing:
            missing.update({str(k): bool(v) for k, v in dict(self.missing).items()})
        for name, flag in missing.items():
            if flag:
                features[name] = float("nan")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "missing", missing)

    @property
    def feature_names(self):
        return tuple(self.features)

    def value(self, name):
        return self.features.get(name, float("nan"))

    def is_missing(self, name):
        return self.missing.get(name, True)

    def vector(self, names):
        """Values of `names` in order (NaN for missing)."""
        return np.array([self.value(n) for n in names], dtype=np.float64)

    def replace(self, **changes):
        """Copy with some feature values replaced."""
        features = dict(self.features)
        features.update(changes)
        missing = {k: math.isnan(float(v)) for k, v in features.items()}
        return ClinicalRecord(self.patient_id, features, missing)


def decode_cell(name, text):
    """Decode one cell under the codebook; returns NaN for missing. Raises ValueError."""
    cell = text.strip()
    lowered = cell.lower()
    if lowered in _MISSING_CELLS:
        return float("nan")
    if name in BINARY_FEATURES:
        return _BINARY_CODES[lowered]
    if name == "t_involvement":
        if cell in _INVOLVEMENT_CODES:
            return _INVOLVEMENT_CODES[cell]
        return _BINARY_CODES[lowered]
    if name == "clip_score":
        value = float(cell)
        if value != int(value) or int(value) not in CLIP_RANGE:
            raise ValueError(cell)
        return value
    if name == "tnm":
        upper = cell.upper()
        if upper in TNM_STAGES:
            return float(TNM_STAGES.index(upper) + 1)
        value = float(cell)
        if value != int(value) or not 1 <= value <= len(TNM_STAGES):
            raise ValueError(cell)
        return value
    value = float(cell)
    if not math.isfinite(value):
        raise ValueError(cell)
    return value


def encode_cell(name, value):
    """Inverse of decode_cell; missing -> empty string."""
    if math.isnan(value):
        return ""
    if name in BINARY_FEATURES or name == "t_involvement":
        if value not in (0.0, 1.0):
            raise OutOfRange(f"{name} must be 0 or 1, got {value}")
        if name == "t_involvement":
            return ">=50%" if value else "<50%"
        return "yes" if value else "no"
    if name == "clip_score":
        if value != int(value) or int(value) not in CLIP_RANGE:
            raise OutOfRange(f"clip_score must be an integer in 0..6, got {value}")
        return str(int(value))
    if name == "tnm":
        if value != int(value) or not 1 <= value <= len(TNM_STAGES):
            raise OutOfRange(f"tnm must be an integer stage in 1..7, got {value}")
        return TNM_STAGES[int(value) - 1]
    return repr(float(value))


_LONG_ROW = "\x00long row\x00"


def _mark_long_row(fields):
    """on_bad_lines hook: collapse a row with surplus fields into one marked cell."""
    return [_LONG_ROW + "\x1f".join(fields)]


def _check_row_width(row_number, row, columns):
    head = row[0]
    if isinstance(head, str) and head.startswith(_LONG_ROW):
        fields = head[len(_LONG_ROW):].split("\x1f")
        surplus = ",".join(fields[len(columns):])
        raise UnparsableCell(row_number, columns[-1], surplus,
                             f"{len(fields)} fields for {len(columns)} columns, surplus {surplus!r}")
    for position, (name, cell) in enumerate(zip(columns, row)):
        # pandas pads short rows with NaN; present cells stay str
        if not isinstance(cell, str):
            raise UnparsableCell(row_number, name, None,
                                 f"row has {position} fields for {len(columns)} columns")


def read_clinical_csv(path, allow_extra=False, schema=FEATURE_SCHEMA):
    """
    Read a clinical table into ClinicalRecords.

    Every data row must carry exactly as many fields as the header row.

    Args:
        path: UTF-8 CSV with a header row whose first column is patient_id.
        allow_extra (bool): ignore columns outside the schema instead of failing.
        schema (tuple): ordered feature names.

    Returns:
        list: one ClinicalRecord per data row, features in schema order.

    Raises:
        MissingColumn, UnknownColumn, UnparsableCell, IoError.
    """
    try:
        # header=None keeps pandas from promoting a long first row to an index
        table = pd.read_csv(path, header=None, dtype=str, keep_default_na=False, encoding="utf-8",
                            engine="python", on_bad_lines=_mark_long_row)
    except (OSError, UnicodeDecodeError) as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except pd.errors.EmptyDataError as exc:
        raise MissingColumn(f"{path} has no header row") from exc

    header, *rows = table.values.tolist()
    columns = [str(c).strip() for c in header]
    if not columns or columns[0] != "patient_id":
        raise MissingColumn("first column must be patient_id")
    absent = [name for name in schema if name not in columns]
    if absent:
        raise MissingColumn(f"schema columns absent: {', '.join(absent)}")
    extra = [c for c in columns[1:] if c not in schema]
    if extra and not allow_extra:
        raise UnknownColumn(f"columns outside the schema: {', '.join(extra)}")
    if extra:
        logger.info("ignoring extra clinical columns: %s", ", ".join(extra))

    records = []
    for row_number, row in enumerate(rows, start=1):
        _check_row_width(row_number, row, columns)
        cells = dict(zip(columns, row))
        features = {}
        for name in schema:
            try:
                features[name] = decode_cell(name, cells[name])
            except (KeyError, ValueError) as exc:
                raise UnparsableCell(row_number, name, cells[name]) from exc
        records.append(ClinicalRecord(cells["patient_id"].strip(), features))
    logger.debug("read %d clinical records from %s", len(records), path)
    return records


def write_clinical_csv(records, path, schema=FEATURE_SCHEMA):
    """Write records with the codebook encoding (inverse of read_clinical_csv)."""
    rows = []
    for record in records:
        row = {"patient_id": record.patient_id}
        for name in schema:
            row[name] = encode_cell(name, record.value(name))
        rows.append(row)
    table = pd.DataFrame(rows, columns=["patient_id", *schema])
    try:
        table.to_csv(path, index=False, encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
