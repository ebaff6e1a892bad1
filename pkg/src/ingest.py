""" Radiograph input parsing and preprocessing.

Reads a minimal uncompressed DICOM subset or a portable graymap with a JSON
sidecar, resamples to 0.2 mm/pixel with a Catmull-Rom bicubic kernel, reduces
16-bit data to 8 bits with a [p1, p99] percentile window and scales to [0, 1].
"""
from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pydicom
from pydicom.multival import MultiValue
from PIL import Image, UnidentifiedImageError
from scipy import sparse

from exceptions import (IngestError, MalformedElement, MissingRequiredTag,
                        UnsupportedTransferSyntax)
from utilities import read_json

logger = logging.getLogger(__name__)

STANDARD_SPACING_MM = 0.2
MIN_DIM = 64
CUBIC_A = -0.5
LATERALITIES = ("bilateral", "left", "right", "unknown")

IMPLICIT_VR_LE = "1.2.840.10008.1.2"
EXPLICIT_VR_LE = "1.2.840.10008.1.2.1"
SUPPORTED_SYNTAXES = (IMPLICIT_VR_LE, EXPLICIT_VR_LE)

_DICOM_LATERALITY = {"L": "left", "R": "right", "B": "bilateral", "U": "unknown"}
_GRAY_MODES = {"L": 8, "I": 16, "I;16": 16, "I;16B": 16, "I;16L": 16}


def _readonly(array):
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class RawRadiograph:
    """ Integer pixel grid with its physical spacing.

    Attributes
    ----------
    pixels : <class 'numpy.ndarray'>
        2-D grid of non-negative integer intensities (stored as uint16)
    spacing_mm : <class 'tuple'>
        (row, column) millimetres per pixel
    bit_depth : <class 'int'>
        8 or 16
    laterality : <class 'str'>
        one of bilateral, left, right, unknown
    source_id : <class 'str'>
        opaque identifier of the study
    """

    pixels: np.ndarray
    spacing_mm: tuple
    bit_depth: int
    laterality: str = "unknown"
    source_id: str = ""

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if pixels.ndim != 2:
            raise IngestError(f"expected a 2-D pixel grid, got shape {pixels.shape}")
        if pixels.shape[0] < MIN_DIM or pixels.shape[1] < MIN_DIM:
            raise IngestError(f"image {pixels.shape[1]}x{pixels.shape[0]} is smaller than {MIN_DIM}x{MIN_DIM}")
        if self.bit_depth not in (8, 16):
            raise IngestError(f"unsupported bit depth {self.bit_depth}")
        if pixels.size and (pixels.min() < 0 or pixels.max() >= 2 ** self.bit_depth):
            raise IngestError(f"intensities outside the {self.bit_depth}-bit range")
        spacing = self.spacing_mm
        if np.isscalar(spacing):
            spacing = (spacing, spacing)
        spacing = (float(spacing[0]), float(spacing[1]))
        if not all(math.isfinite(s) and s > 0 for s in spacing):
            raise IngestError(f"pixel spacing must be positive, got {spacing}")
        if self.laterality not in LATERALITIES:
            raise IngestError(f"unknown laterality {self.laterality!r}")
        object.__setattr__(self, "pixels", _readonly(pixels.astype(np.uint16)))
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "source_id", str(self.source_id))

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    def __eq__(self, other):
        if not isinstance(other, RawRadiograph):
            return NotImplemented
        return (self.spacing_mm == other.spacing_mm and self.bit_depth == other.bit_depth
                and self.laterality == other.laterality and self.source_id == other.source_id
                and np.array_equal(self.pixels, other.pixels))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class NormalizedImage:
    """ Unit-interval image at 0.2 mm/pixel built from 256 quantization levels. """

    pixels: np.ndarray
    laterality: str = "unknown"
    source_id: str = ""
    spacing_mm: float = STANDARD_SPACING_MM
    degenerate_window: bool = False

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float64)
        if pixels.ndim != 2:
            raise IngestError(f"expected a 2-D pixel grid, got shape {pixels.shape}")
        if pixels.size and (pixels.min() < 0.0 or pixels.max() > 1.0):
            raise IngestError("normalized pixels must lie in [0, 1]")
        if self.spacing_mm != STANDARD_SPACING_MM:
            raise IngestError(f"normalized images are {STANDARD_SPACING_MM} mm/pixel, got {self.spacing_mm}")
        levels = pixels * 255.0
        # a degenerate window is flagged and filled with 0.5, which is not an 8-bit level
        if not self.degenerate_window and not np.allclose(levels, np.rint(levels), atol=1e-6):
            raise IngestError("normalized pixels must come from 8-bit levels")
        if self.laterality not in LATERALITIES:
            raise IngestError(f"unknown laterality {self.laterality!r}")
        object.__setattr__(self, "pixels", _readonly(pixels))

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


def parse_dicom(data, source_id=None):
    """ Parses a single-frame grayscale DICOM stream in an uncompressed little-endian syntax.

    Parameters
    ----------
    data : <class 'bytes'>
        the DICOM stream (with or without preamble and file meta)
    source_id : <class 'str'>
        identifier to attach; defaults to the SOP Instance UID

    Returns
    -------
    RawRadiograph
    """

    try:
        ds = pydicom.dcmread(io.BytesIO(data), force=True)
    except Exception as err:
        raise MalformedElement(f"unreadable DICOM stream: {err}") from err

    file_meta = getattr(ds, "file_meta", None)
    syntax = file_meta.get("TransferSyntaxUID") if file_meta is not None else None
    syntax = str(syntax) if syntax else IMPLICIT_VR_LE
    if syntax not in SUPPORTED_SYNTAXES:
        raise UnsupportedTransferSyntax(f"transfer syntax {syntax} is not an uncompressed little-endian syntax")

    try:
        for keyword in ("PixelSpacing", "Rows", "Columns", "BitsAllocated", "PixelData"):
            if keyword not in ds or ds[keyword].value in (None, b"", ""):
                raise MissingRequiredTag(f"required DICOM attribute {keyword} is missing")
        rows, cols = int(ds.Rows), int(ds.Columns)
        bits = int(ds.BitsAllocated)
        signed = int(ds.get("PixelRepresentation", 0) or 0) == 1
        spacing = ds.PixelSpacing
        values = [float(v) for v in spacing] if isinstance(spacing, MultiValue) else [float(spacing)]
        if len(values) == 1:
            values = values * 2
        raw = bytes(ds.PixelData)
        laterality = "unknown"
        for keyword in ("Laterality", "ImageLaterality"):
            tag_value = str(ds.get(keyword, "") or "").strip().upper()
            if tag_value in _DICOM_LATERALITY:
                laterality = _DICOM_LATERALITY[tag_value]
                break
        if source_id is None:
            source_id = str(ds.get("SOPInstanceUID", "") or "")
    except IngestError:
        raise
    except Exception as err:
        raise MalformedElement(f"cannot decode DICOM element: {err}") from err

    if bits == 8:
        dtype = np.dtype(np.uint8)
    elif bits == 16:
        dtype = np.dtype("<i2") if signed else np.dtype("<u2")
    else:
        raise IngestError(f"BitsAllocated {bits} is not supported")
    expected = rows * cols * dtype.itemsize
    if len(raw) < expected:
        raise MalformedElement(f"PixelData holds {len(raw)} bytes, {expected} required for {rows}x{cols}")
    pixels = np.frombuffer(raw[:expected], dtype=dtype).reshape(rows, cols).astype(np.int32)
    if signed and pixels.min() < 0:
        logger.warning("Signed pixel data with negative values clipped to 0 (%s)", source_id)
        pixels = np.clip(pixels, 0, None)

    image = RawRadiograph(pixels, (values[0], values[1]), bits, laterality, source_id)
    logger.info("Parsed DICOM %s: %dx%d, %d-bit, spacing %s", source_id, cols, rows, bits, image.spacing_mm)
    return image


def parse_portable(image_bytes, sidecar):
    """ Parses an 8- or 16-bit grayscale image with its metadata sidecar.

    Parameters
    ----------
    image_bytes : <class 'bytes'>
        binary graymap (or any grayscale format Pillow decodes)
    sidecar : <class 'dict'>
        mapping with spacing_mm, laterality and source_id

    Returns
    -------
    RawRadiograph
    """

    for field in ("spacing_mm", "laterality", "source_id"):
        if field not in sidecar or sidecar[field] is None:
            raise IngestError(f"sidecar field {field!r} is missing")
    try:
        with Image.open(io.BytesIO(image_bytes)) as img:
            mode = img.mode
            if mode not in _GRAY_MODES:
                raise IngestError(f"image mode {mode} is not grayscale")
            pixels = np.asarray(img).astype(np.int64)
    except (UnidentifiedImageError, OSError) as err:
        raise IngestError(f"cannot decode portable image: {err}") from err

    bit_depth = _GRAY_MODES[mode]
    spacing = sidecar["spacing_mm"]
    if not np.isscalar(spacing):
        spacing = tuple(spacing)
    return RawRadiograph(pixels, spacing, bit_depth, sidecar["laterality"], sidecar["source_id"])


def read_study(path):
    """ Reads a study from disk: DICOM by content, otherwise an image plus `<stem>.json`. """

    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as err:
        raise IngestError(f"cannot read study {path}: {err}") from err
    if path.suffix.lower() in (".dcm", ".dicom") or data[128:132] == b"DICM":
        return parse_dicom(data, source_id=path.stem)
    sidecar_path = path.with_suffix(".json")
    if not sidecar_path.exists():
        raise IngestError(f"no sidecar {sidecar_path.name} next to {path.name}")
    sidecar = read_json(sidecar_path, IngestError)
    if not isinstance(sidecar, dict):
        raise IngestError(f"sidecar {sidecar_path.name} must be a JSON object")
    return parse_portable(data, sidecar)


def cubic_kernel(x, a=CUBIC_A):
    """ Keys cubic convolution kernel; a = -0.5 gives the Catmull-Rom spline. """

    x = np.abs(np.asarray(x, dtype=np.float64))
    near = (a + 2) * x ** 3 - (a + 3) * x ** 2 + 1
    far = a * x ** 3 - 5 * a * x ** 2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def _axis_weights(n_in, n_out, step):
    """ Sparse (n_out, n_in) bicubic interpolation matrix with clamped sample coordinates. """

    src = (np.arange(n_out) + 0.5) * step - 0.5
    base = np.floor(src).astype(np.int64)
    frac = src - base
    rows, cols, vals = [], [], []
    for offset in (-1, 0, 1, 2):
        rows.append(np.arange(n_out))
        cols.append(np.clip(base + offset, 0, n_in - 1))
        vals.append(cubic_kernel(frac - offset))
    matrix = sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                               shape=(n_out, n_in))
    return matrix.tocsr()


def resample_to_standard(img):
    """ Resamples a radiograph to 0.2 mm/pixel on both axes.

    Output dimensions are round(dim * spacing / 0.2); values are interpolated
    with the Catmull-Rom kernel, rounded and clamped to the integer range.
    An image already at 0.2 mm/pixel is returned unchanged.
    """

    row_mm, col_mm = img.spacing_mm
    if row_mm == STANDARD_SPACING_MM and col_mm == STANDARD_SPACING_MM:
        return img
    out_h = int(round(img.height * row_mm / STANDARD_SPACING_MM))
    out_w = int(round(img.width * col_mm / STANDARD_SPACING_MM))
    if out_h < MIN_DIM or out_w < MIN_DIM:
        raise IngestError(f"resampled size {out_w}x{out_h} is below {MIN_DIM} pixels")

    w_rows = _axis_weights(img.height, out_h, STANDARD_SPACING_MM / row_mm)
    w_cols = _axis_weights(img.width, out_w, STANDARD_SPACING_MM / col_mm)
    pixels = img.pixels.astype(np.float64)
    resampled = w_rows @ pixels
    resampled = (w_cols @ resampled.T).T
    resampled = np.clip(np.rint(resampled), 0, 2 ** img.bit_depth - 1)

    logger.info("Resampled %s from %dx%d to %dx%d", img.source_id, img.width, img.height, out_w, out_h)
    return RawRadiograph(resampled, (STANDARD_SPACING_MM, STANDARD_SPACING_MM), img.bit_depth,
                         img.laterality, img.source_id)


def normalize(img):
    """ Reduces to 8 bits (percentile window for 16-bit data) and divides by 255.

    A degenerate window (p1 == p99) maps every pixel to 0.5 and sets
    `degenerate_window` on the result.
    """

    pixels = img.pixels.astype(np.float64)
    degenerate = False
    if img.bit_depth <= 8:
        levels = pixels
    else:
        low, high = np.percentile(pixels, [1, 99])
        if high <= low:
            logger.warning("Degenerate intensity window for %s (p1 == p99 == %s)", img.source_id, low)
            degenerate = True
            levels = None
        else:
            levels = np.rint(np.clip((pixels - low) / (high - low), 0.0, 1.0) * 255.0)
    if degenerate:
        return NormalizedImage(np.full(pixels.shape, 0.5), img.laterality, img.source_id,
                               degenerate_window=True)
    return NormalizedImage(levels / 255.0, img.laterality, img.source_id)


def preprocess(raw):
    """ Resample then normalize: the complete first pipeline step. """

    return normalize(resample_to_standard(raw))
