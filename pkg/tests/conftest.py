import io
import json
import struct

import numpy as np
import pytest
from PIL import Image

from classify import ROI_SIZE
from fuse import ForestParams, fit_forest, save_model
from segment import BoneMaskPair

EXPLICIT_VR_LE = "1.2.840.10008.1.2.1"
IMPLICIT_VR_LE = "1.2.840.10008.1.2"
JPEG_BASELINE = "1.2.840.10008.1.2.4.50"
JPEG_2000 = "1.2.840.10008.1.2.4.90"
CR_IMAGE_STORAGE = "1.2.840.10008.5.1.4.1.1.1"

_LONG_VRS = ("OB", "OW", "OF", "SQ", "UT", "UN")


def _pad(value, vr):
    if len(value) % 2:
        value += b"\x00" if vr in ("UI", "OB") else b" "
    return value


def _element(tag, vr, value, explicit):
    group, elem = tag
    value = _pad(value, vr)
    if not explicit:
        return struct.pack("<HHI", group, elem, len(value)) + value
    if vr in _LONG_VRS:
        return struct.pack("<HH2sHI", group, elem, vr.encode(), 0, len(value)) + value
    return struct.pack("<HH2sH", group, elem, vr.encode(), len(value)) + value


def _us(value):
    return struct.pack("<H", value)


def _encapsulated_pixel_data():
    fragment = b"\xff\xd8\xff\xe0" + b"\x00" * 12 + b"\xff\xd9"
    return (struct.pack("<HH2sHI", 0x7FE0, 0x0010, b"OB", 0, 0xFFFFFFFF)
            + struct.pack("<HHI", 0xFFFE, 0xE000, 0)
            + struct.pack("<HHI", 0xFFFE, 0xE000, len(fragment)) + fragment
            + struct.pack("<HHI", 0xFFFE, 0xE0DD, 0))


def build_dicom(pixels, spacing="0.2\\0.2", bits=16, syntax=EXPLICIT_VR_LE, meta=True, laterality=None,
                image_laterality=None, omit=(), pixel_representation=0, rows=None):
    """ Hand-assembles a little-endian DICOM byte stream.

    `omit` names attributes to leave out (PixelSpacing, Rows, Columns,
    BitsAllocated, PixelData); `rows` overrides the Rows value so the pixel
    data can be made too short for the declared size.
    """

    pixels = np.asarray(pixels)
    explicit = syntax != IMPLICIT_VR_LE
    n_rows = pixels.shape[0] if rows is None else rows
    elements = [
        ((0x0008, 0x0016), "UI", CR_IMAGE_STORAGE.encode()),
        ((0x0008, 0x0018), "UI", b"1.2.3.4.5"),
    ]
    if laterality is not None:
        elements.append(((0x0020, 0x0060), "CS", laterality.encode()))
    if image_laterality is not None:
        elements.append(((0x0020, 0x0062), "CS", image_laterality.encode()))
    elements += [
        ((0x0028, 0x0002), "US", _us(1)),
        ((0x0028, 0x0004), "CS", b"MONOCHROME2"),
        ((0x0028, 0x0010), "US", _us(n_rows), "Rows"),
        ((0x0028, 0x0011), "US", _us(pixels.shape[1]), "Columns"),
        ((0x0028, 0x0030), "DS", spacing.encode(), "PixelSpacing"),
        ((0x0028, 0x0100), "US", _us(bits), "BitsAllocated"),
        ((0x0028, 0x0101), "US", _us(bits)),
        ((0x0028, 0x0102), "US", _us(bits - 1)),
        ((0x0028, 0x0103), "US", _us(pixel_representation)),
    ]
    body = b""
    for entry in elements:
        if len(entry) == 4 and entry[3] in omit:
            continue
        body += _element(entry[0], entry[1], entry[2], explicit)

    if syntax in (JPEG_BASELINE, JPEG_2000):
        body += _encapsulated_pixel_data()
    elif "PixelData" not in omit:
        if bits == 8:
            data = pixels.astype(np.uint8).tobytes()
        else:
            data = pixels.astype("<i2" if pixel_representation else "<u2").tobytes()
        body += _element((0x7FE0, 0x0010), "OB" if bits == 8 else "OW", data, explicit)

    if not meta:
        return body
    meta_elements = (
        _element((0x0002, 0x0001), "OB", b"\x00\x01", True)
        + _element((0x0002, 0x0002), "UI", CR_IMAGE_STORAGE.encode(), True)
        + _element((0x0002, 0x0003), "UI", b"1.2.3.4.5", True)
        + _element((0x0002, 0x0010), "UI", syntax.encode(), True)
    )
    group_length = _element((0x0002, 0x0000), "UL", struct.pack("<I", len(meta_elements)), True)
    return b"\x00" * 128 + b"DICM" + group_length + meta_elements + body


def graymap_bytes(pixels, mode="L"):
    """ Encodes an 8-bit (mode L, PGM) or 16-bit (mode I;16, PNG) grayscale image. """

    buffer = io.BytesIO()
    if mode == "L":
        Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="L").save(buffer, format="PPM")
    else:
        Image.fromarray(np.asarray(pixels, dtype=np.uint16), mode="I;16").save(buffer, format="PNG")
    return buffer.getvalue()


def write_portable_study(directory, name, pixels, sidecar, mode="L"):
    suffix = ".pgm" if mode == "L" else ".png"
    path = directory / f"{name}{suffix}"
    path.write_bytes(graymap_bytes(pixels, mode))
    (directory / f"{name}.json").write_text(json.dumps(sidecar))
    return path


def block_masks(femur_bottom=300, gap=20, left=186, right=487, top=76, bottom=596):
    """ Rectangular femur over tibia masks in ROI coordinates with a uniform gap. """

    upper = np.zeros((ROI_SIZE, ROI_SIZE), dtype=bool)
    lower = np.zeros((ROI_SIZE, ROI_SIZE), dtype=bool)
    upper[top:femur_bottom + 1, left:right] = True
    lower[femur_bottom + 1 + gap:bottom + 1, left:right] = True
    return BoneMaskPair(upper, lower)


def constant_forest(grade, n_trees=5, seed=0):
    X = np.random.default_rng(seed).dirichlet(np.ones(5), size=20)
    X = np.column_stack([X, np.full(20, 20.0), np.full(20, 20.0)])
    return fit_forest(X, np.full(20, grade), ForestParams(n_trees=n_trees, master_seed=seed))


@pytest.fixture
def constant_model_path(tmp_path):
    path = tmp_path / "constant-model.json"
    path.write_bytes(save_model(constant_forest(2)))
    return path
