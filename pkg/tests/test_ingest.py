import numpy as np
import pytest

from conftest import (EXPLICIT_VR_LE, IMPLICIT_VR_LE, JPEG_2000, JPEG_BASELINE, build_dicom, graymap_bytes,
                      write_portable_study)
from exceptions import IngestError, MalformedElement, MissingRequiredTag, UnsupportedTransferSyntax
from ingest import (NormalizedImage, RawRadiograph, cubic_kernel, normalize, parse_dicom, parse_portable,
                    preprocess, read_study, resample_to_standard)

GRID16 = (np.arange(96 * 80).reshape(96, 80) * 7 % 4096).astype(np.uint16)
GRID8 = (np.arange(96 * 80).reshape(96, 80) % 256).astype(np.uint8)

# name -> (bytes, expected exception or None, expected bit depth)
DICOM_MANIFEST = {
    "explicit_16bit": (lambda: build_dicom(GRID16), None, 16),
    "implicit_16bit": (lambda: build_dicom(GRID16, syntax=IMPLICIT_VR_LE), None, 16),
    "explicit_8bit": (lambda: build_dicom(GRID8, bits=8), None, 8),
    "implicit_8bit_no_meta": (lambda: build_dicom(GRID8, bits=8, syntax=IMPLICIT_VR_LE, meta=False), None, 8),
    "single_spacing_value": (lambda: build_dicom(GRID16, spacing="0.2"), None, 16),
    "missing_pixel_spacing": (lambda: build_dicom(GRID16, omit=("PixelSpacing",)), MissingRequiredTag, None),
    "missing_rows": (lambda: build_dicom(GRID16, omit=("Rows",)), MissingRequiredTag, None),
    "jpeg_baseline": (lambda: build_dicom(GRID8, bits=8, syntax=JPEG_BASELINE), UnsupportedTransferSyntax, None),
    "jpeg_2000": (lambda: build_dicom(GRID16, syntax=JPEG_2000), UnsupportedTransferSyntax, None),
    "short_pixel_data": (lambda: build_dicom(GRID16, rows=200), MalformedElement, None),
}


@pytest.mark.parametrize("name", sorted(DICOM_MANIFEST))
def test_dicom_fixture_manifest(name):
    builder, error, bits = DICOM_MANIFEST[name]
    data = builder()
    if error is not None:
        with pytest.raises(error):
            parse_dicom(data, source_id=name)
        return
    raw = parse_dicom(data, source_id=name)
    expected = GRID16 if bits == 16 else GRID8
    assert raw.bit_depth == bits
    assert raw.spacing_mm == (0.2, 0.2)
    assert np.array_equal(raw.pixels, expected)


def test_dicom_spacing_order_and_laterality():
    raw = parse_dicom(build_dicom(GRID16, spacing="0.15\\0.143", laterality="R"), source_id="x")
    assert raw.spacing_mm == (0.15, 0.143)
    assert raw.laterality == "right"


def test_series_laterality_checked_before_image_laterality():
    raw = parse_dicom(build_dicom(GRID16, laterality="L", image_laterality="R"))
    assert raw.laterality == "left"
    raw = parse_dicom(build_dicom(GRID16, image_laterality="B"))
    assert raw.laterality == "bilateral"
    assert parse_dicom(build_dicom(GRID16)).laterality == "unknown"


def test_source_id_defaults_to_instance_uid():
    assert parse_dicom(build_dicom(GRID16)).source_id == "1.2.3.4.5"


def test_signed_negative_pixels_are_clipped():
    pixels = GRID16.astype(np.int16) - 100
    raw = parse_dicom(build_dicom(pixels, pixel_representation=1))
    assert raw.pixels.min() == 0
    assert np.array_equal(raw.pixels, np.clip(pixels, 0, None))


def test_garbage_stream_is_malformed():
    with pytest.raises(IngestError):
        parse_dicom(b"\x00" * 10)


def test_portable_8_and_16_bit():
    sidecar = {"spacing_mm": 0.2, "laterality": "bilateral", "source_id": "p8"}
    raw = parse_portable(graymap_bytes(GRID8), sidecar)
    assert raw.bit_depth == 8 and np.array_equal(raw.pixels, GRID8)
    raw = parse_portable(graymap_bytes(GRID16, mode="I;16"), {**sidecar, "spacing_mm": [0.1, 0.2]})
    assert raw.bit_depth == 16 and np.array_equal(raw.pixels, GRID16)
    assert raw.spacing_mm == (0.1, 0.2)


@pytest.mark.parametrize("field", ["spacing_mm", "laterality", "source_id"])
def test_portable_missing_sidecar_field(field):
    sidecar = {"spacing_mm": 0.2, "laterality": "left", "source_id": "p"}
    del sidecar[field]
    with pytest.raises(IngestError):
        parse_portable(graymap_bytes(GRID8), sidecar)


def test_read_study_dispatches_on_content(tmp_path):
    path = write_portable_study(tmp_path, "knee", GRID8, {"spacing_mm": 0.2, "laterality": "left",
                                                          "source_id": "knee"})
    assert read_study(path).source_id == "knee"
    dcm = tmp_path / "scan.bin"
    dcm.write_bytes(build_dicom(GRID16))
    assert read_study(dcm).bit_depth == 16
    lonely = tmp_path / "lonely.pgm"
    lonely.write_bytes(graymap_bytes(GRID8))
    with pytest.raises(IngestError):
        read_study(lonely)


def test_raw_radiograph_invariants():
    with pytest.raises(IngestError):
        RawRadiograph(np.zeros((10, 10)), 0.2, 8)
    with pytest.raises(IngestError):
        RawRadiograph(np.full((64, 64), 300), 0.2, 8)
    with pytest.raises(IngestError):
        RawRadiograph(np.zeros((64, 64)), 0.0, 8)
    with pytest.raises(IngestError):
        RawRadiograph(np.zeros((64, 64)), 0.2, 12)


def test_cubic_kernel_interpolates():
    assert cubic_kernel(0.0) == 1.0
    assert np.allclose(cubic_kernel(np.array([1.0, 2.0, 2.5])), 0.0)
    offsets = np.array([-1.3, -0.3, 0.7, 1.7])
    assert np.isclose(cubic_kernel(offsets).sum(), 1.0)


def test_resample_identity_at_standard_spacing():
    raw = RawRadiograph(GRID8, 0.2, 8)
    assert resample_to_standard(raw) is raw


def test_resample_output_size_and_constant_field():
    raw = RawRadiograph(np.full((140, 80), 77), (0.1, 0.3), 8)
    out = resample_to_standard(raw)
    assert (out.height, out.width) == (70, 120)
    assert np.all(out.pixels == 77)
    assert out.spacing_mm == (0.2, 0.2)


def test_resample_below_minimum_size_is_rejected():
    with pytest.raises(IngestError):
        resample_to_standard(RawRadiograph(np.full((100, 80), 77), (0.1, 0.3), 8))


@pytest.mark.parametrize("spacing", [(0.15, 0.143), (0.1, 0.1), (0.25, 0.3), (0.17, 0.21)])
def test_resample_is_idempotent_and_keeps_physical_extent(spacing):
    pixels = (np.arange(300 * 250).reshape(300, 250) * 13 % 4096).astype(np.uint16)
    raw = RawRadiograph(pixels, spacing, 16)
    once = resample_to_standard(raw)
    assert resample_to_standard(once) == once
    assert abs(once.height * 0.2 - raw.height * spacing[0]) <= 0.2
    assert abs(once.width * 0.2 - raw.width * spacing[1]) <= 0.2


@pytest.mark.parametrize("pixels, bits, mode", [(GRID8, 8, "L"), (GRID16, 16, "I;16")])
def test_dicom_and_portable_paths_agree(pixels, bits, mode):
    from_dicom = parse_dicom(build_dicom(pixels, spacing="0.15\\0.15", bits=bits, laterality="L"),
                             source_id="same-knee")
    sidecar = {"spacing_mm": 0.15, "laterality": "left", "source_id": "same-knee"}
    from_portable = parse_portable(graymap_bytes(pixels, mode=mode), sidecar)
    assert from_dicom == from_portable


@pytest.mark.parametrize("pixels, bits", [(GRID8, 8), (GRID16, 16)])
def test_normalize_preserves_intensity_order(pixels, bits):
    img = normalize(RawRadiograph(pixels, 0.2, bits))
    order = np.argsort(pixels.ravel(), kind="stable")
    assert np.all(np.diff(img.pixels.ravel()[order]) >= 0)


def test_resample_smooth_ramp_stays_close():
    ramp = np.tile(np.arange(0, 256, 2), (128, 1))
    out = resample_to_standard(RawRadiograph(ramp, 0.1, 8))
    assert (out.height, out.width) == (64, 64)
    inner = out.pixels[:, 2:-2].astype(float)
    expected = ramp[:64, ::2][:, 2:-2] + 1
    assert np.max(np.abs(inner - expected)) <= 1


def test_normalize_8_bit_is_division():
    img = normalize(RawRadiograph(GRID8, 0.2, 8, "left", "n"))
    assert np.array_equal(img.pixels, GRID8 / 255.0)
    assert not img.degenerate_window


def test_normalize_16_bit_percentile_window():
    pixels = np.tile(np.arange(1000, 1000 + 64 * 4, 4), (64, 1)).astype(np.uint16)
    img = normalize(RawRadiograph(pixels, 0.2, 16))
    assert img.pixels.min() == 0.0 and img.pixels.max() == 1.0
    assert np.allclose(img.pixels * 255, np.rint(img.pixels * 255))


def test_normalize_degenerate_window():
    img = normalize(RawRadiograph(np.full((64, 64), 1234), 0.2, 16))
    assert img.degenerate_window
    assert np.all(img.pixels == 0.5)


def test_normalized_image_rejects_off_level_pixels():
    with pytest.raises(IngestError):
        NormalizedImage(np.full((64, 64), 0.001))


def test_preprocess_composes_steps():
    raw = RawRadiograph(np.full((128, 128), 51), 0.1, 8, "right", "pp")
    img = preprocess(raw)
    assert img.pixels.shape == (64, 64)
    assert np.allclose(img.pixels, 0.2)
    assert img.laterality == "right" and img.source_id == "pp"
