import math

import numpy as np
import pytest

from backends.classifier import StubClassifier
from backends.detector import FileDetector
from backends.rle import decode_mask
from backends.segmenter import FileSegmenter, PhantomSegmenter
from classify import ROI_HALF
from conftest import constant_forest
from exceptions import PhantomError
from ingest import preprocess, read_study
from jsd import LINE_OFFSETS, find_lowest_points
from phantom import (APEX_OFFSET, KneeSpec, PhantomSpec, emit_backend_fixtures, generate, merge_fixtures,
                     random_specs, write_study)
from pipeline import KneeGradingPipeline


def fixture_pipeline(truths):
    mask_doc, detection_doc = merge_fixtures(truths)
    return KneeGradingPipeline(FileDetector(detection_doc), StubClassifier(), FileSegmenter(mask_doc),
                               constant_forest(1))


def run_phantoms(specs):
    rendered = [(spec, *generate(spec)) for spec in specs]
    pipeline = fixture_pipeline([truth for _, _, truth in rendered])
    for spec, image, truth in rendered:
        report = pipeline.grade(image)
        assert [k.knee_side for k in report.knees] == [k.knee_side for k in truth.knees]
        ordered = sorted(spec.knees, key=lambda k: k.center)
        for knee_spec, result, knee in zip(ordered, report.knees, truth.knees):
            assert result.graded, result.failure
            yield knee_spec, result, knee


def test_flat_phantoms_measure_exactly():
    specs = random_specs(seed=21, count=25, shapes=("flat",))
    checked = 0
    for spec_knee, result, knee in run_phantoms(specs):
        assert result.measurement.med_px == knee.d_avg["med"] == spec_knee.gap_med_px
        assert result.measurement.lat_px == knee.d_avg["lat"] == spec_knee.gap_lat_px
        assert result.assessment.kl_grade == 1
        checked += 1
    assert checked == 50


def test_sloped_phantoms_measure_within_tolerance():
    checked = 0
    for _, result, knee in run_phantoms(random_specs(seed=22, count=25, shapes=("vee", "wedge"))):
        assert abs(result.measurement.med_px - knee.d_avg["med"]) <= 1.5
        assert abs(result.measurement.lat_px - knee.d_avg["lat"]) <= 1.5
        checked += 1
    assert checked == 50


def single_knee(shape, gap=30, slope=0.0, laterality="left"):
    spec = PhantomSpec(seed=5, knees=(KneeSpec((512, 512), gap, gap + 4, shape, slope),),
                       noise_sd=0.0, laterality=laterality)
    return generate(spec)


def test_vee_lowest_point_is_the_apex():
    _, truth = single_knee("vee")
    knee = truth.knees[0]
    left, right = knee.lowest_points
    assert left[0] == ROI_HALF - APEX_OFFSET
    assert right[0] == ROI_HALF + APEX_OFFSET
    assert find_lowest_points(knee.masks, ROI_HALF) == knee.lowest_points


def test_wedge_truth_is_mean_of_sampled_column_gaps():
    _, truth = single_knee("wedge", gap=45, slope=0.5)
    knee = truth.knees[0]
    expected = np.mean([45 + math.floor(0.5 * d + 0.5) for d in LINE_OFFSETS])
    assert knee.d_avg["med"] == pytest.approx(expected)
    gaps = {col: gap for col, _, gap in knee.gap_table}
    apex = ROI_HALF - APEX_OFFSET
    assert gaps[apex - 14] == 45 - 7 and gaps[apex + 14] == 45 + 7


def test_wedge_spanning_ten_pixels_averages_to_its_middle():
    _, truth = single_knee("wedge", gap=35, slope=10 / 28)
    knee = truth.knees[0]
    gaps = {col: gap for col, _, gap in knee.gap_table}
    apex = ROI_HALF - APEX_OFFSET
    assert (gaps[apex - 14], gaps[apex + 14]) == (30, 40)
    assert knee.d_avg["med"] == pytest.approx(35.0, abs=0.5)


def test_single_knee_sides_follow_laterality():
    _, left = single_knee("flat", gap=20, laterality="left")
    _, right = single_knee("flat", gap=20, laterality="right")
    assert left.knees[0].knee_side == "single"
    assert left.knees[0].d_avg == {"med": 20.0, "lat": 24.0}
    assert right.knees[0].d_avg == {"med": 20.0, "lat": 24.0}
    gaps_left = {col: gap for col, _, gap in left.knees[0].gap_table}
    gaps_right = {col: gap for col, _, gap in right.knees[0].gap_table}
    assert gaps_left[ROI_HALF - 50] == 20 and gaps_right[ROI_HALF - 50] == 24


def test_generation_is_deterministic():
    spec = random_specs(seed=4, count=1)[0]
    image_a, truth_a = generate(spec)
    image_b, truth_b = generate(spec)
    assert np.array_equal(image_a.pixels, image_b.pixels)
    assert truth_a.to_document() == truth_b.to_document()
    assert [s.to_document() for s in random_specs(seed=4, count=3)] == \
        [s.to_document() for s in random_specs(seed=4, count=3)]


def test_noise_free_phantom_has_two_levels():
    image, _ = single_knee("flat")
    assert set(np.unique(image.pixels).round(6)) == {round(26 / 255, 6), round(204 / 255, 6)}


def test_backend_fixtures_reproduce_truth():
    _, truth = generate(random_specs(seed=6, count=1)[0])
    mask_doc, detection_doc = emit_backend_fixtures(truth)
    records = mask_doc["records"][truth.source_id]
    for knee in truth.knees:
        assert np.array_equal(decode_mask(records[knee.knee_side]["upper"]), knee.masks.upper)
        assert np.array_equal(decode_mask(records[knee.knee_side]["lower"]), knee.masks.lower)
    entries = detection_doc[truth.source_id]
    assert [(e["center_x"], e["center_y"]) for e in entries] == [tuple(map(float, k.center)) for k in truth.knees]
    assert all(e["confidence"] == 1.0 for e in entries)


def test_phantom_segmenter_matches_file_fixtures():
    image, truth = generate(random_specs(seed=8, count=1)[0])
    mask_doc, detection_doc = emit_backend_fixtures(truth)
    model = constant_forest(3)
    by_file = KneeGradingPipeline(FileDetector(detection_doc), StubClassifier(), FileSegmenter(mask_doc), model)
    by_truth = KneeGradingPipeline(FileDetector(detection_doc), StubClassifier(), PhantomSegmenter([truth]), model)
    for a, b in zip(by_file.grade(image).knees, by_truth.grade(image).knees):
        assert a.measurement == b.measurement
        assert a.assessment.kl_grade == b.assessment.kl_grade == 3


def test_written_study_reads_back(tmp_path):
    image, _ = generate(random_specs(seed=9, count=1)[0])
    path = write_study(image, tmp_path)
    loaded = preprocess(read_study(path))
    assert loaded.source_id == image.source_id
    assert loaded.laterality == "bilateral"
    assert np.array_equal(loaded.pixels, image.pixels)


def test_spec_document_round_trip():
    spec = random_specs(seed=10, count=1)[0]
    assert PhantomSpec.from_document(spec.to_document()) == spec
    with pytest.raises(PhantomError):
        PhantomSpec.from_document({"seed": 1, "knees": [], "colour": "red"})


@pytest.mark.parametrize("kwargs", [
    {"center": (512, 512), "gap_med_px": 1, "gap_lat_px": 10},
    {"center": (512, 512), "gap_med_px": 10.5, "gap_lat_px": 10},
    {"center": (512, 512), "gap_med_px": 10, "gap_lat_px": 10, "condyle_shape": "round"},
    {"center": (512,), "gap_med_px": 10, "gap_lat_px": 10},
])
def test_knee_spec_validation(kwargs):
    with pytest.raises(PhantomError):
        KneeSpec(**kwargs)


def test_phantom_spec_validation():
    knee = KneeSpec((256, 512), 10, 10)
    other = KneeSpec((768, 512), 10, 10)
    with pytest.raises(PhantomError):
        PhantomSpec(seed=0, knees=(knee, other), laterality="left")
    with pytest.raises(PhantomError):
        PhantomSpec(seed=0, knees=(knee,), laterality="bilateral")
    with pytest.raises(PhantomError):
        PhantomSpec(seed=0, knees=(knee, other), background=0.9, bone=0.5)
    with pytest.raises(PhantomError):
        PhantomSpec(seed=0, knees=(knee, other), noise_sd=-1.0)


def test_layout_and_profile_errors():
    with pytest.raises(PhantomError):
        generate(PhantomSpec(seed=0, knees=(KneeSpec((100, 512), 10, 10), KneeSpec((768, 512), 10, 10))))
    with pytest.raises(PhantomError):
        generate(PhantomSpec(seed=0, knees=(KneeSpec((400, 512), 10, 10), KneeSpec((600, 512), 10, 10))))
    with pytest.raises(PhantomError):
        single_knee("wedge", gap=10, slope=0.5)
    with pytest.raises(PhantomError):
        single_knee("flat", gap=560)
