import itertools

import numpy as np
import pytest

from classify import ROI_HALF
from conftest import block_masks
from exceptions import CalibrationError, MeasurementError
from jsd import (LINE_OFFSETS, JsdMeasurement, ThresholdSet, assign_sides, calibrate_thresholds, class_occupancy,
                 find_lowest_points, grade_jsn, grade_knee, load_thresholds, measure_jsd, optimal_partition,
                 save_thresholds)
from phantom import KneeSpec, PhantomSpec, generate
from segment import BoneMaskPair


def test_lowest_points_on_flat_femur_are_nearest_the_split():
    left, right = find_lowest_points(block_masks(), ROI_HALF)
    assert left == (ROI_HALF - 18, 300)
    assert right == (ROI_HALF + 18, 300)


def test_lowest_points_ignore_edges_and_split_band():
    masks = block_masks(left=10, right=662)
    upper = masks.upper.copy()
    upper[301:320, 20] = True
    upper[301:330, ROI_HALF + 5] = True
    upper[301:305, 250] = True
    upper[301:303, 420] = True
    left, right = find_lowest_points(BoneMaskPair(upper, masks.lower), ROI_HALF)
    assert left == (250, 304)
    assert right == (420, 302)


def test_lowest_points_need_both_halves():
    masks = block_masks(left=100, right=300)
    with pytest.raises(MeasurementError):
        find_lowest_points(masks, ROI_HALF)


@pytest.mark.parametrize("laterality,side,med", [
    ("bilateral", "left", "right"),
    ("bilateral", "right", "left"),
    ("left", "single", "left"),
    ("right", "single", "right"),
])
def test_assign_sides(laterality, side, med):
    sides = assign_sides(laterality, side)
    assert sides["med"] == med
    assert sides["lat"] != med


def test_assign_sides_unknown_single_knee():
    with pytest.raises(MeasurementError):
        assign_sides("unknown", "single")
    with pytest.raises(MeasurementError):
        assign_sides("bilateral", "middle")


def test_uniform_gap_measures_exactly():
    masks = block_masks(gap=20)
    points = find_lowest_points(masks, ROI_HALF)
    measurement = measure_jsd(masks, points, "bilateral", "left")
    assert measurement.med_px == 20.0 and measurement.lat_px == 20.0
    assert measurement.med_mm == pytest.approx(4.0)
    assert measurement.valid_line_count == {"med": len(LINE_OFFSETS), "lat": len(LINE_OFFSETS)}
    assert measurement.lowest_med == points[1]
    assert measurement.lowest_lat == points[0]


def test_different_gaps_per_compartment():
    masks = block_masks(gap=10)
    lower = masks.lower.copy()
    lower[311:321, ROI_HALF:] = False
    masks = BoneMaskPair(masks.upper, lower)
    points = find_lowest_points(masks, ROI_HALF)
    measurement = measure_jsd(masks, points, "right", "single")
    assert measurement.med_px == 20.0
    assert measurement.lat_px == 10.0


def wedge_knee_masks():
    knee = KneeSpec((512, 512), 30, 34, "wedge", 0.25)
    _, truth = generate(PhantomSpec(seed=1, knees=(knee,), noise_sd=0.0, laterality="left"))
    return truth.knees[0].masks


@pytest.mark.parametrize("dx, dy", [(0, 0), (7, -5), (-12, 20), (20, 3)])
def test_measurement_is_translation_invariant(dx, dy):
    masks = wedge_knee_masks()
    base = measure_jsd(masks, find_lowest_points(masks, ROI_HALF), "left", "single")
    moved = masks.shifted(dx, dy)
    result = measure_jsd(moved, find_lowest_points(moved, ROI_HALF + dx), "left", "single")
    assert (result.med_px, result.lat_px) == (base.med_px, base.lat_px)
    assert result.lowest_med == (base.lowest_med[0] + dx, base.lowest_med[1] + dy)


@pytest.mark.parametrize("d", [1, 4, 15])
def test_widening_the_gap_adds_to_both_distances(d):
    masks = wedge_knee_masks()
    base = measure_jsd(masks, find_lowest_points(masks, ROI_HALF), "left", "single")
    wider = BoneMaskPair(masks.upper, masks.shifted(0, d).lower)
    result = measure_jsd(wider, find_lowest_points(wider, ROI_HALF), "left", "single")
    assert result.med_px == pytest.approx(base.med_px + d)
    assert result.lat_px == pytest.approx(base.lat_px + d)
    assert result.med_px > base.med_px and result.lat_px > base.lat_px


def test_too_few_lines_is_an_error():
    masks = block_masks()
    lower = masks.lower.copy()
    lower[:, :ROI_HALF] = False
    lower[321:597, 310:316] = True
    with pytest.raises(MeasurementError):
        measure_jsd(BoneMaskPair(masks.upper, lower), find_lowest_points(masks, ROI_HALF), "bilateral", "left")


def test_measurement_rejects_negative_distances():
    with pytest.raises(MeasurementError):
        JsdMeasurement(-1.0, 2.0, (0, 0), (0, 0))


def brute_force_cost(values, k):
    x = np.sort(values)
    best = np.inf
    for cuts in itertools.combinations(range(1, x.size), k - 1):
        bounds = (0,) + cuts + (x.size,)
        cost = sum(((x[a:b] - x[a:b].mean()) ** 2).sum() for a, b in zip(bounds, bounds[1:]))
        best = min(best, cost)
    return best


def test_partition_matches_brute_force():
    rng = np.random.default_rng(7)
    for _ in range(200):
        n = int(rng.integers(4, 13))
        values = rng.uniform(0, 40, size=n).round(1)
        x, classes, cost = optimal_partition(values, 4)
        assert cost == pytest.approx(brute_force_cost(values, 4), abs=1e-9)
        assert classes[0][0] == 0 and classes[-1][1] == n
        assert all(a[1] == b[0] for a, b in zip(classes, classes[1:]))


def test_calibration_example():
    values = [1, 2, 10, 11, 20, 21, 30, 31]
    thresholds = calibrate_thresholds(np.column_stack([values, values[::-1]]))
    assert thresholds.med_boundaries == (6.0, 15.5, 25.5)
    assert thresholds.lat_boundaries == (6.0, 15.5, 25.5)
    assert class_occupancy(values, thresholds.med_boundaries) == [2, 2, 2, 2]


def test_calibration_needs_distinct_values():
    with pytest.raises(CalibrationError):
        calibrate_thresholds([[1, 1], [2, 2], [2, 3], [1, 4]])


def test_grade_jsn_default_boundaries():
    defaults = ThresholdSet.standard()
    assert grade_jsn(17, defaults.med_boundaries) == 1
    assert grade_jsn(17.0, (8.0, 17.0, 23.0)) == 1
    assert grade_jsn(30, defaults.med_boundaries) == 0
    assert grade_jsn(0, defaults.med_boundaries) == 3
    assert grade_jsn(7.5, defaults.med_boundaries) == 3
    with pytest.raises(MeasurementError):
        grade_jsn(-1, defaults.med_boundaries)


def test_grade_knee_uses_each_side():
    measurement = JsdMeasurement(16.0, 16.0, (0, 0), (0, 0))
    grades = grade_knee(measurement, ThresholdSet.standard())
    assert (grades.med, grades.lat) == (2, 1)


def test_threshold_set_validation():
    with pytest.raises(CalibrationError):
        ThresholdSet((8, 17), (7, 14, 24))
    with pytest.raises(CalibrationError):
        ThresholdSet((8, 8, 23), (7, 14, 24))
    with pytest.raises(CalibrationError):
        ThresholdSet.from_document({"med": [1, 2, 3], "lat": [1, 2, 3], "units": "mm"})
    with pytest.raises(CalibrationError):
        ThresholdSet.from_document({"med": [1, 2, 3]})


def test_threshold_file_round_trip(tmp_path):
    path = tmp_path / "thresholds.json"
    save_thresholds(ThresholdSet.standard(), path)
    assert load_thresholds(path) == ThresholdSet.standard()
    path.write_text("{not json")
    with pytest.raises(CalibrationError):
        load_thresholds(path)
