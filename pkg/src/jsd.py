""" Joint space distance measurement and JSN grading.

Distances are measured on the cleaned bone masks: the lowest femur point of
each condyle anchors a short series of vertical lines whose mean length is
the joint space distance D_avg of that compartment.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from classify import ROI_SIZE
from exceptions import CalibrationError, MeasurementError
from utilities import canonical_json, read_json, write_atomic

logger = logging.getLogger(__name__)

MM_PER_PX = 0.2
EDGE_MARGIN = 34
SPLIT_MARGIN = 17
LINE_OFFSETS = tuple(range(-14, 15, 2))
MIN_VALID_LINES = 5
N_JSN_CLASSES = 4
THRESHOLD_UNITS = "px@0.2mm"


@dataclass(frozen=True)
class GapLine:
    """ One vertical measurement line: column, gap length and the bone rows bounding it. """

    column: int
    length_px: int
    upper_row: int
    lower_row: int


@dataclass(frozen=True)
class JsdMeasurement:
    """ Medial and lateral joint space distances of one knee.

    Attributes
    ----------
    med_px, lat_px : <class 'float'>
        mean gap length D_avg in pixels (0.2 mm each)
    lowest_med, lowest_lat : <class 'tuple'>
        (x, y) lowest femur points anchoring each side
    lines_med, lines_lat : <class 'tuple'>
        the GapLine objects actually averaged
    """

    med_px: float
    lat_px: float
    lowest_med: tuple
    lowest_lat: tuple
    lines_med: tuple = field(default=())
    lines_lat: tuple = field(default=())

    def __post_init__(self):
        if self.med_px < 0 or self.lat_px < 0:
            raise MeasurementError("joint space distances must be non-negative")

    @property
    def med_mm(self):
        return self.med_px * MM_PER_PX

    @property
    def lat_mm(self):
        return self.lat_px * MM_PER_PX

    @property
    def valid_line_count(self):
        return {"med": len(self.lines_med), "lat": len(self.lines_lat)}

    def summary(self):
        return {
            "med_px": self.med_px, "lat_px": self.lat_px,
            "med_mm": self.med_mm, "lat_mm": self.lat_mm,
            "lowest_med": list(self.lowest_med), "lowest_lat": list(self.lowest_lat),
            "valid_line_count": self.valid_line_count,
        }


@dataclass(frozen=True)
class ThresholdSet:
    """ Three ascending class boundaries per compartment, in pixels at 0.2 mm. """

    med_boundaries: tuple
    lat_boundaries: tuple

    def __post_init__(self):
        for name in ("med_boundaries", "lat_boundaries"):
            values = tuple(float(v) for v in getattr(self, name))
            if len(values) != N_JSN_CLASSES - 1:
                raise CalibrationError(f"{name} needs {N_JSN_CLASSES - 1} values, got {len(values)}")
            if values[0] <= 0 or any(b <= a for a, b in zip(values, values[1:])):
                raise CalibrationError(f"{name} must be positive and strictly ascending: {values}")
            object.__setattr__(self, name, values)

    @classmethod
    def standard(cls):
        return cls((8.0, 17.0, 23.0), (7.0, 14.0, 24.0))

    def to_document(self):
        return {"med": list(self.med_boundaries), "lat": list(self.lat_boundaries), "units": THRESHOLD_UNITS}

    @classmethod
    def from_document(cls, document):
        if document.get("units", THRESHOLD_UNITS) != THRESHOLD_UNITS:
            raise CalibrationError(f"threshold units {document.get('units')!r} are not {THRESHOLD_UNITS}")
        try:
            return cls(document["med"], document["lat"])
        except (KeyError, TypeError) as err:
            raise CalibrationError(f"malformed threshold document: {err}") from err


@dataclass(frozen=True)
class JsnGrades:
    med: int
    lat: int

    def __post_init__(self):
        for value in (self.med, self.lat):
            if not 0 <= value < N_JSN_CLASSES:
                raise MeasurementError(f"JSN grade {value} outside 0-{N_JSN_CLASSES - 1}")


def load_thresholds(path):
    return ThresholdSet.from_document(read_json(path, CalibrationError))


def save_thresholds(thresholds, path):
    write_atomic(path, canonical_json(thresholds.to_document()))


def _bottom_rows(mask):
    """ Row index of the lowest pixel of each column, -1 where the column is empty. """

    has = mask.any(axis=0)
    last = mask.shape[0] - 1 - np.argmax(mask[::-1, :], axis=0)
    return np.where(has, last, -1)


def find_lowest_points(masks, split_col):
    """ Lowest femur pixel in each half of the patch.

    Columns within 34 px of the patch edges and within 17 px of `split_col`
    are excluded; ties go to the column nearest `split_col`.

    Returns
    -------
    ((x, y) in the patch-left half, (x, y) in the patch-right half)
    """

    split_col = int(round(split_col))
    width = masks.upper.shape[1]
    bottoms = _bottom_rows(masks.upper)
    cols = np.arange(width)
    allowed = (cols >= EDGE_MARGIN) & (cols < width - EDGE_MARGIN) & (np.abs(cols - split_col) > SPLIT_MARGIN)

    points = []
    for name, half in (("left", cols < split_col), ("right", cols > split_col)):
        candidates = cols[allowed & half & (bottoms >= 0)]
        if candidates.size == 0:
            raise MeasurementError(f"no femur pixels in the {name} half of the patch")
        lowest = bottoms[candidates].max()
        tied = candidates[bottoms[candidates] == lowest]
        x = int(tied[np.argmin(np.abs(tied - split_col))])
        points.append((x, int(lowest)))
    return tuple(points)


def assign_sides(laterality, knee_image_side):
    """ Which half of the knee patch (viewer's left/right) is medial.

    Parameters
    ----------
    laterality : <class 'str'>
        bilateral, left, right or unknown
    knee_image_side : <class 'str'>
        `left` / `right` for a knee in that half of a bilateral image,
        `single` for a single-knee image

    Returns
    -------
    Dictionary {"med": "left"|"right", "lat": "left"|"right"}
    """

    if knee_image_side == "left":
        med = "right"
    elif knee_image_side == "right":
        med = "left"
    elif knee_image_side == "single":
        if laterality not in ("left", "right"):
            raise MeasurementError(f"cannot tell the medial side of a single knee with laterality {laterality!r}")
        med = laterality
    else:
        raise MeasurementError(f"unknown knee image side {knee_image_side!r}")
    return {"med": med, "lat": "left" if med == "right" else "right"}


def _gap_lines(masks, anchor_x):
    width = masks.upper.shape[1]
    lines = []
    for offset in LINE_OFFSETS:
        col = anchor_x + offset
        if not 0 <= col < width:
            continue
        upper_rows = np.flatnonzero(masks.upper[:, col])
        if upper_rows.size == 0:
            continue
        bottom = int(upper_rows[-1])
        lower_rows = np.flatnonzero(masks.lower[bottom + 1:, col])
        if lower_rows.size == 0:
            continue
        top = bottom + 1 + int(lower_rows[0])
        lines.append(GapLine(int(col), top - bottom - 1, bottom, top))
    return tuple(lines)


def measure_jsd(masks, lowest_points, laterality, knee_image_side):
    """ Mean femur-to-tibia gap over 15 vertical lines around each lowest point.

    Raises
    ------
    MeasurementError
        when a side has fewer than 5 columns with bone on both sides of the gap
    """

    sides = assign_sides(laterality, knee_image_side)
    by_half = dict(zip(("left", "right"), lowest_points))
    result = {}
    for compartment in ("med", "lat"):
        point = by_half[sides[compartment]]
        lines = _gap_lines(masks, point[0])
        if len(lines) < MIN_VALID_LINES:
            raise MeasurementError(f"only {len(lines)} valid lines on the {compartment} side (need {MIN_VALID_LINES})")
        result[compartment] = (float(np.mean([line.length_px for line in lines])), tuple(point), lines)
    return JsdMeasurement(result["med"][0], result["lat"][0], result["med"][1], result["lat"][1],
                          result["med"][2], result["lat"][2])


def optimal_partition(values, k=N_JSN_CLASSES):
    """ Exact minimum within-class sum of squares partition of 1-D data into k contiguous classes.

    Returns
    -------
    (sorted values, list of k (start, stop) slices into them, total cost)
    """

    x = np.sort(np.asarray(values, dtype=np.float64))
    n = x.size
    s1 = np.concatenate(([0.0], np.cumsum(x)))
    s2 = np.concatenate(([0.0], np.cumsum(x * x)))

    def cost(starts, stop):
        count = stop - starts
        total = s1[stop] - s1[starts]
        return (s2[stop] - s2[starts]) - total * total / count

    # best[m, j]: cost of splitting the first j values into m classes
    best = np.full((k + 1, n + 1), np.inf)
    cut = np.zeros((k + 1, n + 1), dtype=np.int64)
    best[0, 0] = 0.0
    for m in range(1, k + 1):
        for j in range(m, n - (k - m) + 1):
            starts = np.arange(m - 1, j)
            totals = best[m - 1, starts] + cost(starts, j)
            i = int(np.argmin(totals))
            best[m, j] = totals[i]
            cut[m, j] = starts[i]

    bounds = []
    stop = n
    for m in range(k, 0, -1):
        start = int(cut[m, stop])
        bounds.append((start, stop))
        stop = start
    return x, bounds[::-1], float(best[k, n])


def _side_boundaries(values, k, side):
    values = np.asarray(values, dtype=np.float64)
    if np.unique(values).size < k:
        raise CalibrationError(f"{side}: need at least {k} distinct distances, got {np.unique(values).size}")
    x, classes, _ = optimal_partition(values, k)
    return tuple((x[stop - 1] + x[stop]) / 2.0 for _, stop in classes[:-1])


def calibrate_thresholds(distances, k=N_JSN_CLASSES):
    """ JSN class boundaries per side from measured (med_px, lat_px) distances.

    Each side is partitioned independently into k classes minimizing the total
    within-class variance; boundary i is the midpoint between the largest value
    of class i and the smallest value of class i + 1.
    """

    distances = np.asarray(distances, dtype=np.float64).reshape(-1, 2)
    med = _side_boundaries(distances[:, 0], k, "med")
    lat = _side_boundaries(distances[:, 1], k, "lat")
    logger.info("Calibrated boundaries med %s lat %s from %d knees", med, lat, len(distances))
    return ThresholdSet(med, lat)


def grade_jsn(jsd_px, boundaries):
    """ JSN grade = number of boundaries strictly above the distance (equality stays healthier). """

    if jsd_px < 0:
        raise MeasurementError(f"negative joint space distance {jsd_px}")
    return int(sum(1 for b in boundaries if b > jsd_px))


def grade_knee(measurement, thresholds):
    return JsnGrades(grade_jsn(measurement.med_px, thresholds.med_boundaries),
                     grade_jsn(measurement.lat_px, thresholds.lat_boundaries))


def class_occupancy(values, boundaries):
    """ Number of distances falling in each JSN grade. """

    counts = [0] * (len(boundaries) + 1)
    for value in values:
        counts[grade_jsn(value, boundaries)] += 1
    return counts
