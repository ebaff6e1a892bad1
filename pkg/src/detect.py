""" Knee joint detection postprocessing and detection metrics.

The detector itself is pluggable: candidates come from a results document
written by any detector, or from the non-learned `heuristic_detect` baseline.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.ndimage import uniform_filter1d

from exceptions import DetectionError
from utilities import RunningStat, read_json

logger = logging.getLogger(__name__)

DEFAULT_BOX_HALF = 250.0
MISMATCH_DISTANCE_PX = 30.0
MIN_CONFIDENCE = 1e-6


@dataclass(frozen=True)
class JointDetection:
    """ One candidate knee joint.

    Attributes
    ----------
    center : <class 'tuple'>
        (x, y) in pixels of the standardized image
    box : <class 'tuple'>
        (x0, y0, x1, y1) axis-aligned box
    confidence : <class 'float'>
        detector confidence in [0, 1]
    """

    center: tuple
    box: tuple
    confidence: float

    def __post_init__(self):
        x, y = (float(v) for v in self.center)
        x0, y0, x1, y1 = (float(v) for v in self.box)
        if not (x0 < x1 and y0 < y1):
            raise DetectionError(f"degenerate box {self.box}")
        if not (x0 <= x <= x1 and y0 <= y <= y1):
            raise DetectionError(f"center {self.center} lies outside box {self.box}")
        confidence = float(self.confidence)
        if not 0.0 <= confidence <= 1.0:
            raise DetectionError(f"confidence {confidence} outside [0, 1]")
        object.__setattr__(self, "center", (x, y))
        object.__setattr__(self, "box", (x0, y0, x1, y1))
        object.__setattr__(self, "confidence", confidence)

    @classmethod
    def around(cls, center, confidence, half=DEFAULT_BOX_HALF):
        """ Detection with the default 500x500 annotation box around `center`. """

        x, y = center
        return cls((x, y), (x - half, y - half, x + half, y + half), confidence)


@dataclass(frozen=True)
class KneePair:
    """ The two selected knees, ordered by centre x; `image_right` is None for a single knee. """

    image_left: JointDetection
    image_right: Optional[JointDetection] = None
    single_knee_flag: bool = False

    def __post_init__(self):
        if self.image_right is not None and not self.image_left.center[0] < self.image_right.center[0]:
            raise DetectionError("knee pair is not ordered by centre x")

    def knees(self):
        return [k for k in (self.image_left, self.image_right) if k is not None]


def _rank_key(det):
    return (-det.confidence, det.center[0], det.center[1], det.box)


def select_knees(candidates):
    """ Keeps the two highest-confidence candidates, without any confidence threshold.

    Ties are broken by smaller centre x, then smaller centre y; the kept pair is
    ordered by centre x. A single candidate is returned flagged as a single knee.
    """

    candidates = list(candidates)
    if not candidates:
        raise DetectionError("no knee candidates to select from")
    ranked = sorted(candidates, key=_rank_key)
    if len(ranked) == 1:
        logger.warning("Only one knee candidate available; flagging single knee")
        return KneePair(ranked[0], None, True)
    left, right = sorted(ranked[:2], key=lambda d: (d.center[0], d.center[1]))
    if left.center[0] == right.center[0]:
        raise DetectionError("top two candidates share the same centre column")
    return KneePair(left, right, False)


def iou(a, b):
    """ Intersection over union of two (x0, y0, x1, y1) boxes. """

    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


def center_deviation(pred, label):
    """ Euclidean distance C_d between predicted and labelled joint centres. """

    return math.hypot(pred[0] - label[0], pred[1] - label[1])


def _parse_record(record):
    try:
        center = (float(record["center_x"]), float(record["center_y"]))
        confidence = float(record["confidence"])
    except (KeyError, TypeError, ValueError) as err:
        raise DetectionError(f"malformed detection record {record!r}") from err
    box_keys = ("x0", "y0", "x1", "y1")
    present = [k in record for k in box_keys]
    if all(present):
        try:
            box = tuple(float(record[k]) for k in box_keys)
        except (TypeError, ValueError) as err:
            raise DetectionError(f"malformed box in detection record {record!r}") from err
        return JointDetection(center, box, confidence)
    if any(present):
        raise DetectionError(f"partial box in detection record {record!r}")
    return JointDetection.around(center, confidence)


def load_candidates(source, source_id):
    """ Reads the candidates recorded for `source_id` in a detection-results document.

    Parameters
    ----------
    source : <class 'dict'> or path
        the document itself or the path of its JSON file
    source_id : <class 'str'>
        the study to look up

    Returns
    -------
    List of JointDetection; a 500x500 box is synthesized when a record has no box
    """

    document = source if isinstance(source, dict) else read_json(source, DetectionError)
    if source_id not in document:
        raise DetectionError(f"no detection records for {source_id!r}")
    records = document[source_id]
    if not isinstance(records, list):
        raise DetectionError(f"detection entry for {source_id!r} must be a list")
    return [_parse_record(r) for r in records]


def _half_candidate(half, x_offset):
    """ Joint candidate inside one image half: bone-mass column and deepest row valley between bone. """

    height, width = half.shape
    fallback = JointDetection.around((x_offset + width / 2.0, height / 2.0), MIN_CONFIDENCE)

    col_profile = half.mean(axis=0)
    c_low, c_high = np.percentile(col_profile, [5, 95])
    if c_high - c_low <= 1e-6:
        return fallback
    bone_cols = np.flatnonzero(col_profile > (c_low + c_high) / 2.0)
    mass = col_profile[bone_cols] - c_low
    center_x = float(np.sum(bone_cols * mass) / np.sum(mass))

    row_profile = uniform_filter1d(half[:, bone_cols].mean(axis=1), size=5, mode="nearest")
    background, bone_level = np.percentile(row_profile, [5, 90])
    if bone_level - background <= 1e-6:
        return fallback
    bone_rows = np.flatnonzero(row_profile > (background + bone_level) / 2.0)
    top, bottom = bone_rows[0], bone_rows[-1]
    if bottom - top < 3:
        return fallback
    inner = row_profile[top:bottom + 1]
    # deepest valley with bone both above and below
    above = np.concatenate(([-np.inf], np.maximum.accumulate(inner)[:-1]))
    below = np.concatenate((np.maximum.accumulate(inner[::-1])[::-1][1:], [-np.inf]))
    depth = np.minimum(above, below) - inner
    darkest = int(np.argmax(depth))
    if depth[darkest] <= 0:
        return fallback
    floor = inner[darkest]
    dark = inner <= floor + 0.25 * (bone_level - floor)
    start = darkest
    while start > 0 and dark[start - 1]:
        start -= 1
    stop = darkest
    while stop < len(dark) - 1 and dark[stop + 1]:
        stop += 1
    center_y = float(top + (start + stop) / 2.0)

    contrast = (bone_level - floor) / (bone_level - background)
    confidence = float(np.clip(contrast, MIN_CONFIDENCE, 1.0))
    return JointDetection.around((x_offset + center_x, center_y), confidence)


def heuristic_detect(img):
    """ Non-learned knee locator used when no detector output is available.

    A bilateral image is split at its vertical midline and each half yields
    one candidate; any other image is treated as a single half.
    """

    pixels = img.pixels
    if img.laterality == "bilateral":
        mid = pixels.shape[1] // 2
        halves = [(pixels[:, :mid], 0), (pixels[:, mid:], mid)]
    else:
        halves = [(pixels, 0)]
    candidates = [_half_candidate(half, offset) for half, offset in halves]
    logger.info("Heuristic detector found %d candidate(s) in %s", len(candidates), img.source_id)
    return candidates


def detection_summary(results):
    """ Aggregates detection quality over a labelled set.

    Parameters
    ----------
    results : iterable of (KneePair or None, list of JointDetection)
        predicted pair and the annotated knees of each image

    Returns
    -------
    Dictionary with per-side mean/std IoU, mean/std C_d, the detection rate and
    the fraction of knees within the 30-pixel mismatch distance
    """

    iou_stats = {"left": RunningStat(), "right": RunningStat()}
    cd_stats = RunningStat()
    labelled = detected = within = 0
    for pair, labels in results:
        labels = sorted(labels, key=lambda d: d.center[0])
        preds = pair.knees() if pair is not None else []
        for idx, label in enumerate(labels):
            labelled += 1
            if not preds:
                continue
            pred = min(preds, key=lambda p: center_deviation(p.center, label.center))
            deviation = center_deviation(pred.center, label.center)
            detected += 1
            side = "right" if len(labels) > 1 and idx == 1 else "left"
            iou_stats[side].update(iou(pred.box, label.box))
            cd_stats.update(deviation)
            within += int(deviation <= MISMATCH_DISTANCE_PX)
    if labelled == 0:
        raise DetectionError("no labelled knees to summarize")
    return {
        "iou_mean": {side: stat.avg for side, stat in iou_stats.items()},
        "iou_std": {side: stat.std for side, stat in iou_stats.items()},
        "center_deviation_mean": cd_stats.avg,
        "center_deviation_std": cd_stats.std,
        "detection_rate": detected / labelled,
        "within_mismatch_distance": within / labelled,
    }
