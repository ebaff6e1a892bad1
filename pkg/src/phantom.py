""" Synthetic knee phantoms with exact ground truth.

A phantom is a flat background with one or two knees. Each knee is a bright
femur block above a bright tibia block, separated by a joint space whose
per-column height is known exactly. The truth carries the masks in ROI
coordinates, the per-column gap table and the D_avg the measurement step must
find on them.
"""
from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from backends.rle import mask_document
from classify import ROI_HALF, ROI_SIZE
from exceptions import KneeGradingError, PhantomError
from ingest import NormalizedImage, STANDARD_SPACING_MM
from jsd import EDGE_MARGIN, LINE_OFFSETS, SPLIT_MARGIN, assign_sides
from segment import BoneMaskPair
from utilities import canonical_json, write_atomic

logger = logging.getLogger(__name__)

SHAPES = ("flat", "vee", "wedge")
MIN_GAP = 2
FEMUR_TOP = 76
TIBIA_BOTTOM = 596
HALF_WIDTH = 150
APEX_OFFSET = 70
VEE_RUN = 4
DEFAULT_SIZE = 1024


@dataclass(frozen=True)
class KneeSpec:
    """ One knee: joint centre in image pixels, medial / lateral gap and condyle profile.

    Attributes
    ----------
    condyle_shape : <class 'str'>
        flat (straight condyles), vee (femur rising 1 px every 4 columns away
        from an apex 70 px either side of the centre) or wedge (vee femur whose
        gap also grows by `wedge_slope_px_per_col` per column from the apex)
    """

    center: tuple
    gap_med_px: int
    gap_lat_px: int
    condyle_shape: str = "flat"
    wedge_slope_px_per_col: float = 0.0

    def __post_init__(self):
        try:
            center = tuple(int(v) for v in self.center)
        except (TypeError, ValueError) as err:
            raise PhantomError(f"bad knee centre {self.center!r}") from err
        if len(center) != 2:
            raise PhantomError(f"knee centre needs (x, y), got {self.center!r}")
        for name in ("gap_med_px", "gap_lat_px"):
            value = getattr(self, name)
            if int(value) != value or value < MIN_GAP:
                raise PhantomError(f"{name} must be an integer >= {MIN_GAP}, got {value!r}")
            object.__setattr__(self, name, int(value))
        if self.condyle_shape not in SHAPES:
            raise PhantomError(f"unknown condyle shape {self.condyle_shape!r}")
        if not math.isfinite(self.wedge_slope_px_per_col):
            raise PhantomError("wedge slope must be finite")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "wedge_slope_px_per_col", float(self.wedge_slope_px_per_col))


@dataclass(frozen=True)
class PhantomSpec:
    seed: int
    knees: tuple
    width: int = DEFAULT_SIZE
    height: int = DEFAULT_SIZE
    background: float = 0.1
    bone: float = 0.8
    noise_sd: float = 0.02
    laterality: str = "bilateral"
    source_id: str = ""

    def __post_init__(self):
        knees = tuple(k if isinstance(k, KneeSpec) else KneeSpec(**k) for k in self.knees)
        if len(knees) not in (1, 2):
            raise PhantomError(f"a phantom holds one or two knees, got {len(knees)}")
        if len(knees) == 2 and self.laterality != "bilateral":
            raise PhantomError("a two-knee phantom must be bilateral")
        if len(knees) == 1 and self.laterality not in ("left", "right"):
            raise PhantomError("a single-knee phantom needs laterality left or right")
        if not 0.0 <= self.background < self.bone <= 1.0:
            raise PhantomError(f"need 0 <= background < bone <= 1, got {self.background}, {self.bone}")
        if self.noise_sd < 0:
            raise PhantomError(f"noise_sd must be non-negative, got {self.noise_sd}")
        if self.width < ROI_HALF or self.height < ROI_HALF:
            raise PhantomError(f"phantom size {self.width}x{self.height} is too small")
        object.__setattr__(self, "knees", knees)
        object.__setattr__(self, "seed", int(self.seed))
        if not self.source_id:
            object.__setattr__(self, "source_id", f"phantom-{self.seed}")

    @classmethod
    def from_document(cls, document):
        try:
            return cls(**document)
        except TypeError as err:
            raise PhantomError(f"malformed phantom spec: {err}") from err

    def to_document(self):
        return {
            "seed": self.seed,
            "knees": [{"center": list(k.center), "gap_med_px": k.gap_med_px, "gap_lat_px": k.gap_lat_px,
                       "condyle_shape": k.condyle_shape, "wedge_slope_px_per_col": k.wedge_slope_px_per_col}
                      for k in self.knees],
            "width": self.width, "height": self.height, "background": self.background, "bone": self.bone,
            "noise_sd": self.noise_sd, "laterality": self.laterality, "source_id": self.source_id,
        }


@dataclass(frozen=True)
class PhantomKnee:
    """ Ground truth of one knee.

    Attributes
    ----------
    gap_table : <class 'tuple'>
        (roi_column, femur_bottom_row, gap_px) for every bone column of the ROI
    lowest_points : <class 'tuple'>
        ((x, y) patch-left, (x, y) patch-right) lowest femur points
    d_avg : <class 'dict'>
        {"med": px, "lat": px} mean gap over the sampled columns
    """

    knee_side: str
    center: tuple
    masks: BoneMaskPair
    gap_table: tuple
    lowest_points: tuple
    d_avg: dict = field(default_factory=dict)


@dataclass(frozen=True)
class PhantomTruth:
    source_id: str
    laterality: str
    knees: tuple

    def to_document(self):
        return {
            "source_id": self.source_id,
            "laterality": self.laterality,
            "knees": [{"knee_side": k.knee_side, "center": list(k.center), "d_avg": k.d_avg,
                       "lowest_points": [list(p) for p in k.lowest_points],
                       "gap_table": [list(row) for row in k.gap_table]}
                      for k in self.knees],
        }


def _knee_sides(spec):
    if len(spec.knees) == 1:
        return [(spec.knees[0], "single")]
    ordered = sorted(spec.knees, key=lambda k: k.center)
    if ordered[0].center[0] == ordered[1].center[0]:
        raise PhantomError("the two knees share a centre column")
    return list(zip(ordered, ("left", "right")))


def _profile(knee, knee_side, laterality):
    """ Per-column femur bottom row and gap height over the ROI bone columns. """

    try:
        sides = assign_sides(laterality, knee_side)
    except KneeGradingError as err:
        raise PhantomError(str(err)) from err
    gap_by_half = {sides["med"]: knee.gap_med_px, sides["lat"]: knee.gap_lat_px}
    cols = np.arange(ROI_HALF - HALF_WIDTH, ROI_HALF + HALF_WIDTH + 1)
    right = cols >= ROI_HALF
    gap = np.where(right, gap_by_half["right"], gap_by_half["left"]).astype(np.int64)
    dx = cols - np.where(right, ROI_HALF + APEX_OFFSET, ROI_HALF - APEX_OFFSET)
    if knee.condyle_shape == "flat":
        drop = np.zeros_like(cols)
    else:
        drop = -(-np.abs(dx) // VEE_RUN)
    if knee.condyle_shape == "wedge":
        gap = gap + np.floor(knee.wedge_slope_px_per_col * dx + 0.5).astype(np.int64)
    if gap.min() < MIN_GAP:
        raise PhantomError(f"gap profile falls to {gap.min()} px (minimum {MIN_GAP})")

    # place the femur so the joint-space centroid sits on the knee centre row
    mid_offset = np.sum(gap * (-drop + (gap + 1) / 2.0)) / np.sum(gap)
    femur_base = int(math.floor(ROI_HALF - mid_offset + 0.5))
    femur = femur_base - drop
    tibia = femur + 1 + gap
    if femur.min() <= FEMUR_TOP or tibia.max() >= TIBIA_BOTTOM:
        raise PhantomError("gap profile leaves the ROI")
    return cols, femur, gap


def _masks(cols, femur, gap):
    rows = np.arange(ROI_SIZE)[:, None]
    upper = np.zeros((ROI_SIZE, ROI_SIZE), dtype=bool)
    lower = np.zeros((ROI_SIZE, ROI_SIZE), dtype=bool)
    upper[:, cols] = (rows >= FEMUR_TOP) & (rows <= femur[None, :])
    lower[:, cols] = (rows >= (femur + 1 + gap)[None, :]) & (rows <= TIBIA_BOTTOM)
    return BoneMaskPair(upper, lower)


def _sampled_d_avg(cols, femur, gap):
    """ Lowest femur column per patch half and the mean gap over the sampled lines around it. """

    allowed = (cols >= EDGE_MARGIN) & (cols < ROI_SIZE - EDGE_MARGIN) & (np.abs(cols - ROI_HALF) > SPLIT_MARGIN)
    by_col = dict(zip(cols.tolist(), gap.tolist()))
    points, means = [], {}
    for half, in_half in (("left", cols < ROI_HALF), ("right", cols > ROI_HALF)):
        candidates = cols[allowed & in_half]
        rows = femur[allowed & in_half]
        lowest = rows.max()
        tied = candidates[rows == lowest]
        x = int(tied[np.argmin(np.abs(tied - ROI_HALF))])
        points.append((x, int(lowest)))
        means[half] = float(np.mean([by_col[x + offset] for offset in LINE_OFFSETS]))
    return tuple(points), means


def _bone_box(knee):
    cx, cy = knee.center
    return (cx - HALF_WIDTH, cy - ROI_HALF + FEMUR_TOP, cx + HALF_WIDTH, cy - ROI_HALF + TIBIA_BOTTOM)


def _validate_layout(spec):
    boxes = [_bone_box(k) for k in spec.knees]
    for knee, (x0, y0, x1, y1) in zip(spec.knees, boxes):
        if x0 < 0 or y0 < 0 or x1 >= spec.width or y1 >= spec.height:
            raise PhantomError(f"knee at {knee.center} does not fit in the {spec.width}x{spec.height} image")
        cx, cy = knee.center
        near = sum(d < ROI_HALF for d in (cx, spec.width - 1 - cx, cy, spec.height - 1 - cy))
        if near > 1:
            raise PhantomError(f"knee at {knee.center} is closer than {ROI_HALF} px to {near} borders")
    if len(boxes) == 2:
        a, b = boxes
        if a[0] <= b[2] and b[0] <= a[2] and a[1] <= b[3] and b[1] <= a[3]:
            raise PhantomError("phantom knees overlap")


def generate(spec):
    """ Renders a phantom and its exact truth; deterministic for a given spec.

    Returns
    -------
    (NormalizedImage, PhantomTruth)
    """

    _validate_layout(spec)
    canvas = np.zeros((spec.height, spec.width), dtype=bool)
    knees = []
    for knee, knee_side in _knee_sides(spec):
        cols, femur, gap = _profile(knee, knee_side, spec.laterality)
        masks = _masks(cols, femur, gap)
        lowest_points, by_half = _sampled_d_avg(cols, femur, gap)
        sides = assign_sides(spec.laterality, knee_side)
        d_avg = {"med": by_half[sides["med"]], "lat": by_half[sides["lat"]]}

        x0, y0 = knee.center[0] - ROI_HALF, knee.center[1] - ROI_HALF
        c0, c1 = cols[0], cols[-1] + 1
        bone = masks.upper | masks.lower
        canvas[y0 + FEMUR_TOP:y0 + TIBIA_BOTTOM + 1, x0 + c0:x0 + c1] |= bone[FEMUR_TOP:TIBIA_BOTTOM + 1, c0:c1]
        table = tuple((int(c), int(f), int(g)) for c, f, g in zip(cols, femur, gap))
        knees.append(PhantomKnee(knee_side, knee.center, masks, table, lowest_points, d_avg))

    pixels = np.where(canvas, spec.bone, spec.background)
    if spec.noise_sd > 0:
        rng = np.random.default_rng(spec.seed)
        pixels = pixels + rng.normal(0.0, spec.noise_sd, size=pixels.shape)
    pixels = np.round(np.clip(pixels, 0.0, 1.0) * 255.0) / 255.0

    image = NormalizedImage(pixels, spec.laterality, spec.source_id)
    truth = PhantomTruth(spec.source_id, spec.laterality, tuple(knees))
    logger.info("Generated phantom %s with %d knee(s)", spec.source_id, len(knees))
    return image, truth


def emit_backend_fixtures(truth):
    """ File-backed detector and segmenter inputs for one phantom.

    Returns
    -------
    (mask document, detection document), both keyed by the phantom's source_id
    """

    masks = {truth.source_id: {k.knee_side: (k.masks.upper, k.masks.lower) for k in truth.knees}}
    detections = {truth.source_id: [{"center_x": float(k.center[0]), "center_y": float(k.center[1]),
                                     "confidence": 1.0} for k in truth.knees]}
    return mask_document(masks), detections


def merge_fixtures(truths):
    """ One mask document and one detection document covering several phantoms. """

    records, detections = {}, {}
    for truth in truths:
        mask_doc, detection_doc = emit_backend_fixtures(truth)
        records.update(mask_doc["records"])
        detections.update(detection_doc)
    document = mask_document({})
    document["records"] = records
    return document, detections


def write_study(image, directory):
    """ Writes the phantom as an 8-bit graymap plus its `<stem>.json` sidecar. """

    directory = Path(directory)
    buffer = io.BytesIO()
    Image.fromarray(np.rint(image.pixels * 255.0).astype(np.uint8), mode="L").save(buffer, format="PPM")
    image_path = directory / f"{image.source_id}.pgm"
    write_atomic(image_path, buffer.getvalue())
    sidecar = {"spacing_mm": STANDARD_SPACING_MM, "laterality": image.laterality, "source_id": image.source_id}
    write_atomic(directory / f"{image.source_id}.json", canonical_json(sidecar))
    return image_path


def random_specs(seed, count, shapes=SHAPES, max_noise_sd=0.05, max_slope=0.25):
    """ Seeded valid bilateral phantom specs with knees near (256, 512) and (768, 512). """

    rng = np.random.default_rng(seed)
    max_dx = HALF_WIDTH - APEX_OFFSET
    specs = []
    for index in range(count):
        knees = []
        for base_x in (256, 768):
            shape = shapes[int(rng.integers(len(shapes)))]
            slope = round(float(rng.uniform(-max_slope, max_slope)), 2) if shape == "wedge" else 0.0
            low = MIN_GAP + 1 + int(math.ceil(abs(slope) * max_dx))
            gap_med, gap_lat = (int(g) for g in rng.integers(low, low + 30, size=2))
            center = (base_x + int(rng.integers(-20, 21)), 512 + int(rng.integers(-32, 33)))
            knees.append(KneeSpec(center, gap_med, gap_lat, shape, slope))
        specs.append(PhantomSpec(seed=int(rng.integers(2 ** 31 - 1)), knees=tuple(knees),
                                 noise_sd=round(float(rng.uniform(0.0, max_noise_sd)), 4),
                                 source_id=f"phantom-{seed}-{index:03d}"))
    return specs
