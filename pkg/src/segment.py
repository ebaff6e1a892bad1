""" Inference-time enhancement, bone mask cleaning and Dice scoring. """
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import cv2
import numpy as np
from scipy import ndimage
from skimage import measure

from classify import ROI_SIZE
from exceptions import EnhancementError, SegmentationError
from utilities import RunningStat

logger = logging.getLogger(__name__)

GAMMA_BOX = 50
GAMMA_BOX_OFFSET = 10
GAMMA_TARGET_MEAN = 0.5
GAMMA_RANGE = (1.0, 3.0)
SHARPEN_RATIO = 0.3
LAPLACIAN_KERNEL = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float64)
FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True, eq=False)
class BoneMaskPair:
    """ Femur (upper) and tibia+fibula (lower) masks over the 672x672 ROI. """

    upper: np.ndarray
    lower: np.ndarray

    def __post_init__(self):
        upper = np.asarray(self.upper, dtype=bool)
        lower = np.asarray(self.lower, dtype=bool)
        if upper.shape != (ROI_SIZE, ROI_SIZE) or lower.shape != (ROI_SIZE, ROI_SIZE):
            raise SegmentationError(f"bone masks must be {ROI_SIZE}x{ROI_SIZE}, got {upper.shape} and {lower.shape}")
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "lower", lower)

    def __eq__(self, other):
        if not isinstance(other, BoneMaskPair):
            return NotImplemented
        return np.array_equal(self.upper, other.upper) and np.array_equal(self.lower, other.lower)

    __hash__ = None

    def shifted(self, dx, dy):
        """ Both masks translated by an integer offset (pixels leaving the ROI are dropped). """

        return BoneMaskPair(_shift(self.upper, dx, dy), _shift(self.lower, dx, dy))


def _shift(mask, dx, dy):
    out = np.zeros_like(mask)
    h, w = mask.shape
    src = mask[max(-dy, 0):h - max(dy, 0), max(-dx, 0):w - max(dx, 0)]
    out[max(dy, 0):max(dy, 0) + src.shape[0], max(dx, 0):max(dx, 0) + src.shape[1]] = src
    return out


def gamma_for_patch(roi):
    """ Gamma chosen from the mean of the 50x50 box whose bottom edge sits 10 px above the joint centre. """

    cx, cy = (int(round(v)) for v in roi.joint_center_in_patch)
    bottom = cy - GAMMA_BOX_OFFSET
    top = bottom - GAMMA_BOX
    left = cx - GAMMA_BOX // 2
    window = roi.pixels_full[max(top, 0):max(bottom, 0), max(left, 0):max(left + GAMMA_BOX, 0)]
    if window.size == 0:
        return 1.0
    mean = float(window.mean())
    if not 0.0 < mean < 1.0:
        return 1.0
    gamma = math.log(GAMMA_TARGET_MEAN) / math.log(mean)
    return float(min(max(gamma, GAMMA_RANGE[0]), GAMMA_RANGE[1]))


def adaptive_gamma(roi):
    """ Applies pixel ** gamma with gamma = clamp(ln 0.5 / ln m, 1, 3). """

    gamma = gamma_for_patch(roi)
    logger.debug("Adaptive gamma %.4f", gamma)
    if gamma == 1.0:
        return roi
    return roi.with_pixels(np.power(roi.pixels_full, gamma))


def laplacian_sharpen(roi, ratio=SHARPEN_RATIO):
    """ out = clamp(in - ratio * laplacian(in), 0, 1) with replicate borders. """

    if not 0.0 <= ratio <= 1.0:
        raise EnhancementError(f"sharpening ratio {ratio} outside [0, 1]")
    if ratio == 0.0:
        return roi
    pixels = np.asarray(roi.pixels_full, dtype=np.float64)
    laplacian = cv2.filter2D(pixels, cv2.CV_64F, LAPLACIAN_KERNEL, borderType=cv2.BORDER_REPLICATE)
    return roi.with_pixels(np.clip(pixels - ratio * laplacian, 0.0, 1.0))


def enhance(roi, ratio=SHARPEN_RATIO):
    """ Gamma correction followed by Laplacian sharpening (inference only). """

    return laplacian_sharpen(adaptive_gamma(roi), ratio)


def _largest_component(mask):
    labels = measure.label(mask, connectivity=1)
    if labels.max() == 0:
        return np.zeros_like(mask, dtype=bool)
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


def _clean(mask):
    return ndimage.binary_fill_holes(_largest_component(mask), structure=FOUR_CONNECTED)


def postprocess(raw):
    """ Keeps the largest 4-connected component of each mask, fills its holes and
    resolves overlaps in favour of the femur.

    Raises
    ------
    SegmentationError
        when a mask is empty after cleaning or the femur is not above the tibia
    """

    upper = _clean(raw.upper)
    if not upper.any():
        raise SegmentationError("upper (femur) mask is empty after cleaning")
    lower = _clean(raw.lower & ~upper) & ~upper
    if not lower.any():
        raise SegmentationError("lower (tibia) mask is empty after cleaning")

    upper_row = np.nonzero(upper)[0].mean()
    lower_row = np.nonzero(lower)[0].mean()
    if not upper_row < lower_row:
        raise SegmentationError(f"femur centroid row {upper_row:.1f} is not above tibia centroid row {lower_row:.1f}")
    return BoneMaskPair(upper, lower)


def segment(backend, roi, source_id, knee_side):
    """ Gets raw masks from a segmentation backend and cleans them. """

    raw = backend.segment(roi, source_id, knee_side)
    masks = postprocess(raw)
    logger.info("Segmented %s/%s with %s: femur %d px, tibia %d px", source_id, knee_side,
                backend.name, int(masks.upper.sum()), int(masks.lower.sum()))
    return masks


def dice(a, b):
    """ 2|a & b| / (|a| + |b|); 1.0 when both masks are empty. """

    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def mask_iou(a, b):
    """ |a & b| / |a | b|; 1.0 when both masks are empty. """

    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(a, b).sum()) / union


def dice_summary(pairs):
    """ Mean Dice of predicted vs reference masks, per bone and overall. """

    stats = {"upper": RunningStat(), "lower": RunningStat()}
    for pred, truth in pairs:
        stats["upper"].update(dice(pred.upper, truth.upper))
        stats["lower"].update(dice(pred.lower, truth.lower))
    if not stats["upper"].count:
        raise SegmentationError("no mask pairs to summarize")
    summary = {bone: stat.avg for bone, stat in stats.items()}
    summary["mean"] = (summary["upper"] + summary["lower"]) / 2.0
    return summary
