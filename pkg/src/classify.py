""" Region-of-interest extraction and KL probability classification. """
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import cv2
import numpy as np

from exceptions import ClassificationError

logger = logging.getLogger(__name__)

ROI_SIZE = 672
ROI_HALF = ROI_SIZE // 2
SCALED_SIZE = 256
N_GRADES = 5
SUM_TOLERANCE = 1e-6


def downscale(pixels):
    """ Area-averaging reduction of a full-scale patch to the classifier input size. """

    return cv2.resize(np.asarray(pixels, dtype=np.float64), (SCALED_SIZE, SCALED_SIZE),
                      interpolation=cv2.INTER_AREA)


@dataclass(frozen=True, eq=False)
class RoiPatch:
    """ Fixed-scale window around one knee joint.

    Attributes
    ----------
    pixels_full : <class 'numpy.ndarray'>
        672x672 unit-interval grid at 0.2 mm/pixel
    pixels_scaled : <class 'numpy.ndarray'>
        256x256 area-averaged copy fed to the classifier
    joint_center_in_patch : <class 'tuple'>
        (x, y) of the joint centre inside the patch
    pad_fraction : <class 'float'>
        fraction of patch pixels that fell outside the source image
    origin : <class 'tuple'>
        (x, y) image coordinates of the patch's top-left pixel
    """

    pixels_full: np.ndarray
    pixels_scaled: np.ndarray
    joint_center_in_patch: tuple = (ROI_HALF, ROI_HALF)
    pad_fraction: float = 0.0
    origin: tuple = (0, 0)

    def __post_init__(self):
        if np.shape(self.pixels_full) != (ROI_SIZE, ROI_SIZE):
            raise ClassificationError(f"full patch must be {ROI_SIZE}x{ROI_SIZE}")
        if np.shape(self.pixels_scaled) != (SCALED_SIZE, SCALED_SIZE):
            raise ClassificationError(f"scaled patch must be {SCALED_SIZE}x{SCALED_SIZE}")
        if not 0.0 <= self.pad_fraction <= 1.0:
            raise ClassificationError(f"pad fraction {self.pad_fraction} outside [0, 1]")

    def with_pixels(self, pixels_full):
        """ Same geometry, new full-scale pixels (the scaled copy is rebuilt). """

        pixels_full = np.asarray(pixels_full, dtype=np.float64)
        return RoiPatch(pixels_full, downscale(pixels_full), self.joint_center_in_patch,
                        self.pad_fraction, self.origin)


@dataclass(frozen=True)
class ProbabilityVector:
    """ KL grade probabilities p_0..p_4. """

    p: tuple

    def __post_init__(self):
        p = tuple(float(v) for v in self.p)
        if len(p) != N_GRADES:
            raise ClassificationError(f"probability vector needs {N_GRADES} entries, got {len(p)}")
        if any(not math.isfinite(v) or v < 0 for v in p):
            raise ClassificationError(f"probabilities must be finite and non-negative: {p}")
        if abs(sum(p) - 1.0) > SUM_TOLERANCE:
            raise ClassificationError(f"probabilities sum to {sum(p)}, not 1")
        object.__setattr__(self, "p", p)

    @classmethod
    def from_raw(cls, values):
        """ Validates a backend's output and renormalizes it to sum to one. """

        values = np.asarray(values, dtype=np.float64).ravel()
        if values.size != N_GRADES:
            raise ClassificationError(f"backend returned {values.size} values, expected {N_GRADES}")
        if not np.all(np.isfinite(values)):
            raise ClassificationError(f"backend returned non-finite values {values.tolist()}")
        if np.any(values < 0):
            raise ClassificationError(f"backend returned negative values {values.tolist()}")
        total = values.sum()
        if total <= 0:
            raise ClassificationError("backend returned an all-zero vector")
        if abs(total - 1.0) > SUM_TOLERANCE:
            logger.warning("Renormalizing backend probabilities summing to %.6f", total)
        return cls(tuple(values / total))

    @classmethod
    def uniform(cls):
        return cls((1.0 / N_GRADES,) * N_GRADES)

    def argmax(self):
        return int(np.argmax(self.p))


def extract_roi(img, center):
    """ Cuts the 672x672 window centred on the joint, zero-padding outside the image.

    Parameters
    ----------
    img : <class 'NormalizedImage'>
        the preprocessed radiograph
    center : <class 'tuple'>
        (x, y) joint centre in image pixels

    Returns
    -------
    RoiPatch with the 256x256 area-averaged copy and the padded fraction
    """

    cx, cy = int(round(center[0])), int(round(center[1]))
    height, width = img.pixels.shape
    if not (0 <= cx < width and 0 <= cy < height):
        raise ClassificationError(f"joint centre {center} lies outside the {width}x{height} image")

    x0, y0 = cx - ROI_HALF, cy - ROI_HALF
    patch = np.zeros((ROI_SIZE, ROI_SIZE), dtype=np.float64)
    src_x0, src_y0 = max(x0, 0), max(y0, 0)
    src_x1, src_y1 = min(x0 + ROI_SIZE, width), min(y0 + ROI_SIZE, height)
    patch[src_y0 - y0:src_y1 - y0, src_x0 - x0:src_x1 - x0] = img.pixels[src_y0:src_y1, src_x0:src_x1]

    inside = (src_x1 - src_x0) * (src_y1 - src_y0)
    pad_fraction = 1.0 - inside / float(ROI_SIZE * ROI_SIZE)
    if pad_fraction > 0:
        logger.warning("ROI around %s in %s is %.1f%% padding", (cx, cy), img.source_id, 100 * pad_fraction)
    return RoiPatch(patch, downscale(patch), (ROI_HALF, ROI_HALF), pad_fraction, (x0, y0))


def classify(backend, roi, source_id, knee_side):
    """ Asks a classifier backend for the KL probability vector of one knee.

    The result always satisfies the probability-vector invariants: the backend
    output is renormalized, or an error is raised.
    """

    raw = backend.predict(roi, source_id, knee_side)
    probs = ProbabilityVector.from_raw(raw)
    logger.info("Classified %s/%s with %s: %s", source_id, knee_side, backend.name,
                ", ".join(f"{v:.3f}" for v in probs.p))
    return probs
