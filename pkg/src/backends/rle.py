""" Run-length encoding of binary masks and the mask document format. """
import numpy as np

from exceptions import SegmentationError
from utilities import read_json

MASK_FORMAT = "knee-masks"
MASK_VERSION = 1


def encode_mask(mask):
    """ Encodes a binary mask as alternating zero/one run lengths over its row-major flattening.

    The first run always counts zeros and may be empty.
    """

    flat = np.asarray(mask, dtype=bool).ravel()
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        counts = [0] + counts
    return {"shape": list(np.shape(mask)), "counts": [int(c) for c in counts]}


def decode_mask(rle):
    """ Inverse of `encode_mask`. """

    try:
        shape = tuple(int(s) for s in rle["shape"])
        counts = np.asarray(rle["counts"], dtype=np.int64)
    except (KeyError, TypeError, ValueError) as err:
        raise SegmentationError(f"malformed run-length mask: {err}") from err
    if np.any(counts < 0) or counts.sum() != int(np.prod(shape)):
        raise SegmentationError(f"run lengths do not cover a {shape} mask")
    values = np.arange(counts.size) % 2 == 1
    return np.repeat(values, counts).reshape(shape)


def mask_document(records):
    """ Builds a mask document from {source_id: {knee_side: (upper, lower)}}. """

    encoded = {
        source_id: {side: {"upper": encode_mask(upper), "lower": encode_mask(lower)}
                    for side, (upper, lower) in sides.items()}
        for source_id, sides in records.items()
    }
    return {"format": MASK_FORMAT, "version": MASK_VERSION, "records": encoded}


def load_mask_document(source):
    """ Reads and checks a mask document given as a dict or a JSON path. """

    document = source if isinstance(source, dict) else read_json(source, SegmentationError)
    if document.get("format") != MASK_FORMAT or document.get("version") != MASK_VERSION:
        raise SegmentationError(f"unsupported mask document {document.get('format')!r} "
                                f"version {document.get('version')!r}")
    return document["records"]
