""" Segmentation backends returning raw femur / tibia+fibula masks for a knee ROI. """
import json
import logging
from pathlib import Path

from backends.process import LineProcess
from backends.rle import decode_mask, load_mask_document
from exceptions import ConfigError, SegmentationError
from segment import BoneMaskPair

logger = logging.getLogger(__name__)


class FileSegmenter:
    """ Reads run-length-encoded masks keyed by (source_id, knee_side). """

    def __init__(self, source):
        self.records = load_mask_document(source)
        self.name = "file:<memory>" if isinstance(source, dict) else f"file:{Path(source).name}"

    def segment(self, roi, source_id, knee_side):
        try:
            entry = self.records[source_id][knee_side]
        except (KeyError, TypeError) as err:
            raise SegmentationError(f"no mask record for {source_id}/{knee_side}") from err
        return BoneMaskPair(decode_mask(entry["upper"]), decode_mask(entry["lower"]))


class PhantomSegmenter:
    """ Answers with the generator's ground-truth masks. """

    name = "phantom"

    def __init__(self, truths):
        self.masks = {}
        for truth in truths:
            for knee in truth.knees:
                self.masks[(truth.source_id, knee.knee_side)] = knee.masks

    def segment(self, roi, source_id, knee_side):
        try:
            return self.masks[(source_id, knee_side)]
        except KeyError as err:
            raise SegmentationError(f"no phantom masks for {source_id}/{knee_side}") from err


class ProcessSegmenter:
    """ Streams the 672x672 patch to an external process that answers {"upper": RLE, "lower": RLE}. """

    def __init__(self, command):
        self.process = LineProcess(command, SegmentationError)
        self.name = f"process:{command}"

    def segment(self, roi, source_id, knee_side):
        line = self.process.request(source_id, knee_side, roi.pixels_full)
        try:
            answer = json.loads(line)
            return BoneMaskPair(decode_mask(answer["upper"]), decode_mask(answer["lower"]))
        except (ValueError, KeyError, TypeError) as err:
            raise SegmentationError(f"unparseable segmenter answer: {err}") from err

    def close(self):
        self.process.close()


class TorchSegmenter:
    """ Runs a TorchScript network producing [2, H, W] logits (femur, tibia). """

    def __init__(self, path, device=None):
        from backends.torch_backend import ScriptedModel

        self.model = ScriptedModel(path, device)
        self.name = f"torch:{Path(path).name}"

    def segment(self, roi, source_id, knee_side):
        logits = self.model(roi.pixels_full)
        if logits.ndim != 3 or logits.shape[0] != 2:
            raise SegmentationError(f"segmenter output shape {logits.shape} is not [2, H, W]")
        return BoneMaskPair(logits[0] > 0, logits[1] > 0)


def make_segmenter(spec):
    """ Builds a segmenter from `file:<path>` (or a bare path), `process:<cmd>` or `torch:<path>`. """

    kind, _, arg = spec.partition(":")
    if not arg:
        kind, arg = "file", spec
    if kind == "file":
        return FileSegmenter(arg)
    if kind == "process":
        return ProcessSegmenter(arg)
    if kind == "torch":
        return TorchSegmenter(arg)
    raise ConfigError(f"unknown segmenter backend {kind!r}")
