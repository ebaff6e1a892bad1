""" Detection sources: precomputed candidate documents or the heuristic locator. """
from pathlib import Path

from detect import heuristic_detect, load_candidates
from exceptions import DetectionError
from utilities import read_json


class FileDetector:
    """ Serves candidates from a detection document keyed by source_id. """

    def __init__(self, source):
        if isinstance(source, dict):
            self.document, self.name = source, "file:<memory>"
        else:
            self.document, self.name = read_json(source, DetectionError), f"file:{Path(source).name}"

    def detect(self, img):
        return load_candidates(self.document, img.source_id)


class HeuristicDetector:
    name = "heuristic"

    def detect(self, img):
        return heuristic_detect(img)


def make_detector(spec):
    """ `heuristic`, `file:<path>` or a bare detection document path. """

    if spec == "heuristic":
        return HeuristicDetector()
    kind, _, arg = spec.partition(":")
    if kind == "file" and arg:
        return FileDetector(arg)
    return FileDetector(spec)
