""" Classifier backends returning raw 5-class KL scores for a knee ROI. """
import json
import logging
from pathlib import Path

import numpy as np

from backends.process import LineProcess
from exceptions import ClassificationError, ConfigError
from utilities import read_json

logger = logging.getLogger(__name__)


class StubClassifier:
    """ Returns the same vector for every knee (uniform by default). """

    def __init__(self, values=None):
        self.values = tuple(values) if values is not None else (0.2,) * 5
        self.name = "stub:" + ",".join(repr(v) for v in self.values)

    def predict(self, roi, source_id, knee_side):
        return self.values


class FileClassifier:
    """ Looks up precomputed vectors keyed by (source_id, knee_side). """

    def __init__(self, source):
        if isinstance(source, dict):
            self.document, self.name = source, "file:<memory>"
        else:
            self.document, self.name = read_json(source, ClassificationError), f"file:{Path(source).name}"

    def predict(self, roi, source_id, knee_side):
        try:
            return self.document[source_id][knee_side]
        except (KeyError, TypeError) as err:
            raise ClassificationError(f"no classifier record for {source_id}/{knee_side}") from err


class ProcessClassifier:
    """ Streams the 256x256 patch to an external model process and reads back 5 reals. """

    def __init__(self, command):
        self.process = LineProcess(command, ClassificationError)
        self.name = f"process:{command}"

    def predict(self, roi, source_id, knee_side):
        line = self.process.request(source_id, knee_side, roi.pixels_scaled)
        try:
            if line.startswith("["):
                return [float(v) for v in json.loads(line)]
            return [float(v) for v in line.replace(",", " ").split()]
        except ValueError as err:
            raise ClassificationError(f"unparseable classifier answer {line!r}") from err

    def close(self):
        self.process.close()


class TorchClassifier:
    """ Runs a TorchScript classifier on the 256x256 patch and softmaxes its logits. """

    def __init__(self, path, device=None):
        from backends.torch_backend import ScriptedModel

        self.model = ScriptedModel(path, device)
        self.name = f"torch:{Path(path).name}"

    def predict(self, roi, source_id, knee_side):
        return self.model.probabilities(roi.pixels_scaled)


def make_classifier(spec):
    """ Builds a classifier backend from a spec string.

    Parameters
    ----------
    spec : <class 'str'>
        stub:uniform, stub:p0,p1,p2,p3,p4, file:<path> (or a bare path),
        process:<command line> or torch:<scripted model path>

    Returns
    -------
    Backend object exposing `name` and `predict(roi, source_id, knee_side)`
    """

    kind, _, arg = spec.partition(":")
    if not arg:
        kind, arg = "file", spec
    if kind == "stub":
        if arg == "uniform":
            return StubClassifier()
        try:
            values = [float(v) for v in arg.split(",")]
        except ValueError as err:
            raise ConfigError(f"bad stub classifier values {arg!r}") from err
        if len(values) != 5 or not np.all(np.isfinite(values)):
            raise ConfigError(f"stub classifier needs 5 finite values, got {arg!r}")
        return StubClassifier(values)
    if kind == "file":
        return FileClassifier(arg)
    if kind == "process":
        return ProcessClassifier(arg)
    if kind == "torch":
        return TorchClassifier(arg)
    raise ConfigError(f"unknown classifier backend {kind!r}")
