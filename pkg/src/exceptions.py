""" Exceptions raised by the grading pipeline.

Every error knows the pipeline stage it belongs to, so a failing knee can be
reported with the stage that stopped it.
"""


class KneeGradingError(Exception):
    """ Base class for all pipeline errors. """

    stage = "pipeline"


class ConfigError(KneeGradingError):
    stage = "config"


class IngestError(KneeGradingError):
    stage = "ingest"


class UnsupportedTransferSyntax(IngestError):
    pass


class MissingRequiredTag(IngestError):
    pass


class MalformedElement(IngestError):
    pass


class DetectionError(KneeGradingError):
    stage = "detect"


class ClassificationError(KneeGradingError):
    stage = "classify"


class EnhancementError(KneeGradingError):
    stage = "enhance"


class SegmentationError(KneeGradingError):
    stage = "segment"


class MeasurementError(KneeGradingError):
    stage = "measure"


class CalibrationError(KneeGradingError):
    stage = "calibrate"


class ForestError(KneeGradingError):
    stage = "fuse"


class ModelFormatError(ForestError):
    pass


class EvaluationError(KneeGradingError):
    stage = "evaluate"


class PhantomError(KneeGradingError):
    stage = "phantom"
