""" The five-step grading pipeline for one study, with per-knee fault isolation. """
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from backends.classifier import make_classifier
from backends.detector import make_detector
from backends.segmenter import make_segmenter
from classify import classify, extract_roi
from detect import select_knees
from exceptions import ConfigError, KneeGradingError
from fuse import assemble_features, load_model, model_hash, predict
from jsd import ThresholdSet, find_lowest_points, grade_knee, load_thresholds, measure_jsd
from segment import SHARPEN_RATIO, enhance, gamma_for_patch, segment
from utilities import __version__, canonical_json, config_hash

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GradingConfig:
    """ Everything that can change a grading result.

    Attributes
    ----------
    backend_detections : <class 'str'>
        `heuristic` or a detection document
    backend_masks : <class 'str'>
        segmenter backend spec (file:, process: or torch:)
    backend_probs : <class 'str'>
        classifier backend spec (stub:, file:, process: or torch:)
    model : <class 'str'>
        path of the fusion model document
    thresholds : <class 'str'>
        path of a threshold document; the published boundaries are used when empty
    """

    backend_detections: str = "heuristic"
    backend_masks: Optional[str] = None
    backend_probs: str = "stub:uniform"
    model: Optional[str] = None
    thresholds: Optional[str] = None
    sharpen_ratio: float = SHARPEN_RATIO

    @classmethod
    def from_sources(cls, config=None, **overrides):
        """ Config document values, overridden by every non-None keyword. """

        values = {f.name: f.default for f in dataclasses.fields(cls)}
        for source in (config or {}, overrides):
            for key, value in source.items():
                if key in values and value is not None:
                    values[key] = value
        return cls(**values)


@dataclass(frozen=True)
class KneeResult:
    """ Everything produced for one knee; `failure` is set when a stage raised. """

    knee_side: str
    detection: object
    roi: object = None
    probabilities: object = None
    gamma: Optional[float] = None
    masks: object = None
    measurement: object = None
    jsn: object = None
    assessment: object = None
    failure: Optional[dict] = None

    @property
    def graded(self):
        return self.failure is None

    def to_document(self):
        det = self.detection
        document = {
            "knee_side": self.knee_side,
            "status": "graded" if self.graded else "failed",
            "detection": {"center": list(det.center), "box": list(det.box), "confidence": det.confidence},
        }
        if self.roi is not None:
            document["flags"] = {"pad_fraction": self.roi.pad_fraction, "padded": self.roi.pad_fraction > 0}
        if self.gamma is not None:
            document["gamma"] = self.gamma
        if self.probabilities is not None:
            document["probabilities"] = list(self.probabilities.p)
        if self.measurement is not None:
            document["jsd"] = self.measurement.summary()
        if self.jsn is not None:
            document["jsn"] = {"med": self.jsn.med, "lat": self.jsn.lat}
        if self.assessment is not None:
            document["kl_grade"] = self.assessment.kl_grade
            document["vote_distribution"] = list(self.assessment.vote_distribution)
            document["features"] = list(self.assessment.inputs.values)
        if self.failure is not None:
            document["failure"] = self.failure
        return document


@dataclass(frozen=True)
class StudyReport:
    source_id: str
    laterality: str
    knees: tuple
    backends: dict
    config_hash: str
    single_knee_flag: bool = False
    degenerate_window: bool = False
    software_version: str = __version__
    errors: tuple = field(default=())

    @property
    def all_failed(self):
        return not any(k.graded for k in self.knees)

    def to_document(self):
        return {
            "source_id": self.source_id,
            "laterality": self.laterality,
            "software_version": self.software_version,
            "config_hash": self.config_hash,
            "backends": self.backends,
            "flags": {"single_knee": self.single_knee_flag, "degenerate_window": self.degenerate_window},
            "knees": [k.to_document() for k in self.knees],
            "errors": list(self.errors),
        }

    def to_json(self):
        return canonical_json(self.to_document())


def failure_record(err):
    stage = getattr(err, "stage", "pipeline")
    return {"stage": stage, "error": type(err).__name__, "message": str(err)}


class KneeGradingPipeline:
    """ Runs detection, classification, segmentation, measurement and fusion on a study.

    Methods
    -------
    grade():
        Grades every selected knee of a normalized image and returns a StudyReport
    grade_knee():
        Runs ROI extraction through fusion on one detected knee
    """

    def __init__(self, detector, classifier, segmenter, model, thresholds=None,
                 sharpen_ratio=SHARPEN_RATIO, config_digest=""):
        self.detector = detector
        self.classifier = classifier
        self.segmenter = segmenter
        self.model = model
        self.thresholds = thresholds or ThresholdSet.standard()
        self.sharpen_ratio = sharpen_ratio
        self.config_digest = config_digest

    @classmethod
    def from_config(cls, config):
        """ Builds the backends named by a GradingConfig and hashes the result-relevant settings. """

        if not config.backend_masks:
            raise ConfigError("a segmentation backend (--backend-masks) is required")
        detector = make_detector(config.backend_detections)
        classifier = make_classifier(config.backend_probs)
        segmenter = make_segmenter(config.backend_masks)
        model = None
        if config.model:
            try:
                model = load_model(Path(config.model).read_bytes())
            except OSError as err:
                raise ConfigError(f"cannot read model {config.model}: {err}") from err
        thresholds = load_thresholds(config.thresholds) if config.thresholds else ThresholdSet.standard()

        digest = config_hash({
            "backend_detections": detector.name,
            "backend_masks": segmenter.name,
            "backend_probs": classifier.name,
            "model": model_hash(model) if model is not None else None,
            "thresholds": thresholds.to_document(),
            "sharpen_ratio": config.sharpen_ratio,
            "software_version": __version__,
        })
        return cls(detector, classifier, segmenter, model, thresholds, config.sharpen_ratio, digest)

    @property
    def backend_names(self):
        return {"detections": self.detector.name, "probs": self.classifier.name, "masks": self.segmenter.name,
                "model": self.model.training_fingerprint if self.model is not None else None}

    def close(self):
        for backend in (self.classifier, self.segmenter):
            if hasattr(backend, "close"):
                backend.close()

    def _knee_sides(self, img, pair):
        knees = pair.knees()
        if len(knees) == 2:
            return list(zip(knees, ("left", "right")))
        if img.laterality == "bilateral":
            side = "left" if knees[0].center[0] < img.width / 2.0 else "right"
            return [(knees[0], side)]
        return [(knees[0], "single")]

    def grade_knee(self, img, detection, knee_side):
        """ Runs ROI extraction through fusion for one knee; stops at the first failing stage. """

        result = KneeResult(knee_side, detection)
        source_id = img.source_id
        try:
            roi = extract_roi(img, detection.center)
            result = dataclasses.replace(result, roi=roi)
            probs = classify(self.classifier, roi, source_id, knee_side)
            result = dataclasses.replace(result, probabilities=probs)

            gamma = gamma_for_patch(roi)
            enhanced = enhance(roi, self.sharpen_ratio)
            masks = segment(self.segmenter, enhanced, source_id, knee_side)
            result = dataclasses.replace(result, gamma=gamma, masks=masks)

            lowest = find_lowest_points(masks, roi.joint_center_in_patch[0])
            measurement = measure_jsd(masks, lowest, img.laterality, knee_side)
            jsn = grade_knee(measurement, self.thresholds)
            result = dataclasses.replace(result, measurement=measurement, jsn=jsn)

            fv = assemble_features(probs, measurement)
            assessment = predict(self.model, fv)
            provenance = {**assessment.provenance, "backends": self.backend_names,
                          "measurement": measurement.summary()}
            assessment = dataclasses.replace(assessment, jsn=jsn, provenance=provenance)
            return dataclasses.replace(result, assessment=assessment)
        except KneeGradingError as err:
            logger.warning("Knee %s/%s failed at stage %s: %s", source_id, knee_side, err.stage, err)
            return dataclasses.replace(result, failure=failure_record(err))

    def grade(self, img):
        """ Grades one normalized study; a failing knee never stops the other. """

        try:
            pair = select_knees(self.detector.detect(img))
        except KneeGradingError as err:
            logger.warning("Detection failed for %s: %s", img.source_id, err)
            return StudyReport(img.source_id, img.laterality, (), self.backend_names, self.config_digest,
                               degenerate_window=img.degenerate_window, errors=(failure_record(err),))
        results = tuple(self.grade_knee(img, det, side) for det, side in self._knee_sides(img, pair))
        logger.info("Graded %s: %d of %d knee(s)", img.source_id, sum(r.graded for r in results), len(results))
        return StudyReport(img.source_id, img.laterality, results, self.backend_names, self.config_digest,
                           single_knee_flag=pair.single_knee_flag, degenerate_window=img.degenerate_window)
