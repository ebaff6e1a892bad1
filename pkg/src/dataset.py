""" Tabular inputs of the batch commands, read and written with pandas. """
import io
import logging

import numpy as np
import pandas as pd

from exceptions import CalibrationError, EvaluationError, ForestError
from fuse import FEATURE_NAMES
from utilities import write_atomic

logger = logging.getLogger(__name__)

LABEL_COLUMN = "kl"
CASE_COLUMN = "case_id"


def _read_csv(path, error_cls):
    try:
        return pd.read_csv(path)
    except (OSError, ValueError, pd.errors.ParserError) as err:
        raise error_cls(f"cannot read table {path}: {err}") from err


def _require(frame, columns, path, error_cls):
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise error_cls(f"table {path} lacks column(s) {', '.join(missing)}")


def read_training_table(path):
    """ Loads the fusion training set.

    Parameters
    ----------
    path : <class 'str'>
        CSV with columns p0..p4, med_px, lat_px and the integer KL label `kl`

    Returns
    -------
    The [n, 7] feature matrix and the label vector
    """

    frame = _read_csv(path, ForestError)
    _require(frame, list(FEATURE_NAMES) + [LABEL_COLUMN], path, ForestError)
    if frame[list(FEATURE_NAMES) + [LABEL_COLUMN]].isna().any().any():
        raise ForestError(f"table {path} has empty cells")
    labels = frame[LABEL_COLUMN].to_numpy()
    if not np.all(np.equal(np.mod(labels, 1), 0)):
        raise ForestError(f"labels in {path} must be integers")
    logger.info("Read %d training rows from %s", len(frame), path)
    return frame[list(FEATURE_NAMES)].to_numpy(dtype=np.float64), labels.astype(np.int64)


def write_training_table(X, y, path):
    frame = pd.DataFrame(np.asarray(X, dtype=np.float64), columns=list(FEATURE_NAMES))
    frame[LABEL_COLUMN] = np.asarray(y, dtype=np.int64)
    buffer = io.StringIO()
    frame.to_csv(buffer, index=False)
    write_atomic(path, buffer.getvalue())


def read_measurements(path):
    """ [n, 2] (med_px, lat_px) distances; other columns are ignored. """

    frame = _read_csv(path, CalibrationError)
    _require(frame, ["med_px", "lat_px"], path, CalibrationError)
    values = frame[["med_px", "lat_px"]].dropna()
    if len(values) < len(frame):
        logger.warning("Dropped %d measurement rows with empty cells", len(frame) - len(values))
    return values.to_numpy(dtype=np.float64)


def read_grades(path):
    """ {case_id: kl} from a predictions or labels table. """

    frame = _read_csv(path, EvaluationError)
    _require(frame, [CASE_COLUMN, LABEL_COLUMN], path, EvaluationError)
    if frame[CASE_COLUMN].duplicated().any():
        raise EvaluationError(f"table {path} repeats case ids")
    return dict(zip(frame[CASE_COLUMN].astype(str), frame[LABEL_COLUMN].astype(int)))


def read_ratings(path):
    """ {rater: {case_id: grade}} from a table with a case_id column and one column per rater. """

    frame = _read_csv(path, EvaluationError)
    _require(frame, [CASE_COLUMN], path, EvaluationError)
    raters = [c for c in frame.columns if c != CASE_COLUMN]
    if not raters:
        raise EvaluationError(f"table {path} has no rater columns")
    cases = frame[CASE_COLUMN].astype(str)
    if frame[raters].isna().any().any():
        raise EvaluationError(f"table {path} has unrated cases")
    return {str(r): dict(zip(cases, frame[r].astype(int))) for r in raters}


def align_cases(predictions, labels):
    """ Predictions and labels over the shared case ids (sorted); any unmatched id is an error. """

    if set(predictions) != set(labels):
        unmatched = sorted(set(predictions) ^ set(labels))
        raise EvaluationError(f"{len(unmatched)} unmatched case id(s), e.g. {unmatched[:5]}")
    cases = sorted(labels)
    return cases, [predictions[c] for c in cases], [labels[c] for c in cases]
