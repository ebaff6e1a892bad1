""" Seeded synthetic feature sets (p0..p4, med_px, lat_px) for exercising the fusion forest. """
import numpy as np

from fuse import N_CLASSES
from jsd import ThresholdSet, grade_jsn

RULE_MAX_MED_PX = 35.0
RULE_MAX_P4 = 0.9


def rule_label(med_px, p4):
    """ KL = JSN grade of the medial distance (published boundaries), one grade higher when p4 > 0.5. """

    boundaries = ThresholdSet.standard().med_boundaries
    return min(N_CLASSES - 1, grade_jsn(med_px, boundaries) + int(p4 > 0.5))


def rule_dataset(n, seed=0):
    """ Vectors whose label follows `rule_label` exactly. """

    rng = np.random.default_rng(seed)
    p4 = rng.uniform(0.0, RULE_MAX_P4, size=n)
    rest = rng.dirichlet(np.ones(N_CLASSES - 1), size=n) * (1.0 - p4)[:, None]
    probs = np.column_stack([rest, p4])
    med = rng.uniform(0.0, RULE_MAX_MED_PX, size=n)
    lat = rng.uniform(0.0, RULE_MAX_MED_PX, size=n)
    X = np.column_stack([probs, med, lat])
    y = np.array([rule_label(m, p) for m, p in zip(med, p4)], dtype=np.int64)
    return X, y


def _softmax(logits):
    shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


def two_signal_task(n_train=5000, n_test=2000, seed=0, prob_margin=1.6, distance_sd=3.5):
    """ Grades seen through two independently noisy signals.

    The probability block is softmax(margin * onehot(grade) + N(0, 1)); the
    medial and lateral distances shrink with the grade (26 - 4.5 g and
    24 - 3 g pixels) under N(0, distance_sd) noise, clipped at zero.

    Returns
    -------
    X_train, y_train, X_test, y_test
    """

    rng = np.random.default_rng(seed)
    n = n_train + n_test
    grades = rng.integers(0, N_CLASSES, size=n)
    logits = prob_margin * np.eye(N_CLASSES)[grades] + rng.normal(0.0, 1.0, size=(n, N_CLASSES))
    probs = _softmax(logits)
    med = np.clip(26.0 - 4.5 * grades + rng.normal(0.0, distance_sd, size=n), 0.0, None)
    lat = np.clip(24.0 - 3.0 * grades + rng.normal(0.0, distance_sd, size=n), 0.0, None)
    X = np.column_stack([probs, med, lat])
    return X[:n_train], grades[:n_train], X[n_train:], grades[n_train:]
