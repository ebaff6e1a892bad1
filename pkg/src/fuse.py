""" Decision fusion: the 7-element feature vector and the random-forest committee.

(dataset, params, master_seed) fully determine a trained model, and a saved
model document reproduces its predictions bit for bit.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from exceptions import ForestError, ModelFormatError
from jsd import calibrate_thresholds, grade_jsn
from utilities import sha256_hex

logger = logging.getLogger(__name__)

FEATURE_NAMES = ("p0", "p1", "p2", "p3", "p4", "med_px", "lat_px")
FEATURE_UNITS = {"p0": "probability", "p1": "probability", "p2": "probability", "p3": "probability",
                 "p4": "probability", "med_px": "px@0.2mm", "lat_px": "px@0.2mm"}
N_FEATURES = len(FEATURE_NAMES)
N_CLASSES = 5
MIN_TRAINING_SAMPLES = 10
MODEL_FORMAT = "knee-kl-forest"
MODEL_VERSION = 1


@dataclass(frozen=True)
class FeatureVector:
    """ (p0..p4, med_px, lat_px): classifier probabilities followed by the two distances. """

    values: tuple

    def __post_init__(self):
        values = tuple(float(v) for v in self.values)
        if len(values) != N_FEATURES:
            raise ForestError(f"feature vector needs {N_FEATURES} values, got {len(values)}")
        if not all(math.isfinite(v) for v in values):
            raise ForestError(f"feature vector has non-finite values: {values}")
        probs = values[:N_CLASSES]
        if min(probs) < 0 or abs(sum(probs) - 1.0) > 1e-6:
            raise ForestError(f"probability block must be non-negative and sum to 1: {probs}")
        if values[5] < 0 or values[6] < 0:
            raise ForestError(f"joint space distances must be non-negative: {values[5:]}")
        object.__setattr__(self, "values", values)

    def as_array(self):
        return np.asarray(self.values, dtype=np.float64)


def assemble_features(p, jsd):
    """ Concatenates the probability vector and the medial/lateral distances in pixels. """

    return FeatureVector(tuple(p.p) + (jsd.med_px, jsd.lat_px))


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: int = 8
    min_leaf: int = 2
    features_per_split: int = 2
    master_seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ForestError(f"n_trees must be at least 1, got {self.n_trees}")
        if self.max_depth < 1:
            raise ForestError(f"max_depth must be at least 1, got {self.max_depth}")
        if self.min_leaf < 1:
            raise ForestError(f"min_leaf must be at least 1, got {self.min_leaf}")
        if not 1 <= self.features_per_split <= N_FEATURES:
            raise ForestError(f"features_per_split must be in 1..{N_FEATURES}, got {self.features_per_split}")


@dataclass(frozen=True, eq=False)
class DecisionTree:
    """ Array-backed binary tree.

    Attributes
    ----------
    feature : <class 'numpy.ndarray'>
        split feature index per node, -1 for leaves
    threshold : <class 'numpy.ndarray'>
        split threshold per node; samples with value <= threshold go left
    left, right : <class 'numpy.ndarray'>
        child node indices, -1 for leaves
    counts : <class 'numpy.ndarray'>
        [n_nodes, 5] bootstrap class counts reaching each node
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray

    @property
    def n_nodes(self):
        return int(self.feature.size)

    def depths(self):
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for node in range(self.n_nodes):
            if self.feature[node] >= 0:
                depth[self.left[node]] = depth[node] + 1
                depth[self.right[node]] = depth[node] + 1
        return depth

    def leaves(self):
        return np.flatnonzero(self.feature < 0)

    def apply(self, X):
        """ Leaf index reached by every row of X. """

        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            feature = self.feature[node]
            internal = feature >= 0
            if not internal.any():
                return node
            go_left = X[rows, np.maximum(feature, 0)] <= self.threshold[node]
            node = np.where(internal, np.where(go_left, self.left[node], self.right[node]), node)

    def predict(self, X):
        """ Majority class of the reached leaf (lower grade on ties). """

        return np.argmax(self.counts[self.apply(X)], axis=1)


@dataclass(frozen=True, eq=False)
class RandomForestModel:
    trees: tuple
    params: ForestParams
    training_fingerprint: str = ""

    def __post_init__(self):
        if self.trees and len(self.trees) != self.params.n_trees:
            raise ForestError(f"model holds {len(self.trees)} trees, params say {self.params.n_trees}")


@dataclass(frozen=True)
class KlAssessment:
    """ Final KL grade of one knee with the committee's vote distribution. """

    kl_grade: int
    vote_distribution: tuple
    inputs: FeatureVector
    jsn: Optional[object] = None
    provenance: dict = field(default_factory=dict)


def _canonical_order(X, y):
    keys = [y] + [X[:, j] for j in reversed(range(X.shape[1]))]
    return np.lexsort(keys)


def training_fingerprint(X, y):
    """ Content hash of a training set, independent of its row order. """

    order = _canonical_order(X, y)
    payload = np.ascontiguousarray(X[order], dtype="<f8").tobytes() + np.ascontiguousarray(y[order], dtype="<i8").tobytes()
    return sha256_hex(payload)


def _best_split(Xn, yn, features, min_leaf):
    """ Lowest weighted Gini split over the sampled features, or None. """

    n = yn.size
    onehot = np.eye(N_CLASSES)[yn]
    total = onehot.sum(axis=0)
    n_left = np.arange(1, n, dtype=np.float64)
    n_right = n - n_left
    best_score, best = np.inf, None
    for f in sorted(features):
        order = np.argsort(Xn[:, f], kind="stable")
        xs = Xn[order, f]
        valid = (xs[1:] > xs[:-1]) & (n_left >= min_leaf) & (n_right >= min_leaf)
        if not valid.any():
            continue
        left_counts = np.cumsum(onehot[order], axis=0)[:-1]
        right_counts = total - left_counts
        gini_left = 1.0 - np.sum((left_counts / n_left[:, None]) ** 2, axis=1)
        gini_right = 1.0 - np.sum((right_counts / n_right[:, None]) ** 2, axis=1)
        score = np.where(valid, (n_left * gini_left + n_right * gini_right) / n, np.inf)
        i = int(np.argmin(score))
        if score[i] < best_score:
            threshold = (xs[i] + xs[i + 1]) / 2.0
            if threshold >= xs[i + 1]:
                threshold = xs[i]
            best_score, best = score[i], (int(f), float(threshold))
    return best


def _grow_tree(X, y, params, tree_index):
    rng = np.random.default_rng([params.master_seed, tree_index])
    sample = rng.integers(0, y.size, size=y.size)
    Xb, yb = X[sample], y[sample]
    feature, threshold, left, right, counts = [], [], [], [], []

    def build(idx, depth):
        node = len(feature)
        node_counts = np.bincount(yb[idx], minlength=N_CLASSES)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts.append(node_counts)
        if depth >= params.max_depth or np.count_nonzero(node_counts) <= 1 or idx.size < 2 * params.min_leaf:
            return node
        candidates = rng.choice(N_FEATURES, size=params.features_per_split, replace=False)
        split = _best_split(Xb[idx], yb[idx], candidates, params.min_leaf)
        if split is None:
            return node
        f, thr = split
        goes_left = Xb[idx, f] <= thr
        feature[node], threshold[node] = f, thr
        left[node] = build(idx[goes_left], depth + 1)
        right[node] = build(idx[~goes_left], depth + 1)
        return node

    build(np.arange(yb.size), 0)
    return DecisionTree(np.asarray(feature, dtype=np.int64), np.asarray(threshold, dtype=np.float64),
                        np.asarray(left, dtype=np.int64), np.asarray(right, dtype=np.int64),
                        np.asarray(counts, dtype=np.int64))


def fit_forest(X, y, params=None, n_jobs=1):
    """ Trains the committee on a feature matrix and integer labels.

    Rows are put in a canonical order first, so the model does not depend on
    the order of the dataset; each tree draws its bootstrap sample and feature
    subsets from a seed derived from (master_seed, tree index).
    """

    params = params or ForestParams()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[1] != N_FEATURES or y.shape != (X.shape[0],):
        raise ForestError(f"expected an [n, {N_FEATURES}] matrix and n labels, got {X.shape} and {y.shape}")
    if y.size < MIN_TRAINING_SAMPLES:
        raise ForestError(f"need at least {MIN_TRAINING_SAMPLES} training samples, got {y.size}")
    if y.min() < 0 or y.max() >= N_CLASSES:
        raise ForestError(f"labels must be KL grades 0-{N_CLASSES - 1}")
    if not np.all(np.isfinite(X)):
        raise ForestError("training features must be finite")
    if np.unique(y).size == 1:
        logger.warning("Training set holds a single class; the forest will be constant")

    order = _canonical_order(X, y)
    X, y = X[order], y[order]
    fingerprint = training_fingerprint(X, y)

    def grow(tree_index):
        return _grow_tree(X, y, params, tree_index)

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            trees = tuple(pool.map(grow, range(params.n_trees)))
    else:
        trees = tuple(grow(i) for i in range(params.n_trees))
    logger.info("Trained %d trees on %d samples (fingerprint %s)", params.n_trees, y.size, fingerprint[:12])
    return RandomForestModel(trees, params, fingerprint)


def train_forest(dataset, params=None, n_jobs=1):
    """ Trains on a list of (FeatureVector, kl_label) pairs. """

    dataset = list(dataset)
    if len(dataset) < MIN_TRAINING_SAMPLES:
        raise ForestError(f"need at least {MIN_TRAINING_SAMPLES} training samples, got {len(dataset)}")
    X = np.stack([fv.as_array() for fv, _ in dataset])
    y = np.asarray([int(label) for _, label in dataset], dtype=np.int64)
    return fit_forest(X, y, params, n_jobs)


def _check_trained(model):
    if model is None or not model.trees:
        raise ForestError("the fusion model has not been trained")


def vote_counts(model, X):
    """ [n, 5] number of trees voting for each grade. """

    _check_trained(model)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    votes = np.zeros((X.shape[0], N_CLASSES), dtype=np.int64)
    rows = np.arange(X.shape[0])
    for tree in model.trees:
        np.add.at(votes, (rows, tree.predict(X)), 1)
    return votes


def predict_grades(model, X):
    """ Committee grade for every row of X (lower grade on tied votes). """

    return np.argmax(vote_counts(model, X), axis=1)


def predict(model, fv):
    """ Committee vote for one feature vector. """

    votes = vote_counts(model, fv.as_array())[0]
    distribution = tuple(float(v) for v in votes / votes.sum())
    return KlAssessment(int(np.argmax(votes)), distribution, fv,
                        provenance={"model_fingerprint": model.training_fingerprint})


def audit_forest(model):
    """ Structural audit: deepest node and smallest leaf over all trees. """

    _check_trained(model)
    max_depth = max(int(tree.depths().max()) for tree in model.trees)
    leaf_sizes = [int(tree.counts[leaf].sum()) for tree in model.trees for leaf in tree.leaves()]
    return {"n_trees": len(model.trees), "max_depth": max_depth,
            "min_leaf_samples": min(leaf_sizes), "n_leaves": len(leaf_sizes)}


def save_model(model):
    """ Serializes a trained model to a versioned JSON document (bytes). """

    _check_trained(model)
    document = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "params": asdict(model.params),
        "training_fingerprint": model.training_fingerprint,
        "feature_names": list(FEATURE_NAMES),
        "feature_units": FEATURE_UNITS,
        "trees": [
            {
                "seed": [model.params.master_seed, index],
                "feature": tree.feature.tolist(),
                "threshold": tree.threshold.tolist(),
                "left": tree.left.tolist(),
                "right": tree.right.tolist(),
                "counts": tree.counts.tolist(),
            }
            for index, tree in enumerate(model.trees)
        ],
    }
    return json.dumps(document, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _load_tree(entry, params):
    try:
        feature = np.asarray(entry["feature"], dtype=np.int64)
        threshold = np.asarray(entry["threshold"], dtype=np.float64)
        left = np.asarray(entry["left"], dtype=np.int64)
        right = np.asarray(entry["right"], dtype=np.int64)
        counts = np.asarray(entry["counts"], dtype=np.int64)
    except (KeyError, TypeError, ValueError) as err:
        raise ModelFormatError(f"corrupted tree entry: {err}") from err
    n = feature.size
    if n == 0 or any(a.shape != (n,) for a in (feature, threshold, left, right)) or counts.shape != (n, N_CLASSES):
        raise ModelFormatError("tree node arrays have inconsistent lengths")
    internal = feature >= 0
    nodes = np.arange(n)
    if np.any(feature >= N_FEATURES) or np.any(counts < 0) or not np.all(np.isfinite(threshold)):
        raise ModelFormatError("tree node values out of range")
    if np.any(internal & ((left <= nodes) | (right <= nodes) | (left >= n) | (right >= n))):
        raise ModelFormatError("tree child indices are invalid")
    if np.any(~internal & ((left != -1) | (right != -1))):
        raise ModelFormatError("leaf nodes must not have children")
    tree = DecisionTree(feature, threshold, left, right, counts)
    if tree.depths().max() > params.max_depth:
        raise ModelFormatError("tree deeper than the recorded max_depth")
    return tree


def load_model(data):
    """ Inverse of `save_model`; rejects unknown versions and corrupted node arrays. """

    try:
        document = json.loads(data)
    except (ValueError, UnicodeDecodeError) as err:
        raise ModelFormatError(f"model document is not valid JSON: {err}") from err
    if not isinstance(document, dict) or document.get("format") != MODEL_FORMAT:
        raise ModelFormatError("not a fusion model document")
    if document.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {document.get('version')!r}")
    try:
        params = ForestParams(**document["params"])
        trees = tuple(_load_tree(entry, params) for entry in document["trees"])
        model = RandomForestModel(trees, params, str(document["training_fingerprint"]))
    except ModelFormatError:
        raise
    except (KeyError, TypeError, ForestError) as err:
        raise ModelFormatError(f"corrupted model document: {err}") from err
    if not model.trees:
        raise ModelFormatError("model document holds no trees")
    return model


def model_hash(model):
    return sha256_hex(save_model(model))


def argmax_baseline(X):
    """ Classifier-only baseline: the most probable grade of the probability block. """

    return np.argmax(np.atleast_2d(X)[:, :N_CLASSES], axis=1)


class JsnOnlyBaseline:
    """ Distance-only baseline: majority KL grade of each (medial, lateral) JSN cell.

    Methods
    -------
    fit():
        Calibrates thresholds if none are given and tabulates the cells.
    predict():
        Grades each row from its cell (overall majority for unseen cells).
    """

    def __init__(self, thresholds=None):
        self.thresholds = thresholds
        self.table = None
        self.fallback = 0

    def _cells(self, X):
        X = np.atleast_2d(X)
        med = [grade_jsn(v, self.thresholds.med_boundaries) for v in X[:, 5]]
        lat = [grade_jsn(v, self.thresholds.lat_boundaries) for v in X[:, 6]]
        return list(zip(med, lat))

    def fit(self, X, y):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        y = np.asarray(y, dtype=np.int64)
        if self.thresholds is None:
            self.thresholds = calibrate_thresholds(X[:, 5:7])
        tallies = {}
        for cell, label in zip(self._cells(X), y):
            tallies.setdefault(cell, np.zeros(N_CLASSES, dtype=np.int64))[label] += 1
        self.table = {cell: int(np.argmax(counts)) for cell, counts in tallies.items()}
        self.fallback = int(np.argmax(np.bincount(y, minlength=N_CLASSES)))
        return self

    def predict(self, X):
        return np.asarray([self.table.get(cell, self.fallback) for cell in self._cells(X)], dtype=np.int64)
