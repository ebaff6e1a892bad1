import logging

import numpy as np

from dataset import read_training_table
from exceptions import ForestError
from fuse import (ForestParams, JsnOnlyBaseline, argmax_baseline, audit_forest, fit_forest, model_hash,
                  predict_grades, save_model)
from utilities import write_atomic

logger = logging.getLogger(__name__)


def holdout_split(n, fraction, seed):
    """ Seeded (train, test) index split; an empty test set when fraction is 0. """

    if not 0.0 <= fraction < 1.0:
        raise ForestError(f"holdout fraction {fraction} outside [0, 1)")
    order = np.random.default_rng(seed).permutation(n)
    n_test = int(round(n * fraction))
    return np.sort(order[n_test:]), np.sort(order[:n_test])


def compare_with_baselines(model, X_train, y_train, X_test, y_test):
    """ Held-out accuracy of the forest, the classifier-only argmax and the JSN-only lookup. """

    jsn_only = JsnOnlyBaseline().fit(X_train, y_train)
    return {
        "forest": float(np.mean(predict_grades(model, X_test) == y_test)),
        "argmax": float(np.mean(argmax_baseline(X_test) == y_test)),
        "jsn_only": float(np.mean(jsn_only.predict(X_test) == y_test)),
    }


def train_fusion(args):
    """ Trains the fusion forest on a feature table and writes the model document.

    Parameters
    ----------
    args : <class 'argparse.Namespace'>
        training arguments parsed in main (input, out, seed, n_trees, max_depth,
        min_leaf, features_per_split, holdout, workers)

    Returns
    -------
    Dictionary with the training accuracy, structural audit, model hash and
    (when a holdout fraction is given) the baseline comparison
    """

    X, y = read_training_table(args.input)
    params = ForestParams(n_trees=args.n_trees, max_depth=args.max_depth, min_leaf=args.min_leaf,
                          features_per_split=args.features_per_split, master_seed=args.seed)
    train_idx, test_idx = holdout_split(len(y), args.holdout, args.seed)
    model = fit_forest(X[train_idx], y[train_idx], params, n_jobs=args.workers)

    data = save_model(model)
    write_atomic(args.out, data)
    summary = {
        "training_accuracy": float(np.mean(predict_grades(model, X[train_idx]) == y[train_idx])),
        "audit": audit_forest(model),
        "model_hash": model_hash(model),
        "training_fingerprint": model.training_fingerprint,
    }
    print(f"training accuracy: {summary['training_accuracy']:.4f}")
    print(f"max depth: {summary['audit']['max_depth']}, min leaf samples: {summary['audit']['min_leaf_samples']}, "
          f"leaves: {summary['audit']['n_leaves']}")
    if test_idx.size:
        summary["holdout"] = compare_with_baselines(model, X[train_idx], y[train_idx], X[test_idx], y[test_idx])
        for name, accuracy in summary["holdout"].items():
            print(f"held-out accuracy ({name}): {accuracy:.4f}")
    print(f"model hash: {summary['model_hash']}")
    logger.info("Wrote model to %s", args.out)
    return summary
