"""Python access to the vascular lesion classification core.

Images are H x W x C float arrays with values in [0, 1]. Functions that
produce structured results return parsed JSON.
"""

import json as _json

from . import _vasc
from ._vasc import (
    Classifier,
    PortableModel,
    VascError,
    auc,
    auc_ci,
    augment,
    class_ids,
    generate_surrogate,
    macro_average,
    normalize_label,
    pairwise_auc,
    read_image,
    resolve_label,
    roc_curve,
    tsne,
    weighted_f1,
    write_image,
    youden_threshold,
)

__all__ = [
    "Classifier", "PortableModel", "StudyService", "VascError", "auc", "auc_ci", "augment",
    "bench", "class_ids", "default_config", "evaluate_predictions", "generate_surrogate",
    "macro_average", "normalize_label", "pairwise_auc", "read_image", "resolve_label",
    "roc_curve", "split", "tsne", "validate_config", "weighted_f1", "write_image",
    "youden_threshold",
]


def default_config(seed=2024):
    return _json.loads(_vasc.default_config(seed))


def validate_config(config):
    """Returns the normalized configuration. Raises VascError listing every violation."""
    text = config if isinstance(config, str) else _json.dumps(config)
    return _json.loads(_vasc.validate_config(text))


def split(manifest, seed=2024, folds=10, per_class_cv_cap=1000):
    return _json.loads(_vasc.split(str(manifest), seed, folds, per_class_cv_cap))


def evaluate_predictions(predictions_tsv, n_boot=2000, seed=0):
    return _json.loads(_vasc.evaluate_predictions(predictions_tsv, n_boot, seed))


def bench(model, runs=100, warmup=10):
    return _json.loads(model.bench(runs, warmup))


class StudyService:
    """In-process reader study. Mirrors the HTTP API one call per route."""

    def __init__(self, items_json, classes, log_dir, seed=0):
        self._svc = _vasc.StudyService(items_json, classes, str(log_dir), seed)

    def create_session(self, reader_id):
        return _json.loads(self._svc.create_session(reader_id))

    def next_item(self, session_id):
        return _json.loads(self._svc.next_item(session_id))

    def submit(self, session_id, item_id, chosen_class_id):
        return _json.loads(self._svc.submit(session_id, item_id, chosen_class_id))

    def status(self, session_id):
        return _json.loads(self._svc.status(session_id))

    def report(self):
        return _json.loads(self._svc.report())
