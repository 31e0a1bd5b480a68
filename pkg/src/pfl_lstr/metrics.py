"""Per-sequence evaluation: confusion matrix, per-class precision, false-positive rate."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .memory import MemoryConfig, stream
from .synth import LK_SOP, ClientDataset

N_CLASSES = 3


@dataclass(frozen=True)
class MetricsReport:
    confusion: tuple  # rows true class, columns predicted class
    fp_total: int  # LK_with_SOP sequences in the test set
    fp_hits: int  # of those, predicted as a lane change

    @property
    def n(self) -> int:
        return int(sum(sum(r) for r in self.confusion))

    def precision_exact(self) -> list:
        out = []
        for c in range(N_CLASSES):
            predicted = sum(self.confusion[r][c] for r in range(N_CLASSES))
            out.append(Fraction(self.confusion[c][c], predicted) if predicted else None)
        return out

    @property
    def precision(self) -> list:
        """TP / (TP + FP) per class; ``None`` for a class never predicted."""
        return [None if p is None else float(p) for p in self.precision_exact()]

    @property
    def fp_rate(self) -> float | None:
        return self.fp_hits / self.fp_total if self.fp_total else None

    @property
    def macro_precision(self) -> float | None:
        defined = [p for p in self.precision if p is not None]
        return float(np.mean(defined)) if defined else None

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "confusion": [list(r) for r in self.confusion],
            "precision": self.precision,
            "fp_rate": self.fp_rate,
            "macro_precision": self.macro_precision,
        }


def report_from_predictions(labels, predictions, scenarios=None) -> MetricsReport:
    labels = [int(x) for x in labels]
    predictions = [int(x) for x in predictions]
    if len(labels) != len(predictions):
        raise ValueError("labels and predictions differ in length")
    conf = [[0] * N_CLASSES for _ in range(N_CLASSES)]
    for y, p in zip(labels, predictions):
        conf[y][p] += 1
    fp_total = fp_hits = 0
    if scenarios is not None:
        for s, p in zip(scenarios, predictions):
            if s == LK_SOP:
                fp_total += 1
                fp_hits += p != 0
    return MetricsReport(tuple(tuple(r) for r in conf), fp_total, fp_hits)


def evaluate(model, test, mem_cfg: MemoryConfig, model_cfg=None) -> MetricsReport:
    """Stream each test sequence through a fresh memory and predict at its final frame.

    ``model`` is either a parameter mapping (``PersonalizedModel`` or
    ``ParamSet``; needs ``model_cfg``) or a callable ``MemoryState -> label``.
    ``test`` is a ``ClientDataset`` (its test split) or a list of sequences.
    """
    from .lstr import batch_from_states, predict_batch

    sequences = test.test if isinstance(test, ClientDataset) else list(test)
    if not sequences:
        raise ValueError("evaluate: empty test set")
    states = [stream(s.frames, mem_cfg) for s in sequences]
    if callable(model):
        preds = [model(m) for m in states]
    else:
        if model_cfg is None:
            raise ValueError("evaluate: model_cfg required for parameter models")
        params = getattr(model, "params", model)
        preds = predict_batch(params, model_cfg, batch_from_states(states)).tolist()
    return report_from_predictions(
        [s.label for s in sequences], preds, [s.scenario for s in sequences]
    )
