from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Metrics:
    accuracy: float
    confusion: np.ndarray  # [true, predicted]
    per_location: dict[str, float] = field(default_factory=dict)

    @property
    def segments(self) -> int:
        return int(self.confusion.sum())

    def summary(self) -> str:
        parts = [f"acc={self.accuracy:.4f}"]
        parts += [f"acc[{loc}]={acc:.4f}" for loc, acc in self.per_location.items()]
        return " ".join(parts)


def segment_metrics(predicted: np.ndarray, labels: np.ndarray, locations=None, num_classes: int = 8) -> Metrics:
    """Score every one-second decision against its own label."""
    predicted = np.asarray(predicted)
    labels = np.asarray(labels)
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels.ravel(), predicted.ravel()), 1)
    total = confusion.sum()
    accuracy = float(np.trace(confusion) / total) if total else float("nan")
    per_location = {}
    if locations is not None:
        locations = np.asarray(locations)
        for loc in dict.fromkeys(locations.tolist()):
            sel = locations == loc
            per_location[str(loc)] = float((predicted[sel] == labels[sel]).mean())
    return Metrics(accuracy, confusion, per_location)
