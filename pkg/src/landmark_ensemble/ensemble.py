"""Averaging fusion of the three branch distributions and the rejection gate.

Prediction record wire format (one line per image, tab-separated):

    image_id  decision  confidence  p1,p2,...,pC  branch:gbvs_head=...  branch:knn=...  branch:rf=...

Decision is a class name or ``REJECT``; probabilities use full-precision
repr so files round-trip exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "REJECT",
    "BRANCH_NAMES",
    "PredictionRecord",
    "average_ensemble",
    "decide",
    "make_record",
    "write_prediction_records",
    "read_prediction_records",
]

REJECT = "REJECT"

# In-memory branch keys, and their tags in the record line format.
BRANCH_NAMES = ("gbvs_head", "knn", "random_forest")
_BRANCH_TAGS = {"gbvs_head": "gbvs_head", "knn": "knn", "random_forest": "rf"}
_TAG_TO_BRANCH = {v: k for k, v in _BRANCH_TAGS.items()}


def check_distribution(p, atol: float = 1e-9) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64).ravel()
    if p.size == 0:
        raise ValueError("empty distribution")
    if p.min() < 0.0:
        raise ValueError(f"negative probability {p.min()}")
    if abs(p.sum() - 1.0) > atol:
        raise ValueError(f"probabilities sum to {p.sum()}, not 1")
    return p


def average_ensemble(dists: list[np.ndarray]) -> np.ndarray:
    """Elementwise arithmetic mean; exact summation, so branch order is moot."""
    if not dists:
        raise ValueError("average_ensemble needs at least one distribution")
    arrays = [check_distribution(d) for d in dists]
    size = arrays[0].size
    if any(a.size != size for a in arrays):
        raise ValueError("distributions have mismatched class counts")
    k = len(arrays)
    return np.array([math.fsum(a[c] for a in arrays) / k for c in range(size)])


def decide(p: np.ndarray, reject_threshold: float = 0.0) -> int | None:
    """Argmax class index (lowest index wins ties), or None when the gate rejects."""
    p = check_distribution(p)
    if not (0.0 <= reject_threshold < 1.0):
        raise ValueError("reject_threshold must lie in [0, 1)")
    best = int(np.argmax(p))
    if p[best] >= reject_threshold:
        return best
    return None


@dataclass(frozen=True)
class PredictionRecord:
    image_id: str
    branch_distributions: dict[str, np.ndarray]  # keys = BRANCH_NAMES
    ensemble: np.ndarray
    decision: str  # class name or REJECT
    confidence: float  # max ensemble probability

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, PredictionRecord)
            and self.image_id == other.image_id
            and self.decision == other.decision
            and self.confidence == other.confidence
            and np.array_equal(self.ensemble, other.ensemble)
            and set(self.branch_distributions) == set(other.branch_distributions)
            and all(
                np.array_equal(v, other.branch_distributions[k])
                for k, v in self.branch_distributions.items()
            )
        )


def make_record(
    image_id: str,
    branch_distributions: dict[str, np.ndarray],
    class_names: list[str],
    reject_threshold: float = 0.0,
) -> PredictionRecord:
    """Fuse the branches, apply the gate, and name the decision."""
    if set(branch_distributions) != set(BRANCH_NAMES):
        raise ValueError(
            f"expected branches {sorted(BRANCH_NAMES)}, got {sorted(branch_distributions)}"
        )
    fused = average_ensemble([branch_distributions[name] for name in BRANCH_NAMES])
    if fused.size != len(class_names):
        raise ValueError(f"{len(class_names)} class names for {fused.size} probabilities")
    choice = decide(fused, reject_threshold)
    return PredictionRecord(
        image_id=image_id,
        branch_distributions={k: np.asarray(v, dtype=np.float64) for k, v in branch_distributions.items()},
        ensemble=fused,
        decision=REJECT if choice is None else class_names[choice],
        confidence=float(fused.max()),
    )


def _fmt_probs(p: np.ndarray) -> str:
    return ",".join(repr(float(v)) for v in p)


def write_prediction_records(path, records: list[PredictionRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            branches = "\t".join(
                f"branch:{_BRANCH_TAGS[name]}={_fmt_probs(r.branch_distributions[name])}"
                for name in BRANCH_NAMES
            )
            fh.write(
                f"{r.image_id}\t{r.decision}\t{r.confidence!r}\t{_fmt_probs(r.ensemble)}\t{branches}\n"
            )


def read_prediction_records(path) -> list[PredictionRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4 + len(BRANCH_NAMES):
                raise ValueError(f"{path}:{lineno}: expected {4 + len(BRANCH_NAMES)} fields")
            image_id, decision, confidence, ens = parts[:4]
            branches = {}
            for chunk in parts[4:]:
                if not chunk.startswith("branch:") or "=" not in chunk:
                    raise ValueError(f"{path}:{lineno}: malformed branch field {chunk!r}")
                tag, values = chunk[len("branch:") :].split("=", 1)
                branches[_TAG_TO_BRANCH[tag]] = np.array(
                    [float(v) for v in values.split(",")]
                )
            records.append(
                PredictionRecord(
                    image_id=image_id,
                    branch_distributions=branches,
                    ensemble=np.array([float(v) for v in ens.split(",")]),
                    decision=decision,
                    confidence=float(confidence),
                )
            )
    return records
