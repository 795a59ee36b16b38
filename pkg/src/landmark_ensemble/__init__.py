"""Saliency-guided landmark image classification.

Pipeline pieces: graph-based saliency with top-k salient crops (gbvs,
imaging), embedding storage with stratified splits (embeddings), three
classifier branches (classifiers), averaging fusion with a confidence gate
(ensemble), and evaluation reports (evaluation). The ``landmark-ensemble``
CLI wires them into the full batch pipeline.
"""

from .classifiers import (
    AdamState,
    KnnClassifier,
    RandomForest,
    SoftmaxHead,
    predict_crop_batch,
    train_head,
)
from .embeddings import DatasetManifest, EmbeddingStore, split_dataset
from .ensemble import REJECT, PredictionRecord, average_ensemble, decide, make_record
from .evaluation import EvaluationReport, comparison_table, evaluate
from .gbvs import (
    GbvsConfig,
    SaliencyMap,
    SalientRegion,
    compute_saliency,
    extract_crops,
    top_k_regions,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "KnnClassifier",
    "RandomForest",
    "SoftmaxHead",
    "predict_crop_batch",
    "train_head",
    "DatasetManifest",
    "EmbeddingStore",
    "split_dataset",
    "REJECT",
    "PredictionRecord",
    "average_ensemble",
    "decide",
    "make_record",
    "EvaluationReport",
    "comparison_table",
    "evaluate",
    "GbvsConfig",
    "SaliencyMap",
    "SalientRegion",
    "compute_saliency",
    "extract_crops",
    "top_k_regions",
    "__version__",
]
