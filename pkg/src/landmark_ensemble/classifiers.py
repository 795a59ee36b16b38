"""The three prediction branches over embedding vectors.

kNN and a Gini random forest work directly on stored embeddings; a softmax
head with one ReLU hidden layer, trained with Adam, stands in for the
fine-tuned CNN branch and supports the two-stage schedule (whole images,
then salient crops). All three expose the sklearn estimator surface
(fit / predict_proba / predict / get_params) and deterministic training:
every random draw comes from a (seed, purpose, index) stream.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._rng import stream
from .embeddings import DatasetManifest, EmbeddingStore, join_embeddings
from .errors import FormatError

__all__ = [
    "KnnClassifier",
    "RandomForest",
    "DecisionTree",
    "SoftmaxHead",
    "AdamState",
    "train_head",
    "predict_crop_batch",
    "save_model",
    "load_model",
]


def _as_matrix(x, dim: int | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError(f"expected a vector or sample matrix, got shape {x.shape}")
    if dim is not None and x.shape[1] != dim:
        raise ValueError(f"feature dimension {x.shape[1]} != model dimension {dim}")
    return x


def _as_labels(y, n_classes: int | None) -> tuple[np.ndarray, int]:
    y = np.asarray(y, dtype=np.int64).ravel()
    if y.size == 0:
        raise ValueError("empty label vector")
    if y.min() < 0:
        raise ValueError("labels must be non-negative class indices")
    c = int(y.max()) + 1 if n_classes is None else int(n_classes)
    if y.max() >= c:
        raise ValueError(f"label {y.max()} out of range for {c} classes")
    return y, c


class KnnClassifier(BaseEstimator, ClassifierMixin):
    """Exact Euclidean k-nearest-neighbours vote.

    Distance ties are broken by the lower training-row index, so
    predictions are a pure function of (training data, k).
    """

    def __init__(self, k: int = 5, n_classes: int | None = None):
        self.k = k
        self.n_classes = n_classes

    def fit(self, X, y):
        X = _as_matrix(X)
        y, c = _as_labels(y, self.n_classes)
        if y.shape[0] != X.shape[0]:
            raise ValueError("X and y length mismatch")
        if not (1 <= self.k <= X.shape[0]):
            raise ValueError(f"k={self.k} must lie in [1, {X.shape[0]}]")
        self.X_ = X
        self.y_ = y
        self.n_classes_ = c
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "X_")
        q = _as_matrix(X, self.X_.shape[1])
        out = np.zeros((q.shape[0], self.n_classes_))
        # Chunked so the (queries x train x dim) difference cube stays small.
        chunk = max(1, int(4e6 // max(1, self.X_.size)))
        for start in range(0, q.shape[0], chunk):
            block = q[start : start + chunk]
            d2 = ((block[:, None, :] - self.X_[None, :, :]) ** 2).sum(axis=2)
            order = np.argsort(d2, axis=1, kind="stable")[:, : self.k]
            for row, neighbours in enumerate(order):
                counts = np.bincount(self.y_[neighbours], minlength=self.n_classes_)
                out[start + row] = counts / self.k
        return out if np.asarray(X).ndim == 2 else out[0]

    def predict(self, X) -> np.ndarray:
        probs = np.atleast_2d(self.predict_proba(X))
        return probs.argmax(axis=1)


@dataclass
class DecisionTree:
    """Flat-array binary tree; feature == -1 marks a leaf."""

    feature: np.ndarray  # int32, -1 at leaves
    threshold: np.ndarray  # float64
    left: np.ndarray  # int32 child index
    right: np.ndarray  # int32 child index
    leaf_dist: np.ndarray  # (n_nodes, C) float64; valid rows at leaves

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        node = 0
        while self.feature[node] >= 0:
            if x[self.feature[node]] <= self.threshold[node]:
                node = self.left[node]
            else:
                node = self.right[node]
        return self.leaf_dist[node]


def _gini_children(cum: np.ndarray, total: np.ndarray, pos: np.ndarray) -> np.ndarray:
    """Weighted child Gini impurity for every candidate boundary."""
    n = total.sum()
    left = cum[pos]
    left_n = (pos + 1).astype(np.float64)
    right = total[None, :] - left
    right_n = n - left_n
    gini_l = 1.0 - ((left / left_n[:, None]) ** 2).sum(axis=1)
    gini_r = 1.0 - ((right / right_n[:, None]) ** 2).sum(axis=1)
    return (left_n * gini_l + right_n * gini_r) / n


def _grow_tree(
    X: np.ndarray,
    y: np.ndarray,
    sample_idx: np.ndarray,
    n_classes: int,
    max_depth: int | None,
    features_per_split: int,
    rng: np.random.Generator,
) -> DecisionTree:
    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    dists: list[np.ndarray] = []
    n_features = X.shape[1]

    def new_node() -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        dists.append(np.zeros(n_classes))
        return len(feature) - 1

    root = new_node()
    # Depth-first, left child first, so stream consumption is a pure
    # function of the data and the tree seed.
    stack = [(root, sample_idx, 0)]
    while stack:
        node, idx, depth = stack.pop()
        counts = np.bincount(y[idx], minlength=n_classes).astype(np.float64)
        dists[node] = counts / counts.sum()
        pure = np.count_nonzero(counts) <= 1
        if pure or idx.size < 2 or (max_depth is not None and depth >= max_depth):
            continue
        candidates = rng.choice(n_features, size=min(features_per_split, n_features), replace=False)
        best = None  # (weighted_gini, feature, threshold, order, boundary)
        for f in candidates:
            v = X[idx, f]
            order = np.argsort(v, kind="stable")
            vs = v[order]
            boundaries = np.nonzero(vs[1:] > vs[:-1])[0]
            if boundaries.size == 0:
                continue
            onehot = np.zeros((idx.size, n_classes))
            onehot[np.arange(idx.size), y[idx][order]] = 1.0
            cum = np.cumsum(onehot, axis=0)
            total = counts
            weighted = _gini_children(cum, total, boundaries)
            j = int(np.argmin(weighted))
            if best is None or weighted[j] < best[0]:
                b = boundaries[j]
                best = (float(weighted[j]), int(f), (vs[b] + vs[b + 1]) / 2.0, order, b)
        if best is None:
            continue  # all candidate features constant within the node
        _, f, thr, order, b = best
        feature[node] = f
        threshold[node] = thr
        left_idx = idx[order[: b + 1]]
        right_idx = idx[order[b + 1 :]]
        left[node] = new_node()
        right[node] = new_node()
        stack.append((right[node], right_idx, depth + 1))
        stack.append((left[node], left_idx, depth + 1))

    return DecisionTree(
        feature=np.asarray(feature, dtype=np.int32),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int32),
        right=np.asarray(right, dtype=np.int32),
        leaf_dist=np.asarray(dists, dtype=np.float64),
    )


class RandomForest(BaseEstimator, ClassifierMixin):
    """Bagged Gini decision trees with per-tree derived random streams.

    Thresholds are midpoints between consecutive sorted unique feature
    values; recursion stops at pure nodes, max_depth, or < 2 samples.
    Predictions average the per-tree leaf distributions with exact
    summation, so tree order cannot change the result.
    """

    def __init__(
        self,
        n_trees: int = 100,
        max_depth: int | None = None,
        features_per_split: int | None = None,
        bootstrap: bool = True,
        seed: int = 0,
        n_classes: int | None = None,
    ):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.features_per_split = features_per_split
        self.bootstrap = bootstrap
        self.seed = seed
        self.n_classes = n_classes

    def fit(self, X, y):
        X = _as_matrix(X)
        y, c = _as_labels(y, self.n_classes)
        if y.shape[0] != X.shape[0]:
            raise ValueError("X and y length mismatch")
        if X.shape[0] < 2:
            raise ValueError("need at least 2 samples")
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        n, dim = X.shape
        fps = self.features_per_split or max(1, int(math.floor(math.sqrt(dim))))
        self.trees_ = []
        for i in range(self.n_trees):
            rng = stream(self.seed, "tree", i)
            idx = rng.integers(0, n, size=n) if self.bootstrap else np.arange(n)
            self.trees_.append(_grow_tree(X, y, idx, c, self.max_depth, fps, rng))
        self.n_classes_ = c
        self.dim_ = dim
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "trees_")
        q = _as_matrix(X, self.dim_)
        out = np.zeros((q.shape[0], self.n_classes_))
        for row, x in enumerate(q):
            per_tree = [t.predict_proba(x) for t in self.trees_]
            out[row] = [
                math.fsum(d[c] for d in per_tree) / len(per_tree)
                for c in range(self.n_classes_)
            ]
        return out if np.asarray(X).ndim == 2 else out[0]

    def predict(self, X) -> np.ndarray:
        probs = np.atleast_2d(self.predict_proba(X))
        return probs.argmax(axis=1)


class AdamState:
    """Bias-corrected Adam over a list of parameter arrays."""

    def __init__(
        self,
        shapes: list[tuple[int, ...]],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.t = 0
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        if len(params) != len(self.m) or len(grads) != len(self.m):
            raise ValueError("parameter/gradient count mismatch")
        for p, g, m in zip(params, grads, self.m):
            if p.shape != m.shape or g.shape != m.shape:
                raise ValueError(f"shape mismatch: {p.shape} vs {g.shape} vs {m.shape}")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g**2
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            out.append(p - self.lr * m_hat / (np.sqrt(v_hat) + self.epsilon))
        return out


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class SoftmaxHead(BaseEstimator, ClassifierMixin):
    """One ReLU hidden layer plus softmax readout, trained with Adam.

    The hidden weights are He-initialized from the seed stream; the readout
    starts at zero so the initial prediction is exactly uniform and the
    first epochs push logits only along the data signal. fit() starts a
    fresh run; fit_more() continues it (same Adam moments, next epoch
    streams), which is how the crop stage resumes from the whole-image
    stage.
    """

    def __init__(
        self,
        hidden: int = 256,
        n_classes: int | None = None,
        epochs: int = 7,
        batch_size: int = 32,
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
        seed: int = 0,
    ):
        self.hidden = hidden
        self.n_classes = n_classes
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.seed = seed

    def _params(self) -> list[np.ndarray]:
        return [self.W1_, self.b1_, self.W2_, self.b2_]

    def _set_params_list(self, params: list[np.ndarray]) -> None:
        self.W1_, self.b1_, self.W2_, self.b2_ = params

    def fit(self, X, y):
        X = _as_matrix(X)
        y, c = _as_labels(y, self.n_classes)
        if y.shape[0] != X.shape[0]:
            raise ValueError("X and y length mismatch")
        dim = X.shape[1]
        rng = stream(self.seed, "head-init", 0)
        self.W1_ = rng.normal(0.0, math.sqrt(2.0 / dim), size=(dim, self.hidden))
        self.b1_ = np.zeros(self.hidden)
        self.W2_ = np.zeros((self.hidden, c))
        self.b2_ = np.zeros(c)
        self.n_classes_ = c
        self.dim_ = dim
        self.epochs_done_ = 0
        self.adam_ = AdamState(
            [p.shape for p in self._params()],
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            epsilon=self.epsilon,
        )
        self._train(X, y, self.epochs)
        return self

    def fit_more(self, X, y, epochs: int | None = None):
        """Continue training on a new dataset (stage two of the schedule)."""
        check_is_fitted(self, "W1_")
        X = _as_matrix(X, self.dim_)
        y, _ = _as_labels(y, self.n_classes_)
        if y.shape[0] != X.shape[0]:
            raise ValueError("X and y length mismatch")
        self._train(X, y, self.epochs if epochs is None else epochs)
        return self

    def _train(self, X: np.ndarray, y: np.ndarray, epochs: int) -> None:
        for _ in range(epochs):
            order = stream(self.seed, "head-epoch", self.epochs_done_).permutation(X.shape[0])
            for start in range(0, X.shape[0], self.batch_size):
                batch = order[start : start + self.batch_size]
                grads = self._gradient_list(X[batch], y[batch])
                self._set_params_list(self.adam_.step(self._params(), grads))
            self.epochs_done_ += 1

    def _forward(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        z1 = X @ self.W1_ + self.b1_
        a1 = np.maximum(z1, 0.0)
        return a1, a1 @ self.W2_ + self.b2_

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "W1_")
        q = _as_matrix(X, self.dim_)
        _, logits = self._forward(q)
        probs = _softmax(logits)
        return probs if np.asarray(X).ndim == 2 else probs[0]

    def predict(self, X) -> np.ndarray:
        probs = np.atleast_2d(self.predict_proba(X))
        return probs.argmax(axis=1)

    def loss(self, X, y) -> float:
        """Mean cross-entropy (the quantity the gradients descend)."""
        check_is_fitted(self, "W1_")
        q = _as_matrix(X, self.dim_)
        y, _ = _as_labels(y, self.n_classes_)
        _, logits = self._forward(q)
        z = logits - logits.max(axis=1, keepdims=True)
        log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return float(-log_probs[np.arange(q.shape[0]), y].mean())

    def _gradient_list(self, X: np.ndarray, y: np.ndarray) -> list[np.ndarray]:
        n = X.shape[0]
        a1, logits = self._forward(X)
        probs = _softmax(logits)
        dlogits = probs.copy()
        dlogits[np.arange(n), y] -= 1.0
        dlogits /= n
        dW2 = a1.T @ dlogits
        db2 = dlogits.sum(axis=0)
        da1 = dlogits @ self.W2_.T
        dz1 = da1 * (a1 > 0.0)
        dW1 = X.T @ dz1
        db1 = dz1.sum(axis=0)
        return [dW1, db1, dW2, db2]

    def gradients(self, X, y) -> dict[str, np.ndarray]:
        """Mean cross-entropy gradients for every parameter tensor."""
        check_is_fitted(self, "W1_")
        q = _as_matrix(X, self.dim_)
        if q.shape[0] == 0:
            raise ValueError("empty batch")
        y, _ = _as_labels(y, self.n_classes_)
        g = self._gradient_list(q, y)
        return {"W1": g[0], "b1": g[1], "W2": g[2], "b2": g[3]}


def predict_crop_batch(head: SoftmaxHead, crop_vectors, expected_count: int = 5) -> np.ndarray:
    """Mean head prediction over one image's salient-crop embeddings."""
    crops = np.asarray(crop_vectors, dtype=np.float64)
    if crops.ndim != 2 or crops.shape[0] != expected_count:
        raise ValueError(
            f"expected exactly {expected_count} crop vectors, got shape {crops.shape}"
        )
    return head.predict_proba(crops).mean(axis=0)


def crop_ids_for(store: EmbeddingStore, base_id: str) -> list[str]:
    """Store ids of the form ``<base_id>#<rank>``, sorted by rank."""
    found = []
    prefix = base_id + "#"
    for sid in store.ids():
        if sid.startswith(prefix) and sid[len(prefix) :].isdigit():
            found.append((int(sid[len(prefix) :]), sid))
    return [sid for _, sid in sorted(found)]


def train_head(
    store: EmbeddingStore,
    manifest: DatasetManifest,
    hidden: int = 256,
    epochs: int = 7,
    batch_size: int = 32,
    lr: float = 1e-4,
    seed: int = 0,
) -> SoftmaxHead:
    """Two-stage schedule: whole-image embeddings, then salient-crop embeddings.

    Stage two uses every stored crop id ``<train-id>#<rank>`` and is skipped
    when the store holds none. Missing whole-image embeddings raise with the
    offending ids.
    """
    labels = manifest.labels()
    head = SoftmaxHead(
        hidden=hidden,
        n_classes=len(labels),
        epochs=epochs,
        batch_size=batch_size,
        lr=lr,
        seed=seed,
    )
    x1, y1 = join_embeddings(store, manifest, "train")
    head.fit(x1, y1)

    label_index = {label: i for i, label in enumerate(labels)}
    crop_rows = []
    crop_labels = []
    for e in manifest.subset("train"):
        for sid in crop_ids_for(store, e.path):
            crop_rows.append(np.asarray(store.get(sid), dtype=np.float64))
            crop_labels.append(label_index[e.label])
    if crop_rows:
        head.fit_more(np.stack(crop_rows), np.asarray(crop_labels))
    return head


# ---------------------------------------------------------------------------
# Model persistence: magic "SLE1", u8 kind, little-endian payload.
# Layouts are documented in docs/FORMATS.md.

_MODEL_MAGIC = b"SLE1"
_KIND_KNN = 1
_KIND_FOREST = 2
_KIND_HEAD = 3


def _pack_array(fh, a: np.ndarray, dtype: str) -> None:
    fh.write(np.ascontiguousarray(a, dtype=dtype).tobytes())


def save_model(model, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MODEL_MAGIC)
        if isinstance(model, KnnClassifier):
            check_is_fitted(model, "X_")
            n, dim = model.X_.shape
            fh.write(struct.pack("<BIIII", _KIND_KNN, model.k, n, dim, model.n_classes_))
            _pack_array(fh, model.X_, "<f8")
            _pack_array(fh, model.y_, "<i4")
        elif isinstance(model, RandomForest):
            check_is_fitted(model, "trees_")
            depth = -1 if model.max_depth is None else model.max_depth
            fh.write(
                struct.pack(
                    "<BIIIi",
                    _KIND_FOREST,
                    len(model.trees_),
                    model.dim_,
                    model.n_classes_,
                    depth,
                )
            )
            for tree in model.trees_:
                fh.write(struct.pack("<I", len(tree.feature)))
                _pack_array(fh, tree.feature, "<i4")
                _pack_array(fh, tree.threshold, "<f8")
                _pack_array(fh, tree.left, "<i4")
                _pack_array(fh, tree.right, "<i4")
                _pack_array(fh, tree.leaf_dist, "<f8")
        elif isinstance(model, SoftmaxHead):
            check_is_fitted(model, "W1_")
            fh.write(
                struct.pack("<BIII", _KIND_HEAD, model.dim_, model.hidden, model.n_classes_)
            )
            for p in [model.W1_, model.b1_, model.W2_, model.b2_]:
                _pack_array(fh, p, "<f8")
        else:
            raise ValueError(f"cannot serialize {type(model).__name__}")


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.data):
            raise FormatError("truncated model file", self.offset)
        out = struct.unpack_from(fmt, self.data, self.offset)
        self.offset += size
        return out

    def array(self, dtype: str, count: int, shape=None) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        if self.offset + size > len(self.data):
            raise FormatError("truncated model file", self.offset)
        a = np.frombuffer(self.data, dtype=dtype, count=count, offset=self.offset).copy()
        self.offset += size
        return a.reshape(shape) if shape is not None else a


def load_model(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MODEL_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {_MODEL_MAGIC!r}", 0)
    r = _Reader(data)
    r.offset = 4
    (kind,) = r.unpack("<B")
    if kind == _KIND_KNN:
        k, n, dim, c = r.unpack("<IIII")
        model = KnnClassifier(k=k, n_classes=c)
        model.X_ = r.array("<f8", n * dim, (n, dim))
        model.y_ = r.array("<i4", n).astype(np.int64)
        model.n_classes_ = c
        return model
    if kind == _KIND_FOREST:
        n_trees, dim, c, depth = r.unpack("<IIIi")
        model = RandomForest(
            n_trees=n_trees, max_depth=None if depth < 0 else depth, n_classes=c
        )
        trees = []
        for _ in range(n_trees):
            (n_nodes,) = r.unpack("<I")
            trees.append(
                DecisionTree(
                    feature=r.array("<i4", n_nodes),
                    threshold=r.array("<f8", n_nodes),
                    left=r.array("<i4", n_nodes),
                    right=r.array("<i4", n_nodes),
                    leaf_dist=r.array("<f8", n_nodes * c, (n_nodes, c)),
                )
            )
        model.trees_ = trees
        model.dim_ = dim
        model.n_classes_ = c
        return model
    if kind == _KIND_HEAD:
        dim, hidden, c = r.unpack("<III")
        model = SoftmaxHead(hidden=hidden, n_classes=c)
        model.W1_ = r.array("<f8", dim * hidden, (dim, hidden))
        model.b1_ = r.array("<f8", hidden)
        model.W2_ = r.array("<f8", hidden * c, (hidden, c))
        model.b2_ = r.array("<f8", c)
        model.dim_ = dim
        model.n_classes_ = c
        model.epochs_done_ = 0
        return model
    raise FormatError(f"unknown model kind {kind}", 4)
