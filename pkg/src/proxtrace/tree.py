"""CART decision tree for close/far proximity, plus the fixed RSS threshold baseline."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .dataset import FeatureVector, LabeledWindow, ProximityLabel, RssSample

# gains closer than this are treated as ties
TIE_EPS = 1e-12


class TreeError(Exception):
    pass


class EmptyNode(TreeError):
    pass


class EmptyTrainingSet(TreeError):
    pass


class EmptyTestSet(TreeError):
    pass


class FeatureIndexOutOfRange(TreeError):
    pass


@dataclass(frozen=True)
class TreeParams:
    max_depth: int = 8
    min_leaf: int = 5
    min_impurity_decrease: float = 0.0

    def __post_init__(self):
        if self.max_depth < 1 or self.min_leaf < 1 or self.min_impurity_decrease < 0:
            raise ValueError(f"invalid tree parameters: {self}")


@dataclass(frozen=True)
class Leaf:
    label: ProximityLabel
    counts: tuple[int, int]  # (close, far)


@dataclass(frozen=True)
class Split:
    feature: int
    threshold: float
    left: "TreeNode"
    right: "TreeNode"


TreeNode = Union[Leaf, Split]


def compute_gini(counts: Sequence[int]) -> float:
    total = sum(counts)
    if total <= 0:
        raise EmptyNode("gini of an empty node is undefined")
    return 1.0 - sum((c / total) ** 2 for c in counts)


def _majority(n_close: int, n_far: int) -> ProximityLabel:
    # ties resolve to close, the conservative call for contact tracing
    return ProximityLabel.CLOSE if n_close >= n_far else ProximityLabel.FAR


def _as_arrays(data: Sequence[LabeledWindow] | tuple[np.ndarray, np.ndarray]):
    if isinstance(data, tuple):
        X, y = data
        return np.asarray(X, dtype=float), np.asarray(y, dtype=np.int64)
    if len(data) == 0:
        return np.empty((0, 6)), np.empty(0, dtype=np.int64)
    X = np.array([w.features.as_tuple() for w in data], dtype=float).reshape(len(data), -1)
    y = np.array([w.label is ProximityLabel.CLOSE for w in data], dtype=np.int64)
    return X, y


def _feature_gains(col: np.ndarray, y: np.ndarray, min_leaf: int, parent: float):
    """Candidate thresholds on one feature with their Gini decrease, ascending."""
    order = np.argsort(col, kind="stable")
    v = col[order]
    close_cum = np.cumsum(y[order])
    n = len(v)
    pos = np.nonzero(v[:-1] < v[1:])[0]  # split after index pos
    n_left = pos + 1
    keep = (n_left >= min_leaf) & (n - n_left >= min_leaf)
    pos, n_left = pos[keep], n_left[keep]
    if pos.size == 0:
        return np.empty(0), np.empty(0)
    n_right = n - n_left
    lc = close_cum[pos]
    rc = close_cum[-1] - lc
    gini_l = 1.0 - (lc / n_left) ** 2 - ((n_left - lc) / n_left) ** 2
    gini_r = 1.0 - (rc / n_right) ** 2 - ((n_right - rc) / n_right) ** 2
    gains = parent - (n_left * gini_l + n_right * gini_r) / n
    lo, hi = v[pos], v[pos + 1]
    thresholds = lo + (hi - lo) / 2.0
    # midpoint can round onto the upper value for adjacent floats
    thresholds = np.where(thresholds < hi, thresholds, lo)
    return thresholds, gains


def _best_split(X: np.ndarray, y: np.ndarray, min_leaf: int):
    n_close = int(y.sum())
    parent = compute_gini((n_close, len(y) - n_close))
    per_feature = [_feature_gains(X[:, f], y, min_leaf, parent) for f in range(X.shape[1])]
    best = max((float(g.max()) for _, g in per_feature if g.size), default=None)
    if best is None:
        return None
    for f, (thresholds, gains) in enumerate(per_feature):
        hits = np.nonzero(gains >= best - TIE_EPS)[0]
        if hits.size:
            i = hits[0]
            return f, float(thresholds[i]), float(gains[i])
    return None


def train_tree(train, params: TreeParams = TreeParams()) -> TreeNode:
    """Grow a greedy CART tree.

    ``train`` is a sequence of :class:`LabeledWindow` or an ``(X, y)`` pair
    with ``y`` = 1 for close.  Splits maximise the Gini decrease over
    midpoints of consecutive distinct values; ties go to the lowest feature
    index and then the lowest threshold.  Growth stops at ``max_depth``, when
    no split leaves ``min_leaf`` points on both sides, or when the best
    decrease is zero or below ``min_impurity_decrease``.
    """
    X, y = _as_arrays(train)
    if len(y) == 0:
        raise EmptyTrainingSet("cannot train on an empty set")
    return _grow(X, y, params, depth=0)


def _grow(X, y, params: TreeParams, depth: int) -> TreeNode:
    n_close = int(y.sum())
    n_far = len(y) - n_close
    leaf = Leaf(_majority(n_close, n_far), (n_close, n_far))
    if depth >= params.max_depth or n_close == 0 or n_far == 0:
        return leaf
    found = _best_split(X, y, params.min_leaf)
    if found is None:
        return leaf
    feature, threshold, gain = found
    if gain <= TIE_EPS or gain < params.min_impurity_decrease:
        return leaf
    mask = X[:, feature] <= threshold
    return Split(
        feature,
        threshold,
        _grow(X[mask], y[mask], params, depth + 1),
        _grow(X[~mask], y[~mask], params, depth + 1),
    )


def _values(f) -> Sequence[float]:
    return f.as_tuple() if isinstance(f, FeatureVector) else f


def predict(tree: TreeNode, f: FeatureVector | Sequence[float]) -> ProximityLabel:
    x = _values(f)
    node = tree
    while isinstance(node, Split):
        if node.feature >= len(x):
            raise FeatureIndexOutOfRange(f"tree uses feature {node.feature}, vector has {len(x)}")
        node = node.left if x[node.feature] <= node.threshold else node.right
    return node.label


def tree_depth(tree: TreeNode) -> int:
    if isinstance(tree, Leaf):
        return 0
    return 1 + max(tree_depth(tree.left), tree_depth(tree.right))


def count_leaves(tree: TreeNode) -> int:
    if isinstance(tree, Leaf):
        return 1
    return count_leaves(tree.left) + count_leaves(tree.right)


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalReport:
    """Close is the positive class: tp/fn are truly close, fp/tn truly far."""

    tp: int
    fn: int
    fp: int
    tn: int

    @property
    def n_test(self) -> int:
        return self.tp + self.fn + self.fp + self.tn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.n_test

    @property
    def false_negative_rate(self) -> float:
        positives = self.tp + self.fn
        return self.fn / positives if positives else 0.0

    @property
    def confusion(self) -> list[list[int]]:
        return [[self.tp, self.fn], [self.fp, self.tn]]

    def to_dict(self, combination: str = "") -> dict:
        return {
            "combination": combination,
            "accuracy": self.accuracy,
            "fn_rate": self.false_negative_rate,
            "confusion": self.confusion,
            "n_test": self.n_test,
        }

    @classmethod
    def from_labels(cls, truth: Sequence[ProximityLabel], predicted: Sequence[ProximityLabel]) -> "EvalReport":
        if not truth:
            raise EmptyTestSet("cannot evaluate on an empty set")
        tp = fn = fp = tn = 0
        for t, p in zip(truth, predicted, strict=True):
            if t is ProximityLabel.CLOSE:
                if p is ProximityLabel.CLOSE:
                    tp += 1
                else:
                    fn += 1
            elif p is ProximityLabel.CLOSE:
                fp += 1
            else:
                tn += 1
        return cls(tp, fn, fp, tn)


def evaluate(tree: TreeNode, test: Sequence[LabeledWindow]) -> EvalReport:
    if not test:
        raise EmptyTestSet("cannot evaluate on an empty set")
    return EvalReport.from_labels([w.label for w in test], [predict(tree, w.features) for w in test])


def threshold_baseline(rss_dbm: float, cutoff_dbm: float = -80.0) -> ProximityLabel:
    return ProximityLabel.CLOSE if rss_dbm >= cutoff_dbm else ProximityLabel.FAR


def baseline_false_negatives(samples: Sequence[RssSample], cutoff_dbm: float = -80.0, cutoff_m: float = 2.0) -> int:
    """Truly close samples (distance <= cutoff_m) that the RSS threshold calls far."""
    return sum(1 for s in samples if s.distance_m <= cutoff_m and s.rss_dbm < cutoff_dbm)


def evaluate_baseline(test: Sequence[LabeledWindow], cutoff_dbm: float = -80.0) -> EvalReport:
    if not test:
        raise EmptyTestSet("cannot evaluate on an empty set")
    return EvalReport.from_labels(
        [w.label for w in test], [threshold_baseline(w.features.rss_mean_dbm, cutoff_dbm) for w in test]
    )


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------


def tree_to_dict(tree: TreeNode) -> dict:
    if isinstance(tree, Leaf):
        return {"label": tree.label.value, "counts": list(tree.counts)}
    return {
        "feature": tree.feature,
        "threshold": tree.threshold,
        "left": tree_to_dict(tree.left),
        "right": tree_to_dict(tree.right),
    }


def tree_from_dict(d: dict) -> TreeNode:
    if "label" in d:
        close, far = d["counts"]
        return Leaf(ProximityLabel(d["label"]), (int(close), int(far)))
    threshold = float(d["threshold"])
    if not math.isfinite(threshold):
        raise ValueError("split threshold must be finite")
    return Split(int(d["feature"]), threshold, tree_from_dict(d["left"]), tree_from_dict(d["right"]))


def dumps_tree(tree: TreeNode) -> str:
    # json writes floats with repr(), which round-trips exactly
    return json.dumps(tree_to_dict(tree), indent=1, sort_keys=True) + "\n"


def loads_tree(text: str) -> TreeNode:
    return tree_from_dict(json.loads(text))
