"""Random forest authenticator: CART trees, bootstrap, majority vote.

Built from scratch so split behavior is exactly testable: candidate
thresholds are midpoints between consecutive distinct sorted values of a
sampled feature, the best split minimizes weighted Gini impurity, and ties
resolve to the lowest canonical feature index then the lowest threshold.
Each tree draws its bootstrap sample and per-split feature subsets from an
independent child stream of the training seed, so serial and parallel
training produce identical models.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import seeds
from .errors import (
    CrossvalError,
    IoError,
    ParseError,
    SchemaError,
    TrainError,
    VersionError,
)
from .model import FeatureId, FeatureVector, validate_schema

MODEL_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: int | None = None  # None: grow to pure/min_leaf
    min_leaf: int = 1
    features_per_split: int | None = None  # None: floor(sqrt(n_features))
    bootstrap: bool = True

    def __post_init__(self):
        if self.n_trees < 1:
            raise TrainError("n_trees must be >= 1")
        if self.min_leaf < 1:
            raise TrainError("min_leaf must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise TrainError("max_depth must be >= 0")

    def resolve_features_per_split(self, n_features: int) -> int:
        m = self.features_per_split
        if m is None:
            m = max(1, int(np.sqrt(n_features)))
        if not 1 <= m <= n_features:
            raise TrainError(
                f"features_per_split {m} outside [1, {n_features}]")
        return m


@dataclass
class Tree:
    """Flat node arrays; node i is a split (feature >= 0) or a leaf (-1).

    For splits, threshold/left/right are meaningful. Every node carries its
    training class counts so leaves can vote and impurity decreases can be
    recomputed without the training data.
    """

    feature: list[int]
    threshold: list[float]
    left: list[int]
    right: list[int]
    pos: list[int]
    neg: list[int]


@dataclass
class LabeledMatrix:
    """Feature rows with binary labels; positive = the legitimate user."""

    schema: tuple[FeatureId, ...]
    X: np.ndarray  # (n, d) float64
    y: np.ndarray  # (n,) int8, 1 positive / 0 negative
    session_ids: tuple[str, ...] = ()

    def __post_init__(self):
        self.schema = validate_schema(self.schema)
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int8)
        if self.X.ndim != 2 or self.X.shape[1] != len(self.schema):
            raise SchemaError(f"X shape {self.X.shape} does not match "
                              f"{len(self.schema)}-id schema")
        if len(self.y) != len(self.X):
            raise SchemaError("label count does not match row count")
        if self.session_ids and len(self.session_ids) != len(self.X):
            raise SchemaError("session_id count does not match row count")

    def restrict(self, ids) -> "LabeledMatrix":
        """Column slice onto a sub-schema (must be a subset of this one)."""
        ids = validate_schema(ids)
        index = {fid: i for i, fid in enumerate(self.schema)}
        try:
            cols = [index[fid] for fid in ids]
        except KeyError as exc:
            raise SchemaError(f"feature {exc.args[0]} not in matrix schema")
        return LabeledMatrix(ids, self.X[:, cols], self.y, self.session_ids)


@dataclass
class ForestModel:
    trees: list[Tree]
    schema: tuple[FeatureId, ...]
    params: ForestParams
    seed: int
    trained_for_user: str = ""

    def __post_init__(self):
        self.schema = validate_schema(self.schema)


@dataclass(frozen=True)
class EvalReport:
    """Confusion counts and the derived authentication metrics.

    Metrics with a zero denominator are reported as 0.0 and listed in
    ``undefined``.
    """

    tp: int
    tn: int
    fp: int
    fn: int
    fnr: float
    fpr: float
    precision: float
    recall: float
    f_measure: float
    undefined: tuple[str, ...] = ()
    per_fold: tuple["EvalReport", ...] = ()

    def to_dict(self) -> dict:
        d = {"tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn,
             "fnr": self.fnr, "fpr": self.fpr, "precision": self.precision,
             "recall": self.recall, "f_measure": self.f_measure,
             "undefined": list(self.undefined)}
        if self.per_fold:
            d["per_fold"] = [f.to_dict() for f in self.per_fold]
        return d


def metrics(tp: int, tn: int, fp: int, fn: int) -> EvalReport:
    """Precision, recall, F-measure, FPR and FNR from confusion counts."""
    if min(tp, tn, fp, fn) < 0 or tp + tn + fp + fn < 1:
        raise TrainError("confusion counts must be >= 0 and sum to >= 1")
    undefined = []

    def ratio(num, den, name):
        if den == 0:
            undefined.append(name)
            return 0.0
        return num / den

    precision = ratio(tp, tp + fp, "precision")
    recall = ratio(tp, tp + fn, "recall")
    fpr = ratio(fp, fp + tn, "fpr")
    fnr = ratio(fn, fn + tp, "fnr")
    f_den = precision + recall
    if f_den == 0:
        undefined.append("f_measure")
        f_measure = 0.0
    else:
        f_measure = 2.0 * precision * recall / f_den
    return EvalReport(tp, tn, fp, fn, fnr, fpr, precision, recall, f_measure,
                      tuple(undefined))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _gini_of(pos: int, neg: int) -> float:
    n = pos + neg
    if n == 0:
        return 0.0
    p = pos / n
    q = neg / n
    return 1.0 - p * p - q * q


def _best_split(X: np.ndarray, y: np.ndarray, feat_ids: np.ndarray,
                min_leaf: int) -> tuple[int, float] | None:
    """Lowest-weighted-Gini split over the sampled feature columns.

    X is the node's rows over the sampled columns (aligned with feat_ids,
    which must be ascending canonical indices). Returns (canonical feature
    index, threshold) or None when no valid split exists.
    """
    n = len(y)
    order = np.argsort(X, axis=0, kind="stable")
    sv = np.take_along_axis(X, order, axis=0)
    sy = y[order]

    pos_total = int(y.sum())
    cum_pos = np.cumsum(sy, axis=0)[:-1]  # (n-1, m) positives left of cut
    n_left = np.arange(1, n, dtype=np.float64)[:, None]
    n_right = n - n_left
    pos_left = cum_pos.astype(np.float64)
    pos_right = pos_total - pos_left

    valid = sv[1:] > sv[:-1]
    if min_leaf > 1:
        ok = (n_left >= min_leaf) & (n_right >= min_leaf)
        valid = valid & ok
    if not valid.any():
        return None

    p_l = np.divide(pos_left, n_left)
    p_r = np.divide(pos_right, n_right)
    gini_l = 1.0 - p_l * p_l - (1.0 - p_l) * (1.0 - p_l)
    gini_r = 1.0 - p_r * p_r - (1.0 - p_r) * (1.0 - p_r)
    weighted = (n_left * gini_l + n_right * gini_r) / n
    weighted = np.where(valid, weighted, np.inf)

    best = weighted.min()
    cuts, cols = np.nonzero(weighted == best)
    chosen = None
    for cut, col in zip(cuts.tolist(), cols.tolist()):
        lo, hi = sv[cut, col], sv[cut + 1, col]
        thr = (lo + hi) / 2.0
        if not lo <= thr < hi:  # midpoint rounded onto hi: fall back to lo
            thr = lo
        key = (int(feat_ids[col]), thr)
        if chosen is None or key < chosen:
            chosen = key
    return chosen


def _build_tree(X: np.ndarray, y: np.ndarray, params: ForestParams,
                m_features: int, rng: np.random.Generator) -> Tree:
    tree = Tree([], [], [], [], [], [])
    d = X.shape[1]

    def grow(rows: np.ndarray, depth: int) -> int:
        node = len(tree.feature)
        ys = y[rows]
        pos = int(ys.sum())
        neg = len(ys) - pos
        tree.feature.append(-1)
        tree.threshold.append(0.0)
        tree.left.append(-1)
        tree.right.append(-1)
        tree.pos.append(pos)
        tree.neg.append(neg)

        if pos == 0 or neg == 0 or len(rows) < 2 * params.min_leaf:
            return node
        if params.max_depth is not None and depth >= params.max_depth:
            return node

        feats = np.sort(rng.choice(d, size=m_features, replace=False))
        split = _best_split(X[np.ix_(rows, feats)], ys, feats, params.min_leaf)
        if split is None:
            return node
        fidx, thr = split
        go_left = X[rows, fidx] <= thr
        tree.feature[node] = fidx
        tree.threshold[node] = thr
        tree.left[node] = grow(rows[go_left], depth + 1)
        tree.right[node] = grow(rows[~go_left], depth + 1)
        return node

    grow(np.arange(len(y)), 0)
    return tree


def train(data: LabeledMatrix, params: ForestParams, seed: int,
          trained_for_user: str = "", n_jobs: int = 1) -> ForestModel:
    """Fit a forest; deterministic in (data, params, seed)."""
    n = len(data.y)
    if n < 2:
        raise TrainError("need at least 2 rows")
    if data.y.min() == data.y.max():
        raise TrainError("training data must contain both labels")
    m = params.resolve_features_per_split(len(data.schema))
    rngs = seeds.spawn_generators(params.n_trees, seed, "forest")

    def one(rng: np.random.Generator) -> Tree:
        if params.bootstrap:
            idx = rng.integers(0, n, size=n)
            Xb, yb = data.X[idx], data.y[idx]
        else:
            Xb, yb = data.X, data.y
        return _build_tree(Xb, yb, params, m, rng)

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            trees = list(pool.map(one, rngs))
    else:
        trees = [one(rng) for rng in rngs]
    return ForestModel(trees, data.schema, params, seed, trained_for_user)


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

def _tree_vote(tree: Tree, row: np.ndarray) -> int:
    node = 0
    while tree.feature[node] >= 0:
        if row[tree.feature[node]] <= tree.threshold[node]:
            node = tree.left[node]
        else:
            node = tree.right[node]
    # leaf majority; an exactly tied leaf votes positive
    return 1 if tree.pos[node] >= tree.neg[node] else 0


def score_row(model: ForestModel, row: np.ndarray) -> float:
    votes = sum(_tree_vote(t, row) for t in model.trees)
    return votes / len(model.trees)


def predict(model: ForestModel, vector: FeatureVector,
            threshold: float = 0.5) -> tuple[bool, float]:
    """(accept, score): score is the positive vote fraction; accept iff
    score >= threshold, so an exact tie at 0.5 resolves positive."""
    if tuple(vector.schema) != tuple(model.schema):
        raise SchemaError("vector schema does not match model schema")
    score = score_row(model, vector.values)
    return score >= threshold, score


def predict_rows(model: ForestModel, X: np.ndarray,
                 threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    scores = np.array([score_row(model, X[i]) for i in range(len(X))])
    return scores >= threshold, scores


# ---------------------------------------------------------------------------
# Feature importance: mean decrease in Gini impurity
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ImportanceReport:
    per_feature: dict[FeatureId, float]
    defined: bool  # False when no tree contains a single split

    def ranked(self) -> list[tuple[FeatureId, float]]:
        return sorted(self.per_feature.items(), key=lambda kv: (-kv[1], kv[0]))


def feature_importance(model: ForestModel) -> ImportanceReport:
    d = len(model.schema)
    total = np.zeros(d)
    any_split = False
    for tree in model.trees:
        n_root = tree.pos[0] + tree.neg[0]
        if n_root == 0:
            continue
        for node in range(len(tree.feature)):
            f = tree.feature[node]
            if f < 0:
                continue
            any_split = True
            l, r = tree.left[node], tree.right[node]
            n_node = tree.pos[node] + tree.neg[node]
            nl = tree.pos[l] + tree.neg[l]
            nr = tree.pos[r] + tree.neg[r]
            decrease = _gini_of(tree.pos[node], tree.neg[node]) - (
                nl * _gini_of(tree.pos[l], tree.neg[l])
                + nr * _gini_of(tree.pos[r], tree.neg[r])) / n_node
            total[f] += (n_node / n_root) * decrease
    total /= len(model.trees)
    s = total.sum()
    if s > 0:
        total = total / s
    return ImportanceReport(
        {fid: float(total[i]) for i, fid in enumerate(model.schema)},
        defined=any_split and s > 0)


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------

def stratified_folds(y: np.ndarray, k: int, seed: int) -> list[np.ndarray]:
    """Deterministic stratified partition: fold i gets every k-th shuffled
    index of each class. Folds are disjoint and cover all rows."""
    rng = seeds.generator(seed, "folds")
    folds: list[list[int]] = [[] for _ in range(k)]
    for label in (1, 0):
        idx = np.flatnonzero(y == label)
        idx = idx[rng.permutation(len(idx))]
        for j, row in enumerate(idx.tolist()):
            folds[j % k].append(row)
    return [np.sort(np.array(f, dtype=np.int64)) for f in folds]


def crossval(data: LabeledMatrix, k: int, params: ForestParams, seed: int,
             threshold: float = 0.5, n_jobs: int = 1) -> EvalReport:
    """Stratified k-fold evaluation; metrics on the aggregate confusion."""
    if k < 2:
        raise CrossvalError("k must be >= 2")
    n_pos = int((data.y == 1).sum())
    n_neg = int((data.y == 0).sum())
    if n_pos < k or n_neg < k:
        raise CrossvalError(
            f"need >= {k} rows per label, have {n_pos} pos / {n_neg} neg")

    folds = stratified_folds(data.y, k, seed)
    agg = np.zeros(4, dtype=np.int64)  # tp, tn, fp, fn
    per_fold = []
    all_rows = np.arange(len(data.y))
    for i, test_idx in enumerate(folds):
        train_mask = np.ones(len(data.y), dtype=bool)
        train_mask[test_idx] = False
        train_data = LabeledMatrix(data.schema, data.X[train_mask],
                                   data.y[train_mask])
        model = train(train_data, params, seeds.derive_seed(seed, "fold", i),
                      n_jobs=n_jobs)
        accept, _ = predict_rows(model, data.X[test_idx], threshold)
        truth = data.y[test_idx] == 1
        tp = int(np.sum(accept & truth))
        tn = int(np.sum(~accept & ~truth))
        fp = int(np.sum(accept & ~truth))
        fn = int(np.sum(~accept & truth))
        agg += (tp, tn, fp, fn)
        per_fold.append(metrics(tp, tn, fp, fn))
    report = metrics(*(int(v) for v in agg))
    return replace(report, per_fold=tuple(per_fold))


# ---------------------------------------------------------------------------
# Persistence: trees as flat node arrays
#   split node: [feature_index, threshold, left, right]
#   leaf node:  [-1, pos_count, neg_count, 0]
# ---------------------------------------------------------------------------

def model_to_dict(model: ForestModel) -> dict:
    trees = []
    for t in model.trees:
        nodes = []
        for i in range(len(t.feature)):
            if t.feature[i] < 0:
                nodes.append([-1, t.pos[i], t.neg[i], 0])
            else:
                nodes.append([t.feature[i], t.threshold[i], t.left[i], t.right[i]])
        trees.append(nodes)
    return {
        "schema_version": MODEL_SCHEMA_VERSION,
        "params": {
            "n_trees": model.params.n_trees,
            "max_depth": model.params.max_depth,
            "min_leaf": model.params.min_leaf,
            "features_per_split": model.params.features_per_split,
            "bootstrap": model.params.bootstrap,
        },
        "seed": model.seed,
        "trained_for_user": model.trained_for_user,
        "schema": [fid.render() for fid in model.schema],
        "trees": trees,
    }


def model_from_dict(doc: dict) -> ForestModel:
    version = doc.get("schema_version")
    if version != MODEL_SCHEMA_VERSION:
        raise VersionError(f"model schema_version {version!r}")
    p = doc["params"]
    params = ForestParams(
        n_trees=p["n_trees"], max_depth=p["max_depth"], min_leaf=p["min_leaf"],
        features_per_split=p["features_per_split"], bootstrap=p["bootstrap"])
    schema = tuple(FeatureId.parse(s) for s in doc["schema"])
    trees = []
    for nodes in doc["trees"]:
        t = Tree([], [], [], [], [], [])
        for raw in nodes:
            if raw[0] == -1:
                t.feature.append(-1)
                t.threshold.append(0.0)
                t.left.append(-1)
                t.right.append(-1)
                t.pos.append(int(raw[1]))
                t.neg.append(int(raw[2]))
            else:
                t.feature.append(int(raw[0]))
                t.threshold.append(float(raw[1]))
                t.left.append(int(raw[2]))
                t.right.append(int(raw[3]))
                t.pos.append(0)
                t.neg.append(0)
        # split counts are the sums of their subtrees (children follow
        # parents in preorder, so one reverse pass suffices)
        for i in reversed(range(len(t.feature))):
            if t.feature[i] >= 0:
                t.pos[i] = t.pos[t.left[i]] + t.pos[t.right[i]]
                t.neg[i] = t.neg[t.left[i]] + t.neg[t.right[i]]
        trees.append(t)
    return ForestModel(trees, schema, params, int(doc["seed"]),
                       str(doc.get("trained_for_user", "")))


def save_model(model: ForestModel, path, extra: dict | None = None) -> None:
    doc = model_to_dict(model)
    if extra:
        doc.update(extra)
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(doc, fh, separators=(",", ":"), sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write model to {path}: {exc}") from exc


def load_model(path) -> ForestModel:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read model from {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno) from exc
    return model_from_dict(doc)
