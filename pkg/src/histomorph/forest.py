"""Random-forest feature analysis and the feature-group ablation grid.

Tree growing is delegated to scikit-learn; the fitted trees are copied into
plain arrays so prediction, importances and JSON persistence stay local.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.ensemble import RandomForestClassifier

from .errors import DegenerateInputError, InputError
from .metrics import CurveReport, evaluate_scores
from .morpho import GROUP_SLICES, N_FEATURES

ABLATION_SUBSETS = {
    "all": ("morph", "int", "spat"),
    "intensity": ("int",),
    "spatial": ("spat",),
    "morphology": ("morph",),
    "morphology+spatial": ("morph", "spat"),
    "spatial+intensity": ("spat", "int"),
    "morphology+intensity": ("morph", "int"),
}
ALLOWED_DIMS = {15, 20, 35, 40, 55, 60, 75}


@dataclass
class ForestConfig:
    n_trees: int = 500
    max_features: str | int | float = "sqrt"
    min_samples_leaf: int = 1
    max_depth: int | None = None
    test_fraction: float = 0.3
    seed: int = 0

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray  # (n_nodes, n_classes) weighted class counts

    @property
    def is_leaf(self):
        return self.left < 0

    def leaf_index(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        active = ~self.is_leaf[node]
        while active.any():
            idx = np.nonzero(active)[0]
            n = node[idx]
            go_left = X[idx, self.feature[n]] <= self.threshold[n]
            node[idx] = np.where(go_left, self.left[n], self.right[n])
            active[idx] = ~self.is_leaf[node[idx]]
        return node

    def predict_proba(self, X):
        c = self.counts[self.leaf_index(X)]
        return c / c.sum(axis=1, keepdims=True)

    def impurity_decrease(self, n_features: int) -> np.ndarray:
        """Weighted Gini decrease per split feature (unnormalized)."""
        w = self.counts.sum(axis=1)
        p = self.counts / np.where(w > 0, w, 1.0)[:, None]
        gini = 1.0 - (p**2).sum(axis=1)
        out = np.zeros(n_features)
        for i in np.nonzero(~self.is_leaf)[0]:
            l, r = self.left[i], self.right[i]
            out[self.feature[i]] += w[i] * gini[i] - w[l] * gini[l] - w[r] * gini[r]
        return out

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("feature", "threshold", "left", "right", "counts")}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["feature"], dtype=np.int64), np.array(d["threshold"], dtype=np.float64),
                   np.array(d["left"], dtype=np.int64), np.array(d["right"], dtype=np.int64),
                   np.array(d["counts"], dtype=np.float64))


@dataclass
class ForestModel:
    trees: list[Tree]
    n_features: int
    classes: np.ndarray
    max_features: int
    seed: int
    importance: np.ndarray = field(default=None)
    oob_accuracy: float | None = None

    @property
    def n_trees(self):
        return len(self.trees)

    def predict_proba(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise InputError(f"expected {self.n_features} feature columns")
        return np.mean([t.predict_proba(X) for t in self.trees], axis=0)

    def predict(self, X) -> np.ndarray:
        return self.classes[np.argmax(self.predict_proba(X), axis=1)]

    def remap_features(self, perm) -> "ForestModel":
        """Model for inputs whose columns are ``X[:, perm]``."""
        perm = np.asarray(perm)
        inverse = np.argsort(perm)
        trees = [Tree(np.where(t.is_leaf, t.feature, inverse[np.maximum(t.feature, 0)]),
                      t.threshold, t.left, t.right, t.counts) for t in self.trees]
        return ForestModel(trees, self.n_features, self.classes, self.max_features, self.seed,
                           None if self.importance is None else self.importance[perm],
                           self.oob_accuracy)

    def to_dict(self):
        return {
            "n_features": self.n_features, "classes": self.classes.tolist(),
            "max_features": self.max_features, "seed": self.seed,
            "importance": None if self.importance is None else self.importance.tolist(),
            "oob_accuracy": self.oob_accuracy,
            "trees": [t.to_dict() for t in self.trees],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d):
        imp = d.get("importance")
        return cls([Tree.from_dict(t) for t in d["trees"]], int(d["n_features"]),
                   np.array(d["classes"]), int(d["max_features"]), int(d["seed"]),
                   None if imp is None else np.array(imp), d.get("oob_accuracy"))


def _resolve_max_features(spec, d: int) -> int:
    if spec == "sqrt":
        return max(1, int(math.sqrt(d)))
    if isinstance(spec, float):
        return max(1, int(spec * d))
    return int(spec)


def train_forest(X, y, cfg: ForestConfig | None = None, oob: bool = False) -> ForestModel:
    """Bootstrap-aggregated Gini CART trees with sqrt(d) candidate features per split."""
    cfg = cfg or ForestConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or len(X) != len(y) or len(X) < 2:
        raise InputError("X must be n x d with n >= 2 rows matching y")
    classes = np.unique(y)
    if classes.size < 2:
        raise DegenerateInputError("random forest needs both classes")
    mf = _resolve_max_features(cfg.max_features, X.shape[1])
    rf = RandomForestClassifier(
        n_estimators=cfg.n_trees, criterion="gini", max_features=mf,
        min_samples_leaf=cfg.min_samples_leaf, max_depth=cfg.max_depth,
        bootstrap=True, oob_score=oob, random_state=cfg.seed, n_jobs=1,
    ).fit(X, y)
    trees = []
    for est in rf.estimators_:
        t = est.tree_
        counts = t.value[:, 0, :] * t.weighted_n_node_samples[:, None]
        trees.append(Tree(t.feature.astype(np.int64), t.threshold.astype(np.float64),
                          t.children_left.astype(np.int64), t.children_right.astype(np.int64),
                          counts.astype(np.float64)))
    model = ForestModel(trees, X.shape[1], classes, mf, cfg.seed,
                        oob_accuracy=float(rf.oob_score_) if oob else None)
    model.importance = mean_decrease_impurity(model)
    return model


def mean_decrease_impurity(model: ForestModel) -> np.ndarray:
    per_tree = []
    for t in model.trees:
        dec = t.impurity_decrease(model.n_features)
        total = dec.sum()
        if total > 0:
            per_tree.append(dec / total)
    if not per_tree:
        return np.zeros(model.n_features)
    imp = np.mean(per_tree, axis=0)
    return imp / imp.sum()


def subset_columns(groups) -> np.ndarray:
    return np.concatenate([np.arange(N_FEATURES)[GROUP_SLICES[g]] for g in groups])


def group_holdout(y, groups, test_fraction: float, seed: int):
    """Boolean test mask holding out whole groups, stratified by group label."""
    y = np.asarray(y)
    if groups is None:
        groups = np.arange(len(y))
    groups = np.asarray(groups)
    rng = np.random.default_rng(seed)
    test = np.zeros(len(y), dtype=bool)
    uniq = np.unique(groups)
    glabel = np.array([np.bincount(y[groups == g].astype(int)).argmax() for g in uniq])
    for c in np.unique(glabel):
        members = uniq[glabel == c]
        k = max(1, int(round(test_fraction * len(members))))
        if k >= len(members):
            k = len(members) - 1
        if k <= 0:
            continue
        chosen = rng.choice(members, k, replace=False)
        test |= np.isin(groups, chosen)
    return test


@dataclass
class AblationRow:
    subset: str
    n_features: int
    report: CurveReport
    importance: np.ndarray

    def summary(self):
        return {"subset": self.subset, "n_features": self.n_features, **self.report.summary()}


def ablation_grid(X, y, cfg: ForestConfig | None = None, groups=None) -> list[AblationRow]:
    """Train and score a forest on every feature-group combination.

    Evaluation uses a held-out set of whole groups (slides) when ``groups``
    is given, otherwise a held-out set of samples.
    """
    cfg = cfg or ForestConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(int)
    if X.ndim != 2 or X.shape[1] != N_FEATURES:
        raise InputError(f"ablation needs all {N_FEATURES} feature columns")
    test = group_holdout(y, groups, cfg.test_fraction, cfg.seed)
    train = ~test
    if np.unique(y[train]).size < 2 or np.unique(y[test]).size < 2:
        raise DegenerateInputError("train and test splits must both contain two classes")
    rows = []
    for name, groups_ in ABLATION_SUBSETS.items():
        cols = subset_columns(groups_)
        model = train_forest(X[train][:, cols], y[train], cfg)
        scores = model.predict_proba(X[test][:, cols])[:, list(model.classes).index(1)]
        rows.append(AblationRow(name, cols.size, evaluate_scores(scores, y[test]), model.importance))
    return rows
