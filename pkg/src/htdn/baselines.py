"""Classical comparison systems: linear models and a random forest over
bag-of-words, keyword, selected-token and averaged-embedding features.

The linear models are trained by full-batch gradient descent with
Barzilai-Borwein step sizes and Armijo backtracking, run to a small
gradient norm, so results are reproducible to optimizer tolerance rather
than to a step-count budget.  The forest is the plain recipe: bootstrap
per tree, Gini splits over a sqrt(d) feature sample, grown to purity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .prng import PrngState

# -- feature extractors --------------------------------------------------------


class BowVectorizer:
    """Token-count vectors over the most frequent training tokens."""

    def __init__(self, max_features: int = 2000):
        if max_features <= 0:
            raise ContractError(f"max_features must be positive, got {max_features}")
        self.max_features = max_features
        self.vocab: list[str] | None = None
        self._index: dict[str, int] | None = None

    def fit(self, docs):
        counts: dict[str, int] = {}
        for doc in docs:
            for tok in doc:
                counts[tok] = counts.get(tok, 0) + 1
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        self.vocab = [tok for tok, _ in ranked[:self.max_features]]
        self._index = {tok: i for i, tok in enumerate(self.vocab)}
        return self

    def transform(self, docs) -> np.ndarray:
        if self._index is None:
            raise ContractError("vectorizer must be fitted first")
        x = np.zeros((len(docs), len(self.vocab)), dtype=np.float64)
        for i, doc in enumerate(docs):
            for tok in doc:
                j = self._index.get(tok)
                if j is not None:
                    x[i, j] += 1.0
        return x


def presence_features(docs, tokens) -> np.ndarray:
    """Binary has-token features, one column per entry of `tokens`."""
    index = {t: i for i, t in enumerate(tokens)}
    if len(index) != len(tokens):
        raise ContractError("feature token list contains duplicates")
    x = np.zeros((len(docs), len(tokens)), dtype=np.float64)
    for i, doc in enumerate(docs):
        for tok in set(doc):
            j = index.get(tok)
            if j is not None:
                x[i, j] = 1.0
    return x


def chi2_scores(docs, labels) -> dict[str, float]:
    """Independence test score of each token's presence against the label."""
    y = np.asarray(labels)
    if len(docs) != y.shape[0]:
        raise ContractError(f"{len(docs)} docs vs {y.shape[0]} labels")
    n = len(docs)
    n_pos = int(y.sum())
    pos_with: dict[str, int] = {}
    with_tok: dict[str, int] = {}
    for doc, yi in zip(docs, y):
        for tok in set(doc):
            with_tok[tok] = with_tok.get(tok, 0) + 1
            if yi == 1:
                pos_with[tok] = pos_with.get(tok, 0) + 1
    scores = {}
    for tok, present in with_tok.items():
        a = pos_with.get(tok, 0)          # present, positive
        b = present - a                   # present, negative
        c = n_pos - a                     # absent, positive
        d = n - present - c               # absent, negative
        denom = (a + b) * (c + d) * (a + c) * (b + d)
        scores[tok] = n * (a * d - b * c) ** 2 / denom if denom else 0.0
    return scores


def select_tokens(docs, labels, k: int = 108) -> list[str]:
    """Top-k tokens by association score; ties resolve lexicographically."""
    scores = chi2_scores(docs, labels)
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return [tok for tok, _ in ranked[:k]]


def average_vector_features(docs, table) -> np.ndarray:
    """Mean embedding of the known tokens; all-unknown docs give zeros."""
    x = np.zeros((len(docs), table.dim), dtype=np.float64)
    for i, doc in enumerate(docs):
        rows = [table.index[t] for t in doc if t in table.index]
        if rows:
            x[i] = table.vectors[rows].mean(axis=0)
    return x


# -- linear models ---------------------------------------------------------------


def _signs(labels) -> np.ndarray:
    y = np.asarray(labels, dtype=np.float64)
    if not np.isin(y, (0, 1)).all():
        raise ContractError("labels must be 0/1")
    return 2.0 * y - 1.0


def logistic_objective(wb: np.ndarray, x: np.ndarray, y01, c: float = 1.0):
    """Regularized logistic loss and gradient; the bias goes unpenalized."""
    w, b = wb[:-1], wb[-1]
    ys = _signs(y01)
    margins = ys * (x @ w + b)
    f = 0.5 * w @ w + c * np.logaddexp(0.0, -margins).sum()
    sig = 1.0 / (1.0 + np.exp(margins))          # sigma(-m)
    coef = -c * ys * sig
    grad = np.concatenate([w + x.T @ coef, [coef.sum()]])
    return f, grad


def squared_hinge_objective(wb: np.ndarray, x: np.ndarray, y01, c: float = 1.0):
    """L2-regularized squared-hinge loss and gradient; bias unpenalized."""
    w, b = wb[:-1], wb[-1]
    ys = _signs(y01)
    margins = ys * (x @ w + b)
    slack = np.maximum(0.0, 1.0 - margins)
    f = 0.5 * w @ w + c * (slack ** 2).sum()
    coef = -2.0 * c * ys * slack
    grad = np.concatenate([w + x.T @ coef, [coef.sum()]])
    return f, grad


def minimize_bb(fun_grad, x0: np.ndarray, tol: float = 1e-6, max_iter: int = 2000):
    """Gradient descent with Barzilai-Borwein steps and Armijo backtracking.

    Stops when the gradient norm drops to `tol`.  Returns (x, f, info).
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    f, g = fun_grad(x)
    step = 1.0 / max(1.0, float(np.linalg.norm(g)))
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= tol:
            n_iter -= 1
            break
        gg = g @ g
        trial = step
        while True:
            x_new = x + trial * (-g)
            f_new, g_new = fun_grad(x_new)
            if f_new <= f - 1e-4 * trial * gg or trial < 1e-18:
                break
            trial *= 0.5
        s = x_new - x
        yv = g_new - g
        sy = float(s @ yv)
        step = float(s @ s) / sy if sy > 1e-14 else 1.0 / max(1.0, float(np.linalg.norm(g_new)))
        x, f, g = x_new, f_new, g_new
    return x, f, {"iterations": n_iter, "grad_norm": float(np.linalg.norm(g))}


@dataclass
class LinearModel:
    w: np.ndarray
    b: float
    kind: str

    def decision(self, x: np.ndarray) -> np.ndarray:
        return x @ self.w + self.b

    def predict(self, x: np.ndarray) -> np.ndarray:
        return (self.decision(x) >= 0.0).astype(np.int64)


def train_linear(x, labels, kind: str = "logistic", c: float = 1.0,
                 tol: float = 1e-6, max_iter: int = 2000) -> LinearModel:
    objectives = {"logistic": logistic_objective, "svm": squared_hinge_objective}
    if kind not in objectives:
        raise ContractError(f"unknown linear model kind {kind!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ContractError(f"feature matrix must be 2-d and non-empty, got {x.shape}")
    obj = objectives[kind]
    wb0 = np.zeros(x.shape[1] + 1)
    wb, _, info = minimize_bb(lambda v: obj(v, x, labels, c), wb0, tol, max_iter)
    model = LinearModel(w=wb[:-1], b=float(wb[-1]), kind=kind)
    model.info = info
    return model


# -- random forest ------------------------------------------------------------------


def _gini_best_split(col: np.ndarray, y: np.ndarray):
    """Best threshold of one feature column; returns (impurity_sum, thr) or None.

    Split form is `value <= thr`.  The returned impurity is the
    count-weighted sum over both sides, comparable across features.
    """
    order = np.argsort(col, kind="stable")
    v = col[order]
    t = y[order]
    n = v.shape[0]
    cuts = np.nonzero(v[:-1] < v[1:])[0]      # boundaries between distinct values
    if cuts.size == 0:
        return None
    left_n = cuts + 1.0
    right_n = n - left_n
    pos_prefix = np.cumsum(t)[cuts]
    pos_total = t.sum()
    p_l = pos_prefix / left_n
    p_r = (pos_total - pos_prefix) / right_n
    gini = left_n * 2 * p_l * (1 - p_l) + right_n * 2 * p_r * (1 - p_r)
    best = int(np.argmin(gini))
    thr = 0.5 * (v[cuts[best]] + v[cuts[best] + 1])
    return float(gini[best]), float(thr)


class _Tree:
    __slots__ = ("feature", "threshold", "left", "right", "value")

    def __init__(self):
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[int] = []

    def add_node(self):
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(0)
        return len(self.feature) - 1

    def predict_one(self, row) -> int:
        i = 0
        while self.feature[i] >= 0:
            i = self.left[i] if row[self.feature[i]] <= self.threshold[i] else self.right[i]
        return self.value[i]


def _leaf_label(y: np.ndarray) -> int:
    pos = int(y.sum())
    neg = y.shape[0] - pos
    return 1 if pos > neg else 0  # ties go negative


def _grow_tree(x: np.ndarray, y: np.ndarray, stream: PrngState,
               min_samples_split: int) -> _Tree:
    n, d = x.shape
    n_try = max(1, int(math.sqrt(d)))
    tree = _Tree()
    root = tree.add_node()
    stack = [(root, np.arange(n))]
    while stack:
        node, idx = stack.pop()
        y_node = y[idx]
        if idx.shape[0] < min_samples_split or y_node.min() == y_node.max():
            tree.value[node] = _leaf_label(y_node)
            continue
        feats = stream.permutation(d)[:n_try]
        best = None
        for f in sorted(feats.tolist()):
            res = _gini_best_split(x[idx, f], y_node)
            if res is not None and (best is None or res[0] < best[0]):
                best = (res[0], f, res[1])
        if best is None:
            tree.value[node] = _leaf_label(y_node)
            continue
        _, f, thr = best
        go_left = x[idx, f] <= thr
        left = tree.add_node()
        right = tree.add_node()
        tree.feature[node] = f
        tree.threshold[node] = thr
        tree.left[node] = left
        tree.right[node] = right
        stack.append((left, idx[go_left]))
        stack.append((right, idx[~go_left]))
    return tree


class RandomForest:
    """Bagged Gini trees grown to purity; tied votes fall to negative."""

    def __init__(self, n_trees: int = 10, min_samples_split: int = 2):
        if n_trees <= 0:
            raise ContractError(f"n_trees must be positive, got {n_trees}")
        self.n_trees = n_trees
        self.min_samples_split = min_samples_split
        self.trees: list[_Tree] = []

    def fit(self, x, labels, prng: PrngState):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(labels, dtype=np.int64)
        if x.ndim != 2 or x.shape[0] != y.shape[0] or x.shape[0] == 0:
            raise ContractError(f"bad training data: x {x.shape}, y {y.shape}")
        self.trees = []
        n = x.shape[0]
        for i in range(self.n_trees):
            stream = prng.split("tree", i)
            boot = stream.integers(0, n, size=n)
            self.trees.append(_grow_tree(x[boot], y[boot], stream,
                                         self.min_samples_split))
        return self

    def predict(self, x) -> np.ndarray:
        if not self.trees:
            raise ContractError("forest must be fitted first")
        x = np.asarray(x, dtype=np.float64)
        votes = np.zeros(x.shape[0], dtype=np.int64)
        for tree in self.trees:
            votes += np.fromiter((tree.predict_one(row) for row in x),
                                 dtype=np.int64, count=x.shape[0])
        return (votes * 2 > self.n_trees).astype(np.int64)  # tie -> negative


# -- trivial reference predictor -------------------------------------------------------


def majority_predictor(train_labels) -> int:
    """The constant class a label-blind system would emit; ties go negative."""
    y = np.asarray(train_labels)
    pos = int((y == 1).sum())
    neg = int((y == 0).sum())
    return 1 if pos > neg else 0


__all__ = [
    "BowVectorizer", "presence_features", "chi2_scores", "select_tokens",
    "average_vector_features", "logistic_objective", "squared_hinge_objective",
    "minimize_bb", "LinearModel", "train_linear", "RandomForest",
    "majority_predictor",
]
