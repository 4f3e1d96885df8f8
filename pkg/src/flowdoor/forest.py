"""From-scratch CART random forest with leaf-usage accounting and pruning.

Trees keep per-leaf class counts, validation usage counters and depth, which
is what the leaf-pruning defense needs: leaves that no clean validation
sample reaches are candidates for removal, and removing a leaf collapses its
parent into the sibling subtree.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, ParseError, TrainingError


class TreeNode:
    """Binary CART node. Leaves have left is None."""

    __slots__ = ("feature", "threshold", "left", "right",
                 "n0", "n1", "usage", "depth", "leaf_id", "parent", "pruned")

    def __init__(self):
        self.feature = -1
        self.threshold = 0.0
        self.left = None
        self.right = None
        self.n0 = 0
        self.n1 = 0
        self.usage = 0
        self.depth = 0
        self.leaf_id = -1
        self.parent = None
        self.pruned = False

    @property
    def is_leaf(self):
        return self.left is None

    @property
    def prediction(self):
        return self.n1 / (self.n0 + self.n1)


@dataclass(frozen=True)
class ForestParams:
    n_estimators: int = 100
    max_depth: int | None = None
    min_samples_leaf: int = 1
    feature_subsample: str | int = "sqrt"   # "sqrt" | "all" | explicit count
    bootstrap: bool = True
    seed: int = 0


@dataclass
class Forest:
    trees: list
    params: ForestParams
    n_features: int
    # Filled by record_leaf_usage; consumed by prune_forest for usage updates.
    _val_X: np.ndarray | None = field(default=None, repr=False)
    _val_rows: list | None = field(default=None, repr=False)


def _resolve_subsample(spec, d):
    if spec == "sqrt":
        return max(1, int(np.sqrt(d)))
    if spec in ("all", None):
        return d
    m = int(spec)
    if m < 1:
        raise ConfigError(f"feature_subsample {spec} must be >= 1")
    return min(m, d)


def _best_split(X, y, idx, feature_order, m_features, msl):
    """Best Gini split over up to m_features non-constant candidates.

    Returns (feature, threshold, left_idx, right_idx) or None. Thresholds are
    midpoints between consecutive distinct sorted values.
    """
    n = len(idx)
    total1 = int(y[idx].sum())
    total0 = n - total1
    parent_gini = 1.0 - (total0 / n) ** 2 - (total1 / n) ** 2

    best = None          # (decrease, feature, threshold)
    informative = 0
    for f in feature_order:
        v = X[idx, f]
        order = np.argsort(v, kind="stable")
        sv = v[order]
        sy = y[idx][order]
        # split after position i: left = [0..i], right = [i+1..]
        nL = np.arange(1, n)
        distinct = sv[:-1] < sv[1:]
        valid = distinct & (nL >= msl) & ((n - nL) >= msl)
        if not valid.any():
            continue
        informative += 1
        c1 = np.cumsum(sy)[:-1]
        c0 = nL - c1
        giniL = 1.0 - (c0 / nL) ** 2 - (c1 / nL) ** 2
        nR = n - nL
        r1 = total1 - c1
        r0 = total0 - c0
        giniR = 1.0 - (r0 / nR) ** 2 - (r1 / nR) ** 2
        weighted = (nL * giniL + nR * giniR) / n
        weighted[~valid] = np.inf
        pos = int(np.argmin(weighted))
        decrease = parent_gini - weighted[pos]
        if best is None or decrease > best[0]:
            thr = (sv[pos] + sv[pos + 1]) / 2.0
            best = (decrease, f, thr)
        if informative >= m_features:
            break
    if best is None:
        return None
    _, f, thr = best
    go_left = X[idx, f] <= thr
    return f, thr, idx[go_left], idx[~go_left]


def _grow_tree(X, y, rng, params, d, leaf_counter):
    msl = params.min_samples_leaf
    m_features = _resolve_subsample(params.feature_subsample, d)
    n = len(X)
    if params.bootstrap:
        sample = rng.integers(0, n, n)
        Xb, yb = X[sample], y[sample]
    else:
        Xb, yb = X, y

    root = TreeNode()
    stack = [(np.arange(len(Xb)), root, 0)]
    while stack:
        idx, node, depth = stack.pop()
        node.depth = depth
        n1 = int(yb[idx].sum())
        n0 = len(idx) - n1
        split = None
        if n0 > 0 and n1 > 0 and len(idx) >= 2 * msl and \
                (params.max_depth is None or depth < params.max_depth):
            split = _best_split(Xb, yb, idx, rng.permutation(d), m_features, msl)
        if split is None:
            node.n0, node.n1 = n0, n1
            node.leaf_id = leaf_counter[0]
            leaf_counter[0] += 1
            continue
        f, thr, left_idx, right_idx = split
        node.feature = f
        node.threshold = thr
        node.left = TreeNode()
        node.right = TreeNode()
        node.left.parent = node
        node.right.parent = node
        # push right first so the left subtree is grown (and numbered) first
        stack.append((right_idx, node.right, depth + 1))
        stack.append((left_idx, node.left, depth + 1))
    return root


def train_forest(train, params: ForestParams = ForestParams()) -> Forest:
    """Grow a random forest on a Dataset; deterministic given params.seed."""
    X, y = train.X, train.y
    if len(np.unique(y)) < 2:
        raise TrainingError("training data contains a single class")
    if params.n_estimators < 1:
        raise ConfigError("n_estimators must be >= 1")
    d = X.shape[1]
    seeds = np.random.SeedSequence(params.seed).spawn(params.n_estimators)
    leaf_counter = [0]
    trees = [_grow_tree(X, y, np.random.default_rng(s), params, d, leaf_counter)
             for s in seeds]
    return Forest(trees=trees, params=params, n_features=d)


# --- Prediction --------------------------------------------------------------

def _flatten(root):
    """Breadth-first arrays for vectorized routing."""
    nodes = [root]
    feat, thr, left, right, value, leaf = [], [], [], [], [], []
    i = 0
    while i < len(nodes):
        nd = nodes[i]
        if nd.is_leaf:
            feat.append(0)
            thr.append(0.0)
            left.append(i)
            right.append(i)
            value.append(nd.prediction)
            leaf.append(True)
        else:
            feat.append(nd.feature)
            thr.append(nd.threshold)
            left.append(len(nodes))
            nodes.append(nd.left)
            right.append(len(nodes))
            nodes.append(nd.right)
            value.append(0.0)
            leaf.append(False)
        i += 1
    return (nodes, np.array(feat), np.array(thr), np.array(left),
            np.array(right), np.array(value), np.array(leaf))


def _apply(root, X):
    """Route every row to its leaf; returns (leaf positions, node list, values)."""
    nodes, feat, thr, left, right, value, leaf = _flatten(root)
    pos = np.zeros(len(X), dtype=np.int64)
    while True:
        active = np.flatnonzero(~leaf[pos])
        if len(active) == 0:
            break
        nd = pos[active]
        go_left = X[active, feat[nd]] <= thr[nd]
        pos[active] = np.where(go_left, left[nd], right[nd])
    return pos, nodes, value


def tree_scores(root, X):
    pos, _, value = _apply(root, X)
    return value[pos]


def predict_forest(forest: Forest, X):
    """Mean leaf prediction over trees; labels thresholded at 0.5."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != forest.n_features:
        raise DimensionError(f"expected {forest.n_features} columns, got {X.shape}")
    scores = np.zeros(len(X))
    for root in forest.trees:
        scores += tree_scores(root, X)
    scores /= len(forest.trees)
    return scores, (scores >= 0.5).astype(int)


def iter_leaves(root):
    stack = [root]
    while stack:
        nd = stack.pop()
        if nd.is_leaf:
            yield nd
        else:
            stack.append(nd.right)
            stack.append(nd.left)


def iter_nodes(root):
    stack = [root]
    while stack:
        nd = stack.pop()
        yield nd
        if not nd.is_leaf:
            stack.append(nd.right)
            stack.append(nd.left)


def _leaf_rows(root, X):
    """Map each leaf object to the row indices routed to it."""
    pos, nodes, _ = _apply(root, X)
    rows = {}
    order = np.argsort(pos, kind="stable")
    spos = pos[order]
    starts = np.flatnonzero(np.r_[True, spos[1:] != spos[:-1]])
    bounds = np.r_[starts, len(spos)]
    for s, e in zip(bounds[:-1], bounds[1:]):
        rows[nodes[spos[s]]] = order[s:e]
    return rows


def record_leaf_usage(forest: Forest, validation):
    """Count validation rows per leaf. Counters reset on every call."""
    if len(validation) == 0:
        raise ValueError("validation set is empty")
    X = np.asarray(validation.X, dtype=float)
    if X.shape[1] != forest.n_features:
        raise DimensionError(f"expected {forest.n_features} columns, got {X.shape}")
    forest._val_X = X.copy()
    forest._val_rows = []
    for root in forest.trees:
        for leaf in iter_leaves(root):
            leaf.usage = 0
        rows = _leaf_rows(root, X)
        for leaf, r in rows.items():
            leaf.usage = len(r)
        forest._val_rows.append({leaf: list(r) for leaf, r in rows.items()})
    return forest


# --- Pruning -----------------------------------------------------------------

@dataclass
class PruneStep:
    leaf_id: int
    usage: int
    depth: int
    predicted_class: int


@dataclass
class PruneReport:
    variant: int
    fraction: float
    n_eligible: int
    steps: list
    curve: list            # (step, fraction_pruned, clean_accuracy, backdoor_accuracy)


def _prune_key(leaf, variant):
    if variant == 3:
        return (leaf.usage, leaf.depth, leaf.leaf_id)
    return (leaf.usage, leaf.leaf_id)


def _eligible(leaf, variant):
    if leaf.parent is None:        # last leaf of a collapsed tree
        return False
    if variant in (2, 3) and leaf.prediction >= 0.5:
        return False
    return True


class _EvalTracker:
    """Per-tree leaf assignment and running score sums for one eval set."""

    def __init__(self, forest, X):
        self.X = X
        self.rows = []                     # per tree: {leaf: [row, ...]}
        self.sums = np.zeros(len(X))
        for root in forest.trees:
            rows = _leaf_rows(root, X)
            self.rows.append({leaf: list(r) for leaf, r in rows.items()})
            for leaf, r in rows.items():
                self.sums[r] += leaf.prediction

    def reroute(self, t, pruned_leaf, sibling):
        moved = self.rows[t].pop(pruned_leaf, None)
        if not moved:
            return {}
        moved = np.asarray(moved)
        old_pred = pruned_leaf.prediction
        landed = _leaf_rows(sibling, self.X[moved])
        counts = {}
        for leaf, local in landed.items():
            rows = moved[local]
            self.rows[t].setdefault(leaf, []).extend(rows.tolist())
            self.sums[rows] += leaf.prediction - old_pred
            counts[leaf] = len(rows)
        return counts

    def labels(self, n_trees):
        return (self.sums / n_trees >= 0.5).astype(int)


def prune_forest(forest: Forest, variant: int, fraction: float,
                 eval_clean, eval_backdoor, target_label: int = 0,
                 checkpoint_every: float = 0.01) -> PruneReport:
    """Prune leaves in ascending usage order and track accuracy curves.

    Variant 1 ranks all leaves by usage; variant 2 restricts to leaves
    predicting benign; variant 3 additionally breaks usage ties by pruning
    lower-depth leaves first. Remaining ties break on stable leaf id.
    Pruning replaces the leaf's parent with the sibling subtree; a tree
    reduced to a single leaf stays as a constant predictor and is excluded
    from further pruning. Mutates the forest.
    """
    if variant not in (1, 2, 3):
        raise ConfigError(f"unknown pruning variant {variant}")
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"fraction {fraction} outside [0,1]")
    if forest._val_rows is None:
        raise ValueError("record_leaf_usage must run before prune_forest")
    if len(eval_clean) == 0 or len(eval_backdoor) == 0:
        raise ValueError("evaluation sets must be non-empty")

    n_trees = len(forest.trees)
    tree_of = {}
    heap = []
    n_eligible = 0
    for t, root in enumerate(forest.trees):
        for leaf in iter_leaves(root):
            tree_of[leaf] = t
            if _eligible(leaf, variant):
                n_eligible += 1
                heapq.heappush(heap, (_prune_key(leaf, variant), leaf))
    n_steps = int(np.floor(fraction * n_eligible))

    clean = _EvalTracker(forest, np.asarray(eval_clean.X, dtype=float))
    backdoor = _EvalTracker(forest, np.asarray(eval_backdoor.X, dtype=float))
    y_clean = np.asarray(eval_clean.y)

    steps = []
    curve = []
    interval = max(1, int(round(checkpoint_every * n_steps))) if n_steps else 1

    def checkpoint(step):
        acc = float(np.mean(clean.labels(n_trees) == y_clean))
        bd = float(np.mean(backdoor.labels(n_trees) == target_label))
        curve.append((step, step / n_eligible if n_eligible else 0.0, acc, bd))

    checkpoint(0)
    done = 0
    while done < n_steps and heap:
        key, leaf = heapq.heappop(heap)
        if leaf.pruned or not _eligible(leaf, variant) or key != _prune_key(leaf, variant):
            continue
        t = tree_of[leaf]
        parent = leaf.parent
        sibling = parent.right if parent.left is leaf else parent.left
        grand = parent.parent
        if grand is None:
            forest.trees[t] = sibling
            sibling.parent = None
        else:
            if grand.left is parent:
                grand.left = sibling
            else:
                grand.right = sibling
            sibling.parent = grand
        leaf.pruned = True
        parent.pruned = True

        changed = set()
        for nd in iter_nodes(sibling):
            nd.depth -= 1
            if nd.is_leaf:
                changed.add(nd)

        # validation rows that reached the pruned leaf move into the sibling
        # subtree; their landing leaves gain usage.
        moved = forest._val_rows[t].pop(leaf, None)
        if moved:
            moved = np.asarray(moved)
            for lnd, local in _leaf_rows(sibling, forest._val_X[moved]).items():
                rows = moved[local]
                forest._val_rows[t].setdefault(lnd, []).extend(rows.tolist())
                lnd.usage += len(rows)
                changed.add(lnd)
        clean.reroute(t, leaf, sibling)
        backdoor.reroute(t, leaf, sibling)

        for lnd in changed:
            if not lnd.pruned and _eligible(lnd, variant):
                heapq.heappush(heap, (_prune_key(lnd, variant), lnd))

        done += 1
        steps.append(PruneStep(leaf_id=leaf.leaf_id, usage=leaf.usage,
                               depth=leaf.depth,
                               predicted_class=int(leaf.prediction >= 0.5)))
        if done % interval == 0 or done == n_steps:
            checkpoint(done)
    if not curve or curve[-1][0] != done:
        checkpoint(done)
    return PruneReport(variant=variant, fraction=fraction,
                       n_eligible=n_eligible, steps=steps, curve=curve)


def write_prune_curve_csv(report: PruneReport, path):
    with open(path, "w") as fh:
        fh.write("step,fraction_pruned,clean_accuracy,backdoor_accuracy\n")
        for step, frac, acc, bd in report.curve:
            fh.write(f"{step},{frac!r},{acc!r},{bd!r}\n")


# --- Persistence -------------------------------------------------------------

def _node_to_obj(node):
    if node.is_leaf:
        return {"n0": node.n0, "n1": node.n1, "usage": node.usage, "depth": node.depth}
    return {"f": node.feature, "t": node.threshold,
            "l": _node_to_obj(node.left), "r": _node_to_obj(node.right)}


def save_forest(forest: Forest, path):
    obj = {
        "params": {
            "n_estimators": forest.params.n_estimators,
            "max_depth": forest.params.max_depth,
            "min_samples_leaf": forest.params.min_samples_leaf,
            "feature_subsample": forest.params.feature_subsample,
            "bootstrap": forest.params.bootstrap,
            "seed": forest.params.seed,
            "n_features": forest.n_features,
        },
        "trees": [_node_to_obj(root) for root in forest.trees],
    }
    with open(path, "w") as fh:
        json.dump(obj, fh, separators=(",", ":"))
        fh.write("\n")


_LEAF_KEYS = {"n0", "n1", "usage", "depth"}
_INTERNAL_KEYS = {"f", "t", "l", "r"}


def _node_from_obj(obj, where, depth, leaf_counter):
    if not isinstance(obj, dict):
        raise ParseError(f"{where}: node must be an object")
    keys = set(obj)
    node = TreeNode()
    node.depth = depth
    if keys == _LEAF_KEYS:
        node.n0, node.n1 = int(obj["n0"]), int(obj["n1"])
        if node.n0 < 0 or node.n1 < 0 or node.n0 + node.n1 == 0:
            raise ParseError(f"{where}: bad class counts ({node.n0}, {node.n1})")
        if int(obj["depth"]) != depth:
            raise ParseError(f"{where}: stored depth {obj['depth']} != structural depth {depth}")
        node.usage = int(obj["usage"])
        node.leaf_id = leaf_counter[0]
        leaf_counter[0] += 1
        return node
    if keys == _INTERNAL_KEYS:
        node.feature = int(obj["f"])
        node.threshold = float(obj["t"])
        node.left = _node_from_obj(obj["l"], where + ".l", depth + 1, leaf_counter)
        node.right = _node_from_obj(obj["r"], where + ".r", depth + 1, leaf_counter)
        node.left.parent = node
        node.right.parent = node
        return node
    raise ParseError(f"{where}: node keys {sorted(keys)} match neither a leaf "
                     f"nor an internal node")


def load_forest(path) -> Forest:
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: not valid JSON ({exc})") from exc
    try:
        p = obj["params"]
        params = ForestParams(
            n_estimators=int(p["n_estimators"]),
            max_depth=None if p["max_depth"] is None else int(p["max_depth"]),
            min_samples_leaf=int(p["min_samples_leaf"]),
            feature_subsample=p["feature_subsample"],
            bootstrap=bool(p["bootstrap"]),
            seed=int(p["seed"]),
        )
        n_features = int(p["n_features"])
        raw_trees = obj["trees"]
    except KeyError as exc:
        raise ParseError(f"{path}: missing field {exc}") from exc
    leaf_counter = [0]
    trees = [_node_from_obj(rt, f"{path}: trees[{i}]", 0, leaf_counter)
             for i, rt in enumerate(raw_trees)]
    return Forest(trees=trees, params=params, n_features=n_features)
