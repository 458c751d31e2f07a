"""Random-forest classifier turning pair features into assignment votes.

Small, self-contained implementation: bagged CART trees with Gini splits,
a random subset of ceil(sqrt(F)) features per split, grown until leaves
are pure or hold fewer than two samples.  Everything is deterministic
given the sample order, tree count and seed (tree t uses seed + t), and a
trained forest round-trips through a versioned JSON document.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .features import FEATURE_NAMES, FeatureVector, pair_features

FOREST_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainingSample:
    """A labeled candidate assignment: positive means "same object"."""

    features: FeatureVector
    label: bool


@dataclass
class Forest:
    trees: list
    n_trees: int
    seed: int
    oob_accuracy: float


def train(samples: list[TrainingSample], n_trees: int = 50, seed: int = 0) -> Forest:
    """Fit a forest on labeled pairs and record its out-of-bag accuracy."""
    if n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    if len(samples) < 2:
        raise ValueError("need at least 2 training samples")
    x = np.array([s.features.as_array() for s in samples])
    y = np.array([bool(s.label) for s in samples])
    if not np.isfinite(x).all():
        raise ValueError("training features must be finite")
    if y.all() or not y.any():
        raise ValueError("training samples must contain both labels")
    n = len(samples)
    n_candidates = math.ceil(math.sqrt(x.shape[1]))
    trees = []
    oob_pos = np.zeros(n, dtype=np.int64)
    oob_neg = np.zeros(n, dtype=np.int64)
    for t in range(n_trees):
        rng = np.random.default_rng(seed + t)
        boot = rng.integers(0, n, size=n)
        nodes: list[dict] = []
        _grow(x, y, boot, nodes, rng, n_candidates)
        trees.append(nodes)
        out_of_bag = np.setdiff1d(np.arange(n), boot, assume_unique=False)
        for i in out_of_bag:
            if _tree_predict(nodes, x[i]):
                oob_pos[i] += 1
            else:
                oob_neg[i] += 1
    covered = (oob_pos + oob_neg) > 0
    if covered.any():
        predicted = oob_pos[covered] > oob_neg[covered]
        oob = float((predicted == y[covered]).mean())
    else:
        oob = float("nan")
    return Forest(trees, n_trees, seed, oob)


def _gini(labels: np.ndarray) -> float:
    p = float(labels.mean())
    return 2.0 * p * (1.0 - p)


def _grow(x, y, idx, nodes, rng, n_candidates) -> int:
    labels = y[idx]
    node_id = len(nodes)
    nodes.append(None)
    if idx.size < 2 or labels.all() or not labels.any():
        nodes[node_id] = {"counts": [int((~labels).sum()), int(labels.sum())]}
        return node_id
    parent = _gini(labels)
    best = None  # (gain, feature, threshold)
    for f in rng.permutation(x.shape[1])[:n_candidates]:
        values = x[idx, f]
        uniq = np.unique(values)
        if uniq.size < 2:
            continue
        for threshold in (uniq[:-1] + uniq[1:]) / 2.0:
            left = values <= threshold
            n_left = int(left.sum())
            weighted = (n_left * _gini(labels[left])
                        + (idx.size - n_left) * _gini(labels[~left])) / idx.size
            gain = parent - weighted
            if gain > 1e-12 and (best is None or gain > best[0]):
                best = (gain, int(f), float(threshold))
    if best is None:
        nodes[node_id] = {"counts": [int((~labels).sum()), int(labels.sum())]}
        return node_id
    _, feature, threshold = best
    going_left = x[idx, feature] <= threshold
    left = _grow(x, y, idx[going_left], nodes, rng, n_candidates)
    right = _grow(x, y, idx[~going_left], nodes, rng, n_candidates)
    nodes[node_id] = {"feature": feature, "threshold": threshold,
                      "left": left, "right": right}
    return node_id


def _tree_predict(nodes, row) -> bool:
    node = nodes[0]
    while "counts" not in node:
        node = nodes[node["left"] if row[node["feature"]] <= node["threshold"]
                     else node["right"]]
    neg, pos = node["counts"]
    return pos > neg


def votes(forest: Forest, fv: FeatureVector) -> float:
    """Fraction of trees voting "same object"; an exact multiple of 1/n_trees."""
    row = fv.as_array()
    positive = sum(_tree_predict(nodes, row) for nodes in forest.trees)
    return positive / forest.n_trees


def assignment_cost(forest: Forest, fv: FeatureVector) -> float:
    """Cost used by the trackers: one minus the forest vote."""
    return 1.0 - votes(forest, fv)


def save_forest(forest: Forest, path: str) -> None:
    doc = {
        "version": FOREST_FORMAT_VERSION,
        "n_trees": forest.n_trees,
        "seed": forest.seed,
        "oob_accuracy": forest.oob_accuracy,
        "features": list(FEATURE_NAMES),
        "trees": forest.trees,
    }
    with open(path, "w", encoding="ascii") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_forest(path: str) -> Forest:
    with open(path, encoding="ascii") as fh:
        doc = json.load(fh)
    if doc.get("version") != FOREST_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported forest format version {doc.get('version')}")
    return Forest(doc["trees"], doc["n_trees"], doc["seed"], doc["oob_accuracy"])


def build_training_samples(frame_observations, positive_pairs, gate_radius: float,
                           seed: int = 0, rays: int = 16, bins: int = 16,
                           negatives_per_positive: float = 1.0) -> list[TrainingSample]:
    """Assemble labeled samples from per-frame observations.

    ``positive_pairs`` rows are (frame, index_in_frame, next_frame,
    index_in_next_frame) known-correct assignments.  Negatives are mined
    from the same frame transitions: pairs within the gate radius that are
    not the correct assignment (hard negatives), subsampled with ``seed``
    to the requested ratio.
    """
    cache: dict = {}
    positives = set()
    samples = []
    for frame, i, next_frame, j in positive_pairs:
        if next_frame != frame + 1:
            raise ValueError(f"positive pair spans frames {frame}->{next_frame}; "
                             "expected consecutive frames")
        positives.add((frame, i, j))
        fv = pair_features(frame_observations[frame][i],
                           frame_observations[frame + 1][j], rays, bins, cache)
        samples.append(TrainingSample(fv, True))
    candidates = []
    for frame, i, j in sorted(positives):
        for jj, obs in enumerate(frame_observations[frame + 1]):
            if jj == j:
                continue
            fv = pair_features(frame_observations[frame][i], obs, rays, bins, cache)
            if fv.center_dist <= gate_radius:
                candidates.append(TrainingSample(fv, False))
    rng = np.random.default_rng(seed)
    wanted = int(round(negatives_per_positive * len(positives)))
    if len(candidates) > wanted:
        chosen = rng.choice(len(candidates), size=wanted, replace=False)
        candidates = [candidates[i] for i in sorted(chosen)]
    return samples + candidates
