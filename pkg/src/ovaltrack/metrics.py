"""Segmentation and tracking evaluation: pixel overlap score and CLEAR-style
multi-object tracking accuracy/precision."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .assign import FORBIDDEN, solve_lap


def voc_score(pred: np.ndarray, truth: np.ndarray) -> float:
    """Pixelwise TruePos / (TruePos + FalsePos + FalseNeg) of two masks.

    Empty against empty scores 1.0 by convention.  Symmetric in its
    arguments (false positives and false negatives swap roles).
    """
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    tp = int((pred & truth).sum())
    denom = tp + int((pred & ~truth).sum()) + int((~pred & truth).sum())
    return 1.0 if denom == 0 else tp / denom


@dataclass
class MotReport:
    """CLEAR-MOT tallies.  ``motp`` divides summed match distances by the
    total ground-truth count; ``motp_per_match`` is the common variant
    dividing by the number of matches."""

    mota: float
    motp: float
    motp_per_match: float
    misses: int
    false_positives: int
    mismatches: int
    ground_truth: int
    matches: int
    distance_sum: float
    per_frame: list[dict] = field(default_factory=list)


Track = dict[int, tuple[float, float]]  # frame -> (x, y)


def clear_mot(hypotheses: dict[int, Track], truth: dict[int, Track],
              match_threshold: float) -> MotReport:
    """Frame-by-frame correspondence scoring of hypothesis tracks.

    Pairings within ``match_threshold`` carry over from the previous
    frame; the remainder are matched by minimum total distance.  Misses
    are unmatched truth states, false positives unmatched hypotheses, and
    a mismatch is counted whenever a truth identity is matched to a
    different hypothesis id than the last time it was matched.
    """
    if match_threshold <= 0:
        raise ValueError("match_threshold must be positive")
    frames = sorted({f for track in truth.values() for f in track}
                    | {f for track in hypotheses.values() for f in track})
    correspondence: dict[int, int] = {}
    last_matched: dict[int, int] = {}
    total = dict(g=0, m=0, fp=0, mme=0, matches=0, dist=0.0)
    per_frame = []
    for f in frames:
        gt_here = {g: t[f] for g, t in truth.items() if f in t}
        hyp_here = {h: t[f] for h, t in hypotheses.items() if f in t}
        matches: dict[int, tuple[int, float]] = {}
        used = set()
        for g, h in sorted(correspondence.items()):
            if g in gt_here and h in hyp_here:
                d = math.dist(gt_here[g], hyp_here[h])
                if d <= match_threshold:
                    matches[g] = (h, d)
                    used.add(h)
        rest_g = sorted(g for g in gt_here if g not in matches)
        rest_h = sorted(h for h in hyp_here if h not in used)
        if rest_g and rest_h:
            cost = np.full((len(rest_g), len(rest_h)), FORBIDDEN)
            for i, g in enumerate(rest_g):
                for j, h in enumerate(rest_h):
                    d = math.dist(gt_here[g], hyp_here[h])
                    if d <= match_threshold:
                        cost[i, j] = d
            # slack of threshold/2 keeps every feasible pair cheaper than
            # leaving both ends unmatched, then minimizes total distance
            assigned = solve_lap(cost, slack=match_threshold / 2.0)
            for i, j in enumerate(assigned):
                if j >= 0:
                    matches[rest_g[i]] = (rest_h[j], float(cost[i, j]))
        mme = 0
        for g in sorted(matches):
            h, _ = matches[g]
            if g in last_matched and last_matched[g] != h:
                mme += 1
            last_matched[g] = h
        dist = sum(d for _, d in matches.values())
        stats = dict(frame=f, g=len(gt_here), matches=len(matches),
                     m=len(gt_here) - len(matches),
                     fp=len(hyp_here) - len(matches), mme=mme, dist=dist)
        per_frame.append(stats)
        total["g"] += stats["g"]
        total["m"] += stats["m"]
        total["fp"] += stats["fp"]
        total["mme"] += stats["mme"]
        total["matches"] += stats["matches"]
        total["dist"] += dist
        correspondence = {g: h for g, (h, _) in matches.items()}
    if total["g"] == 0:
        raise ValueError("ground truth contains no states")
    mota = 1.0 - (total["m"] + total["fp"] + total["mme"]) / total["g"]
    motp = total["dist"] / total["g"]
    motp_match = total["dist"] / total["matches"] if total["matches"] else float("nan")
    return MotReport(mota, motp, motp_match, total["m"], total["fp"],
                     total["mme"], total["g"], total["matches"],
                     total["dist"], per_frame)
