"""Linear-assignment tracking: exact solver, frame-to-frame tracking,
tracklet linking across detection gaps, and dummy-state gap filling.

Costs are ``1 - vote`` from the trained forest, gated by center distance.
Unmatched detections open or close tracklets through slack (birth/death)
rows added around the rectangular cost block.  A second assignment pass
links tracklet ends to later tracklet starts, and linked gaps are filled
with interpolated dummy states.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .detector import Detection
from .features import Observation, describe, features_from_descriptors
from .forest import Forest, votes

FORBIDDEN = np.inf


class InfeasibleError(RuntimeError):
    """Raised when no complete assignment avoids FORBIDDEN entries."""


@dataclass(frozen=True)
class CostMatrix:
    """Dense assignment costs; FORBIDDEN marks disallowed pairs."""

    costs: np.ndarray

    @property
    def rows(self) -> int:
        return self.costs.shape[0]

    @property
    def cols(self) -> int:
        return self.costs.shape[1]


@dataclass
class AssignParams:
    gate_radius: float
    slack_cost: float = 0.5
    max_gap: int = 5
    gate_radius_per_frame: float | None = None
    rays: int = 16
    bins: int = 16

    @property
    def per_frame_gate(self) -> float:
        return self.gate_radius if self.gate_radius_per_frame is None \
            else self.gate_radius_per_frame


@dataclass
class TrackletState:
    frame: int
    detection: Detection
    mask: object = None
    patch: object = None
    is_dummy: bool = False


@dataclass
class Tracklet:
    """A contiguous run of per-frame states with a stable identity."""

    id: int
    states: list[TrackletState] = field(default_factory=list)

    @property
    def first_frame(self) -> int:
        return self.states[0].frame

    @property
    def last_frame(self) -> int:
        return self.states[-1].frame


def solve_lap(costs, slack: float | None = None) -> np.ndarray:
    """Minimum-cost assignment; returns the matched column of each row (-1 = none).

    Square matrices are matched completely.  With ``slack`` given, the
    matrix may be rectangular: birth/death rows and columns priced at the
    slack cost are added, so any row or column may stay unmatched when
    that is cheaper.  FORBIDDEN entries never appear in the result.
    """
    cost = costs.costs if isinstance(costs, CostMatrix) else np.asarray(costs, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    n, m = cost.shape
    if slack is None:
        if n != m:
            raise ValueError("rectangular cost matrix requires a slack cost")
        if n == 0:
            return np.empty(0, dtype=np.int64)
        return _solve_square(cost)
    aug = np.full((n + m, n + m), FORBIDDEN)
    aug[:n, :m] = cost
    aug[n:, m:] = 0.0
    for i in range(n):
        aug[i, m + i] = slack
    for j in range(m):
        aug[n + j, j] = slack
    row4col = _solve_square(aug)
    out = row4col[:n].copy()
    out[out >= m] = -1
    return out


def _solve_square(cost: np.ndarray) -> np.ndarray:
    """Shortest-augmenting-path solver for a square matrix with FORBIDDEN holes."""
    n = cost.shape[0]
    finite = cost[np.isfinite(cost)]
    if finite.size and finite.min() < 0:
        # potentials need nonnegative entries; matching is shift invariant
        cost = np.where(np.isfinite(cost), cost - finite.min(), cost)
    u = np.zeros(n)
    v = np.zeros(n)
    col4row = np.full(n, -1, dtype=np.int64)
    row4col = np.full(n, -1, dtype=np.int64)
    for cur_row in range(n):
        shortest = np.full(n, np.inf)
        path = np.full(n, -1, dtype=np.int64)
        done = np.zeros(n, dtype=bool)
        visited = [cur_row]
        min_val = 0.0
        i = cur_row
        sink = -1
        while sink == -1:
            reduced = min_val + cost[i] - u[i] - v
            better = ~done & (reduced < shortest)
            shortest[better] = reduced[better]
            path[better] = i
            candidates = np.where(done, np.inf, shortest)
            j = int(np.argmin(candidates))
            min_val = float(candidates[j])
            if not math.isfinite(min_val):
                raise InfeasibleError("no feasible complete assignment")
            done[j] = True
            if row4col[j] == -1:
                sink = j
            else:
                i = int(row4col[j])
                visited.append(i)
        u[cur_row] += min_val
        for r in visited:
            if r != cur_row:
                u[r] += min_val - shortest[col4row[r]]
        v[done] -= min_val - shortest[done]
        j = sink
        while True:
            i = int(path[j])
            row4col[j] = i
            col4row[i], j = j, col4row[i]
            if i == cur_row:
                break
    return col4row


def greedy_assign(costs: np.ndarray, max_cost: float) -> np.ndarray:
    """Nearest-neighbor baseline: repeatedly take the globally cheapest pair.

    Uses the same cost matrices as :func:`solve_lap`; stops when the best
    remaining pair exceeds ``max_cost`` (the price of leaving both ends
    unassigned under slack augmentation).
    """
    cost = np.array(costs, dtype=np.float64)
    n, m = cost.shape
    out = np.full(n, -1, dtype=np.int64)
    for _ in range(min(n, m)):
        flat = int(np.argmin(cost))
        i, j = flat // m, flat % m
        if not math.isfinite(cost[i, j]) or cost[i, j] > max_cost:
            break
        out[i] = j
        cost[i, :] = np.inf
        cost[:, j] = np.inf
    return out


def _pair_cost_matrix(rows, cols, forest: Forest, gate: float,
                      params: AssignParams, cache: dict) -> np.ndarray:
    cost = np.full((len(rows), len(cols)), FORBIDDEN)
    descs_r = [_descriptor(obs, params, cache) for obs in rows]
    descs_c = [_descriptor(obs, params, cache) for obs in cols]
    for i, di in enumerate(descs_r):
        for j, dj in enumerate(descs_c):
            if math.hypot(di.centroid[0] - dj.centroid[0],
                          di.centroid[1] - dj.centroid[1]) <= gate:
                fv = features_from_descriptors(di, dj)
                cost[i, j] = 1.0 - votes(forest, fv)
    return cost


def _descriptor(obs: Observation, params: AssignParams, cache: dict):
    key = id(obs)
    if key not in cache:
        cache[key] = describe(obs, params.rays, params.bins)
    return cache[key]


def track_frames(frames: list[list[Observation]], forest: Forest,
                 params: AssignParams, solver: str = "lap") -> list[Tracklet]:
    """First tracking stage: chain frame-to-frame assignments into tracklets.

    For every consecutive frame pair an assignment between the frames'
    observations is solved (``solver="greedy"`` swaps in the
    nearest-neighbor baseline on the identical cost matrix); unmatched
    observations open new tracklets.  Every observation ends up in exactly
    one tracklet.
    """
    if not frames:
        raise ValueError("need at least one frame")
    cache: dict = {}
    tracklets: list[Tracklet] = []

    def new_tracklet(frame, obs):
        tr = Tracklet(len(tracklets), [TrackletState(frame, *obs)])
        tracklets.append(tr)
        return tr

    current = [new_tracklet(0, obs) for obs in frames[0]]
    for t in range(len(frames) - 1):
        rows, cols = frames[t], frames[t + 1]
        assigned = np.full(len(rows), -1, dtype=np.int64)
        if rows and cols:
            cost = _pair_cost_matrix(rows, cols, forest, params.gate_radius,
                                     params, cache)
            if solver == "lap":
                assigned = solve_lap(cost, slack=params.slack_cost)
            elif solver == "greedy":
                assigned = greedy_assign(cost, max_cost=2.0 * params.slack_cost)
            else:
                raise ValueError(f"unknown solver {solver!r}")
        nxt: list[Tracklet | None] = [None] * len(cols)
        for i, j in enumerate(assigned):
            if j >= 0:
                current[i].states.append(TrackletState(t + 1, *cols[j]))
                nxt[j] = current[i]
        for j, tr in enumerate(nxt):
            if tr is None:
                nxt[j] = new_tracklet(t + 1, cols[j])
        current = nxt
    return tracklets


def link_tracklets(tracklets: list[Tracklet], forest: Forest,
                   params: AssignParams) -> list[Tracklet]:
    """Second stage: assign tracklet ends to later tracklet starts and merge.

    Candidate links must start within ``max_gap`` frames of the end and
    within ``per_frame_gate`` pixels per frame of gap.  Assigned links are
    merged transitively and interior gaps are filled with dummy states.
    """
    n = len(tracklets)
    if n == 0:
        return []
    cache: dict = {}
    cost = np.full((n, n), FORBIDDEN)
    any_candidate = False
    for i, tr_i in enumerate(tracklets):
        end = tr_i.states[-1]
        for j, tr_j in enumerate(tracklets):
            gap = tr_j.first_frame - tr_i.last_frame
            if not (0 < gap <= params.max_gap):
                continue
            start = tr_j.states[0]
            end_obs = Observation(end.detection, end.mask, end.patch)
            start_obs = Observation(start.detection, start.mask, start.patch)
            di = _descriptor(end_obs, params, cache)
            dj = _descriptor(start_obs, params, cache)
            dist = math.hypot(di.centroid[0] - dj.centroid[0],
                              di.centroid[1] - dj.centroid[1])
            if dist <= gap * params.per_frame_gate:
                cost[i, j] = 1.0 - votes(forest, features_from_descriptors(di, dj))
                any_candidate = True
    successor = np.full(n, -1, dtype=np.int64)
    if any_candidate:
        successor = solve_lap(cost, slack=params.slack_cost)
    has_predecessor = np.zeros(n, dtype=bool)
    for i in range(n):
        if successor[i] >= 0:
            has_predecessor[successor[i]] = True
    merged = []
    for i, tr in enumerate(tracklets):
        if has_predecessor[i]:
            continue
        states = list(tr.states)
        j = successor[i]
        while j >= 0:
            states.extend(tracklets[j].states)
            j = successor[j]
        merged.append(fill_gaps(Tracklet(tr.id, states)))
    return merged


def fill_gaps(tracklet: Tracklet) -> Tracklet:
    """Fill interior frame gaps with linearly interpolated dummy states.

    A one-frame gap gets the average of the surrounding positions; the
    dummy's size and orientation copy the nearer real endpoint (the
    earlier one on ties).  Endpoints are untouched.
    """
    states = tracklet.states
    out: list[TrackletState] = []
    for prev, nxt in zip(states, states[1:] + [None]):
        out.append(prev)
        if nxt is None:
            break
        gap = nxt.frame - prev.frame
        if gap <= 0:
            raise ValueError(f"tracklet {tracklet.id} frames not increasing "
                             f"at frame {prev.frame}")
        for step in range(1, gap):
            w = step / gap
            cx = prev.detection.center[0] * (1 - w) + nxt.detection.center[0] * w
            cy = prev.detection.center[1] * (1 - w) + nxt.detection.center[1] * w
            template = prev.detection if step <= gap - step else nxt.detection
            dummy = Detection((cx, cy), template.half_extents,
                              template.orientation, 0.0, prev.frame + step,
                              tracklet.id)
            out.append(TrackletState(prev.frame + step, dummy, is_dummy=True))
    return Tracklet(tracklet.id, out)


def tracklet_points(tracklets: list[Tracklet]) -> dict[int, dict[int, tuple[float, float]]]:
    """Per-identity, per-frame centers (dummies included) for evaluation."""
    return {tr.id: {s.frame: (s.detection.center[0], s.detection.center[1])
                    for s in tr.states}
            for tr in tracklets}


CSV_HEADER = ("track_id", "frame", "cx", "cy", "a", "b", "theta", "is_dummy")


def write_tracklets_csv(tracklets: list[Tracklet], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for tr in sorted(tracklets, key=lambda t: t.id):
            for s in tr.states:
                det = s.detection
                writer.writerow([tr.id, s.frame,
                                 f"{det.center[0]:.6f}", f"{det.center[1]:.6f}",
                                 f"{det.half_extents[0]:.6f}",
                                 f"{det.half_extents[1]:.6f}",
                                 f"{det.orientation:.6f}", int(s.is_dummy)])


def read_track_points(path: str) -> dict[int, dict[int, tuple[float, float]]]:
    """Load trajectory centers back from the CSV written above."""
    tracks: dict[int, dict[int, tuple[float, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            tracks.setdefault(int(row["track_id"]), {})[int(row["frame"])] = (
                float(row["cx"]), float(row["cy"]))
    return tracks
