"""Graph preprocessing artifacts derived from a store.

Three products, all deterministic functions of the canonical data:

  * TransitionTensor  - empirical next-segment transition probabilities,
    bucketed by slice-of-week, Laplace-smoothed over out-neighbors.
  * ReachableSets     - per segment v, the set of segments that can reach v
    within a travel-time budget (reverse Dijkstra over free-flow times).
  * DeterrenceTable   - (distance + eps)^(-gamma) over great-circle
    midpoint distances in km.
"""

from __future__ import annotations

import csv
import heapq
import json
import os
from dataclasses import dataclass

import numpy as np

from .data import DataError, RoadNetwork, Store, TimeSliceIndex, TrajectorySet, _fmt

EARTH_RADIUS_KM = 6371.0088


# ---------------------------------------------------------------------------
# transitions


@dataclass
class TransitionTensor:
    """Per time-of-week bucket transition probabilities along graph edges.

    counts[w, e] is the number of observed consecutive visits along edge e
    whose departing timestamp falls in bucket w.  Probabilities are Laplace
    smoothed over the out-neighborhood: (count + alpha) / (total + alpha * outdeg).
    With alpha = 0 and an unobserved (source, bucket) row the probability is 0.
    """

    edges: np.ndarray          # (E, 2) int64
    counts: np.ndarray         # (W, E) float64
    alpha: float
    n: int

    def __post_init__(self):
        self.outdeg = np.zeros(self.n, dtype=np.int64)
        np.add.at(self.outdeg, self.edges[:, 0], 1)
        self.totals = np.zeros((self.counts.shape[0], self.n), dtype=np.float64)
        np.add.at(self.totals.T, self.edges[:, 0], self.counts.T)
        self._edge_index = {(int(a), int(b)): e for e, (a, b) in enumerate(self.edges)}

    @property
    def n_buckets(self) -> int:
        return self.counts.shape[0]

    def prob_edges(self, bucket: int) -> np.ndarray:
        """(E,) probabilities for every edge in the given bucket."""
        src = self.edges[:, 0]
        denom = self.totals[bucket, src] + self.alpha * self.outdeg[src]
        num = self.counts[bucket] + self.alpha
        out = np.zeros(len(self.edges), dtype=np.float64)
        nz = denom > 0
        out[nz] = num[nz] / denom[nz]
        return out

    def prob(self, i: int, j: int, bucket: int) -> float:
        e = self._edge_index.get((i, j))
        if e is None:
            return 0.0
        denom = self.totals[bucket, i] + self.alpha * self.outdeg[i]
        if denom == 0:
            return 0.0
        return float((self.counts[bucket, e] + self.alpha) / denom)

    def prob_matrix(self, bucket: int) -> np.ndarray:
        m = np.zeros((self.n, self.n), dtype=np.float64)
        p = self.prob_edges(bucket)
        m[self.edges[:, 0], self.edges[:, 1]] = p
        return m


def build_transition_tensor(trajset: TrajectorySet, net: RoadNetwork,
                            slicing: TimeSliceIndex, alpha: float = 1.0) -> TransitionTensor:
    """Count consecutive-visit transitions; bucket = slice-of-week at departure
    from the first segment of the pair.  Pairs that are not graph edges
    (possible under lenient ingestion) are skipped."""
    if alpha < 0:
        raise DataError(f"alpha must be >= 0, got {alpha}")
    W = slicing.slices_per_week
    counts = np.zeros((W, len(net.edges)), dtype=np.float64)
    edge_index = {(int(a), int(b)): e for e, (a, b) in enumerate(net.edges)}
    for traj in trajset.all_trajectories():
        for k in range(traj.m - 1):
            e = edge_index.get((int(traj.segments[k]), int(traj.segments[k + 1])))
            if e is None:
                continue
            w = slicing.slice_of_week(slicing.slice_of(traj.times[k]))
            counts[w, e] += 1.0
    return TransitionTensor(edges=net.edges.copy(), counts=counts, alpha=alpha, n=net.n)


# ---------------------------------------------------------------------------
# reachability


def traversal_seconds(net: RoadNetwork) -> np.ndarray:
    """Free-flow traversal time of each segment: length / speed_limit."""
    speeds = net.speed_limits()
    if np.any(speeds <= 0):
        raise DataError("segment with non-positive speed limit")
    return net.lengths() / speeds


@dataclass
class ReachableSets:
    """members[v] = sorted dense ids u with a path u -> ... -> v whose
    traversal cost (sum over all path segments except v itself) fits the
    budget.  v is always a member of its own set."""

    members: list
    budget_minutes: float

    def contains(self, u: int, v: int) -> bool:
        m = self.members[v]
        k = int(np.searchsorted(m, u))
        return k < len(m) and m[k] == u

    def mask_matrix(self) -> np.ndarray:
        """(N, N) bool, [v, u] True iff u can reach v in budget."""
        n = len(self.members)
        out = np.zeros((n, n), dtype=bool)
        for v, m in enumerate(self.members):
            out[v, m] = True
        return out

    def sizes(self) -> np.ndarray:
        return np.array([len(m) for m in self.members], dtype=np.int64)


def build_reachable_sets(net: RoadNetwork, budget_minutes: float = 10.0) -> ReachableSets:
    """Reverse Dijkstra from every target over the reversed graph; stepping
    v <- u costs the traversal time of u, so the target's own time is free."""
    if budget_minutes <= 0:
        raise DataError(f"budget must be positive, got {budget_minutes}")
    tau = traversal_seconds(net)
    budget = budget_minutes * 60.0
    members = []
    for v in range(net.n):
        dist = {v: 0.0}
        heap = [(0.0, v)]
        while heap:
            d, x = heapq.heappop(heap)
            if d > dist.get(x, np.inf):
                continue
            for u in net.in_neighbors[x]:
                nd = d + tau[u]
                if nd <= budget and nd < dist.get(int(u), np.inf):
                    dist[int(u)] = nd
                    heapq.heappush(heap, (nd, int(u)))
        members.append(np.array(sorted(dist), dtype=np.int64))
    return ReachableSets(members=members, budget_minutes=budget_minutes)


# ---------------------------------------------------------------------------
# deterrence


def midpoint_distances_km(net: RoadNetwork) -> np.ndarray:
    """Pairwise haversine great-circle distance between segment midpoints."""
    lon = np.radians(net.lons())[:, None]
    lat = np.radians(net.lats())[:, None]
    dlat = lat - lat.T
    dlon = lon - lon.T
    h = np.sin(dlat / 2.0) ** 2 + np.cos(lat) * np.cos(lat.T) * np.sin(dlon / 2.0) ** 2
    h = np.clip(h, 0.0, 1.0)
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(h))


@dataclass
class DeterrenceTable:
    values: np.ndarray         # (N, N) float64, (dist_km + eps) ** (-gamma)
    distances_km: np.ndarray   # (N, N) float64
    gamma: float
    eps: float


def build_deterrence(net: RoadNetwork, gamma: float = 1.0, eps: float = 0.1) -> DeterrenceTable:
    if eps <= 0:
        raise DataError(f"eps must be positive, got {eps}")
    if gamma < 0:
        raise DataError(f"gamma must be >= 0, got {gamma}")
    d = midpoint_distances_km(net)
    return DeterrenceTable(values=(d + eps) ** (-gamma), distances_km=d,
                           gamma=gamma, eps=eps)


# ---------------------------------------------------------------------------
# persistence under <store>/prep


PREP_DIR = "prep"


def run_prep(store: Store, budget_minutes: float = 10.0, alpha: float = 1.0,
             gamma: float = 1.0, eps: float = 0.1, upto_slice: int | None = None):
    """Build all three artifacts and persist them under the store.

    upto_slice restricts transition counting to trajectories departing
    strictly before that slice, so held-out periods leave no trace in the
    prior; None counts everything."""
    net = store.network()
    trajset = store.trajectories(net, adjacency_mode="ignore")
    if upto_slice is not None:
        trajset = TrajectorySet(by_slice={s: b for s, b in trajset.by_slice.items()
                                          if s < upto_slice},
                                slicing=store.slicing)
    trans = build_transition_tensor(trajset, net, store.slicing, alpha)
    reach = build_reachable_sets(net, budget_minutes)
    deter = build_deterrence(net, gamma, eps)

    pdir = store.file(PREP_DIR)
    os.makedirs(pdir, exist_ok=True)
    with open(os.path.join(pdir, "transitions.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("bucket", "from_id", "to_id", "count"))
        buckets, eidx = np.nonzero(trans.counts)
        for b, e in zip(buckets, eidx):
            w.writerow([int(b), int(trans.edges[e, 0]), int(trans.edges[e, 1]),
                        _fmt(trans.counts[b, e])])
    with open(os.path.join(pdir, "reachable.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("target_id", "member_id"))
        for v, m in enumerate(reach.members):
            for u in m:
                w.writerow([v, int(u)])
    deter.values.astype("<f8").tofile(os.path.join(pdir, "deterrence.bin"))
    with open(os.path.join(pdir, "prep_manifest.json"), "w") as fh:
        json.dump({"alpha": alpha, "budget_minutes": budget_minutes,
                   "gamma": gamma, "eps": eps, "n": net.n,
                   "n_buckets": trans.n_buckets}, fh, indent=1, sort_keys=True)
    return trans, reach, deter


def load_prep(store: Store):
    """Load persisted artifacts; deterrence distances are recomputed from
    the network (cheap) while the value table is read back from disk."""
    pdir = store.file(PREP_DIR)
    mpath = os.path.join(pdir, "prep_manifest.json")
    if not os.path.exists(mpath):
        raise DataError(f"store has no prep artifacts: run prep first ({pdir})")
    with open(mpath) as fh:
        man = json.load(fh)
    net = store.network()
    if man["n"] != net.n:
        raise DataError("prep artifacts do not match the network size")

    counts = np.zeros((man["n_buckets"], len(net.edges)), dtype=np.float64)
    edge_index = {(int(a), int(b)): e for e, (a, b) in enumerate(net.edges)}
    with open(os.path.join(pdir, "transitions.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            e = edge_index.get((int(row["from_id"]), int(row["to_id"])))
            if e is None:
                raise DataError("transition row references a non-edge")
            counts[int(row["bucket"]), e] = float(row["count"])
    trans = TransitionTensor(edges=net.edges.copy(), counts=counts,
                             alpha=man["alpha"], n=net.n)

    members = [[] for _ in range(net.n)]
    with open(os.path.join(pdir, "reachable.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            members[int(row["target_id"])].append(int(row["member_id"]))
    reach = ReachableSets(members=[np.array(sorted(m), dtype=np.int64) for m in members],
                          budget_minutes=man["budget_minutes"])

    values = np.fromfile(os.path.join(pdir, "deterrence.bin"), dtype="<f8")
    values = values.reshape(net.n, net.n)
    deter = DeterrenceTable(values=values, distances_km=midpoint_distances_km(net),
                            gamma=man["gamma"], eps=man["eps"])
    return trans, reach, deter
