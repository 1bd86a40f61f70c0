"""Canonical in-memory data model and file ingestion.

Road networks, trajectories and traffic states are exchanged as delimited
text files with headers (diffable, language-neutral):

  segments.csv      segment_id,lon,lat,seg_type,length,speed_limit
  edges.csv         from_id,to_id
  trajectories.csv  traj_id,segment_id,timestamp
  traffic.csv       slice,segment_id,<channel columns...>

Floats are written with ``repr`` so load -> write -> load round-trips
bit-exactly.  All speeds are metres/second and all timestamps Unix seconds
once ingested.
"""

from __future__ import annotations

import csv
import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

SCHEMA_VERSION = 1
STATIC_FEATURE_NAMES = ("lon", "lat", "seg_type", "length", "speed_limit")
DEFAULT_CHANNELS = ("flow", "speed")
KMH_TO_MS = 1000.0 / 3600.0


class DataError(ValueError):
    """Raised on any ingestion or validation failure."""


def _fmt(x: float) -> str:
    return repr(float(x))


def _open_csv(path: str):
    if not os.path.exists(path):
        raise DataError(f"missing file: {path}")
    return open(path, "r", newline="")


# ---------------------------------------------------------------------------
# time slicing


@dataclass(frozen=True)
class TimeSliceIndex:
    """Maps Unix timestamps to fixed-duration slice ids (default 30 min)."""

    slice_duration: int = 1800
    epoch_origin: int = 0

    def __post_init__(self):
        if self.slice_duration <= 0 or 86400 % self.slice_duration != 0:
            raise DataError(f"slice_duration must divide 86400, got {self.slice_duration}")

    @property
    def slices_per_day(self) -> int:
        return 86400 // self.slice_duration

    @property
    def slices_per_week(self) -> int:
        return 7 * self.slices_per_day

    def slice_of(self, timestamp: float) -> int:
        return int((timestamp - self.epoch_origin) // self.slice_duration)

    def slice_start(self, slice_id: int) -> float:
        return self.epoch_origin + slice_id * self.slice_duration

    def slice_of_day(self, slice_id: int) -> int:
        return slice_id % self.slices_per_day

    def slice_of_week(self, slice_id: int) -> int:
        return slice_id % self.slices_per_week


# ---------------------------------------------------------------------------
# road network


@dataclass
class RoadNetwork:
    """Directed segment graph with static features, dense ids 0..N-1."""

    original_ids: np.ndarray        # (N,) int64, dense id -> original id
    static_features: np.ndarray     # (N, C1) float64
    edges: np.ndarray               # (E, 2) int64 dense ids, lexicographically sorted

    id_map: dict = field(init=False, repr=False)           # original -> dense
    out_neighbors: list = field(init=False, repr=False)    # dense id -> np array of dense ids
    in_neighbors: list = field(init=False, repr=False)

    def __post_init__(self):
        n = len(self.original_ids)
        if n < 1:
            raise DataError("network must contain at least one segment")
        if len(set(int(i) for i in self.original_ids)) != n:
            raise DataError("duplicate segment id")
        if not np.all(np.isfinite(self.static_features)):
            bad = int(np.argwhere(~np.isfinite(self.static_features))[0][0])
            raise DataError(f"non-finite static feature on segment {self.original_ids[bad]}")
        self.id_map = {int(o): i for i, o in enumerate(self.original_ids)}
        out = [[] for _ in range(n)]
        inn = [[] for _ in range(n)]
        for a, b in self.edges:
            out[int(a)].append(int(b))
            inn[int(b)].append(int(a))
        self.out_neighbors = [np.array(sorted(v), dtype=np.int64) for v in out]
        self.in_neighbors = [np.array(sorted(v), dtype=np.int64) for v in inn]
        self._edge_set = {(int(a), int(b)) for a, b in self.edges}

    @property
    def n(self) -> int:
        return len(self.original_ids)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def has_edge(self, i: int, j: int) -> bool:
        return (i, j) in self._edge_set

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n, self.n), dtype=bool)
        if len(self.edges):
            a[self.edges[:, 0], self.edges[:, 1]] = True
        return a

    # columns of static_features, by the default schema
    def lons(self):
        return self.static_features[:, 0]

    def lats(self):
        return self.static_features[:, 1]

    def seg_types(self):
        return self.static_features[:, 2]

    def lengths(self):
        return self.static_features[:, 3]

    def speed_limits(self):
        return self.static_features[:, 4]


def load_road_network(path: str, speed_unit: str = "ms") -> RoadNetwork:
    """Load and validate segments.csv + edges.csv from a directory.

    Original segment ids are remapped (sorted) to dense 0..N-1; the mapping
    is kept on the returned network and persisted by Store.save.
    """
    seg_path = os.path.join(path, "segments.csv")
    edge_path = os.path.join(path, "edges.csv")
    ids, feats = [], []
    with _open_csv(seg_path) as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            ids.append(int(row["segment_id"]))
            vals = [float(row[c]) for c in STATIC_FEATURE_NAMES]
            if speed_unit == "kmh":
                vals[4] *= KMH_TO_MS
            feats.append(vals)
    if not ids:
        raise DataError(f"no segments in {seg_path}")
    if len(set(ids)) != len(ids):
        dup = [i for i in set(ids) if ids.count(i) > 1][0]
        raise DataError(f"duplicate segment id {dup}")
    order = np.argsort(np.array(ids, dtype=np.int64), kind="stable")
    original = np.array(ids, dtype=np.int64)[order]
    static = np.array(feats, dtype=np.float64)[order]
    id_map = {int(o): i for i, o in enumerate(original)}

    edges = []
    with _open_csv(edge_path) as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            a, b = int(row["from_id"]), int(row["to_id"])
            if a not in id_map:
                raise DataError(f"edge references unknown segment {a}")
            if b not in id_map:
                raise DataError(f"edge references unknown segment {b}")
            edges.append((id_map[a], id_map[b]))
    edge_arr = np.array(sorted(set(edges)), dtype=np.int64).reshape(-1, 2)
    return RoadNetwork(original_ids=original, static_features=static, edges=edge_arr)


def write_road_network(net: RoadNetwork, path: str) -> None:
    """Write canonical segments.csv / edges.csv / id_map.csv (dense ids)."""
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "segments.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("segment_id",) + STATIC_FEATURE_NAMES)
        for i in range(net.n):
            w.writerow([i] + [_fmt(v) for v in net.static_features[i]])
    with open(os.path.join(path, "edges.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("from_id", "to_id"))
        for a, b in net.edges:
            w.writerow([int(a), int(b)])
    with open(os.path.join(path, "id_map.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("dense_id", "original_id"))
        for i, o in enumerate(net.original_ids):
            w.writerow([i, int(o)])


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    """Timestamped segment sequence (dense ids, Unix seconds), length >= 2."""

    traj_id: str
    segments: np.ndarray   # (m,) int64
    times: np.ndarray      # (m,) float64

    @property
    def m(self) -> int:
        return len(self.segments)

    @property
    def departure(self) -> float:
        return float(self.times[0])

    @property
    def duration_minutes(self) -> float:
        return (float(self.times[-1]) - float(self.times[0])) / 60.0

    def validate(self, net: RoadNetwork | None = None, adjacency_mode: str = "warn") -> None:
        if self.m < 2:
            raise DataError(f"trajectory {self.traj_id} shorter than 2 visits")
        if np.any(np.diff(self.times) <= 0):
            raise DataError(f"trajectory {self.traj_id}: timestamps not strictly increasing")
        if net is not None and adjacency_mode != "ignore":
            for a, b in zip(self.segments[:-1], self.segments[1:]):
                if not net.has_edge(int(a), int(b)):
                    msg = f"trajectory {self.traj_id}: visits {int(a)}->{int(b)} are not adjacent"
                    if adjacency_mode == "error":
                        raise DataError(msg)
                    warnings.warn(msg)


@dataclass
class TrajectorySet:
    """Trajectories bucketed by the slice of their departure timestamp."""

    by_slice: dict
    slicing: TimeSliceIndex

    @property
    def n_trajectories(self) -> int:
        return sum(len(v) for v in self.by_slice.values())

    def slices(self) -> list:
        return sorted(self.by_slice)

    def all_trajectories(self):
        for t in self.slices():
            yield from self.by_slice[t]


def load_trajectories(path: str, net: RoadNetwork, slicing: TimeSliceIndex,
                      adjacency_mode: str = "warn") -> TrajectorySet:
    """Read one-record-per-visit file, remap ids, bucket by departure slice."""
    groups: dict = {}
    order: list = []
    with _open_csv(path) as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            tid = row["traj_id"]
            seg = int(row["segment_id"])
            if seg not in net.id_map:
                raise DataError(f"trajectory {tid} visits unknown segment {seg}")
            if tid not in groups:
                groups[tid] = ([], [])
                order.append(tid)
            groups[tid][0].append(net.id_map[seg])
            groups[tid][1].append(float(row["timestamp"]))
    by_slice: dict = {}
    for tid in order:
        segs, times = groups[tid]
        traj = Trajectory(tid, np.array(segs, dtype=np.int64), np.array(times, dtype=np.float64))
        traj.validate(net, adjacency_mode)
        by_slice.setdefault(slicing.slice_of(traj.departure), []).append(traj)
    return TrajectorySet(by_slice=by_slice, slicing=slicing)


def write_trajectories(trajset: TrajectorySet, path: str) -> None:
    """Canonical write: buckets in slice order, dense segment ids."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("traj_id", "segment_id", "timestamp"))
        for t in trajset.slices():
            for traj in trajset.by_slice[t]:
                for s, ts in zip(traj.segments, traj.times):
                    w.writerow([traj.traj_id, int(s), _fmt(ts)])


# ---------------------------------------------------------------------------
# traffic states


@dataclass
class TrafficStateGrid:
    """Dense (S, N, C) slice-by-segment state grid over [first_slice, last_slice]."""

    values: np.ndarray        # (S, N, C) float64, imputed
    observed: np.ndarray      # (S, N) bool, False where the row was missing
    first_slice: int
    channel_schema: tuple

    @property
    def n_slices(self) -> int:
        return self.values.shape[0]

    @property
    def last_slice(self) -> int:
        return self.first_slice + self.n_slices - 1

    def state(self, slice_id: int) -> np.ndarray:
        """Raw (N, C) state of one slice."""
        return self.values[slice_id - self.first_slice]

    def has_slice(self, slice_id: int) -> bool:
        return self.first_slice <= slice_id <= self.last_slice


@dataclass
class TrafficStateSeq:
    """T consecutive states ending just before anchor_slice: slices t-T .. t-1."""

    values: np.ndarray        # (T, N, C) float64
    anchor_slice: int
    channel_schema: tuple
    imputed_mask: np.ndarray  # (T, N) uint8, 1 where the cell was imputed

    @property
    def T(self) -> int:
        return self.values.shape[0]


def load_traffic_grid(path: str, net: RoadNetwork, slicing: TimeSliceIndex,
                      speed_unit: str = "ms",
                      train_mean_upto: int | None = None) -> TrafficStateGrid:
    """Read (slice, segment, channels...) rows into a dense imputed grid.

    Missing (slice, segment) rows are forward-filled from the previous slice,
    else filled with the segment mean over observed slices (restricted to
    slices < train_mean_upto when given), else 0.
    """
    rows = []
    with _open_csv(path) as fh:
        reader = csv.DictReader(fh)
        channels = tuple(c for c in reader.fieldnames if c not in ("slice", "segment_id"))
        for row in reader:
            s = int(row["slice"])
            seg = int(row["segment_id"])
            if seg not in net.id_map:
                raise DataError(f"traffic row references unknown segment {seg}")
            vals = [float(row[c]) for c in channels]
            for ci, c in enumerate(channels):
                if c == "flow" and vals[ci] < 0:
                    raise DataError(f"negative flow at slice {s}, segment {seg}")
                if c == "speed" and speed_unit == "kmh":
                    vals[ci] *= KMH_TO_MS
            rows.append((s, net.id_map[seg], vals))
    if not rows:
        raise DataError(f"no traffic rows in {path}")
    first = min(r[0] for r in rows)
    last = max(r[0] for r in rows)
    S, N, C = last - first + 1, net.n, len(channels)
    values = np.zeros((S, N, C), dtype=np.float64)
    observed = np.zeros((S, N), dtype=bool)
    for s, seg, vals in rows:
        values[s - first, seg] = vals
        observed[s - first, seg] = True

    # segment means over observed cells (training range only, when known)
    mean_limit = S if train_mean_upto is None else max(0, min(S, train_mean_upto - first))
    means = np.zeros((N, C), dtype=np.float64)
    for n_i in range(N):
        obs = observed[:mean_limit, n_i]
        if obs.any():
            means[n_i] = values[:mean_limit, n_i][obs].mean(axis=0)
    for s in range(S):
        missing = ~observed[s]
        if not missing.any():
            continue
        if s > 0:
            values[s, missing] = values[s - 1, missing]
        else:
            values[s, missing] = means[missing]
    return TrafficStateGrid(values=values, observed=observed, first_slice=first,
                            channel_schema=channels)


def windows_from_grid(grid: TrafficStateGrid, T: int) -> list:
    """All length-T windows; anchors run from first_slice+T to last_slice+1."""
    if T < 1 or T > grid.n_slices:
        raise DataError(f"window length {T} not supported by {grid.n_slices} slices")
    out = []
    imput = (~grid.observed).astype(np.uint8)
    for anchor in range(grid.first_slice + T, grid.last_slice + 2):
        lo = anchor - T - grid.first_slice
        out.append(TrafficStateSeq(values=grid.values[lo:lo + T].copy(),
                                   anchor_slice=anchor,
                                   channel_schema=grid.channel_schema,
                                   imputed_mask=imput[lo:lo + T].copy()))
    return out


def load_traffic_states(path: str, net: RoadNetwork, slicing: TimeSliceIndex, T: int,
                        speed_unit: str = "ms",
                        train_mean_upto: int | None = None) -> list:
    grid = load_traffic_grid(path, net, slicing, speed_unit, train_mean_upto)
    return windows_from_grid(grid, T)


def write_traffic_grid(grid: TrafficStateGrid, path: str) -> None:
    """Canonical write of the observed rows only (imputed cells stay absent)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("slice", "segment_id") + tuple(grid.channel_schema))
        for s in range(grid.n_slices):
            for n_i in range(grid.values.shape[1]):
                if grid.observed[s, n_i]:
                    w.writerow([grid.first_slice + s, n_i]
                               + [_fmt(v) for v in grid.values[s, n_i]])


# ---------------------------------------------------------------------------
# chronological split


def chrono_split(anchors, ratios=(0.6, 0.2, 0.2)):
    """Contiguous chronological partition of anchors into (train, val, test).

    Floor-then-distribute: each part gets at least one anchor, exact floors
    otherwise, remainders assigned by descending fractional part.
    """
    anchors = list(anchors)
    n = len(anchors)
    if n < 3:
        raise DataError(f"need at least 3 anchors to split, got {n}")
    r = np.array(ratios, dtype=np.float64)
    if np.any(r <= 0):
        raise DataError("split ratios must be positive")
    r = r / r.sum()
    raw = r * n
    counts = np.maximum(1, np.floor(raw).astype(int))
    while counts.sum() > n:
        counts[int(np.argmax(counts))] -= 1
    rem = n - counts.sum()
    frac_order = np.argsort(-(raw - np.floor(raw)), kind="stable")
    k = 0
    while rem > 0:
        counts[frac_order[k % 3]] += 1
        rem -= 1
        k += 1
    a, b = counts[0], counts[0] + counts[1]
    return anchors[:a], anchors[a:b], anchors[b:]


# ---------------------------------------------------------------------------
# persisted store


class Store:
    """Directory of canonical files + manifest; the unit all CLI stages share."""

    MANIFEST = "manifest.json"

    def __init__(self, path: str):
        self.path = path
        mpath = os.path.join(path, self.MANIFEST)
        if not os.path.exists(mpath):
            raise DataError(f"not a store (missing {self.MANIFEST}): {path}")
        with open(mpath) as fh:
            self.manifest = json.load(fh)
        if self.manifest.get("schema_version") != SCHEMA_VERSION:
            raise DataError(f"unsupported store schema {self.manifest.get('schema_version')}")

    @property
    def slicing(self) -> TimeSliceIndex:
        return TimeSliceIndex(slice_duration=self.manifest["slice_duration"],
                              epoch_origin=self.manifest["epoch_origin"])

    @property
    def channels(self) -> tuple:
        return tuple(self.manifest["channels"])

    def file(self, name: str) -> str:
        return os.path.join(self.path, name)

    def network(self) -> RoadNetwork:
        return load_road_network(self.path)

    def id_map(self) -> dict:
        """dense id -> original id, as recorded at ingestion."""
        out = {}
        with _open_csv(self.file("id_map.csv")) as fh:
            for row in csv.DictReader(fh):
                out[int(row["dense_id"])] = int(row["original_id"])
        return out

    def trajectories(self, net: RoadNetwork | None = None,
                     adjacency_mode: str = "warn") -> TrajectorySet:
        net = net or self.network()
        return load_trajectories(self.file("trajectories.csv"), net, self.slicing,
                                 adjacency_mode)

    def traffic_grid(self, net: RoadNetwork | None = None,
                     train_mean_upto: int | None = None) -> TrafficStateGrid:
        net = net or self.network()
        return load_traffic_grid(self.file("traffic.csv"), net, self.slicing,
                                 train_mean_upto=train_mean_upto)

    def write_split(self, split: dict) -> None:
        with open(self.file("split.json"), "w") as fh:
            json.dump(split, fh, indent=1, sort_keys=True)

    def split(self) -> dict | None:
        p = self.file("split.json")
        if not os.path.exists(p):
            return None
        with open(p) as fh:
            return json.load(fh)

    @classmethod
    def create(cls, path: str, net: RoadNetwork, trajset: TrajectorySet,
               grid: TrafficStateGrid, slicing: TimeSliceIndex) -> "Store":
        os.makedirs(path, exist_ok=True)
        write_road_network(net, path)
        write_trajectories(trajset, os.path.join(path, "trajectories.csv"))
        write_traffic_grid(grid, os.path.join(path, "traffic.csv"))
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "slice_duration": slicing.slice_duration,
            "epoch_origin": slicing.epoch_origin,
            "channels": list(grid.channel_schema),
            "n_segments": net.n,
            "n_edges": net.n_edges,
            "n_trajectories": trajset.n_trajectories,
            "slice_range": [grid.first_slice, grid.last_slice],
        }
        with open(os.path.join(path, cls.MANIFEST), "w") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
        return cls(path)


def ingest(network_dir: str, traj_file: str, traffic_file: str, out: str,
           slice_minutes: int = 30, speed_unit: str = "ms",
           adjacency_mode: str = "warn") -> Store:
    """Validate raw inputs and persist the canonical store."""
    slicing = TimeSliceIndex(slice_duration=slice_minutes * 60)
    net = load_road_network(network_dir, speed_unit)
    trajset = load_trajectories(traj_file, net, slicing, adjacency_mode)
    grid = load_traffic_grid(traffic_file, net, slicing, speed_unit)
    return Store.create(out, net, trajset, grid, slicing)
