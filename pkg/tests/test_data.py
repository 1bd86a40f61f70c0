import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segtraj.data import (DataError, Store, TimeSliceIndex, chrono_split, ingest,
                          load_road_network, load_traffic_grid, load_trajectories,
                          windows_from_grid, write_road_network)

from helpers import random_network


def write_network_dir(path, segments, edges):
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "segments.csv"), "w") as fh:
        fh.write("segment_id,lon,lat,seg_type,length,speed_limit\n")
        for row in segments:
            fh.write(",".join(str(v) for v in row) + "\n")
    with open(os.path.join(path, "edges.csv"), "w") as fh:
        fh.write("from_id,to_id\n")
        for a, b in edges:
            fh.write(f"{a},{b}\n")


CHAIN_SEGMENTS = [
    (20, 103.80, 31.20, 0, 500.0, 11.11),
    (10, 103.81, 31.20, 1, 800.0, 16.67),
    (30, 103.82, 31.20, 0, 450.0, 11.11),
]
CHAIN_EDGES = [(10, 20), (20, 30)]


@pytest.fixture
def chain_dir(tmp_path):
    p = tmp_path / "net"
    write_network_dir(p, CHAIN_SEGMENTS, CHAIN_EDGES)
    return str(p)


class TestTimeSliceIndex:

    def test_default_slicing(self):
        ts = TimeSliceIndex()
        assert ts.slices_per_day == 48
        assert ts.slices_per_week == 336

    def test_ten_past_midnight_is_slice_zero(self):
        ts = TimeSliceIndex()
        assert ts.slice_of(600.0) == 0
        assert ts.slice_of(1799.999) == 0
        assert ts.slice_of(1800.0) == 1

    def test_slice_of_day_and_week_wrap(self):
        ts = TimeSliceIndex()
        assert ts.slice_of_day(48) == 0
        assert ts.slice_of_day(49) == 1
        assert ts.slice_of_week(336) == 0
        assert ts.slice_start(3) == 5400.0

    def test_bad_duration_rejected(self):
        with pytest.raises(DataError):
            TimeSliceIndex(slice_duration=7000)


class TestRoadNetwork:

    def test_chain_loads_with_dense_sorted_ids(self, chain_dir):
        net = load_road_network(chain_dir)
        assert net.n == 3
        assert list(net.original_ids) == [10, 20, 30]
        assert net.id_map == {10: 0, 20: 1, 30: 2}
        # file order was 20,10,30; features must follow sorted ids
        assert net.static_features[0, 3] == 800.0
        assert net.has_edge(0, 1) and net.has_edge(1, 2)
        assert not net.has_edge(1, 0)

    def test_duplicate_id_rejected(self, tmp_path):
        write_network_dir(tmp_path / "n", CHAIN_SEGMENTS + [CHAIN_SEGMENTS[0]], CHAIN_EDGES)
        with pytest.raises(DataError, match="duplicate"):
            load_road_network(str(tmp_path / "n"))

    def test_unknown_edge_endpoint_rejected(self, tmp_path):
        write_network_dir(tmp_path / "n", CHAIN_SEGMENTS, [(10, 99)])
        with pytest.raises(DataError, match="unknown segment 99"):
            load_road_network(str(tmp_path / "n"))

    def test_nonfinite_feature_rejected(self, tmp_path):
        rows = [(1, 103.8, 31.2, 0, float("nan"), 10.0)]
        write_network_dir(tmp_path / "n", rows, [])
        with pytest.raises(DataError, match="non-finite"):
            load_road_network(str(tmp_path / "n"))

    def test_kmh_conversion(self, chain_dir):
        ms = load_road_network(chain_dir)
        kmh = load_road_network(chain_dir, speed_unit="kmh")
        assert np.allclose(kmh.speed_limits(), ms.speed_limits() / 3.6)

    def test_write_round_trip_bit_exact(self, tmp_path, chain_dir):
        net = load_road_network(chain_dir)
        out1, out2 = tmp_path / "o1", tmp_path / "o2"
        write_road_network(net, str(out1))
        net2 = load_road_network(str(out1))
        write_road_network(net2, str(out2))
        # id_map.csv is ingest provenance, not part of the canonical cycle
        for name in ("segments.csv", "edges.csv"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()
        assert np.array_equal(net.static_features, net2.static_features)


class TestTrajectories:

    def write_traj(self, path, rows):
        with open(path, "w") as fh:
            fh.write("traj_id,segment_id,timestamp\n")
            for r in rows:
                fh.write(",".join(str(v) for v in r) + "\n")

    def test_bucketing_by_departure_slice(self, tmp_path, chain_dir):
        net = load_road_network(chain_dir)
        p = tmp_path / "t.csv"
        self.write_traj(p, [("a", 10, 600.0), ("a", 20, 700.0),
                            ("b", 20, 3700.0), ("b", 30, 3800.0)])
        ts = load_trajectories(str(p), net, TimeSliceIndex())
        assert sorted(ts.by_slice) == [0, 2]
        assert ts.by_slice[0][0].traj_id == "a"
        # ids remapped to dense
        assert list(ts.by_slice[0][0].segments) == [0, 1]
        assert ts.n_trajectories == 2

    def test_short_trajectory_rejected(self, tmp_path, chain_dir):
        net = load_road_network(chain_dir)
        p = tmp_path / "t.csv"
        self.write_traj(p, [("a", 10, 600.0)])
        with pytest.raises(DataError, match="shorter"):
            load_trajectories(str(p), net, TimeSliceIndex())

    def test_non_increasing_times_rejected(self, tmp_path, chain_dir):
        net = load_road_network(chain_dir)
        p = tmp_path / "t.csv"
        self.write_traj(p, [("a", 10, 600.0), ("a", 20, 600.0)])
        with pytest.raises(DataError, match="strictly increasing"):
            load_trajectories(str(p), net, TimeSliceIndex())

    def test_adjacency_modes(self, tmp_path, chain_dir):
        net = load_road_network(chain_dir)
        p = tmp_path / "t.csv"
        self.write_traj(p, [("a", 30, 600.0), ("a", 10, 700.0)])  # not an edge
        with pytest.raises(DataError, match="not adjacent"):
            load_trajectories(str(p), net, TimeSliceIndex(), adjacency_mode="error")
        with pytest.warns(UserWarning):
            load_trajectories(str(p), net, TimeSliceIndex(), adjacency_mode="warn")
        ts = load_trajectories(str(p), net, TimeSliceIndex(), adjacency_mode="ignore")
        assert ts.n_trajectories == 1

    def test_unknown_segment_rejected(self, tmp_path, chain_dir):
        net = load_road_network(chain_dir)
        p = tmp_path / "t.csv"
        self.write_traj(p, [("a", 77, 600.0), ("a", 10, 700.0)])
        with pytest.raises(DataError, match="unknown segment 77"):
            load_trajectories(str(p), net, TimeSliceIndex())


class TestTrafficGrid:

    def write_traffic(self, path, rows, header="slice,segment_id,flow,speed"):
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for r in rows:
                fh.write(",".join(str(v) for v in r) + "\n")

    def test_window_anchors_four_slices_T2(self, tmp_path, chain_dir):
        net = load_road_network(chain_dir)
        p = tmp_path / "f.csv"
        rows = [(s, seg, 10.0 + s, 9.0) for s in range(4) for seg in (10, 20, 30)]
        self.write_traffic(p, rows)
        grid = load_traffic_grid(str(p), net, TimeSliceIndex())
        seqs = windows_from_grid(grid, T=2)
        assert [w.anchor_slice for w in seqs] == [2, 3, 4]
        assert seqs[0].values.shape == (2, 3, 2)
        # anchor 2 covers slices 0 and 1
        assert seqs[0].values[0, 0, 0] == 10.0
        assert seqs[0].values[1, 0, 0] == 11.0

    def test_forward_fill_then_mean_then_zero(self, tmp_path, chain_dir):
        net = load_road_network(chain_dir)
        p = tmp_path / "f.csv"
        # segment 10: observed slices 0,2 -> slice 1 forward-filled from 0
        # segment 20: observed slice 1 only -> slice 0 takes its mean
        # segment 30: never observed -> zeros
        rows = [(0, 10, 5.0, 9.0), (2, 10, 7.0, 9.5), (1, 20, 4.0, 8.0)]
        self.write_traffic(p, rows)
        grid = load_traffic_grid(str(p), net, TimeSliceIndex())
        i10, i20, i30 = net.id_map[10], net.id_map[20], net.id_map[30]
        assert grid.values[1, i10, 0] == 5.0            # forward fill
        assert grid.values[0, i20, 0] == 4.0            # segment mean
        assert np.all(grid.values[:, i30] == 0.0)       # no data at all
        assert not grid.observed[1, i10] and grid.observed[0, i10]

    def test_train_mean_upto_restricts_mean(self, tmp_path, chain_dir):
        net = load_road_network(chain_dir)
        p = tmp_path / "f.csv"
        # segment 20 observed at slices 1 and 3; leading gap at slice 0
        rows = [(0, 10, 1.0, 9.0), (3, 10, 1.0, 9.0),
                (1, 20, 4.0, 8.0), (3, 20, 10.0, 8.0)]
        self.write_traffic(p, rows)
        unrestricted = load_traffic_grid(str(p), net, TimeSliceIndex())
        limited = load_traffic_grid(str(p), net, TimeSliceIndex(), train_mean_upto=2)
        i20 = net.id_map[20]
        assert unrestricted.values[0, i20, 0] == 7.0    # mean of 4 and 10
        assert limited.values[0, i20, 0] == 4.0         # mean of train rows only

    def test_negative_flow_rejected(self, tmp_path, chain_dir):
        net = load_road_network(chain_dir)
        p = tmp_path / "f.csv"
        self.write_traffic(p, [(0, 10, -1.0, 9.0)])
        with pytest.raises(DataError, match="negative flow"):
            load_traffic_grid(str(p), net, TimeSliceIndex())

    def test_bad_window_length(self, tmp_path, chain_dir):
        net = load_road_network(chain_dir)
        p = tmp_path / "f.csv"
        self.write_traffic(p, [(0, 10, 1.0, 9.0)])
        grid = load_traffic_grid(str(p), net, TimeSliceIndex())
        with pytest.raises(DataError):
            windows_from_grid(grid, T=2)


class TestChronoSplit:

    def test_ten_anchors_622(self):
        tr, va, te = chrono_split(range(10), (0.6, 0.2, 0.2))
        assert (len(tr), len(va), len(te)) == (6, 2, 2)
        assert tr == list(range(6)) and va == [6, 7] and te == [8, 9]

    def test_three_anchors_get_one_each(self):
        tr, va, te = chrono_split([5, 6, 7], (0.6, 0.2, 0.2))
        assert (tr, va, te) == ([5], [6], [7])

    def test_ten_anchors_811(self):
        tr, va, te = chrono_split(range(10), (0.8, 0.1, 0.1))
        assert (len(tr), len(va), len(te)) == (8, 1, 1)

    def test_too_few_anchors(self):
        with pytest.raises(DataError):
            chrono_split([1, 2], (0.6, 0.2, 0.2))

    def test_partition_is_chronological_and_complete(self):
        for n in range(3, 40):
            tr, va, te = chrono_split(range(n), (0.6, 0.2, 0.2))
            assert tr + va + te == list(range(n))
            assert min(len(tr), len(va), len(te)) >= 1


class TestStore:

    def test_create_and_reload(self, tmp_path, chain_dir):
        net = load_road_network(chain_dir)
        tpath = tmp_path / "t.csv"
        with open(tpath, "w") as fh:
            fh.write("traj_id,segment_id,timestamp\n")
            fh.write("a,10,600.0\na,20,700.0\n")
        fpath = tmp_path / "f.csv"
        with open(fpath, "w") as fh:
            fh.write("slice,segment_id,flow,speed\n")
            for s in range(3):
                for seg in (10, 20, 30):
                    fh.write(f"{s},{seg},3.5,9.25\n")
        store = ingest(chain_dir, str(tpath), str(fpath), str(tmp_path / "store"))
        assert store.manifest["n_segments"] == 3
        assert store.manifest["slice_range"] == [0, 2]
        assert store.channels == ("flow", "speed")
        assert store.id_map() == {0: 10, 1: 20, 2: 30}
        net2 = store.network()
        assert np.array_equal(net2.static_features, net.static_features)
        grid = store.traffic_grid(net2)
        assert np.all(grid.observed)
        ts = store.trajectories(net2)
        assert ts.n_trajectories == 1

    def test_store_files_round_trip_bit_exact(self, tmp_path, chain_dir):
        net = load_road_network(chain_dir)
        tpath, fpath = tmp_path / "t.csv", tmp_path / "f.csv"
        with open(tpath, "w") as fh:
            fh.write("traj_id,segment_id,timestamp\n")
            fh.write("a,10,600.125\na,20,733.0625\n")
        with open(fpath, "w") as fh:
            fh.write("slice,segment_id,flow,speed\n")
            fh.write("0,10,0.1,9.3\n0,20,0.2,8.7\n0,30,0.3,7.1\n")
        s1 = ingest(chain_dir, str(tpath), str(fpath), str(tmp_path / "s1"))
        # re-ingest the canonical store's own files: bytes must be stable
        net1 = s1.network()
        ts1 = s1.trajectories(net1)
        g1 = s1.traffic_grid(net1)
        s2 = Store.create(str(tmp_path / "s2"), net1, ts1, g1, s1.slicing)
        for name in ("segments.csv", "edges.csv", "trajectories.csv", "traffic.csv"):
            assert (tmp_path / "s1" / name).read_bytes() == \
                (tmp_path / "s2" / name).read_bytes()

    def test_missing_manifest_rejected(self, tmp_path):
        with pytest.raises(DataError, match="not a store"):
            Store(str(tmp_path))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False,
                          min_value=-1e12, max_value=1e12),
                min_size=1, max_size=8))
def test_float_format_round_trip(values):
    from segtraj.data import _fmt
    for v in values:
        assert float(_fmt(v)) == float(v)


@pytest.mark.skipif(os.environ.get("SEGTRAJ_RUN_SLOW") != "1",
                    reason="set SEGTRAJ_RUN_SLOW=1 to run the full-scale ingest")
def test_full_scale_trajectory_ingest(tmp_path):
    """834,560 trajectories of two visits each, through the real loader."""
    net = random_network(64, seed=3)
    path = tmp_path / "big.csv"
    n_traj = 834_560
    with open(path, "w") as fh:
        fh.write("traj_id,segment_id,timestamp\n")
        edge = net.edges[0]
        for i in range(n_traj):
            t0 = 600.0 + i
            fh.write(f"x{i},{edge[0]},{t0}\nx{i},{edge[1]},{t0 + 30.0}\n")
    ts = load_trajectories(str(path), net, TimeSliceIndex(), adjacency_mode="ignore")
    assert ts.n_trajectories == n_traj
