"""Shared test fixtures and independent oracle implementations.

The oracles here are deliberately written as plain loops and dict counting,
structurally unlike the package's vectorized code, so agreement between the
two is meaningful evidence rather than a tautology.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from segtraj.data import (RoadNetwork, TimeSliceIndex, TrafficStateGrid, Trajectory,
                          TrajectorySet)

# frozen reference: one degree of arc on the great circle, km (R = 6371.0088)
ONE_DEGREE_KM = 111.1950802335329


# ---------------------------------------------------------------------------
# oracle: transition probabilities


def oracle_transition_prob(pairs, i, j, bucket, alpha, out_edges):
    """pairs: [(from, to, bucket), ...] observed transitions.
    out_edges: dict from -> sorted list of graph successors."""
    succ = out_edges.get(i, [])
    if j not in succ:
        return 0.0
    count = sum(1 for a, b, w in pairs if a == i and b == j and w == bucket)
    total = sum(1 for a, b, w in pairs if a == i and w == bucket and b in succ)
    denom = total + alpha * len(succ)
    if denom == 0:
        return 0.0
    return (count + alpha) / denom


# ---------------------------------------------------------------------------
# oracle: reachability by exhaustive path enumeration (tiny graphs only)


def oracle_reachable_set(v, edges, traversal_sec, budget_sec, n):
    """All u with some simple path u -> ... -> v whose cost, summed over
    every segment on the path except v itself, fits the budget."""
    adj = {}
    for a, b in edges:
        adj.setdefault(a, []).append(b)
    members = {v}
    for u in range(n):
        if u == v:
            continue
        best = math.inf
        stack = [(u, 0.0, {u})]
        while stack:
            node, cost, seen = stack.pop()
            if cost > budget_sec:
                continue
            if node == v:
                best = min(best, cost)
                continue
            for nxt in adj.get(node, []):
                if nxt not in seen:
                    stack.append((nxt, cost + traversal_sec[node], seen | {nxt}))
        if best <= budget_sec:
            members.add(u)
    return members


# ---------------------------------------------------------------------------
# oracle: scalar haversine


def oracle_haversine_km(lon1, lat1, lon2, lat2, radius_km=6371.0088):
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * radius_km * math.asin(math.sqrt(a))


# ---------------------------------------------------------------------------
# oracle: one co-attention forward, plain loops


def _oracle_softmax(vals):
    mx = max(vals)
    ex = [math.exp(v - mx) for v in vals]
    s = sum(ex)
    return [e / s for e in ex]


def _oracle_leaky(v, slope):
    return v if v >= 0 else slope * v


def _oracle_ln(vec, g, b):
    mu = sum(vec) / len(vec)
    var = sum((x - mu) ** 2 for x in vec) / len(vec)
    sd = math.sqrt(var + 1e-5)
    return [(x - mu) / sd * gi + bi for x, gi, bi in zip(vec, g, b)]


def oracle_coattention(reg, cfg, h, x, deter, reach_mask):
    """Re-derive CoAttention.forward with scalar loops; all inputs lists of
    lists of floats.  Mirrors: per-head additive logits with deterrence
    slope, leaky relu, masked softmax, value aggregation, concat + output
    projection, residual + layernorm, relu feedforward, residual + layernorm.
    """
    n = len(h)
    d = cfg.d
    dh = d // cfg.heads

    def getp(name):
        return reg[name].detach().numpy().tolist()

    def matvec(vec, W):
        return [sum(vec[i] * W[i][j] for i in range(len(vec))) for j in range(len(W[0]))]

    def block(l, dr, q_rows, kv_rows, det, mask):
        outs = [[] for _ in range(n)]
        for hd in range(cfg.heads):
            base = f"co.{l}.{dr}.{hd}."
            W5, W6 = getp(base + "W5"), getp(base + "W6")
            w7, w8 = getp(base + "w7"), getp(base + "w8")
            c = sum(a * b for a, b in zip(w7, w8))
            qa = [matvec(row, W5) for row in q_rows]
            kb = [matvec(row, W6) for row in kv_rows]
            for v_i in range(n):
                logits, idxs = [], []
                for u in range(n):
                    if not mask[v_i][u]:
                        continue
                    e = sum(qa[v_i][t] * w8[t] for t in range(dh)) \
                        + sum(kb[u][t] * w8[t] for t in range(dh)) \
                        + det[v_i][u] * c
                    logits.append(_oracle_leaky(e, cfg.leaky))
                    idxs.append(u)
                agg = [0.0] * dh
                if idxs:
                    alphas = _oracle_softmax(logits)
                    for a_w, u in zip(alphas, idxs):
                        for t in range(dh):
                            agg[t] += a_w * kb[u][t]
                outs[v_i].extend(agg)
        base = f"co.{l}.{dr}."
        Wo, bo = getp(base + "Wo"), getp(base + "bo")
        g1, b1 = getp(base + "ln1.g"), getp(base + "ln1.b")
        ff1, bf1 = getp(base + "ff1"), getp(base + "bf1")
        ff2, bf2 = getp(base + "ff2"), getp(base + "bf2")
        g2, b2 = getp(base + "ln2.g"), getp(base + "ln2.b")
        res = []
        for v_i in range(n):
            proj = matvec(outs[v_i], Wo)
            pre = [q_rows[v_i][t] + proj[t] + bo[t] for t in range(d)]
            xx = _oracle_ln(pre, g1, b1)
            hid = [max(0.0, hv + bv) for hv, bv in zip(matvec(xx, ff1), bf1)]
            ff = [fv + bv for fv, bv in zip(matvec(hid, ff2), bf2)]
            res.append(_oracle_ln([xx[t] + ff[t] for t in range(d)], g2, b2))
        return res

    det_t = [[deter[u][v_i] for u in range(n)] for v_i in range(n)]
    mask_t = [[reach_mask[u][v_i] for u in range(n)] for v_i in range(n)]
    for l in range(cfg.co_layers):
        h2 = block(l, "traj", h, x, deter, reach_mask)
        x2 = block(l, "traf", x, h, det_t, mask_t)
        h, x = h2, x2
    return h, x


# ---------------------------------------------------------------------------
# oracle: metrics


def oracle_mae(pred, target):
    flat_p = np.asarray(pred).ravel()
    flat_t = np.asarray(target).ravel()
    return sum(abs(a - b) for a, b in zip(flat_p, flat_t)) / len(flat_p)


def oracle_rmse(pred, target):
    flat_p = np.asarray(pred).ravel()
    flat_t = np.asarray(target).ravel()
    return math.sqrt(sum((a - b) ** 2 for a, b in zip(flat_p, flat_t)) / len(flat_p))


# ---------------------------------------------------------------------------
# builders for arbitrary-size in-memory data


def random_network(n: int, seed: int = 0, extra_edges: int | None = None) -> RoadNetwork:
    """Connected directed graph with n segments: a ring guarantees strong
    connectivity, random chords thicken it."""
    rng = np.random.default_rng(seed)
    lon = 103.8 + rng.uniform(0, 0.05, n)
    lat = 31.2 + rng.uniform(0, 0.05, n)
    seg_type = rng.integers(0, 2, n).astype(float)
    length = rng.uniform(300.0, 1500.0, n)
    speed = np.where(seg_type > 0.5, 60 / 3.6, 40 / 3.6)
    edges = {(i, (i + 1) % n) for i in range(n)}
    extra = 2 * n if extra_edges is None else extra_edges
    while len(edges) < n + extra:
        a, b = int(rng.integers(n)), int(rng.integers(n))
        if a != b:
            edges.add((a, b))
    feats = np.stack([lon, lat, seg_type, length, speed], axis=1)
    return RoadNetwork(original_ids=np.arange(n, dtype=np.int64),
                       static_features=feats,
                       edges=np.array(sorted(edges), dtype=np.int64))


def random_walks(net: RoadNetwork, slicing: TimeSliceIndex, slices: list,
                 per_slice: int, seed: int = 0, min_len: int = 3,
                 max_len: int = 12) -> TrajectorySet:
    rng = np.random.default_rng(seed)
    by_slice = {}
    for g in slices:
        bucket = []
        for i in range(per_slice):
            m = int(rng.integers(min_len, max_len + 1))
            seg = int(rng.integers(net.n))
            t = slicing.slice_start(g) + float(rng.uniform(0, slicing.slice_duration / 3))
            segs, times = [seg], [t]
            while len(segs) < m:
                outs = net.out_neighbors[segs[-1]]
                if len(outs) == 0:
                    break
                nxt = int(outs[int(rng.integers(len(outs)))])
                t += float(rng.uniform(30.0, 180.0))
                segs.append(nxt)
                times.append(t)
            bucket.append(Trajectory(f"w{g}_{i}", np.array(segs, dtype=np.int64),
                                     np.array(times, dtype=np.float64)))
        by_slice[g] = bucket
    return TrajectorySet(by_slice=by_slice, slicing=slicing)


def random_grid(net: RoadNetwork, n_slices: int, seed: int = 0,
                first_slice: int = 0) -> TrafficStateGrid:
    rng = np.random.default_rng(seed)
    vals = np.stack([rng.uniform(5.0, 100.0, (n_slices, net.n)),
                     rng.uniform(2.0, 17.0, (n_slices, net.n))], axis=-1)
    return TrafficStateGrid(values=vals, observed=np.ones((n_slices, net.n), dtype=bool),
                            first_slice=first_slice, channel_schema=("flow", "speed"))


def tiny_model(n=12, d=16, d_x=16, T=4, seed=0, n_slices=20, per_slice=4,
               dropout=0.0, **cfg_kw):
    """A complete in-memory model + data bundle for unit tests."""
    from segtraj.model import JointModel, ModelConfig
    from segtraj.prep import build_deterrence, build_reachable_sets, build_transition_tensor

    slicing = TimeSliceIndex()
    net = random_network(n, seed=seed)
    slices = list(range(T, T + n_slices))
    trajset = random_walks(net, slicing, slices, per_slice, seed=seed + 1)
    grid = random_grid(net, n_slices + T + 8, seed=seed + 2)
    trans = build_transition_tensor(trajset, net, slicing, alpha=1.0)
    reach = build_reachable_sets(net, budget_minutes=10.0)
    deter = build_deterrence(net)
    flat = grid.values.reshape(-1, 2)
    base = dict(heads=4, traj_layers=2, traffic_layers=2,
                co_layers=1, gat_layers=2, ffn_mult=2)
    base.update(cfg_kw)
    cfg = ModelConfig(d=d, d_x=d_x, T=T, dropout=dropout, **base)
    model = JointModel(cfg, net, slicing, trans, reach, deter,
                       flat.mean(axis=0), flat.std(axis=0), seed=seed)
    return {"model": model, "net": net, "slicing": slicing, "trajset": trajset,
            "grid": grid, "trans": trans, "reach": reach, "deter": deter,
            "slices": slices}


def torch_allclose(a, b, tol=1e-9):
    return bool(torch.allclose(torch.as_tensor(a, dtype=torch.float64),
                               torch.as_tensor(b, dtype=torch.float64),
                               atol=tol, rtol=0.0))
