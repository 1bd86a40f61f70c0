"""Downstream evaluation: multi-step state prediction, travel time
estimation, and trajectory-to-slice matching, each against the required
reference baseline.

Task heads are fit on frozen pretrained features by ordinary least squares
(bias column included).  That keeps the "fine-tune on the training split"
step deterministic and hyperparameter-free, which matters because every
comparison below is a hard pass/fail gate.
"""

from __future__ import annotations

import numpy as np
import torch

from .data import TrafficStateGrid, TrajectorySet
from .model import JointModel

# ---------------------------------------------------------------------------
# metrics


def mae(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.abs(np.asarray(pred) - np.asarray(target)).mean())


def rmse(pred: np.ndarray, target: np.ndarray) -> float:
    d = np.asarray(pred) - np.asarray(target)
    return float(np.sqrt((d ** 2).mean()))


def mape(pred: np.ndarray, target: np.ndarray, eps: float = 1e-8) -> float:
    p, t = np.asarray(pred), np.asarray(target)
    return float((np.abs(p - t) / np.maximum(np.abs(t), eps)).mean())


def top1_accuracy(scores: np.ndarray, true_idx: np.ndarray) -> float:
    return float((np.argmax(scores, axis=1) == np.asarray(true_idx)).mean())


# ---------------------------------------------------------------------------
# baselines


class HistoricalAverage:
    """Per (slice-of-day, segment, channel) mean over the training range,
    falling back to the segment mean, then the global mean."""

    def __init__(self, grid: TrafficStateGrid, slicing, train_upto: int):
        spd = slicing.slices_per_day
        S, N, C = grid.values.shape
        upto = min(S, max(0, train_upto - grid.first_slice))
        sums = np.zeros((spd, N, C))
        counts = np.zeros((spd, 1, 1))
        for s in range(upto):
            sod = slicing.slice_of_day(grid.first_slice + s)
            sums[sod] += grid.values[s]
            counts[sod] += 1
        seg_mean = grid.values[:upto].mean(axis=0) if upto else np.zeros((N, C))
        self.table = np.where(counts > 0, sums / np.maximum(counts, 1), seg_mean[None])
        self.slicing = slicing

    def predict(self, slice_id: int) -> np.ndarray:
        return self.table[self.slicing.slice_of_day(slice_id)]


def mean_duration_baseline(trajset: TrajectorySet, anchors: list) -> float:
    durs = [tr.duration_minutes for a in anchors for tr in trajset.by_slice.get(a, [])]
    return float(np.mean(durs))


# ---------------------------------------------------------------------------
# frozen-feature helpers


def fit_linear(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Least squares with a bias column; returns (p+1, q)."""
    Xb = np.concatenate([X, np.ones((len(X), 1))], axis=1)
    W, *_ = np.linalg.lstsq(Xb, Y, rcond=None)
    return W


def apply_linear(X: np.ndarray, W: np.ndarray) -> np.ndarray:
    return np.concatenate([X, np.ones((len(X), 1))], axis=1) @ W


def segment_state_table(model: JointModel, grid: TrafficStateGrid, anchor: int,
                        severed: bool = False, side: str = "traf") -> torch.Tensor:
    """Fused per-segment states (N, d) of one slice, no gradients.

    side="traf" gives the traffic-view states (contexts, state forecasting);
    side="traj" gives the trajectory-view states, the table the trajectory
    encoder consumed throughout pretraining."""
    with torch.no_grad():
        states = model.segment_states(grid, anchor, severed=severed)
        return states["xf" if side == "traf" else "hf"]


def trajectory_reps(model: JointModel, grid: TrafficStateGrid, trajs: list,
                    anchor: int, time_mode: str = "full",
                    table: torch.Tensor | None = None,
                    chunk: int = 64) -> torch.Tensor:
    """(B, d) sequence representations of trajectories sharing one anchor.

    The default table is the trajectory-view one, matching pretraining."""
    if table is None:
        table = segment_state_table(model, grid, anchor, side="traj")
    cfg = model.cfg
    reps = []
    with torch.no_grad():
        for lo in range(0, len(trajs), chunk):
            batch = [(tr.segments[:cfg.max_len], tr.times[:cfg.max_len])
                     for tr in trajs[lo:lo + chunk]]
            enc, _ = model.encode_batch(batch, table, time_mode, None, train=False)
            reps.append(model.traj.traj_rep(enc))
    return torch.cat(reps, dim=0)


# ---------------------------------------------------------------------------
# multi-step traffic state prediction


def mstsp_eval(model: JointModel, grid: TrafficStateGrid, split: dict) -> dict:
    """Fit a linear head from frozen segment states to the next `horizon`
    slices (normalized), evaluate raw-space MAE on the test anchors, and
    compare with the historical average."""
    H, C = model.cfg.horizon, model.cfg.c2

    def usable(anchors):
        return [a for a in anchors if a + H - 1 <= grid.last_slice]

    def targets(a):
        lo = a - grid.first_slice
        return grid.values[lo:lo + H]                # (H, N, C) raw

    def features(anchors):
        X, Yz = [], []
        for a in anchors:
            xf = segment_state_table(model, grid, a).numpy()
            z = (targets(a) - model.chan_mean) / model.chan_std    # (H, N, C)
            X.append(xf)
            Yz.append(z.transpose(1, 0, 2).reshape(len(xf), H * C))
        return np.concatenate(X), np.concatenate(Yz)

    tr_a, te_a = usable(split["train"]), usable(split["test"])
    Xtr, Ytr = features(tr_a)
    W = fit_linear(Xtr, Ytr)

    ha = HistoricalAverage(grid, model.slicing, train_upto=split["val"][0])
    preds, base, raws = [], [], []
    for a in te_a:
        xf = segment_state_table(model, grid, a).numpy()
        z = apply_linear(xf, W).reshape(len(xf), H, C).transpose(1, 0, 2)
        preds.append(z * model.chan_std + model.chan_mean)
        raws.append(targets(a))
        base.append(np.stack([ha.predict(a + h) for h in range(H)]))
    pred, target, basep = np.stack(preds), np.stack(raws), np.stack(base)
    return {
        "task": "mstsp",
        "n_train_anchors": len(tr_a), "n_test_anchors": len(te_a),
        "mae_model": mae(pred, target), "mae_baseline": mae(basep, target),
        "rmse_model": rmse(pred, target), "rmse_baseline": rmse(basep, target),
        "rel_improvement": 1.0 - mae(pred, target) / mae(basep, target),
    }


# ---------------------------------------------------------------------------
# travel time estimation


def tte_eval(model: JointModel, grid: TrafficStateGrid, trajset: TrajectorySet,
             split: dict) -> dict:
    """Departure-time-only trajectory reps -> duration, against the train
    mean duration."""

    def collect(anchors):
        X, y = [], []
        for a in anchors:
            trajs = trajset.by_slice.get(a, [])
            if not trajs:
                continue
            reps = trajectory_reps(model, grid, trajs, a, time_mode="departure_only")
            X.append(reps.numpy())
            y.extend(tr.duration_minutes for tr in trajs)
        return np.concatenate(X), np.array(y)

    Xtr, ytr = collect(split["train"])
    Xte, yte = collect(split["test"])
    W = fit_linear(Xtr, ytr[:, None])
    pred = apply_linear(Xte, W)[:, 0]
    base = mean_duration_baseline(trajset, split["train"])
    return {
        "task": "tte",
        "n_train": len(ytr), "n_test": len(yte),
        "mae_model": mae(pred, yte), "mae_baseline": mae(np.full_like(yte, base), yte),
        "rmse_model": rmse(pred, yte),
        "rel_improvement": 1.0 - mae(pred, yte) / mae(np.full_like(yte, base), yte),
    }


# ---------------------------------------------------------------------------
# trajectory-slice matching


def matching_eval(model: JointModel, grid: TrafficStateGrid, trajset: TrajectorySet,
                  split: dict, n_candidates: int = 4, max_queries: int = 200,
                  seed: int = 0) -> dict:
    """Rank the true departure slice's traffic context among distractor
    slices, scoring with the matching projections; reports top-1 accuracy."""
    rng = np.random.default_rng(seed)
    anchors = [a for a in split["test"] if trajset.by_slice.get(a)]
    tables: dict = {}
    traj_tables: dict = {}

    def table(a):
        if a not in tables:
            tables[a] = segment_state_table(model, grid, a)
        return tables[a]

    def traj_table(a):
        if a not in traj_tables:
            traj_tables[a] = segment_state_table(model, grid, a, side="traj")
        return traj_tables[a]

    queries = [(a, tr) for a in anchors for tr in trajset.by_slice[a]]
    if len(queries) > max_queries:
        pick = rng.choice(len(queries), size=max_queries, replace=False)
        queries = [queries[int(i)] for i in sorted(pick)]

    correct, scores_all = 0, []
    with torch.no_grad():
        for a, tr in queries:
            rep = trajectory_reps(model, grid, [tr], a, table=traj_table(a))
            l = model.match_traj(rep)[0]
            others = [x for x in anchors if x != a]
            cand = [a] + [others[int(i)] for i in
                          rng.choice(len(others), size=n_candidates - 1, replace=False)]
            idx = torch.as_tensor(np.asarray(tr.segments), dtype=torch.long)
            ctxs = torch.stack([table(c)[idx].mean(dim=0) for c in cand])
            cs = model.match_ctx(ctxs)
            ln = l / l.norm().clamp_min(1e-12)
            cn = cs / cs.norm(dim=-1, keepdim=True).clamp_min(1e-12)
            scores = (cn @ ln).numpy()
            scores_all.append(scores)
            correct += int(np.argmax(scores) == 0)
    return {
        "task": "matching",
        "n_queries": len(queries), "n_candidates": n_candidates,
        "top1": correct / max(1, len(queries)),
    }
