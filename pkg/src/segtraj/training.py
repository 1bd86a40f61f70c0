"""Joint pretraining.

Batches are slice-aligned: every trajectory in a batch departs in the same
slice, so one segment-state computation (graph attention + traffic window +
fusion) serves the whole batch.  All randomness in an epoch is derived from
(seed, epoch) which makes loss traces bit-reproducible and lets a resumed
run replay the exact remaining epochs.

A BatchPlan freezes every stochastic choice (sampled trajectories, masked
visits, masked cells, augmented views) so the loss of a plan is a pure
deterministic function of the parameters; the gradient checker and the
training loop share that code path.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import Store, TrafficStateGrid, TrajectorySet, chrono_split, _fmt
from .fusion import matching_loss, pool_context
from .model import JointModel, ModelConfig
from .nd import derive_seed, load_checkpoint, save_checkpoint
from .prep import (build_deterrence, build_reachable_sets, build_transition_tensor,
                   load_prep)
from .trafficview import masked_cells, msp_loss, nsp_loss
from .trajview import augment, ctl_loss, masked_span_positions, mtp_ce_loss, mtp_time_loss

LOSS_KEYS = ("mtp_ce", "mtp_time", "ctl", "msp", "nsp", "match", "total")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    batches_per_epoch: int | None = None   # None = every eligible train anchor
    lr: float = 1e-3
    clip_norm: float = 5.0
    seed: int = 0
    budget_minutes: float = 10.0
    trans_alpha: float = 1.0
    deter_gamma: float = 1.0
    deter_eps: float = 0.1
    split_ratios: tuple = (0.6, 0.2, 0.2)


@dataclass
class BatchPlan:
    """Every random decision of one optimization step, frozen."""

    anchor: int
    batch: list                      # [(segments, times), ...]
    mask_pos: list                   # per trajectory bool array over visits
    views: list                      # [((segs, times), (segs, times)), ...]
    msp_mask: torch.Tensor           # (T, N) bool
    time_targets: list = field(default_factory=list)  # minutes from departure
    partner_anchor: int | None = None     # second slice for matching negatives
    partner_batch: list = field(default_factory=list)


def eligible_anchors(trajset: TrajectorySet, grid: TrafficStateGrid, T: int) -> list:
    """Slices that have trajectories, a full preceding window, and a true
    state of their own (needed as the next-state target)."""
    out = []
    for t in trajset.slices():
        if t - T >= grid.first_slice and t <= grid.last_slice and trajset.by_slice[t]:
            out.append(t)
    return out


def _sample_batch(trajset: TrajectorySet, anchor: int, batch_size: int,
                  max_len: int, rng: np.random.Generator) -> list:
    bucket = trajset.by_slice[anchor]
    idx = np.arange(len(bucket))
    if len(bucket) > batch_size:
        idx = rng.choice(len(bucket), size=batch_size, replace=False)
    return [(bucket[int(i)].segments[:max_len], bucket[int(i)].times[:max_len])
            for i in idx]


def make_plan(model: JointModel, trajset: TrajectorySet, anchor: int,
              batch_size: int, rng: np.random.Generator,
              partner_pool: list | None = None) -> BatchPlan:
    """partner_pool, when given, supplies a second slice whose trajectories
    join the matching loss, so the model must tell slices apart and not just
    trajectories within one slice."""
    cfg = model.cfg
    batch = _sample_batch(trajset, anchor, batch_size, cfg.max_len, rng)
    mask_pos, views, time_targets = [], [], []
    for segs, times in batch:
        mp = masked_span_positions(len(segs), cfg.mask_frac_traj, cfg.mask_span_traj, rng)
        mask_pos.append(mp)
        time_targets.append((times[mp] - times[0]) / 60.0)
        views.append((augment(segs, times, rng, cfg.crop_keep, cfg.jitter_seconds),
                      augment(segs, times, rng, cfg.crop_keep, cfg.jitter_seconds)))
    msp = torch.as_tensor(masked_cells(cfg.T, cfg.n_segments, cfg.mask_frac_traffic,
                                       cfg.mask_span_traffic, rng))
    partner, partner_batch = None, []
    if partner_pool is not None:
        others = [a for a in partner_pool
                  if a != anchor and trajset.by_slice.get(a)]
        if others:
            partner = int(others[int(rng.integers(len(others)))])
            partner_batch = _sample_batch(trajset, partner, batch_size,
                                          cfg.max_len, rng)
    return BatchPlan(anchor=anchor, batch=batch, mask_pos=mask_pos, views=views,
                     msp_mask=msp, time_targets=time_targets,
                     partner_anchor=partner, partner_batch=partner_batch)


def plan_losses(model: JointModel, grid: TrafficStateGrid, plan: BatchPlan,
                train: bool = False) -> dict:
    """Deterministic losses of one frozen plan; keys match LOSS_KEYS."""
    cfg = model.cfg
    states = model.segment_states(grid, plan.anchor, msp_mask=plan.msp_mask, train=train)

    # traffic: masked-cell reconstruction + next-slice prediction
    msp_target = states["window_z"][plan.msp_mask]
    msp = msp_loss(model.traffic.msp_pred(states["pre"], plan.msp_mask), msp_target)
    nsp_target = model.normalize(grid.state(plan.anchor))
    nsp = nsp_loss(model.nsp_pred(states["xf"]), nsp_target)

    # trajectory: masked visits on the fused segment table
    hf = states["hf"]
    enc_m, valid_m = model.encode_batch(plan.batch, hf, "full", plan.mask_pos, train)
    logits = model.traj.mtp_logits(enc_m)
    tpred = model.traj.time_pred(enc_m)
    sel_logits, sel_targets, sel_tpred, sel_ttarget = [], [], [], []
    for i, (segs, _) in enumerate(plan.batch):
        mp = torch.as_tensor(plan.mask_pos[i], dtype=torch.bool)
        sel_logits.append(logits[i, :len(segs)][mp])
        sel_targets.append(torch.as_tensor(np.asarray(segs), dtype=torch.long)[mp])
        sel_tpred.append(tpred[i, :len(segs)][mp])
        sel_ttarget.append(torch.as_tensor(plan.time_targets[i]))
    mtp_ce = mtp_ce_loss(torch.cat(sel_logits), torch.cat(sel_targets))
    mtp_time = mtp_time_loss(torch.cat(sel_tpred), torch.cat(sel_ttarget))

    # contrastive views
    va = [v[0] for v in plan.views]
    vb = [v[1] for v in plan.views]
    enc_a, _ = model.encode_batch(va, hf, "full", None, train)
    enc_b, _ = model.encode_batch(vb, hf, "full", None, train)
    za = model.traj.ctl_project(model.traj.traj_rep(enc_a))
    zb = model.traj.ctl_project(model.traj.traj_rep(enc_b))
    ctl = ctl_loss(za, zb, cfg.tau)

    # trajectory-traffic matching on unperturbed encodings; a partner slice,
    # when planned, contributes the hard negatives that matter: the same
    # segments pooled over the other slice's states
    enc_o, _ = model.encode_batch(plan.batch, hf, "full", None, train)
    reps = [model.traj.traj_rep(enc_o)]
    ctxs = [pool_context(states["xf"], segs) for segs, _ in plan.batch]
    extra = None
    if plan.partner_anchor is not None and plan.partner_batch:
        pstates = model.segment_states(grid, plan.partner_anchor, train=train)
        enc_p, _ = model.encode_batch(plan.partner_batch, pstates["hf"], "full",
                                      None, train)
        reps.append(model.traj.traj_rep(enc_p))
        ctxs.extend(pool_context(pstates["xf"], segs)
                    for segs, _ in plan.partner_batch)
        crossed = [pool_context(pstates["xf"], segs) for segs, _ in plan.batch]
        crossed += [pool_context(states["xf"], segs)
                    for segs, _ in plan.partner_batch]
        extra = model.match_ctx(torch.stack(crossed))
    l_reps = model.match_traj(torch.cat(reps))
    match = matching_loss(l_reps, model.match_ctx(torch.stack(ctxs)), cfg.tau,
                          extra_ctx=extra)

    total = cfg.lambda_traj * (mtp_ce + mtp_time + ctl) \
        + cfg.lambda_traf * (msp + nsp) \
        + cfg.lambda_match * match
    return {"mtp_ce": mtp_ce, "mtp_time": mtp_time, "ctl": ctl,
            "msp": msp, "nsp": nsp, "match": match, "total": total}


# ---------------------------------------------------------------------------
# data assembly


def build_model(store: Store, model_cfg: ModelConfig, train_cfg: TrainConfig,
                seed: int | None = None):
    """Load (or compute) everything a model needs from a store and split
    the eligible anchors chronologically.  Returns (model, grid, trajset,
    split dict)."""
    net = store.network()
    slicing = store.slicing
    trajset = store.trajectories(net, adjacency_mode="ignore")

    grid = store.traffic_grid(net)
    anchors = eligible_anchors(trajset, grid, model_cfg.T)
    train_a, val_a, test_a = chrono_split(anchors, train_cfg.split_ratios)
    split = {"train": list(map(int, train_a)), "val": list(map(int, val_a)),
             "test": list(map(int, test_a))}

    prep_dir = store.file("prep")
    if os.path.exists(os.path.join(prep_dir, "prep_manifest.json")):
        trans, reach, deter = load_prep(store)
    else:
        # transition counts only from trajectories departing before the
        # validation range; the tensor is a trained prior, not static geometry
        train_trajs = TrajectorySet(
            by_slice={s: b for s, b in trajset.by_slice.items()
                      if s < split["val"][0]},
            slicing=slicing)
        trans = build_transition_tensor(train_trajs, net, slicing, train_cfg.trans_alpha)
        reach = build_reachable_sets(net, train_cfg.budget_minutes)
        deter = build_deterrence(net, train_cfg.deter_gamma, train_cfg.deter_eps)
    # re-impute with leakage-free means, then normalize on training slices only
    grid = store.traffic_grid(net, train_mean_upto=split["val"][0])
    upto = split["val"][0] - grid.first_slice
    train_vals = grid.values[:upto].reshape(-1, grid.values.shape[-1])
    chan_mean = train_vals.mean(axis=0)
    chan_std = train_vals.std(axis=0)
    model = JointModel(model_cfg, net, slicing, trans, reach, deter,
                       chan_mean, chan_std,
                       seed=train_cfg.seed if seed is None else seed)
    return model, grid, trajset, split


# ---------------------------------------------------------------------------
# the loop


def pretrain(store: Store, model_cfg: ModelConfig | None = None,
             train_cfg: TrainConfig | None = None, out_dir: str | None = None) -> dict:
    model_cfg = model_cfg or ModelConfig()
    train_cfg = train_cfg or TrainConfig()
    model, grid, trajset, split = build_model(store, model_cfg, train_cfg)
    store.write_split(split)
    opt = torch.optim.Adam(model.reg.parameters(), lr=train_cfg.lr)

    trace = []
    for epoch in range(train_cfg.epochs):
        torch.manual_seed(derive_seed(train_cfg.seed, "epoch", epoch))
        rng = np.random.default_rng(derive_seed(train_cfg.seed, "epoch", epoch, "plan"))
        order = rng.permutation(split["train"])
        if train_cfg.batches_per_epoch is not None:
            order = order[:train_cfg.batches_per_epoch]
        sums = {k: 0.0 for k in LOSS_KEYS}
        for anchor in order:
            plan = make_plan(model, trajset, int(anchor), train_cfg.batch_size, rng,
                             partner_pool=split["train"])
            losses = plan_losses(model, grid, plan, train=True)
            opt.zero_grad()
            losses["total"].backward()
            torch.nn.utils.clip_grad_norm_(model.reg.parameters(), train_cfg.clip_norm)
            opt.step()
            for k in LOSS_KEYS:
                sums[k] += float(losses[k].item())
        row = {"epoch": epoch}
        row.update({k: sums[k] / max(1, len(order)) for k in LOSS_KEYS})
        trace.append(row)

    result = {"model": model, "grid": grid, "trajset": trajset, "split": split,
              "trace": trace}
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_trace(trace, os.path.join(out_dir, "loss_trace.csv"))
        ckpt = os.path.join(out_dir, "checkpoint")
        save_checkpoint(ckpt, model.reg, optimizer=opt, extra={
            "model_cfg": model.cfg.to_dict(),
            "train_cfg": {k: (list(v) if isinstance(v, tuple) else v)
                          for k, v in vars(train_cfg).items()},
            "chan_mean": list(map(float, model.chan_mean)),
            "chan_std": list(map(float, model.chan_std)),
            "split": split,
            "epochs_done": train_cfg.epochs,
        })
        result["checkpoint"] = ckpt
    return result


def write_trace(trace: list, path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("epoch",) + LOSS_KEYS)
        for row in trace:
            w.writerow([row["epoch"]] + [_fmt(row[k]) for k in LOSS_KEYS])


def load_pretrained(ckpt_dir: str, store: Store) -> dict:
    """Rebuild a model from a checkpoint against its store."""
    import json
    with open(os.path.join(ckpt_dir, "manifest.json")) as fh:
        extra = json.load(fh)["extra"]
    model_cfg = ModelConfig.from_dict(extra["model_cfg"])
    tc = dict(extra["train_cfg"])
    tc["split_ratios"] = tuple(tc.get("split_ratios", (0.6, 0.2, 0.2)))
    train_cfg = TrainConfig(**tc)
    model, grid, trajset, _ = build_model(store, model_cfg, train_cfg)
    # the persisted split and stats win over anything recomputed
    split = extra["split"]
    model.chan_mean = np.asarray(extra["chan_mean"], dtype=np.float64)
    model.chan_std = np.asarray(extra["chan_std"], dtype=np.float64)
    model._cm = torch.as_tensor(model.chan_mean)
    model._cs = torch.as_tensor(model.chan_std)
    load_checkpoint(ckpt_dir, model.reg)
    return {"model": model, "grid": grid, "trajset": trajset, "split": split}
