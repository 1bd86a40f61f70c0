import os

import numpy as np
import pytest
import torch

from segtraj import synth
from segtraj.data import Store
from segtraj.model import ModelConfig
from segtraj.training import (LOSS_KEYS, TrainConfig, build_model,
                              eligible_anchors, load_pretrained, make_plan,
                              plan_losses, pretrain)

from helpers import tiny_model

SMALL_MODEL = dict(d=16, d_x=16, T=4, heads=4, traj_layers=2, traffic_layers=2,
                   co_layers=1, gat_layers=1, ffn_mult=2, dropout=0.0)
SMALL_TRAIN = dict(epochs=2, batch_size=4, batches_per_epoch=3, lr=1e-3, seed=0)


@pytest.fixture(scope="module")
def bundle():
    return tiny_model(n=10, seed=4)


@pytest.fixture(scope="module")
def store(tmp_path_factory):
    out = tmp_path_factory.mktemp("store")
    return synth.generate(str(out / "data"), k=3, days=2, traj_per_slice=3, seed=0)


class TestAnchors:

    def test_window_and_target_bounds(self, bundle):
        got = eligible_anchors(bundle["trajset"], bundle["grid"], bundle["model"].cfg.T)
        grid, T = bundle["grid"], bundle["model"].cfg.T
        assert got
        for t in got:
            assert t - T >= grid.first_slice
            assert t <= grid.last_slice
            assert bundle["trajset"].by_slice[t]

    def test_sorted_unique(self, bundle):
        got = eligible_anchors(bundle["trajset"], bundle["grid"], bundle["model"].cfg.T)
        assert got == sorted(set(got))


class TestPlans:

    def test_same_rng_same_plan(self, bundle):
        model, trajset = bundle["model"], bundle["trajset"]
        anchor = bundle["slices"][3]
        p1 = make_plan(model, trajset, anchor, 4, np.random.default_rng(9))
        p2 = make_plan(model, trajset, anchor, 4, np.random.default_rng(9))
        assert len(p1.batch) == len(p2.batch)
        for (s1, t1), (s2, t2) in zip(p1.batch, p2.batch):
            assert np.array_equal(s1, s2) and np.array_equal(t1, t2)
        for m1, m2 in zip(p1.mask_pos, p2.mask_pos):
            assert np.array_equal(m1, m2)
        for (a1, b1), (a2, b2) in zip(p1.views, p2.views):
            assert np.array_equal(a1[0], a2[0]) and np.array_equal(b1[0], b2[0])
        assert torch.equal(p1.msp_mask, p2.msp_mask)

    def test_batch_size_cap(self, bundle):
        model, trajset = bundle["model"], bundle["trajset"]
        anchor = bundle["slices"][3]
        p = make_plan(model, trajset, anchor, 2, np.random.default_rng(0))
        assert len(p.batch) == 2

    def test_partner_slice_sampled_from_pool(self, bundle):
        model, trajset = bundle["model"], bundle["trajset"]
        anchor = bundle["slices"][3]
        pool = bundle["slices"][:6]
        p = make_plan(model, trajset, anchor, 4, np.random.default_rng(7),
                      partner_pool=pool)
        assert p.partner_anchor in pool and p.partner_anchor != anchor
        assert 1 <= len(p.partner_batch) <= 4
        q = make_plan(model, trajset, anchor, 4, np.random.default_rng(7),
                      partner_pool=pool)
        assert q.partner_anchor == p.partner_anchor
        assert all(np.array_equal(a[0], b[0])
                   for a, b in zip(p.partner_batch, q.partner_batch))
        r = make_plan(model, trajset, anchor, 4, np.random.default_rng(7))
        assert r.partner_anchor is None and r.partner_batch == []

    def test_time_targets_in_minutes_from_departure(self, bundle):
        model, trajset = bundle["model"], bundle["trajset"]
        anchor = bundle["slices"][3]
        p = make_plan(model, trajset, anchor, 4, np.random.default_rng(1))
        for (segs, times), mp, tt in zip(p.batch, p.mask_pos, p.time_targets):
            assert np.allclose(tt, (times[mp] - times[0]) / 60.0)
            assert np.all(tt >= 0.0)


class TestPlanLosses:

    def test_keys_finite_and_total(self, bundle):
        model, trajset, grid = bundle["model"], bundle["trajset"], bundle["grid"]
        plan = make_plan(model, trajset, bundle["slices"][3], 4,
                         np.random.default_rng(2))
        losses = plan_losses(model, grid, plan)
        assert set(losses) == set(LOSS_KEYS)
        for k in LOSS_KEYS:
            assert torch.isfinite(losses[k]), k
        parts = losses["mtp_ce"] + losses["mtp_time"] + losses["ctl"] \
            + losses["msp"] + losses["nsp"] + losses["match"]
        assert abs(float((losses["total"] - parts).detach())) < 1e-12

    def test_pure_function_of_plan(self, bundle):
        model, trajset, grid = bundle["model"], bundle["trajset"], bundle["grid"]
        plan = make_plan(model, trajset, bundle["slices"][3], 4,
                         np.random.default_rng(3))
        a = plan_losses(model, grid, plan)
        b = plan_losses(model, grid, plan)
        for k in LOSS_KEYS:
            assert float(a[k].detach()) == float(b[k].detach())

    def test_gradients_reach_every_tower(self, bundle):
        model, trajset, grid = bundle["model"], bundle["trajset"], bundle["grid"]
        plan = make_plan(model, trajset, bundle["slices"][3], 4,
                         np.random.default_rng(4))
        model.reg.zero_grad()
        plan_losses(model, grid, plan)["total"].backward()
        probes = ["seg.in.W", "traf.in.state.W", "traj.attn.0.Wq",
                  "co.0.traj.0.W5", "head.match.l.W"]
        for name in probes:
            g = model.reg[name].grad
            assert g is not None and float(g.abs().sum()) > 0.0, name


class TestPretrain:

    def test_short_run_decreases_loss(self, store, tmp_path):
        cfg = ModelConfig(**SMALL_MODEL)
        tc = TrainConfig(epochs=5, batch_size=4, batches_per_epoch=4, lr=3e-3, seed=0)
        out = str(tmp_path / "run")
        result = pretrain(store, cfg, tc, out_dir=out)
        trace = result["trace"]
        assert len(trace) == 5
        assert trace[-1]["total"] < trace[0]["total"]
        assert os.path.exists(os.path.join(out, "loss_trace.csv"))
        assert os.path.exists(os.path.join(out, "checkpoint", "params.bin"))

    def test_trace_file_format(self, store, tmp_path):
        cfg = ModelConfig(**SMALL_MODEL)
        tc = TrainConfig(**SMALL_TRAIN)
        out = str(tmp_path / "run")
        pretrain(store, cfg, tc, out_dir=out)
        with open(os.path.join(out, "loss_trace.csv")) as fh:
            lines = fh.read().splitlines()
        assert lines[0] == "epoch," + ",".join(LOSS_KEYS)
        assert len(lines) == 1 + tc.epochs
        # every numeric field parses back to a float exactly
        for ln in lines[1:]:
            cells = ln.split(",")
            assert int(cells[0]) >= 0
            for c in cells[1:]:
                float(c)

    def test_bit_identical_across_runs(self, store, tmp_path):
        cfg = ModelConfig(**SMALL_MODEL)
        tc = TrainConfig(**SMALL_TRAIN)
        out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
        pretrain(store, cfg, tc, out_dir=out1)
        pretrain(store, cfg, tc, out_dir=out2)
        with open(os.path.join(out1, "loss_trace.csv"), "rb") as fh:
            t1 = fh.read()
        with open(os.path.join(out2, "loss_trace.csv"), "rb") as fh:
            t2 = fh.read()
        assert t1 == t2
        with open(os.path.join(out1, "checkpoint", "params.bin"), "rb") as fh:
            p1 = fh.read()
        with open(os.path.join(out2, "checkpoint", "params.bin"), "rb") as fh:
            p2 = fh.read()
        assert p1 == p2

    def test_reload_restores_parameters(self, store, tmp_path):
        cfg = ModelConfig(**SMALL_MODEL)
        tc = TrainConfig(**SMALL_TRAIN)
        out = str(tmp_path / "run")
        result = pretrain(store, cfg, tc, out_dir=out)
        restored = load_pretrained(os.path.join(out, "checkpoint"), store)
        ra, rb = result["model"].reg, restored["model"].reg
        assert ra.names() == rb.names()
        for name in ra.names():
            assert torch.equal(ra[name], rb[name]), name
        assert restored["split"] == result["split"]
        assert np.array_equal(restored["model"].chan_mean, result["model"].chan_mean)


class TestBuildModel:

    def test_split_is_chronological_and_disjoint(self, store):
        cfg = ModelConfig(**SMALL_MODEL)
        model, grid, trajset, split = build_model(store, cfg, TrainConfig())
        tr, va, te = split["train"], split["val"], split["test"]
        assert tr and va and te
        assert max(tr) < min(va) < min(te)
        assert max(va) < min(te)
        assert not (set(tr) & set(va)) and not (set(va) & set(te))

    def test_normalization_from_train_slices_only(self, store):
        cfg = ModelConfig(**SMALL_MODEL)
        model, grid, trajset, split = build_model(store, cfg, TrainConfig())
        upto = split["val"][0] - grid.first_slice
        flat = grid.values[:upto].reshape(-1, grid.values.shape[-1])
        assert np.allclose(model.chan_mean, flat.mean(axis=0))
        assert np.allclose(model.chan_std, flat.std(axis=0))
