"""Command line entry points.

    segtraj synth      generate a synthetic store
    segtraj ingest     validate raw files into a canonical store
    segtraj prep       build transition / reachability / deterrence artifacts
    segtraj pretrain   joint self-supervised training, checkpoint + curves
    segtraj export-seg dump per-segment states of a slice (optionally severed)
    segtraj export-traj dump trajectory representations of a slice
    segtraj eval-mstsp / eval-tte / eval-match   downstream evaluations
    segtraj gradcheck  finite-difference audit of every loss on tiny data

Evaluation and pretrain commands write delimited results plus rendered
figures into their output directory.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile

import numpy as np

from . import evaltasks, report, synth
from .data import DataError, Store, ingest
from .model import ModelConfig
from .nd import grad_check
from .prep import run_prep
from .training import TrainConfig, load_pretrained, make_plan, plan_losses, pretrain


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--d-x", type=int, default=64)
    p.add_argument("--window", type=int, default=8, help="traffic window length T")
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--dropout", type=float, default=0.15)
    p.add_argument("--traj-layers", type=int, default=6)
    p.add_argument("--traffic-layers", type=int, default=3)
    p.add_argument("--co-layers", type=int, default=2)
    p.add_argument("--gat-layers", type=int, default=2)
    p.add_argument("--mask-frac-traj", type=float, default=0.15,
                   help="fraction of trajectory positions masked for recovery")
    p.add_argument("--lambda-match", type=float, default=1.0,
                   help="weight on the trajectory/context matching loss")


def _model_cfg(args) -> ModelConfig:
    return ModelConfig(d=args.d, d_x=args.d_x, T=args.window, heads=args.heads,
                       dropout=args.dropout, traj_layers=args.traj_layers,
                       traffic_layers=args.traffic_layers, co_layers=args.co_layers,
                       gat_layers=args.gat_layers,
                       mask_frac_traj=args.mask_frac_traj,
                       lambda_match=args.lambda_match)


def cmd_synth(args) -> int:
    store = synth.generate(args.out, k=args.k, days=args.days,
                           traj_per_slice=args.traj_per_slice, seed=args.seed,
                           slice_minutes=args.slice_minutes)
    print(f"store written to {store.path}: {store.manifest['n_segments']} segments, "
          f"{store.manifest['n_trajectories']} trajectories, "
          f"slices {store.manifest['slice_range']}")
    return 0


def cmd_ingest(args) -> int:
    store = ingest(args.network, args.trajectories, args.traffic, args.out,
                   slice_minutes=args.slice_minutes, speed_unit=args.speed_unit,
                   adjacency_mode=args.adjacency)
    print(f"store written to {store.path}")
    return 0


def cmd_prep(args) -> int:
    store = Store(args.store)
    trans, reach, deter = run_prep(store, budget_minutes=args.budget_minutes,
                                   alpha=args.alpha, gamma=args.gamma, eps=args.eps,
                                   upto_slice=args.upto_slice)
    sizes = reach.sizes()
    print(f"prep artifacts under {store.file('prep')}: "
          f"{int(trans.counts.sum())} observed transitions over {trans.n_buckets} buckets, "
          f"reachable set sizes min/median/max = {sizes.min()}/{int(np.median(sizes))}/{sizes.max()}")
    return 0


def cmd_pretrain(args) -> int:
    store = Store(args.store)
    tc = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                     batches_per_epoch=args.batches_per_epoch, lr=args.lr,
                     seed=args.seed)
    result = pretrain(store, _model_cfg(args), tc, out_dir=args.out)
    report.save_loss_curve(result["trace"], os.path.join(args.out, "loss_curve.png"))
    first, last = result["trace"][0]["total"], result["trace"][-1]["total"]
    print(f"pretrained {args.epochs} epochs: total loss {first:.4f} -> {last:.4f}")
    print(f"checkpoint: {result['checkpoint']}")
    return 0


def cmd_export_seg(args) -> int:
    store = Store(args.store)
    st = load_pretrained(args.ckpt, store)
    model, grid = st["model"], st["grid"]
    table = evaltasks.segment_state_table(model, grid, args.anchor, severed=args.severed)
    os.makedirs(args.out, exist_ok=True)
    out_csv = os.path.join(args.out, f"segment_states_{args.anchor}.csv")
    report.write_matrix_csv(table.numpy(), out_csv, index_name="segment")
    print(f"wrote {out_csv}")
    if args.figure:
        spd = store.slicing.slices_per_day
        day0 = (args.anchor // spd) * spd
        anchors = [a for a in range(max(day0, grid.first_slice + model.cfg.T),
                                    min(day0 + spd, grid.last_slice + 1))]
        fig_path = os.path.join(args.out, "state_similarity.png")
        report.save_similarity_trace(model, grid, anchors, fig_path)
        print(f"wrote {fig_path}")
    return 0


def cmd_export_traj(args) -> int:
    store = Store(args.store)
    st = load_pretrained(args.ckpt, store)
    model, grid, trajset = st["model"], st["grid"], st["trajset"]
    trajs = trajset.by_slice.get(args.anchor, [])
    if not trajs:
        print(f"no trajectories depart in slice {args.anchor}", file=sys.stderr)
        return 1
    reps = evaltasks.trajectory_reps(model, grid, trajs, args.anchor)
    os.makedirs(args.out, exist_ok=True)
    out_csv = os.path.join(args.out, f"traj_reps_{args.anchor}.csv")
    import csv as _csv
    from .data import _fmt
    with open(out_csv, "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(["traj_id"] + [f"c{j}" for j in range(reps.shape[1])])
        for tr, row in zip(trajs, reps.numpy()):
            w.writerow([tr.traj_id] + [_fmt(v) for v in row])
    print(f"wrote {out_csv} ({len(trajs)} trajectories)")
    return 0


def _run_eval(args, fn_name: str) -> int:
    store = Store(args.store)
    st = load_pretrained(args.ckpt, store)
    model, grid, trajset, split = st["model"], st["grid"], st["trajset"], st["split"]
    if fn_name == "mstsp":
        result = evaltasks.mstsp_eval(model, grid, split)
    elif fn_name == "tte":
        result = evaltasks.tte_eval(model, grid, trajset, split)
    else:
        result = evaltasks.matching_eval(model, grid, trajset, split,
                                         n_candidates=args.candidates,
                                         max_queries=args.max_queries, seed=args.seed)
    for k in sorted(result):
        print(f"  {k}: {result[k]}")
    if args.report_dir:
        os.makedirs(args.report_dir, exist_ok=True)
        base = os.path.join(args.report_dir, fn_name)
        report.write_result_csv(result, base + ".csv")
        if fn_name in ("mstsp", "tte"):
            report.save_eval_bars(result, base + ".png")
        print(f"report written under {args.report_dir}")
    return 0


def cmd_gradcheck(args) -> int:
    from .nd import derive_seed
    with tempfile.TemporaryDirectory() as tmp:
        store = synth.generate(os.path.join(tmp, "store"), k=3, days=3,
                               traj_per_slice=6, seed=7)
        cfg = ModelConfig(d=16, d_x=16, T=4, heads=4, traj_layers=2,
                          traffic_layers=2, co_layers=1, gat_layers=2,
                          ffn_mult=2, dropout=0.0)
        tc = TrainConfig(seed=11, epochs=1)
        from .training import build_model
        model, grid, trajset, split = build_model(store, cfg, tc)
        rng = np.random.default_rng(derive_seed(11, "cli-gradcheck"))
        anchor = split["train"][len(split["train"]) // 2]
        plan = make_plan(model, trajset, anchor, batch_size=4, rng=rng,
                         partner_pool=split["train"])
        worst = {}
        for key in ("mtp_ce", "mtp_time", "ctl", "msp", "nsp", "match", "total"):
            err = grad_check(lambda k=key: plan_losses(model, grid, plan)[k],
                             model.reg, n_probes=args.probes, seed=13)
            worst[key] = err
            print(f"  {key}: max rel err {err:.3e}")
    bad = {k: v for k, v in worst.items() if v > 1e-4}
    print("gradcheck " + ("FAILED for " + ", ".join(sorted(bad)) if bad else "passed"))
    return 1 if bad else 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="segtraj", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("synth", help="generate a synthetic store")
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--days", type=int, default=7)
    p.add_argument("--traj-per-slice", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--slice-minutes", type=int, default=30)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("ingest", help="validate raw files into a store")
    p.add_argument("--network", required=True, help="dir with segments.csv + edges.csv")
    p.add_argument("--trajectories", required=True)
    p.add_argument("--traffic", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--slice-minutes", type=int, default=30)
    p.add_argument("--speed-unit", choices=("ms", "kmh"), default="ms")
    p.add_argument("--adjacency", choices=("warn", "error", "ignore"), default="warn")
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("prep", help="build graph artifacts")
    p.add_argument("store")
    p.add_argument("--budget-minutes", type=float, default=10.0)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--upto-slice", type=int, default=None,
                   help="count transitions only before this slice")
    p.set_defaults(fn=cmd_prep)

    p = sub.add_parser("pretrain", help="joint self-supervised pretraining")
    p.add_argument("store")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--batches-per-epoch", type=int, default=None)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    _model_flags(p)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("export-seg", help="per-segment states of one slice")
    p.add_argument("store")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--anchor", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--severed", action="store_true",
                   help="cut all time-dependent inputs (static states)")
    p.add_argument("--figure", action="store_true",
                   help="also render the day's state-drift figure")
    p.set_defaults(fn=cmd_export_seg)

    p = sub.add_parser("export-traj", help="trajectory reps of one slice")
    p.add_argument("store")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--anchor", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export_traj)

    for name, hlp in (("eval-mstsp", "multi-step state prediction vs historical average"),
                      ("eval-tte", "travel time estimation vs mean duration"),
                      ("eval-match", "trajectory-slice matching top-1")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("store")
        p.add_argument("--ckpt", required=True)
        p.add_argument("--report-dir", default=None)
        if name == "eval-match":
            p.add_argument("--candidates", type=int, default=4)
            p.add_argument("--max-queries", type=int, default=200)
            p.add_argument("--seed", type=int, default=0)
        p.set_defaults(fn=lambda a, n=name.split("-", 1)[1]: _run_eval(a, n))

    p = sub.add_parser("gradcheck", help="finite-difference audit on tiny data")
    p.add_argument("--probes", type=int, default=60)
    p.set_defaults(fn=cmd_gradcheck)

    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
