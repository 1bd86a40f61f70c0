"""Joint model: both view encoders fused through co-attention, plus the
small task heads.  One instance owns a single ParamRegistry so training,
checkpointing and gradient checking see a flat named parameter space.

The model is deliberately time-indexed everywhere: segment states depend on
the anchor slice through the transition bucket, the traffic window and the
clock embeddings.  `severed=True` cuts every one of those paths (zeroed
transition matrix, zeroed window, clock indices pinned to 0) which makes the
produced states provably time-invariant; the representation tests rely on
that switch.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .data import RoadNetwork, TimeSliceIndex, TrafficStateGrid
from .fusion import CoAttention
from .nd import DTYPE, ParamRegistry, to_t
from .prep import DeterrenceTable, ReachableSets, TransitionTensor
from .trafficview import TrafficEncoder
from .trajview import SegmentTower, TrajTransformer


@dataclass
class ModelConfig:
    d: int = 64
    d_x: int = 64
    heads: int = 4
    gat_layers: int = 2
    traffic_layers: int = 3
    traj_layers: int = 6
    co_layers: int = 2
    T: int = 8
    max_len: int = 64
    horizon: int = 6
    ffn_mult: int = 4
    tau: float = 0.07
    dropout: float = 0.15
    leaky: float = 0.2
    mask_frac_traj: float = 0.15
    mask_span_traj: int = 2
    mask_frac_traffic: float = 0.2
    mask_span_traffic: int = 2
    crop_keep: float = 0.6
    jitter_seconds: float = 900.0
    lambda_traj: float = 1.0
    lambda_traf: float = 1.0
    lambda_match: float = 1.0
    # data-dependent, filled in when the model is built
    c1: int = 5
    c2: int = 2
    n_segments: int = 0
    slices_per_day: int = 48

    def __post_init__(self):
        if self.d % self.heads or self.d_x % self.heads:
            raise ValueError("d and d_x must be divisible by heads")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class JointModel:

    def __init__(self, cfg: ModelConfig, net: RoadNetwork, slicing: TimeSliceIndex,
                 trans: TransitionTensor, reach: ReachableSets, deter: DeterrenceTable,
                 chan_mean: np.ndarray, chan_std: np.ndarray, seed: int = 0):
        cfg.n_segments = net.n
        cfg.slices_per_day = slicing.slices_per_day
        cfg.c1 = net.static_features.shape[1]
        self.cfg = cfg
        self.net = net
        self.slicing = slicing
        self.trans = trans
        self.seed = seed

        self.reg = ParamRegistry()
        self.seg_tower = SegmentTower(cfg, self.reg)
        self.traffic = TrafficEncoder(cfg, self.reg)
        self.traj = TrajTransformer(cfg, self.reg)
        self.co = CoAttention(cfg, self.reg)
        self.reg.matrix("head.match.l.W", (cfg.d, cfg.d))
        self.reg.bias("head.match.l.b", (cfg.d,))
        self.reg.matrix("head.match.c.W", (cfg.d, cfg.d))
        self.reg.bias("head.match.c.b", (cfg.d,))
        self.reg.matrix("head.nsp.W", (cfg.d, cfg.c2))
        self.reg.bias("head.nsp.b", (cfg.c2,))
        self.reg.matrix("head.mstsp.W", (cfg.d, cfg.horizon * cfg.c2))
        self.reg.bias("head.mstsp.b", (cfg.horizon * cfg.c2,))
        self.reg.matrix("head.tte.W", (cfg.d, 1))
        self.reg.bias("head.tte.b", (1,))
        self.reg.initialize(seed)

        # frozen data-derived constants
        self.adj_mask = torch.as_tensor(net.adjacency())
        self.reach_mask = torch.as_tensor(reach.mask_matrix())
        self.deter_t = to_t(deter.values)
        mu = net.static_features.mean(axis=0)
        sd = np.maximum(net.static_features.std(axis=0), 1e-6)
        self.static_stats = (mu, sd)
        self.static_z = to_t((net.static_features - mu) / sd)
        self.chan_mean = np.asarray(chan_mean, dtype=np.float64)
        self.chan_std = np.maximum(np.asarray(chan_std, dtype=np.float64), 1e-9)
        self._cm = to_t(self.chan_mean)
        self._cs = to_t(self.chan_std)

    # -- normalization ------------------------------------------------------

    def normalize(self, states) -> torch.Tensor:
        return (to_t(states) - self._cm) / self._cs

    def denormalize(self, states_z: torch.Tensor) -> torch.Tensor:
        return states_z * self._cs + self._cm

    # -- time-indexed inputs -------------------------------------------------

    def transition_matrix(self, anchor_slice: int, severed: bool = False) -> torch.Tensor:
        if severed:
            return torch.zeros((self.net.n, self.net.n), dtype=DTYPE)
        bucket = self.slicing.slice_of_week(anchor_slice)
        return to_t(self.trans.prob_matrix(bucket))

    def window_inputs(self, grid: TrafficStateGrid, anchor_slice: int,
                      severed: bool = False):
        """(window_z (T,N,C2), dow (T,), tod (T,)) for slices t-T .. t-1."""
        T = self.cfg.T
        lo = anchor_slice - T
        if lo < grid.first_slice or anchor_slice > grid.last_slice + 1:
            raise ValueError(f"anchor {anchor_slice} outside the covered range")
        sl = slice(lo - grid.first_slice, lo - grid.first_slice + T)
        if severed:
            window_z = torch.zeros((T, self.net.n, self.cfg.c2), dtype=DTYPE)
            idx = torch.zeros(T, dtype=torch.long)
            return window_z, idx, idx.clone()
        window_z = self.normalize(grid.values[sl])
        slices = np.arange(lo, lo + T)
        dow = np.array([self.slicing.slice_of_week(s) // self.slicing.slices_per_day
                        for s in slices])
        tod = np.array([self.slicing.slice_of_day(s) for s in slices])
        return window_z, torch.as_tensor(dow), torch.as_tensor(tod)

    # -- forward pieces ------------------------------------------------------

    def segment_states(self, grid: TrafficStateGrid, anchor_slice: int,
                       msp_mask: torch.Tensor | None = None,
                       train: bool = False, severed: bool = False):
        """Everything per-slice: raw tower output, pre-collapse traffic
        features, pooled traffic state, and the fused pair (h_fused, x_fused)."""
        window_z, dow, tod = self.window_inputs(grid, anchor_slice, severed)
        prob = self.transition_matrix(anchor_slice, severed)
        h = self.seg_tower.forward(self.static_z, prob, self.adj_mask, train)
        pre, xt = self.traffic.forward(window_z, dow, tod, self.static_z,
                                       self.adj_mask, msp_mask, train)
        hf, xf = self.co.forward(h, xt, self.deter_t, self.reach_mask, train)
        return {"h": h, "pre": pre, "xt": xt, "hf": hf, "xf": xf,
                "window_z": window_z}

    def encode_batch(self, batch: list, seg_table: torch.Tensor,
                     time_mode: str = "full", mask_pos: list | None = None,
                     train: bool = False):
        """batch: list of (segments, times) arrays -> (encoded, valid)."""
        x, valid = self.traj.visit_embeddings(seg_table, batch, self.slicing,
                                              time_mode, mask_pos)
        return self.traj.encode(x, valid, train), valid

    # -- heads ---------------------------------------------------------------

    def match_traj(self, rep: torch.Tensor) -> torch.Tensor:
        return rep @ self.reg["head.match.l.W"] + self.reg["head.match.l.b"]

    def match_ctx(self, ctx: torch.Tensor) -> torch.Tensor:
        return ctx @ self.reg["head.match.c.W"] + self.reg["head.match.c.b"]

    def nsp_pred(self, x_fused: torch.Tensor) -> torch.Tensor:
        return x_fused @ self.reg["head.nsp.W"] + self.reg["head.nsp.b"]

    def mstsp_pred(self, x_fused: torch.Tensor) -> torch.Tensor:
        out = x_fused @ self.reg["head.mstsp.W"] + self.reg["head.mstsp.b"]
        return out.view(-1, self.cfg.horizon, self.cfg.c2)

    def tte_pred(self, rep: torch.Tensor) -> torch.Tensor:
        return (rep @ self.reg["head.tte.W"] + self.reg["head.tte.b"]).squeeze(-1)
