"""Trajectory view: segment tower, visit sequence transformer, and the
self-supervised losses attached to them.

The segment tower encodes static attributes and refines them with a
transition-aware graph attention stack: attention logits over out-neighbors
carry the empirical next-segment probability of the current time-of-week
bucket, so the same parameters yield different segment states at different
times.  Visit sequences are embedded as a sum of segment state, day-of-week,
time-of-day, inter-visit gap bucket and position, then run through a
standard post-norm transformer with a leading aggregation token.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

from .nd import ParamRegistry, attention_softmax, to_t

# inter-visit gap bucket edges, minutes; bucket 0 is reserved for
# "no gap information" (first visit, hidden timestamps)
GAP_EDGES_MIN = (0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0)
N_GAP_BUCKETS = len(GAP_EDGES_MIN) + 2


def gap_bucket(minutes: float) -> int:
    return 1 + int(np.searchsorted(GAP_EDGES_MIN, minutes, side="left"))


def _ln(x, g, b):
    return F.layer_norm(x, x.shape[-1:], g, b)


def _drop(x, p, train):
    return F.dropout(x, p, training=train) if p > 0 else x


class SegmentTower:
    """Static encoder + stacked transition-aware graph attention."""

    def __init__(self, cfg, reg: ParamRegistry, prefix: str = "seg."):
        self.cfg = cfg
        self.reg = reg
        self.p = prefix
        d, dh = cfg.d, cfg.d // cfg.heads
        reg.matrix(prefix + "in.W", (cfg.c1, d))
        reg.bias(prefix + "in.b", (d,))
        for l in range(cfg.gat_layers):
            for h in range(cfg.heads):
                base = f"{prefix}gat.{l}.{h}."
                reg.matrix(base + "W1", (d, dh))
                reg.matrix(base + "W2", (d, dh))
                reg.embedding(base + "w3", (dh,))
                reg.embedding(base + "w4", (dh,))
            reg.matrix(f"{prefix}gat.{l}.Wo", (d, d))
            reg.bias(f"{prefix}gat.{l}.bo", (d,))

    def forward(self, static_z: torch.Tensor, prob: torch.Tensor,
                adj_mask: torch.Tensor, train: bool = False) -> torch.Tensor:
        """static_z (N, C1) z-scored, prob (N, N) transition probabilities of
        the active bucket, adj_mask (N, N) bool.  Returns (N, d)."""
        r = self.reg
        cfg = self.cfg
        h = static_z @ r[self.p + "in.W"] + r[self.p + "in.b"]
        for l in range(cfg.gat_layers):
            outs = []
            for hd in range(cfg.heads):
                base = f"{self.p}gat.{l}.{hd}."
                u = h @ r[base + "W1"]                       # (N, dh)
                z = h @ r[base + "W2"]                       # (N, dh)
                a = u @ r[base + "w4"]                       # (N,)
                b = z @ r[base + "w4"]                       # (N,)
                c = r[base + "w3"] @ r[base + "w4"]          # scalar, prob slope
                logits = a[:, None] + b[None, :] + prob * c
                alpha = attention_softmax(F.leaky_relu(logits, cfg.leaky),
                                          adj_mask, tag="traj.gat")
                outs.append(alpha @ z)
            h_new = torch.cat(outs, dim=-1) @ r[f"{self.p}gat.{l}.Wo"] \
                + r[f"{self.p}gat.{l}.bo"]
            h_new = _drop(h_new, cfg.dropout, train)
            h = F.elu(h_new) if l < cfg.gat_layers - 1 else h_new
        return h


class TrajTransformer:
    """Visit embedding + transformer encoder over [agg, l_1 .. l_m]."""

    def __init__(self, cfg, reg: ParamRegistry, prefix: str = "traj."):
        self.cfg = cfg
        self.reg = reg
        self.p = prefix
        d = cfg.d
        reg.embedding(prefix + "cls", (d,))
        reg.embedding(prefix + "maskseg", (d,))
        reg.embedding(prefix + "emb.dow", (7, d))
        reg.embedding(prefix + "emb.tod", (cfg.slices_per_day, d))
        reg.embedding(prefix + "emb.pos", (cfg.max_len + 1, d))
        reg.embedding(prefix + "emb.gap", (N_GAP_BUCKETS, d))
        for l in range(cfg.traj_layers):
            base = f"{prefix}attn.{l}."
            for w in ("Wq", "Wk", "Wv", "Wo"):
                reg.matrix(base + w, (d, d))
            reg.bias(base + "bo", (d,))
            reg.ones(base + "ln1.g", (d,))
            reg.bias(base + "ln1.b", (d,))
            reg.matrix(base + "ff1", (d, cfg.ffn_mult * d))
            reg.bias(base + "bf1", (cfg.ffn_mult * d,))
            reg.matrix(base + "ff2", (cfg.ffn_mult * d, d))
            reg.bias(base + "bf2", (d,))
            reg.ones(base + "ln2.g", (d,))
            reg.bias(base + "ln2.b", (d,))
        reg.matrix(prefix + "mtp.W", (d, cfg.n_segments))
        reg.bias(prefix + "mtp.b", (cfg.n_segments,))
        reg.matrix(prefix + "time.W", (d, 1))
        reg.bias(prefix + "time.b", (1,))
        reg.matrix(prefix + "ctl.W1", (d, d))
        reg.bias(prefix + "ctl.b1", (d,))
        reg.matrix(prefix + "ctl.W2", (d, d))
        reg.bias(prefix + "ctl.b2", (d,))

    # -- embedding ---------------------------------------------------------

    def temporal_indices(self, times: np.ndarray, slicing, time_mode: str,
                         mask_pos: np.ndarray | None = None):
        """Per-visit (dow, tod, gap_bucket, use_clock) index arrays.

        time_mode:
          "full"            wall-clock features for every visit
          "departure_only"  clock of the first visit everywhere, gaps hidden
        Positions in mask_pos (and the position right after each of them)
        get gap bucket 0; masked positions also lose their clock features.
        """
        m = len(times)
        dow = np.zeros(m, dtype=np.int64)
        tod = np.zeros(m, dtype=np.int64)
        gap = np.zeros(m, dtype=np.int64)
        use_clock = np.ones(m, dtype=bool)
        for k in range(m):
            ref = times[0] if time_mode == "departure_only" else times[k]
            s = slicing.slice_of(ref)
            dow[k] = slicing.slice_of_week(s) // slicing.slices_per_day
            tod[k] = slicing.slice_of_day(s)
            if time_mode != "departure_only" and k > 0:
                gap[k] = gap_bucket((times[k] - times[k - 1]) / 60.0)
        if mask_pos is not None:
            for k in np.flatnonzero(mask_pos):
                use_clock[k] = False
                gap[k] = 0
                if k + 1 < m:
                    gap[k + 1] = 0
        return dow, tod, gap, use_clock

    def visit_embeddings(self, seg_reps: torch.Tensor, batch: list, slicing,
                         time_mode: str = "full",
                         mask_pos: list | None = None):
        """Build the padded (B, L+1, d) input and (B, L+1) validity mask.

        batch is a list of (segments int array, times float array); seg_reps
        is the fused (N, d) segment state table the visits index into.
        mask_pos, when given, is a per-trajectory bool array marking visits
        whose segment and clock must be hidden from the encoder.
        """
        r, cfg = self.reg, self.cfg
        B = len(batch)
        L = max(len(s) for s, _ in batch)
        if L > cfg.max_len:
            raise ValueError(f"trajectory length {L} exceeds max_len {cfg.max_len}")
        x = torch.zeros((B, L + 1, cfg.d), dtype=seg_reps.dtype)
        valid = torch.zeros((B, L + 1), dtype=torch.bool)
        valid[:, 0] = True
        pos_tab = r[self.p + "emb.pos"]
        x[:, 0] = r[self.p + "cls"] + pos_tab[0]
        for i, (segs, times) in enumerate(batch):
            m = len(segs)
            mp = None if mask_pos is None else mask_pos[i]
            dow, tod, gap, use_clock = self.temporal_indices(
                np.asarray(times, dtype=np.float64), slicing, time_mode, mp)
            base = seg_reps[torch.as_tensor(np.asarray(segs), dtype=torch.long)]
            if mp is not None and mp.any():
                sel = torch.as_tensor(mp, dtype=torch.bool)
                base = torch.where(sel[:, None], r[self.p + "maskseg"].expand(m, cfg.d), base)
            emb = base \
                + r[self.p + "emb.gap"][torch.as_tensor(gap)] \
                + pos_tab[1:m + 1]
            clock = r[self.p + "emb.dow"][torch.as_tensor(dow)] \
                + r[self.p + "emb.tod"][torch.as_tensor(tod)]
            emb = emb + clock * torch.as_tensor(use_clock, dtype=emb.dtype)[:, None]
            x[i, 1:m + 1] = emb
            valid[i, 1:m + 1] = True
        return x, valid

    # -- encoder -----------------------------------------------------------

    def encode(self, x: torch.Tensor, valid: torch.Tensor, train: bool = False):
        """Post-norm transformer; padded key positions are hard-masked."""
        r, cfg = self.reg, self.cfg
        B, L, d = x.shape
        H, dh = cfg.heads, d // cfg.heads
        key_mask = valid[:, None, None, :]      # (B,1,1,L)
        for l in range(cfg.traj_layers):
            base = f"{self.p}attn.{l}."
            q = (x @ r[base + "Wq"]).view(B, L, H, dh).transpose(1, 2)
            k = (x @ r[base + "Wk"]).view(B, L, H, dh).transpose(1, 2)
            v = (x @ r[base + "Wv"]).view(B, L, H, dh).transpose(1, 2)
            logits = q @ k.transpose(-1, -2) / math.sqrt(dh)
            alpha = attention_softmax(logits, key_mask.expand_as(logits), tag="traj.attn")
            out = (alpha @ v).transpose(1, 2).reshape(B, L, d)
            out = _drop(out @ r[base + "Wo"] + r[base + "bo"], cfg.dropout, train)
            x = _ln(x + out, r[base + "ln1.g"], r[base + "ln1.b"])
            ff = torch.relu(x @ r[base + "ff1"] + r[base + "bf1"]) \
                @ r[base + "ff2"] + r[base + "bf2"]
            x = _ln(x + _drop(ff, cfg.dropout, train), r[base + "ln2.g"], r[base + "ln2.b"])
        return x

    def traj_rep(self, encoded: torch.Tensor) -> torch.Tensor:
        """Representation of each sequence: the leading aggregation token."""
        return encoded[:, 0]

    def mtp_logits(self, encoded: torch.Tensor) -> torch.Tensor:
        return encoded[:, 1:] @ self.reg[self.p + "mtp.W"] + self.reg[self.p + "mtp.b"]

    def time_pred(self, encoded: torch.Tensor) -> torch.Tensor:
        out = encoded[:, 1:] @ self.reg[self.p + "time.W"] + self.reg[self.p + "time.b"]
        return out.squeeze(-1)

    def ctl_project(self, rep: torch.Tensor) -> torch.Tensor:
        r = self.reg
        z = torch.relu(rep @ r[self.p + "ctl.W1"] + r[self.p + "ctl.b1"])
        return z @ r[self.p + "ctl.W2"] + r[self.p + "ctl.b2"]


# ---------------------------------------------------------------------------
# losses


def mtp_ce_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Cross entropy over masked visit positions; logits (K, |V|), targets (K,)."""
    return F.cross_entropy(logits, targets)


def mtp_time_loss(pred_minutes: torch.Tensor, target_minutes: torch.Tensor) -> torch.Tensor:
    """Mean absolute error of minutes-from-departure at masked positions."""
    return (pred_minutes - target_minutes).abs().mean()


def ctl_loss(za: torch.Tensor, zb: torch.Tensor, tau: float) -> torch.Tensor:
    """Contrastive loss over two view batches (B, d) each.

    Anchors are all 2B projected reps; the positive of i is its partner
    view, the denominator runs over every other rep.  B = 1 therefore gives
    exactly 0 (no negatives), and two identical pairs give log 3.
    """
    B = za.shape[0]
    z = F.normalize(torch.cat([za, zb], dim=0), dim=-1, eps=1e-12)
    sim = z @ z.t() / tau
    eye = torch.eye(2 * B, dtype=torch.bool)
    sim = sim.masked_fill(eye, float("-inf"))
    partner = torch.arange(2 * B).roll(B)
    pos = sim[torch.arange(2 * B), partner]
    return (torch.logsumexp(sim, dim=-1) - pos).mean()


def masked_span_positions(m: int, frac: float, span: int, rng: np.random.Generator) -> np.ndarray:
    """Choose visit positions to hide: contiguous spans, about frac of m,
    always at least one position."""
    want = max(1, int(math.ceil(frac * m)))
    mask = np.zeros(m, dtype=bool)
    starts = rng.permutation(m)
    for s in starts:
        if mask.sum() >= want:
            break
        mask[s:min(m, s + span)] = True
    return mask


def augment(segments: np.ndarray, times: np.ndarray, rng: np.random.Generator,
            crop_keep: float, jitter_seconds: float):
    """Contrastive view: contiguous crop (>= 2 visits) + one shared time shift."""
    m = len(segments)
    keep = max(2, int(round(crop_keep * m)))
    start = int(rng.integers(0, m - keep + 1)) if keep < m else 0
    off = float(rng.uniform(-jitter_seconds, jitter_seconds))
    return segments[start:start + keep].copy(), times[start:start + keep] + off
