"""Traffic view: window embedding, interleaved spatial/temporal encoder,
and the masked-cell / next-state pretext losses.

A window of T slices of per-segment channel states becomes a (T, N, d_x)
tensor as the sum of five terms: channel projection, static-feature
projection, day-of-week, time-of-day and window-position embeddings.  Each
encoder layer runs graph attention across segments and self-attention along
the window in parallel, merges both branches, and finishes with a feed
forward block; a temporal convolution then collapses the window into one
state vector per segment.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from .nd import ParamRegistry, attention_softmax
from .trajview import _drop, _ln


class TrafficEncoder:

    def __init__(self, cfg, reg: ParamRegistry, prefix: str = "traf."):
        self.cfg = cfg
        self.reg = reg
        self.p = prefix
        dx, dh = cfg.d_x, cfg.d_x // cfg.heads
        reg.matrix(prefix + "in.state.W", (cfg.c2, dx))
        reg.bias(prefix + "in.state.b", (dx,))
        reg.matrix(prefix + "in.static.W", (cfg.c1, dx))
        reg.bias(prefix + "in.static.b", (dx,))
        reg.embedding(prefix + "emb.dow", (7, dx))
        reg.embedding(prefix + "emb.tod", (cfg.slices_per_day, dx))
        reg.embedding(prefix + "emb.pos", (cfg.T, dx))
        reg.embedding(prefix + "maskcell", (dx,))
        for l in range(cfg.traffic_layers):
            for h in range(cfg.heads):
                base = f"{prefix}spat.{l}.{h}."
                reg.matrix(base + "W1", (dx, dh))
                reg.matrix(base + "W2", (dx, dh))
                reg.embedding(base + "w4", (dh,))
            base = f"{prefix}layer.{l}."
            reg.matrix(base + "spat.Wo", (dx, dx))
            reg.bias(base + "spat.bo", (dx,))
            for w in ("Wq", "Wk", "Wv", "Wo"):
                reg.matrix(base + "temp." + w, (dx, dx))
            reg.bias(base + "temp.bo", (dx,))
            reg.matrix(base + "comb.W", (2 * dx, dx))
            reg.bias(base + "comb.b", (dx,))
            reg.ones(base + "ln1.g", (dx,))
            reg.bias(base + "ln1.b", (dx,))
            reg.matrix(base + "ff1", (dx, cfg.ffn_mult * dx))
            reg.bias(base + "bf1", (cfg.ffn_mult * dx,))
            reg.matrix(base + "ff2", (cfg.ffn_mult * dx, dx))
            reg.bias(base + "bf2", (dx,))
            reg.ones(base + "ln2.g", (dx,))
            reg.bias(base + "ln2.b", (dx,))
        reg.matrix(prefix + "collapse.W", (dx, dx, cfg.T))
        reg.bias(prefix + "collapse.b", (dx,))
        reg.matrix(prefix + "out.W", (dx, cfg.d))
        reg.bias(prefix + "out.b", (cfg.d,))
        reg.matrix(prefix + "msp.W", (dx, cfg.c2))
        reg.bias(prefix + "msp.b", (cfg.c2,))

    # -- embedding ---------------------------------------------------------

    def embed(self, window_z: torch.Tensor, dow: torch.Tensor, tod: torch.Tensor,
              static_z: torch.Tensor, msp_mask: torch.Tensor | None = None) -> torch.Tensor:
        """window_z (T, N, C2) normalized states, dow/tod (T,) long indices,
        static_z (N, C1).  Masked cells keep every term except the state
        projection, which is replaced by the learned mask embedding."""
        r = self.reg
        state = window_z @ r[self.p + "in.state.W"] + r[self.p + "in.state.b"]
        if msp_mask is not None:
            state = torch.where(msp_mask[..., None], r[self.p + "maskcell"].expand_as(state), state)
        T = window_z.shape[0]
        return (state
                + (static_z @ r[self.p + "in.static.W"] + r[self.p + "in.static.b"])[None]
                + r[self.p + "emb.dow"][dow][:, None, :]
                + r[self.p + "emb.tod"][tod][:, None, :]
                + r[self.p + "emb.pos"][:T][:, None, :])

    # -- encoder -----------------------------------------------------------

    def _spatial(self, x: torch.Tensor, l: int, adj_mask: torch.Tensor) -> torch.Tensor:
        r, cfg = self.reg, self.cfg
        outs = []
        for hd in range(cfg.heads):
            base = f"{self.p}spat.{l}.{hd}."
            u = x @ r[base + "W1"]                     # (T, N, dh)
            z = x @ r[base + "W2"]
            a = u @ r[base + "w4"]                     # (T, N)
            b = z @ r[base + "w4"]
            logits = a[:, :, None] + b[:, None, :]     # (T, N, N)
            alpha = attention_softmax(F.leaky_relu(logits, cfg.leaky),
                                      adj_mask[None].expand_as(logits),
                                      tag="traf.spatial")
            outs.append(alpha @ z)
        base = f"{self.p}layer.{l}."
        return torch.cat(outs, dim=-1) @ r[base + "spat.Wo"] + r[base + "spat.bo"]

    def _temporal(self, x: torch.Tensor, l: int) -> torch.Tensor:
        r, cfg = self.reg, self.cfg
        base = f"{self.p}layer.{l}.temp."
        T, N, dx = x.shape
        H, dh = cfg.heads, dx // cfg.heads
        y = x.transpose(0, 1)                          # (N, T, dx)
        q = (y @ r[base + "Wq"]).view(N, T, H, dh).transpose(1, 2)
        k = (y @ r[base + "Wk"]).view(N, T, H, dh).transpose(1, 2)
        v = (y @ r[base + "Wv"]).view(N, T, H, dh).transpose(1, 2)
        alpha = attention_softmax(q @ k.transpose(-1, -2) / math.sqrt(dh),
                                  tag="traf.temporal")
        out = (alpha @ v).transpose(1, 2).reshape(N, T, dx)
        return (out @ r[base + "Wo"] + r[base + "bo"]).transpose(0, 1)

    def forward(self, window_z, dow, tod, static_z, adj_mask,
                msp_mask=None, train: bool = False):
        """Returns (pre, pooled): per-cell features (T, N, d_x) for masked
        cell prediction, and the collapsed per-segment state (N, d)."""
        r, cfg = self.reg, self.cfg
        x = self.embed(window_z, dow, tod, static_z, msp_mask)
        for l in range(cfg.traffic_layers):
            base = f"{self.p}layer.{l}."
            s = self._spatial(x, l, adj_mask)
            m = self._temporal(x, l)
            y = torch.cat([s, m], dim=-1) @ r[base + "comb.W"] + r[base + "comb.b"]
            x = _ln(x + _drop(y, cfg.dropout, train), r[base + "ln1.g"], r[base + "ln1.b"])
            ff = torch.relu(x @ r[base + "ff1"] + r[base + "bf1"]) \
                @ r[base + "ff2"] + r[base + "bf2"]
            x = _ln(x + _drop(ff, cfg.dropout, train), r[base + "ln2.g"], r[base + "ln2.b"])
        pre = x
        pooled = torch.einsum("tnc,oct->no", pre, r[self.p + "collapse.W"]) \
            + r[self.p + "collapse.b"]
        pooled = pooled @ r[self.p + "out.W"] + r[self.p + "out.b"]
        return pre, pooled

    def msp_pred(self, pre: torch.Tensor, msp_mask: torch.Tensor) -> torch.Tensor:
        """Predicted normalized channels at the masked cells, (K, C2)."""
        return pre[msp_mask] @ self.reg[self.p + "msp.W"] + self.reg[self.p + "msp.b"]


# ---------------------------------------------------------------------------
# losses


def msp_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over masked cells, normalized channel space."""
    return ((pred - target) ** 2).mean()


def nsp_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error of the predicted next-slice state, all segments."""
    return ((pred - target) ** 2).mean()


def masked_cells(T: int, N: int, frac: float, span: int, rng) -> "np.ndarray":
    """(T, N) bool: per segment, contiguous spans along the window, about
    frac of all cells, at least one cell overall."""
    import numpy as np
    want = max(1, int(math.ceil(frac * T * N)))
    mask = np.zeros((T, N), dtype=bool)
    order = rng.permutation(T * N)
    for flat in order:
        if mask.sum() >= want:
            break
        t, n = divmod(int(flat), N)
        mask[t:min(T, t + span), n] = True
    return mask
