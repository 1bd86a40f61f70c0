"""Cross-view fusion.

Each fusion layer lets every segment's trajectory-side state attend over
the traffic-side states of the segments that can reach it (and the traffic
side attend back over the segments it can reach).  Attention logits carry a
pairwise deterrence term, a learned scalar slope on (distance + eps)^-gamma,
so nearby segments exchange more signal under a positive slope.  The block
is a standard cross-attention residual unit; two stacked layers by default.

Also here: trajectory/context pooling and the two-sided matching loss that
aligns a trajectory's representation with the traffic context of its own
departure slice.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .nd import ParamRegistry, attention_softmax
from .trajview import _drop, _ln


class CoAttention:

    DIRS = ("traj", "traf")

    def __init__(self, cfg, reg: ParamRegistry, prefix: str = "co."):
        self.cfg = cfg
        self.reg = reg
        self.p = prefix
        d, dh = cfg.d, cfg.d // cfg.heads
        for l in range(cfg.co_layers):
            for dr in self.DIRS:
                for h in range(cfg.heads):
                    base = f"{prefix}{l}.{dr}.{h}."
                    reg.matrix(base + "W5", (d, dh))
                    reg.matrix(base + "W6", (d, dh))
                    reg.embedding(base + "w7", (dh,))
                    reg.embedding(base + "w8", (dh,))
                base = f"{prefix}{l}.{dr}."
                reg.matrix(base + "Wo", (d, d))
                reg.bias(base + "bo", (d,))
                reg.ones(base + "ln1.g", (d,))
                reg.bias(base + "ln1.b", (d,))
                reg.matrix(base + "ff1", (d, cfg.ffn_mult * d))
                reg.bias(base + "bf1", (cfg.ffn_mult * d,))
                reg.matrix(base + "ff2", (cfg.ffn_mult * d, d))
                reg.bias(base + "bf2", (d,))
                reg.ones(base + "ln2.g", (d,))
                reg.bias(base + "ln2.b", (d,))

    def _block(self, l: int, dr: str, q: torch.Tensor, kv: torch.Tensor,
               deter: torch.Tensor, mask: torch.Tensor, train: bool) -> torch.Tensor:
        """q rows attend over kv rows admissible under mask; deter is the
        (Nq, Nk) deterrence aligned with that mask orientation."""
        r, cfg = self.reg, self.cfg
        outs = []
        for hd in range(cfg.heads):
            base = f"{self.p}{l}.{dr}.{hd}."
            qa = q @ r[base + "W5"]
            kb = kv @ r[base + "W6"]
            a = qa @ r[base + "w8"]
            b = kb @ r[base + "w8"]
            c = r[base + "w7"] @ r[base + "w8"]          # deterrence slope
            logits = a[:, None] + b[None, :] + deter * c
            alpha = attention_softmax(F.leaky_relu(logits, cfg.leaky),
                                      mask, tag=f"co.{dr}")
            outs.append(alpha @ kb)
        base = f"{self.p}{l}.{dr}."
        out = torch.cat(outs, dim=-1) @ r[base + "Wo"] + r[base + "bo"]
        x = _ln(q + _drop(out, cfg.dropout, train), r[base + "ln1.g"], r[base + "ln1.b"])
        ff = torch.relu(x @ r[base + "ff1"] + r[base + "bf1"]) \
            @ r[base + "ff2"] + r[base + "bf2"]
        return _ln(x + _drop(ff, cfg.dropout, train), r[base + "ln2.g"], r[base + "ln2.b"])

    def forward(self, h: torch.Tensor, x: torch.Tensor, deter: torch.Tensor,
                reach_mask: torch.Tensor, train: bool = False):
        """h (N, d) trajectory-side, x (N, d) traffic-side.

        reach_mask[v, u] says u can reach v: row v of the trajectory side
        attends over exactly those u; the traffic side uses the transpose
        (u attends over the v it can reach).  Returns the fused pair.
        """
        for l in range(self.cfg.co_layers):
            h2 = self._block(l, "traj", h, x, deter, reach_mask, train)
            x2 = self._block(l, "traf", x, h, deter.t(), reach_mask.t(), train)
            h, x = h2, x2
        return h, x


# ---------------------------------------------------------------------------
# pooling + matching


def pool_context(x_fused: torch.Tensor, segments) -> torch.Tensor:
    """Traffic context of one trajectory: mean of the fused traffic-side
    states over its visited segments (departure-slice table)."""
    idx = torch.as_tensor(segments, dtype=torch.long)
    return x_fused[idx].mean(dim=0)


def matching_loss(l_reps: torch.Tensor, c_reps: torch.Tensor, tau: float,
                  extra_ctx: torch.Tensor | None = None) -> torch.Tensor:
    """Symmetric batch alignment of trajectory reps and traffic contexts.

    Cosine similarities over the batch, temperature tau; each trajectory
    must pick out its own slice context among the batch's contexts and vice
    versa.  All-equal similarities at batch size 2 give exactly log 2.

    extra_ctx rows join the candidate pool on the trajectory side only;
    the canonical use is the same trajectory's segments pooled over a
    different slice's states, which forces the discrimination to rest on
    time rather than on which segments were visited.
    """
    ln = F.normalize(l_reps, dim=-1, eps=1e-12)
    cn = F.normalize(c_reps, dim=-1, eps=1e-12)
    sim = ln @ cn.t() / tau
    idx = torch.arange(sim.shape[0])
    if extra_ctx is not None and len(extra_ctx):
        en = F.normalize(extra_ctx, dim=-1, eps=1e-12)
        sim_row = torch.cat([sim, ln @ en.t() / tau], dim=1)
    else:
        sim_row = sim
    row = torch.logsumexp(sim_row, dim=1) - sim[idx, idx]
    col = torch.logsumexp(sim, dim=0) - sim[idx, idx]
    return 0.5 * (row.mean() + col.mean())
