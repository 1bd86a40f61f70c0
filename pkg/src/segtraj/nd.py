"""Differentiable numerics: the narrow surface every model module builds on.

All model math runs in float64 on CPU through torch autograd.  This module
pins down the pieces the rest of the package must share:

  * ParamRegistry   - named parameters with deterministic, name-keyed init
  * attention_softmax - masked softmax with exact zeros and a capture hook
    so tests can inspect every attention matrix produced anywhere
  * grad_check      - central finite differences vs autograd
  * checkpoint save/load - json manifest + little-endian float64 blobs,
    content-hashed, bit-exact round trip
  * seed derivation - stable stream seeds from (base seed, labels)
"""

from __future__ import annotations

import contextlib
import contextvars
import hashlib
import json
import math
import os
from dataclasses import dataclass

import numpy as np
import torch

DTYPE = torch.float64
CHECKPOINT_SCHEMA = 1


def to_t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x), dtype=DTYPE)


def derive_seed(base: int, *labels) -> int:
    """Stable 63-bit stream seed from a base seed and labels."""
    h = hashlib.sha256(("|".join([str(base)] + [str(l) for l in labels])).encode())
    return int.from_bytes(h.digest()[:8], "little") & ((1 << 63) - 1)


# ---------------------------------------------------------------------------
# attention softmax with capture


_capture_ctx: contextvars.ContextVar = contextvars.ContextVar("attn_capture", default=None)


@contextlib.contextmanager
def capture_attention():
    """Collect every attention matrix computed inside the block.

    Yields a list of (tag, probs, mask) with detached tensors; mask is None
    for unmasked softmaxes.
    """
    bucket: list = []
    token = _capture_ctx.set(bucket)
    try:
        yield bucket
    finally:
        _capture_ctx.reset(token)


def attention_softmax(logits: torch.Tensor, mask: torch.Tensor | None = None,
                      dim: int = -1, tag: str = "attn") -> torch.Tensor:
    """Softmax over `dim` with hard masking.

    Masked-out entries get exactly 0; rows with no admissible entry come out
    all-zero rather than NaN.  Every call is visible to capture_attention.
    """
    if mask is not None:
        mask = mask.to(torch.bool)
        neg = torch.finfo(logits.dtype).min
        logits = logits.masked_fill(~mask, neg)
    probs = torch.softmax(logits, dim=dim)
    if mask is not None:
        # all-masked rows: softmax over uniform min-fill, flush to zero
        any_ok = mask.any(dim=dim, keepdim=True)
        probs = torch.where(any_ok, probs, torch.zeros_like(probs))
        probs = probs * mask.to(probs.dtype)
    bucket = _capture_ctx.get()
    if bucket is not None:
        bucket.append((tag, probs.detach().clone(),
                       None if mask is None else mask.detach().clone()))
    return probs


# ---------------------------------------------------------------------------
# parameters


_INIT_KINDS = ("glorot", "embedding", "zeros", "ones")


@dataclass
class _ParamSpec:
    shape: tuple
    kind: str


class ParamRegistry:
    """Flat name -> tensor store with deterministic per-name initialization.

    Init draws are keyed by (seed, name) so adding or removing a parameter
    never perturbs the others, and iteration order is always sorted-name.
    """

    def __init__(self):
        self._specs: dict = {}
        self._params: dict = {}

    def declare(self, name: str, shape, kind: str) -> None:
        if kind not in _INIT_KINDS:
            raise ValueError(f"unknown init kind {kind!r}")
        if name in self._specs:
            raise ValueError(f"parameter {name!r} declared twice")
        self._specs[name] = _ParamSpec(tuple(int(s) for s in shape), kind)

    def matrix(self, name: str, shape) -> None:
        self.declare(name, shape, "glorot")

    def embedding(self, name: str, shape) -> None:
        self.declare(name, shape, "embedding")

    def bias(self, name: str, shape) -> None:
        self.declare(name, shape, "zeros")

    def ones(self, name: str, shape) -> None:
        self.declare(name, shape, "ones")

    def initialize(self, seed: int) -> None:
        for name in sorted(self._specs):
            spec = self._specs[name]
            gen = torch.Generator().manual_seed(derive_seed(seed, "init", name))
            t = torch.empty(spec.shape, dtype=DTYPE)
            if spec.kind == "glorot":
                fan_in = spec.shape[0] if len(spec.shape) >= 1 else 1
                fan_out = spec.shape[1] if len(spec.shape) >= 2 else fan_in
                a = math.sqrt(6.0 / (fan_in + fan_out))
                t.uniform_(-a, a, generator=gen)
            elif spec.kind == "embedding":
                t.normal_(0.0, 0.02, generator=gen)
            elif spec.kind == "zeros":
                t.zero_()
            else:
                t.fill_(1.0)
            t.requires_grad_(True)
            self._params[name] = t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list:
        return sorted(self._params)

    def parameters(self) -> list:
        return [self._params[n] for n in self.names()]

    def n_scalars(self) -> int:
        return sum(p.numel() for p in self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            if p.grad is not None:
                p.grad = None

    def clone_values(self) -> dict:
        return {n: p.detach().clone() for n, p in self._params.items()}

    def load_values(self, values: dict) -> None:
        missing = set(self._params) ^ set(values)
        if missing:
            raise ValueError(f"parameter set mismatch: {sorted(missing)}")
        for n, v in values.items():
            if tuple(v.shape) != tuple(self._params[n].shape):
                raise ValueError(f"shape mismatch for {n!r}")
            with torch.no_grad():
                self._params[n].copy_(v)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(loss_fn, registry: ParamRegistry, n_probes: int = 120,
               eps: float = 1e-6, seed: int = 0,
               eps_scales: tuple = (1.0, 10.0)) -> float:
    """Compare autograd gradients against central finite differences.

    loss_fn must recompute the scalar loss from the registry's current
    values on every call.  Returns the max relative error over sampled
    coordinates (denominator guarded at 1e-8).

    Central differences carry two error terms pulling in opposite
    directions: truncation grows with the step, cancellation noise grows as
    the step shrinks, and on deep float64 graphs the noise floor can exceed
    a tight tolerance for coordinates with small gradients.  Each sampled
    coordinate is therefore measured at every step in eps * eps_scales and
    scored by its best agreement: an actual autograd defect is a bias that
    survives every step size, while a coordinate whose mismatch disappears
    at some step was mismeasured, not misdifferentiated.
    """
    names = registry.names()
    loss = loss_fn()
    grads = torch.autograd.grad(loss, [registry[n] for n in names], allow_unused=True)
    analytic = {}
    for n, g in zip(names, grads):
        analytic[n] = torch.zeros_like(registry[n]) if g is None else g.detach()

    sizes = np.array([registry[n].numel() for n in names], dtype=np.int64)
    total = int(sizes.sum())
    rng = np.random.default_rng(derive_seed(seed, "gradcheck"))
    picks = rng.choice(total, size=min(n_probes, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    for flat in sorted(int(p) for p in picks):
        pi = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[pi]
        idx = flat - int(offsets[pi])
        p = registry[name]
        ad = float(analytic[name].reshape(-1)[idx].item())
        best = math.inf
        with torch.no_grad():
            orig = p.view(-1)[idx].item()
        for scale in eps_scales:
            e = eps * scale
            with torch.no_grad():
                p.view(-1)[idx] = orig + e
            up = float(loss_fn().item())
            with torch.no_grad():
                p.view(-1)[idx] = orig - e
            down = float(loss_fn().item())
            with torch.no_grad():
                p.view(-1)[idx] = orig
            fd = (up - down) / (2.0 * e)
            best = min(best, abs(fd - ad) / max(abs(fd), abs(ad), 1e-8))
        worst = max(worst, best)
    return worst


# ---------------------------------------------------------------------------
# checkpoints


def _blob_and_entries(tensors: dict) -> tuple:
    entries, parts, offset = [], [], 0
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().numpy().astype("<f8")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        parts.append(raw)
        offset += len(raw)
    return b"".join(parts), entries


def save_checkpoint(path: str, registry: ParamRegistry, extra: dict | None = None,
                    optimizer: torch.optim.Optimizer | None = None) -> None:
    """Write manifest.json + params.bin (+ optim.bin) under `path`.

    Blobs are concatenated little-endian float64 in sorted-name order and
    content-hashed into the manifest, so equality of files means equality
    of every stored scalar.
    """
    os.makedirs(path, exist_ok=True)
    blob, entries = _blob_and_entries({n: registry[n] for n in registry.names()})
    manifest = {
        "schema_version": CHECKPOINT_SCHEMA,
        "dtype": "float64",
        "byte_order": "little",
        "params": entries,
        "params_sha256": hashlib.sha256(blob).hexdigest(),
        "extra": extra or {},
    }
    with open(os.path.join(path, "params.bin"), "wb") as fh:
        fh.write(blob)

    if optimizer is not None:
        names = registry.names()
        by_id = {id(p): n for n, p in zip(names, registry.parameters())}
        moments, steps = {}, {}
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p)
                if not st:
                    continue
                n = by_id[id(p)]
                moments[n + ".m1"] = st["exp_avg"]
                moments[n + ".m2"] = st["exp_avg_sq"]
                steps[n] = int(st["step"])
        oblob, oentries = _blob_and_entries(moments)
        manifest["optimizer"] = {"entries": oentries, "steps": steps,
                                 "sha256": hashlib.sha256(oblob).hexdigest()}
        with open(os.path.join(path, "optim.bin"), "wb") as fh:
            fh.write(oblob)

    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def _read_blob(path: str, entries: list, sha: str) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    if hashlib.sha256(blob).hexdigest() != sha:
        raise ValueError(f"checkpoint blob corrupt: {path}")
    out = {}
    for ent in entries:
        size = int(np.prod(ent["shape"])) if ent["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size,
                            offset=ent["offset"]).reshape(ent["shape"])
        out[ent["name"]] = torch.from_numpy(arr.copy())
    return out


def load_checkpoint(path: str, registry: ParamRegistry,
                    optimizer: torch.optim.Optimizer | None = None) -> dict:
    """Restore parameters (and Adam moments when asked); returns `extra`."""
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest["schema_version"] != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {manifest['schema_version']}")
    values = _read_blob(os.path.join(path, "params.bin"), manifest["params"],
                        manifest["params_sha256"])
    registry.load_values(values)

    if optimizer is not None and "optimizer" in manifest:
        om = manifest["optimizer"]
        moments = _read_blob(os.path.join(path, "optim.bin"), om["entries"], om["sha256"])
        names = registry.names()
        by_name = {n: p for n, p in zip(names, registry.parameters())}
        for n, step in om["steps"].items():
            p = by_name[n]
            optimizer.state[p] = {
                "step": torch.tensor(float(step), dtype=DTYPE),
                "exp_avg": moments[n + ".m1"].clone(),
                "exp_avg_sq": moments[n + ".m2"].clone(),
            }
    return manifest.get("extra", {})
