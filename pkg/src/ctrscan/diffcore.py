"""Differentiable building blocks, Adam, gradient checking and checkpoints.

Reverse-mode gradients come from torch autograd; everything else (the
attention math, Adam, the finite-difference harness, the checkpoint
container) is implemented here so the contracts are explicit.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch
from torch import nn

from .errors import ArgumentError, DimensionError, FormatError, TrainingError

CKPT_MAGIC = b"CKPT"


def set_deterministic(enabled: bool = True, seed: int | None = None) -> None:
    """Pin torch to deterministic kernels and optionally seed its global RNG."""
    torch.use_deterministic_algorithms(enabled)
    if seed is not None:
        torch.manual_seed(seed)


def set_precision(bits: int) -> torch.dtype:
    if bits not in (32, 64):
        raise ArgumentError("precision must be 32 or 64 bits")
    dtype = torch.float64 if bits == 64 else torch.float32
    torch.set_default_dtype(dtype)
    return dtype


def make_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(
            f"linear: input has {x.shape[-1]} features, weight expects {weight.shape[0]}"
        )
    if bias is not None and bias.shape[-1] != weight.shape[1]:
        raise DimensionError("linear: bias does not match output width")
    # F.linear takes (out, in); the transposed view lets it fuse the bias add
    return nn.functional.linear(x, weight.t(), bias)


def layer_normalize(x: torch.Tensor, scale, shift, eps: float = 1e-5) -> torch.Tensor:
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps) * scale + shift


def dropout(x: torch.Tensor, rate: float, training: bool, generator: torch.Generator | None = None):
    """Inverted dropout; the identity outside training or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ArgumentError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= rate
    return x * keep / (1.0 - rate)


class Linear(nn.Module):
    """Affine layer with (in, out) weight layout and torch's default init."""

    def __init__(self, n_in: int, n_out: int, bias: bool = True):
        super().__init__()
        bound = 1.0 / math.sqrt(n_in)
        self.weight = nn.Parameter(torch.empty(n_in, n_out).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.empty(n_out).uniform_(-bound, bound)) if bias else None

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.scale = nn.Parameter(torch.ones(dim))
        self.shift = nn.Parameter(torch.zeros(dim))
        self.eps = eps

    def forward(self, x):
        return layer_normalize(x, self.scale, self.shift, self.eps)


@dataclass
class AttentionParams:
    """Multi-head projections; head ``i`` uses columns ``i*d_h:(i+1)*d_h``."""

    m: int
    w_q: torch.Tensor
    w_k: torch.Tensor
    w_v: torch.Tensor
    w_o: torch.Tensor

    @property
    def d_model(self) -> int:
        return self.w_o.shape[0]

    def head_weights(self, i: int):
        d_h = self.d_model // self.m
        cols = slice(i * d_h, (i + 1) * d_h)
        return self.w_q[:, cols], self.w_k[:, cols], self.w_v[:, cols]


def multihead_cross_attention(q_in, k_in, v_in, params: AttentionParams, return_weights=False):
    """Cross-attention of ``q_in`` over (``k_in``, ``v_in``).

    Inputs may carry leading batch dimensions: (..., q, d) and (..., s, d).
    Per head, softmax(Q_i K_i^T / sqrt(d_h)) V_i; heads are concatenated and
    mapped through ``w_o``.
    """
    m, d = params.m, params.d_model
    if d % m:
        raise DimensionError(f"d_model={d} is not divisible by {m} heads")
    for name, t, w in (("query", q_in, params.w_q), ("key", k_in, params.w_k), ("value", v_in, params.w_v)):
        if t.shape[-1] != w.shape[0]:
            raise DimensionError(f"{name} width {t.shape[-1]} does not match projection {w.shape[0]}")
    if k_in.shape[-2] != v_in.shape[-2]:
        raise DimensionError("keys and values must have the same number of rows")
    d_h = d // m
    q = (q_in @ params.w_q).unflatten(-1, (m, d_h)).transpose(-2, -3)
    k = (k_in @ params.w_k).unflatten(-1, (m, d_h)).transpose(-2, -3)
    v = (v_in @ params.w_v).unflatten(-1, (m, d_h)).transpose(-2, -3)
    weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d_h), dim=-1)
    heads = (weights @ v).transpose(-2, -3).flatten(-2)
    out = heads @ params.w_o
    return (out, weights) if return_weights else out


def center_cross_attention(q_row, k_in, v_in, params: AttentionParams):
    """Single-query cross-attention, same value as ``multihead_cross_attention``
    with a one-row query but cheaper when keys are shared by few queries.

    Per head, (q W_q,i)(K W_k,i)^T = (q W_q,i W_k,i^T) K^T and
    sum_s a_s (v_s W_v,i) = (sum_s a_s v_s) W_v,i, so the key and value
    projections are applied once per query instead of once per context row.
    q_row is (..., d); k_in and v_in are (..., s, d).  Returns (..., d).
    """
    m, d = params.m, params.d_model
    if q_row.shape[-1] != d or k_in.shape[-1] != d or v_in.shape[-1] != d:
        raise DimensionError(f"inputs must have width {d}")
    if k_in.shape[-2] != v_in.shape[-2]:
        raise DimensionError("keys and values must have the same number of rows")
    d_h = d // m
    q = (q_row @ params.w_q).unflatten(-1, (m, d_h))
    q_k = torch.einsum("...hj,dhj->...hd", q, params.w_k.unflatten(-1, (m, d_h)))
    weights = torch.softmax(q_k @ k_in.transpose(-1, -2) / math.sqrt(d_h), dim=-1)
    pooled = weights @ v_in
    heads = torch.einsum("...hd,dhj->...hj", pooled, params.w_v.unflatten(-1, (m, d_h)))
    return heads.flatten(-2) @ params.w_o


class CrossAttention(nn.Module):
    def __init__(self, d_model: int = 512, m: int = 8):
        super().__init__()
        if d_model % m:
            raise DimensionError(f"d_model={d_model} is not divisible by {m} heads")
        self.m = m
        bound = 1.0 / math.sqrt(d_model)
        for name in ("w_q", "w_k", "w_v", "w_o"):
            setattr(self, name, nn.Parameter(torch.empty(d_model, d_model).uniform_(-bound, bound)))

    def params(self) -> AttentionParams:
        return AttentionParams(self.m, self.w_q, self.w_k, self.w_v, self.w_o)

    def forward(self, q_in, k_in, v_in):
        return multihead_cross_attention(q_in, k_in, v_in, self.params())


# ---------------------------------------------------------------------------
# Parameter store and Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: torch.Tensor
    v: torch.Tensor
    step: int = 0


@dataclass
class ParamStore:
    """Named trainable tensors (shared with their modules) plus Adam state."""

    params: dict[str, torch.Tensor]
    state: dict[str, AdamState] = field(default_factory=dict)
    _optimizer: torch.optim.Adam | None = field(default=None, repr=False)

    @classmethod
    def from_modules(cls, modules: Mapping[str, nn.Module]) -> "ParamStore":
        params = {}
        for prefix, module in modules.items():
            for name, p in module.named_parameters():
                path = f"{prefix}/{name.replace('.', '/')}"
                if path in params:
                    raise ArgumentError(f"duplicate parameter path {path}")
                params[path] = p
        return cls(params)

    def __iter__(self):
        return iter(self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.detach().cpu().numpy().copy() for k, p in self.params.items()}


@torch.no_grad()
def adam_step(store: ParamStore, grads=None, lr: float = 1e-5, betas=(0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam update in place.  ``grads`` defaults to ``.grad``."""
    b1, b2 = betas
    if grads is None:
        grads = {k: p.grad for k, p in store.params.items() if p.grad is not None}
    items = []
    for path, g in grads.items():
        p = store.params[path]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {path} has shape {tuple(g.shape)}, expected {tuple(p.shape)}")
        items.append((path, p, g))
    # one fused norm over all gradients; only a non-finite total needs the per-tensor scan
    if items and not bool(torch.isfinite(nn.utils.get_total_norm([g for _, _, g in items], foreach=True))):
        for path, _, g in items:
            if not bool(torch.isfinite(g).all()):
                raise TrainingError(f"non-finite gradient for parameter {path}")
    if store._optimizer is None:
        # fused multi-tensor kernel for the standard bias-corrected update
        store._optimizer = torch.optim.Adam(list(store.params.values()), lr=lr, fused=True)
    group = store._optimizer.param_groups[0]
    group.update(lr=lr, betas=(b1, b2), eps=eps)
    saved = {path: p.grad for path, p in store.params.items()}
    try:
        for path, p in store.params.items():
            p.grad = None
        for path, p, g in items:
            p.grad = g
        store._optimizer.step()
    finally:
        for path, p in store.params.items():
            p.grad = saved[path]
    for path, p, _ in items:
        st = store._optimizer.state[p]
        store.state[path] = AdamState(st["exp_avg"], st["exp_avg_sq"], int(st["step"]))
    return store


# ---------------------------------------------------------------------------
# Finite-difference gradient check
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    probes: list[tuple[str, int, float, float]]


def finite_difference_check(
    loss_fn: Callable[[], torch.Tensor],
    store: ParamStore,
    n_probes: int = 20,
    h: float = 1e-5,
    tol: float = 1e-4,
    seed: int = 0,
    grads: Mapping[str, torch.Tensor] | None = None,
    floor: float = 1e-5,
) -> GradCheckReport:
    """Compare autograd (or supplied) gradients with central differences.

    Relative error per probe is ``|a - n| / max(|a|, |n|, floor)``.  The floor
    keeps coordinates with vanishing gradient (a bias feeding batch norm has
    an identically zero one) from failing on the ~1e-10 round-off of the
    difference quotient at h=1e-5.
    """
    names = list(store.params)
    if grads is None:
        loss = loss_fn()
        values = torch.autograd.grad(loss, [store.params[k] for k in names], allow_unused=True)
        grads = {
            k: torch.zeros_like(store.params[k]) if g is None else g for k, g in zip(names, values)
        }
    sizes = np.array([store.params[k].numel() for k in names], dtype=np.float64)
    rng = np.random.default_rng(seed)
    probes = []
    worst = 0.0
    for _ in range(n_probes):
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        p = store.params[name]
        idx = int(rng.integers(p.numel()))
        flat = p.data.view(-1)
        orig = flat[idx].item()
        with torch.no_grad():
            flat[idx] = orig + h
            up = float(loss_fn())
            flat[idx] = orig - h
            down = float(loss_fn())
            flat[idx] = orig
        numeric = (up - down) / (2 * h)
        analytic = float(grads[name].reshape(-1)[idx])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, err)
        probes.append((name, idx, analytic, numeric))
    return GradCheckReport(max_rel_error=worst, passed=worst <= tol, probes=probes)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def module_arrays(prefix: str, module: nn.Module) -> dict[str, np.ndarray]:
    """Parameters and buffers of ``module`` keyed by slash-separated path."""
    out = {}
    for name, t in list(module.named_parameters()) + list(module.named_buffers()):
        out[f"{prefix}/{name.replace('.', '/')}"] = t.detach().cpu().numpy()
    return out


def load_module_arrays(prefix: str, module: nn.Module, arrays: Mapping[str, np.ndarray]) -> None:
    state = module.state_dict()
    new = {}
    for name, t in state.items():
        path = f"{prefix}/{name.replace('.', '/')}"
        if path not in arrays:
            raise FormatError(f"checkpoint lacks {path}")
        arr = arrays[path]
        if tuple(arr.shape) != tuple(t.shape):
            raise FormatError(f"{path}: checkpoint shape {arr.shape} != model shape {tuple(t.shape)}")
        new[name] = torch.as_tensor(arr, dtype=t.dtype)
    module.load_state_dict(new)


def write_checkpoint(path, meta: Mapping[str, object], arrays: Mapping[str, np.ndarray]) -> None:
    """Serialize config key/values and named arrays (f32 payloads)."""
    meta_bytes = "\n".join(f"{k}={v}" for k, v in meta.items()).encode()
    chunks = [CKPT_MAGIC, struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        encoded = name.encode()
        chunks.append(struct.pack("<I", len(encoded)) + encoded)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"missing checkpoint: {path}")
    raw = path.read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path.name}: not a checkpoint (bad magic)")
    try:
        pos = 4
        (n_meta,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        meta = {}
        for line in raw[pos : pos + n_meta].decode().splitlines():
            if line:
                k, v = line.split("=", 1)
                meta[k] = v
        pos += n_meta
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            (n_name,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos : pos + n_name].decode()
            pos += n_name
            (ndim,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
            pos += 4 * size
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path.name}: corrupt checkpoint ({exc})") from exc
    return meta, arrays


class seeded:
    """Context manager running a block under a fixed torch global seed.

    The caller's global RNG state is restored on exit.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def __enter__(self):
        self._fork = torch.random.fork_rng(devices=[])
        self._fork.__enter__()
        torch.manual_seed(self.seed)
        return self

    def __exit__(self, *exc):
        return self._fork.__exit__(*exc)


def as_tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.tensor(np.asarray(x), dtype=dtype or torch.get_default_dtype())
