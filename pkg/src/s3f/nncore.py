"""Differentiable building blocks on top of torch autograd.

Values are plain float32 ``torch.Tensor`` objects; torch records the tape and
each training step builds a fresh graph.  This module adds the pieces the
pipeline relies on with explicit contracts: layers, attention, positional
encoding, a hand-written Adam over a named parameter store, a central
difference gradient checker and the binary checkpoint format.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

DTYPE = torch.float32
CKPT_MAGIC = b"S3FCKPT1"
ATTN_CHUNK = 1024


def linear(x: torch.Tensor, W: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ W.T + b`` with ``W`` stored (out, in)."""
    if x.shape[-1] != W.shape[-1]:
        raise ValueError(f"linear: input dim {x.shape[-1]} does not match weight {tuple(W.shape)}")
    return F.linear(x, W, b)


def activation(x: torch.Tensor, kind: str) -> torch.Tensor:
    if kind == "relu":
        return torch.relu(x)
    if kind == "leaky_relu":
        return F.leaky_relu(x, 0.01)
    if kind == "swish":
        return F.silu(x)
    if kind == "sigmoid":
        return torch.sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    return torch.softmax(x, dim=axis)


def positional_encoding(x: torch.Tensor, n_freq: int = 6) -> torch.Tensor:
    """``[x, sin(2^j pi x), cos(2^j pi x)]`` for j < n_freq; 3 -> 39 dims at n_freq=6."""
    freqs = (2.0 ** torch.arange(n_freq, dtype=x.dtype)) * math.pi
    arg = (x[..., :, None] * freqs).flatten(-2)
    return torch.cat([x, torch.sin(arg), torch.cos(arg)], dim=-1)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, chunk: int = ATTN_CHUNK) -> torch.Tensor:
    """Single-head scaled dot-product attention, queries processed in chunks."""
    if k.shape[0] == 0:
        raise ValueError("attention over an empty key set")
    if k.shape[0] != v.shape[0]:
        raise ValueError("key and value counts differ")
    scale = 1.0 / math.sqrt(q.shape[-1])
    out = [softmax(qc @ k.T * scale, -1) @ v for qc in q.split(chunk)]
    return torch.cat(out) if out else q.new_zeros((0, v.shape[-1]))


class MLP(nn.Module):
    """Fully connected stack with an optional skip of the input into one layer."""

    def __init__(self, d_in, width, depth, d_out, act="swish", skip_at=None, zero_out=False):
        super().__init__()
        self.act = act
        self.skip_at = skip_at
        layers = []
        for i in range(depth):
            fan_in = d_in if i == 0 else width
            if skip_at is not None and i == skip_at:
                fan_in += d_in
            layers.append(nn.Linear(fan_in, width))
        self.hidden = nn.ModuleList(layers)
        self.out = nn.Linear(width, d_out)
        for lin in self.hidden:
            xavier(lin)
        if zero_out:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)
        else:
            xavier(self.out)

    def forward(self, x):
        h = x
        for i, lin in enumerate(self.hidden):
            if self.skip_at is not None and i == self.skip_at:
                h = torch.cat([h, x], -1)
            h = activation(lin(h), self.act)
        return self.out(h)


def xavier(layer: nn.Module):
    nn.init.xavier_uniform_(layer.weight)
    if layer.bias is not None:
        nn.init.zeros_(layer.bias)


def check_finite(name: str, t: torch.Tensor):
    if not torch.isfinite(t).all():
        raise FloatingPointError(f"non-finite values in {name}")


class ParamStore:
    """Named parameters with Adam moments and a step counter."""

    def __init__(self, params: Mapping[str, torch.Tensor] | nn.Module):
        if isinstance(params, nn.Module):
            params = dict(params.named_parameters())
        self.params = dict(params)
        self.m = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.v = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.step = 0

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def adam_step(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        for name, p in self.params.items():
            if p.grad is not None and not torch.isfinite(p.grad).all():
                bad = int((~torch.isfinite(p.grad)).sum())
                raise FloatingPointError(f"non-finite gradient in parameter {name!r} ({bad} entries)")
        self.step += 1
        c1 = 1.0 - beta1**self.step
        c2 = 1.0 - beta2**self.step
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m.mul_(beta1).add_(g, alpha=1 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for name, p in self.params.items():
            out[name] = p.detach().numpy()
            out[name + ".m"] = self.m[name].numpy()
            out[name + ".v"] = self.v[name].numpy()
        out["step"] = np.array(self.step, dtype=np.float32)
        return out

    @torch.no_grad()
    def load_state(self, tensors: Mapping[str, np.ndarray], strict: bool = True):
        for name, p in self.params.items():
            if name not in tensors:
                if strict:
                    raise KeyError(f"checkpoint lacks parameter {name!r}")
                continue
            arr = torch.from_numpy(np.asarray(tensors[name], np.float32))
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name!r}: {tuple(arr.shape)} vs {tuple(p.shape)}")
            p.copy_(arr)
            for suffix, store in ((".m", self.m), (".v", self.v)):
                if name + suffix in tensors:
                    store[name].copy_(torch.from_numpy(np.asarray(tensors[name + suffix], np.float32)))
        if "step" in tensors:
            self.step = int(np.asarray(tensors["step"]))


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray]):
    """Write tensors in the S3FCKPT1 little-endian binary layout."""
    chunks = [CKPT_MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f4")  # keeps rank 0 for scalars
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        chunks.append(a.tobytes(order="C"))
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not an S3F checkpoint")
    (count,) = struct.unpack_from("<I", buf, 8)
    off = 12
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off : off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims).copy()
        off += 4 * size
    return out


def grad_check(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    h: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences.

    ``fn`` must return a scalar.  Inputs are promoted to float64.  With
    ``max_coords`` only a seeded random subset of coordinates per input is
    probed.  Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-6)``.
    """
    xs = [x.detach().to(torch.float64).clone().requires_grad_(True) for x in inputs]
    out = fn(*xs)
    grads = torch.autograd.grad(out, xs, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for x, g in zip(xs, grads):
            g = torch.zeros_like(x) if g is None else g
            flat = x.view(-1)
            idx = np.arange(flat.numel())
            if max_coords is not None and flat.numel() > max_coords:
                idx = rng.choice(flat.numel(), max_coords, replace=False)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + h
                fp = fn(*xs).item()
                flat[i] = orig - h
                fm = fn(*xs).item()
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                ana = g.reshape(-1)[i].item()
                worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-6))
    return worst


def module_grad_check(
    module: nn.Module,
    loss_fn: Callable[[nn.Module], torch.Tensor],
    h: float = 1e-5,
    max_coords: int = 4,
    groups: Iterable[str] | None = None,
    seed: int = 0,
) -> dict[str, float]:
    """Check d loss / d parameter for each named parameter of a float64 module.

    Returns the max relative error per parameter tensor.  ``loss_fn`` is
    called with the module and must be deterministic.
    """
    rng = np.random.default_rng(seed)
    named = dict(module.named_parameters())
    names = list(groups) if groups is not None else list(named)
    module.zero_grad()
    loss = loss_fn(module)
    grads = torch.autograd.grad(loss, [named[n] for n in names], allow_unused=True)
    result = {}
    with torch.no_grad():
        for name, g in zip(names, grads):
            p = named[name]
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            idx = rng.choice(flat.numel(), min(max_coords, flat.numel()), replace=False)
            worst = 0.0
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + h
                fp = loss_fn(module).item()
                flat[i] = orig - h
                fm = loss_fn(module).item()
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                ana = g.reshape(-1)[i].item()
                worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-6))
            result[name] = worst
    return result
