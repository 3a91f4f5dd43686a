"""Minimal dense-tensor substrate: reverse-mode autodiff over numpy arrays,
attention and normalization ops, Adam with warmup + cosine decay, and the
checkpoint format.

Tensors record their parents and a backward closure; ``backward`` walks the
graph in reverse topological order. Ops preserve the dtype of their inputs
(training uses float32; gradient checks run the same code in float64).
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    pass


class AllKeysMasked(ValueError):
    pass


class OddDimension(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


class ChecksumMismatch(ValueError):
    pass


_GRAD_ENABLED = True


class no_grad:
    """Context manager disabling graph recording (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward", "name", "_grad_own")

    def __init__(self, data, parents=(), backward=None, name=None):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self._grad_own = False
        self._parents = parents if _GRAD_ENABLED else ()
        self._backward = backward if _GRAD_ENABLED else None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def accumulate(self, g: np.ndarray) -> None:
        # first contribution is borrowed (never mutated); a second one
        # allocates, so aliased references stay untouched
        if self.grad is None:
            self.grad = g
            self._grad_own = False
        elif self._grad_own:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._grad_own = True


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Tensor, b) -> Tensor:
    b = as_tensor(b)
    out_data = a.data + b.data

    def bwd(g, out):
        a.accumulate(_unbroadcast(g, a.data.shape))
        b.accumulate(_unbroadcast(g, b.data.shape))

    return Tensor(out_data, (a, b), bwd)


def sub(a: Tensor, b) -> Tensor:
    b = as_tensor(b)
    out_data = a.data - b.data

    def bwd(g, out):
        a.accumulate(_unbroadcast(g, a.data.shape))
        b.accumulate(-_unbroadcast(g, b.data.shape))

    return Tensor(out_data, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        scalar = np.asarray(b, dtype=a.data.dtype)
        out_data = a.data * scalar

        def bwd_s(g, out):
            a.accumulate(g * scalar)

        return Tensor(out_data, (a,), bwd_s)
    out_data = a.data * b.data

    def bwd(g, out):
        a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    return Tensor(out_data, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data @ b.data

    def bwd(g, out):
        bt = np.swapaxes(b.data, -1, -2)
        at = np.swapaxes(a.data, -1, -2)
        ga = g @ bt
        gb = at @ g
        a.accumulate(_unbroadcast(ga, a.data.shape))
        b.accumulate(_unbroadcast(gb, b.data.shape))

    return Tensor(out_data, (a, b), bwd)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)

    def bwd(g, out):
        a.accumulate(g * (a.data > 0))

    return Tensor(out_data, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g, out):
        a.accumulate(g * out.data)

    return Tensor(out_data, (a,), bwd)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out_data = np.clip(a.data, lo, hi)

    def bwd(g, out):
        a.accumulate(g * ((a.data > lo) & (a.data < hi)))

    return Tensor(out_data, (a,), bwd)


def square(a: Tensor) -> Tensor:
    out_data = a.data * a.data

    def bwd(g, out):
        a.accumulate(g * 2.0 * a.data)

    return Tensor(out_data, (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def bwd(g, out):
        a.accumulate(g.reshape(a.data.shape))

    return Tensor(out_data, (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    out_data = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def bwd(g, out):
        a.accumulate(np.transpose(g, inv))

    return Tensor(out_data, (a,), bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out_data = a.data[sl]

    def bwd(g, out):
        full = np.zeros_like(a.data)
        full[sl] = g
        a.accumulate(full)

    return Tensor(out_data, (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def bwd(g, out):
        off = 0
        for t, n in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(off, off + n)
            t.accumulate(g[tuple(sl)])
            off += n

    return Tensor(out_data, tuple(tensors), bwd)


def expand(a: Tensor, shape) -> Tensor:
    out_data = np.broadcast_to(a.data, shape).copy()

    def bwd(g, out):
        a.accumulate(_unbroadcast(g, a.data.shape))

    return Tensor(out_data, (a,), bwd)


def sum_last(a: Tensor) -> Tensor:
    """Sum over the last axis."""
    out_data = a.data.sum(axis=-1)

    def bwd(g, out):
        a.accumulate(np.broadcast_to(g[..., None], a.data.shape).astype(a.data.dtype))

    return Tensor(out_data, (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    out_data = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def bwd(g, out):
        a.accumulate(np.full_like(a.data, g))

    return Tensor(out_data, (a,), bwd)


def mean_fsum(a: Tensor) -> Tensor:
    """Exact order-independent mean over all elements (math.fsum)."""
    n = a.data.size
    total = math.fsum(a.data.reshape(-1).astype(np.float64).tolist())
    out_data = np.asarray(total / n, dtype=a.data.dtype)

    def bwd(g, out):
        a.accumulate(np.full_like(a.data, g / n))

    return Tensor(out_data, (a,), bwd)


def softmax_masked(scores: Tensor, mask: Optional[np.ndarray]) -> Tensor:
    """Softmax over the last axis with boolean masking.

    Every row must keep at least one unmasked entry.
    """
    x = scores.data
    if mask is not None:
        mask = np.broadcast_to(mask, x.shape)
        if not mask.any(axis=-1).all():
            raise AllKeysMasked("a query row has no unmasked keys")
        neg = np.asarray(-1e30, dtype=x.dtype)
        x = np.where(mask, x, neg)
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    if mask is not None:
        e = e * mask
    s = e.sum(axis=-1, keepdims=True)
    y = e / s

    def bwd(g, out):
        dot = (g * out.data).sum(axis=-1, keepdims=True)
        scores.accumulate(out.data * (g - dot))

    return Tensor(y, (scores,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = gamma.data * xhat + beta.data

    def bwd(g, out):
        d = x.data.shape[-1]
        dxhat = g * gamma.data
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        x.accumulate(gx.astype(x.data.dtype))
        axes = tuple(range(g.ndim - 1))
        gamma.accumulate((g * xhat).sum(axis=axes).reshape(gamma.data.shape))
        beta.accumulate(g.sum(axis=axes).reshape(beta.data.shape))

    return Tensor(out_data, (x, gamma, beta), bwd)


def linear(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis."""
    if x.data.shape[-1] != W.data.shape[0]:
        raise ShapeMismatch(
            f"linear: input dim {x.data.shape[-1]} vs weight {W.data.shape}")
    out = matmul(x, W)
    if b is not None:
        if b.data.shape != (W.data.shape[1],):
            raise ShapeMismatch(f"bias shape {b.data.shape}")
        out = add(out, b)
    return out


def multi_head_attention(Q: Tensor, K: Tensor, V: Tensor,
                         mask: Optional[np.ndarray], heads: int,
                         Wo: Tensor, bo: Optional[Tensor] = None) -> Tensor:
    """Scaled dot-product attention with ``heads`` heads over already
    projected Q/K/V, followed by the output projection.

    Q: (..., nq, d); K, V: (..., nk, d); mask broadcastable to (..., nq, nk)
    with True marking usable keys.
    """
    d = Q.data.shape[-1]
    if d % heads != 0:
        raise ShapeMismatch(f"d={d} not divisible by heads={heads}")
    if K.data.shape[-1] != d or V.data.shape[-1] != d:
        raise ShapeMismatch("Q/K/V widths differ")
    dh = d // heads
    nq = Q.data.shape[-2]
    nk = K.data.shape[-2]
    lead = Q.data.shape[:-2]

    def to_heads(t: Tensor, n: int) -> Tensor:
        t = reshape(t, lead + (n, heads, dh))
        axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return transpose(t, axes)  # (..., heads, n, dh)

    qh = to_heads(Q, nq)
    kh = to_heads(K, nk)
    vh = to_heads(V, nk)
    kt = transpose(kh, tuple(range(kh.data.ndim - 2)) + (kh.data.ndim - 1, kh.data.ndim - 2))
    scores = mul(matmul(qh, kt), 1.0 / math.sqrt(dh))
    att_mask = None
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), lead + (nq, nk))
        att_mask = np.broadcast_to(m[..., None, :, :], scores.data.shape)
    att = softmax_masked(scores, att_mask)
    out = matmul(att, vh)  # (..., heads, nq, dh)
    axes = tuple(range(out.data.ndim - 3)) + (out.data.ndim - 2, out.data.ndim - 3, out.data.ndim - 1)
    out = transpose(out, axes)  # (..., nq, heads, dh)
    out = reshape(out, lead + (nq, d))
    return linear(out, Wo, bo)


def backward(loss: Tensor) -> None:
    """Reverse-mode gradients for everything reachable from a scalar loss."""
    if loss.data.size != 1:
        raise ShapeMismatch("loss must be a scalar")
    if not np.isfinite(loss.data).all():
        raise NonFiniteLoss(f"loss is {loss.data}")
    topo: list[Tensor] = []
    seen: set = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad, node)


def positional_encoding(t_index: float, d: int, dtype=np.float32) -> np.ndarray:
    """Interleaved sinusoid: pairs (sin(t/10000^(2k/d)), cos(same))."""
    if d % 2 != 0:
        raise OddDimension(f"d={d} must be even")
    k = np.arange(d // 2, dtype=np.float64)
    rate = np.power(10000.0, 2.0 * k / d)
    out = np.empty(d, dtype=np.float64)
    out[0::2] = np.sin(t_index / rate)
    out[1::2] = np.cos(t_index / rate)
    return out.astype(dtype)


# --- parameters and optimizer ----------------------------------------------------


class ModelParams:
    """Named parameter tensors with gradient accumulators."""

    def __init__(self):
        self.tensors: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.tensors:
            raise ValueError(f"duplicate parameter {name}")
        t = Tensor(np.asarray(data))
        t.name = name
        self.tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def count(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: self.tensors[k].data for k in self.names()}

    def load_state(self, arrays: dict) -> None:
        for k in self.names():
            src = np.asarray(arrays[k])
            if src.shape != self.tensors[k].data.shape:
                raise ShapeMismatch(f"{k}: {src.shape} vs {self.tensors[k].data.shape}")
            self.tensors[k].data = src.astype(self.tensors[k].data.dtype)


@dataclass
class OptimizerState:
    base_lr: float = 1e-3
    warmup_steps: int = 4000
    total_steps: int = 100_000
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def lr_at(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup into a half-cosine decay; continuous at the junction."""
    if step <= 0:
        return 0.0
    warm = step / warmup_steps if warmup_steps > 0 else math.inf
    progress = (step - warmup_steps) / max(total_steps - warmup_steps, 1)
    progress = min(max(progress, -math.inf), 1.0)
    cos_part = 0.5 * (1.0 + math.cos(math.pi * progress))
    return base_lr * max(0.0, min(warm, cos_part))


def adam_step(params: ModelParams, opt: OptimizerState) -> float:
    """One bias-corrected Adam update; gradients are zeroed afterwards.

    Returns the learning rate used.
    """
    opt.step += 1
    t = opt.step
    lr = lr_at(t, opt.base_lr, opt.warmup_steps, opt.total_steps)
    b1, b2, eps = opt.beta1, opt.beta2, opt.epsilon
    for name in params.names():
        p = params.tensors[name]
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient in {name}")
        if name not in opt.m:
            opt.m[name] = np.zeros_like(p.data)
            opt.v[name] = np.zeros_like(p.data)
        opt.m[name] = b1 * opt.m[name] + (1 - b1) * g
        opt.v[name] = b2 * opt.v[name] + (1 - b2) * (g * g)
        mhat = opt.m[name] / (1 - b1 ** t)
        vhat = opt.v[name] / (1 - b2 ** t)
        p.data = p.data - (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype)
        p.grad = None
    return lr


# --- checkpoint format ------------------------------------------------------------

CHECKPOINT_MAGIC = b"CKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: ModelParams, meta: dict,
                    opt: Optional[OptimizerState] = None) -> None:
    names = params.names()
    header = {
        "version": CHECKPOINT_VERSION,
        "meta": meta,
        "tensors": [{"name": n, "shape": list(params[n].data.shape)} for n in names],
        "optimizer": None,
    }
    blobs = [np.ascontiguousarray(params[n].data, dtype="<f4").tobytes() for n in names]
    if opt is not None:
        header["optimizer"] = {
            "step": opt.step, "base_lr": opt.base_lr,
            "warmup_steps": opt.warmup_steps, "total_steps": opt.total_steps,
            "beta1": opt.beta1, "beta2": opt.beta2, "epsilon": opt.epsilon,
        }
        for n in names:
            blobs.append(np.ascontiguousarray(
                opt.m.get(n, np.zeros_like(params[n].data)), dtype="<f4").tobytes())
            blobs.append(np.ascontiguousarray(
                opt.v.get(n, np.zeros_like(params[n].data)), dtype="<f4").tobytes())
    payload = json.dumps(header).encode("utf-8")
    h = hashlib.sha256()
    with open(path, "wb") as f:
        for chunk in (CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(payload)),
                      payload, *blobs):
            h.update(chunk)
            f.write(chunk)
        f.write(h.digest()[:8])


def load_checkpoint(path) -> tuple[dict, dict, Optional[dict]]:
    """Returns (tensor arrays, meta, optimizer state dict or None)."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ChecksumMismatch("bad checkpoint magic")
    if hashlib.sha256(data[:-8]).digest()[:8] != data[-8:]:
        raise ChecksumMismatch("checkpoint checksum mismatch")
    version, hlen = struct.unpack("<HI", data[4:10])
    if version != CHECKPOINT_VERSION:
        raise ChecksumMismatch(f"checkpoint version {version}")
    header = json.loads(data[10:10 + hlen].decode("utf-8"))
    off = 10 + hlen
    arrays = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arrays[entry["name"]] = np.frombuffer(
            data, dtype="<f4", count=n, offset=off).reshape(shape).copy()
        off += n * 4
    opt_state = None
    if header.get("optimizer"):
        opt_state = dict(header["optimizer"])
        opt_state["m"] = {}
        opt_state["v"] = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            opt_state["m"][entry["name"]] = np.frombuffer(
                data, dtype="<f4", count=n, offset=off).reshape(shape).copy()
            off += n * 4
            opt_state["v"][entry["name"]] = np.frombuffer(
                data, dtype="<f4", count=n, offset=off).reshape(shape).copy()
            off += n * 4
    return arrays, header["meta"], opt_state


# --- gradient checking -------------------------------------------------------------


def gradcheck(loss_fn: Callable[[], Tensor], params: ModelParams,
              h: float = 1e-3, rtol: float = 1e-3, atol: float = 1e-5,
              max_components: int = 12, seed: int = 0) -> dict:
    """Compare analytic gradients against central finite differences.

    Small tensors are checked exhaustively; larger ones on a fixed random
    sample of components. Returns per-tensor worst absolute/relative errors
    and a pass flag.
    """
    params.zero_grads()
    loss = loss_fn()
    backward(loss)
    analytic = {n: (params[n].grad.copy() if params[n].grad is not None
                    else np.zeros_like(params[n].data))
                for n in params.names()}
    rng = np.random.default_rng(seed)
    report = {}
    for name in params.names():
        p = params[name]
        flat = p.data.reshape(-1)
        n = flat.size
        if n <= max_components:
            idxs = np.arange(n)
        else:
            idxs = rng.choice(n, size=max_components, replace=False)
        worst_abs = 0.0
        worst_rel = 0.0
        ok = True
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(loss_fn().data)
            flat[i] = orig - h
            f_minus = float(loss_fn().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * h)
            a = float(analytic[name].reshape(-1)[i])
            err = abs(a - numeric)
            rel = err / max(abs(numeric), abs(a), 1e-12)
            worst_abs = max(worst_abs, err)
            worst_rel = max(worst_rel, rel)
            if err > atol and rel > rtol:
                ok = False
        report[name] = {"abs": worst_abs, "rel": worst_rel, "ok": ok}
    params.zero_grads()
    return report
