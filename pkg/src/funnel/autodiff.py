"""Minimal dense tensor engine with a reverse-mode gradient tape.

Tensors wrap numpy arrays (f32 or f64, rank <= 4) and are treated as
immutable values once created.  While a Tape is active, every operation
appends a node holding a backward closure; ``Tape.backward`` walks the
node list in reverse, which is a valid reverse topological order because
inputs are always recorded before the ops that consume them.

The engine implements exactly the operations the funnel model needs:
matmul, elementwise arithmetic, softmax, layer norm, GeLU, gathers,
window-2 pooling and fused losses.  No general broadcasting.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}

# tanh-approximation GeLU constants: gelu(x) = 0.5x(1 + tanh(c*(x + a*x^3)))
GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an op's contract."""


class NumericError(ArithmeticError):
    """Raised on non-finite inputs where the contract requires finite ones."""


class ContractError(RuntimeError):
    """Raised when a documented precondition is violated."""


class Tensor:
    """Dense numeric array with shape metadata, optionally tracked for grads."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim > 4:
            raise ShapeError(f"rank {arr.ndim} > 4 not supported")
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"

    # Arithmetic sugar; all shape rules live in the op functions.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Node:
    """One executed op on the tape: output, inputs, and a pull-back closure."""

    __slots__ = ("out", "inputs", "backward", "name")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor],
                 backward: Callable, name: str):
        self.out = out
        self.inputs = inputs
        self.backward = backward
        self.name = name


_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Ordered record of executed ops for one reverse-mode pass.

    A tape is single threaded: use one tape per training step.  Entering
    the context makes it the active tape; ops executed while it is active
    are recorded in execution order.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.grads: dict[int, np.ndarray] = {}

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("a tape is already active")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def backward(self, root: Tensor) -> None:
        """Accumulate gradients of ``root`` w.r.t. every recorded tensor.

        ``root`` must be a scalar produced on this tape.  Deterministic:
        nodes are replayed in strict reverse execution order.
        """
        if root.data.ndim != 0:
            raise ContractError(f"backward root must be scalar, got shape {root.shape}")
        self.grads = {id(root): np.ones((), dtype=root.data.dtype)}
        for node in reversed(self.nodes):
            g = self.grads.get(id(node.out))
            if g is None:
                continue
            node.backward(g, self.grads)

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient for ``t``; zeros of matching shape if disconnected."""
        g = self.grads.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return g


def _record(out: Tensor, inputs: Sequence[Tensor], backward: Callable, name: str):
    tape = _ACTIVE_TAPE
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(Node(out, inputs, backward, name))
    return out


def _accum(grads: dict, t: Tensor, g: np.ndarray) -> None:
    key = id(t)
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = g


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    """Elementwise a + b.  Supports equal shapes, [T,D]+[D] bias, and scalars."""
    b = _as_tensor(b, a)
    _check_binary_shapes(a, b, "add")
    out = Tensor(a.data + b.data)

    def backward(g, grads):
        _accum(grads, a, _unbroadcast(g, a.shape))
        _accum(grads, b, _unbroadcast(g, b.shape))

    return _record(out, (a, b), backward, "add")


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_binary_shapes(a, b, "sub")
    out = Tensor(a.data - b.data)

    def backward(g, grads):
        _accum(grads, a, _unbroadcast(g, a.shape))
        _accum(grads, b, -_unbroadcast(g, b.shape))

    return _record(out, (a, b), backward, "sub")


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; same shape / [T,D]*[D] / scalar operands."""
    b = _as_tensor(b, a)
    _check_binary_shapes(a, b, "mul")
    out = Tensor(a.data * b.data)

    def backward(g, grads):
        _accum(grads, a, _unbroadcast(g * b.data, a.shape))
        _accum(grads, b, _unbroadcast(g * a.data, b.shape))

    return _record(out, (a, b), backward, "mul")


def _check_binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return
    # trailing-axis bias/row broadcast, the only non-trivial case the model needs
    if len(sb) == 1 and len(sa) >= 1 and sa[-1] == sb[0]:
        return
    if len(sa) == 1 and len(sb) >= 1 and sb[-1] == sa[0]:
        return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return g.sum()
    # collapse leading axes for a trailing [D] operand
    return g.reshape(-1, shape[0]).sum(axis=0)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard matrix product [m,k] @ [k,n] -> [m,n]."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g, grads):
        _accum(grads, a, g @ b.data.T)
        _accum(grads, b, a.data.T @ g)

    return _record(out, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects rank 2, got {a.shape}")
    out = Tensor(a.data.T.copy())

    def backward(g, grads):
        _accum(grads, a, g.T)

    return _record(out, (a,), backward, "transpose")


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = Tensor(a.data.reshape(shape).copy())

    def backward(g, grads):
        _accum(grads, a, g.reshape(a.shape))

    return _record(out, (a,), backward, "reshape")


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())

    def backward(g, grads):
        _accum(grads, a, np.full_like(a.data, g))

    return _record(out, (a,), backward, "sum_all")


def softmax_lastdim(x: Tensor) -> Tensor:
    """Row-stochastic softmax over the last axis, max-subtracted for stability."""
    if not np.isfinite(x.data).all():
        if np.isnan(x.data).any():
            raise NumericError("softmax input contains NaN")
        # -inf entries are legal (masked logits); a row of all -inf is not
        if np.all(x.data == -np.inf, axis=-1).any():
            raise NumericError("softmax row with every logit masked")
    m = np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def backward(g, grads):
        dot = np.sum(g * y, axis=-1, keepdims=True)
        _accum(grads, x, y * (g - dot))

    return _record(out, (x,), backward, "softmax")


def mask_fill(x: Tensor, keep: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``keep`` is False by ``value`` (no grad there)."""
    keep = np.broadcast_to(np.asarray(keep, dtype=bool), x.shape)
    out = Tensor(np.where(keep, x.data, x.data.dtype.type(value)))

    def backward(g, grads):
        _accum(grads, x, np.where(keep, g, 0.0))

    return _record(out, (x,), backward, "mask_fill")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Per-row normalization over the last axis, then affine gamma/beta."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta must be ({d},), got {gamma.shape}/{beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def backward(g, grads):
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accum(grads, x, inv * (dxhat - m1 - xhat * m2))
        axes = tuple(range(g.ndim - 1))
        _accum(grads, gamma, (g * xhat).sum(axis=axes))
        _accum(grads, beta, g.sum(axis=axes))

    return _record(out, (x, gamma, beta), backward, "layer_norm")


def gelu(x: Tensor) -> Tensor:
    """GeLU, tanh approximation (constants GELU_C, GELU_A above)."""
    inner = GELU_C * (x.data + GELU_A * x.data ** 3)
    t = np.tanh(inner)
    out = Tensor(0.5 * x.data * (1.0 + t))

    def backward(g, grads):
        sech2 = 1.0 - t * t
        d = 0.5 * (1.0 + t) + 0.5 * x.data * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x.data ** 2)
        _accum(grads, x, g * d)

    return _record(out, (x,), backward, "gelu")


def dropout(x: Tensor, rate: float, rng) -> Tensor:
    """Inverted dropout.  rate == 0 returns the input untouched."""
    if rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0,1), got {rate}")
    keep = rng.generator.random(x.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    out = Tensor(np.where(keep, x.data * scale, 0.0))

    def backward(g, grads):
        _accum(grads, x, np.where(keep, g * scale, 0.0))

    return _record(out, (x,), backward, "dropout")


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a [N, D] (or [N]) tensor; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(x.data[idx].copy())

    def backward(g, grads):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        _accum(grads, x, dx)

    return _record(out, (x,), backward, "gather_rows")


def take_along_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """Per-row gather on the last axis: out[i, j] = x[i, idx[i, j]]."""
    idx = np.asarray(idx, dtype=np.int64)
    if x.data.ndim != 2 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ShapeError(f"take_along_last: got {x.shape} and index {idx.shape}")
    if idx.min() < 0 or idx.max() >= x.shape[1]:
        raise ShapeError(
            f"take_along_last: index range [{idx.min()}, {idx.max()}] outside 0..{x.shape[1] - 1}")
    rows = np.arange(x.shape[0])[:, None]
    out = Tensor(x.data[rows, idx].copy())

    def backward(g, grads):
        dx = np.zeros_like(x.data)
        np.add.at(dx, (np.broadcast_to(rows, idx.shape), idx), g)
        _accum(grads, x, dx)

    return _record(out, (x,), backward, "take_along_last")


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice along the last axis (head split of packed weights)."""
    out = Tensor(x.data[..., start:stop].copy())

    def backward(g, grads):
        dx = np.zeros_like(x.data)
        dx[..., start:stop] = g
        _accum(grads, x, dx)

    return _record(out, (x,), backward, "slice_last")


def concat_last(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    widths = [p.shape[-1] for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=-1))

    def backward(g, grads):
        ofs = 0
        for p, w in zip(parts, widths):
            _accum(grads, p, g[..., ofs:ofs + w])
            ofs += w

    return _record(out, tuple(parts), backward, "concat_last")


def concat_rows(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    heights = [p.shape[0] for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))

    def backward(g, grads):
        ofs = 0
        for p, h in zip(parts, heights):
            _accum(grads, p, g[ofs:ofs + h])
            ofs += h

    return _record(out, tuple(parts), backward, "concat_rows")


def einsum_id_ijd(q: Tensor, r: Tensor) -> Tensor:
    """scores[i, j] = sum_d q[i, d] * r[i, j, d] (naive position-term pairing)."""
    if q.data.ndim != 2 or r.data.ndim != 3 or q.shape[0] != r.shape[0] or q.shape[1] != r.shape[2]:
        raise ShapeError(f"einsum_id_ijd: got {q.shape} and {r.shape}")
    out = Tensor(np.einsum("id,ijd->ij", q.data, r.data))

    def backward(g, grads):
        _accum(grads, q, np.einsum("ij,ijd->id", g, r.data))
        _accum(grads, r, g[:, :, None] * q.data[:, None, :])

    return _record(out, (q, r), backward, "einsum_id_ijd")


def mean_pool_pairs(x: Tensor, real: np.ndarray) -> Tensor:
    """Window-2 stride-2 mean over axis 0; only rows flagged real contribute.

    An odd tail forms a singleton window.  All-pad windows yield zeros.
    """
    real = np.asarray(real, dtype=bool)
    t = x.shape[0]
    n_win = (t + 1) // 2
    counts = np.zeros(n_win)
    pooled = np.zeros((n_win,) + x.shape[1:], dtype=x.data.dtype)
    for w in range(n_win):
        lo, hi = 2 * w, min(2 * w + 2, t)
        members = [i for i in range(lo, hi) if real[i]]
        counts[w] = len(members)
        if members:
            pooled[w] = x.data[members].sum(axis=0) / len(members)
    out = Tensor(pooled)

    def backward(g, grads):
        dx = np.zeros_like(x.data)
        for w in range(n_win):
            if counts[w] == 0:
                continue
            lo, hi = 2 * w, min(2 * w + 2, t)
            for i in range(lo, hi):
                if real[i]:
                    dx[i] = g[w] / counts[w]
        _accum(grads, x, dx)

    return _record(out, (x,), backward, "mean_pool_pairs")


def max_pool_pairs(x: Tensor, real: np.ndarray) -> Tensor:
    """Window-2 stride-2 elementwise max over axis 0, padded rows excluded."""
    real = np.asarray(real, dtype=bool)
    t = x.shape[0]
    n_win = (t + 1) // 2
    pooled = np.zeros((n_win,) + x.shape[1:], dtype=x.data.dtype)
    argmax = np.full((n_win,) + x.shape[1:], -1, dtype=np.int64)
    for w in range(n_win):
        lo, hi = 2 * w, min(2 * w + 2, t)
        members = [i for i in range(lo, hi) if real[i]]
        if not members:
            continue
        vals = x.data[members]
        sel = np.argmax(vals, axis=0)
        pooled[w] = np.take_along_axis(vals, sel[None], axis=0)[0]
        argmax[w] = np.asarray(members)[sel]
    out = Tensor(pooled)

    def backward(g, grads):
        dx = np.zeros_like(x.data)
        for w in range(n_win):
            src = argmax[w]
            mask = src >= 0
            if not mask.any():
                continue
            if x.data.ndim == 1:
                dx[src] += g[w]
            else:
                for d in range(x.shape[1]):
                    if mask[d]:
                        dx[src[d], d] += g[w, d]
        _accum(grads, x, dx)

    return _record(out, (x,), backward, "max_pool_pairs")


def cross_entropy_mean(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean of -log softmax(logits)[target] over rows; fused, stable."""
    targets = np.asarray(targets, dtype=np.int64)
    n = logits.shape[0]
    if n == 0:
        raise ContractError("cross_entropy_mean over zero rows")
    m = logits.data.max(axis=-1, keepdims=True)
    z = logits.data - m
    lse = np.log(np.exp(z).sum(axis=-1)) + m[:, 0]
    nll = lse - logits.data[np.arange(n), targets]
    out = Tensor(nll.mean())
    probs = np.exp(logits.data - lse[:, None])

    def backward(g, grads):
        d = probs.copy()
        d[np.arange(n), targets] -= 1.0
        _accum(grads, logits, g * d / n)

    return _record(out, (logits,), backward, "cross_entropy_mean")


def bce_with_logits_mean(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy on raw logits (stable log1p form)."""
    labels = np.asarray(labels, dtype=logits.data.dtype)
    n = logits.data.size
    if n == 0:
        raise ContractError("bce_with_logits_mean over zero elements")
    x = logits.data
    loss = np.maximum(x, 0.0) - x * labels + np.log1p(np.exp(-np.abs(x)))
    out = Tensor(loss.mean())
    sig = 1.0 / (1.0 + np.exp(-x))

    def backward(g, grads):
        _accum(grads, logits, g * (sig - labels) / n)

    return _record(out, (logits,), backward, "bce_with_logits_mean")


# ---------------------------------------------------------------------------
# rng and parameter initialization
# ---------------------------------------------------------------------------

class Rng:
    """Deterministic random stream: Philox 4x64 counter-based generator.

    Identical seeds produce identical streams on every platform, which is
    what makes mask sampling and toy training reproducible.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.generator = np.random.Generator(np.random.Philox(self.seed))

    def truncated_normal(self, shape, std: float, dtype=np.float64) -> np.ndarray:
        """Normal(0, std) with draws outside two std redrawn."""
        out = self.generator.normal(0.0, std, size=shape)
        bad = np.abs(out) > 2.0 * std
        while bad.any():
            out[bad] = self.generator.normal(0.0, std, size=int(bad.sum()))
            bad = np.abs(out) > 2.0 * std
        return out.astype(dtype)

    def integers(self, low: int, high: int, size=None):
        return self.generator.integers(low, high, size=size)

    def choice_without_replacement(self, pool: np.ndarray, k: int) -> np.ndarray:
        return self.generator.choice(pool, size=k, replace=False)

    def categorical(self, probs: np.ndarray) -> int:
        return int(self.generator.choice(len(probs), p=probs))


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor],
               eps: float = 1e-5, max_coords_per_param: int | None = None,
               seed: int = 0, denominator_floor: float = 1e-8) -> float:
    """Compare analytic gradients of a scalar function against central differences.

    ``f`` is re-evaluated for each probe; it must depend on ``params`` only
    through their ``.data`` buffers.  Relative error uses the denominator
    max(|analytic|, |numeric|, denominator_floor).  When
    ``max_coords_per_param`` is set, a seeded subset of coordinates per
    tensor is probed instead of all of them (needed to keep whole-model
    checks fast).  Returns the max error seen; 0.0 for an empty list.

    Calibration note: central differences in f64 resolve a derivative
    coordinate only down to roughly 1e-11 absolute (roundoff of a
    unit-scale loss divided by 2 eps).  Whole-model losses have
    coordinates with true gradients below that resolution, where the
    quotient against a 1e-8 floor measures nothing but noise; checks over
    whole models should pass denominator_floor=1e-6, which keeps the
    noise quotient near 1e-5 while still flagging any backward bug whose
    absolute effect on a coordinate exceeds 1e-10.
    """
    params = list(params)
    if not params:
        return 0.0
    for p in params:
        p.requires_grad = True
    with Tape() as tape:
        out = f()
    if not np.isfinite(out.data):
        raise NumericError("grad_check: function value is not finite")
    tape.backward(out)
    analytic = [tape.grad(p).copy() for p in params]

    picker = np.random.Generator(np.random.Philox(seed))
    worst = 0.0
    for p, an in zip(params, analytic):
        n_el = p.data.size
        if max_coords_per_param is not None and n_el > max_coords_per_param:
            coords = picker.choice(n_el, size=max_coords_per_param, replace=False)
        else:
            coords = range(n_el)
        flat = p.data.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            hi = f().item()
            flat[c] = orig - eps
            lo = f().item()
            flat[c] = orig
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise NumericError("grad_check: perturbed function value is not finite")
            num = (hi - lo) / (2.0 * eps)
            a = an.reshape(-1)[c]
            err = abs(a - num) / max(abs(a), abs(num), denominator_floor)
            worst = max(worst, err)
    return worst
