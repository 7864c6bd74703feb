"""Minimal reverse-mode autodiff over 2-D float64 arrays.

Every value in the network is a (channels, time) ndarray wrapped in a
:class:`Var`.  Graph construction is eager: creating a node computes its
value immediately, so a fully built graph is a fully evaluated forward
pass.  :func:`backward` then walks the tape in reverse topological order
and accumulates gradients into ``Var.grad``.

The operator set is deliberately small: channel-mixing linear maps,
depthwise temporal convolutions (plain / strided / transposed), pooling,
norms, a handful of pointwise functions, and a DFT pair whose complex
values travel as a real array with stacked (real, imag) channel blocks.
No general broadcasting; the few shape-changing ops (expand_time,
band stacking, slicing) have explicit adjoints.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np

# Additive mask value for invalid softmax bins. Large enough to zero the
# probability, small enough to keep every intermediate finite.
NEG_MASK = -1e9

_EPS_NORM = 1e-5
_EPS_SQRT = 1e-12

_ids = itertools.count()


class GraphError(ValueError):
    """Raised on shape mismatches or non-finite values, naming the node."""


class Var:
    """One node of the tape: an evaluated value plus its adjoint rule."""

    __slots__ = ("id", "op", "value", "parents", "grad", "_bw")

    def __init__(self, value: np.ndarray, op: str, parents: tuple = (),
                 bw: Callable[[np.ndarray], None] | None = None):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim != 2:
            raise GraphError(f"op '{op}': values must be 2-D, got shape {value.shape}")
        if not np.isfinite(value).all():
            raise GraphError(f"op '{op}' produced a non-finite value")
        self.id = next(_ids)
        self.op = op
        self.value = value
        self.parents = parents
        self.grad: np.ndarray | None = None
        self._bw = bw

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(id={self.id}, op={self.op}, shape={self.value.shape})"

    # small amount of sugar for same-shape arithmetic
    def __add__(self, other: "Var") -> "Var":
        return add(self, other)

    def __sub__(self, other: "Var") -> "Var":
        return sub(self, other)

    def __mul__(self, other: "Var") -> "Var":
        return mul(self, other)


def leaf(value: np.ndarray, name: str = "leaf") -> Var:
    """Trainable input node; receives a gradient during backward."""
    return Var(np.asarray(value, dtype=np.float64), f"leaf:{name}")


def const(value: np.ndarray) -> Var:
    """Fixed input node; participates in forward only, never in gradients."""
    v = Var(np.asarray(value, dtype=np.float64), "const")
    v._bw = None
    return v


def _check_same_shape(op: str, a: Var, b: Var) -> None:
    if a.value.shape != b.value.shape:
        raise GraphError(
            f"op '{op}': shape mismatch {a.value.shape} vs {b.value.shape} "
            f"(nodes {a.id}, {b.id})")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Var, b: Var) -> Var:
    _check_same_shape("add", a, b)
    out = Var(a.value + b.value, "add", (a, b))

    def bw(g):
        _accum(a, g)
        _accum(b, g)
    out._bw = bw
    return out


def sub(a: Var, b: Var) -> Var:
    _check_same_shape("sub", a, b)
    out = Var(a.value - b.value, "sub", (a, b))

    def bw(g):
        _accum(a, g)
        _accum(b, -g)
    out._bw = bw
    return out


def mul(a: Var, b: Var) -> Var:
    _check_same_shape("mul", a, b)
    out = Var(a.value * b.value, "mul", (a, b))

    def bw(g):
        _accum(a, g * b.value)
        _accum(b, g * a.value)
    out._bw = bw
    return out


def div(a: Var, b: Var) -> Var:
    _check_same_shape("div", a, b)
    out = Var(a.value / b.value, "div", (a, b))

    def bw(g):
        _accum(a, g / b.value)
        _accum(b, -g * out.value / b.value)
    out._bw = bw
    return out


def affine(x: Var, scale: float, shift: float = 0.0) -> Var:
    """scale * x + shift with python-scalar coefficients."""
    out = Var(scale * x.value + shift, "affine", (x,))

    def bw(g):
        _accum(x, scale * g)
    out._bw = bw
    return out


def relu(x: Var) -> Var:
    out = Var(np.maximum(x.value, 0.0), "relu", (x,))

    def bw(g):
        # subgradient 0 at the kink
        _accum(x, g * (x.value > 0.0))
    out._bw = bw
    return out


def sigmoid(x: Var) -> Var:
    out = Var(1.0 / (1.0 + np.exp(-x.value)), "sigmoid", (x,))

    def bw(g):
        _accum(x, g * out.value * (1.0 - out.value))
    out._bw = bw
    return out


def log(x: Var) -> Var:
    with np.errstate(invalid="ignore", divide="ignore"):
        val = np.log(x.value)
    out = Var(val, "log", (x,))

    def bw(g):
        _accum(x, g / x.value)
    out._bw = bw
    return out


def sqrt(x: Var) -> Var:
    out = Var(np.sqrt(x.value), "sqrt", (x,))

    def bw(g):
        # guard: near-zero radicands would blow the adjoint up
        _accum(x, g * 0.5 / np.sqrt(np.maximum(x.value, _EPS_SQRT)))
    out._bw = bw
    return out


def minimum(a: Var, b: Var) -> Var:
    _check_same_shape("minimum", a, b)
    out = Var(np.minimum(a.value, b.value), "minimum", (a, b))

    def bw(g):
        take_a = a.value <= b.value  # ties route to the first argument
        _accum(a, g * take_a)
        _accum(b, g * ~take_a)
    out._bw = bw
    return out


def maximum(a: Var, b: Var) -> Var:
    _check_same_shape("maximum", a, b)
    out = Var(np.maximum(a.value, b.value), "maximum", (a, b))

    def bw(g):
        take_a = a.value >= b.value
        _accum(a, g * take_a)
        _accum(b, g * ~take_a)
    out._bw = bw
    return out


# ---------------------------------------------------------------------------
# channel mixing and temporal convolutions
# ---------------------------------------------------------------------------

def pointwise(x: Var, w: Var, b: Var) -> Var:
    """Per-instant linear map over channels: w @ x + b, w (Dout, Din), b (Dout, 1)."""
    dout, din = w.value.shape
    if x.value.shape[0] != din:
        raise GraphError(f"pointwise: input has {x.value.shape[0]} channels, weight expects {din}")
    if b.value.shape != (dout, 1):
        raise GraphError(f"pointwise: bias shape {b.value.shape}, expected {(dout, 1)}")
    out = Var(w.value @ x.value + b.value, "pointwise", (x, w, b))

    def bw(g):
        _accum(x, w.value.T @ g)
        _accum(w, g @ x.value.T)
        _accum(b, g.sum(axis=1, keepdims=True))
    out._bw = bw
    return out


def _check_dw(op: str, x: Var, w: Var, b: Var) -> None:
    d = x.value.shape[0]
    if w.value.shape != (d, 3):
        raise GraphError(f"{op}: kernel shape {w.value.shape}, expected {(d, 3)}")
    if b.value.shape != (d, 1):
        raise GraphError(f"{op}: bias shape {b.value.shape}, expected {(d, 1)}")


def depthwise_conv(x: Var, w: Var, b: Var) -> Var:
    """Per-channel temporal conv, kernel 3, stride 1, zero same-padding."""
    _check_dw("depthwise_conv", x, w, b)
    d, t = x.value.shape
    xp = np.pad(x.value, ((0, 0), (1, 1)))
    wv = w.value
    y = (wv[:, 0:1] * xp[:, 0:t] + wv[:, 1:2] * xp[:, 1:t + 1]
         + wv[:, 2:3] * xp[:, 2:t + 2] + b.value)
    out = Var(y, "depthwise_conv", (x, w, b))

    def bw(g):
        gp = np.pad(g, ((0, 0), (1, 1)))
        dx = (wv[:, 0:1] * gp[:, 2:t + 2] + wv[:, 1:2] * gp[:, 1:t + 1]
              + wv[:, 2:3] * gp[:, 0:t])
        dw = np.stack([(xp[:, k:k + t] * g).sum(axis=1) for k in range(3)], axis=1)
        _accum(x, dx)
        _accum(w, dw)
        _accum(b, g.sum(axis=1, keepdims=True))
    out._bw = bw
    return out


def downsample_conv(x: Var, w: Var, b: Var) -> Var:
    """Per-channel temporal conv, kernel 3, stride 2, pad 1; length T -> ceil(T/2)."""
    _check_dw("downsample_conv", x, w, b)
    d, t = x.value.shape
    j = (t + 1) // 2
    xp = np.pad(x.value, ((0, 0), (1, 1)))
    wv = w.value
    y = (wv[:, 0:1] * xp[:, 0:2 * j:2] + wv[:, 1:2] * xp[:, 1:2 * j:2]
         + wv[:, 2:3] * xp[:, 2:2 * j + 1:2] + b.value)
    out = Var(y, "downsample_conv", (x, w, b))

    def bw(g):
        dxp = np.zeros_like(xp)
        for k in range(3):
            dxp[:, k:k + 2 * j:2] += wv[:, k:k + 1] * g
        dw = np.stack([(xp[:, k:k + 2 * j:2] * g).sum(axis=1) for k in range(3)], axis=1)
        _accum(x, dxp[:, 1:t + 1])
        _accum(w, dw)
        _accum(b, g.sum(axis=1, keepdims=True))
    out._bw = bw
    return out


def upsample_conv(x: Var, w: Var, b: Var) -> Var:
    """Per-channel transposed temporal conv, kernel 3, stride 2; length T -> 2T.

    Closed form of a stride-2 transposed conv with pad 1 and output padding 1:
    even outputs see the center tap, odd outputs mix the two edge taps.
    """
    _check_dw("upsample_conv", x, w, b)
    d, t = x.value.shape
    wv = w.value
    xv = x.value
    x_next = np.zeros_like(xv)
    x_next[:, :t - 1] = xv[:, 1:]
    y = np.empty((d, 2 * t))
    y[:, 0::2] = wv[:, 1:2] * xv
    y[:, 1::2] = wv[:, 2:3] * xv + wv[:, 0:1] * x_next
    y += b.value
    out = Var(y, "upsample_conv", (x, w, b))

    def bw(g):
        ge, go = g[:, 0::2], g[:, 1::2]
        dx = wv[:, 1:2] * ge + wv[:, 2:3] * go
        dx[:, 1:] += wv[:, 0:1] * go[:, :t - 1]
        dw = np.stack([
            (x_next * go).sum(axis=1),
            (xv * ge).sum(axis=1),
            (xv * go).sum(axis=1),
        ], axis=1)
        _accum(x, dx)
        _accum(w, dw)
        _accum(b, g.sum(axis=1, keepdims=True))
    out._bw = bw
    return out


def max_pool2(x: Var) -> Var:
    """Temporal max-pool, kernel 2, stride 2, ceil mode (odd tail survives)."""
    d, t = x.value.shape
    j = (t + 1) // 2
    xp = x.value
    if t % 2 == 1:
        xp = np.pad(x.value, ((0, 0), (0, 1)), constant_values=-np.inf)
    a, b = xp[:, 0::2], xp[:, 1::2]
    take_a = a >= b  # ties route to the earlier instant
    out = Var(np.where(take_a, a, b), "max_pool2", (x,))

    def bw(g):
        dxp = np.zeros((d, 2 * j))
        dxp[:, 0::2] = g * take_a
        dxp[:, 1::2] = g * ~take_a
        _accum(x, dxp[:, :t])
    out._bw = bw
    return out


# ---------------------------------------------------------------------------
# reductions, norms, shape ops
# ---------------------------------------------------------------------------

def global_avg_pool(x: Var) -> Var:
    """(D, T) -> (D, 1) mean over time."""
    d, t = x.value.shape
    out = Var(x.value.mean(axis=1, keepdims=True), "global_avg_pool", (x,))

    def bw(g):
        _accum(x, np.broadcast_to(g / t, (d, t)))
    out._bw = bw
    return out


def expand_time(x: Var, t: int) -> Var:
    """(D, 1) -> (D, T) by repetition; adjoint sums over time."""
    if x.value.shape[1] != 1:
        raise GraphError(f"expand_time: expected single column, got {x.value.shape}")
    out = Var(np.broadcast_to(x.value, (x.value.shape[0], t)).copy(), "expand_time", (x,))

    def bw(g):
        _accum(x, g.sum(axis=1, keepdims=True))
    out._bw = bw
    return out


def sum_all(x: Var) -> Var:
    out = Var(np.array([[x.value.sum()]]), "sum_all", (x,))

    def bw(g):
        _accum(x, np.full_like(x.value, g[0, 0]))
    out._bw = bw
    return out


def sum_axis(x: Var, axis: int) -> Var:
    out = Var(x.value.sum(axis=axis, keepdims=True), "sum_axis", (x,))

    def bw(g):
        _accum(x, np.broadcast_to(g, x.value.shape))
    out._bw = bw
    return out


def softmax(x: Var, axis: int = 0) -> Var:
    xv = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(xv)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Var(y, "softmax", (x,))

    def bw(g):
        _accum(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))
    out._bw = bw
    return out


def layer_norm(x: Var, gamma: Var, beta: Var) -> Var:
    """Normalize over channels at each instant; per-channel affine."""
    d, t = x.value.shape
    if gamma.value.shape != (d, 1) or beta.value.shape != (d, 1):
        raise GraphError("layer_norm: affine params must be (D, 1)")
    mu = x.value.mean(axis=0, keepdims=True)
    var = x.value.var(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(var + _EPS_NORM)
    xhat = (x.value - mu) * inv
    out = Var(gamma.value * xhat + beta.value, "layer_norm", (x, gamma, beta))

    def bw(g):
        gx = g * gamma.value
        _accum(x, inv * (gx - gx.mean(axis=0, keepdims=True)
                         - xhat * (gx * xhat).mean(axis=0, keepdims=True)))
        _accum(gamma, (g * xhat).sum(axis=1, keepdims=True))
        _accum(beta, g.sum(axis=1, keepdims=True))
    out._bw = bw
    return out


def group_norm(x: Var, gamma: Var, beta: Var, groups: int) -> Var:
    """Normalize each channel group over (channels-in-group x time)."""
    d, t = x.value.shape
    if d % groups != 0:
        raise GraphError(f"group_norm: {d} channels not divisible by {groups} groups")
    if gamma.value.shape != (d, 1) or beta.value.shape != (d, 1):
        raise GraphError("group_norm: affine params must be (D, 1)")
    xg = x.value.reshape(groups, -1)
    mu = xg.mean(axis=1, keepdims=True)
    var = xg.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _EPS_NORM)
    xhat = ((xg - mu) * inv).reshape(d, t)
    out = Var(gamma.value * xhat + beta.value, "group_norm", (x, gamma, beta))

    def bw(g):
        gx = (g * gamma.value).reshape(groups, -1)
        xh = xhat.reshape(groups, -1)
        dx = inv * (gx - gx.mean(axis=1, keepdims=True)
                    - xh * (gx * xh).mean(axis=1, keepdims=True))
        _accum(x, dx.reshape(d, t))
        _accum(gamma, (g * xhat).sum(axis=1, keepdims=True))
        _accum(beta, g.sum(axis=1, keepdims=True))
    out._bw = bw
    return out


def slice_rows(x: Var, lo: int, hi: int) -> Var:
    out = Var(x.value[lo:hi].copy(), "slice_rows", (x,))

    def bw(g):
        dx = np.zeros_like(x.value)
        dx[lo:hi] = g
        _accum(x, dx)
    out._bw = bw
    return out


def concat_rows(parts: Sequence[Var]) -> Var:
    t = parts[0].value.shape[1]
    for p in parts:
        if p.value.shape[1] != t:
            raise GraphError("concat_rows: mismatched time lengths")
    out = Var(np.concatenate([p.value for p in parts], axis=0), "concat_rows", tuple(parts))
    splits = np.cumsum([p.value.shape[0] for p in parts])[:-1]

    def bw(g):
        for p, gp in zip(parts, np.split(g, splits, axis=0)):
            _accum(p, gp)
    out._bw = bw
    return out


def trim_time(x: Var, t: int) -> Var:
    """Drop trailing instants down to length t; adjoint zero-pads them back."""
    if t > x.value.shape[1]:
        raise GraphError(f"trim_time: cannot trim {x.value.shape[1]} up to {t}")
    out = Var(x.value[:, :t].copy(), "trim_time", (x,))

    def bw(g):
        _accum(x, np.pad(g, ((0, 0), (0, x.value.shape[1] - t))))
    out._bw = bw
    return out


def band_stack_past(x: Var, bins: int) -> Var:
    """(1, T) -> (bins+1, T): row b holds x[t-b], masked where t-b < 0."""
    if x.value.shape[0] != 1:
        raise GraphError("band_stack_past: expected a single row")
    t = x.value.shape[1]
    y = np.full((bins + 1, t), NEG_MASK)
    for b in range(min(bins + 1, t)):
        y[b, b:] = x.value[0, :t - b]
    out = Var(y, "band_stack_past", (x,))

    def bw(g):
        dx = np.zeros_like(x.value)
        for b in range(min(bins + 1, t)):
            dx[0, :t - b] += g[b, b:]
        _accum(x, dx)
    out._bw = bw
    return out


def band_stack_future(x: Var, bins: int) -> Var:
    """(1, T) -> (bins+1, T): row b holds x[t+b], masked where t+b >= T."""
    if x.value.shape[0] != 1:
        raise GraphError("band_stack_future: expected a single row")
    t = x.value.shape[1]
    y = np.full((bins + 1, t), NEG_MASK)
    for b in range(min(bins + 1, t)):
        y[b, :t - b] = x.value[0, b:]
    out = Var(y, "band_stack_future", (x,))

    def bw(g):
        dx = np.zeros_like(x.value)
        for b in range(min(bins + 1, t)):
            dx[0, b:] += g[b, :t - b]
        _accum(x, dx)
    out._bw = bw
    return out


# ---------------------------------------------------------------------------
# DFT pair: complex values travel as stacked (real; imag) channel blocks
# ---------------------------------------------------------------------------

def dft(x: Var) -> Var:
    """(D, T) real -> (2D, T) spectrum, rows [real; imag], X[u] = sum_t x_t e^{-j2pi ut/T}."""
    f = np.fft.fft(x.value, axis=1)
    out = Var(np.concatenate([f.real, f.imag], axis=0), "dft", (x,))
    d = x.value.shape[0]

    def bw(g):
        gc = g[:d] + 1j * g[d:]
        _accum(x, np.fft.ifft(gc, axis=1).real * x.value.shape[1])
    out._bw = bw
    return out


def idft_real(y: Var) -> Var:
    """(2D, T) spectrum -> (D, T): real part of the inverse DFT.

    For a real signal filtered by an arbitrary complex mask this equals a
    circular convolution with the real part of the mask's inverse DFT; the
    discarded imaginary component never influences the output or gradient.
    """
    if y.value.shape[0] % 2 != 0:
        raise GraphError("idft_real: expected stacked (real; imag) rows")
    d = y.value.shape[0] // 2
    t = y.value.shape[1]
    yc = y.value[:d] + 1j * y.value[d:]
    out = Var(np.fft.ifft(yc, axis=1).real, "idft_real", (y,))

    def bw(g):
        gf = np.fft.fft(g, axis=1) / t
        _accum(y, np.concatenate([gf.real, gf.imag], axis=0))
    out._bw = bw
    return out


def complex_hadamard(a: Var, b: Var) -> Var:
    """Elementwise complex product of two stacked (real; imag) spectra."""
    _check_same_shape("complex_hadamard", a, b)
    if a.value.shape[0] % 2 != 0:
        raise GraphError("complex_hadamard: expected stacked (real; imag) rows")
    d = a.value.shape[0] // 2
    ar, ai = a.value[:d], a.value[d:]
    br, bi = b.value[:d], b.value[d:]
    out = Var(np.concatenate([ar * br - ai * bi, ar * bi + ai * br], axis=0),
              "complex_hadamard", (a, b))

    def bw(g):
        gr, gi = g[:d], g[d:]
        _accum(a, np.concatenate([gr * br + gi * bi, -gr * bi + gi * br], axis=0))
        _accum(b, np.concatenate([gr * ar + gi * ai, -gr * ai + gi * ar], axis=0))
    out._bw = bw
    return out


# ---------------------------------------------------------------------------
# backward pass and the finite-difference verifier
# ---------------------------------------------------------------------------

def _accum(node: Var, g: np.ndarray) -> None:
    if node._bw is None and node.op == "const":
        return
    if node.grad is None:
        node.grad = np.array(g, dtype=np.float64)
    else:
        node.grad += g


def _topo(out: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.id not in seen:
                stack.append((p, False))
    return order


def backward(out: Var, seed: np.ndarray | None = None) -> None:
    """Accumulate gradients of `out` into every reachable node's .grad.

    The seed must match the output shape; it defaults to all-ones.
    Unreached leaves keep grad None, which callers read as zero.
    """
    if seed is None:
        seed = np.ones_like(out.value)
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != out.value.shape:
        raise GraphError(f"backward: seed shape {seed.shape} != output shape {out.value.shape}")
    order = _topo(out)
    _accum(out, seed)
    for node in reversed(order):
        if node._bw is not None and node.grad is not None:
            node._bw(node.grad)


def zero_grads(out: Var) -> None:
    for node in _topo(out):
        node.grad = None


def fd_check(fn: Callable[[dict[str, np.ndarray]], Var],
             bindings: dict[str, np.ndarray],
             wrt: str,
             step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `fn` rebuilds the graph from plain arrays and must return a scalar
    (1, 1) node.  Relative error uses denominator max(1, |analytic|), so
    tiny gradients are compared absolutely.
    """
    if not 1e-7 <= step <= 1e-3:
        raise ValueError(f"fd_check: step {step} outside [1e-7, 1e-3]")
    bound = {k: np.asarray(v, dtype=np.float64) for k, v in bindings.items()}

    leaves: dict[str, Var] = {}

    def run(values: dict[str, np.ndarray]) -> Var:
        leaves.clear()
        for k, v in values.items():
            leaves[k] = leaf(v, k)
        return fn(leaves)

    out = run(bound)
    if out.value.shape != (1, 1):
        raise GraphError(f"fd_check: output must be scalar (1, 1), got {out.value.shape}")
    backward(out)
    target = leaves[wrt]
    analytic = target.grad if target.grad is not None else np.zeros_like(target.value)

    worst = 0.0
    base = bound[wrt]
    for idx in np.ndindex(*base.shape):
        orig = base[idx]
        base[idx] = orig + step
        hi = run(bound).value[0, 0]
        base[idx] = orig - step
        lo = run(bound).value[0, 0]
        base[idx] = orig
        numeric = (hi - lo) / (2.0 * step)
        err = abs(analytic[idx] - numeric) / max(1.0, abs(analytic[idx]))
        worst = max(worst, err)
    return worst


def scalar(x: float) -> Var:
    """Constant (1, 1) node."""
    return const(np.array([[float(x)]]))


def as_scalar(x: Var) -> float:
    if x.value.shape != (1, 1):
        raise GraphError(f"as_scalar: shape {x.value.shape}")
    return float(x.value[0, 0])
