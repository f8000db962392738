"""Minimal reverse-mode differentiation engine.

Provides exactly the primitives the scale-invariant convolution network and
the TCN baseline need: dilated valid convolution along a node axis, max-pool
over nodes, dense layers, ReLU, weight normalization, the two losses, Adam,
and a finite-difference gradient checker.

Conventions
-----------
* A ``Tensor`` wraps one contiguous ndarray.  Ops record closures on the
  output tensor; ``Tensor.backward()`` runs them in reverse topological
  order exactly once.
* Array layouts are channel-major: a feature stream is ``(features, time)``
  and a node-indexed map is ``(features, nodes)``.  Every op accepts an
  optional trailing batch/time axis, applied independently per column.
* Gradients accumulate across successive ``backward()`` calls until
  ``zero_grad``; the trainer exploits this for per-sample accumulation.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (pure inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Dense real array plus the bookkeeping for reverse-mode AD."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def zero_grad(self):
        self.grad = None

    def backward(self, seed=None):
        """Backpropagate from this tensor; ``seed`` defaults to ones."""
        if seed is None:
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                raise ValueError("backward seed shape mismatch")
        order = _toposort(self)
        _accum_grad(self, seed)
        for node in order:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior activations are not reused; free eagerly
                if not isinstance(node, Parameter) and node is not self:
                    node.grad = None
            node._backward = None
            node._parents = ()


class Parameter(Tensor):
    """Trainable tensor: named, grad-bearing, zeroed at each step start."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(np.array(data), requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.data.shape})"


def _toposort(root: Tensor):
    """Reverse topological order of the graph above ``root``."""
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited and parent.requires_grad:
                stack.append((parent, False))
    return list(reversed(order))


def _accum_grad(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = g.copy() if isinstance(t, Parameter) else g
    else:
        t.grad = t.grad + g


def _make(data, parents, backward):
    """Wrap an op result; drops the graph when grads are off/unneeded."""
    requires = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    if requires:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_dtype(*tensors):
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise ValueError(f"mixed dtypes in op: {dt} vs {t.data.dtype}")
    return dt


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def conv_over_nodes(x: Tensor, w: Tensor, dilation: int = 1) -> Tensor:
    """Valid dilated correlation along the node axis, full feature extent.

    ``x`` is ``(F, N)`` or ``(F, N, T)``; ``w`` is ``(C, F, K)``.  Output is
    ``(C, N_out[, T])`` with ``N_out = N - (K - 1) * dilation``.
    """
    _check_dtype(x, w)
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    xv = x.data
    squeeze = xv.ndim == 2
    if squeeze:
        xv = xv[:, :, None]
    if xv.ndim != 3 or w.data.ndim != 3:
        raise ValueError("conv_over_nodes expects x (F,N[,T]) and w (C,F,K)")
    F, N, T = xv.shape
    C, Fw, K = w.data.shape
    if Fw != F:
        raise ValueError(f"filter feature count {Fw} != input features {F}")
    span = (K - 1) * dilation + 1
    if N < span:
        raise ValueError(f"node axis too short: {N} < (K-1)*dilation+1 = {span}")
    n_out = N - span + 1

    # im2col copy (F*K, n_out*T); the strided view keeps time contiguous so
    # the copy is cheap and the contraction is a single GEMM.
    xc = np.ascontiguousarray(xv)
    sF, sN, sT = xc.strides
    view = as_strided(xc, shape=(F, K, n_out, T),
                      strides=(sF, dilation * sN, sN, sT))
    cols = np.ascontiguousarray(view).reshape(F * K, n_out * T)
    out = (w.data.reshape(C, F * K) @ cols).reshape(C, n_out, T)
    if squeeze:
        out = out[:, :, 0]

    def backward(g):
        gv = g if not squeeze else g[:, :, None]
        gm = np.ascontiguousarray(gv).reshape(C, n_out * T)
        if w.requires_grad:
            _accum_grad(w, (gm @ cols.T).reshape(C, F, K))
        if x.requires_grad:
            gcols = (w.data.reshape(C, F * K).T @ gm).reshape(F, K, n_out, T)
            gx = np.zeros_like(xv)
            for k in range(K):
                gx[:, k * dilation:k * dilation + n_out, :] += gcols[:, k]
            _accum_grad(x, gx[:, :, 0] if squeeze else gx)

    return _make(out, (x, w), backward)


def maxpool_over_nodes(x: Tensor) -> Tensor:
    """Per-channel maximum over the node axis (axis 1); ties -> lowest index.

    ``(C, N[, T])`` -> ``(C[, T])``.  Backward routes the whole gradient to
    the saved argmax position.
    """
    if x.data.ndim not in (2, 3):
        raise ValueError("maxpool_over_nodes expects (C, N[, T])")
    if x.data.shape[1] < 1:
        raise ValueError("empty node axis")
    idx = np.argmax(x.data, axis=1)  # first occurrence on ties
    out = np.take_along_axis(x.data, np.expand_dims(idx, 1), axis=1)
    out = np.squeeze(out, axis=1)

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.put_along_axis(gx, np.expand_dims(idx, 1),
                              np.expand_dims(g, 1), axis=1)
            _accum_grad(x, gx)

    t = _make(out, (x,), backward)
    return t


def argmax_over_nodes(x: np.ndarray) -> np.ndarray:
    """Argmax along the node axis of a raw ``(C, N[, T])`` array."""
    return np.argmax(x, axis=1)


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``w @ x (+ b)``; ``x`` is ``(n_in,)`` or ``(n_in, T)``."""
    _check_dtype(x, w)
    n_out, n_in = w.data.shape
    if x.data.shape[0] != n_in:
        raise ValueError(f"dense: input dim {x.data.shape[0]} != {n_in}")
    out = w.data @ x.data
    if b is not None:
        if b.data.shape != (n_out,):
            raise ValueError("dense: bias shape mismatch")
        out = out + (b.data if out.ndim == 1 else b.data[:, None])

    def backward(g):
        if w.requires_grad:
            if x.data.ndim == 1:
                _accum_grad(w, np.outer(g, x.data))
            else:
                _accum_grad(w, g @ x.data.T)
        if b is not None and b.requires_grad:
            _accum_grad(b, g if g.ndim == 1 else g.sum(axis=1))
        if x.requires_grad:
            _accum_grad(x, w.data.T @ g)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); subgradient 0 at 0."""
    mask = x.data > 0
    out = np.where(mask, x.data, 0)

    def backward(g):
        if x.requires_grad:
            _accum_grad(x, g * mask)

    return _make(out, (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of same-shape tensors (residual connections)."""
    _check_dtype(a, b)
    if a.data.shape != b.data.shape:
        raise ValueError("add: shape mismatch")
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accum_grad(a, g)
        if b.requires_grad:
            _accum_grad(b, g)

    return _make(out, (a, b), backward)


def scale(x: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar (loss weighting)."""
    out = x.data * x.data.dtype.type(s)

    def backward(g):
        if x.requires_grad:
            _accum_grad(x, g * x.data.dtype.type(s))

    return _make(out, (x,), backward)


def take_column(x: Tensor, t: int) -> Tensor:
    """Select column ``t`` of a ``(F, T)`` stream -> ``(F,)``."""
    if x.data.ndim != 2:
        raise ValueError("take_column expects (F, T)")
    t = int(t)
    out = x.data[:, t].copy()

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[:, t] = g
            _accum_grad(x, gx)

    return _make(out, (x,), backward)


def pad_columns(x: Tensor, left: int) -> Tensor:
    """Left-pad a ``(F, T)`` stream with ``left`` zero columns (causal pad)."""
    if left < 0:
        raise ValueError("pad must be >= 0")
    out = np.pad(x.data, ((0, 0), (left, 0)))

    def backward(g):
        if x.requires_grad:
            _accum_grad(x, g[:, left:])

    return _make(out, (x,), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p == 0."""
    if p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout p must be in [0, 1)")
    mask = (rng.random(x.data.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    out = x.data * mask

    def backward(g):
        if x.requires_grad:
            _accum_grad(x, g * mask)

    return _make(out, (x,), backward)


def weight_norm(v: Tensor, g: Tensor) -> Tensor:
    """Per-output-channel weight normalization ``w_c = g_c * v_c / ||v_c||``."""
    _check_dtype(v, g)
    C = v.data.shape[0]
    if g.data.shape != (C,):
        raise ValueError("weight_norm: gain must be (C,)")
    flat = v.data.reshape(C, -1)
    norms = np.sqrt((flat * flat).sum(axis=1))
    if np.any(norms == 0):
        raise ValueError("weight_norm: zero-norm filter")
    coef = (g.data / norms)
    out = v.data * coef.reshape((C,) + (1,) * (v.data.ndim - 1))

    def backward(gr):
        grf = gr.reshape(C, -1)
        vhat = flat / norms[:, None]
        dot = (grf * vhat).sum(axis=1)
        if g.requires_grad:
            _accum_grad(g, dot)
        if v.requires_grad:
            gv = (g.data / norms)[:, None] * (grf - dot[:, None] * vhat)
            _accum_grad(v, gv.reshape(v.data.shape))

    return _make(out, (v, g), backward)


def linear_map(x: Tensor, forward_fn, adjoint_fn) -> Tensor:
    """Custom linear operator: ``forward_fn(x.data)`` with adjoint backward.

    ``adjoint_fn`` must implement the transpose map (checked in tests via
    <A x, y> == <x, A^T y>).
    """
    out = forward_fn(x.data)

    def backward(g):
        if x.requires_grad:
            _accum_grad(x, adjoint_fn(g))

    return _make(out, (x,), backward)


def softmax_cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Stable softmax + cross-entropy against an integer class label."""
    z = logits.data
    if z.ndim != 1:
        raise ValueError("softmax_cross_entropy expects a logit vector")
    label = int(label)
    if not 0 <= label < z.shape[0]:
        raise ValueError(f"label {label} out of range for {z.shape[0]} classes")
    m = z.max()
    ez = np.exp(z - m)
    p = ez / ez.sum()
    loss = -(np.log(p[label]))

    def backward(g):
        if logits.requires_grad:
            gl = p.copy()
            gl[label] -= 1.0
            _accum_grad(logits, gl * g)

    return _make(np.asarray(loss, dtype=z.dtype), (logits,), backward)


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error against a constant target array/scalar."""
    t = np.asarray(target, dtype=pred.data.dtype)
    if t.shape not in (pred.data.shape, ()):
        raise ValueError("mse: target shape mismatch")
    diff = pred.data - t
    loss = np.mean(diff * diff)

    def backward(g):
        if pred.requires_grad:
            _accum_grad(pred, (2.0 / diff.size) * diff * g)

    return _make(np.asarray(loss, dtype=pred.data.dtype), (pred,), backward)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class NonFiniteGradientError(RuntimeError):
    """Raised when a parameter carries a NaN/Inf gradient at step time."""


def adam_step(params, state: dict, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One Adam update with bias correction; moments live in ``state``.

    ``state`` maps parameter name -> (step, m, v) and is created on first
    use.  Parameters with ``grad is None`` are treated as zero-gradient.
    Aborts (before touching any parameter) if any gradient is non-finite.
    """
    for p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError(
                f"non-finite gradient in parameter '{p.name}'")
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if p.name not in state:
            state[p.name] = (0, np.zeros_like(p.data), np.zeros_like(p.data))
        t, m, v = state[p.name]
        t += 1
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * (g * g)
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype)
        state[p.name] = (t, m, v)


class Adam:
    """Thin stateful wrapper over :func:`adam_step`."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state: dict = {}

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        adam_step(self.params, self.state, self.lr, self.beta1,
                  self.beta2, self.eps)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckEntry:
    param: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    """Comparison of analytic gradients to central finite differences."""
    max_rel_error: float
    n_checked: int
    n_resampled: int
    entries: list = field(default_factory=list)

    def worst(self) -> GradCheckEntry | None:
        return max(self.entries, key=lambda e: e.rel_error, default=None)


def gradient_check(loss_fn, params, n_samples: int = 12, h: float = 1e-5,
                   seed: int = 0) -> GradCheckReport:
    """Check ``d loss_fn() / d params`` against central differences.

    ``loss_fn`` must be a deterministic nullary callable returning a scalar
    Tensor built from ``params``.  A random subset of entries per parameter
    is probed.  Probe points where the two-step-size numeric estimates
    disagree (argmax ties, ReLU kinks under perturbation) are resampled.
    """
    params = [p for p in params if p.data.size > 0]
    if not params:
        return GradCheckReport(0.0, 0, 0)
    rng = np.random.default_rng(seed)
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {p.name: (np.zeros_like(p.data) if p.grad is None
                         else p.grad.copy()) for p in params}

    def numeric_at(p, idx, step):
        orig = p.data[idx]
        with no_grad():
            p.data[idx] = orig + step
            fp = float(loss_fn().data)
            p.data[idx] = orig - step
            fm = float(loss_fn().data)
            p.data[idx] = orig
        return (fp - fm) / (2 * step)

    report = GradCheckReport(0.0, 0, 0)
    for p in params:
        n = min(n_samples, p.data.size)
        chosen = rng.choice(p.data.size, size=n, replace=False)
        for flat in chosen:
            idx = np.unravel_index(flat, p.data.shape)
            attempts = 0
            while True:
                n1 = numeric_at(p, idx, h)
                n2 = numeric_at(p, idx, h / 2)
                stable = abs(n1 - n2) <= 1e-5 * max(abs(n1), abs(n2), 1e-3)
                if stable or attempts >= 4:
                    break
                # unstable probe (tie/kink crossed): resample another entry
                report.n_resampled += 1
                attempts += 1
                flat = rng.integers(p.data.size)
                idx = np.unravel_index(int(flat), p.data.shape)
            a = float(analytic[p.name][idx])
            rel = abs(a - n2) / max(abs(a), abs(n2), 1e-8)
            report.entries.append(GradCheckEntry(p.name, idx, a, n2, rel))
            report.n_checked += 1
            report.max_rel_error = max(report.max_rel_error, rel)
    for p in params:
        p.zero_grad()
    return report
