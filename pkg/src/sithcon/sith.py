"""Scale-invariant temporal history: log-spaced kernel banks and encoders.

A bank of unimodal temporal filters with geometrically spaced time constants
turns an input stream into a logarithmically compressed memory of its recent
past.  Stretching the input in time then translates the memory along the
node-index axis, which is what the downstream pooled convolutions exploit.

Two encoder routes are provided: causal discrete convolution with the
sampled, truncated, unit-sum kernels (direct or FFT-accelerated, identical
to 1e-10), and a recursive exponential-decay state with an inverse-transform
readout that approximates the same memory without retaining the signal.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

# kernel spectra cached per (fft length, dtype); evicted LRU past this budget
_FFT_CACHE_BYTES = 1_600_000_000


# ---------------------------------------------------------------------------
# tau* grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TauStarGrid:
    """Geometric sequence of time constants: values[i] = (1+c)^i * taustar_min."""

    taustar_min: float
    taustar_max: float
    n_taustar: int
    c: float
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))

    def extend(self, n_added: int) -> "TauStarGrid":
        """Continue the geometric series upward by ``n_added`` nodes (same c).

        Existing node values are bit-identical to the originals.
        """
        if n_added < 0:
            raise ValueError("n_added must be >= 0")
        n = self.n_taustar + n_added
        values = self.taustar_min * (1.0 + self.c) ** np.arange(n)
        if not np.all(np.isfinite(values)):
            raise OverflowError("extended tau* values exceed representable range")
        return TauStarGrid(self.taustar_min, float(values[-1]), n, self.c, values)


def build_taustar_grid(taustar_min: float, taustar_max: float,
                       n_taustar: int) -> TauStarGrid:
    """Geometric grid of ``n_taustar`` time constants spanning the bounds."""
    if not (np.isfinite(taustar_min) and np.isfinite(taustar_max)):
        raise ValueError("grid bounds must be finite")
    if not 0 < taustar_min < taustar_max:
        raise ValueError(f"need 0 < taustar_min < taustar_max, "
                         f"got ({taustar_min}, {taustar_max})")
    if n_taustar < 2:
        raise ValueError("n_taustar must be >= 2")
    c = (taustar_max / taustar_min) ** (1.0 / (n_taustar - 1)) - 1.0
    values = taustar_min * (1.0 + c) ** np.arange(n_taustar)
    return TauStarGrid(float(taustar_min), float(taustar_max),
                       int(n_taustar), float(c), values)


def grid_from_spacing(taustar_min: float, c: float, n_taustar: int) -> TauStarGrid:
    """Rebuild a grid from (taustar_min, c, n); bit-exact for checkpoints."""
    if n_taustar < 2 or c <= 0 or taustar_min <= 0:
        raise ValueError("invalid grid spacing parameters")
    values = taustar_min * (1.0 + c) ** np.arange(n_taustar)
    return TauStarGrid(float(taustar_min), float(values[-1]),
                       int(n_taustar), float(c), values)


def index_shift_for_scale(grid: TauStarGrid, a: float) -> float:
    """Node-index translation induced by stretching time by factor ``a``."""
    if not (a > 0 and np.isfinite(a)):
        raise ValueError("scale factor must be positive and finite")
    return math.log(a) / math.log1p(grid.c)


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

def phi(k: int, x) -> np.ndarray | float:
    """Unimodal kernel ``x^k exp(-k x)``; peaks at x = 1, width ~ 1/sqrt(k).

    Evaluated as ``exp(k ln x - k x)`` so k = 35 neither overflows nor
    underflows prematurely.  Defined as 0 at x = 0; negative x rejected.
    """
    if k < 1 or int(k) != k:
        raise ValueError("k must be a positive integer")
    xa = np.asarray(x, dtype=np.float64)
    if np.any(xa < 0):
        raise ValueError("phi is defined for x >= 0 only")
    with np.errstate(divide="ignore"):
        out = np.where(xa > 0, np.exp(k * (np.log(np.where(xa > 0, xa, 1.0)) - xa)), 0.0)
    return out if out.ndim else float(out)


def _phi_support(k: int, trunc_eps: float) -> tuple[float, float]:
    """x-range where phi(k, x) >= trunc_eps * phi(k, 1), by bisection."""
    target = math.log(trunc_eps) / k  # solve ln x - x + 1 = target

    def g(x):
        return math.log(x) - x + 1.0 - target

    lo, hi = 1e-12, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if g(mid) < 0:
            lo = mid
        else:
            hi = mid
    x_lo = lo
    lo, hi = 1.0, 2.0
    while g(hi) > 0:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if g(mid) < 0:
            hi = mid
        else:
            lo = mid
    return x_lo, hi


class SithKernelBank:
    """Discretized unit-sum kernels, one per tau* node, on integer lags.

    Each kernel samples ``phi(k, lag / tau*)`` at integer lags, truncated
    where the unnormalized value falls below ``trunc_eps * phi(k, 1)``, then
    scaled to unit L1 sum so a node's activity is a weighted average of the
    past.  Nodes whose truncated support would hold fewer than 3 lags keep
    the 3 lags around their peak instead (fast-node rule).
    """

    def __init__(self, grid: TauStarGrid, k: int = 35, trunc_eps: float = 1e-6):
        if not 0.0 < trunc_eps < 1.0:
            raise ValueError("trunc_eps must be in (0, 1)")
        if k < 1 or int(k) != k:
            raise ValueError("k must be a positive integer")
        self.grid = grid
        self.k = int(k)
        self.trunc_eps = float(trunc_eps)

        x_lo, x_hi = _phi_support(self.k, self.trunc_eps)
        kernels, lag_lo, lag_hi = [], [], []
        for tau in grid.values:
            lo = max(1, int(math.floor(x_lo * tau)) - 2)
            hi = max(lo + 2, int(math.ceil(x_hi * tau)) + 2)
            lags = np.arange(lo, hi + 1)
            w = phi(self.k, lags / tau)
            keep = w >= self.trunc_eps * math.exp(-self.k)
            if keep.sum() >= 3:
                first, last = np.nonzero(keep)[0][[0, -1]]
                lags, w = lags[first:last + 1], w[first:last + 1]
            else:
                m = max(2, int(round(tau)))
                lags = np.arange(m - 1, m + 2)
                w = phi(self.k, lags / tau)
            total = w.sum()
            if total <= 0.0:
                raise ValueError(
                    f"empty kernel support for tau*={tau:g}: the lag grid "
                    "cannot resolve this node (grid/discretization mismatch)")
            kernels.append(w / total)
            lag_lo.append(int(lags[0]))
            lag_hi.append(int(lags[-1]))

        self.kernels = kernels
        self.lag_lo = np.array(lag_lo)
        self.lag_hi = np.array(lag_hi)
        self.max_lag = int(self.lag_hi.max())
        self._kernels_rev = [w[::-1].copy() for w in kernels]
        self._fft_cache: OrderedDict = OrderedDict()

    @property
    def n_taustar(self) -> int:
        return self.grid.n_taustar

    # -- kernel spectra -----------------------------------------------------

    def _spectra(self, L: int, cdtype) -> np.ndarray:
        key = (L, np.dtype(cdtype).char)
        if key in self._fft_cache:
            self._fft_cache.move_to_end(key)
            return self._fft_cache[key]
        n = self.n_taustar
        spec = np.empty((n, L // 2 + 1), dtype=cdtype)
        row = np.zeros(L, dtype=np.float64 if cdtype == np.complex128 else np.float32)
        for i in range(n):
            lo, hi = self.lag_lo[i], min(self.lag_hi[i], L - 1)
            row[:] = 0.0
            if lo < L:
                width = hi - lo + 1
                row[lo:hi + 1] = self.kernels[i][:width]
            spec[i] = np.fft.rfft(row)
        self._fft_cache[key] = spec
        total = sum(v.nbytes for v in self._fft_cache.values())
        while total > _FFT_CACHE_BYTES and len(self._fft_cache) > 1:
            _, old = self._fft_cache.popitem(last=False)
            total -= old.nbytes
        return spec

    # -- encoding (channel-major internals) ----------------------------------

    def encode_channel_major(self, x: np.ndarray, t_lo: int = 0,
                             t_hi: int | None = None,
                             method: str = "auto") -> np.ndarray:
        """Causal convolution of ``x (F, T)`` with every kernel.

        Returns rows ``t in [t_lo, t_hi)`` as ``(F, n_taustar, R)``.
        Pre-stream history is zero.  ``method`` is ``auto``, ``direct`` or
        ``fft``; the two routes agree to 1e-10 absolute in float64.
        """
        x = np.asarray(x)
        if x.ndim != 2:
            raise ValueError("expected (features, time) input")
        T = x.shape[1]
        if t_hi is None:
            t_hi = T
        if not 0 <= t_lo < t_hi <= T:
            raise ValueError(f"bad row range [{t_lo}, {t_hi}) for T={T}")
        if method == "auto":
            method = "direct" if (t_hi - t_lo) <= 4 else "fft"
        if method == "direct":
            return self._encode_direct(x, t_lo, t_hi)
        if method == "fft":
            return self._encode_fft(x, t_lo, t_hi)
        raise ValueError(f"unknown encode method: {method!r}")

    def _encode_direct(self, x: np.ndarray, t_lo: int, t_hi: int) -> np.ndarray:
        F, T = x.shape
        out = np.zeros((F, self.n_taustar, t_hi - t_lo), dtype=x.dtype)
        for r, t in enumerate(range(t_lo, t_hi)):
            for i in range(self.n_taustar):
                lo, hi = self.lag_lo[i], self.lag_hi[i]
                j_hi = t - lo          # newest sample the kernel touches
                if j_hi < 0:
                    continue
                j_lo = max(0, t - hi)
                wrev = self._kernels_rev[i]
                w_sl = wrev[hi - t + j_lo:hi - t + j_hi + 1]
                out[:, i, r] = x[:, j_lo:j_hi + 1] @ w_sl.astype(x.dtype, copy=False)
        return out

    def _encode_fft(self, x: np.ndarray, t_lo: int, t_hi: int) -> np.ndarray:
        F, T = x.shape
        u_lo = max(0, t_lo - self.max_lag)
        xs = x[:, u_lo:t_hi]
        Ts = xs.shape[1]
        Wk = min(self.max_lag + 1, Ts)
        L = 1 << max(4, int(math.ceil(math.log2(Ts + Wk - 1))))
        single = x.dtype == np.float32
        cdtype = np.complex64 if single else np.complex128
        spec = self._spectra(L, cdtype)
        X = np.fft.rfft(xs, L, axis=1).astype(cdtype, copy=False)
        a, b = t_lo - u_lo, t_hi - u_lo
        out = np.empty((F, self.n_taustar, t_hi - t_lo), dtype=x.dtype)
        chunk = max(1, min(self.n_taustar, int(64e6 // (L * 8))))
        for f in range(F):
            for c0 in range(0, self.n_taustar, chunk):
                c1 = min(c0 + chunk, self.n_taustar)
                block = np.fft.irfft(spec[c0:c1] * X[f][None, :], L, axis=1)
                out[f, c0:c1, :] = block[:, a:b]
        return out

    def encode_adjoint_channel_major(self, g: np.ndarray, t_lo: int, t_hi: int,
                                     T: int) -> np.ndarray:
        """Transpose of :meth:`encode_channel_major` for reverse-mode AD.

        ``g`` is the gradient over rows ``[t_lo, t_hi)`` shaped
        ``(F, n_taustar, R)``; returns the gradient w.r.t. ``x`` as (F, T).
        """
        F = g.shape[0]
        R = t_hi - t_lo
        out = np.zeros((F, T), dtype=g.dtype)
        if R <= 4:
            for r, t in enumerate(range(t_lo, t_hi)):
                for i in range(self.n_taustar):
                    lo, hi = self.lag_lo[i], self.lag_hi[i]
                    j_hi = t - lo
                    if j_hi < 0:
                        continue
                    j_lo = max(0, t - hi)
                    wrev = self._kernels_rev[i]
                    w_sl = wrev[hi - t + j_lo:hi - t + j_hi + 1].astype(g.dtype, copy=False)
                    out[:, j_lo:j_hi + 1] += np.outer(g[:, i, r], w_sl)
            return out
        u_lo = max(0, t_lo - self.max_lag)
        Ts = t_hi - u_lo
        Wk = min(self.max_lag + 1, Ts)
        L = 1 << max(4, int(math.ceil(math.log2(Ts + Wk - 1))))
        single = g.dtype == np.float32
        cdtype = np.complex64 if single else np.complex128
        spec = self._spectra(L, cdtype)
        gp = np.zeros((self.n_taustar, L), dtype=g.dtype)
        for f in range(F):
            gp[:, t_lo - u_lo:t_hi - u_lo] = g[f]
            S = (np.conj(spec) * np.fft.rfft(gp, axis=1)).sum(axis=0)
            out[f, u_lo:t_hi] = np.fft.irfft(S, L)[:t_hi - u_lo]
        return out


def build_kernel_bank(grid: TauStarGrid, k: int = 35,
                      trunc_eps: float = 1e-6) -> SithKernelBank:
    """Sample, truncate and unit-normalize one kernel per grid node."""
    return SithKernelBank(grid, k=k, trunc_eps=trunc_eps)


# ---------------------------------------------------------------------------
# public encoding
# ---------------------------------------------------------------------------

@dataclass
class SithRepresentation:
    """Compressed memory over (time, feature, tau*-index)."""

    data: np.ndarray          # (T, n_features, n_taustar)
    grid: TauStarGrid
    source_len: int


def encode(series, bank: SithKernelBank, method: str = "auto") -> SithRepresentation:
    """Encode a series into the compressed memory, one row per timestep.

    ``series`` is a ``(T, n_features)`` array or anything with a ``.data``
    attribute holding one (e.g. ``datasets.TimeSeries``).  Row ``t`` of the
    result is the memory state after observing inputs up to and including
    time ``t``, with pre-stream history treated as zero.
    """
    x = np.asarray(getattr(series, "data", series), dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("series must be (T >= 1, n_features)")
    if not np.all(np.isfinite(x)):
        raise ValueError("series contains non-finite values")
    cm = bank.encode_channel_major(np.ascontiguousarray(x.T), method=method)
    data = np.ascontiguousarray(np.moveaxis(cm, 2, 0))
    return SithRepresentation(data=data, grid=bank.grid, source_len=x.shape[0])


# ---------------------------------------------------------------------------
# recursive (Laplace-domain) route
# ---------------------------------------------------------------------------

@dataclass
class LaplaceState:
    """Exponentially decaying trace per node: F(s_i) with s_i = k / tau*_i."""

    s_values: np.ndarray      # strictly decreasing as tau* increases
    F: np.ndarray             # (n_features, n_s)
    dt: float
    grid: TauStarGrid
    k_small: int
    _decay: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self._decay is None:
            self._decay = np.exp(-self.s_values * self.dt)


def make_laplace_state(grid: TauStarGrid, k_small: int, n_features: int,
                       dt: float = 1.0) -> LaplaceState:
    """Fresh all-zero recursive state on the s-grid matching ``grid``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    s = k_small / grid.values
    return LaplaceState(s_values=s, F=np.zeros((n_features, grid.n_taustar)),
                        dt=float(dt), grid=grid, k_small=int(k_small))


def laplace_step(state: LaplaceState, inp) -> LaplaceState:
    """Advance the recursive state one step with the input held over dt.

    Exact integration of dF/dt = -s F + f over one step:
    ``F <- F * exp(-s dt) + f * dt``.  Updates in place and returns the state.
    """
    f = np.asarray(inp, dtype=np.float64).reshape(-1)
    if f.shape[0] != state.F.shape[0]:
        raise ValueError(f"expected {state.F.shape[0]} features, got {f.shape[0]}")
    if not np.all(np.isfinite(f)):
        raise ValueError("non-finite input")
    state.F *= state._decay[None, :]
    state.F += f[:, None] * state.dt
    return state


def post_inverse(state: LaplaceState, k_small: int) -> np.ndarray:
    """Estimate the memory from the recursive state (inverse-transform step).

    Applies ``(-1)^k / k! * s^(k+1) * d^k F / ds^k`` with the k-th derivative
    taken by repeated finite differencing across neighbouring s-nodes.  At
    finite k the kernel implied by this expression peaks at tau = (k+1)/s
    rather than k/s, so the output is re-associated onto the tau* grid with
    the matching index shift; without it the estimate sits a constant
    ~log(1+1/k)/log(1+c) nodes below the direct encoding.

    Returns (n_features, n_taustar - 2 * k_small): k_small nodes are dropped
    at each edge, where the differencing stencils are one-sided.
    """
    if not 2 <= k_small <= 8:
        raise ValueError("k_small must be in [2, 8] (unstable beyond)")
    if int(k_small) != state.k_small:
        raise ValueError("state was built for a different k_small")
    n = state.grid.n_taustar
    if n < 2 * k_small + 1:
        raise ValueError(f"grid too small: need >= {2 * k_small + 1} nodes")
    s = state.s_values
    D = state.F
    for _ in range(k_small):
        D = np.gradient(D, s, axis=1)
    raw = ((-1) ** k_small / math.factorial(k_small)) * s ** (k_small + 1) * D
    shift = int(round(math.log1p(1.0 / k_small) / math.log1p(state.grid.c)))
    src = np.clip(np.arange(k_small, n - k_small) - shift, 0, n - 1)
    return raw[:, src]
