"""SITHCon and TCN model assembly, grid extension, and checkpoints.

A SITHCon layer encodes its input stream into the compressed tau* memory,
then at each timestep applies a 2-D convolution over (features, nodes), a
max-pool over the node axis, a dense map and a ReLU; the per-timestep
outputs form the next layer's input stream.  Because only the final
timestep feeds the readout, the forward pass computes each layer's output
only over the window of rows the layers above actually consume -- exact,
since every kernel has finite truncated support.

The TCN baseline follows the standard residual block structure: two
weight-normalized causal dilated convolutions per block with ReLUs,
dilation doubling per block, and a dense readout at the final timestep.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .sith import (SithKernelBank, TauStarGrid, build_kernel_bank,
                   build_taustar_grid, grid_from_spacing)

CHECKPOINT_VERSION = 1

# no-grad forwards chunk the per-timestep ops to cap transient memory
_EVAL_COLS_BYTES = 256_000_000


class ForwardError(RuntimeError):
    """Non-finite intermediate detected during a forward pass."""


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SithconConfig:
    """Architecture knobs for a SITHCon stack (grid shared across layers)."""

    n_layers: int = 2
    n_channels: int = 35
    n_features_out: int | None = None       # defaults to n_channels
    kernel_width: int = 23
    dilation: int = 2
    k: int = 35
    n_taustar: int = 400
    taustar_min: float = 1.0
    taustar_max: float = 4000.0
    trunc_eps: float = 1e-6
    dense_bias: bool = True

    def features_out(self) -> int:
        return self.n_features_out if self.n_features_out is not None else self.n_channels


@dataclass(frozen=True)
class TcnConfig:
    """Architecture knobs for the TCN baseline."""

    n_blocks: int = 8
    n_channels: int = 25
    kernel_size: int = 14
    dropout: float = 0.0
    weight_norm: bool = True


@dataclass(frozen=True)
class SithconLayerConfig:
    """Resolved per-layer wiring (validated against the grid)."""

    n_features_in: int
    n_channels: int
    n_features_out: int
    kernel_width: int
    dilation: int
    k: int

    def __post_init__(self):
        if min(self.n_features_in, self.n_channels, self.n_features_out,
               self.kernel_width, self.dilation, self.k) < 1:
            raise ValueError("layer dimensions must be positive")

    def span(self) -> int:
        return (self.kernel_width - 1) * self.dilation + 1


# ---------------------------------------------------------------------------
# SITHCon
# ---------------------------------------------------------------------------

class SithconLayer:
    def __init__(self, cfg: SithconLayerConfig, bank: SithKernelBank,
                 index: int, rng: np.random.Generator, dtype,
                 dense_bias: bool = True):
        if bank.n_taustar < cfg.span():
            raise ValueError(
                f"layer {index}: n_taustar={bank.n_taustar} < "
                f"(K-1)*dilation+1 = {cfg.span()}")
        self.cfg = cfg
        self.bank = bank
        self.index = index
        bound = 1.0 / np.sqrt(cfg.n_features_in * cfg.kernel_width)
        self.conv = Parameter(rng.uniform(
            -bound, bound, (cfg.n_channels, cfg.n_features_in,
                            cfg.kernel_width)).astype(dtype),
            name=f"layer{index}.conv")
        bound = 1.0 / np.sqrt(cfg.n_channels)
        self.dense_w = Parameter(rng.uniform(
            -bound, bound, (cfg.n_features_out, cfg.n_channels)).astype(dtype),
            name=f"layer{index}.dense_w")
        self.dense_b = None
        if dense_bias:
            self.dense_b = Parameter(rng.uniform(
                -bound, bound, cfg.n_features_out).astype(dtype),
                name=f"layer{index}.dense_b")

    def params(self) -> list[Parameter]:
        ps = [self.conv, self.dense_w]
        if self.dense_b is not None:
            ps.append(self.dense_b)
        return ps

    def forward_rows(self, stream: Tensor, stream_t0: int, out_t0: int,
                     T: int) -> tuple[Tensor, int]:
        """Output rows [out_t0, T) given input rows [stream_t0, T)."""
        rel_lo, rel_hi = out_t0 - stream_t0, T - stream_t0
        if not ad.grad_enabled():
            data = self._forward_rows_eval(stream.data, rel_lo, rel_hi)
            out = Tensor(data)
        else:
            bank = self.bank
            rep = ad.linear_map(
                stream,
                lambda xd: bank.encode_channel_major(xd, rel_lo, rel_hi),
                lambda g: bank.encode_adjoint_channel_major(
                    g, rel_lo, rel_hi, rel_hi))
            conv = ad.conv_over_nodes(rep, self.conv, self.cfg.dilation)
            pooled = ad.maxpool_over_nodes(conv)
            out = ad.relu(ad.dense(pooled, self.dense_w, self.dense_b))
        if not np.all(np.isfinite(out.data)):
            raise ForwardError(f"non-finite activations in layer {self.index}")
        return out, out_t0

    def _forward_rows_eval(self, x: np.ndarray, rel_lo: int,
                           rel_hi: int) -> np.ndarray:
        """Inference path: chunk the per-timestep ops over the row window."""
        cfg = self.cfg
        rep = self.bank.encode_channel_major(x, rel_lo, rel_hi)
        R = rel_hi - rel_lo
        n_out_nodes = self.bank.n_taustar - cfg.span() + 1
        chunk = max(1, int(_EVAL_COLS_BYTES //
                           (cfg.n_features_in * cfg.kernel_width *
                            n_out_nodes * rep.dtype.itemsize)))
        out = np.empty((cfg.n_features_out, R), dtype=rep.dtype)
        w = self.dense_w.data
        b = 0.0 if self.dense_b is None else self.dense_b.data[:, None]
        for lo in range(0, R, chunk):
            hi = min(lo + chunk, R)
            conv = ad.conv_over_nodes(Tensor(rep[:, :, lo:hi]), self.conv,
                                      cfg.dilation).data
            pooled = conv.max(axis=1)
            out[:, lo:hi] = np.maximum(w @ pooled + b, 0.0)
        return out

    def pooled_rows(self, stream: np.ndarray, rel_lo: int,
                    rel_hi: int) -> tuple[np.ndarray, np.ndarray]:
        """Post-maxpool channel values and their node argmax (diagnostics)."""
        rep = self.bank.encode_channel_major(stream, rel_lo, rel_hi)
        conv = ad.conv_over_nodes(Tensor(rep), self.conv, self.cfg.dilation).data
        return conv.max(axis=1), ad.argmax_over_nodes(conv)


class SithconNetwork:
    """Stack of SITHCon layers plus a dense readout at the final timestep."""

    def __init__(self, layers: list[SithconLayer], readout_w: Parameter,
                 readout_b: Parameter, task: str, config: SithconConfig,
                 n_features_in: int, dtype):
        self.layers = layers
        self.readout_w = readout_w
        self.readout_b = readout_b
        self.task = task
        self.config = config
        self.n_features_in = n_features_in
        self.dtype = np.dtype(dtype)

    kind = "sithcon"

    @property
    def n_outputs(self) -> int:
        return self.readout_w.data.shape[0]

    @property
    def grid(self) -> TauStarGrid:
        return self.layers[0].bank.grid

    def params(self) -> list[Parameter]:
        ps = []
        for layer in self.layers:
            ps.extend(layer.params())
        ps.extend([self.readout_w, self.readout_b])
        return ps

    def _as_stream(self, series) -> Tensor:
        x = np.asarray(getattr(series, "data", series))
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[1] != self.n_features_in:
            raise ValueError(f"expected {self.n_features_in} features, "
                             f"got {x.shape[1]}")
        if not np.all(np.isfinite(x)):
            raise ValueError("series contains non-finite values")
        return Tensor(np.ascontiguousarray(x.T, dtype=self.dtype))

    def _window_starts(self, T: int) -> list[int]:
        starts = [0] * len(self.layers)
        starts[-1] = T - 1
        for l in range(len(self.layers) - 1, 0, -1):
            starts[l - 1] = max(0, starts[l] - self.layers[l].bank.max_lag)
        return starts

    def forward(self, series) -> Tensor:
        """Logits (classification) or a length-1 tensor (regression)."""
        stream = self._as_stream(series)
        T = stream.data.shape[1]
        starts = self._window_starts(T)
        t0 = 0
        for layer, out_t0 in zip(self.layers, starts):
            stream, t0 = layer.forward_rows(stream, t0, out_t0, T)
        final = ad.take_column(stream, stream.data.shape[1] - 1)
        logits = ad.dense(final, self.readout_w, self.readout_b)
        if not np.all(np.isfinite(logits.data)):
            raise ForwardError("non-finite readout")
        return logits

    def feature_streams(self, series) -> list[np.ndarray]:
        """Full per-layer output streams as (T, n_features_out) arrays."""
        with ad.no_grad():
            stream = self._as_stream(series)
            T = stream.data.shape[1]
            outs = []
            for layer in self.layers:
                stream, _ = layer.forward_rows(stream, 0, 0, T)
                outs.append(stream.data.T.copy())
            return outs

    def pooled_features(self, series) -> list[dict]:
        """Per-layer post-maxpool values and argmax indices over all rows."""
        with ad.no_grad():
            stream = self._as_stream(series)
            T = stream.data.shape[1]
            diags = []
            for layer in self.layers:
                pooled, argmax = layer.pooled_rows(stream.data, 0, T)
                nxt, _ = layer.forward_rows(stream, 0, 0, T)
                diags.append({"pooled": pooled, "argmax": argmax})
                stream = nxt
            return diags


def build_sithcon(cfg: SithconConfig, n_features_in: int, n_outputs: int,
                  task: str, seed: int = 0, dtype=np.float64,
                  grids: list[TauStarGrid] | None = None) -> SithconNetwork:
    """Construct a SITHCon stack; one bank is shared by layers with one grid."""
    if task not in ("classification", "regression"):
        raise ValueError(f"unknown task kind: {task!r}")
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype)
    if grids is None:
        grid = build_taustar_grid(cfg.taustar_min, cfg.taustar_max, cfg.n_taustar)
        grids = [grid] * cfg.n_layers
    banks: dict = {}
    layers = []
    f_in = n_features_in
    for i, grid in enumerate(grids):
        key = (grid.taustar_min, grid.c, grid.n_taustar, cfg.k)
        if key not in banks:
            banks[key] = build_kernel_bank(grid, k=cfg.k, trunc_eps=cfg.trunc_eps)
        lcfg = SithconLayerConfig(
            n_features_in=f_in, n_channels=cfg.n_channels,
            n_features_out=cfg.features_out(),
            kernel_width=cfg.kernel_width, dilation=cfg.dilation, k=cfg.k)
        layers.append(SithconLayer(lcfg, banks[key], i, rng, dtype,
                                   dense_bias=cfg.dense_bias))
        f_in = cfg.features_out()
    bound = 1.0 / np.sqrt(f_in)
    readout_w = Parameter(rng.uniform(-bound, bound, (n_outputs, f_in))
                          .astype(dtype), name="readout.w")
    readout_b = Parameter(rng.uniform(-bound, bound, n_outputs)
                          .astype(dtype), name="readout.b")
    return SithconNetwork(layers, readout_w, readout_b, task, cfg,
                          n_features_in, dtype)


def extend_taustar(net: SithconNetwork, n_added: int) -> SithconNetwork:
    """Append nodes continuing each layer's geometric grid; weights untouched.

    Kernel banks are rebuilt on the extended grids; every learned parameter
    is copied elementwise.  With ``n_added == 0`` the forward outputs are
    bit-identical.
    """
    if n_added < 0:
        raise ValueError("n_added must be >= 0")
    new_grids = [layer.bank.grid.extend(n_added) for layer in net.layers]
    cfg = dataclasses.replace(
        net.config, n_taustar=new_grids[0].n_taustar,
        taustar_max=float(new_grids[0].values[-1]))
    out = build_sithcon(cfg, net.n_features_in, net.n_outputs, net.task,
                        seed=0, dtype=net.dtype, grids=new_grids)
    for dst, src in zip(out.params(), net.params()):
        if dst.data.shape != src.data.shape:
            raise AssertionError("extension must not reshape parameters")
        dst.data = src.data.copy()
    return out


def effective_scale_range(net: SithconNetwork) -> float:
    """Upper bound (1+c)^(n_taustar - K) on tolerated upward rescaling."""
    grid = net.grid
    return float((1.0 + grid.c) ** (grid.n_taustar - net.config.kernel_width))


# ---------------------------------------------------------------------------
# TCN baseline
# ---------------------------------------------------------------------------

class TcnBlock:
    def __init__(self, c_in: int, c_out: int, kernel_size: int, dilation: int,
                 index: int, rng: np.random.Generator, dtype,
                 use_weight_norm: bool, dropout: float):
        self.kernel_size = kernel_size
        self.dilation = dilation
        self.index = index
        self.use_weight_norm = use_weight_norm
        self.dropout = dropout

        def conv_param(tag, ci):
            bound = 1.0 / np.sqrt(ci * kernel_size)
            v = Parameter(rng.uniform(-bound, bound, (c_out, ci, kernel_size))
                          .astype(dtype), name=f"block{index}.{tag}_v")
            b = Parameter(rng.uniform(-bound, bound, c_out).astype(dtype),
                          name=f"block{index}.{tag}_b")
            g = None
            if use_weight_norm:
                norms = np.sqrt((v.data.reshape(c_out, -1) ** 2).sum(axis=1))
                g = Parameter(norms.astype(dtype), name=f"block{index}.{tag}_g")
            return v, g, b

        self.conv1_v, self.conv1_g, self.conv1_b = conv_param("conv1", c_in)
        self.conv2_v, self.conv2_g, self.conv2_b = conv_param("conv2", c_out)
        self.down_w = self.down_b = None
        if c_in != c_out:
            bound = 1.0 / np.sqrt(c_in)
            self.down_w = Parameter(rng.uniform(-bound, bound, (c_out, c_in, 1))
                                    .astype(dtype), name=f"block{index}.down_w")
            self.down_b = Parameter(rng.uniform(-bound, bound, c_out)
                                    .astype(dtype), name=f"block{index}.down_b")

    def params(self) -> list[Parameter]:
        ps = [self.conv1_v, self.conv1_b, self.conv2_v, self.conv2_b]
        if self.use_weight_norm:
            ps[1:1] = [self.conv1_g]
            ps.insert(4, self.conv2_g)
        if self.down_w is not None:
            ps.extend([self.down_w, self.down_b])
        return ps

    def _conv(self, x: Tensor, v, g, b) -> Tensor:
        w = ad.weight_norm(v, g) if self.use_weight_norm else v
        padded = ad.pad_columns(x, (self.kernel_size - 1) * self.dilation)
        out = ad.conv_over_nodes(padded, w, self.dilation)
        F, T = out.data.shape
        return ad.add(out, _broadcast_bias(b, T))

    def forward(self, x: Tensor, rng: np.random.Generator | None) -> Tensor:
        h = ad.relu(self._conv(x, self.conv1_v, self.conv1_g, self.conv1_b))
        if self.dropout > 0 and rng is not None:
            h = ad.dropout(h, self.dropout, rng)
        h = ad.relu(self._conv(h, self.conv2_v, self.conv2_g, self.conv2_b))
        if self.dropout > 0 and rng is not None:
            h = ad.dropout(h, self.dropout, rng)
        res = x
        if self.down_w is not None:
            res = ad.conv_over_nodes(x, self.down_w, 1)
            res = ad.add(res, _broadcast_bias(self.down_b, res.data.shape[1]))
        return ad.relu(ad.add(h, res))


def _broadcast_bias(b: Parameter, T: int) -> Tensor:
    return ad.linear_map(
        b, lambda bd: np.repeat(bd[:, None], T, axis=1),
        lambda g: g.sum(axis=1))


class TcnNetwork:
    """Residual dilated causal stack with readout at the final timestep."""

    kind = "tcn"

    def __init__(self, blocks: list[TcnBlock], readout_w: Parameter,
                 readout_b: Parameter, task: str, config: TcnConfig,
                 n_features_in: int, dtype):
        self.blocks = blocks
        self.readout_w = readout_w
        self.readout_b = readout_b
        self.task = task
        self.config = config
        self.n_features_in = n_features_in
        self.dtype = np.dtype(dtype)
        self._drop_rng = None

    @property
    def n_outputs(self) -> int:
        return self.readout_w.data.shape[0]

    def params(self) -> list[Parameter]:
        ps = []
        for blk in self.blocks:
            ps.extend(blk.params())
        ps.extend([self.readout_w, self.readout_b])
        return ps

    def receptive_field(self) -> int:
        k = self.config.kernel_size
        return 1 + sum(2 * (k - 1) * blk.dilation for blk in self.blocks)

    def train_mode(self, rng: np.random.Generator | None):
        """Enable dropout with the given generator (None disables)."""
        self._drop_rng = rng

    def forward(self, series) -> Tensor:
        x = np.asarray(getattr(series, "data", series))
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[1] != self.n_features_in:
            raise ValueError(f"expected {self.n_features_in} features, "
                             f"got {x.shape[1]}")
        stream = Tensor(np.ascontiguousarray(x.T, dtype=self.dtype))
        for blk in self.blocks:
            stream = blk.forward(stream, self._drop_rng)
            if not np.all(np.isfinite(stream.data)):
                raise ForwardError(f"non-finite activations in block {blk.index}")
        final = ad.take_column(stream, stream.data.shape[1] - 1)
        return ad.dense(final, self.readout_w, self.readout_b)

    def activations_at(self, series, t: int) -> list[np.ndarray]:
        """Per-block activation columns at time t (causality checks)."""
        with ad.no_grad():
            x = np.asarray(getattr(series, "data", series))
            stream = Tensor(np.ascontiguousarray(x.T, dtype=self.dtype))
            cols = []
            for blk in self.blocks:
                stream = blk.forward(stream, None)
                cols.append(stream.data[:, t].copy())
            return cols


def build_tcn(cfg: TcnConfig, n_features_in: int, n_outputs: int, task: str,
              seed: int = 0, dtype=np.float64) -> TcnNetwork:
    if task not in ("classification", "regression"):
        raise ValueError(f"unknown task kind: {task!r}")
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype)
    blocks = []
    c_in = n_features_in
    for i in range(cfg.n_blocks):
        blocks.append(TcnBlock(c_in, cfg.n_channels, cfg.kernel_size, 2 ** i,
                               i, rng, dtype, cfg.weight_norm, cfg.dropout))
        c_in = cfg.n_channels
    bound = 1.0 / np.sqrt(c_in)
    readout_w = Parameter(rng.uniform(-bound, bound, (n_outputs, c_in))
                          .astype(dtype), name="readout.w")
    readout_b = Parameter(rng.uniform(-bound, bound, n_outputs)
                          .astype(dtype), name="readout.b")
    return TcnNetwork(blocks, readout_w, readout_b, task, cfg,
                      n_features_in, dtype)


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def param_count(net) -> int:
    """Total number of scalar parameters."""
    params = net.params() if hasattr(net, "params") else list(net)
    return int(sum(p.data.size for p in params))


def predict(net, series) -> np.ndarray:
    """Inference forward: raw logits / regression output as an ndarray."""
    with ad.no_grad():
        return net.forward(series).data.copy()


# ---------------------------------------------------------------------------
# checkpoints (.npz: versioned, self-describing shapes, lossless)
# ---------------------------------------------------------------------------

def save_checkpoint(path, net, optimizer_state: dict | None = None,
                    metadata: dict | None = None) -> None:
    """Serialize a model (+ optional Adam state) to a versioned .npz file."""
    head = {
        "format_version": CHECKPOINT_VERSION,
        "kind": net.kind,
        "task": net.task,
        "n_features_in": net.n_features_in,
        "n_outputs": net.n_outputs,
        "dtype": net.dtype.name,
        "config": dataclasses.asdict(net.config),
        "metadata": metadata or {},
    }
    if net.kind == "sithcon":
        head["grids"] = [
            {"taustar_min": layer.bank.grid.taustar_min,
             "c": layer.bank.grid.c,
             "n_taustar": layer.bank.grid.n_taustar}
            for layer in net.layers]
    arrays = {"header": np.frombuffer(
        json.dumps(head).encode(), dtype=np.uint8)}
    for p in net.params():
        arrays[f"param/{p.name}"] = p.data
    for name, (t, m, v) in (optimizer_state or {}).items():
        arrays[f"opt/{name}/t"] = np.array(t)
        arrays[f"opt/{name}/m"] = m
        arrays[f"opt/{name}/v"] = v
    np.savez(path, **arrays)


def load_checkpoint(path):
    """Rebuild (net, optimizer_state, metadata) from :func:`save_checkpoint`."""
    with np.load(path) as z:
        head = json.loads(bytes(z["header"]))
        if head.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(
                f"unsupported checkpoint version: {head.get('format_version')}")
        dtype = np.dtype(head["dtype"])
        if head["kind"] == "sithcon":
            cfg = SithconConfig(**head["config"])
            grids = [grid_from_spacing(g["taustar_min"], g["c"], g["n_taustar"])
                     for g in head["grids"]]
            net = build_sithcon(cfg, head["n_features_in"], head["n_outputs"],
                                head["task"], dtype=dtype, grids=grids)
        elif head["kind"] == "tcn":
            cfg = TcnConfig(**head["config"])
            net = build_tcn(cfg, head["n_features_in"], head["n_outputs"],
                            head["task"], dtype=dtype)
        else:
            raise ValueError(f"unknown model kind: {head['kind']!r}")
        for p in net.params():
            key = f"param/{p.name}"
            if key not in z:
                raise ValueError(f"checkpoint missing parameter {p.name}")
            saved = z[key]
            if saved.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {p.name}: "
                                 f"{saved.shape} vs {p.data.shape}")
            p.data = saved.copy()
        opt_state = {}
        for key in z.files:
            if key.startswith("opt/") and key.endswith("/t"):
                name = key[4:-2]
                opt_state[name] = (int(z[key]), z[f"opt/{name}/m"].copy(),
                                   z[f"opt/{name}/v"].copy())
    return net, opt_state, head["metadata"]
