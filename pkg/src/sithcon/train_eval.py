"""Training loops, scale-sweep evaluation, and the max-effective-scale search.

The decoder task trains full-batch on the 43 symbols and stops at 100%
train accuracy; the adding task trains on freshly sampled batches and stops
when the smoothed train MSE crosses a threshold.  Evaluation regenerates
each task at the requested scales; the effective-scale search extends a
trained network's tau* grids and walks the 100%-accuracy plateau upward in
multiplicative (1+c) steps.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import datasets, models
from .datasets import MORSE_TABLE, ScaleSpec, make_adding_sample, make_decoder_dataset

DECODER_BASE_REPEAT = 10
ADDING_BASE_REPEAT = 5
N_CLASSES = 43


class TrainingDiverged(RuntimeError):
    """Loss or gradients became non-finite during training."""


@dataclass(frozen=True)
class TrainingConfig:
    """Everything a training run needs; echoed into every artifact."""

    task: str                           # "decoder" | "adding"
    model: str                          # "sithcon" | "tcn"
    seed: int = 0
    lr: float = 1e-3
    batch_size: int = 32                # adding only; decoder is full-batch
    max_epochs: int = 500               # decoder epochs / adding steps
    stop_accuracy: float = 1.0          # decoder stop criterion
    stop_mse: float = 1e-3              # adding stop criterion (smoothed)
    train_scales: tuple = (1.0,)
    deterministic: bool = True
    dtype: str = "float64"
    t_max: int = 100_000
    sithcon: models.SithconConfig = models.SithconConfig()
    tcn: models.TcnConfig = models.TcnConfig()

    def __post_init__(self):
        if self.task not in ("decoder", "adding"):
            raise ValueError(f"unknown task: {self.task!r}")
        if self.model not in ("sithcon", "tcn"):
            raise ValueError(f"unknown model: {self.model!r}")
        if not self.train_scales:
            raise ValueError("need at least one training scale")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["train_scales"] = list(self.train_scales)
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainingConfig":
        d = dict(d)
        _reject_unknown(d, {f.name for f in dataclasses.fields(TrainingConfig)},
                        "training config")
        if "sithcon" in d and isinstance(d["sithcon"], dict):
            sub = dict(d["sithcon"])
            _reject_unknown(sub, {f.name for f in
                                  dataclasses.fields(models.SithconConfig)},
                            "sithcon config")
            d["sithcon"] = models.SithconConfig(**sub)
        if "tcn" in d and isinstance(d["tcn"], dict):
            sub = dict(d["tcn"])
            _reject_unknown(sub, {f.name for f in
                                  dataclasses.fields(models.TcnConfig)},
                            "tcn config")
            d["tcn"] = models.TcnConfig(**sub)
        if "train_scales" in d:
            d["train_scales"] = tuple(d["train_scales"])
        return TrainingConfig(**d)


def _reject_unknown(d: dict, allowed: set, what: str):
    unknown = set(d) - allowed
    if unknown:
        raise ValueError(f"unknown {what} keys: {sorted(unknown)}")


def task_shapes(task: str) -> tuple[int, int, str, int]:
    """(n_features_in, n_outputs, model task kind, base_repeat)."""
    if task == "decoder":
        return 1, N_CLASSES, "classification", DECODER_BASE_REPEAT
    if task == "adding":
        return 2, 1, "regression", ADDING_BASE_REPEAT
    raise ValueError(f"unknown task: {task!r}")


def build_model(config: TrainingConfig):
    n_in, n_out, kind, _ = task_shapes(config.task)
    dtype = np.dtype(config.dtype)
    if config.model == "sithcon":
        return models.build_sithcon(config.sithcon, n_in, n_out, kind,
                                    seed=config.seed, dtype=dtype)
    return models.build_tcn(config.tcn, n_in, n_out, kind,
                            seed=config.seed, dtype=dtype)


@dataclass
class TrainResult:
    model: object
    config: TrainingConfig
    curves: list                       # per epoch/step dicts
    stop_reason: str
    epochs_run: int
    final_loss: float
    final_metric: float                # train accuracy or smoothed train MSE
    optimizer_state: dict = field(default_factory=dict)


def train(config: TrainingConfig, model=None) -> TrainResult:
    """Run one training job to its stop criterion (or the epoch cap)."""
    net = model if model is not None else build_model(config)
    if config.task == "decoder":
        return _train_decoder(config, net)
    return _train_adding(config, net)


def _train_decoder(config: TrainingConfig, net) -> TrainResult:
    _, n_out, _, base = task_shapes(config.task)
    samples = []
    for s in config.train_scales:
        samples.extend(make_decoder_dataset(ScaleSpec(s, base)))
    opt = ad.Adam(net.params(), lr=config.lr)
    drop_rng = np.random.default_rng(config.seed + 1)
    curves = []
    stop_reason = "max_epochs"
    acc = 0.0
    loss_sum = 0.0
    epochs = 0
    for epoch in range(config.max_epochs):
        if hasattr(net, "train_mode"):
            net.train_mode(drop_rng if net.config.dropout > 0 else None)
        opt.zero_grad()
        loss_sum, correct = 0.0, 0
        try:
            for ts in samples:
                logits = net.forward(ts)
                if int(np.argmax(logits.data)) == ts.label:
                    correct += 1
                loss = ad.scale(
                    ad.softmax_cross_entropy(logits, ts.label),
                    1.0 / len(samples))
                loss.backward()
                loss_sum += float(loss.data)
            if not math.isfinite(loss_sum):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} (seed {config.seed})")
            opt.step()
        except ad.NonFiniteGradientError as exc:
            raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
        acc = correct / len(samples)
        curves.append({"epoch": epoch, "loss": loss_sum, "accuracy": acc})
        epochs = epoch + 1
        if acc >= config.stop_accuracy:
            stop_reason = "stop_accuracy"
            break
    if hasattr(net, "train_mode"):
        net.train_mode(None)
    return TrainResult(net, config, curves, stop_reason, epochs,
                       loss_sum, acc, opt.state)


def _train_adding(config: TrainingConfig, net) -> TrainResult:
    rng = np.random.default_rng(config.seed)
    drop_rng = np.random.default_rng(config.seed + 1)
    opt = ad.Adam(net.params(), lr=config.lr)
    curves = []
    recent = []
    stop_reason = "max_epochs"
    smoothed = float("inf")
    batch_loss = 0.0
    steps = 0
    for step in range(config.max_epochs):
        if hasattr(net, "train_mode"):
            net.train_mode(drop_rng if net.config.dropout > 0 else None)
        opt.zero_grad()
        batch_loss = 0.0
        try:
            for _ in range(config.batch_size):
                scale = config.train_scales[
                    int(rng.integers(len(config.train_scales)))]
                ts = make_adding_sample(rng, ScaleSpec(scale, ADDING_BASE_REPEAT))
                pred = net.forward(ts)
                loss = ad.scale(ad.mse(pred, np.array([ts.target])),
                                1.0 / config.batch_size)
                loss.backward()
                batch_loss += float(loss.data)
            if not math.isfinite(batch_loss):
                raise TrainingDiverged(
                    f"non-finite loss at step {step} (seed {config.seed})")
            opt.step()
        except ad.NonFiniteGradientError as exc:
            raise TrainingDiverged(f"step {step}: {exc}") from exc
        recent.append(batch_loss)
        if len(recent) > 5:
            recent.pop(0)
        smoothed = float(np.mean(recent))
        curves.append({"epoch": step, "loss": batch_loss, "smoothed": smoothed})
        steps = step + 1
        if len(recent) == 5 and smoothed < config.stop_mse:
            stop_reason = "stop_mse"
            break
    if hasattr(net, "train_mode"):
        net.train_mode(None)
    return TrainResult(net, config, curves, stop_reason, steps,
                       batch_loss, smoothed, opt.state)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalRow:
    scale: float
    metric: str
    value: float
    n_samples: int


@dataclass
class EvalReport:
    """Per-scale metric table plus full provenance."""

    rows: list
    config_echo: dict
    seeds: list
    skipped_scales: list = field(default_factory=list)

    def value_at(self, scale: float) -> float:
        for row in self.rows:
            if abs(row.scale - scale) < 1e-12:
                return row.value
        raise KeyError(f"no row for scale {scale}")

    def to_dict(self) -> dict:
        return {"rows": [dataclasses.asdict(r) for r in self.rows],
                "config": self.config_echo, "seeds": self.seeds,
                "skipped_scales": self.skipped_scales}

    def write(self, base_path) -> None:
        """Write <base>.json and <base>.csv."""
        base = str(base_path)
        with open(base + ".json", "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
        with open(base + ".csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scale", "metric", "value", "n_samples"])
            for r in self.rows:
                w.writerow([r.scale, r.metric, r.value, r.n_samples])


def decoder_dataset_max_len(scale: float) -> int:
    spec = ScaleSpec(scale, DECODER_BASE_REPEAT)
    return max(len(datasets.scale_bits(datasets.morse_encode(s), spec))
               for s in MORSE_TABLE.symbols)


def decoder_accuracy(net, scale: float) -> float:
    """Accuracy over the 43 symbols regenerated at one scale."""
    samples = make_decoder_dataset(ScaleSpec(scale, DECODER_BASE_REPEAT))
    samples.sort(key=len)
    correct = 0
    for ts in samples:
        if int(np.argmax(models.predict(net, ts))) == ts.label:
            correct += 1
    return correct / len(samples)


def decoder_all_correct(net, scale: float, suspect: list) -> bool:
    """True iff every symbol classifies correctly; fails fast.

    ``suspect`` is a 1-element mutable list holding the label that failed
    last, which is probed first on the next call.
    """
    samples = make_decoder_dataset(ScaleSpec(scale, DECODER_BASE_REPEAT))
    order = sorted(samples, key=len)
    if suspect[0] is not None:
        order.sort(key=lambda ts: ts.label != suspect[0])
    for ts in order:
        if int(np.argmax(models.predict(net, ts))) != ts.label:
            suspect[0] = ts.label
            return False
    return True


def adding_mse(net, scale: float, n_samples: int, seed: int) -> float:
    rng = np.random.default_rng([seed, int(round(scale * 1e6))])
    spec = ScaleSpec(scale, ADDING_BASE_REPEAT)
    err = 0.0
    for _ in range(n_samples):
        ts = make_adding_sample(rng, spec)
        pred = float(models.predict(net, ts)[0])
        err += (pred - ts.target) ** 2
    return err / n_samples


def evaluate_scales(net, task: str, scales, n_samples: int = 1000,
                    seed: int = 987654321, t_max: int = 100_000,
                    config_echo: dict | None = None) -> EvalReport:
    """Regenerate the task at each scale and score the model on it."""
    scales = sorted(float(s) for s in scales)
    rows, skipped = [], []
    for scale in scales:
        if task == "decoder":
            if decoder_dataset_max_len(scale) > t_max:
                warnings.warn(f"scale {scale}: sequence longer than t_max "
                              f"({t_max}); skipped")
                skipped.append(scale)
                continue
            rows.append(EvalRow(scale, "accuracy",
                                decoder_accuracy(net, scale), N_CLASSES))
        elif task == "adding":
            max_len = 10 * 23 * scale * ADDING_BASE_REPEAT
            if max_len > t_max:
                warnings.warn(f"scale {scale}: sequence longer than t_max "
                              f"({t_max}); skipped")
                skipped.append(scale)
                continue
            rows.append(EvalRow(scale, "mse",
                                adding_mse(net, scale, n_samples, seed),
                                n_samples))
        else:
            raise ValueError(f"unknown task: {task!r}")
    return EvalReport(rows, config_echo or {}, seeds=[seed],
                      skipped_scales=skipped)


DEFAULT_EVAL_SCALES = tuple(
    float(s) for s in np.geomspace(0.05, 20.0, 25).round(6))


def chance_baselines(task: str) -> float:
    """Chance-level metric: 1/43 accuracy or the mean-guesser MSE."""
    if task == "decoder":
        return 1.0 / N_CLASSES
    if task == "adding":
        return datasets.adding_target_variance()
    raise ValueError(f"unknown task: {task!r}")


# ---------------------------------------------------------------------------
# max effective scale (node-extension experiment)
# ---------------------------------------------------------------------------

@dataclass
class MaxScaleRow:
    n_added: int
    max_scale: float                   # nan when no scale reaches 100%
    capped: bool                       # search stopped by the length limit


@dataclass
class MaxEffectiveScaleResult:
    rows: list
    fitted_slope: float
    theoretical_slope: float           # ln(1 + c)
    config_echo: dict

    def to_dict(self) -> dict:
        return {"rows": [dataclasses.asdict(r) for r in self.rows],
                "fitted_slope": self.fitted_slope,
                "theoretical_slope": self.theoretical_slope,
                "config": self.config_echo}

    def write(self, base_path) -> None:
        base = str(base_path)
        with open(base + ".json", "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
        with open(base + ".csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n_added", "max_scale", "capped"])
            for r in self.rows:
                w.writerow([r.n_added, r.max_scale, r.capped])


def max_effective_scale(net, n_added_list, t_max: int = 100_000,
                        coarse_steps: int = 8,
                        config_echo: dict | None = None) -> MaxEffectiveScaleResult:
    """Largest 100%-accuracy scale per node-extension count, plus a line fit.

    For each extension the search walks up from the previous maximum in
    coarse multiplicative jumps of (1+c)^coarse_steps, then refines the
    plateau edge in single (1+c) steps.  Scales whose longest symbol would
    exceed ``t_max`` timesteps stop the search and flag the row as capped.
    """
    step = 1.0 + net.grid.c
    rows = []
    prev = 1.0
    suspect = [None]
    for n_added in sorted(int(n) for n in n_added_list):
        probe_net = models.extend_taustar(net, n_added) if n_added else net
        capped = False

        def fits(scale):
            return decoder_dataset_max_len(scale) <= t_max

        lo = max(prev, 1.0)
        while lo > step and not (fits(lo) and
                                 decoder_all_correct(probe_net, lo, suspect)):
            lo /= step ** coarse_steps
        if lo <= step and not decoder_all_correct(probe_net, lo, suspect):
            rows.append(MaxScaleRow(n_added, float("nan"), False))
            continue
        # coarse bracket upward
        while True:
            nxt = lo * step ** coarse_steps
            if not fits(nxt):
                capped = True
                break
            if decoder_all_correct(probe_net, nxt, suspect):
                lo = nxt
            else:
                break
        # refine in single (1+c) steps
        while True:
            nxt = lo * step
            if not fits(nxt):
                capped = True
                break
            if decoder_all_correct(probe_net, nxt, suspect):
                lo = nxt
            else:
                break
        if capped:
            warnings.warn(f"n_added={n_added}: search capped by t_max={t_max}")
        rows.append(MaxScaleRow(n_added, lo, capped))
        prev = lo
    good = [(r.n_added, math.log(r.max_scale)) for r in rows
            if math.isfinite(r.max_scale)]
    slope = float("nan")
    if len(good) >= 2:
        xs, ys = zip(*good)
        slope = float(np.polyfit(xs, ys, 1)[0])
    return MaxEffectiveScaleResult(rows, slope, math.log1p(net.grid.c),
                                   config_echo or {})


# ---------------------------------------------------------------------------
# curve export
# ---------------------------------------------------------------------------

def write_curves(curves: list, path) -> None:
    """Training curves as CSV (one row per epoch/step)."""
    if not curves:
        return
    keys = list(curves[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for row in curves:
            w.writerow([row.get(k, "") for k in keys])
