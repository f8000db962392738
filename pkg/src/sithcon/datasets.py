"""Morse-code task generators and series file I/O.

Two procedural tasks at arbitrary temporal scale:

* decoder -- classify which of 43 Morse symbols a one-feature bit stream
  spells out (26 letters, 10 digits, 7 punctuation marks);
* adding -- a two-feature stream of ten Morse digits plus a marker channel;
  the target is 0.1 times the sum of the two marked digits.

Scale 1.0 repeats every bit ``base_repeat`` times (10 for the decoder, 5
for adding); other scales repeat bits ``scale * base_repeat`` times, with
non-integer repeats realized by a nearest-neighbor stretch that keeps the
signals binary.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

DOT = (1, 0)
DASH = (1, 1, 1, 0)
TAIL = (0, 0, 0)  # appended after the final element's trailing off bit

_LETTERS = {
    "A": ".-", "B": "-...", "C": "-.-.", "D": "-..", "E": ".", "F": "..-.",
    "G": "--.", "H": "....", "I": "..", "J": ".---", "K": "-.-", "L": ".-..",
    "M": "--", "N": "-.", "O": "---", "P": ".--.", "Q": "--.-", "R": ".-.",
    "S": "...", "T": "-", "U": "..-", "V": "...-", "W": ".--", "X": "-..-",
    "Y": "-.--", "Z": "--..",
}
_DIGITS = {
    "0": "-----", "1": ".----", "2": "..---", "3": "...--", "4": "....-",
    "5": ".....", "6": "-....", "7": "--...", "8": "---..", "9": "----.",
}
_PUNCTUATION = {
    ".": ".-.-.-", ",": "--..--", "?": "..--..", "/": "-..-.",
    ":": "---...", "'": ".----.", "-": "-....-",
}


@dataclass(frozen=True)
class MorseTable:
    """43 symbols in canonical order; position defines the class label."""

    symbols: tuple
    codes: tuple

    def __len__(self):
        return len(self.symbols)

    def label(self, symbol: str) -> int:
        try:
            return self.symbols.index(symbol)
        except ValueError:
            raise KeyError(f"unknown Morse symbol: {symbol!r}") from None

    def code(self, symbol: str) -> str:
        return self.codes[self.label(symbol)]


def build_morse_table() -> MorseTable:
    """Letters A-Z, digits 0-9, then . , ? / : ' - (labels 0..42)."""
    entries = {**_LETTERS, **_DIGITS, **_PUNCTUATION}
    symbols = tuple(entries)
    table = MorseTable(symbols=symbols, codes=tuple(entries[s] for s in symbols))
    assert len(table) == 43 and len(set(table.codes)) == 43
    return table


MORSE_TABLE = build_morse_table()


@dataclass(frozen=True)
class ScaleSpec:
    """Temporal scale relative to training scale 1.0."""

    scale: float
    base_repeat: int = 10

    def __post_init__(self):
        if not (self.scale > 0 and np.isfinite(self.scale)):
            raise ValueError(f"scale must be positive, got {self.scale}")
        if self.base_repeat < 1:
            raise ValueError("base_repeat must be >= 1")

    @property
    def effective_repeat(self) -> float:
        return self.scale * self.base_repeat


@dataclass
class TimeSeries:
    """A (T, n_features) real series with optional supervision attached."""

    data: np.ndarray
    label: int | None = None
    target: float | None = None
    scale: float = 1.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 1:
            self.data = self.data[:, None]
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise ValueError("data must be (T >= 1, n_features)")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("series contains non-finite values")

    def __len__(self):
        return self.data.shape[0]

    @property
    def n_features(self) -> int:
        return self.data.shape[1]


def morse_encode(symbol: str, table: MorseTable = MORSE_TABLE) -> np.ndarray:
    """Bit pattern for one symbol: dot -> 10, dash -> 1110, then 000."""
    code = table.code(symbol)
    bits = []
    for element in code:
        bits.extend(DOT if element == "." else DASH)
    bits.extend(TAIL)
    return np.array(bits, dtype=np.float64)


def stretch_nearest(values: np.ndarray, factor: float) -> np.ndarray:
    """Nearest-neighbor stretch along axis 0: out[j] = values[floor(j/factor)]."""
    values = np.asarray(values)
    if factor <= 0:
        raise ValueError("stretch factor must be positive")
    n_out = int(round(values.shape[0] * factor))
    if n_out < 1:
        raise ValueError(
            f"stretch factor {factor} collapses a length-{values.shape[0]} "
            "sequence to zero samples")
    src = np.minimum((np.arange(n_out) / factor).astype(np.int64),
                     values.shape[0] - 1)
    return values[src]


def scale_bits(bits: np.ndarray, spec: ScaleSpec) -> np.ndarray:
    """Repeat each bit ``scale * base_repeat`` times (nearest-neighbor)."""
    bits = np.asarray(bits, dtype=np.float64)
    r = spec.effective_repeat
    if float(r).is_integer():
        return np.repeat(bits, int(r))
    return stretch_nearest(bits, r)


def make_decoder_dataset(spec: ScaleSpec,
                         table: MorseTable = MORSE_TABLE) -> list[TimeSeries]:
    """One labeled single-feature sample per symbol, in canonical order."""
    samples = []
    for label, symbol in enumerate(table.symbols):
        bits = scale_bits(morse_encode(symbol, table), spec)
        samples.append(TimeSeries(data=bits[:, None], label=label,
                                  scale=spec.scale))
    return samples


def make_adding_sample(rng, spec: ScaleSpec,
                       table: MorseTable = MORSE_TABLE) -> TimeSeries:
    """One Morse-adding sample: digit stream + marker channel, target attached.

    Feature 0 concatenates ten uniformly drawn digits' scaled encodings.
    Feature 1 is zero except for two pulses, each one scaled bit long,
    at the onsets of one digit from positions 1-5 and one from 6-10.
    Target is 0.1 * (sum of the two marked digit values).
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    digits = rng.integers(0, 10, size=10)
    pos_a = int(rng.integers(0, 5))
    pos_b = int(rng.integers(5, 10))
    blocks = [scale_bits(morse_encode(str(d), table), spec) for d in digits]
    lengths = [len(b) for b in blocks]
    onsets = np.concatenate(([0], np.cumsum(lengths)[:-1]))
    stream = np.concatenate(blocks)
    marker = np.zeros_like(stream)
    # one scaled bit: the output samples that the first input bit maps onto
    pulse = max(1, int(np.ceil(spec.effective_repeat - 1e-9)))
    for pos in (pos_a, pos_b):
        onset = int(onsets[pos])
        marker[onset:onset + pulse] = 1.0
    target = 0.1 * (int(digits[pos_a]) + int(digits[pos_b]))
    return TimeSeries(data=np.stack([stream, marker], axis=1),
                      target=target, scale=spec.scale)


def adding_target_variance() -> float:
    """Mean-guesser MSE: variance of 0.1*(d1+d2) over all 100 digit pairs."""
    targets = np.array([0.1 * (a + b) for a in range(10) for b in range(10)])
    return float(np.mean((targets - targets.mean()) ** 2))


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def load_series_csv(path, label_column: int | None = None) -> TimeSeries:
    """Read a numeric CSV (one row per timestep, optional header) as a series.

    ``label_column`` marks one column as an integer class label (taken from
    the first row) rather than a feature.
    """
    rows = []
    header_skipped = False
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or all(not c.strip() for c in rec):
                continue
            try:
                rows.append([float(c) for c in rec])
            except ValueError as exc:
                if not header_skipped and lineno == 1:
                    header_skipped = True
                    continue
                bad = next(c for c in rec if not _is_float(c))
                raise ValueError(
                    f"{path}: row {lineno}, column {rec.index(bad) + 1}: "
                    f"not a number: {bad!r}") from exc
    if not rows:
        raise ValueError(f"{path}: no data rows")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ValueError(f"{path}: inconsistent column counts {sorted(widths)}")
    data = np.array(rows, dtype=np.float64)
    label = None
    if label_column is not None:
        if not 0 <= label_column < data.shape[1]:
            raise ValueError(f"{path}: label column {label_column} out of range")
        label = int(data[0, label_column])
        data = np.delete(data, label_column, axis=1)
    return TimeSeries(data=data, label=label)


def save_series_csv(series: TimeSeries, path, precision: int = 17) -> None:
    """Write a series as numeric CSV with a feature-name header row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"feature_{i}" for i in range(series.n_features)])
        for row in series.data:
            writer.writerow([f"{v:.{precision}g}" for v in row])


def _is_float(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False
