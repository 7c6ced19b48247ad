#!/usr/bin/env python3
"""
Time series ingestion, chronological splits, sliding windows, instance
normalization and forecast metrics.

Run directly to write the synthetic toy dataset used by train_toy.sh:

    python series_data.py --out data/toy.csv
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from sklearn.preprocessing import StandardScaler
from torch.utils.data import Dataset

from errors import (ConfigurationError, DimensionError, FormatError, ParseError,
                    ValidationError)
from numerics import RngStream, as_tensor

STDEV_FLOOR = 1e-5

# Benchmark datasets. Row counts are split borders (train, val, test); ratio
# entries use the 70/10/20 convention with val taking the remainder.
DATASETS = {
    "ETTh1": {"dim": 7, "frequency": "1h", "periodicity": 24, "split": (8640, 2880, 2880),
              "description": "Hourly electricity transformer load and oil temperature from one station"},
    "ETTh2": {"dim": 7, "frequency": "1h", "periodicity": 24, "split": (8640, 2880, 2880),
              "description": "Hourly electricity transformer load and oil temperature from a second station"},
    "ETTm1": {"dim": 7, "frequency": "15min", "periodicity": 96, "split": (34560, 11520, 11520),
              "description": "Fifteen-minute electricity transformer load and oil temperature from one station"},
    "ETTm2": {"dim": 7, "frequency": "15min", "periodicity": 96, "split": (34560, 11520, 11520),
              "description": "Fifteen-minute electricity transformer load and oil temperature from a second station"},
    "Weather": {"dim": 21, "frequency": "10min", "periodicity": 144, "split": (0.7, 0.1, 0.2),
                "description": "Ten-minute meteorological indicators such as temperature and humidity"},
    "Electricity": {"dim": 321, "frequency": "1h", "periodicity": 24, "split": (0.7, 0.1, 0.2),
                    "description": "Hourly electricity consumption of 321 clients"},
    "Traffic": {"dim": 862, "frequency": "1h", "periodicity": 24, "split": (0.7, 0.1, 0.2),
                "description": "Hourly road occupancy rates from 862 freeway sensors"},
}

DEFAULT_SPLIT = (0.7, 0.1, 0.2)


@dataclass(frozen=True)
class SeriesFrame:
    """A loaded multivariate series: N rows, D features, strictly increasing timestamps."""
    timestamps: List[str]
    values: torch.Tensor
    feature_names: List[str]
    frequency: str = ""
    name: str = ""

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def with_values(self, values: torch.Tensor) -> "SeriesFrame":
        return SeriesFrame(self.timestamps, values, self.feature_names, self.frequency, self.name)

    def tail(self, n: int) -> "SeriesFrame":
        return SeriesFrame(self.timestamps[-n:], self.values[-n:], self.feature_names,
                           self.frequency, self.name)


@dataclass
class SplitSpec:
    """
    Chronological train/val/test split.

    Sizes are either row counts (ints) or ratios (floats). With ratios, train
    and test are floored and val takes the remainder. few_shot keeps the
    earliest fraction of training windows. borrow_lookback lets val/test
    windows read their look-back from the preceding split (benchmark
    protocol); targets always stay inside their split.
    """
    train: Union[int, float] = 0.7
    val: Union[int, float] = 0.1
    test: Union[int, float] = 0.2
    few_shot: float = 1.0
    borrow_lookback: bool = False

    def __post_init__(self):
        if not (0.0 < self.few_shot <= 1.0):
            raise ConfigurationError(f"few_shot must be in (0, 1], got {self.few_shot}")
        sizes = (self.train, self.val, self.test)
        if any(s < 0 for s in sizes):
            raise ConfigurationError(f"Split sizes must be non-negative, got {sizes}")

    @classmethod
    def for_dataset(cls, name: str, few_shot: float = 1.0, borrow_lookback: bool = False) -> "SplitSpec":
        train, val, test = DATASETS.get(name, {}).get("split", DEFAULT_SPLIT)
        return cls(train, val, test, few_shot=few_shot, borrow_lookback=borrow_lookback)

    def row_counts(self, n_rows: int) -> Tuple[int, int, int]:
        sizes = (self.train, self.val, self.test)
        if all(isinstance(s, int) and not isinstance(s, bool) for s in sizes):
            if sum(sizes) > n_rows:
                raise ConfigurationError(f"Split needs {sum(sizes)} rows but the series has {n_rows}")
            return sizes
        if sum(sizes) > 1.0 + 1e-9:
            raise ConfigurationError(f"Split ratios sum to {sum(sizes)} > 1")
        n_train = int(n_rows * self.train)
        n_test = int(n_rows * self.test)
        return n_train, n_rows - n_train - n_test, n_test

    def borders(self, n_rows: int, seq_len: int) -> List[Tuple[int, int, int]]:
        """
        Per split: (first row readable, first target row allowed, end row).

        Look-back may start before the split only when borrow_lookback is set.
        """
        n_train, n_val, n_test = self.row_counts(n_rows)
        starts = [0, n_train, n_train + n_val]
        ends = [n_train, n_train + n_val, n_train + n_val + n_test]
        result = []
        for i, (start, end) in enumerate(zip(starts, ends)):
            readable = max(0, start - seq_len) if (self.borrow_lookback and i > 0) else start
            result.append((readable, start, end))
        return result


@dataclass
class NormStats:
    """Per-instance, per-feature statistics (B×1×D) kept for denormalization."""
    means: torch.Tensor
    stdev: torch.Tensor
    norm_const: float = 1.0

    @property
    def scale(self) -> torch.Tensor:
        return self.stdev * self.norm_const


@dataclass
class WindowBatch:
    """Look-back windows X (B×L×D) with their targets Y (B×H×D)."""
    X: torch.Tensor
    Y: torch.Tensor
    L: int
    H: int
    label_len: int = 0
    origins: List[int] = field(default_factory=list)


class WindowStream(Dataset):
    """
    Sliding windows (stride 1) over one split of a series.

    Windows are cut lazily so large datasets are never materialized as a
    B×L×D block; to_batch() builds a WindowBatch when one is wanted.
    """

    def __init__(self, values: torch.Tensor, origins: List[int], L: int, H: int,
                 label_len: int = 0, split: str = "train"):
        self.values = values
        self.origins = origins
        self.L = L
        self.H = H
        self.label_len = label_len
        self.split = split

    def __len__(self):
        return len(self.origins)

    def __getitem__(self, i: int) -> Tuple[torch.Tensor, torch.Tensor]:
        o = self.origins[i]
        return self.values[o:o + self.L], self.values[o + self.L:o + self.L + self.H]

    def to_batch(self, indices: Optional[Sequence[int]] = None) -> WindowBatch:
        indices = range(len(self)) if indices is None else indices
        pairs = [self[i] for i in indices]
        D = self.values.shape[1]
        X = torch.stack([p[0] for p in pairs]) if pairs else torch.zeros(0, self.L, D)
        Y = torch.stack([p[1] for p in pairs]) if pairs else torch.zeros(0, self.H, D)
        return WindowBatch(X, Y, self.L, self.H, self.label_len, [self.origins[i] for i in indices])


def load_csv(path, expected_dims: Optional[int] = None, name: str = "",
             frequency: Optional[str] = None) -> SeriesFrame:
    """
    Load a UTF-8 CSV whose first column is "date" and the rest numeric.

    Args:
        path: CSV file path
        expected_dims: If given, the number of feature columns must match
        name: Dataset name (used for the registry lookup)
        frequency: Frequency label; inferred from the timestamps when omitted

    Returns:
        SeriesFrame with rows in file order
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Data file not found: {path}")

    df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    if len(df.columns) == 0 or df.columns[0].strip() != "date":
        raise FormatError(f"{path}: missing header row with a leading 'date' column")
    if len(df.columns) < 2:
        raise FormatError(f"{path}: no feature columns after 'date'")
    if len(df) == 0:
        raise FormatError(f"{path}: no data rows")

    feature_names = [c.strip() for c in df.columns[1:]]
    if expected_dims is not None and len(feature_names) != expected_dims:
        raise ValidationError(f"{path}: expected {expected_dims} feature columns, found {len(feature_names)}")

    columns = []
    for column in df.columns[1:]:
        raw = df[column].str.strip()
        numeric = pd.to_numeric(raw, errors="coerce")
        bad = numeric.isna() | ~np.isfinite(numeric.to_numpy(dtype=float, na_value=np.nan))
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            cell = raw.iloc[row]
            what = "missing value" if cell == "" else f"non-numeric value {cell!r}"
            raise ParseError(f"{path}: {what} at row {row + 1}, column {column!r}",
                             row=row + 1, column=column.strip())
        columns.append(numeric.to_numpy(dtype=float))

    try:
        parsed = pd.to_datetime(df["date"].str.strip())
    except (ValueError, TypeError) as e:
        raise ParseError(f"{path}: unreadable timestamp in 'date' column ({e})", column="date") from e
    if len(parsed) > 1 and not (parsed.diff().iloc[1:] > pd.Timedelta(0)).all():
        raise FormatError(f"{path}: timestamps are not strictly increasing")

    if frequency is None:
        frequency = DATASETS.get(name, {}).get("frequency") or (pd.infer_freq(parsed) if len(parsed) >= 3 else None) or ""

    values = as_tensor(np.stack(columns, axis=1), name=f"{path.name} values")
    return SeriesFrame([t.isoformat() for t in parsed], values, feature_names, frequency, name)


def write_csv(frame: SeriesFrame, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame(frame.values.detach().cpu().numpy(), columns=frame.feature_names)
    df.insert(0, "date", [t.replace("T", " ") for t in frame.timestamps])
    df.to_csv(path, index=False)


def fit_scaler(frame: SeriesFrame, spec: SplitSpec) -> StandardScaler:
    """Per-feature standard scaler fitted on the training rows only."""
    n_train = spec.row_counts(frame.n_rows)[0]
    if n_train < 1:
        raise ConfigurationError("Training split is empty; cannot fit the scaler")
    return StandardScaler().fit(frame.values[:n_train].detach().cpu().numpy())


def apply_scaler(frame: SeriesFrame, scaler: StandardScaler, inverse: bool = False) -> SeriesFrame:
    data = frame.values.detach().cpu().numpy()
    out = scaler.inverse_transform(data) if inverse else scaler.transform(data)
    return frame.with_values(torch.as_tensor(out, dtype=frame.values.dtype))


def make_windows(frame: SeriesFrame, spec: SplitSpec, L: int, H: int,
                 label_len: int = 0) -> Tuple[WindowStream, WindowStream, WindowStream]:
    """
    Cut stride-1 windows inside each split.

    Returns:
        (train, val, test) window streams; targets never cross a split border
    """
    if L < 1 or H < 0:
        raise ConfigurationError(f"Invalid window lengths L={L}, H={H}")
    if not (0 <= label_len <= L):
        raise ConfigurationError(f"label_len must be in [0, L], got {label_len}")

    streams = []
    for split, (readable, target_start, end) in zip(("train", "val", "test"), spec.borders(frame.n_rows, L)):
        rows = end - readable
        if rows < L + H:
            raise ConfigurationError(
                f"{split} split has {rows} rows but a window needs L + H = {L + H}")
        # first origin whose target starts inside the split
        first = max(readable, target_start - L)
        origins = list(range(first, end - L - H + 1))
        if split == "train" and spec.few_shot < 1.0:
            keep = max(1, math.floor(len(origins) * spec.few_shot))
            origins = origins[:keep]
        streams.append(WindowStream(frame.values, origins, L, H, label_len, split))
    return tuple(streams)


def all_windows(frame: SeriesFrame, L: int, H: int = 0, split: str = "all") -> WindowStream:
    """Stride-1 windows over the whole series, ignoring splits."""
    if frame.n_rows < L + H:
        raise ConfigurationError(f"Series has {frame.n_rows} rows but a window needs L + H = {L + H}")
    return WindowStream(frame.values, list(range(frame.n_rows - L - H + 1)), L, H, split=split)


def count_window_origins(frame: SeriesFrame, spec: SplitSpec, L: int) -> Tuple[int, int, int]:
    """Positions per split where a full look-back fits (the dataset-table convention)."""
    return tuple(end - readable - L + 1 for readable, _, end in spec.borders(frame.n_rows, L))


def window_timestamps(frame: SeriesFrame, stream: WindowStream) -> set:
    """Every timestamp touched by any window of the stream (leakage audit)."""
    touched = set()
    span = stream.L + stream.H
    for o in stream.origins:
        touched.update(frame.timestamps[o:o + span])
    return touched


def instance_normalize(X: torch.Tensor, norm_const: float = 1.0) -> Tuple[torch.Tensor, NormStats]:
    """
    Per-window, per-feature standardization.

    Uses the population standard deviation floored at 1e-5. norm_const
    multiplies the divisor; pass it only on the image-construction path.
    """
    if X.dim() != 3:
        raise DimensionError(f"Expected X of shape B×L×D, got {tuple(X.shape)}")
    means = X.mean(dim=1, keepdim=True)
    stdev = torch.sqrt(X.var(dim=1, keepdim=True, unbiased=False)).clamp_min(STDEV_FLOOR)
    stats = NormStats(means, stdev, float(norm_const))
    return (X - means) / stats.scale, stats


def denormalize(Y_norm: torch.Tensor, stats: NormStats) -> torch.Tensor:
    return Y_norm * stats.scale + stats.means


def compute_metrics(Y: torch.Tensor, Y_hat: torch.Tensor) -> Tuple[float, float]:
    """MSE and MAE averaged over every batch item, horizon step and feature."""
    if Y.shape != Y_hat.shape:
        raise DimensionError(f"Shape mismatch: targets {tuple(Y.shape)} vs predictions {tuple(Y_hat.shape)}")
    err = (Y_hat - Y).to(torch.float64)
    return float((err ** 2).mean()), float(err.abs().mean())


def naive_forecast(X: torch.Tensor, H: int) -> torch.Tensor:
    """Repeat the final look-back value across the horizon."""
    return X[:, -1:, :].expand(X.shape[0], H, X.shape[2]).clone()


def make_synthetic_frame(n_rows: int = 4000, seed: int = 0, noise: float = 0.05,
                         period: float = 24.0) -> SeriesFrame:
    """
    Two-feature toy series: each feature mixes a period-24 sinusoid with an
    incommensurate one (period 24·√2), plus Gaussian noise.
    """
    t = np.arange(n_rows, dtype=float)
    rng = RngStream(seed, "synthetic-frame")
    eps = rng.normal((n_rows, 2)).numpy()
    slow = period * math.sqrt(2.0)
    f0 = np.sin(2 * math.pi * t / period) + 0.5 * np.sin(2 * math.pi * t / slow)
    f1 = 0.8 * np.cos(2 * math.pi * t / period + 0.3) + 0.6 * np.sin(2 * math.pi * t / slow + 1.1)
    values = np.stack([f0, f1], axis=1) + noise * eps
    stamps = pd.date_range("2020-01-01", periods=n_rows, freq="h")
    return SeriesFrame([s.isoformat() for s in stamps], torch.as_tensor(values, dtype=torch.get_default_dtype()),
                       ["sin_a", "sin_b"], "1h", "synthetic")


def main():
    import argparse

    parser = argparse.ArgumentParser(description="Write the synthetic two-sinusoid dataset as CSV")
    parser.add_argument("--out", default="data/toy.csv", help="Output CSV path")
    parser.add_argument("--rows", type=int, default=4000, help="Number of rows")
    parser.add_argument("--seed", type=int, default=0, help="Noise seed")
    args = parser.parse_args()

    frame = make_synthetic_frame(args.rows, seed=args.seed)
    write_csv(frame, args.out)
    print(f"✅ Wrote {frame.n_rows} rows × {frame.n_features} features to {args.out}")


if __name__ == "__main__":
    main()
