"""CSV ingestion, splits, windows, normalization and metrics."""

import math

import numpy as np
import pytest
import torch

from errors import ConfigurationError, DimensionError, FormatError, ParseError, ValidationError
from series_data import (SplitSpec, all_windows, apply_scaler, compute_metrics, count_window_origins,
                         denormalize, fit_scaler, instance_normalize, load_csv, make_synthetic_frame,
                         make_windows, naive_forecast, window_timestamps, write_csv)


def _write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_load_csv_parses_rows_and_columns(tmp_path):
    path = _write(tmp_path, "date,a,b\n2020-01-01 00:00:00,1,2\n2020-01-01 01:00:00,3,4\n2020-01-01 02:00:00,5,6\n")
    frame = load_csv(path)
    assert (frame.n_rows, frame.n_features) == (3, 2)
    assert frame.feature_names == ["a", "b"]
    assert torch.equal(frame.values, torch.tensor([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]))
    assert frame.timestamps[0] == "2020-01-01T00:00:00"


def test_load_csv_names_bad_cell(tmp_path):
    path = _write(tmp_path, "date,a,b\n2020-01-01,1,2\n2020-01-02,abc,4\n")
    with pytest.raises(ParseError) as info:
        load_csv(path)
    assert info.value.row == 2
    assert info.value.column == "a"


def test_load_csv_rejects_missing_value(tmp_path):
    path = _write(tmp_path, "date,a\n2020-01-01,1\n2020-01-02,\n")
    with pytest.raises(ParseError):
        load_csv(path)


def test_load_csv_requires_date_header(tmp_path):
    path = _write(tmp_path, "time,a\n2020-01-01,1\n")
    with pytest.raises(FormatError):
        load_csv(path)


def test_load_csv_rejects_unordered_timestamps(tmp_path):
    path = _write(tmp_path, "date,a\n2020-01-02,1\n2020-01-01,2\n")
    with pytest.raises(FormatError):
        load_csv(path)


def test_load_csv_checks_expected_dims(tmp_path):
    path = _write(tmp_path, "date,a,b\n2020-01-01,1,2\n")
    with pytest.raises(ValidationError):
        load_csv(path, expected_dims=7)


def test_load_csv_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_csv(tmp_path / "nope.csv")


def test_write_then_load_keeps_values(tmp_path):
    frame = make_synthetic_frame(n_rows=50)
    write_csv(frame, tmp_path / "toy.csv")
    loaded = load_csv(tmp_path / "toy.csv")
    assert loaded.feature_names == frame.feature_names
    assert torch.allclose(loaded.values, frame.values, atol=1e-12)


def test_etth1_split_counts():
    frame = make_synthetic_frame(n_rows=17420)
    spec = SplitSpec.for_dataset("ETTh1", borrow_lookback=True)
    assert spec.row_counts(frame.n_rows) == (8640, 2880, 2880)
    assert count_window_origins(frame, spec, 96) == (8545, 2881, 2881)


def test_ratio_split_gives_remainder_to_val():
    spec = SplitSpec(0.7, 0.1, 0.2)
    assert spec.row_counts(1000) == (700, 100, 200)
    assert spec.row_counts(1001) == (700, 101, 200)


def test_window_count_single_split():
    frame = make_synthetic_frame(n_rows=10)
    assert len(all_windows(frame, 3, 2)) == 6


def test_make_windows_count_per_split_and_contiguity():
    frame = make_synthetic_frame(n_rows=200)
    train, val, test = make_windows(frame, SplitSpec(0.7, 0.1, 0.2), L=12, H=4)
    assert [len(train), len(val), len(test)] == [140 - 16 + 1, 20 - 16 + 1, 40 - 16 + 1]
    x, y = train[0]
    assert torch.equal(torch.cat([x, y]), frame.values[:16])


def test_few_shot_keeps_earliest_windows():
    frame = make_synthetic_frame(n_rows=100)
    full, _, _ = make_windows(frame, SplitSpec(0.5, 0.25, 0.25), L=10, H=5)
    half, _, _ = make_windows(frame, SplitSpec(0.5, 0.25, 0.25, few_shot=0.5), L=10, H=5)
    assert len(half) == math.floor(len(full) * 0.5)
    assert half.origins == full.origins[:len(half)]


def test_short_split_is_a_configuration_error():
    frame = make_synthetic_frame(n_rows=100)
    with pytest.raises(ConfigurationError):
        make_windows(frame, SplitSpec(0.8, 0.1, 0.1), L=12, H=4)


def test_default_splits_share_no_timestamps():
    frame = make_synthetic_frame(n_rows=400)
    train, val, test = make_windows(frame, SplitSpec(0.7, 0.1, 0.2), L=24, H=8)
    seen = [window_timestamps(frame, s) for s in (train, val, test)]
    assert not seen[0] & seen[1]
    assert not seen[0] & seen[2]
    assert not seen[1] & seen[2]


def test_borrowed_lookback_keeps_targets_inside_split():
    frame = make_synthetic_frame(n_rows=400)
    _, val, _ = make_windows(frame, SplitSpec(0.7, 0.1, 0.2, borrow_lookback=True), L=24, H=8)
    assert min(o + val.L for o in val.origins) == 280
    assert max(o + val.L + val.H for o in val.origins) == 320


def test_scaler_is_fitted_on_train_rows_only():
    frame = make_synthetic_frame(n_rows=300)
    spec = SplitSpec(0.5, 0.25, 0.25)
    scaler = fit_scaler(frame, spec)
    assert np.allclose(scaler.mean_, frame.values[:150].numpy().mean(axis=0))
    scaled = apply_scaler(frame, scaler)
    assert torch.allclose(scaled.values[:150].mean(dim=0), torch.zeros(2), atol=1e-12)
    restored = apply_scaler(scaled, scaler, inverse=True)
    assert torch.allclose(restored.values, frame.values, atol=1e-12)


def test_instance_normalize_hand_values():
    X = torch.tensor([[[1.0], [2.0], [3.0]]])
    X_norm, stats = instance_normalize(X)
    assert float(stats.means) == 2.0
    assert abs(float(stats.stdev) - math.sqrt(2.0 / 3.0)) < 1e-15
    assert torch.allclose(X_norm.reshape(-1), torch.tensor([-1.2247, 0.0, 1.2247]), atol=1e-4)


def test_instance_normalize_constant_window():
    X = torch.full((1, 3, 1), 5.0)
    X_norm, stats = instance_normalize(X)
    assert torch.equal(X_norm, torch.zeros_like(X))
    assert float(stats.stdev) == 1e-5


def test_normalize_round_trip():
    X = torch.randn(4, 20, 3) * 7 + 2
    for norm_const in (1.0, 0.4):
        X_norm, stats = instance_normalize(X, norm_const)
        assert torch.allclose(X_norm.mean(dim=1), torch.zeros(4, 3), atol=1e-12)
        assert torch.allclose(denormalize(X_norm, stats), X, atol=1e-6)


def test_metrics_examples():
    assert compute_metrics(torch.tensor([0.0, 0.0]), torch.tensor([1.0, 1.0])) == (1.0, 1.0)
    assert compute_metrics(torch.tensor([0.0, 2.0]), torch.tensor([1.0, 0.0])) == (2.5, 1.5)
    Y = torch.randn(3, 4)
    assert compute_metrics(Y, Y.clone()) == (0.0, 0.0)


def test_metrics_match_double_loop():
    g = torch.Generator().manual_seed(0)
    for _ in range(100):
        Y = torch.randn(96, 7, generator=g)
        Y_hat = torch.randn(96, 7, generator=g)
        se = ae = 0.0
        for i in range(96):
            for j in range(7):
                d = float(Y_hat[i, j]) - float(Y[i, j])
                se += d * d
                ae += abs(d)
        mse, mae = compute_metrics(Y, Y_hat)
        assert abs(mse - se / 672) < 1e-12
        assert abs(mae - ae / 672) < 1e-12


def test_metrics_shape_mismatch():
    with pytest.raises(DimensionError):
        compute_metrics(torch.zeros(2, 3), torch.zeros(3, 2))


def test_naive_forecast_repeats_last_value():
    X = torch.arange(12.0).reshape(1, 6, 2)
    out = naive_forecast(X, 3)
    assert out.shape == (1, 3, 2)
    assert torch.equal(out[0], torch.tensor([[10.0, 11.0]] * 3))
