"""Tests for the synthetic scenario generator, statistics and dataset files."""

import csv
import json

import numpy as np
import pytest

from scenario_flow.common import FormatError
from scenario_flow.metrics import marr
from scenario_flow.scenarios import (
    MARR_THRESHOLDS,
    Metadata,
    Scenario,
    clock,
    detect_dip,
    detrended_marr,
    hours,
    load_dataset,
    run_synth_data,
    save_dataset,
    shape_correlation,
    shape_template,
    stat_report,
    synth_dataset,
    volatility_class,
    write_labels_csv,
)


def _meta(**overrides) -> Metadata:
    values = dict(peak=0.8, peak_time_index=32, volatility="stable", shape="bell", weather="sunny")
    values.update(overrides)
    return Metadata(**values)


# ---------------------------------------------------------------------------
# Time helpers
# ---------------------------------------------------------------------------


def test_hours_and_clock():
    assert hours(4).tolist() == [0.0, 6.0, 12.0, 18.0]
    assert clock(32, 64) == "12:00"
    assert clock(1, 96) == "00:15"
    assert clock(40, 64) == "15:00"


# ---------------------------------------------------------------------------
# Rubric primitives
# ---------------------------------------------------------------------------


def test_volatility_class_of_flat_and_jagged_series():
    assert volatility_class(np.full(64, 0.5)) == "stable"
    assert detrended_marr(np.full(64, 0.5)) == 0.0
    assert volatility_class(np.tile([0.0, 1.0], 32)) == "high"


def test_shape_correlation_of_the_template_itself_is_one():
    meta = _meta()
    template = shape_template("bell", "pv", 32, 64)
    assert shape_correlation(template, meta) == pytest.approx(1.0)


def test_shape_correlation_of_a_flat_series_is_zero():
    assert shape_correlation(np.zeros(64), _meta()) == 0.0


def test_detect_dip_finds_a_notch():
    x = np.full(64, 0.8)
    x[40] = 0.2
    assert detect_dip(x, 40) == 0
    assert detect_dip(x, 43) == 3
    assert detect_dip(x, 10) is None
    assert detect_dip(np.full(64, 0.8), 40) is None


def test_unknown_template_shape():
    with pytest.raises(ValueError):
        shape_template("zigzag", "pv", 0, 16)


# ---------------------------------------------------------------------------
# Generator
# ---------------------------------------------------------------------------


def test_synth_dataset_is_deterministic_per_seed():
    a = synth_dataset("pv", 6, 32, seed=3)
    b = synth_dataset("pv", 6, 32, seed=3)
    c = synth_dataset("pv", 6, 32, seed=4)
    for sa, sb in zip(a, b, strict=True):
        assert np.array_equal(sa.series, sb.series)
        assert sa.metadata == sb.metadata
    assert any(not np.array_equal(sa.series, sc.series) for sa, sc in zip(a, c, strict=True))


@pytest.mark.parametrize("kind", ["pv", "load"])
def test_generated_series_are_normalised_and_labelled(kind):
    scenarios = synth_dataset(kind, 12, 64, seed=0)
    assert [s.id for s in scenarios[:2]] == [f"{kind}-00000", f"{kind}-00001"]
    for s in scenarios:
        assert s.kind == kind
        assert s.length == 64
        assert s.series.min() >= 0.0
        assert s.series.max() <= 1.0
        assert s.metadata.peak == pytest.approx(s.series.max())
        assert s.metadata.peak_time_index == int(np.argmax(s.series))
        assert s.metadata.volatility == volatility_class(s.series)
        if kind == "pv":
            assert s.metadata.weather is not None and s.metadata.user_type is None
        else:
            assert s.metadata.user_type is not None and s.metadata.weather is None


def test_peak_override_sets_the_maximum():
    for s in synth_dataset("pv", 5, 64, seed=1, peak=0.8):
        assert s.series.max() == pytest.approx(0.8, abs=0.02)


def test_residential_load_peaks_in_the_evening():
    for s in synth_dataset("load", 10, 64, seed=2, user_type="residential"):
        assert s.metadata.peak_time_index >= 48
        assert s.metadata.shape in ("evening_peak", "double_peak")


def test_load_shape_override_implies_user_type():
    for s in synth_dataset("load", 3, 32, seed=0, shape="plateau"):
        assert s.metadata.user_type == "industrial"


def test_sunny_days_without_events_are_stable():
    for s in synth_dataset("pv", 10, 64, seed=5, weather="sunny", shape="bell",
                           event_probability=0.0):
        assert s.metadata.volatility == "stable"
        assert s.metadata.dip_at is None


def test_sunny_days_at_five_minute_resolution_stay_below_the_stable_ramp_rate():
    for s in synth_dataset("pv", 40, 288, seed=8, weather="sunny", event_probability=0.0):
        assert marr(s.series) < MARR_THRESHOLDS[0], s.id


def test_ramp_rate_increases_with_requested_volatility():
    medians = []
    for cls in ("stable", "moderate", "high"):
        scenarios = synth_dataset("pv", 15, 64, seed=6, weather="sunny", volatility=cls,
                                  event_probability=0.0)
        medians.append(np.median([detrended_marr(s.series) for s in scenarios]))
        if cls != "stable":
            hits = sum(1 for s in scenarios if s.metadata.volatility == cls)
            assert hits >= 10, cls
    assert medians[0] < medians[1] < medians[2]


def test_recorded_dips_are_detectable():
    scenarios = synth_dataset("pv", 20, 64, seed=7, weather="sunny", event_probability=1.0)
    with_dip = [s for s in scenarios if s.metadata.dip_at is not None]
    assert with_dip
    for s in with_dip:
        offset = detect_dip(s.series, s.metadata.dip_at)
        assert offset is not None and offset <= 3


@pytest.mark.parametrize(
    "kwargs",
    [
        {"kind": "wind"},
        {"n": 0},
        {"length": 8},
        {"kind": "load", "weather": "sunny"},
        {"kind": "pv", "user_type": "industrial"},
        {"peak": 1.5},
        {"kind": "load", "shape": "bell"},
        {"kind": "load", "shape": "plateau", "user_type": "residential"},
    ],
)
def test_invalid_generator_arguments(kwargs):
    args = {"kind": "pv", "n": 2, "length": 32, "seed": 0}
    args.update(kwargs)
    with pytest.raises(ValueError):
        synth_dataset(**args)


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


def test_stat_report_example():
    s = Scenario("x", np.array([0.0, 0.2, 0.4, 0.4, 1.0, 0.6, 0.2, 0.0]), "pv", _meta())
    report = stat_report(s)
    assert report.overall.max == 1.0
    assert report.overall.min == 0.0
    assert report.overall.mean == pytest.approx(0.35)
    assert report.overall.marr == pytest.approx(2.0 / 7)
    assert list(report.segments) == ["dawn", "morning", "afternoon", "evening"]
    assert report.segments["dawn"].mean == pytest.approx(0.1)
    assert report.segments["afternoon"].max == 1.0
    assert report.segments["evening"].mean == pytest.approx(0.1)


def test_stat_report_needs_length_divisible_by_four():
    with pytest.raises(ValueError):
        stat_report(Scenario("x", np.zeros(6), "pv", _meta()))


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


def test_dataset_round_trip(tmp_path):
    scenarios = synth_dataset("load", 4, 32, seed=0)
    path = tmp_path / "dataset.jsonl"
    assert save_dataset(scenarios, path) == 4
    restored = load_dataset(path)
    for a, b in zip(scenarios, restored, strict=True):
        assert a.id == b.id
        assert np.array_equal(a.series, b.series)
        assert a.metadata == b.metadata


def test_event_is_written_as_an_object(tmp_path):
    s = Scenario("pv-1", np.linspace(0, 1, 16), "pv", _meta(dip_at=5))
    path = tmp_path / "d.jsonl"
    save_dataset([s], path)
    record = json.loads(path.read_text())
    assert record["metadata"]["event"] == {"dip_at": 5}
    assert load_dataset(path)[0].metadata.dip_at == 5


def test_load_rejects_out_of_range_values(tmp_path):
    record = Scenario("pv-1", np.linspace(0, 1, 16), "pv", _meta()).to_record()
    record["series"][3] = 1.5
    path = tmp_path / "d.jsonl"
    path.write_text(json.dumps(record) + "\n")
    with pytest.raises(FormatError, match="pv-1"):
        load_dataset(path)


def test_load_rejects_mixed_lengths(tmp_path):
    a = Scenario("a", np.zeros(16), "pv", _meta())
    b = Scenario("b", np.zeros(32), "pv", _meta())
    path = tmp_path / "d.jsonl"
    save_dataset([a, b], path)
    with pytest.raises(FormatError):
        load_dataset(path)


def test_load_rejects_unknown_labels(tmp_path):
    record = Scenario("a", np.zeros(16), "pv", _meta()).to_record()
    record["metadata"]["volatility"] = "wild"
    path = tmp_path / "d.jsonl"
    path.write_text(json.dumps(record) + "\n")
    with pytest.raises(FormatError):
        load_dataset(path)


def test_labels_csv(tmp_path):
    scenarios = synth_dataset("pv", 3, 32, seed=0)
    path = tmp_path / "labels.csv"
    assert write_labels_csv(scenarios, path) == 3
    rows = list(csv.DictReader(path.open()))
    assert [r["id"] for r in rows] == [s.id for s in scenarios]
    assert float(rows[0]["peak"]) == scenarios[0].metadata.peak
    assert rows[0]["user_type"] == ""


def test_run_synth_data_writes_dataset_and_labels(tmp_path, capsys):
    assert run_synth_data("pv", 4, 32, 0, tmp_path) == 0
    assert len(load_dataset(tmp_path / "dataset.jsonl")) == 4
    assert (tmp_path / "labels.csv").is_file()
    assert "SYNTHETIC DATASET" in capsys.readouterr().out
