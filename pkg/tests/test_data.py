import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wearlang import data as D


def test_registry_has_26_ordered_features():
    reg = D.feature_registry()
    assert len(reg) == D.N_CHANNELS == 26
    assert [f.index for f in reg] == list(range(26))
    assert reg[0].name == "Heart Rate" and reg[0].alias == "Heart rate"
    assert D.channel_index("Step Count") == reg[D.channel_index("Step Count")].index
    with pytest.raises(KeyError):
        D.channel_index("Blood Oxygen")


def test_sensor_day_validates_shape_and_finiteness():
    vals = np.zeros((26, 1440), np.float32)
    ok = np.ones((26, 1440), bool)
    with pytest.raises(ValueError):
        D.SensorDay(0, 0, vals[:, :100], ok[:, :100])
    bad = vals.copy()
    bad[3, 7] = np.inf
    with pytest.raises(ValueError):
        D.SensorDay(0, 0, bad, ok)
    ok2 = ok.copy()
    ok2[3, 7] = False
    D.SensorDay(0, 0, bad, ok2)  # non-finite allowed where invalid


def test_event_log_ranges():
    with pytest.raises(ValueError):
        D.EventLog([("Run", 10, 1440)])
    with pytest.raises(ValueError):
        D.EventLog([], [("Happy", -1)])


def _run_day(seed=5, gaps=True):
    sched = [(D.ACTIVITY_PROFILES["Run"], 600, 659)]
    return D.synthesize_day(seed, sched, [("Happy", 100)], person_id=2, day_id=9, gaps=gaps)


def test_synthesize_is_pure_and_marks_gaps_as_nan():
    a, ea = _run_day()
    b, eb = _run_day()
    assert a.same_as(b) and ea == eb
    assert np.all(np.isnan(a.values[~a.valid]))
    assert np.all(np.isfinite(a.values[a.valid]))
    c, _ = _run_day(seed=6)
    assert not a.same_as(c)


def test_activity_segment_shifts_heart_rate():
    day, events = _run_day(gaps=False)
    hr = day.values[0]
    assert hr[600:660].mean() - hr[400:460].mean() > 40
    assert events.activities == [("Run", 600, 659)]
    assert D.primary_label(events) == "Run"


def test_segment_outside_day_rejected():
    with pytest.raises(ValueError):
        D.synthesize_day(0, [(D.ACTIVITY_PROFILES["Walk"], 1400, 1440)])


def test_build_dataset_count_law_and_interleaving():
    classes = ["Run", "Walk", "Outdoor Bike", "Weightlifting"]
    days, logs = D.build_dataset(classes, 50, seed=1)
    assert len(days) == len(logs) == 200
    assert [D.primary_label(e) for e in logs[:4]] == classes
    assert len({d.day_id for d in days}) == 200
    assert all(D.validity_fraction(d) >= D.MIN_VALID_FRACTION for d in days)
    with pytest.raises(KeyError):
        D.build_dataset(["Run", "Juggling"], 1, seed=0)


def test_day_seed_depends_on_both_inputs():
    assert D.day_seed(0, 1) != D.day_seed(0, 2)
    assert D.day_seed(0, 1) != D.day_seed(1, 1)
    assert D.day_seed(3, 4) == D.day_seed(3, 4)


def _random_day(rng, pid=0, did=0, p_valid=0.7):
    vals = rng.normal(5, 3, (26, 1440)).astype(np.float32)
    ok = rng.random((26, 1440)) < p_valid
    vals[~ok] = np.nan
    return D.SensorDay(pid, did, vals, ok)


def test_norm_stats_match_per_channel_oracle(rng):
    days = [_random_day(rng, did=i) for i in range(3)]
    stats = D.compute_norm_stats(days)
    for ch in range(26):
        pooled = np.concatenate([d.values[ch][d.valid[ch]].astype(np.float64) for d in days])
        assert stats.mean[ch] == pytest.approx(pooled.mean(), rel=1e-12)
        assert stats.std[ch] == pytest.approx(pooled.std(), rel=1e-10)


def test_norm_stats_floor_and_empty():
    vals = np.full((26, 1440), 3.0, np.float32)
    day = D.SensorDay(0, 0, vals, np.ones((26, 1440), bool))
    stats = D.compute_norm_stats([day])
    assert np.all(stats.std == D.STD_FLOOR)
    with pytest.raises(ValueError):
        D.compute_norm_stats([])


def test_normalize_zeroes_invalid_and_standardizes_valid(rng):
    day = _random_day(rng)
    stats = D.compute_norm_stats([day])
    z = D.normalize(day, stats)
    assert np.all(z.values[~day.valid] == 0.0)
    for ch in (0, 11, 25):
        v = z.values[ch][day.valid[ch]].astype(np.float64)
        assert abs(v.mean()) < 1e-5 and v.std() == pytest.approx(1.0, abs=1e-5)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
def test_dataset_round_trip_bit_exact(tmp_path_factory, seed, p_valid):
    rng = np.random.default_rng(seed)
    days = [_random_day(rng, pid=i, did=100 + i, p_valid=p_valid) for i in range(2)]
    logs = [D.EventLog([("Walk", 5, 50)], [("Calm", 7)]), D.EventLog()]
    path = tmp_path_factory.mktemp("ds") / "x.slmd"
    D.write_dataset(days, logs, path)
    back, back_logs = D.read_dataset(path)
    assert all(a.same_as(b) for a, b in zip(days, back)) and len(back) == 2
    assert back_logs == logs


def test_dataset_format_errors(tmp_path, rng):
    days = [_random_day(rng)]
    path = tmp_path / "d.slmd"
    D.write_dataset(days, [D.EventLog()], path)
    blob = path.read_bytes()
    for corrupt, msg in ((b"XXXX" + blob[4:], "magic"), (blob[:-3], "bytes"),
                         (blob[:4] + b"\x09\x00" + blob[6:], "version"), (blob[:5], "header")):
        path.write_bytes(corrupt)
        with pytest.raises(D.DatasetFormatError, match=msg):
            D.read_dataset(path)
    path.write_bytes(blob)
    D.events_path(path).write_text('{"person_id": 9, "day_id": 9, "activities": [], "moods": []}\n')
    with pytest.raises(D.DatasetFormatError, match="out of step"):
        D.read_dataset(path)
    with pytest.raises(ValueError):
        D.write_dataset(days, [], path)


def test_primary_label_longest_activity():
    ev = D.EventLog([("Walk", 0, 10), ("Run", 20, 80), ("Yoga", 100, 120)])
    assert D.primary_label(ev) == "Run"
    assert D.primary_label(D.EventLog()) is None
