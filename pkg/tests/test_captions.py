import math

import numpy as np
import pytest

from wearlang import captions as C
from wearlang import data as D


# --- brute-force oracles -------------------------------------------------------

def oracle_trends(y, ok, window=60, stride=20, thr=0.5 / 60):
    """Loop-based reference: polyfit per window, then merge equal-kind neighbours."""
    n = len(y)
    vals = [y[i] for i in range(n) if ok[i]]
    if not vals:
        return []
    mu = sum(vals) / len(vals)
    sd = math.sqrt(sum((v - mu) ** 2 for v in vals) / len(vals))
    if n < window:
        starts = [0] if n >= 2 else []
    else:
        starts = []
        s = 0
        while s + window <= n:
            starts.append(s)
            s += stride
        if starts[-1] + window != n:
            starts.append(n - window)
    width = min(window, n)
    out, run = [], None
    for s in starts:
        xs = [t for t in range(s, s + width) if ok[t]]
        if len(xs) < 2:
            if run:
                out.append(tuple(run))
            run = None
            continue
        slope = np.polyfit(xs, [y[t] for t in xs], 1)[0]
        z = slope / sd if sd > 0 else 0.0
        kind = "Increasing" if z > thr else "Decreasing" if z < -thr else "Stable"
        if run and run[0] == kind:
            run[2] = s + width
        else:
            if run:
                out.append(tuple(run))
            run = [kind, s, s + width]
    if run:
        out.append(tuple(run))
    return out


def oracle_spikes(y, ok, k=3.0):
    vals = [y[i] for i in range(len(y)) if ok[i]]
    if not vals:
        return []
    mu = sum(vals) / len(vals)
    sd = math.sqrt(sum((v - mu) ** 2 for v in vals) / len(vals))
    if sd == 0:
        return []
    sign = [0] * len(y)
    for i in range(len(y)):
        if ok[i] and y[i] > mu + k * sd:
            sign[i] = 1
        elif ok[i] and y[i] < mu - k * sd:
            sign[i] = -1
    out, i = [], 0
    while i < len(y):
        if sign[i] == 0:
            i += 1
            continue
        j = i
        while j + 1 < len(y) and sign[j + 1] == sign[i]:
            j += 1
        best = i
        for t in range(i, j + 1):
            if (sign[i] > 0 and y[t] > y[best]) or (sign[i] < 0 and y[t] < y[best]):
                best = t
        out.append(("Spike" if sign[i] > 0 else "Drop", best))
        i = j + 1
    return out


def _as_tuples(events):
    return [(e.kind.value, e.start_min, e.end_min) for e in events]


def _random_series(rng, n):
    kind = rng.integers(4)
    t = np.arange(n, dtype=np.float64)
    if kind == 0:
        y = rng.normal(0, 1, n)
    elif kind == 1:
        y = np.cumsum(rng.normal(0, 1, n))
    elif kind == 2:
        y = np.sin(t / rng.uniform(20, 200)) * rng.uniform(1, 10) + rng.normal(0, 0.3, n)
    else:
        y = np.where(t > n / 2, 5.0, 0.0) + rng.normal(0, 0.5, n)
        y[rng.integers(n, size=3)] += rng.choice([-30, 30], size=3)
    ok = rng.random(n) > rng.choice([0.0, 0.1, 0.6])
    return y, ok


def test_trend_detector_matches_oracle_on_100_random_series():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.choice([1440, int(rng.integers(2, 400))]))
        y, ok = _random_series(rng, n)
        assert _as_tuples(C.detect_trends(y, ok)) == oracle_trends(y, ok)


def test_spike_detector_matches_oracle_on_100_random_series():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = int(rng.integers(50, 1441))
        y, ok = _random_series(rng, n)
        got = [(e.kind.value, e.minute) for e in C.detect_spikes(y, ok)]
        assert got == oracle_spikes(y, ok)


def test_hand_built_ramp_yields_one_decreasing_trend():
    y = np.full(1440, 100.0)
    y[680:960] = np.linspace(100, 40, 280)
    ok = np.ones(1440, bool)
    events = C.detect_trends(y, ok)
    dec = [e for e in events if e.kind is C.TrendKind.DECREASING]
    assert len(dec) == 1
    assert 620 <= dec[0].start_min <= 680 and 960 <= dec[0].end_min <= 1020
    # the step back up at minute 960 is the only other non-stable stretch
    others = [e for e in events if e.kind is not C.TrendKind.STABLE and e is not dec[0]]
    assert all(e.kind is C.TrendKind.INCREASING and e.start_min < 960 < e.end_min
               for e in others)
    assert _as_tuples(events) == oracle_trends(y, ok)


def test_hand_built_impulses():
    y = np.zeros(1440)
    y[::2] = 1.0  # nonzero std
    y[500] = 50.0
    y[900] = -50.0
    ok = np.ones(1440, bool)
    got = [(e.kind, e.minute) for e in C.detect_spikes(y, ok)]
    assert got == [(C.TrendKind.SPIKE, 500), (C.TrendKind.DROP, 900)]
    ok[500] = False
    assert [(e.kind, e.minute) for e in C.detect_spikes(y, ok)] == [(C.TrendKind.DROP, 900)]


def test_flat_series_produce_no_spikes_and_stable_trend():
    y = np.full(1440, 3.0)
    ok = np.ones(1440, bool)
    assert C.detect_spikes(y, ok) == []
    assert _as_tuples(C.detect_trends(y, ok)) == [("Stable", 0, 1440)]


def test_gap_window_breaks_run():
    y = np.full(1440, 1.0)
    y[::3] = 2.0
    ok = np.ones(1440, bool)
    ok[600:700] = False
    events = C.detect_trends(y, ok)
    assert len(events) == 2 and events[0].end_min <= 640 and events[1].start_min >= 660


def test_window_starts_cover_the_series():
    assert C.window_starts(1440, 60, 20)[-1] == 1380
    assert C.window_starts(130, 60, 20) == [0, 20, 40, 60, 70]
    assert C.window_starts(1, 60, 20) == []
    with pytest.raises(ValueError):
        C.detect_trends(np.zeros(10), np.ones(10, bool), window_len=1)
    with pytest.raises(ValueError):
        C.detect_spikes(np.zeros(10), np.ones(10, bool), k_sigma=0)


# --- statistical level -----------------------------------------------------------

def test_reference_statistical_render_digits():
    summary = C.StatSummary(channel=0, mean=88.7, std=9.3, min=70.8, max=134.9)
    pool = C.default_pool()
    text = C.render_statistical(summary, pool.statistical[0])
    assert text == ("The average Heart rate value is 88.7, with extremes at 134.9 (max) and "
                    "70.8 (min), and a std of 9.3.")
    for tpl in pool.statistical:
        out = C.render_statistical(summary, tpl)
        for digits in ("88.7", "134.9", "70.8", "9.3"):
            assert digits in out


@pytest.mark.parametrize("value,expected", [
    (0.05, "0.1"), (-0.05, "-0.1"), (2.25, "2.3"), (0.04, "0.0"), (-0.04, "0.0"),
    (88.65, "88.7"), (134.94999, "134.9"), (1e6, "1000000.0"),
])
def test_fmt1_rounds_half_away_from_zero(value, expected):
    assert C.fmt1(value) == expected


def test_summarize_channel_uses_valid_entries_only():
    y = np.array([1.0, 2.0, 3.0, 1000.0])
    s = C.summarize_channel(y, np.array([True, True, True, False]))
    assert (s.mean, s.min, s.max) == (2.0, 1.0, 3.0)
    assert s.std == pytest.approx(np.sqrt(2 / 3))
    with pytest.raises(ValueError):
        C.summarize_channel(y, np.zeros(4, bool))


# --- templates ---------------------------------------------------------------------

def test_default_pool_sizes_and_placeholders():
    pool = C.default_pool()
    pool.validate()
    assert (len(pool.statistical), len(pool.structural), len(pool.semantic)) == (20, 15, 20)
    assert pool.trend_templates() and pool.point_templates()
    assert pool.activity_templates() and pool.mood_templates()


def test_pool_validation_errors(tmp_path):
    good = (C.default_pool())
    text = "[statistical]\n" + "\n".join(good.statistical)
    text += "\n[structural]\n" + "\n".join(good.structural)
    text += "\n[semantic]\n" + "\n".join(good.semantic) + "\n"
    path = tmp_path / "pool.txt"
    path.write_text(text)
    assert C.load_template_pool(path) == C.TemplatePool(good.statistical, good.structural,
                                                        good.semantic, 1)
    with pytest.raises(ValueError, match="expected 20"):
        C.parse_template_pool(text.replace(good.statistical[0] + "\n", ""))
    with pytest.raises(ValueError, match="unknown placeholders"):
        C.parse_template_pool(text.replace(good.statistical[0], "Bad {colour}."))
    with pytest.raises(ValueError, match="before any section"):
        C.parse_template_pool("orphan line\n" + text)


def test_structural_and_semantic_render():
    pool = C.default_pool()
    ev = C.TrendEvent(0, C.TrendKind.DECREASING, 680, 960)
    out = C.render_structural(ev, pool.trend_templates()[0])
    assert "decreasing" in out and "680" in out and "960" in out and "Heart rate" in out
    sp = C.TrendEvent(0, C.TrendKind.SPIKE, 500, 500, minute=500)
    assert "500" in C.render_structural(sp, pool.point_templates()[0])
    ev_log = D.EventLog([("Run", 1270, 1319)], [("Tired", 1159), ("Energetic", 295)])
    sents = C.render_semantic(ev_log, pool, np.random.default_rng(0))
    assert "Energetic" in sents[0] and "Tired" in sents[1] and "Run" in sents[2]


# --- composition --------------------------------------------------------------------

def test_variants():
    assert len(C.ALL_VARIANTS) == 7 and len(set(C.ALL_VARIANTS)) == 7
    assert C.DEFAULT_VARIANT == {C.Level.STRUCTURAL, C.Level.SEMANTIC}
    assert C.variant_name(C.parse_variant("sem+struct")) == "struct+sem"
    with pytest.raises(ValueError):
        C.parse_variant("struct+bogus")


@pytest.mark.parametrize("available,budget", [
    ([10, 10, 10], 8), ([1, 30, 2], 8), ([0, 0, 1], 8), ([3], 8), ([0, 0], 5), ([5, 5], 100),
])
def test_allocate_budget(available, budget):
    alloc = C.allocate_budget(available, budget)
    assert sum(alloc) == min(budget, sum(available))
    assert all(0 <= a <= m for a, m in zip(alloc, available))


def _day():
    return D.synthesize_day(11, [(D.ACTIVITY_PROFILES["Walk"], 300, 360)], [("Calm", 50)],
                            day_id=4)


def test_compose_caption_budget_order_and_determinism():
    day, ev = _day()
    cap = C.compose_caption(day, ev, "stat+struct+sem", C.caption_rng(0, 4))
    assert len(cap.source_spans) <= C.DEFAULT_BUDGET
    kinds = [k for k, _ in cap.source_spans]
    level = [0 if k == "stat" else 2 if k in ("activity", "mood") else 1 for k in kinds]
    assert level == sorted(level) and {0, 1, 2} <= set(level)
    again = C.compose_caption(day, ev, "stat+struct+sem", C.caption_rng(0, 4))
    assert again.text == cap.text
    other = C.compose_caption(day, ev, "stat+struct+sem", C.caption_rng(1, 4))
    assert other.text != cap.text


def test_semantic_only_caption_and_fallback():
    day, ev = _day()
    cap = C.compose_caption(day, ev, "sem", C.caption_rng(0, 4))
    assert "Walk" in cap.text and "Calm" in cap.text
    empty = C.compose_caption(day, D.EventLog(), "sem", C.caption_rng(0, 4))
    assert empty.text == C.NO_EVENT_SENTENCE
    with pytest.raises(ValueError):
        C.compose_caption(day, ev, [], C.caption_rng(0, 4))
