"""Hierarchical caption generation: statistical, structural and semantic levels.

Statistical sentences summarize one channel over the day, structural
sentences verbalize sliding-window trends and spike/drop events, and semantic
sentences narrate logged activities and moods. Every sentence is a template
instantiation; templates live in ``assets/templates_v1.txt``.
"""

from __future__ import annotations

import enum
import re
import string
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import N_CHANNELS, EventLog, SensorDay, feature_registry

TREND_WINDOW = 60
TREND_STRIDE = 20
TREND_THRESHOLD = 0.5 / 60  # channel-std per minute
SPIKE_K = 3.0
DEFAULT_BUDGET = 8
NO_EVENT_SENTENCE = "No recorded activities."

PLACEHOLDERS = frozenset({
    "feature", "Feature", "mean", "std", "min", "max", "trend", "start", "end",
    "event", "Event", "minute", "activity", "mood",
})
POOL_SIZES = {"statistical": 20, "structural": 15, "semantic": 20}


class Level(str, enum.Enum):
    STATISTICAL = "Statistical"
    STRUCTURAL = "Structural"
    SEMANTIC = "Semantic"


_SHORT = {"stat": Level.STATISTICAL, "struct": Level.STRUCTURAL, "sem": Level.SEMANTIC}
_LEVEL_ORDER = (Level.STATISTICAL, Level.STRUCTURAL, Level.SEMANTIC)


def parse_variant(spec: str | Iterable[str]) -> frozenset[Level]:
    """``"struct+sem"``, ``"Struct,Sem"`` or ``["Struct", "Sem"]`` -> level set."""
    parts = re.split(r"[+,\s]+", spec) if isinstance(spec, str) else list(spec)
    levels = set()
    for part in parts:
        if not part:
            continue
        key = part.strip().lower()
        if key not in _SHORT:
            raise ValueError(f"unknown caption level {part!r}; expected Stat, Struct or Sem")
        levels.add(_SHORT[key])
    if not levels:
        raise ValueError("caption variant must enable at least one level")
    return frozenset(levels)


def variant_name(levels: Iterable[Level]) -> str:
    short = {v: k for k, v in _SHORT.items()}
    levels = set(levels)
    return "+".join(short[lv] for lv in _LEVEL_ORDER if lv in levels)


# Row order of the caption-variant ablation table.
ALL_VARIANTS = tuple(parse_variant(v) for v in (
    "stat", "struct", "sem", "stat+sem", "struct+sem", "stat+struct", "stat+struct+sem"))
DEFAULT_VARIANT = parse_variant("struct+sem")


class TrendKind(str, enum.Enum):
    INCREASING = "Increasing"
    DECREASING = "Decreasing"
    STABLE = "Stable"
    SPIKE = "Spike"
    DROP = "Drop"


@dataclass(frozen=True)
class StatSummary:
    channel: int
    mean: float
    std: float
    min: float
    max: float


@dataclass(frozen=True)
class TrendEvent:
    """Trend kinds span ``[start_min, end_min)``; point kinds set ``minute``."""

    channel: int
    kind: TrendKind
    start_min: int
    end_min: int
    minute: int | None = None


@dataclass
class Caption:
    text: str
    levels: frozenset[Level]
    source_spans: list[tuple[str, tuple[int, int]]] = field(default_factory=list)


@dataclass(frozen=True)
class TemplatePool:
    statistical: tuple[str, ...]
    structural: tuple[str, ...]
    semantic: tuple[str, ...]
    version: int = 1

    def validate(self) -> None:
        for section, size in POOL_SIZES.items():
            templates = getattr(self, section)
            if len(templates) != size:
                raise ValueError(f"{section} pool has {len(templates)} templates, expected {size}")
            for tpl in templates:
                unknown = placeholders_of(tpl) - PLACEHOLDERS
                if unknown:
                    raise ValueError(f"template {tpl!r} uses unknown placeholders {unknown}")

    def trend_templates(self) -> tuple[str, ...]:
        return tuple(t for t in self.structural if "{start}" in t)

    def point_templates(self) -> tuple[str, ...]:
        return tuple(t for t in self.structural if "{minute}" in t)

    def activity_templates(self) -> tuple[str, ...]:
        return tuple(t for t in self.semantic if "{activity}" in t)

    def mood_templates(self) -> tuple[str, ...]:
        return tuple(t for t in self.semantic if "{mood}" in t)


def placeholders_of(template: str) -> set[str]:
    return {name for _, name, _, _ in string.Formatter().parse(template) if name is not None}


def parse_template_pool(text: str) -> TemplatePool:
    sections: dict[str, list[str]] = {}
    current = None
    version = 1
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            m = re.match(r"#\s*version:\s*(\d+)", line)
            if m:
                version = int(m.group(1))
            continue
        m = re.fullmatch(r"\[(\w+)\]", line)
        if m:
            current = m.group(1)
            sections[current] = []
            continue
        if current is None:
            raise ValueError(f"template line before any section header: {line!r}")
        sections[current].append(line)
    pool = TemplatePool(
        tuple(sections.get("statistical", ())),
        tuple(sections.get("structural", ())),
        tuple(sections.get("semantic", ())),
        version,
    )
    pool.validate()
    return pool


@lru_cache(maxsize=None)
def default_pool() -> TemplatePool:
    text = resources.files("wearlang").joinpath("assets/templates_v1.txt").read_text("utf-8")
    return parse_template_pool(text)


def load_template_pool(path: str | Path) -> TemplatePool:
    return parse_template_pool(Path(path).read_text(encoding="utf-8"))


def fmt1(value: float) -> str:
    """One decimal place, halves rounded away from zero."""
    out = str(Decimal(repr(float(value))).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))
    return "0.0" if out == "-0.0" else out


def _capitalize(text: str) -> str:
    return text[:1].upper() + text[1:]


def render(template: str, **values) -> str:
    if "feature" in values:
        values.setdefault("Feature", _capitalize(values["feature"]))
    if "event" in values:
        values.setdefault("Event", _capitalize(values["event"]))
    return template.format(**values)


# --- statistical -------------------------------------------------------------

def summarize_channel(series: np.ndarray, valid: np.ndarray, channel: int = 0) -> StatSummary:
    x = np.asarray(series, dtype=np.float64)[np.asarray(valid, dtype=bool)]
    if x.size == 0:
        raise ValueError(f"channel {channel} has no valid entries")
    mean = float(x.mean())
    std = float(np.sqrt(np.mean((x - mean) ** 2)))
    return StatSummary(channel, mean, std, float(x.min()), float(x.max()))


def render_statistical(summary: StatSummary, template: str) -> str:
    alias = feature_registry()[summary.channel].alias
    return render(template, feature=alias, mean=fmt1(summary.mean), std=fmt1(summary.std),
                  min=fmt1(summary.min), max=fmt1(summary.max))


# --- structural --------------------------------------------------------------

def window_starts(n: int, window_len: int, stride: int) -> list[int]:
    """Window origins at multiples of ``stride``; a final window is aligned to ``n``."""
    if n < window_len:
        return [0] if n >= 2 else []
    starts = list(range(0, n - window_len + 1, stride))
    if starts[-1] + window_len < n:
        starts.append(n - window_len)
    return starts


def window_slopes(series: np.ndarray, valid: np.ndarray, window_len: int = TREND_WINDOW,
                  stride: int = TREND_STRIDE) -> tuple[list[int], np.ndarray]:
    """Least-squares slope (units/min) per window over its valid points; NaN if < 2 points."""
    y = np.asarray(series, dtype=np.float64)
    ok = np.asarray(valid, dtype=bool)
    n = y.size
    starts = window_starts(n, window_len, stride)
    if not starts:
        return starts, np.empty(0)
    width = min(window_len, n)
    idx = np.asarray(starts)[:, None] + np.arange(width)[None, :]
    w = ok[idx].astype(np.float64)
    yy = np.where(ok[idx], y[idx], 0.0)
    xx = idx.astype(np.float64)
    cnt = w.sum(axis=1)
    safe = np.maximum(cnt, 1.0)
    xm = (w * xx).sum(axis=1) / safe
    ym = (w * yy).sum(axis=1) / safe
    dx = (xx - xm[:, None]) * w
    sxx = (dx * dx).sum(axis=1)
    sxy = (dx * (yy - ym[:, None])).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        slope = np.where((cnt >= 2) & (sxx > 0), sxy / sxx, np.nan)
    return starts, slope


def classify_slope(scaled_slope: float, threshold: float) -> TrendKind:
    if scaled_slope > threshold:
        return TrendKind.INCREASING
    if scaled_slope < -threshold:
        return TrendKind.DECREASING
    return TrendKind.STABLE


def detect_trends(series: np.ndarray, valid: np.ndarray, window_len: int = TREND_WINDOW,
                  stride: int = TREND_STRIDE, slope_threshold: float = TREND_THRESHOLD,
                  channel: int = 0) -> list[TrendEvent]:
    """Classify each window's slope (in channel-std units per minute) and merge runs.

    Consecutive windows of the same kind merge into one event spanning their
    union. A window with fewer than two valid points breaks the run.
    """
    if window_len < 2:
        raise ValueError("window_len must be at least 2")
    y = np.asarray(series, dtype=np.float64)
    ok = np.asarray(valid, dtype=bool)
    vals = y[ok]
    if vals.size == 0:
        return []
    std = float(np.sqrt(np.mean((vals - vals.mean()) ** 2)))
    starts, slopes = window_slopes(y, ok, window_len, stride)
    width = min(window_len, y.size)
    events: list[TrendEvent] = []
    run: list | None = None  # [kind, start, end]
    for start, slope in zip(starts, slopes):
        if np.isnan(slope):
            if run:
                events.append(TrendEvent(channel, run[0], run[1], run[2]))
            run = None
            continue
        kind = classify_slope(slope / std if std > 0 else 0.0, slope_threshold)
        if run and run[0] == kind:
            run[2] = start + width
        else:
            if run:
                events.append(TrendEvent(channel, run[0], run[1], run[2]))
            run = [kind, start, start + width]
    if run:
        events.append(TrendEvent(channel, run[0], run[1], run[2]))
    return events


def detect_spikes(series: np.ndarray, valid: np.ndarray, k_sigma: float = SPIKE_K,
                  channel: int = 0) -> list[TrendEvent]:
    """Flag minutes beyond ``mean +/- k * std``; each run of flags collapses to its extremum."""
    if k_sigma <= 0:
        raise ValueError("k_sigma must be positive")
    y = np.asarray(series, dtype=np.float64)
    ok = np.asarray(valid, dtype=bool)
    vals = y[ok]
    if vals.size == 0:
        return []
    mean = vals.mean()
    std = np.sqrt(np.mean((vals - mean) ** 2))
    if std == 0:
        return []
    flag = np.zeros(y.size, dtype=np.int8)
    flag[ok & (y > mean + k_sigma * std)] = 1
    flag[ok & (y < mean - k_sigma * std)] = -1
    events = []
    t = 0
    while t < y.size:
        if flag[t] == 0:
            t += 1
            continue
        end = t
        while end + 1 < y.size and flag[end + 1] == flag[t]:
            end += 1
        seg = y[t:end + 1]
        if flag[t] > 0:
            m, kind = t + int(np.argmax(seg)), TrendKind.SPIKE
        else:
            m, kind = t + int(np.argmin(seg)), TrendKind.DROP
        events.append(TrendEvent(channel, kind, m, m, minute=m))
        t = end + 1
    return events


def render_structural(event: TrendEvent, template: str) -> str:
    alias = feature_registry()[event.channel].alias
    if event.minute is not None:
        return render(template, feature=alias, event=event.kind.value.lower(), minute=event.minute)
    return render(template, feature=alias, trend=event.kind.value.lower(),
                  start=event.start_min, end=event.end_min)


# --- semantic ----------------------------------------------------------------

def _semantic_items(events: EventLog) -> list[tuple[int, str, tuple]]:
    items = [(s, "activity", (a, s, e)) for a, s, e in events.activities]
    items += [(t, "mood", (m, t)) for m, t in events.moods]
    items.sort(key=lambda it: it[0])  # stable: activities before moods at equal minute
    return items


def render_semantic(events: EventLog, pool: TemplatePool,
                    rng: np.random.Generator) -> list[str]:
    """One sentence per activity and mood entry, in chronological order."""
    acts, moods = pool.activity_templates(), pool.mood_templates()
    out = []
    for _, kind, payload in _semantic_items(events):
        if kind == "activity":
            label, start, end = payload
            tpl = acts[int(rng.integers(len(acts)))]
            out.append(render(tpl, activity=label, start=start, end=end))
        else:
            label, minute = payload
            tpl = moods[int(rng.integers(len(moods)))]
            out.append(render(tpl, mood=label, minute=minute))
    return out


# --- composition -------------------------------------------------------------

def _statistical_candidates(day: SensorDay, pool: TemplatePool, rng: np.random.Generator):
    out = []
    for ch in range(N_CHANNELS):
        if not day.valid[ch].any():
            continue
        summary = summarize_channel(day.values[ch], day.valid[ch], ch)
        tpl = pool.statistical[int(rng.integers(len(pool.statistical)))]
        out.append((render_statistical(summary, tpl), ("stat", (0, day.values.shape[1]))))
    return out


def _structural_candidates(day: SensorDay, pool: TemplatePool, rng: np.random.Generator):
    trend_t, point_t = pool.trend_templates(), pool.point_templates()
    out = []
    for ch in range(N_CHANNELS):
        events = detect_trends(day.values[ch], day.valid[ch], channel=ch)
        events += detect_spikes(day.values[ch], day.valid[ch], channel=ch)
        for ev in events:
            if ev.minute is not None:
                tpl = point_t[int(rng.integers(len(point_t)))]
                span = (ev.minute, ev.minute)
            else:
                tpl = trend_t[int(rng.integers(len(trend_t)))]
                span = (ev.start_min, ev.end_min)
            out.append((render_structural(ev, tpl), (ev.kind.value, span)))
    return out


def _semantic_candidates(events: EventLog, pool: TemplatePool, rng: np.random.Generator):
    texts = render_semantic(events, pool, rng)
    spans = []
    for _, kind, payload in _semantic_items(events):
        spans.append((kind, (payload[1], payload[2]) if kind == "activity" else
                      (payload[1], payload[1])))
    return list(zip(texts, spans))


def allocate_budget(available: Sequence[int], budget: int) -> list[int]:
    """Split ``budget`` across levels as evenly as possible; surplus flows to larger levels."""
    alloc = [0] * len(available)
    remaining = budget
    order = sorted(range(len(available)), key=lambda i: (available[i], i))
    for rank, i in enumerate(order):
        share = remaining // (len(order) - rank)
        alloc[i] = min(available[i], share)
        remaining -= alloc[i]
    return alloc


def compose_caption(day: SensorDay, events: EventLog, variant: Iterable[Level] | str,
                    rng: np.random.Generator, budget: int = DEFAULT_BUDGET,
                    pool: TemplatePool | None = None) -> Caption:
    """Assemble a caption from a random subset of each enabled level's sentences.

    Levels appear in statistical, structural, semantic order and sentences keep
    their natural order within a level.
    """
    levels = parse_variant(variant) if isinstance(variant, str) else frozenset(variant)
    if not levels:
        raise ValueError("caption variant must enable at least one level")
    pool = pool or default_pool()
    builders = {
        Level.STATISTICAL: lambda: _statistical_candidates(day, pool, rng),
        Level.STRUCTURAL: lambda: _structural_candidates(day, pool, rng),
        Level.SEMANTIC: lambda: _semantic_candidates(events, pool, rng),
    }
    enabled = [lv for lv in _LEVEL_ORDER if lv in levels]
    candidates = [builders[lv]() for lv in enabled]
    alloc = allocate_budget([len(c) for c in candidates], budget)
    sentences: list[str] = []
    spans: list[tuple[str, tuple[int, int]]] = []
    for cands, k in zip(candidates, alloc):
        if k <= 0:
            continue
        picked = np.sort(rng.choice(len(cands), size=k, replace=False))
        for i in picked:
            sentences.append(cands[i][0])
            spans.append(cands[i][1])
    if not sentences:
        sentences = [NO_EVENT_SENTENCE]
    return Caption(" ".join(sentences), levels, spans)


def caption_rng(seed: int, day_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, day_id])
