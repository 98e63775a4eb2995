"""Sensor-day data model, feature registry, synthetic generator and dataset IO.

A sensor day is a ``[26 channels x 1440 minutes]`` matrix of minutely
aggregates plus a boolean validity mask. Invalid entries hold NaN on disk and
in memory until :func:`normalize` zero-imputes them.
"""

from __future__ import annotations

import enum
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

N_CHANNELS = 26
N_MINUTES = 1440
MIN_VALID_FRACTION = 0.2
STD_FLOOR = 1e-6

DATASET_MAGIC = b"SLMD"
DATASET_VERSION = 1


class SensorGroup(str, enum.Enum):
    PPG = "PPG"
    ACC = "ACC"
    EDA = "EDA"
    TEMP = "TEMP"
    ALT = "ALT"


@dataclass(frozen=True)
class FeatureSpec:
    index: int
    name: str
    unit: str
    sensor_group: SensorGroup
    definition: str
    alias: str  # lower-register name used inside captions


# (name, unit, group, definition, caption alias)
_FEATURES = [
    ("Heart Rate", "Beats/Min", "PPG", "Mean of instantaneous heart rate.", "Heart rate"),
    ("Shannon Ent. RR", "Nats", "PPG", "Shannon entropy of the RR intervals.", "RR entropy"),
    ("Shannon Ent. RR Diffs", "Nats", "PPG",
     "Shannon entropy of the RR interval differences.", "RR difference entropy"),
    ("RMSSD", "Msec", "PPG", "Root mean squared st. dev. of RR intervals.", "RMSSD"),
    ("SDNN", "Msec", "PPG", "Standard deviation of RR intervals.", "SDNN"),
    ("RR Percent Valid", "%", "PPG",
     "% of 5-minute window with valid RR intervals.", "RR valid percentage"),
    ("RR 80th Percentile", "Msec", "PPG",
     "80th percentile of 5-minute window of RR intervals.", "RR 80th percentile"),
    ("RR 20th Percentile", "Msec", "PPG", "20th percentile of RR intervals.", "RR 20th percentile"),
    ("RR Median", "Msec", "PPG", "Median RR interval.", "RR median"),
    ("Heart Rate at Rest", "Beats/Min", "PPG", "Mean of heart rate at rest.", "resting heart rate"),
    ("Step Count", "Steps", "ACC", "Number of steps.", "steps"),
    ("Jerk Autocorrelation Ratio", "a.u.", "ACC",
     "Ratio of lag=1 autocorrelation to energy in 1st 3-axis principal component.", "jerk ratio"),
    ("Log Energy", "a.u.", "ACC", "Log of sum of 3-axis root mean squared magnitude.", "log energy"),
    ("Covariance Condition", "a.u.", "ACC",
     "Estimate of condition number for 3-axis covariance matrix.", "covariance condition"),
    ("Log Energy Ratio", "a.u.", "ACC",
     "Log of ratio of sum of energy in 1st 3-axis principal component over energy of "
     "3-axis root mean squared magnitude.", "log energy ratio"),
    ("Zero Crossing St.Dev.", "Seconds", "ACC",
     "Standard deviation of time between zero crossing of 1st 3-axis principal component.",
     "zero crossing deviation"),
    ("Zero Crossing Average", "Seconds", "ACC",
     "Mean of time between zero crossing of 1st 3-axis principal component.",
     "zero crossing average"),
    ("Axis Mean", "a.u.", "ACC", "Mean of 3-axis.", "axis mean"),
    ("Kurtosis", "a.u.", "ACC", "Kurtosis of 3-axis root mean squared magnitude.", "kurtosis"),
    ("Sleep Coefficient", "a.u.", "ACC",
     "Sum of 3-axis max-min range, binned into 16 log-scaled bins.", "sleep coefficient"),
    ("Skin Conductance Value", "μSiemens", "EDA",
     "Center of linear tonic SCL value fit.", "skin conductance"),
    ("Skin Conductance Slope", "μS/Min", "EDA",
     "Intraminute slope of SCL values.", "skin conductance slope"),
    ("Lead Contact Counts", "Counts", "EDA",
     "Number of times leads of the sensor contacting wrist in a minute.", "lead contact counts"),
    ("Skin Temperature Value", "°C", "TEMP", "Value of skin temperature.", "skin temperature"),
    ("Skin Temperature Slope", "°C/Min", "TEMP",
     "Slope of skin temperature.", "skin temperature slope"),
    ("Altitude St.Dev. Norm", "Hectopascals", "ALT",
     "Standard deviation of altimeter readings.", "altitude deviation"),
]

_REGISTRY = tuple(
    FeatureSpec(i, name, unit, SensorGroup(group), definition, alias)
    for i, (name, unit, group, definition, alias) in enumerate(_FEATURES)
)


def feature_registry() -> list[FeatureSpec]:
    return list(_REGISTRY)


def channel_index(name: str) -> int:
    for spec in _REGISTRY:
        if spec.name == name:
            return spec.index
    raise KeyError(f"unknown feature {name!r}")


@dataclass
class SensorDay:
    person_id: int
    day_id: int
    values: np.ndarray  # float32 [26, 1440]
    valid: np.ndarray  # bool [26, 1440]

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float32)
        self.valid = np.asarray(self.valid, dtype=bool)
        shape = (N_CHANNELS, N_MINUTES)
        if self.values.shape != shape or self.valid.shape != shape:
            raise ValueError(
                f"sensor day must be {shape}, got {self.values.shape} / {self.valid.shape}"
            )
        if not np.all(np.isfinite(self.values[self.valid])):
            raise ValueError("non-finite value at a valid entry")

    def same_as(self, other: "SensorDay") -> bool:
        """Bit-exact equality (NaN payloads included)."""
        return (
            self.person_id == other.person_id
            and self.day_id == other.day_id
            and self.values.tobytes() == other.values.tobytes()
            and np.array_equal(self.valid, other.valid)
        )


@dataclass
class EventLog:
    activities: list[tuple[str, int, int]] = field(default_factory=list)
    moods: list[tuple[str, int]] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.activities = [(str(a), int(s), int(e)) for a, s, e in self.activities]
        self.moods = [(str(m), int(t)) for m, t in self.moods]
        for label, start, end in self.activities:
            if not 0 <= start <= end < N_MINUTES:
                raise ValueError(f"activity {label!r} segment [{start}, {end}] out of range")
        for label, minute in self.moods:
            if not 0 <= minute < N_MINUTES:
                raise ValueError(f"mood {label!r} minute {minute} out of range")


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray  # float64 [26]
    std: np.ndarray  # float64 [26]


@dataclass(frozen=True)
class ActivityProfile:
    """Per-channel modulation applied inside an activity segment: ``x * scale + offset``."""

    label: str
    offsets: dict[int, float] = field(default_factory=dict)
    scales: dict[int, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for ch in (*self.offsets, *self.scales):
            if not 0 <= ch < N_CHANNELS:
                raise ValueError(f"profile {self.label!r} references channel {ch}")


def _profile(label: str, offsets: dict[str, float] | None = None,
             scales: dict[str, float] | None = None) -> ActivityProfile:
    return ActivityProfile(
        label,
        {channel_index(k): v for k, v in (offsets or {}).items()},
        {channel_index(k): v for k, v in (scales or {}).items()},
    )


# Per-channel baseline: level, diurnal amplitude, noise std, (lower, upper) clip.
_BASELINE = np.array([
    (70.0, 8.0, 3.0), (2.5, 0.2, 0.15), (2.2, 0.2, 0.15), (40.0, 8.0, 5.0),
    (50.0, 8.0, 6.0), (80.0, 5.0, 6.0), (950.0, 60.0, 30.0), (780.0, 60.0, 30.0),
    (860.0, 60.0, 30.0), (62.0, 3.0, 1.5), (5.0, 5.0, 3.0), (0.3, 0.05, 0.05),
    (2.0, 0.5, 0.3), (5.0, 1.0, 0.8), (-0.5, 0.1, 0.1), (1.0, 0.2, 0.15),
    (2.0, 0.3, 0.2), (0.98, 0.01, 0.01), (3.0, 0.5, 0.4), (8.0, 3.0, 1.0),
    (2.0, 0.5, 0.2), (0.0, 0.02, 0.02), (30.0, 5.0, 3.0), (33.0, 1.0, 0.2),
    (0.0, 0.01, 0.01), (0.05, 0.01, 0.02),
])
_CLIP_LOW = np.full(N_CHANNELS, -np.inf)
_CLIP_HIGH = np.full(N_CHANNELS, np.inf)
for _name in ("Shannon Ent. RR", "Shannon Ent. RR Diffs", "RMSSD", "SDNN", "Step Count",
              "Zero Crossing St.Dev.", "Zero Crossing Average", "Sleep Coefficient",
              "Skin Conductance Value", "Lead Contact Counts", "Altitude St.Dev. Norm",
              "RR Percent Valid"):
    _CLIP_LOW[channel_index(_name)] = 0.0
_CLIP_LOW[channel_index("Covariance Condition")] = 1.0
_CLIP_HIGH[channel_index("RR Percent Valid")] = 100.0

_RR_CHANNELS = [channel_index(n) for n in (
    "Shannon Ent. RR", "Shannon Ent. RR Diffs", "RMSSD", "SDNN",
    "RR 80th Percentile", "RR 20th Percentile", "RR Median")]

ACTIVITY_PROFILES: dict[str, ActivityProfile] = {p.label: p for p in (
    _profile("Run", {"Heart Rate": 70, "RMSSD": -20, "SDNN": -20, "RR 80th Percentile": -300,
                     "RR 20th Percentile": -300, "RR Median": -300, "Step Count": 160,
                     "Log Energy": 3.0, "Jerk Autocorrelation Ratio": 0.3,
                     "Zero Crossing Average": -1.0, "Kurtosis": -1.0,
                     "Skin Conductance Value": 2.0, "Skin Temperature Value": -1.0,
                     "Altitude St.Dev. Norm": 0.05}),
    _profile("Walk", {"Heart Rate": 25, "Step Count": 100, "Log Energy": 1.5,
                      "RR 80th Percentile": -150, "RR 20th Percentile": -150,
                      "RR Median": -150, "Zero Crossing Average": 1.0,
                      "Jerk Autocorrelation Ratio": -0.3, "Kurtosis": 1.5,
                      "Skin Temperature Value": 1.0}),
    _profile("Outdoor Bike", {"Heart Rate": 45, "Altitude St.Dev. Norm": 0.3, "Log Energy": 0.8,
                              "RR 80th Percentile": -220, "RR 20th Percentile": -220,
                              "RR Median": -220, "Axis Mean": 0.05},
             {"Step Count": 0.1}),
    _profile("Weightlifting", {"Heart Rate": 30, "Kurtosis": 4.0, "Covariance Condition": 6.0,
                               "Jerk Autocorrelation Ratio": 0.5, "Skin Conductance Value": 1.0,
                               "RR Median": -120},
             {"Step Count": 0.3}),
    _profile("Swim", {"Heart Rate": 40, "Lead Contact Counts": -25,
                      "Skin Temperature Value": -4.0, "Skin Conductance Value": -1.5,
                      "Log Energy": 2.0, "RR Median": -200},
             {"Step Count": 0.0}),
    _profile("Yoga", {"Heart Rate": 8, "RMSSD": 10, "Log Energy": 0.4, "Kurtosis": 1.0,
                      "Covariance Condition": 2.0},
             {"Step Count": 0.2}),
    _profile("Hike", {"Heart Rate": 35, "Step Count": 80, "Altitude St.Dev. Norm": 0.4,
                      "Log Energy": 1.2, "RR Median": -180}),
    _profile("Elliptical", {"Heart Rate": 50, "Step Count": 120, "Log Energy": 1.2,
                            "Jerk Autocorrelation Ratio": -0.1, "Kurtosis": -1.5,
                            "RR Median": -250}),
    _profile("Sleep", {"Heart Rate": -10, "Log Energy": -1.5, "Sleep Coefficient": 10.0,
                       "Skin Temperature Value": 0.8, "RMSSD": 15, "RR Median": 100},
             {"Step Count": 0.0}),
)}

MOOD_LABELS = ("Frustrated", "Happy", "Calm", "Stressed", "Tired", "Energetic")


def synthesize_day(
    seed: int,
    schedule: Sequence[tuple[ActivityProfile, int, int]],
    moods: Sequence[tuple[str, int]] = (),
    person_id: int = 0,
    day_id: int = 0,
    gaps: bool = True,
) -> tuple[SensorDay, EventLog]:
    """Generate one labeled day; a pure function of its arguments.

    Every channel is a sinusoidal diurnal curve (trough at midnight) plus
    Gaussian noise. Each scheduled segment ``[start, end]`` (inclusive) is
    then modulated by its profile. With ``gaps`` set, an off-wrist block and
    sporadic RR dropouts are marked invalid.
    """
    for profile, start, end in schedule:
        if not 0 <= start <= end < N_MINUTES:
            raise ValueError(f"segment [{start}, {end}] for {profile.label!r} outside [0, 1440)")
    rng = np.random.default_rng(seed)
    t = np.arange(N_MINUTES)
    level, amp, noise = _BASELINE.T
    diurnal = np.sin(2.0 * np.pi * (t - 360) / N_MINUTES)
    x = level[:, None] + amp[:, None] * diurnal[None, :]
    x = x + noise[:, None] * rng.standard_normal((N_CHANNELS, N_MINUTES))
    for profile, start, end in schedule:
        seg = slice(start, end + 1)
        for ch, scale in profile.scales.items():
            x[ch, seg] *= scale
        for ch, offset in profile.offsets.items():
            x[ch, seg] += offset
    x = np.clip(x, _CLIP_LOW[:, None], _CLIP_HIGH[:, None])

    valid = np.ones((N_CHANNELS, N_MINUTES), dtype=bool)
    if gaps:
        if rng.random() < 0.5:
            length = int(rng.integers(30, 181))
            start = int(rng.integers(0, N_MINUTES - length))
            valid[:, start:start + length] = False
        valid[_RR_CHANNELS] &= rng.random((len(_RR_CHANNELS), N_MINUTES)) >= 0.05

    values = x.astype(np.float32)
    values[~valid] = np.nan
    day = SensorDay(person_id, day_id, values, valid)
    events = EventLog([(p.label, s, e) for p, s, e in schedule], list(moods))
    return day, events


def day_seed(global_seed: int, day_id: int) -> int:
    """Independent per-day seed derived from ``(global_seed, day_id)``."""
    return int(np.random.SeedSequence([global_seed, day_id]).generate_state(1, np.uint64)[0])


def random_schedule(
    rng: np.random.Generator, label: str, min_len: int = 120, max_len: int = 360
) -> tuple[list[tuple[ActivityProfile, int, int]], list[tuple[str, int]]]:
    """One ``label`` segment at a random time, plus zero to two mood entries."""
    profile = ACTIVITY_PROFILES[label]
    length = int(rng.integers(min_len, max_len + 1))
    start = int(rng.integers(60, N_MINUTES - 60 - length))
    schedule = [(profile, start, start + length - 1)]
    moods = [(MOOD_LABELS[int(rng.integers(len(MOOD_LABELS)))], int(rng.integers(N_MINUTES)))
             for _ in range(int(rng.integers(0, 3)))]
    moods.sort(key=lambda m: m[1])
    return schedule, moods


def build_dataset(
    classes: Sequence[str], days_per_class: int, seed: int, first_day_id: int = 0,
    people: int = 50,
) -> tuple[list[SensorDay], list[EventLog]]:
    """Synthesize ``len(classes) * days_per_class`` labeled days, class-interleaved.

    Days below the 20% validity inclusion threshold are dropped.
    """
    for label in classes:
        if label not in ACTIVITY_PROFILES:
            raise KeyError(f"unknown activity class {label!r}")
    days: list[SensorDay] = []
    logs: list[EventLog] = []
    day_id = first_day_id
    for _ in range(days_per_class):
        for label in classes:
            s = day_seed(seed, day_id)
            schedule, moods = random_schedule(np.random.default_rng(s + 1), label)
            day, events = synthesize_day(s, schedule, moods, person_id=day_id % people,
                                         day_id=day_id)
            day_id += 1
            if validity_fraction(day) < MIN_VALID_FRACTION:
                log.info("dropping day %d: validity below %.0f%%", day.day_id,
                         100 * MIN_VALID_FRACTION)
                continue
            days.append(day)
            logs.append(events)
    return days, logs


def validity_fraction(day: SensorDay) -> float:
    return float(day.valid.mean())


def compute_norm_stats(days: Iterable[SensorDay]) -> NormStats:
    """Per-channel mean and population std over valid entries."""
    days = list(days)
    if not days:
        raise ValueError("compute_norm_stats needs at least one day")
    values = np.stack([d.values for d in days]).astype(np.float64)
    valid = np.stack([d.valid for d in days])
    count = valid.sum(axis=(0, 2))
    filled = np.where(valid, values, 0.0)
    safe = np.maximum(count, 1)
    mean = filled.sum(axis=(0, 2)) / safe
    dev = np.where(valid, values - mean[None, :, None], 0.0)
    std = np.sqrt((dev * dev).sum(axis=(0, 2)) / safe)
    if np.any(count == 0):
        log.warning("channels without valid entries: %s", np.flatnonzero(count == 0).tolist())
    return NormStats(mean=mean, std=np.maximum(std, STD_FLOOR))


def normalize(day: SensorDay, stats: NormStats) -> SensorDay:
    """z-score valid entries; invalid entries become exactly 0."""
    z = (day.values.astype(np.float64) - stats.mean[:, None]) / stats.std[:, None]
    z = np.where(day.valid, z, 0.0)
    return SensorDay(day.person_id, day.day_id, z.astype(np.float32), day.valid.copy())


# --- persistence -----------------------------------------------------------

class DatasetFormatError(ValueError):
    pass


_HEADER = struct.Struct("<4sHIHH")  # magic, version, count, channels, minutes
_IDS = struct.Struct("<QQ")
_VALUES_BYTES = N_CHANNELS * N_MINUTES * 4
_MASK_BYTES = (N_CHANNELS * N_MINUTES + 7) // 8


def events_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".jsonl")


def write_dataset(days: Sequence[SensorDay], logs: Sequence[EventLog], path: str | Path) -> None:
    """Write the tensor file at ``path`` and the event log JSONL beside it."""
    if len(days) != len(logs):
        raise ValueError(f"{len(days)} days but {len(logs)} event logs")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(days), N_CHANNELS, N_MINUTES))
        for day in days:
            fh.write(_IDS.pack(day.person_id, day.day_id))
            fh.write(day.values.astype("<f4").tobytes(order="C"))
            fh.write(np.packbits(day.valid.ravel(), bitorder="little").tobytes())
    with open(events_path(path), "w", encoding="utf-8") as fh:
        for day, ev in zip(days, logs):
            rec = {
                "person_id": day.person_id,
                "day_id": day.day_id,
                "activities": [{"label": a, "start": s, "end": e} for a, s, e in ev.activities],
                "moods": [{"label": m, "minute": t} for m, t in ev.moods],
            }
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def read_dataset(path: str | Path) -> tuple[list[SensorDay], list[EventLog]]:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header")
    magic, version, count, channels, minutes = _HEADER.unpack_from(blob, 0)
    if magic != DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    if (channels, minutes) != (N_CHANNELS, N_MINUTES):
        raise DatasetFormatError(f"{path}: dims {(channels, minutes)} != (26, 1440)")
    record = _IDS.size + _VALUES_BYTES + _MASK_BYTES
    if len(blob) != _HEADER.size + count * record:
        raise DatasetFormatError(
            f"{path}: expected {count} records ({_HEADER.size + count * record} bytes), "
            f"found {len(blob)} bytes")
    days = []
    off = _HEADER.size
    for _ in range(count):
        pid, did = _IDS.unpack_from(blob, off)
        off += _IDS.size
        values = np.frombuffer(blob, dtype="<f4", count=N_CHANNELS * N_MINUTES, offset=off)
        off += _VALUES_BYTES
        bits = np.frombuffer(blob, dtype=np.uint8, count=_MASK_BYTES, offset=off)
        off += _MASK_BYTES
        valid = np.unpackbits(bits, bitorder="little")[: N_CHANNELS * N_MINUTES].astype(bool)
        days.append(SensorDay(pid, did, values.reshape(N_CHANNELS, N_MINUTES).astype(np.float32),
                              valid.reshape(N_CHANNELS, N_MINUTES)))

    logs = []
    with open(events_path(path), encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            day = days[len(logs)] if len(logs) < len(days) else None
            if day is None or (rec["person_id"], rec["day_id"]) != (day.person_id, day.day_id):
                raise DatasetFormatError(f"{events_path(path)}:{lineno}: event log out of step")
            logs.append(EventLog(
                [(a["label"], a["start"], a["end"]) for a in rec["activities"]],
                [(m["label"], m["minute"]) for m in rec["moods"]],
            ))
    if len(logs) != len(days):
        raise DatasetFormatError(f"{path}: {len(days)} days but {len(logs)} event records")
    return days, logs


def primary_label(events: EventLog) -> str | None:
    """Label of the longest activity in the day, used as the class label."""
    if not events.activities:
        return None
    return max(events.activities, key=lambda a: (a[2] - a[1], -a[1]))[0]
