"""Visit-count datasets: CSV ingestion, splitting, normalization, windowing,
and the synthetic generator used for verification.

File formats:
  visits CSV    header ``poi_id,timestamp_utc,visits``; ISO-8601 hourly UTC
  metadata CSV  header ``poi_id,name,address,hours,phone,top_category,
                sub_category,latitude,longitude``
  synth spec    key=value lines; keys: n_pois, n_categories, days, clusters,
                noise, regime_shift_day
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ParseError, SchemaError

HOUR = timedelta(hours=1)

VISITS_HEADER = ["poi_id", "timestamp_utc", "visits"]
METADATA_HEADER = ["poi_id", "name", "address", "hours", "phone",
                   "top_category", "sub_category", "latitude", "longitude"]


def parse_timestamp(text: str) -> datetime:
    """ISO-8601 to an aware UTC datetime; must fall on a whole hour."""
    raw = text.strip()
    if raw.endswith("Z"):
        raw = raw[:-1] + "+00:00"
    try:
        ts = datetime.fromisoformat(raw)
    except ValueError as exc:
        raise ParseError(f"bad timestamp {text!r}: {exc}") from None
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    ts = ts.astimezone(timezone.utc)
    if ts.minute or ts.second or ts.microsecond:
        raise ParseError(f"timestamp {text!r} is not on a whole hour")
    return ts


def format_timestamp(ts: datetime) -> str:
    return ts.strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True)
class PoiMetadata:
    poi_id: str
    name: str
    address: str
    hours: str
    phone: str
    top_category: str
    sub_category: str
    latitude: float
    longitude: float

    def __post_init__(self):
        if not -90.0 <= self.latitude <= 90.0:
            raise SchemaError(f"poi {self.poi_id}: latitude {self.latitude} out of range")
        if not -180.0 <= self.longitude <= 180.0:
            raise SchemaError(f"poi {self.poi_id}: longitude {self.longitude} out of range")
        if not self.top_category:
            raise SchemaError(f"poi {self.poi_id}: empty top_category")


@dataclass
class VisitSeriesDataset:
    """Dense hourly visit counts, one row per POI.

    ``origin`` is the hour offset of column 0 inside the parent dataset;
    zero for a freshly loaded dataset, nonzero for split views so that
    baselines can address the full history.
    """
    poi_ids: list[str]
    start: datetime
    visits: np.ndarray  # (N, T_total), float64, >= 0
    origin: int = 0

    def __post_init__(self):
        self.visits = np.asarray(self.visits, dtype=np.float64)
        if self.visits.ndim != 2 or self.visits.shape[0] != len(self.poi_ids):
            raise SchemaError("visits matrix shape does not match poi_ids")
        if np.any(self.visits < 0):
            raise SchemaError("negative visit counts")

    @property
    def n_pois(self) -> int:
        return len(self.poi_ids)

    @property
    def n_hours(self) -> int:
        return self.visits.shape[1]

    @property
    def timestamps(self) -> list[datetime]:
        return [self.start + i * HOUR for i in range(self.n_hours)]

    def timestamp_at(self, i: int) -> datetime:
        return self.start + i * HOUR

    def index_of(self, ts: datetime) -> int:
        delta = ts - self.start
        hours = delta / HOUR
        idx = int(round(hours))
        if idx != hours or not 0 <= idx < self.n_hours:
            raise ConfigurationError(f"timestamp {ts} outside dataset range")
        return idx

    def slice_hours(self, start: int, stop: int) -> "VisitSeriesDataset":
        return VisitSeriesDataset(
            poi_ids=self.poi_ids,
            start=self.start + start * HOUR,
            visits=self.visits[:, start:stop],
            origin=self.origin + start)


@dataclass
class LoadReport:
    n_rows: int = 0
    missing_count: int = 0
    filled_cells: list[tuple[str, str]] = field(default_factory=list)


def load_visits_csv(path) -> tuple[VisitSeriesDataset, LoadReport]:
    """Read a visits CSV into a dense, gap-free dataset.

    Missing hours are filled with 0 and counted in the report; duplicate
    (poi_id, timestamp) pairs and non-monotone per-POI timestamps are
    schema errors.
    """
    per_poi: dict[str, dict[datetime, float]] = {}
    last_seen: dict[str, datetime] = {}
    t_min = t_max = None
    n_rows = 0
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != VISITS_HEADER:
            raise SchemaError(f"{path}: expected header {VISITS_HEADER}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(f"{path} line {lineno}: expected 3 fields, got {len(row)}")
            poi_id, ts_text, visits_text = row
            try:
                ts = parse_timestamp(ts_text)
            except ParseError as exc:
                raise ParseError(f"{path} line {lineno}: {exc}") from None
            try:
                count = float(visits_text)
            except ValueError:
                raise ParseError(
                    f"{path} line {lineno}: bad visit count {visits_text!r}") from None
            if count < 0 or not math.isfinite(count):
                raise SchemaError(f"{path} line {lineno}: invalid visit count {count}")
            series = per_poi.setdefault(poi_id, {})
            if ts in series:
                raise SchemaError(
                    f"{path} line {lineno}: duplicate entry for ({poi_id}, {ts_text})")
            prev = last_seen.get(poi_id)
            if prev is not None and ts <= prev:
                raise SchemaError(
                    f"{path} line {lineno}: non-monotone timestamps for {poi_id}")
            last_seen[poi_id] = ts
            series[ts] = count
            t_min = ts if t_min is None or ts < t_min else t_min
            t_max = ts if t_max is None or ts > t_max else t_max
            n_rows += 1
    if not per_poi:
        raise SchemaError(f"{path}: no data rows")

    n_hours = int((t_max - t_min) / HOUR) + 1
    poi_ids = list(per_poi)  # first-appearance order
    visits = np.zeros((len(poi_ids), n_hours))
    report = LoadReport(n_rows=n_rows)
    for i, poi_id in enumerate(poi_ids):
        series = per_poi[poi_id]
        for j in range(n_hours):
            ts = t_min + j * HOUR
            value = series.get(ts)
            if value is None:
                report.missing_count += 1
                report.filled_cells.append((poi_id, format_timestamp(ts)))
            else:
                visits[i, j] = value
    ds = VisitSeriesDataset(poi_ids=poi_ids, start=t_min, visits=visits)
    return ds, report


def write_visits_csv(path, ds: VisitSeriesDataset, fmt: str = "%.6g") -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(VISITS_HEADER)
        stamps = [format_timestamp(ts) for ts in ds.timestamps]
        for i, poi_id in enumerate(ds.poi_ids):
            for j, stamp in enumerate(stamps):
                writer.writerow([poi_id, stamp, fmt % ds.visits[i, j]])


def load_metadata_csv(path) -> list[PoiMetadata]:
    records = []
    seen = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != METADATA_HEADER:
            raise SchemaError(f"{path}: expected header {METADATA_HEADER}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(METADATA_HEADER):
                raise ParseError(
                    f"{path} line {lineno}: expected {len(METADATA_HEADER)} fields")
            try:
                lat, lon = float(row[7]), float(row[8])
            except ValueError:
                raise ParseError(f"{path} line {lineno}: bad coordinates") from None
            if row[0] in seen:
                raise SchemaError(f"{path} line {lineno}: duplicate poi_id {row[0]}")
            seen.add(row[0])
            records.append(PoiMetadata(*row[:7], latitude=lat, longitude=lon))
    return records


def write_metadata_csv(path, records: list[PoiMetadata]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METADATA_HEADER)
        for m in records:
            writer.writerow([m.poi_id, m.name, m.address, m.hours, m.phone,
                             m.top_category, m.sub_category,
                             f"{m.latitude:.6f}", f"{m.longitude:.6f}"])


# ---------------------------------------------------------------------------
# splitting / normalization / windowing
# ---------------------------------------------------------------------------

@dataclass
class DatasetSplits:
    train: VisitSeriesDataset
    val: VisitSeriesDataset
    test: VisitSeriesDataset
    empty: list[str] = field(default_factory=list)


def split_dataset(ds: VisitSeriesDataset, fractions=(0.70, 0.20, 0.10),
                  min_hours: int | None = None) -> DatasetSplits:
    """Chronological non-overlapping split along the time axis.

    A nonempty split shorter than ``min_hours`` (one window, when given)
    is a configuration error; zero-length splits are allowed but flagged.
    """
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"fractions must sum to 1, got {fractions}")
    n = ds.n_hours
    n_train = int(math.floor(n * fractions[0]))
    n_val = int(math.floor(n * fractions[1]))
    bounds = [0, n_train, n_train + n_val, n]
    parts = [ds.slice_hours(bounds[i], bounds[i + 1]) for i in range(3)]
    names = ["train", "val", "test"]
    empty = [name for name, part in zip(names, parts) if part.n_hours == 0]
    if min_hours is not None:
        for name, part in zip(names, parts):
            if 0 < part.n_hours < min_hours:
                raise ConfigurationError(
                    f"{name} split has {part.n_hours} hours; "
                    f"needs at least {min_hours} to host one window")
    return DatasetSplits(train=parts[0], val=parts[1], test=parts[2], empty=empty)


@dataclass
class NormalizationStats:
    """Per-series z-score statistics fitted on the training split only."""
    mean: np.ndarray
    std: np.ndarray
    floored: list[int] = field(default_factory=list)

    def take_rows(self, rows) -> "NormalizationStats":
        rows = np.asarray(rows)
        return NormalizationStats(self.mean[rows], self.std[rows],
                                  [i for i in self.floored if i in set(rows.tolist())])


def zscore_fit(train_values: np.ndarray) -> NormalizationStats:
    """Fit per-row mean/std; zero variance is floored to 1 and flagged."""
    values = np.asarray(train_values, dtype=np.float64)
    mean = values.mean(axis=1)
    std = values.std(axis=1)
    floored = [int(i) for i in np.flatnonzero(std == 0.0)]
    std = np.where(std == 0.0, 1.0, std)
    return NormalizationStats(mean=mean, std=std, floored=floored)


def zscore_apply(values: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    return (values - stats.mean[:, None]) / stats.std[:, None]


def zscore_invert(values: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    return values * stats.std[:, None] + stats.mean[:, None]


@dataclass
class WindowSample:
    """One training/evaluation sample: T input hours and the next H hours."""
    input: np.ndarray      # (N, T) view
    target: np.ndarray     # (N, H) view
    window_start: datetime
    start_index: int       # global hour index of the first input column


def window_count(length: int, window: int, horizon: int, stride: int) -> int:
    if length < window + horizon:
        raise ConfigurationError(
            f"split of {length} hours cannot host a {window}+{horizon} window")
    return (length - window - horizon) // stride + 1


def make_windows(split: VisitSeriesDataset, window: int = 24, horizon: int = 6,
                 stride: int = 1) -> list[WindowSample]:
    """Enumerate all (input, target) windows of a split, oldest first."""
    count = window_count(split.n_hours, window, horizon, stride)
    samples = []
    for w in range(count):
        s = w * stride
        samples.append(WindowSample(
            input=split.visits[:, s:s + window],
            target=split.visits[:, s + window:s + window + horizon],
            window_start=split.timestamp_at(s),
            start_index=split.origin + s))
    return samples


# ---------------------------------------------------------------------------
# synthetic data generator
# ---------------------------------------------------------------------------

@dataclass
class SynthSpec:
    """Parameters of the synthetic benchmark generator.

    ``noise`` gates all stochastic structure: with noise=0 the series are
    exact weekly-periodic category patterns scaled per POI (no event bumps,
    no sampling noise).  ``regime_shift_day`` <= 0 disables the shift.
    """
    n_pois: int = 40
    n_categories: int = 8
    days: int = 90
    clusters: int = 4
    noise: float = 0.3
    regime_shift_day: int = 45

    def validate(self) -> None:
        if self.n_pois < 1 or self.n_categories < 1 or self.days < 1:
            raise ConfigurationError("n_pois, n_categories, and days must be positive")
        if self.n_categories > self.n_pois:
            raise ConfigurationError("more categories than POIs")
        if self.clusters < 1 or self.clusters > self.n_pois:
            raise ConfigurationError("clusters must be in [1, n_pois]")
        if self.noise < 0:
            raise ConfigurationError("noise must be >= 0")


SYNTH_KEYS = [f.name for f in fields(SynthSpec)]


def parse_synth_spec(path) -> SynthSpec:
    """Parse a key=value spec file; unknown keys are configuration errors."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ParseError(f"{path} line {lineno}: expected key=value")
        key, _, raw = text.partition("=")
        key = key.strip()
        if key not in SYNTH_KEYS:
            raise ConfigurationError(
                f"{path} line {lineno}: unknown key {key!r}; valid keys: "
                + ", ".join(SYNTH_KEYS))
        try:
            values[key] = float(raw.strip()) if key == "noise" else int(raw.strip())
        except ValueError:
            raise ParseError(f"{path} line {lineno}: bad value for {key}") from None
    spec = SynthSpec(**values)
    spec.validate()
    return spec


def format_synth_spec(spec: SynthSpec) -> str:
    return "".join(f"{k}={getattr(spec, k)}\n" for k in SYNTH_KEYS)


_CATEGORY_NAMES = [
    "Restaurants", "Grocery Stores", "Gas Stations", "Fitness Centers",
    "Pharmacies", "Coffee Shops", "Schools", "Museums", "Hardware Stores",
    "Hotels", "Banks", "Parks", "Theaters", "Libraries", "Bakeries",
    "Salons",
]

_SUB_CATEGORIES = {
    "Restaurants": ["Full-Service Restaurants", "Fast Food"],
    "Grocery Stores": ["Supermarkets", "Convenience Stores"],
    "Gas Stations": ["Gasoline Stations", "Truck Stops"],
    "Fitness Centers": ["Gyms", "Yoga Studios"],
    "Pharmacies": ["Drug Stores", "Compounding Pharmacies"],
    "Coffee Shops": ["Espresso Bars", "Cafes"],
    "Schools": ["Elementary Schools", "High Schools"],
    "Museums": ["Art Museums", "History Museums"],
}

_STREETS = ["Maple St", "Harbor Ave", "Sunset Blvd", "Granite Rd",
            "Willow Ln", "Market St", "Cedar Ave", "Lakeview Dr"]

_HOURS_VARIANTS = [
    "Monday - Friday: 8:00 - 20:00, Saturday 9:00 - 18:00, and closed on Sunday",
    "Monday - Sunday: 7:00 - 22:00",
    "Monday - Friday: 10:00 - 19:00, Saturday 10:00 - 17:00, and closed on Sunday",
    "Monday - Saturday: 6:00 - 23:00, Sunday 8:00 - 20:00",
]

WEEK_HOURS = 168


def _category_pattern(rng: np.random.Generator, n_hours: int) -> np.ndarray:
    """Strictly positive weekly-periodic base pattern (daily + weekly harmonics).

    One week is evaluated and tiled so periodicity is bit-exact, which keeps
    lookback baselines exactly correct on noiseless data.
    """
    level = rng.uniform(25.0, 60.0)
    a1 = rng.uniform(0.30, 0.50)
    a2 = rng.uniform(0.10, 0.25)
    b1 = rng.uniform(0.04, 0.10)
    ph1 = rng.uniform(0.0, 24.0)
    ph2 = rng.uniform(0.0, 24.0)
    phw = rng.uniform(0.0, WEEK_HOURS)
    t = np.arange(WEEK_HOURS, dtype=np.float64)
    shape = (1.0
             + a1 * np.sin(2 * np.pi * (t - ph1) / 24.0)
             + a2 * np.sin(4 * np.pi * (t - ph2) / 24.0)
             + b1 * np.sin(2 * np.pi * (t - phw) / WEEK_HOURS))
    week = level * np.clip(shape, 0.25, None)
    reps = -(-n_hours // WEEK_HOURS)
    return np.tile(week, reps)[:n_hours]


def _cluster_bumps(rng: np.random.Generator, n_hours: int) -> np.ndarray:
    """Irregular multi-hour events with slow raised-cosine ramps.

    Events are not weekly periodic, so lookback baselines mispredict them,
    while a window-reading model can extrapolate an event in progress.
    """
    bumps = np.zeros(n_hours)
    t = float(rng.exponential(60.0)) + 24.0
    while t < n_hours:
        duration = rng.uniform(8.0, 16.0)
        magnitude = rng.uniform(0.6, 1.2)
        start, stop = int(t), min(int(t + duration), n_hours)
        tau = np.arange(start, stop, dtype=np.float64) - t
        bumps[start:stop] += magnitude * 0.5 * (1 - np.cos(2 * np.pi * tau / duration))
        t += duration + float(rng.exponential(60.0))
    return bumps


def generate_synthetic(spec: SynthSpec, seed: int) -> tuple[VisitSeriesDataset, list[PoiMetadata]]:
    """Deterministic synthetic benchmark with category, spatial, and event structure."""
    spec.validate()
    rng = np.random.default_rng(seed)
    n_hours = spec.days * 24
    n, k, c = spec.n_pois, spec.n_categories, spec.clusters

    categories = [_CATEGORY_NAMES[i] if i < len(_CATEGORY_NAMES) else f"Category {i}"
                  for i in range(k)]
    patterns = np.stack([_category_pattern(rng, n_hours) for _ in range(k)])
    bumps = (np.stack([_cluster_bumps(rng, n_hours) for _ in range(c)])
             if spec.noise > 0 else np.zeros((c, n_hours)))

    # decoupled assignments: category cycles, cluster is contiguous blocks
    cat_of = np.arange(n) % k
    cluster_of = np.minimum(np.arange(n) * c // n, c - 1)

    amp = rng.uniform(0.6, 1.4, size=n)
    bump_gain = rng.uniform(0.5, 1.5, size=n)
    shift_factor = (rng.uniform(0.6, 1.5, size=n)
                    if spec.regime_shift_day > 0 else np.ones(n))

    visits = np.zeros((n, n_hours))
    shift_hour = spec.regime_shift_day * 24
    for i in range(n):
        base = amp[i] * patterns[cat_of[i]]
        if 0 < shift_hour < n_hours:
            base = base.copy()
            base[shift_hour:] *= shift_factor[i]
        series = base + bump_gain[i] * patterns[cat_of[i]].mean() * bumps[cluster_of[i]]
        if spec.noise > 0:
            series = series + spec.noise * np.sqrt(series + 1.0) * rng.standard_normal(n_hours)
        visits[i] = np.maximum(series, 0.0)

    center_lat, center_lon = 29.75, -95.36
    angles = 2 * np.pi * np.arange(c) / c
    cluster_lat = center_lat + 0.04 * np.cos(angles)
    cluster_lon = center_lon + 0.04 * np.sin(angles)
    jitter = rng.uniform(-0.004, 0.004, size=(n, 2))

    metadata = []
    poi_ids = []
    for i in range(n):
        cat = categories[cat_of[i]]
        singular = cat[:-1] if cat.endswith("s") else cat
        subs = _SUB_CATEGORIES.get(cat, [f"General {cat}"])
        poi_id = f"poi_{i:04d}"
        poi_ids.append(poi_id)
        street = _STREETS[cluster_of[i] % len(_STREETS)]
        metadata.append(PoiMetadata(
            poi_id=poi_id,
            name=f"{singular} {i:02d}",
            address=f"{100 + 7 * i} {street}",
            hours=_HOURS_VARIANTS[i % len(_HOURS_VARIANTS)],
            phone=f"(713)555-{1000 + i:04d}",
            top_category=cat,
            sub_category=subs[i % len(subs)],
            latitude=float(cluster_lat[cluster_of[i]] + jitter[i, 0]),
            longitude=float(cluster_lon[cluster_of[i]] + jitter[i, 1]),
        ))

    ds = VisitSeriesDataset(
        poi_ids=poi_ids,
        start=datetime(2019, 1, 1, tzinfo=timezone.utc),  # a Tuesday, 00:00 UTC
        visits=visits)
    return ds, metadata
