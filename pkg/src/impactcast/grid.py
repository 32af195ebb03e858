"""Space/time discretisation, per-cell feature vectors and model windows."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from zoneinfo import ZoneInfo

import numpy as np

from . import ingest
from ._kernels import EARTH_RADIUS_KM, haversine_km

log = logging.getLogger(__name__)

INTERVAL = timedelta(hours=2)
DEFAULT_ALPHA = 75

WEATHER_GROUPS = {
    "clear": ("Clear", "Fair", "Fair / Windy"),
    "cloudy": ("Mostly Cloudy", "Scattered Clouds", "Partly Cloudy", "Overcast", "Cloudy",
               "Mostly Cloudy / Windy", "Partly Cloudy / Windy"),
    "rain": ("Light Rain", "Heavy Rain", "Rain", "Thunderstorm", "Light Drizzle",
             "Thunderstorms and Rain", "Light Rain with Thunder"),
    "fog": ("Haze", "Patches of Fog", "Fog", "Shallow Fog", "Mist"),
}
ACCIDENT_FEATURES = ("severity", "accident_count", "duration", "distance")
CONGESTION_FEATURES = ("congestion_count", "congestion_delay")


class GridError(ValueError):
    pass


class EmptyZoneSet(GridError):
    pass


@dataclass(frozen=True)
class GridSpec:
    """Bounding box (south-west origin, rows x cols cells) and time range."""

    origin_lat: float
    origin_lon: float
    rows: int
    cols: int
    epoch: datetime
    n_intervals: int
    edge_km: float = 5.0
    local_tz: str = "America/Los_Angeles"

    def to_json(self) -> dict:
        return {
            "origin_lat": self.origin_lat, "origin_lon": self.origin_lon, "rows": self.rows,
            "cols": self.cols, "epoch": self.epoch.isoformat(), "n_intervals": self.n_intervals,
            "edge_km": self.edge_km, "local_tz": self.local_tz,
        }

    @classmethod
    def from_json(cls, d: dict) -> "GridSpec":
        d = dict(d)
        d["epoch"] = ingest.parse_time(d["epoch"])
        return cls(**d)

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        north = (row + 0.5) * self.edge_km
        east = (col + 0.5) * self.edge_km
        lat = self.origin_lat + math.degrees(north / EARTH_RADIUS_KM)
        lon = self.origin_lon + math.degrees(east / (EARTH_RADIUS_KM * math.cos(math.radians(self.origin_lat))))
        return lat, lon

    @property
    def center(self) -> tuple[float, float]:
        return self.cell_center((self.rows - 1) / 2, (self.cols - 1) / 2)

    def interval_start(self, ordinal: int) -> datetime:
        return self.epoch + ordinal * INTERVAL


@dataclass(frozen=True, order=True)
class CellIndex:
    row: int
    col: int


def cell_of(lat: float, lon: float, origin: tuple[float, float], edge_km: float = 5.0,
            shape: tuple[int, int] | None = None) -> CellIndex:
    """Grid cell of a point under an equirectangular projection at the origin latitude."""
    lat0, lon0 = origin
    north = math.radians(lat - lat0) * EARTH_RADIUS_KM
    east = math.radians(lon - lon0) * EARTH_RADIUS_KM * math.cos(math.radians(lat0))
    row, col = math.floor(north / edge_km), math.floor(east / edge_km)
    if row < 0 or col < 0 or (shape is not None and (row >= shape[0] or col >= shape[1])):
        raise GridError(f"point ({lat}, {lon}) lies outside the grid")
    return CellIndex(row, col)


def interval_of(t: datetime, epoch: datetime, width: timedelta = INTERVAL) -> int:
    if t < epoch:
        raise GridError(f"{t.isoformat()} precedes epoch {epoch.isoformat()}")
    return int((t - epoch) // width)


@dataclass
class ZoneFilter:
    retained: list
    ratio_before: float
    ratio_after: float


def filter_sparse_zones(counts: dict, alpha: int = DEFAULT_ALPHA,
                        accident_intervals: dict | None = None,
                        n_intervals: int | None = None) -> ZoneFilter:
    """Keep zones with at least ``alpha`` accidents.

    With ``accident_intervals`` (zone -> number of intervals holding an
    accident) and ``n_intervals``, also reports the share of accident
    intervals before and after filtering.
    """
    retained = sorted(z for z, c in counts.items() if c >= alpha)
    if not retained:
        raise EmptyZoneSet(f"no zone reaches {alpha} accidents")
    before = after = float("nan")
    if accident_intervals is not None and n_intervals:
        before = sum(accident_intervals.get(z, 0) for z in counts) / (len(counts) * n_intervals)
        after = sum(accident_intervals.get(z, 0) for z in retained) / (len(retained) * n_intervals)
    return ZoneFilter(retained, before, after)


# --------------------------------------------------------------------------
# feature layout
# --------------------------------------------------------------------------

def feature_layout(weather_encoding: str = "grouped") -> tuple[list[str], dict[str, list[int]]]:
    """Ordered encoded feature names and their category index lists.

    ``grouped`` weather gives 35 features; ``full`` one-hots all 22
    conditions (53 features).
    """
    temporal = [f"dow_{d}" for d in range(7)] + ["part_of_day", "sunrise_sunset", "time_of_day"]
    if weather_encoding == "grouped":
        weather = [f"weather_{g}" for g in WEATHER_GROUPS]
    elif weather_encoding == "full":
        weather = [f"weather_{c.lower().replace(' / ', '_').replace(' ', '_')}" for c in ingest.WEATHER_CONDITIONS]
    else:
        raise ValueError(f"weather_encoding {weather_encoding!r}")
    spatial = ["lat", "lon"] + [f"poi_{k}" for k in ingest.POI_KINDS]
    groups = [("temporal", temporal), ("weather", weather), ("accident", list(ACCIDENT_FEATURES)),
              ("congestion", list(CONGESTION_FEATURES)), ("spatial", spatial)]
    names, cats = [], {}
    for cat, cols in groups:
        cats[cat] = list(range(len(names), len(names) + len(cols)))
        names += cols
    return names, cats


def _weather_onehot(condition: str | None, encoding: str) -> np.ndarray:
    if encoding == "grouped":
        out = np.zeros(len(WEATHER_GROUPS))
        for i, members in enumerate(WEATHER_GROUPS.values()):
            if condition in members:
                out[i] = 1.0
        return out
    out = np.zeros(len(ingest.WEATHER_CONDITIONS))
    if condition in ingest.WEATHER_CONDITIONS:
        out[ingest.WEATHER_CONDITIONS.index(condition)] = 1.0
    return out


def is_daylight(lat: float, lon: float, t: datetime) -> bool:
    """Sun above -0.833 deg (NOAA low-precision solar position)."""
    t = t.astimezone(timezone.utc)
    doy = t.timetuple().tm_yday
    hour = t.hour + t.minute / 60.0
    g = 2 * math.pi / 365.0 * (doy - 1 + (hour - 12) / 24.0)
    decl = (0.006918 - 0.399912 * math.cos(g) + 0.070257 * math.sin(g) - 0.006758 * math.cos(2 * g)
            + 0.000907 * math.sin(2 * g) - 0.002697 * math.cos(3 * g) + 0.00148 * math.sin(3 * g))
    eqtime = 229.18 * (0.000075 + 0.001868 * math.cos(g) - 0.032077 * math.sin(g)
                       - 0.014615 * math.cos(2 * g) - 0.040849 * math.sin(2 * g))
    solar_min = hour * 60 + eqtime + 4 * lon
    ha = math.radians(solar_min / 4 - 180)
    phi = math.radians(lat)
    cos_zen = math.sin(phi) * math.sin(decl) + math.cos(phi) * math.cos(decl) * math.cos(ha)
    return cos_zen > math.sin(math.radians(-0.833))


def temporal_features(t: datetime, lat: float, lon: float, local_tz: str) -> np.ndarray:
    local = t.astimezone(ZoneInfo(local_tz))
    dow = np.zeros(7)
    dow[local.weekday()] = 1.0
    hour = local.hour + local.minute / 60.0
    return np.concatenate([dow, [1.0 if 6 <= hour < 18 else 0.0,
                                 1.0 if is_daylight(lat, lon, t) else 0.0, hour / 24.0]])


# --------------------------------------------------------------------------
# assembly
# --------------------------------------------------------------------------

@dataclass
class Sources:
    """Cleaned inputs for assembly.

    ``accident_class`` maps accident id to its gamma class (1 or 2).
    """

    accidents: list
    congestion: list
    weather: list
    poi: list
    accident_class: dict[str, int] = field(default_factory=dict)
    stations: dict = field(default_factory=lambda: dict(ingest.STATIONS))


def _locate(spec: GridSpec, lat: float, lon: float, t: datetime):
    try:
        cell = cell_of(lat, lon, (spec.origin_lat, spec.origin_lon), spec.edge_km, (spec.rows, spec.cols))
        k = interval_of(t, spec.epoch)
    except GridError:
        return None
    if k >= spec.n_intervals:
        return None
    return cell, k


@dataclass
class _Binned:
    acc: dict  # (cell, k) -> list of accidents
    cong: dict  # (cell, k) -> list of congestion records
    counts: dict  # cell -> accident count
    acc_intervals: dict  # cell -> number of accident intervals
    dropped: int


def _bin_events(spec: GridSpec, src: Sources) -> _Binned:
    acc, cong, dropped = {}, {}, 0
    for a in src.accidents:
        loc = _locate(spec, a.start_lat, a.start_lon, a.start_time)
        if loc is None:
            dropped += 1
            continue
        acc.setdefault(loc, []).append(a)
    for c in src.congestion:
        loc = _locate(spec, c.lat, c.lon, c.time)
        if loc is not None:
            cong.setdefault(loc, []).append(c)
    counts, acc_intervals = {}, {}
    for (cell, _), rows in acc.items():
        counts[cell] = counts.get(cell, 0) + len(rows)
        acc_intervals[cell] = acc_intervals.get(cell, 0) + 1
    all_cells = [CellIndex(r, c) for r in range(spec.rows) for c in range(spec.cols)]
    for cell in all_cells:
        counts.setdefault(cell, 0)
    return _Binned(acc, cong, counts, acc_intervals, dropped)


class _WeatherLookup:
    def __init__(self, weather, stations):
        self.table = {(w.airport, w.time): w for w in weather}
        self.stations = stations

    def nearest_station(self, lat, lon) -> str:
        names = sorted(self.stations)
        d = [haversine_km(lat, lon, *self.stations[n]) for n in names]
        return names[int(np.argmin(d))]

    def condition(self, station: str, t: datetime) -> str | None:
        hour = t.astimezone(timezone.utc).replace(minute=0, second=0, microsecond=0)
        rec = self.table.get((station, hour))
        return None if rec is None else rec.condition


def _poi_counts(spec: GridSpec, poi) -> dict:
    out = {}
    for p in poi:
        try:
            cell = cell_of(p.lat, p.lon, (spec.origin_lat, spec.origin_lon), spec.edge_km, (spec.rows, spec.cols))
        except GridError:
            continue
        vec = out.setdefault(cell, np.zeros(len(ingest.POI_KINDS)))
        vec[ingest.POI_KINDS.index(p.kind)] += 1
    return out


def _vector(spec, cell, k, binned, weather, poi_counts, station, encoding, accident_class):
    """Encoded vector and gamma class for one (cell, interval)."""
    t = spec.interval_start(k)
    lat, lon = spec.cell_center(cell.row, cell.col)
    parts = [temporal_features(t, *spec.center, spec.local_tz),
             _weather_onehot(weather.condition(station, t), encoding)]
    accs = binned.acc.get((cell, k), [])
    gclass = 0
    if accs:
        parts.append(np.array([
            max(a.severity for a in accs), len(accs),
            float(np.mean([a.duration for a in accs])), float(np.mean([a.distance for a in accs])),
        ]))
        gclass = max(accident_class.get(a.id, 1) for a in accs)
    else:
        parts.append(np.zeros(4))
    congs = binned.cong.get((cell, k), [])
    parts.append(np.array([len(congs), float(sum(c.delay for c in congs if c.delay is not None))]))
    north = (lat - spec.origin_lat) / math.degrees(spec.rows * spec.edge_km / EARTH_RADIUS_KM)
    east = (lon - spec.origin_lon) / math.degrees(
        spec.cols * spec.edge_km / (EARTH_RADIUS_KM * math.cos(math.radians(spec.origin_lat))))
    parts.append(np.array([north, east]))
    parts.append(np.log1p(poi_counts.get(cell, np.zeros(len(ingest.POI_KINDS)))))
    return np.concatenate(parts), gclass


@dataclass
class CellIntervalVector:
    zone_index: int
    interval: int
    encoded: np.ndarray
    gamma_class: int


def assemble_vector(spec: GridSpec, zone: CellIndex, interval: int, src: Sources,
                    weather_encoding: str = "grouped", zone_index: int = -1) -> CellIntervalVector:
    """Feature vector for a single cell/interval (reference path; packs use :func:`assemble`)."""
    binned = _bin_events(spec, src)
    weather = _WeatherLookup(src.weather, src.stations)
    station = weather.nearest_station(*spec.cell_center(zone.row, zone.col))
    enc, g = _vector(spec, zone, interval, binned, weather, _poi_counts(spec, src.poi), station,
                     weather_encoding, src.accident_class)
    return CellIntervalVector(zone_index, interval, enc, g)


@dataclass
class Pack:
    """Dense (zone, interval, feature) tensor with labels and metadata."""

    features: np.ndarray  # (Z, T, F)
    labels: np.ndarray  # (Z, T) gamma class
    zones: list[CellIndex]
    spec: GridSpec
    feature_names: list[str]
    categories: dict[str, list[int]]
    meta: dict = field(default_factory=dict)

    @property
    def n_features(self) -> int:
        return self.features.shape[2]

    @property
    def train_end(self) -> int:
        """First interval ordinal of the test period."""
        return int(self.meta["train_end_interval"])


def assemble(spec: GridSpec, src: Sources, alpha: int = DEFAULT_ALPHA,
             weather_encoding: str = "grouped", train_end: datetime | None = None) -> Pack:
    """Build the full pack for every retained zone and every interval.

    Intervals without events are materialised with zero accident and
    congestion groups, so each zone's sequence is gapless.
    """
    binned = _bin_events(spec, src)
    filt = filter_sparse_zones(binned.counts, alpha, binned.acc_intervals, spec.n_intervals)
    zones = filt.retained
    names, cats = feature_layout(weather_encoding)
    weather = _WeatherLookup(src.weather, src.stations)
    poi_counts = _poi_counts(spec, src.poi)
    Z, T, F = len(zones), spec.n_intervals, len(names)
    feats = np.zeros((Z, T, F), dtype=np.float32)
    labels = np.zeros((Z, T), dtype=np.uint8)

    # temporal rows are shared by every zone, weather rows by zones of one station
    temporal = np.stack([temporal_features(spec.interval_start(k), *spec.center, spec.local_tz)
                         for k in range(T)])
    station_rows = {}
    tc, wc = cats["temporal"], cats["weather"]
    for zi, cell in enumerate(zones):
        lat, lon = spec.cell_center(cell.row, cell.col)
        station = weather.nearest_station(lat, lon)
        if station not in station_rows:
            station_rows[station] = np.stack([
                _weather_onehot(weather.condition(station, spec.interval_start(k)), weather_encoding)
                for k in range(T)])
        poi_vec = np.log1p(poi_counts.get(cell, np.zeros(len(ingest.POI_KINDS))))
        feats[zi, :, tc[0]:tc[-1] + 1] = temporal
        feats[zi, :, wc[0]:wc[-1] + 1] = station_rows[station]
        sp = cats["spatial"]
        north = (lat - spec.origin_lat) / math.degrees(spec.rows * spec.edge_km / EARTH_RADIUS_KM)
        east = (lon - spec.origin_lon) / math.degrees(
            spec.cols * spec.edge_km / (EARTH_RADIUS_KM * math.cos(math.radians(spec.origin_lat))))
        feats[zi, :, sp[0]] = north
        feats[zi, :, sp[1]] = east
        feats[zi, :, sp[2]:sp[-1] + 1] = poi_vec

    zindex = {cell: i for i, cell in enumerate(zones)}
    ac = cats["accident"]
    for (cell, k), accs in binned.acc.items():
        zi = zindex.get(cell)
        if zi is None:
            continue
        feats[zi, k, ac] = [max(a.severity for a in accs), len(accs),
                            float(np.mean([a.duration for a in accs])),
                            float(np.mean([a.distance for a in accs]))]
        labels[zi, k] = max(src.accident_class.get(a.id, 1) for a in accs)
    cc = cats["congestion"]
    for (cell, k), congs in binned.cong.items():
        zi = zindex.get(cell)
        if zi is None:
            continue
        feats[zi, k, cc] = [len(congs), float(sum(c.delay for c in congs if c.delay is not None))]

    train_end_k = spec.n_intervals if train_end is None else interval_of(train_end, spec.epoch)
    meta = {
        "alpha": alpha,
        "weather_encoding": weather_encoding,
        "train_end_interval": int(min(train_end_k, spec.n_intervals)),
        "ratio_before": filt.ratio_before,
        "ratio_after": filt.ratio_after,
        "accidents_outside_grid": binned.dropped,
        "zone_accident_counts": [int(binned.counts[z]) for z in zones],
    }
    log.info("pack: %d zones x %d intervals x %d features (accident-interval share %.4f -> %.4f)",
             Z, T, F, filt.ratio_before, filt.ratio_after)
    return Pack(feats, labels, zones, spec, names, cats, meta)


# --------------------------------------------------------------------------
# tensor pack on disk
# --------------------------------------------------------------------------

FEATURES_FILE = "features.f32"
LABELS_FILE = "labels.u8"
PACK_MANIFEST = "manifest.json"


def save_pack(pack: Pack, directory, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    pack.features.astype("<f4").tofile(directory / FEATURES_FILE)
    pack.labels.astype("u1").tofile(directory / LABELS_FILE)
    manifest = {
        "layout": "zone,interval,feature",
        "dtype": "<f4",
        "shape": list(pack.features.shape),
        "F": pack.n_features,
        "feature_names": pack.feature_names,
        "categories": pack.categories,
        "zones": [{"zone_index": i, "row": z.row, "col": z.col,
                   "lat": pack.spec.cell_center(z.row, z.col)[0],
                   "lon": pack.spec.cell_center(z.row, z.col)[1]} for i, z in enumerate(pack.zones)],
        "grid": pack.spec.to_json(),
        **pack.meta,
        **(extra or {}),
    }
    with open(directory / PACK_MANIFEST, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return directory


def load_pack(directory) -> Pack:
    directory = Path(directory)
    m = json.loads((directory / PACK_MANIFEST).read_text())
    Z, T, F = m["shape"]
    feats = np.fromfile(directory / FEATURES_FILE, dtype="<f4").reshape(Z, T, F)
    labels = np.fromfile(directory / LABELS_FILE, dtype="u1").reshape(Z, T)
    zones = [CellIndex(z["row"], z["col"]) for z in m["zones"]]
    meta = {k: v for k, v in m.items() if k not in ("zones", "grid", "feature_names", "categories")}
    return Pack(feats, labels, zones, GridSpec.from_json(m["grid"]), m["feature_names"], m["categories"], meta)


# --------------------------------------------------------------------------
# windows
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class WindowSample:
    zone_index: int
    sequence: np.ndarray  # (w, F)
    target_label: int
    target_gamma: int
    end: int  # ordinal T of the last input interval


@dataclass
class WindowSet:
    """All windows of a pack, held as index arrays.

    Sample ``n`` covers intervals ``end[n]-w+1 .. end[n]`` of zone
    ``zone[n]`` and targets interval ``end[n]+1``.
    """

    features: np.ndarray
    zone: np.ndarray
    end: np.ndarray
    target_gamma: np.ndarray
    w: int

    @property
    def target_label(self) -> np.ndarray:
        return (self.target_gamma > 0).astype(np.int64)

    def __len__(self) -> int:
        return self.zone.shape[0]

    def __getitem__(self, n: int) -> WindowSample:
        return WindowSample(int(self.zone[n]), self.sequences(np.array([n]))[0],
                            int(self.target_label[n]), int(self.target_gamma[n]), int(self.end[n]))

    def __iter__(self):
        return (self[n] for n in range(len(self)))

    def subset(self, idx) -> "WindowSet":
        idx = np.asarray(idx)
        return WindowSet(self.features, self.zone[idx], self.end[idx], self.target_gamma[idx], self.w)

    def sequences(self, idx=None) -> np.ndarray:
        """Materialise (n, w, F) float64 inputs."""
        zone = self.zone if idx is None else self.zone[idx]
        end = self.end if idx is None else self.end[idx]
        steps = end[:, None] + np.arange(-self.w + 1, 1)[None, :]
        return self.features[zone[:, None], steps].astype(np.float64)


def build_windows(features: np.ndarray, labels: np.ndarray, w: int) -> WindowSet:
    """One window per (zone, T) with ``w-1 <= T`` and ``T+1`` in range."""
    if w < 1:
        raise GridError("window length must be at least 1")
    Z, T = labels.shape
    if w > T:
        raise GridError(f"window {w} longer than the {T} intervals per zone")
    ends = np.arange(w - 1, T - 1)
    zone = np.repeat(np.arange(Z), ends.size)
    end = np.tile(ends, Z)
    return WindowSet(features, zone, end, labels[zone, end + 1].astype(np.int64), w)


def temporal_split(ws: WindowSet, boundary: int) -> tuple[WindowSet, WindowSet]:
    """Split by target interval: targets before ``boundary`` train, the rest test."""
    target = ws.end + 1
    return ws.subset(np.flatnonzero(target < boundary)), ws.subset(np.flatnonzero(target >= boundary))
