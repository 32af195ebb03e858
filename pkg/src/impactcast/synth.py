"""Seeded generator of the four input tables with planted, recoverable structure.

Zones get an accident rate and an impact type. Accidents are Poisson per
2-hour interval with a rush-hour profile; high-impact zones produce higher
severities and longer affected distances, so the delay law separates the
two gamma classes by zone. Durations share one log-normal law. Every latent
truth (delays, gamma classes, per-interval labels, planted duplicates) is
written to ``truth.json``.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field
from datetime import date, datetime, timedelta, timezone
from pathlib import Path
from zoneinfo import ZoneInfo

import numpy as np

from . import grid, ingest
from ._kernels import EARTH_RADIUS_KM
from .ingest import AccidentRecord, CongestionRecord, PoiRecord, WeatherRecord

log = logging.getLogger(__name__)

# relative accident intensity per 2-hour slot of the local day (00-02, 02-04, ...)
RUSH_PROFILE = (0.15, 0.1, 0.25, 1.7, 1.4, 0.9, 1.0, 1.2, 2.0, 1.7, 0.9, 0.4)

ROADS = ("San Diego Fwy", "Harbor Fwy", "Colorado Blvd", "Ventura Fwy", "Santa Monica Blvd",
         "Verdugo Rd", "Sunset Blvd", "Golden State Fwy", "Pacific Coast Hwy", "Glendale Fwy")
DIRECTIONS = ("Northbound", "Southbound", "Eastbound", "Westbound")
SPEED_WORDS = ("five", "ten", "fifteen", "20", "25", "30")
TEMPLATES = (
    "Delays of {n} {u} on {road} {dir} in LA. Average speed {s} mph.",
    "Severe delays of {n} {u} on {road} {dir} between {a} and {b}. Average speed {s} mph.",
    "Delays increasing and delays of {n} {u} on {road} {dir}. Average speed {s} mph.",
    "Stationary traffic on {road} {dir}. {N} {u1} delay. Average speed {s} mph.",
)
NO_DELAY_TEMPLATE = "Slow traffic on {road} {dir}. Average speed {s} mph."
WEATHER_SPIKE = 45.0

FILES = {"accident": "accidents.csv", "congestion": "congestion.csv", "weather": "weather.csv", "poi": "poi.csv"}
TRUTH_FILE = "truth.json"
GRID_FILE = "grid.json"
CONFIG_FILE = "synth_config.json"


class SynthError(ValueError):
    pass


@dataclass
class SynthConfig:
    seed: int = 42
    origin_lat: float = 33.85
    origin_lon: float = -118.55
    rows: int = 8
    cols: int = 8
    edge_km: float = 5.0
    start: str = "2019-02-01"
    end: str = "2019-08-01"
    train_end: str = "2019-06-01"
    local_tz: str = "America/Los_Angeles"
    # explicit per-zone mean accidents per interval (row-major); generated when None
    zone_rates: list[float] | None = None
    sparse_fraction: float = 0.375
    sparse_rate: tuple[float, float] = (0.0, 0.02)
    busy_rate: tuple[float, float] = (0.04, 0.14)
    high_impact_fraction: float = 0.5
    rush_profile: tuple[float, ...] = RUSH_PROFILE
    duration_mu: float = 3.4
    duration_sigma: float = 0.6
    delay_a: float = 0.25
    delay_b: float = 4.0
    delay_c: tuple[float, float, float, float] = (0.0, 3.0, 10.0, 16.0)
    delay_noise: float = 1.0
    n_congestion: int = 6000
    no_delay_fraction: float = 0.01
    n_duplicates: int = 25
    weather_missing: float = 0.01
    weather_spikes: int = 3
    poi_rate: float = 3.0
    alpha: int = grid.DEFAULT_ALPHA
    severity_low: tuple[float, float, float, float] = (0.55, 0.4, 0.05, 0.0)
    severity_high: tuple[float, float, float, float] = (0.0, 0.1, 0.5, 0.4)
    distance_low: float = 0.3
    distance_high: float = 2.0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_json(cls, d: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise SynthError(f"unknown synth config keys {sorted(unknown)}")
        d = dict(d)
        for k in ("sparse_rate", "busy_rate", "rush_profile", "delay_c", "severity_low", "severity_high"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "SynthConfig":
        return cls.from_json(json.loads(Path(path).read_text()))

    # ---- derived quantities
    @property
    def epoch(self) -> datetime:
        return _local_midnight(self.start, self.local_tz)

    @property
    def end_time(self) -> datetime:
        return _local_midnight(self.end, self.local_tz)

    @property
    def train_end_time(self) -> datetime:
        return _local_midnight(self.train_end, self.local_tz)

    @property
    def n_intervals(self) -> int:
        return int((self.end_time - self.epoch) // grid.INTERVAL)

    def grid_spec(self) -> grid.GridSpec:
        return grid.GridSpec(self.origin_lat, self.origin_lon, self.rows, self.cols, self.epoch,
                             self.n_intervals, self.edge_km, self.local_tz)

    def validate(self) -> None:
        if self.rows < 1 or self.cols < 1 or self.edge_km <= 0:
            raise SynthError("grid must have positive extent")
        if self.n_intervals < 2:
            raise SynthError("date range shorter than two intervals")
        if not self.epoch < self.train_end_time < self.end_time:
            raise SynthError("train_end must fall strictly inside the date range")
        if self.zone_rates is not None and len(self.zone_rates) != self.rows * self.cols:
            raise SynthError("zone_rates needs rows*cols entries")
        rates = [*(self.zone_rates or []), *self.sparse_rate, *self.busy_rate]
        if any(r < 0 for r in rates):
            raise SynthError("accident rates must be non-negative")
        if self.delay_noise < 0 or self.duration_sigma < 0:
            raise SynthError("noise scales must be non-negative")
        if len(self.rush_profile) != 12 or any(p < 0 for p in self.rush_profile):
            raise SynthError("rush_profile needs 12 non-negative slot weights")
        for name in ("severity_low", "severity_high"):
            p = getattr(self, name)
            if len(p) != 4 or any(v < 0 for v in p) or abs(sum(p) - 1) > 1e-9:
                raise SynthError(f"{name} must be a probability vector over severities 1-4")
        if self.n_congestion < 0 or self.n_duplicates < 0 or not 0 <= self.weather_missing < 0.5:
            raise SynthError("counts must be non-negative and weather_missing below 0.5")


def _local_midnight(day: str, tz: str) -> datetime:
    d = date.fromisoformat(day)
    return datetime(d.year, d.month, d.day, tzinfo=ZoneInfo(tz)).astimezone(timezone.utc)


class _Streams:
    """Named RNG streams derived from one seed."""

    def __init__(self, seed: int):
        self.seed = seed

    def __call__(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, zlib.crc32(name.encode())])


def _point(cfg: SynthConfig, row: int, col: int, u: float, v: float) -> tuple[float, float]:
    north = (row + v) * cfg.edge_km
    east = (col + u) * cfg.edge_km
    lat = cfg.origin_lat + math.degrees(north / EARTH_RADIUS_KM)
    lon = cfg.origin_lon + math.degrees(east / (EARTH_RADIUS_KM * math.cos(math.radians(cfg.origin_lat))))
    return round(lat, 6), round(lon, 6)


def delay_law(cfg: SynthConfig, severity, duration, distance):
    sev = np.asarray(severity)
    c = np.asarray(cfg.delay_c)[sev - 1]
    return cfg.delay_a * np.asarray(duration, float) + cfg.delay_b * np.asarray(distance, float) + c


def _number_text(n: int, words: bool) -> str:
    if not words or n > 99:
        return str(n)
    if n < 20 or n % 10 == 0:
        return next(w for w, v in ingest.NUMBER_WORDS.items() if v == n and "-" not in w and " " not in w)
    tens = next(w for w, v in ingest.NUMBER_WORDS.items() if v == n - n % 10)
    unit = next(w for w, v in ingest.NUMBER_WORDS.items() if v == n % 10 and len(w.split()) == 1 and "-" not in w)
    return f"{tens}-{unit}"


def describe(delay: int, rng: np.random.Generator) -> str:
    words = bool(rng.random() < 0.5)
    n = _number_text(delay, words)
    tpl = TEMPLATES[int(rng.integers(len(TEMPLATES)))]
    road, d = ROADS[int(rng.integers(len(ROADS)))], DIRECTIONS[int(rng.integers(len(DIRECTIONS)))]
    a, b = ROADS[int(rng.integers(len(ROADS)))], ROADS[int(rng.integers(len(ROADS)))]
    return tpl.format(n=n, N=n[:1].upper() + n[1:], u="minute" if delay == 1 else "minutes", u1="minute",
                      road=road, dir=d, a=a, b=b, s=SPEED_WORDS[int(rng.integers(len(SPEED_WORDS)))])


# --------------------------------------------------------------------------
# generators
# --------------------------------------------------------------------------

def _zones(cfg: SynthConfig, rng) -> tuple[np.ndarray, np.ndarray]:
    Z = cfg.rows * cfg.cols
    if cfg.zone_rates is not None:
        rates = np.asarray(cfg.zone_rates, dtype=float)
    else:
        order = rng.permutation(Z)
        n_sparse = int(round(cfg.sparse_fraction * Z))
        rates = np.empty(Z)
        rates[order[:n_sparse]] = rng.uniform(*cfg.sparse_rate, n_sparse)
        rates[order[n_sparse:]] = rng.uniform(*cfg.busy_rate, Z - n_sparse)
    high = np.zeros(Z, dtype=bool)
    high[rng.permutation(Z)[:int(round(cfg.high_impact_fraction * Z))]] = True
    return rates, high


def _slot_weights(cfg: SynthConfig) -> np.ndarray:
    prof = np.asarray(cfg.rush_profile, float)
    prof = prof / prof.mean() if prof.mean() > 0 else prof
    spec = cfg.grid_spec()
    tz = ZoneInfo(cfg.local_tz)
    slots = [spec.interval_start(k).astimezone(tz).hour // 2 for k in range(spec.n_intervals)]
    return prof[np.array(slots)]


def _accidents(cfg, streams, rates, high):
    rng = streams("accidents")
    spec = cfg.grid_spec()
    lam = rates[:, None] * _slot_weights(cfg)[None, :]
    counts = rng.poisson(lam)
    width = grid.INTERVAL.total_seconds()
    out = []
    for z in range(counts.shape[0]):
        row, col = divmod(z, cfg.cols)
        is_high = bool(high[z])
        sev_p = cfg.severity_high if is_high else cfg.severity_low
        dist_mean = cfg.distance_high if is_high else cfg.distance_low
        poi_p = 0.35 if is_high else 0.1
        rows = []
        for k in np.flatnonzero(counts[z]):
            for _ in range(int(counts[z, k])):
                start = spec.interval_start(int(k)) + timedelta(seconds=int(rng.integers(0, int(width))))
                dur = max(60, int(round(60 * rng.lognormal(cfg.duration_mu, cfg.duration_sigma))))
                lat, lon = _point(cfg, row, col, *rng.uniform(0.02, 0.98, 2))
                rows.append(dict(
                    zone=z, k=int(k), start=start, dur=dur, lat=lat, lon=lon,
                    sev=int(rng.choice(4, p=sev_p)) + 1,
                    dist=round(float(rng.exponential(dist_mean)), 2),
                    street=int(rng.integers(8)),
                    poi=tuple(bool(b) for b in rng.random(len(ingest.POI_KINDS)) < poi_p),
                ))
        rows.sort(key=lambda r: r["start"])
        # no two natural reports on one street within the dedup window
        for i, r in enumerate(rows):
            j = i - 1
            while j >= 0 and (r["start"] - rows[j]["start"]).total_seconds() <= 2 * ingest.DEDUP_MAX_SECONDS:
                if rows[j]["street"] == r["street"]:
                    r["street"] = (r["street"] + 1) % 8
                    j = i - 1
                    continue
                j -= 1
        out.extend(rows)
    out.sort(key=lambda r: (r["start"], r["zone"]))
    records = []
    for n, r in enumerate(out):
        daypart = "Day" if grid.is_daylight(r["lat"], r["lon"], r["start"]) else "Night"
        records.append(AccidentRecord(
            f"A-{n + 1:06d}", r["sev"], r["start"], r["start"] + timedelta(seconds=r["dur"]), r["lat"], r["lon"],
            r["dist"], f"Street {r['zone']}-{r['street']}", cfg.local_tz, r["poi"], (daypart,) * 4))
    return records, [(r["zone"], r["k"]) for r in out]


def _duplicates(cfg, streams, accidents):
    rng = streams("duplicates")
    if not accidents or cfg.n_duplicates == 0:
        return []
    pick = np.sort(rng.choice(len(accidents), min(cfg.n_duplicates, len(accidents)), replace=False))
    dups = []
    for j, i in enumerate(pick):
        a = accidents[i]
        shift = timedelta(seconds=int(rng.integers(1, 240)))
        dups.append(AccidentRecord(
            f"A-dup{j + 1:04d}", a.severity, a.start_time + shift, a.end_time + shift,
            round(a.start_lat + 0.0003, 6), a.start_lon, a.distance, a.street, a.tz, a.poi, a.daypart))
    return dups


def _congestion(cfg, streams):
    rng = streams("congestion")
    spec = cfg.grid_spec()
    total = (cfg.end_time - cfg.epoch).total_seconds()
    recs, delays = [], []
    words = sorted(ingest.CONGESTION_SEVERITY_WORDS, key=ingest.CONGESTION_SEVERITY_WORDS.get)
    times = np.sort(rng.uniform(0, total, cfg.n_congestion).astype(np.int64))
    for n, t in enumerate(times):
        sev = int(rng.integers(1, 5))
        dur = 4 * int(rng.integers(1, 46))
        dist = 0.25 * int(rng.integers(0, 17))
        row, col = int(rng.integers(cfg.rows)), int(rng.integers(cfg.cols))
        lat, lon = _point(cfg, row, col, *rng.uniform(0.02, 0.98, 2))
        noise = rng.normal(0.0, cfg.delay_noise) if cfg.delay_noise > 0 else 0.0
        delay = max(0, int(round(float(delay_law(cfg, sev, dur, dist)) + noise)))
        if rng.random() < cfg.no_delay_fraction:
            text = NO_DELAY_TEMPLATE.format(road=ROADS[n % len(ROADS)], dir=DIRECTIONS[n % 4],
                                            s=SPEED_WORDS[n % len(SPEED_WORDS)])
            delay = None
        else:
            text = describe(delay, rng)
        recs.append(CongestionRecord(f"C-{n + 1:06d}", sev, spec.epoch + timedelta(seconds=int(t)), float(dur),
                                     lat, lon, dist, text, cfg.local_tz))
        delays.append(delay)
    return recs, words, delays


def _weather(cfg, streams):
    rng = streams("weather")
    hours = int((cfg.end_time - cfg.epoch).total_seconds() // 3600)
    t = np.arange(hours)
    doy = t / 24.0
    out, spikes = [], []
    for si, station in enumerate(sorted(ingest.STATIONS)):
        srng = streams(f"weather/{station}")
        phase = srng.uniform(0, 2 * np.pi, 3)
        # smooth latent series: seasonal + diurnal + slow weather systems
        season = np.sin(2 * np.pi * (doy + 30) / 365.0)
        diurnal = np.sin(2 * np.pi * (t % 24 - 9) / 24.0)
        systems = np.sin(2 * np.pi * doy / 9.0 + phase[0]) + 0.5 * np.sin(2 * np.pi * doy / 3.7 + phase[1])
        temp = 62 + 10 * season + 7 * diurnal - 2 * si + 1.5 * systems + srng.normal(0, 0.8, hours)
        hum = np.clip(60 - 15 * diurnal + 12 * systems + srng.normal(0, 3, hours), 5, 100)
        wet = systems + 0.6 * np.sin(2 * np.pi * doy / 1.3 + phase[2]) - 1.0
        precip = np.where(wet > 0.35, np.round(0.05 * (wet - 0.35) * 4, 2), 0.0)
        vis = np.clip(10 - 6 * np.maximum(hum - 85, 0) / 15 - 20 * precip, 0.5, 10)
        wind = np.abs(6 + 4 * diurnal + 3 * systems + srng.normal(0, 1.5, hours))
        for h in range(hours):
            if precip[h] > 0:
                cond = "Heavy Rain" if precip[h] > 0.08 else ("Rain" if precip[h] > 0.03 else "Light Rain")
            elif vis[h] < 4:
                cond = "Fog" if vis[h] < 2 else "Haze"
            elif wet[h] > -0.1:
                cond = "Mostly Cloudy" if wet[h] > 0.15 else "Partly Cloudy"
            else:
                cond = "Clear" if wet[h] < -0.8 else "Fair"
            vals = dict(
                temperature=round(float(temp[h]), 1), wind_chill=round(float(temp[h] - 0.3 * wind[h]), 1),
                humidity=round(float(hum[h]), 1), pressure=round(float(29.95 + 0.1 * systems[h]), 2),
                visibility=round(float(vis[h]), 1), wind_speed=round(float(wind[h]), 1),
                precipitation=float(precip[h]),
                wind_direction=ingest.WIND_DIRECTIONS[int((phase[0] * 3 + doy[h] / 2) % len(ingest.WIND_DIRECTIONS))],
                condition=cond,
            )
            for name in vals:
                if rng.random() < cfg.weather_missing:
                    vals[name] = None
            out.append(WeatherRecord(station, cfg.epoch.replace(minute=0) + timedelta(hours=h), **vals))
    # planted spikes for outlier clipping
    idx = rng.choice(len(out), cfg.weather_spikes, replace=False) if out else []
    for i in sorted(int(i) for i in idx):
        r = out[i]
        if r.temperature is None:
            continue
        out[i] = WeatherRecord(**{**asdict(r), "temperature": round(r.temperature + WEATHER_SPIKE, 1)})
        spikes.append({"airport": r.airport, "time": r.time.isoformat(), "temperature": out[i].temperature})
    return out, spikes


def _poi(cfg, streams, high):
    rng = streams("poi")
    out = []
    for z in range(cfg.rows * cfg.cols):
        row, col = divmod(z, cfg.cols)
        scale = 3.0 if high[z] else 1.0
        for kind in ingest.POI_KINDS:
            for _ in range(int(rng.poisson(cfg.poi_rate * scale))):
                out.append(PoiRecord(*_point(cfg, row, col, *rng.uniform(0.02, 0.98, 2)), kind))
    return out


# --------------------------------------------------------------------------
# driver
# --------------------------------------------------------------------------

@dataclass
class SynthOutput:
    directory: Path
    accidents: list
    congestion: list
    weather: list
    poi: list
    truth: dict


def generate(cfg: SynthConfig, out_dir) -> SynthOutput:
    """Write the four CSVs, ``grid.json``, the config and ``truth.json`` into ``out_dir``."""
    cfg.validate()
    streams = _Streams(cfg.seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rates, high = _zones(cfg, streams("zones"))
    expected = rates * cfg.n_intervals
    if rates.any() and not (expected >= cfg.alpha).any():
        log.warning("no zone is expected to reach alpha=%d accidents", cfg.alpha)
    accidents, cells = _accidents(cfg, streams, rates, high)
    dups = _duplicates(cfg, streams, accidents)
    congestion, words, delays = _congestion(cfg, streams)
    weather, spikes = _weather(cfg, streams)
    poi = _poi(cfg, streams, high)

    # latent gamma: delay law without noise; median over training-period accidents
    sev = np.array([a.severity for a in accidents], dtype=np.int64)
    dur = np.array([a.duration for a in accidents])
    dist = np.array([a.distance for a in accidents])
    g = delay_law(cfg, sev, dur, dist) if accidents else np.zeros(0)
    in_train = np.array([a.start_time < cfg.train_end_time for a in accidents], dtype=bool)
    median = float(np.median(g[in_train])) if in_train.any() else float("nan")
    gclass = np.where(g > median, 2, 1)
    labels: dict[tuple[int, int], int] = {}
    for (z, k), c in zip(cells, gclass.tolist()):
        labels[(z, k)] = max(labels.get((z, k), 0), c)

    all_acc = sorted(accidents + dups, key=lambda a: (a.start_time, a.id))
    ingest.write_accidents(out_dir / FILES["accident"], all_acc)
    _write_raw_congestion(out_dir / FILES["congestion"], congestion, words)
    ingest.write_weather(out_dir / FILES["weather"], weather)
    ingest.write_poi(out_dir / FILES["poi"], poi)

    spec = cfg.grid_spec()
    truth = {
        "config": cfg.to_json(),
        "grid": spec.to_json(),
        "train_end": cfg.train_end_time.isoformat(),
        "zones": [{"zone": z, "row": z // cfg.cols, "col": z % cfg.cols, "rate": float(rates[z]),
                   "high_impact": bool(high[z]), "accidents": int(sum(1 for c in cells if c[0] == z))}
                  for z in range(cfg.rows * cfg.cols)],
        "gamma_median": median,
        "accidents": [{"id": a.id, "gamma": float(gv), "gamma_class": int(c)}
                      for a, gv, c in zip(accidents, g.tolist(), gclass.tolist())],
        "interval_labels": [[z // cfg.cols, z % cfg.cols, k, c] for (z, k), c in sorted(labels.items())],
        "duplicates": [d.id for d in dups],
        "congestion_delay": {c.id: d for c, d in zip(congestion, delays)},
        "weather_spikes": spikes,
    }
    _write_json(out_dir / TRUTH_FILE, truth)
    _write_json(out_dir / GRID_FILE, spec.to_json())
    _write_json(out_dir / CONFIG_FILE, cfg.to_json())
    log.info("synth: %d accidents (+%d duplicates), %d congestion, %d weather, %d POI rows",
             len(accidents), len(dups), len(congestion), len(weather), len(poi))
    return SynthOutput(out_dir, all_acc, congestion, weather, poi, truth)


def _write_raw_congestion(path: Path, records, words) -> None:
    # raw reports: severity as a word, delay only inside the description
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(ingest.CONGESTION_COLUMNS)
        for r in records:
            w.writerow([r.id, words[r.severity - 1].capitalize(), ingest.format_time(r.time, r.tz),
                        repr(r.duration), repr(r.lat), repr(r.lon), repr(r.distance), r.tz, r.description])


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")
