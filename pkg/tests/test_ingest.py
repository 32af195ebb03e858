import csv
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from impactcast import ingest
from impactcast.ingest import (AccidentRecord, IngestError, NoDelayMention, WeatherRecord,
                               clip_outliers, dedup_accidents, drop_redundant, extract_delay,
                               impute_missing, parse_dataset)

T0 = datetime(2019, 3, 1, 8, 0, tzinfo=timezone.utc)

DESCRIPTIONS = [
    ("Delays increasing and delays of nine minutes on Colorado Blvd Westbound in LA. "
     "Average speed five mph.", 9),
    ("Delays of three minutes on Harbor Fwy Northbound between I-10 and US-101. Average speed 20 mph.", 3),
    ("Delays of eight minutes on Verdugo Rd Southbound between Verdugo Rd and Shasta Cir. "
     "Average speed five mph.", 8),
    ("Delays of two minutes on I-5 I-10 Northbound between Exits 132 132A Calzona St and "
     "Exit 135A 4th St. Average speed 20 mph.", 2),
    ("Severe delays of 22 minutes on San Diego Fwy Northbound in LA. Average speed ten mph.", 22),
]


def _accident(i, t=T0, lat=34.0, lon=-118.3, street="Main St", end_minutes=30):
    return AccidentRecord(f"A-{i}", 2, t, t + timedelta(minutes=end_minutes), lat, lon, 0.5, street)


# ---------------------------------------------------------------- extract_delay

@pytest.mark.parametrize("text,expected", DESCRIPTIONS)
def test_extract_delay_reference_descriptions(text, expected):
    assert extract_delay(text) == expected


@pytest.mark.parametrize("text,expected", [
    ("Delays of twenty-five minutes on I-405.", 25),
    ("Delays of forty five minutes on I-405.", 45),
    ("Queuing traffic with delays of up to 1 hour.", 60),
    ("Stationary traffic, 12 minute delay on Ventura Fwy.", 12),
    ("Delays of about 7 mins near Exit 3.", 7),
])
def test_extract_delay_variants(text, expected):
    assert extract_delay(text) == expected


def test_extract_delay_takes_first_mention():
    assert extract_delay("Delays of four minutes, then 30 minute delay further on.") == 4


@pytest.mark.parametrize("text", ["Average speed 20 mph.", "", "Slow traffic on I-10."])
def test_extract_delay_without_mention(text):
    with pytest.raises(NoDelayMention):
        extract_delay(text)


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(DESCRIPTIONS), st.lists(st.sampled_from([" ", "  ", "\t", " \t "]), min_size=1),
       st.randoms(use_true_random=False))
def test_extract_delay_ignores_whitespace_and_case(item, gaps, rnd):
    text, expected = item
    words = text.split(" ")
    mangled = words[0]
    for i, w in enumerate(words[1:]):
        mangled += gaps[i % len(gaps)] + w
    mangled = "".join(c.upper() if rnd.random() < 0.5 else c.lower() for c in mangled)
    assert extract_delay(mangled) == expected


# ---------------------------------------------------------------- parse_dataset

def test_parse_empty_file_with_header(tmp_path):
    p = tmp_path / "acc.csv"
    p.write_text(",".join(ingest.ACCIDENT_COLUMNS) + "\n")
    res = parse_dataset(p, "accident")
    assert res.records == [] and res.rejects == []


def test_parse_missing_file_and_bad_header(tmp_path):
    with pytest.raises(FileNotFoundError):
        parse_dataset(tmp_path / "nope.csv", "accident")
    p = tmp_path / "bad.csv"
    p.write_text("ID,Severity\n1,2\n")
    with pytest.raises(IngestError):
        parse_dataset(p, "accident")


def test_parse_routes_end_before_start_to_rejects(tmp_path):
    good = [_accident(i) for i in range(3)]
    p = tmp_path / "acc.csv"
    ingest.write_accidents(p, good)
    with open(p, "a", newline="") as fh:
        row = [ingest.format_time(g, "UTC") if isinstance(g, datetime) else g for g in
               ["A-bad", 2, T0, T0 - timedelta(minutes=1), "34.0", "-118.3", "0.1", "Elm", "UTC"]]
        csv.writer(fh).writerow(row + ["False"] * 13 + ["Day"] * 4)
    res = parse_dataset(p, "accident")
    assert [r.id for r in res.records] == ["A-0", "A-1", "A-2"]
    assert len(res.rejects) == 1 and res.rejects[0][0] == 5 and "before" in res.rejects[0][1]


def test_parse_aborts_when_most_rows_rejected(tmp_path):
    p = tmp_path / "poi.csv"
    p.write_text("Lat,Lng,Kind\n34,-118,stop\n34,-118,volcano\n34,-118,lake\n")
    with pytest.raises(IngestError, match="2/3"):
        parse_dataset(p, "poi")


def test_accident_roundtrip_is_exact(tmp_path, rng):
    recs = []
    for i in range(50):
        t = T0 + timedelta(seconds=int(rng.integers(0, 10**7)))
        recs.append(AccidentRecord(
            f"A-{i}", int(rng.integers(1, 5)), t, t + timedelta(seconds=int(rng.integers(0, 20000))),
            float(rng.uniform(33.8, 34.2)), float(rng.uniform(-118.6, -118.1)), float(rng.exponential(1.0)),
            f"Street {i % 7}", "America/Los_Angeles", tuple(bool(b) for b in rng.integers(0, 2, 13)),
            tuple(rng.choice(["Day", "Night"], 4).tolist())))
    p = tmp_path / "acc.csv"
    ingest.write_accidents(p, recs)
    assert parse_dataset(p, "accident").records == recs


def test_weather_and_congestion_roundtrip(tmp_path):
    w = [WeatherRecord("LAX", T0, 60.5, None, 55.0, 29.9, 10.0, 3.5, 0.0, "W", "Clear"),
         WeatherRecord("BUR", T0 + timedelta(hours=1), None, 58.0, 40.0, 30.0, 9.0, 0.0, None, None, "Fog")]
    pw = tmp_path / "w.csv"
    ingest.write_weather(pw, w)
    assert parse_dataset(pw, "weather").records == w
    c = [ingest.CongestionRecord("C-1", 3, T0, 14.5, 34.0, -118.2, 1.25, DESCRIPTIONS[0][0],
                                 "America/Los_Angeles", 9.0)]
    pc = tmp_path / "c.csv"
    ingest.write_congestion(pc, c)
    assert parse_dataset(pc, "congestion").records == c


def test_naive_timestamps_localised_by_timezone_column(tmp_path):
    t = ingest.parse_time("2019-03-01 00:00:00", "America/Los_Angeles")
    assert t == datetime(2019, 3, 1, 8, tzinfo=timezone.utc)


def test_congestion_severity_words():
    assert [ingest.congestion_severity(w) for w in ("Fast", "Moderate", "slow", "QUEUING")] == [1, 2, 3, 4]


# ---------------------------------------------------------------- dedup

def test_dedup_exact_duplicate():
    a = _accident(1)
    b = AccidentRecord("A-2", *[getattr(a, f) for f in ("severity", "start_time", "end_time", "start_lat",
                                                        "start_lon", "distance", "street")])
    assert [r.id for r in dedup_accidents([b, a])] == ["A-1"]


def test_dedup_keeps_distant_reports():
    assert len(dedup_accidents([_accident(1), _accident(2, lon=-118.3 + 10 / 92.4)])) == 2


def test_dedup_keeps_earlier_report():
    late = _accident(1, t=T0 + timedelta(minutes=4))
    early = _accident(2, t=T0, lat=34.0005)
    assert [r.id for r in dedup_accidents([late, early])] == ["A-2"]


def test_dedup_tolerances():
    base = _accident(0)
    assert len(dedup_accidents([base, _accident(1, t=T0 + timedelta(seconds=301))])) == 2
    assert len(dedup_accidents([base, _accident(1, street="Elm St")])) == 2
    assert len(dedup_accidents([base, _accident(1, lat=34.0 + 0.2 / 111.2)])) == 2


def _planted(rng, n, k):
    base = [_accident(i, t=T0 + timedelta(hours=3 * i), lat=float(rng.uniform(33.9, 34.1)),
                      lon=float(rng.uniform(-118.5, -118.2)), street=f"S{i % 5}") for i in range(n)]
    dups = []
    for j, i in enumerate(rng.choice(n, k, replace=False)):
        b = base[i]
        dups.append(AccidentRecord(f"D-{j}", b.severity, b.start_time + timedelta(seconds=int(rng.integers(1, 200))),
                                   b.end_time, b.start_lat + 0.0002, b.start_lon, b.distance, b.street))
    return base, dups


def test_dedup_removes_exactly_planted(rng):
    base, dups = _planted(rng, 200, 17)
    out = dedup_accidents(base + dups)
    assert len(out) == 200 and {r.id for r in out} == {r.id for r in base}


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_dedup_order_insensitive(seed):
    rng = np.random.default_rng(seed)
    base, dups = _planted(rng, 40, 6)
    recs = base + dups
    ref = {r.id for r in dedup_accidents(recs)}
    perm = rng.permutation(len(recs))
    assert {r.id for r in dedup_accidents([recs[i] for i in perm])} == ref


# ---------------------------------------------------------------- impute

FULL = dict(temperature=60.0, wind_chill=58.0, humidity=50.0, pressure=29.9, visibility=10.0,
            wind_speed=5.0, precipitation=0.0, wind_direction="W", condition="Clear")


def _wx(station, hour, **fields):
    return WeatherRecord(station, T0 + timedelta(hours=hour), **{**FULL, **fields})


def _weather_grid():
    return [_wx(s, h, temperature=60.0 + h) for s in ("LAX", "BUR") for h in range(4)]


def test_impute_complete_records_unchanged():
    recs = _weather_grid()
    assert impute_missing(recs) == recs


def test_impute_numeric_mean_of_two_neighbours():
    recs = [_wx("LAX", 0, temperature=10.0), _wx("LAX", 2, temperature=20.0),
            _wx("LAX", 1, temperature=None), _wx("LAX", 9, temperature=99.0)]
    out = impute_missing(recs)
    assert out[2].temperature == 15.0


def test_impute_categorical_mode():
    recs = [_wx("LAX", 0), _wx("LAX", 2), _wx("LAX", 1, condition=None), _wx("LAX", 9, condition="Fog")]
    assert impute_missing(recs)[2].condition == "Clear"


def test_impute_feature_missing_everywhere():
    with pytest.raises(IngestError):
        impute_missing([_wx("LAX", 0, humidity=None), _wx("LAX", 1, humidity=None)])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(sorted(ingest.STATIONS)), st.integers(0, 48),
                          st.one_of(st.none(), st.floats(-20, 120)), st.one_of(st.none(), st.sampled_from(["Clear", "Fog"]))),
                min_size=4, max_size=25))
def test_impute_never_alters_observed(rows):
    recs = [_wx(s, h, temperature=t, condition=c) for s, h, t, c in rows]
    for name in ("temperature", "condition"):
        if sum(getattr(r, name) is not None for r in recs) < 2:
            return
    out = impute_missing(recs)
    for a, b in zip(recs, out):
        for name in ("temperature", "condition"):
            if getattr(a, name) is not None:
                assert getattr(b, name) == getattr(a, name)
            else:
                assert getattr(b, name) is not None


# ---------------------------------------------------------------- clip

def test_clip_constant_column():
    assert clip_outliers([0, 0, 0, 0]).tolist() == [0, 0, 0, 0]


def test_clip_planted_spike(rng):
    x = rng.normal(5.0, 2.0, 500)
    x[17] = x.mean() + 10 * x.std()
    # oracle: population moments by explicit sums
    mu = sum(x) / len(x)
    sd = (sum((v - mu) ** 2 for v in x) / len(x)) ** 0.5
    out = clip_outliers(x)
    assert out[17] == pytest.approx(mu + 3 * sd, rel=1e-12)
    mask = np.arange(500) != 17
    assert np.array_equal(out[mask], np.clip(x[mask], mu - 3 * sd, mu + 3 * sd))


def test_clip_within_band_is_identity(rng):
    x = rng.uniform(-1, 1, 100)
    assert np.array_equal(clip_outliers(x), x)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=200))
def test_clip_output_within_band(vals):
    x = np.array(vals)
    mu, sd = x.mean(), x.std()
    out = clip_outliers(x)
    tol = 1e-9 * max(1.0, abs(mu) + 3 * sd)
    assert np.all(out >= mu - 3 * sd - tol) and np.all(out <= mu + 3 * sd + tol)


# ---------------------------------------------------------------- drop_redundant

def test_drop_redundant_exact_copy(rng):
    a = rng.normal(size=100)
    kept, rep = drop_redundant({"a": a, "a_copy": a.copy(), "b": rng.normal(size=100)})
    assert list(kept) == ["a", "b"] and rep.dropped == ["a_copy"]


def test_drop_redundant_dominant_categorical():
    flag = np.array([False] * 95 + [True] * 5)
    kept, rep = drop_redundant({"flag": flag, "mixed": np.array([True, False] * 50)})
    assert list(kept) == ["mixed"] and rep.dominant[0][:2] == ("flag", "False")


def test_drop_redundant_independent_normals():
    rng = np.random.default_rng(2024)
    cols = {f"x{i}": rng.normal(size=1000) for i in range(8)}
    r = np.corrcoef(np.array(list(cols.values())))
    assert np.max(np.abs(r[~np.eye(8, dtype=bool)])) < 0.95
    kept, rep = drop_redundant(cols)
    assert list(kept) == list(cols) and rep.dropped == []
