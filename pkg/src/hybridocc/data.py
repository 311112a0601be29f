"""Smart-meter data: raw ECO-style ingestion, hourly resampling, day
samples, normalization, windowed statistics and a synthetic generator.

Raw directory layout (one directory per household)::

    <root>/<household>/meter/<YYYY-MM-DD>.csv[.gz]   86400 rows x F columns
    <root>/<household>/occupancy*.csv[.gz]           rows: date,s_1,...,s_86400

``-1`` marks a missing value in both streams.
"""
from __future__ import annotations

import csv
import datetime as dt
import gzip
import io
import os
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

SECONDS_PER_DAY = 86400
SECONDS_PER_HOUR = 3600
MISSING = -1
DEFAULT_FEATURES = 9  # current, voltage and phase shift for each of three phases


class DataFormatError(ValueError):
    pass


@dataclass
class RawDay:
    household: str
    date: str
    readings: np.ndarray  # (seconds, F), NaN where missing
    occupancy: np.ndarray  # (seconds,), int8 in {0, 1, -1}


@dataclass
class Sample:
    household: str
    date: str
    X: np.ndarray  # (T, F)
    y: np.ndarray  # (T,), int8 in {0, 1}

    def with_X(self, X):
        return Sample(self.household, self.date, X, self.y)


@dataclass
class DatasetSummary:
    households: "OrderedDict[str, tuple[int, float]]" = field(default_factory=OrderedDict)
    total_days: int = 0
    overall_ratio: float = 0.0

    def format_table(self):
        lines = [f"{'Household':>10} {'Days':>6} {'Occupancy':>10}"]
        for hh, (days, ratio) in self.households.items():
            lines.append(f"{hh:>10} {days:>6d} {ratio:>10.4f}")
        lines.append(f"{'Total':>10} {self.total_days:>6d} {self.overall_ratio:>10.4f}")
        return "\n".join(lines)


# raw ingestion

def _open_text(path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rt")
    return open(path, "r")


def _is_date(s):
    try:
        dt.date.fromisoformat(s.strip())
    except ValueError:
        return False
    return True


def _day_files(meter_dir):
    out = {}
    for name in sorted(os.listdir(meter_dir)):
        for ext in (".csv.gz", ".csv"):
            if name.endswith(ext):
                stem = name[: -len(ext)]
                if _is_date(stem):
                    out[stem] = os.path.join(meter_dir, name)
    return out


def read_meter_file(path, n_features=None):
    try:
        with _open_text(path) as fh:
            arr = np.loadtxt(fh, delimiter=",", ndmin=2, dtype=np.float64)
    except (ValueError, OSError, EOFError) as e:
        raise DataFormatError(f"{path}: {e}") from None
    if arr.size == 0:
        arr = np.empty((0, n_features or DEFAULT_FEATURES))
    if n_features is not None and arr.shape[1] != n_features:
        raise DataFormatError(f"{path}: expected {n_features} columns, found {arr.shape[1]}")
    if arr.shape[0] > SECONDS_PER_DAY:
        raise DataFormatError(f"{path}: {arr.shape[0]} rows, more than {SECONDS_PER_DAY}")
    arr[arr == MISSING] = np.nan
    if arr.shape[0] < SECONDS_PER_DAY:
        pad = np.full((SECONDS_PER_DAY - arr.shape[0], arr.shape[1]), np.nan)
        arr = np.vstack([arr, pad])
    return arr


def read_occupancy_file(path):
    """Map date -> int8 array of per-second statuses."""
    out = {}
    with _open_text(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            head, _, rest = line.partition(",")
            if not _is_date(head):
                if lineno == 1:
                    continue  # header row
                raise DataFormatError(f"{path}:{lineno}: bad date {head!r}")
            try:
                vals = np.array(rest.split(","), dtype=np.int64)
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: non-integer occupancy value") from None
            if vals.size != SECONDS_PER_DAY:
                raise DataFormatError(
                    f"{path}:{lineno}: {vals.size} occupancy values, expected {SECONDS_PER_DAY}"
                )
            if not np.isin(vals, (0, 1, MISSING)).all():
                raise DataFormatError(f"{path}:{lineno}: occupancy values must be 0, 1 or -1")
            out[head.strip()] = vals.astype(np.int8)
    return out


def list_households(root):
    if not os.path.isdir(root):
        raise DataFormatError(f"{root}: not a directory")
    return [d for d in sorted(os.listdir(root)) if os.path.isdir(os.path.join(root, d, "meter"))]


def load_raw(root, household, n_features=None):
    """One RawDay per meter day file of ``household`` (sorted by date)."""
    hdir = os.path.join(root, household)
    meter_dir = os.path.join(hdir, "meter")
    if not os.path.isdir(meter_dir):
        return []
    occ = {}
    for name in sorted(os.listdir(hdir)):
        if name.startswith("occupancy") and (name.endswith(".csv") or name.endswith(".csv.gz")):
            occ.update(read_occupancy_file(os.path.join(hdir, name)))
    days = []
    for date, path in _day_files(meter_dir).items():
        readings = read_meter_file(path, n_features)
        status = occ.get(date)
        if status is None:
            status = np.full(SECONDS_PER_DAY, MISSING, dtype=np.int8)
        days.append(RawDay(household, date, readings, status))
    return days


# resampling

def resample_hourly(day, max_missing=0.05, tie_label=1, step_seconds=SECONDS_PER_HOUR):
    """Average readings and take the majority occupancy per step.

    Returns None (day excluded) if any step has more than ``max_missing``
    of its seconds missing in either stream.  A meter second counts as
    missing if any of its features is.  Otherwise missing entries are left
    out of the averages and the vote; a tied vote yields ``tie_label``.
    """
    n = day.readings.shape[0]
    if n % step_seconds or day.occupancy.shape[0] != n:
        raise ValueError("resample_hourly: day length is not a whole number of steps")
    T = n // step_seconds
    R = day.readings.reshape(T, step_seconds, -1)
    O = day.occupancy.reshape(T, step_seconds)
    meter_missing = np.isnan(R).any(axis=2).mean(axis=1)
    occ_missing = (O == MISSING).mean(axis=1)
    if (meter_missing > max_missing).any() or (occ_missing > max_missing).any():
        return None
    valid = ~np.isnan(R)
    X = np.where(valid, R, 0.0).sum(axis=1) / valid.sum(axis=1)
    ones = (O == 1).sum(axis=1)
    zeros = (O == 0).sum(axis=1)
    y = np.where(ones > zeros, 1, np.where(ones < zeros, 0, tie_label)).astype(np.int8)
    return Sample(day.household, day.date, X, y)


def preprocess(root, max_missing=0.05, tie_label=1, n_features=None):
    """Load and resample every household under ``root``."""
    samples = []
    for hh in list_households(root):
        for day in load_raw(root, hh, n_features):
            s = resample_hourly(day, max_missing, tie_label)
            if s is not None:
                samples.append(s)
    return samples


def summarize(samples):
    per = {}
    for s in samples:
        days, occ, steps = per.get(s.household, (0, 0, 0))
        per[s.household] = (days + 1, occ + int(s.y.sum()), steps + s.y.size)
    out = DatasetSummary()
    tot_occ = tot_steps = 0
    for hh in sorted(per):
        days, occ, steps = per[hh]
        out.households[hh] = (days, occ / steps)
        out.total_days += days
        tot_occ += occ
        tot_steps += steps
    out.overall_ratio = tot_occ / tot_steps if tot_steps else 0.0
    return out


# normalization

@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray


def normalize_fit(train_samples, floor=1e-8):
    """Per-feature mean and standard deviation over all training steps."""
    if not train_samples:
        raise ValueError("normalize_fit: empty training set")
    X = np.concatenate([s.X for s in train_samples], axis=0)
    mean = X.mean(axis=0)
    const = X.max(axis=0) == X.min(axis=0)
    mean[const] = X[0, const]  # exact, so constant features map to exactly 0
    std = np.maximum(X.std(axis=0), floor)
    return NormStats(mean, std)


def normalize_apply(stats, samples):
    return [s.with_X((s.X - stats.mean) / stats.std) for s in samples]


# hand-crafted features

def manual_features(sample, window=3):
    """Append windowed mean, std, min, max and lag-1 difference per feature.

    The window is centred and edge-clamped (border values repeat).  Output
    width is 6F: [raw, mean, std, min, max, diff].
    """
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 1, got {window}")
    X = sample.X
    r = window // 2
    padded = np.pad(X, ((r, r), (0, 0)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, window, axis=0)  # (T, F, window)
    diff = np.diff(X, axis=0, prepend=X[:1])
    feats = [X, win.mean(axis=-1), win.std(axis=-1), win.min(axis=-1), win.max(axis=-1), diff]
    return sample.with_X(np.concatenate(feats, axis=1))


# processed file format

def write_processed(samples, path):
    """household,date,hour,f1..fF,occupied with 12 significant digits."""
    if not samples:
        raise ValueError("write_processed: no samples")
    F = samples[0].X.shape[1]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(["household", "date", "hour"] + [f"f{j + 1}" for j in range(F)] + ["occupied"]))
        fh.write("\n")
        for s in samples:
            for h in range(s.X.shape[0]):
                vals = ",".join("%.12g" % v for v in s.X[h])
                fh.write(f"{s.household},{s.date},{h},{vals},{int(s.y[h])}\n")


def read_processed(path):
    samples = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        if header[:3] != ["household", "date", "hour"] or header[-1] != "occupied":
            raise DataFormatError(f"{path}:1: unexpected header {header[:3]}...")
        F = len(header) - 4
        if F < 1:
            raise DataFormatError(f"{path}:1: no feature columns")
        cur_key, rows, labels = None, [], []

        def flush():
            if cur_key is None:
                return
            samples.append(Sample(cur_key[0], cur_key[1], np.array(rows), np.array(labels, dtype=np.int8)))

        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != F + 4:
                raise DataFormatError(f"{path}:{lineno}: expected {F + 4} fields, got {len(row)}")
            key = (row[0], row[1])
            try:
                hour = int(row[2])
                feats = [float(v) for v in row[3:-1]]
                lab = int(row[-1])
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: malformed number") from None
            if lab not in (0, 1):
                raise DataFormatError(f"{path}:{lineno}: occupied must be 0 or 1")
            if key != cur_key:
                flush()
                cur_key, rows, labels = key, [], []
            if hour != len(rows):
                raise DataFormatError(f"{path}:{lineno}: hour {hour} out of sequence")
            rows.append(feats)
            labels.append(lab)
        flush()
    if not samples:
        raise DataFormatError(f"{path}: no data rows")
    T = samples[0].y.size
    for s in samples:
        if s.y.size != T:
            raise DataFormatError(f"{path}: day {s.household}/{s.date} has {s.y.size} steps, expected {T}")
    return samples


# synthetic data

@dataclass(frozen=True)
class SynthParams:
    occupied_boost: float = 1.0  # scale of appliance load in occupied hours; 0 removes the signal
    usage_prob: float = 0.85  # chance an occupied hour shows appliance use
    spike_prob: float = 0.05  # occupancy-independent load spikes
    leave_prob: tuple = (0.04, 0.15)  # per-household hourly P(occupied -> away) range
    return_prob: tuple = (0.2, 0.5)  # per-household hourly P(away -> occupied) range
    hours: int = 24


def _markov_day(rng, p_leave, p_return, T):
    pi = p_return / (p_return + p_leave)
    y = np.empty(T, dtype=np.int8)
    state = rng.random() < pi
    for t in range(T):
        y[t] = state
        flip = rng.random()
        state = (flip >= p_leave) if state else (flip < p_return)
    return y


def _synth_features(rng, y, boost, usage_prob, spike_prob):
    """Hourly 3-phase current / voltage / phase-shift features for one day."""
    T = y.size
    hours = np.arange(T)
    base = np.exp(rng.normal(np.log(0.8), 0.3, size=3))
    amp = rng.uniform(0.1, 0.4)
    phase = rng.uniform(0, 2 * np.pi)
    cycle = base[None, :] * (1.0 + amp * np.sin(2 * np.pi * hours / 24.0 + phase))[:, None]
    use = (y == 1) & (rng.random(T) < usage_prob)
    app_mag = boost * np.exp(rng.normal(np.log(1.5), 0.5, size=T)) * use
    app = app_mag[:, None] * rng.dirichlet(np.ones(3), size=T)
    spike = (rng.random(T) < spike_prob) * np.exp(rng.normal(0.0, 0.5, size=T))
    spikes = np.zeros((T, 3))
    spikes[hours, rng.integers(0, 3, size=T)] = spike
    noise = rng.normal(0.0, 0.05, size=(T, 3)) * base[None, :]
    current = np.maximum(cycle + app + spikes + noise, 0.0)
    voltage = 230.0 + rng.normal(0.0, 1.0, size=(T, 3)) - 0.4 * current
    total = cycle + app + spikes + 1e-6
    angle = (cycle * 35.0 + app * 10.0 + spikes * 25.0) / total + rng.normal(0.0, 1.0, size=(T, 3))
    X = np.empty((T, 9))
    X[:, 0::3] = current
    X[:, 1::3] = voltage
    X[:, 2::3] = angle
    return X


def synth_generate(n_households, days_per_household, seed, params=None):
    """Synthetic hourly day samples with a learnable occupancy signal.

    Per household, occupancy follows a two-state Markov chain whose
    transition probabilities are drawn once for that household.  Meter
    features are a per-day random baseline with a daily cycle, plus
    appliance load in (most) occupied hours and occupancy-independent
    spikes.  Baselines are drawn per day, so the features identify neither
    household nor hour; with ``occupied_boost=0`` they carry no information
    about occupancy at all.
    """
    if n_households < 1 or days_per_household < 1:
        raise ValueError("synth_generate: counts must be positive")
    p = params or SynthParams()
    rng = np.random.default_rng(seed)
    start = dt.date(2012, 6, 1)
    samples = []
    for h in range(n_households):
        hh = f"{h + 1:02d}"
        p_leave = rng.uniform(*p.leave_prob)
        p_return = rng.uniform(*p.return_prob)
        for d in range(days_per_household):
            y = _markov_day(rng, p_leave, p_return, p.hours)
            X = _synth_features(rng, y, p.occupied_boost, p.usage_prob, p.spike_prob)
            samples.append(Sample(hh, (start + dt.timedelta(days=d)).isoformat(), X, y))
    return samples


# raw fixture

FIXTURE_DIR = os.path.join(os.path.dirname(__file__), "fixtures", "eco")

# occupied hours of the two shipped fixture days; hour 12 of household 01
# is an exact 1800/1800 tie
_FIXTURE_HOURS = {
    "01": ("2012-06-01", set(range(0, 8)) | set(range(18, 24))),
    "02": ("2012-06-02", set(range(24)) - set(range(9, 17))),
}


def _fixture_day(household, date, occupied, seed):
    rng = np.random.default_rng(seed)
    minutes = SECONDS_PER_DAY // 60
    y_min = np.repeat([1 if h in occupied else 0 for h in range(24)], 60)
    base = np.round(rng.uniform(0.2, 1.2, size=(minutes, 3)) + 1.2 * y_min[:, None], 3)
    volt = np.round(230.0 + rng.normal(0.0, 1.0, size=(minutes, 3)), 1)
    ang = np.round(rng.uniform(10.0, 40.0, size=(minutes, 3)), 1)
    per_min = np.empty((minutes, 9))
    per_min[:, 0::3], per_min[:, 1::3], per_min[:, 2::3] = base, volt, ang
    readings = np.repeat(per_min, 60, axis=0)
    occupancy = np.repeat(y_min, 60).astype(np.int8)
    if household == "01":
        occupancy[12 * 3600:12 * 3600 + 1800] = 1
        occupancy[12 * 3600 + 1800:13 * 3600] = 0
        # 100 missing meter seconds and 60 missing statuses, under 5%
        readings[5 * 3600 + 10:5 * 3600 + 110, 4] = MISSING
        occupancy[20 * 3600:20 * 3600 + 60] = MISSING
    return RawDay(household, date, readings, occupancy)


def fixture_days():
    return [_fixture_day(hh, date, occ, i) for i, (hh, (date, occ)) in enumerate(sorted(_FIXTURE_HOURS.items()))]


def write_raw(root, days, compress=True):
    """Write RawDays in the raw directory layout (``-1`` for missing)."""
    ext = ".csv.gz" if compress else ".csv"
    by_hh = OrderedDict()
    for d in days:
        by_hh.setdefault(d.household, []).append(d)
    for hh, hdays in by_hh.items():
        os.makedirs(os.path.join(root, hh, "meter"), exist_ok=True)
        for d in hdays:
            buf = io.StringIO()
            vals = np.where(np.isnan(d.readings), MISSING, d.readings)
            np.savetxt(buf, vals, fmt="%.6g", delimiter=",")
            _write_text(os.path.join(root, hh, "meter", d.date + ext), buf.getvalue(), compress)
        lines = [d.date + "," + ",".join(map(str, d.occupancy.tolist())) for d in hdays]
        _write_text(os.path.join(root, hh, "occupancy" + ext), "\n".join(lines) + "\n", compress)


def _write_text(path, text, compress):
    if compress:
        # mtime=0 keeps the archive bytes reproducible
        with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as fh:
            fh.write(text.encode())
    else:
        with open(path, "w") as fh:
            fh.write(text)
