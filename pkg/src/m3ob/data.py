"""Check-in ingestion, preprocessing filters, splits and scenario tags."""

from __future__ import annotations

import csv
import datetime as dt
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SLOTS_PER_DAY = 48
SECONDS_PER_SLOT = 1800
CHECKIN_COLUMNS = ("user_id", "loc_id", "timestamp", "lat", "lon", "category_id")
SCALES = ("coarse", "medium", "fine")

MIN_LOCATION_VISITS = 10
MIN_TRAJECTORY_LENGTH = 3
MIN_USER_TRAJECTORIES = 5
LONG_TAIL_THRESHOLD = 20


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


@dataclass(frozen=True, slots=True)
class CheckinRecord:
    user: str
    location: str
    timestamp: int
    latitude: float
    longitude: float
    category: str


@dataclass(frozen=True)
class Trajectory:
    user: str
    day: dt.date
    records: tuple[CheckinRecord, ...]

    def __len__(self) -> int:
        return len(self.records)

    @property
    def start(self) -> int:
        return self.records[0].timestamp


@dataclass
class DatasetSplit:
    train: dict[str, list[Trajectory]] = field(default_factory=dict)
    validation: dict[str, list[Trajectory]] = field(default_factory=dict)
    test: dict[str, list[Trajectory]] = field(default_factory=dict)

    def part(self, name: str) -> dict[str, list[Trajectory]]:
        return {"train": self.train, "validation": self.validation, "test": self.test}[name]

    def trajectories(self, name: str) -> list[Trajectory]:
        part = self.part(name)
        return [t for user in sorted(part, key=natural_key) for t in part[user]]


def natural_key(token: str):
    """Sort integer-looking ids numerically, everything else lexically after them."""
    return (0, int(token), "") if token.lstrip("-").isdigit() else (1, 0, token)


# ---------------------------------------------------------------------------
# Parsing


def parse_timestamp(text: str) -> int:
    text = text.strip()
    if text.lstrip("-").isdigit():
        return int(text)
    stamp = dt.datetime.fromisoformat(text.replace("Z", "+00:00"))
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=dt.timezone.utc)
    return int(stamp.timestamp())


def parse_checkins(path: str | Path) -> list[CheckinRecord]:
    """Read the check-in CSV; records come back sorted by (user, timestamp)."""
    path = Path(path)
    records: list[CheckinRecord] = []
    problems: list[str] = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file, expected header {','.join(CHECKIN_COLUMNS)}")
        header = [h.strip() for h in header]
        missing = [c for c in CHECKIN_COLUMNS if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
        col = {name: header.index(name) for name in CHECKIN_COLUMNS}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                fields = {name: row[i].strip() for name, i in col.items()}
            except IndexError:
                problems.append(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
                continue
            try:
                ts = parse_timestamp(fields["timestamp"])
            except ValueError:
                problems.append(f"line {lineno}: unparseable timestamp {fields['timestamp']!r}")
                continue
            try:
                lat, lon = float(fields["lat"]), float(fields["lon"])
            except ValueError:
                problems.append(f"line {lineno}: non-numeric coordinates")
                continue
            if not -90.0 <= lat <= 90.0:
                problems.append(f"line {lineno}: latitude {lat} outside [-90, 90]")
                continue
            if not -180.0 <= lon <= 180.0:
                problems.append(f"line {lineno}: longitude {lon} outside [-180, 180]")
                continue
            if not fields["user_id"] or not fields["loc_id"] or not fields["category_id"]:
                problems.append(f"line {lineno}: empty id field")
                continue
            records.append(
                CheckinRecord(fields["user_id"], fields["loc_id"], ts, lat, lon, fields["category_id"])
            )
    if problems:
        raise DataError(f"{path}: {len(problems)} malformed line(s):\n  " + "\n  ".join(problems))
    return sort_records(records)


def sort_records(records: Iterable[CheckinRecord]) -> list[CheckinRecord]:
    return sorted(records, key=lambda r: (natural_key(r.user), r.timestamp))


def write_checkins(path: str | Path, records: Sequence[CheckinRecord]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CHECKIN_COLUMNS)
        for r in records:
            w.writerow([r.user, r.location, r.timestamp, f"{r.latitude:.6f}", f"{r.longitude:.6f}", r.category])


# ---------------------------------------------------------------------------
# Time


def time_to_slot(timestamp: int, timezone_offset_minutes: int = 0) -> int:
    """Half-hour slot of the local day, in [0, 48)."""
    local = int(timestamp) + 60 * int(timezone_offset_minutes)
    return (local % 86400) // SECONDS_PER_SLOT


def local_date(timestamp: int, timezone_offset_minutes: int = 0) -> dt.date:
    local = int(timestamp) + 60 * int(timezone_offset_minutes)
    return dt.date(1970, 1, 1) + dt.timedelta(days=local // 86400)


# ---------------------------------------------------------------------------
# Preprocessing


def _filter_once(records, tz):
    visits = Counter(r.location for r in records)
    kept = [r for r in records if visits[r.location] >= MIN_LOCATION_VISITS]

    days: dict[tuple[str, dt.date], list[CheckinRecord]] = defaultdict(list)
    for r in kept:
        days[(r.user, local_date(r.timestamp, tz))].append(r)
    per_user: dict[str, list[Trajectory]] = defaultdict(list)
    for (user, day), recs in days.items():
        if len(recs) >= MIN_TRAJECTORY_LENGTH:
            recs = sorted(recs, key=lambda r: r.timestamp)
            per_user[user].append(Trajectory(user, day, tuple(recs)))

    trajectories = []
    for user in sorted(per_user, key=natural_key):
        trajs = per_user[user]
        if len(trajs) >= MIN_USER_TRAJECTORIES:
            trajectories.extend(sorted(trajs, key=lambda t: t.day))
    survivors = sort_records(r for t in trajectories for r in t.records)
    return survivors, trajectories


def preprocess(
    records: Sequence[CheckinRecord],
    timezone_offset_minutes: int = 0,
    fixpoint: bool = False,
) -> tuple[list[CheckinRecord], list[Trajectory]]:
    """Apply the four filters in order: rare locations, day grouping, short days, inactive users.

    A single pass by default.  With ``fixpoint=True`` the pass repeats until
    nothing changes, which makes the function idempotent.
    """
    survivors, trajectories = _filter_once(list(records), timezone_offset_minutes)
    if fixpoint:
        while True:
            again, trajs = _filter_once(survivors, timezone_offset_minutes)
            if len(again) == len(survivors):
                break
            survivors, trajectories = again, trajs
    return survivors, trajectories


def split_counts(n: int) -> tuple[int, int, int]:
    """Train/validation/test sizes for a user with ``n`` trajectories."""
    train = (8 * n) // 10
    val = n // 10
    if n >= 5:
        val = max(val, 1)
    test = n - train - val
    if n >= 5 and test == 0:
        train -= 1
        test = 1
    return train, val, test


def split_chronological(trajectories: Sequence[Trajectory]) -> DatasetSplit:
    per_user: dict[str, list[Trajectory]] = defaultdict(list)
    for t in trajectories:
        per_user[t.user].append(t)
    split = DatasetSplit()
    for user in sorted(per_user, key=natural_key):
        trajs = sorted(per_user[user], key=lambda t: (t.day, t.start))
        n_train, n_val, _ = split_counts(len(trajs))
        split.train[user] = trajs[:n_train]
        split.validation[user] = trajs[n_train : n_train + n_val]
        split.test[user] = trajs[n_train + n_val :]
    return split


# ---------------------------------------------------------------------------
# Hierarchy


@dataclass
class HierarchyMap:
    location_category: dict[str, str]
    category_activity: dict[str, str]

    @property
    def categories(self) -> list[str]:
        return sorted(self.category_activity, key=natural_key)

    @property
    def activities(self) -> list[str]:
        return sorted(set(self.category_activity.values()), key=natural_key)

    @property
    def n_categories(self) -> int:
        return len(self.category_activity)

    @property
    def n_activities(self) -> int:
        return len(set(self.category_activity.values()))

    def activity_of_location(self, location: str) -> str:
        return self.category_activity[self.location_category[location]]


def read_category_activity(path: str | Path) -> dict[str, str]:
    path = Path(path)
    mapping: dict[str, str] = {}
    conflicts = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
            raise DataError(f"{path}: line {lineno}: expected category_id<TAB>activity_id")
        cat, act = parts[0].strip(), parts[1].strip()
        if cat in mapping and mapping[cat] != act:
            conflicts.append(f"{cat} -> {mapping[cat]} / {act} (line {lineno})")
        mapping.setdefault(cat, act)
    if conflicts:
        raise DataError(f"{path}: conflicting activities for category: " + "; ".join(conflicts))
    return mapping


def build_hierarchy(records: Sequence[CheckinRecord], category_activity: dict[str, str]) -> HierarchyMap:
    loc_cat: dict[str, str] = {}
    clashes = set()
    for r in records:
        prev = loc_cat.setdefault(r.location, r.category)
        if prev != r.category:
            clashes.add(r.location)
    if clashes:
        raise DataError(f"locations with more than one category: {sorted(clashes, key=natural_key)[:10]}")
    orphans = sorted({c for c in loc_cat.values() if c not in category_activity}, key=natural_key)
    if orphans:
        raise DataError(f"categories without an activity: {', '.join(orphans)}")
    return HierarchyMap(loc_cat, dict(category_activity))


def load_hierarchy(path: str | Path, records: Sequence[CheckinRecord]) -> HierarchyMap:
    """Category->activity from the TSV, location->category from the check-ins."""
    return build_hierarchy(records, read_category_activity(path))


def write_hierarchy(path: str | Path, hierarchy: HierarchyMap) -> None:
    lines = [f"{c}\t{hierarchy.category_activity[c]}" for c in hierarchy.categories]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Weather and scenario tags


def load_weather(path: str | Path) -> dict[dt.date, tuple[bool, bool]]:
    path = Path(path)
    out: dict[dt.date, tuple[bool, bool]] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header[:3] != ["date", "rainy", "cold"]:
            raise DataError(f"{path}: expected header date,rainy,cold")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                day = dt.date.fromisoformat(row[0].strip())
                rainy, cold = row[1].strip(), row[2].strip()
            except (ValueError, IndexError):
                raise DataError(f"{path}: line {lineno}: malformed weather row") from None
            if rainy not in ("0", "1") or cold not in ("0", "1"):
                raise DataError(f"{path}: line {lineno}: flags must be 0 or 1")
            out[day] = (rainy == "1", cold == "1")
    return out


def write_weather(path: str | Path, weather: dict[dt.date, tuple[bool, bool]]) -> None:
    lines = ["date,rainy,cold"] + [f"{d.isoformat()},{int(r)},{int(c)}" for d, (r, c) in sorted(weather.items())]
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class ScenarioTags:
    """Weather flags per local date and long-tail flags per location.

    Dates missing from the weather file count as neither rainy nor cold.
    """

    weather: dict[dt.date, tuple[bool, bool]]
    train_frequency: dict[str, int]
    timezone_offset_minutes: int = 0
    threshold: int = LONG_TAIL_THRESHOLD

    def rainy(self, record: CheckinRecord) -> bool:
        return self.weather.get(local_date(record.timestamp, self.timezone_offset_minutes), (False, False))[0]

    def cold(self, record: CheckinRecord) -> bool:
        return self.weather.get(local_date(record.timestamp, self.timezone_offset_minutes), (False, False))[1]

    def long_tail(self, location: str) -> bool:
        return self.train_frequency.get(location, 0) < self.threshold

    def tag(self, record: CheckinRecord) -> tuple[bool, bool, bool]:
        return self.rainy(record), self.cold(record), self.long_tail(record.location)


def tag_scenarios(
    records: Sequence[CheckinRecord],
    weather: str | Path | dict | None,
    split: DatasetSplit,
    timezone_offset_minutes: int = 0,
) -> ScenarioTags:
    """Tag weather by date join and long-tail locations from training frequencies only."""
    if weather is None:
        table = {}
    elif isinstance(weather, dict):
        table = dict(weather)
    else:
        table = load_weather(weather)
    freq = Counter(r.location for t in split.trajectories("train") for r in t.records)
    for r in records:
        freq.setdefault(r.location, 0)
    return ScenarioTags(table, dict(freq), timezone_offset_minutes)


# ---------------------------------------------------------------------------
# Image features


@dataclass
class ImageFeatureSet:
    """Frozen per-scale feature matrices, rows aligned to a location vocabulary."""

    locations: list[str]
    features: dict[str, np.ndarray]

    @property
    def dim(self) -> int:
        return next(iter(self.features.values())).shape[1]

    @property
    def scales(self) -> list[str]:
        return list(self.features)


def read_image_file(path: str | Path) -> dict[tuple[str, str], np.ndarray]:
    path = Path(path)
    out: dict[tuple[str, str], np.ndarray] = {}
    dim = None
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split(",", 2)
        if len(parts) != 3:
            raise DataError(f"{path}: line {lineno}: expected loc_id,scale,values")
        loc, scale, values = parts[0].strip(), parts[1].strip(), parts[2]
        if scale not in SCALES:
            raise DataError(f"{path}: line {lineno}: unknown scale {scale!r}")
        try:
            vec = np.array([float(v) for v in values.split()], dtype=np.float64)
        except ValueError:
            raise DataError(f"{path}: line {lineno}: non-numeric feature value") from None
        if not np.isfinite(vec).all():
            raise DataError(f"{path}: line {lineno}: non-finite feature value")
        if dim is None:
            dim = vec.size
        elif vec.size != dim:
            raise DataError(f"{path}: line {lineno}: feature width {vec.size} != {dim}")
        out[(loc, scale)] = vec
    return out


def load_image_features(
    path: str | Path | dict, locations: Sequence[str], scales: Sequence[str] = SCALES
) -> ImageFeatureSet:
    raw = read_image_file(path) if not isinstance(path, dict) else path
    missing = sorted(
        {loc for loc in locations for s in scales if (loc, s) not in raw}, key=natural_key
    )
    if missing:
        raise DataError(f"image features missing for location(s): {', '.join(missing[:20])}")
    feats = {s: np.stack([raw[(loc, s)] for loc in locations]) for s in scales}
    return ImageFeatureSet(list(locations), feats)


def write_image_features(path: str | Path, locations: Sequence[str], features: dict[str, np.ndarray]) -> None:
    lines = []
    for i, loc in enumerate(locations):
        for s in SCALES:
            if s in features:
                lines.append(f"{loc},{s}," + " ".join(f"{v:.6f}" for v in features[s][i]))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Integer encoding


@dataclass
class Vocab:
    tokens: list[str]

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, token: str) -> int:
        return self.index[token]

    @classmethod
    def build(cls, tokens: Iterable[str]) -> "Vocab":
        return cls(sorted(set(tokens), key=natural_key))


@dataclass
class EncodedSequence:
    user: int
    locations: np.ndarray
    categories: np.ndarray
    activities: np.ndarray
    slots: np.ndarray
    rainy: np.ndarray
    cold: np.ndarray

    def __len__(self) -> int:
        return len(self.locations)


@dataclass
class EncodedDataset:
    users: Vocab
    locations: Vocab
    categories: Vocab
    activities: Vocab
    location_category: np.ndarray
    category_activity: np.ndarray
    splits: dict[str, list[EncodedSequence]]
    long_tail: np.ndarray
    train_frequency: np.ndarray

    @property
    def sizes(self) -> dict[str, int]:
        return {
            "users": len(self.users),
            "locations": len(self.locations),
            "categories": len(self.categories),
            "activities": len(self.activities),
        }


def encode_dataset(
    split: DatasetSplit,
    hierarchy: HierarchyMap,
    tags: ScenarioTags,
    timezone_offset_minutes: int = 0,
) -> EncodedDataset:
    all_trajs = [t for name in ("train", "validation", "test") for t in split.trajectories(name)]
    users = Vocab.build(t.user for t in all_trajs)
    locations = Vocab.build(r.location for t in all_trajs for r in t.records)
    categories = Vocab(hierarchy.categories)
    activities = Vocab(hierarchy.activities)
    loc_cat = np.array([categories[hierarchy.location_category[p]] for p in locations.tokens], dtype=np.int64)
    cat_act = np.array([activities[hierarchy.category_activity[c]] for c in categories.tokens], dtype=np.int64)

    def encode(t: Trajectory) -> EncodedSequence:
        locs = np.array([locations[r.location] for r in t.records], dtype=np.int64)
        cats = loc_cat[locs]
        return EncodedSequence(
            user=users[t.user],
            locations=locs,
            categories=cats,
            activities=cat_act[cats],
            slots=np.array([time_to_slot(r.timestamp, timezone_offset_minutes) for r in t.records], dtype=np.int64),
            rainy=np.array([tags.rainy(r) for r in t.records], dtype=bool),
            cold=np.array([tags.cold(r) for r in t.records], dtype=bool),
        )

    splits = {name: [encode(t) for t in split.trajectories(name)] for name in ("train", "validation", "test")}
    freq = np.array([tags.train_frequency.get(p, 0) for p in locations.tokens], dtype=np.int64)
    return EncodedDataset(
        users, locations, categories, activities, loc_cat, cat_act, splits, freq < tags.threshold, freq
    )
