"""Deterministic synthetic check-in corpora with routine-driven mobility.

Each user owns a few daily routines (fixed stop sequences with typical
times).  A day picks one routine, jitters its times, occasionally swaps a
stop for a popularity-weighted random location and occasionally skips one.
Rainy days cut the last stop.  Image features cluster by category so the
visual modality carries signal.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import (
    SCALES,
    CheckinRecord,
    HierarchyMap,
    sort_records,
    write_checkins,
    write_hierarchy,
    write_image_features,
    write_weather,
)


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 20
    n_locations: int = 50
    n_categories: int = 24
    n_activities: int = 12
    days: int = 30
    visits_per_day: int = 6
    skew: float = 1.0
    rain_probability: float = 0.3
    cold_probability: float = 0.2
    image_dim: int = 64
    n_regions: int = 4
    routines_per_user: int = 3
    noise: float = 0.02
    skip: float = 0.02
    start_date: str = "2012-04-02"

    def validate(self) -> None:
        if self.n_categories < self.n_activities:
            raise ValueError(f"need n_categories >= n_activities, got {self.n_categories} < {self.n_activities}")
        if self.n_locations < self.n_categories:
            raise ValueError(f"need n_locations >= n_categories, got {self.n_locations} < {self.n_categories}")
        if min(self.n_users, self.n_activities, self.days, self.n_regions, self.routines_per_user) < 1:
            raise ValueError("users, activities, days, regions and routines must all be positive")
        if self.visits_per_day < 3:
            raise ValueError("visits_per_day must be at least 3")
        if self.skew < 0:
            raise ValueError("skew exponent must be non-negative")
        for name in ("rain_probability", "cold_probability", "noise", "skip"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass
class SynthCorpus:
    records: list[CheckinRecord]
    hierarchy: HierarchyMap
    locations: list[str]
    image_features: dict[str, np.ndarray]
    weather: dict[dt.date, tuple[bool, bool]]
    config: SynthConfig

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "checkins": out / "checkins.csv",
            "hierarchy": out / "hierarchy.tsv",
            "images": out / "images.txt",
            "weather": out / "weather.csv",
        }
        write_checkins(paths["checkins"], self.records)
        write_hierarchy(paths["hierarchy"], self.hierarchy)
        write_image_features(paths["images"], self.locations, self.image_features)
        write_weather(paths["weather"], self.weather)
        return paths


def location_popularity(n: int, skew: float, rng: np.random.Generator) -> np.ndarray:
    """Zipf weights ``rank**-skew`` over a random ranking; sums to 1."""
    ranks = rng.permutation(n) + 1
    w = ranks.astype(np.float64) ** (-skew)
    return w / w.sum()


def synth_generate(config: SynthConfig | None = None, seed: int = 0) -> SynthCorpus:
    cfg = config or SynthConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    n_p, n_c, n_a = cfg.n_locations, cfg.n_categories, cfg.n_activities

    cat_activity = np.arange(n_c) % n_a
    loc_category = np.concatenate([rng.permutation(n_c), rng.integers(0, n_c, n_p - n_c)])
    loc_activity = cat_activity[loc_category]
    loc_region = rng.integers(0, cfg.n_regions, n_p)
    centers = np.stack(
        [40.60 + 0.2 * rng.random(cfg.n_regions), -74.10 + 0.2 * rng.random(cfg.n_regions)], axis=1
    )
    coords = centers[loc_region] + rng.normal(0.0, 0.005, size=(n_p, 2))
    popularity = location_popularity(n_p, cfg.skew, rng)

    def pick_location(activity: int, home: int) -> int:
        w = popularity * np.where(loc_region == home, 3.0, 1.0) * np.where(loc_activity == activity, 1.0, 0.02)
        return int(rng.choice(n_p, p=w / w.sum()))

    routines: list[list[list[tuple[int, int]]]] = []
    routine_weights = []
    for _ in range(cfg.n_users):
        home = int(rng.integers(cfg.n_regions))
        pref = rng.dirichlet(np.full(n_a, 0.5))
        user_routines = []
        starts: set[int] = set()
        for _r in range(cfg.routines_per_user):
            length = int(np.clip(cfg.visits_per_day + rng.integers(-1, 2), 3, 20))
            minute = int(rng.integers(7 * 60, 10 * 60))
            stops = []
            for j in range(length):
                loc = pick_location(int(rng.choice(n_a, p=pref)), home)
                if j == 0:
                    tries = 0
                    while loc in starts and tries < 20:
                        loc = pick_location(int(rng.choice(n_a, p=pref)), home)
                        tries += 1
                    starts.add(loc)
                stops.append((loc, minute))
                minute = min(minute + int(rng.integers(40, 150)), 23 * 60 + 20)
            user_routines.append(stops)
        routines.append(user_routines)
        routine_weights.append(rng.dirichlet(np.full(cfg.routines_per_user, 3.0)))

    start = dt.date.fromisoformat(cfg.start_date)
    epoch0 = int(dt.datetime(start.year, start.month, start.day, tzinfo=dt.timezone.utc).timestamp())
    weather = {}
    for day in range(cfg.days):
        weather[start + dt.timedelta(days=day)] = (
            bool(rng.random() < cfg.rain_probability),
            bool(rng.random() < cfg.cold_probability),
        )

    records = []
    for u in range(cfg.n_users):
        for day in range(cfg.days):
            rainy = weather[start + dt.timedelta(days=day)][0]
            stops = routines[u][int(rng.choice(cfg.routines_per_user, p=routine_weights[u]))]
            if rainy and len(stops) > 3:
                stops = stops[:-1]
            last = -1
            for loc, minute in stops:
                if rng.random() < cfg.skip:
                    continue
                if rng.random() < cfg.noise:
                    loc = int(rng.choice(n_p, p=popularity))
                m = int(np.clip(minute + rng.integers(-12, 13), 0, 24 * 60 - 1))
                m = max(m, last + 1)
                if m >= 24 * 60:
                    break
                last = m
                ts = epoch0 + day * 86400 + m * 60 + int(rng.integers(0, 60))
                lat, lon = coords[loc]
                records.append(CheckinRecord(str(u), str(loc), ts, float(lat), float(lon), str(loc_category[loc])))

    scale_noise = {"coarse": 0.7, "medium": 0.8, "fine": 0.9}
    cat_centers = {s: rng.normal(size=(n_c, cfg.image_dim)) for s in SCALES}
    region_centers = {s: rng.normal(size=(cfg.n_regions, cfg.image_dim)) for s in SCALES}
    features = {
        s: cat_centers[s][loc_category]
        + 0.3 * region_centers[s][loc_region]
        + scale_noise[s] * rng.normal(size=(n_p, cfg.image_dim))
        for s in SCALES
    }

    locations = [str(i) for i in range(n_p)]
    hierarchy = HierarchyMap(
        {str(i): str(loc_category[i]) for i in range(n_p)},
        {str(c): str(cat_activity[c]) for c in range(n_c)},
    )
    return SynthCorpus(sort_records(records), hierarchy, locations, features, weather, cfg)


def synth_config_from_dict(values: dict) -> SynthConfig:
    known = set(asdict(SynthConfig()))
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown synth option(s): {sorted(unknown)}")
    return SynthConfig(**values)
