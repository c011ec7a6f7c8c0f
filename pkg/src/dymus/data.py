"""Interaction-log ingestion, filtering, leave-one-out splitting and synthetic data."""
from __future__ import annotations

import csv
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

DATASET_FORMAT = "dymus-dataset"
DATASET_VERSION = 1
MAX_MALFORMED_FRACTION = 0.10
DEFAULT_BEHAVIORS = ("purchase", "click", "cart", "favorite")
TAOBAO_BEHAVIOR_MAP = {"buy": "purchase", "pv": "click", "cart": "cart", "fav": "favorite"}


@dataclass(frozen=True)
class InteractionRecord:
    user: str
    item: str
    behavior: str
    timestamp: int
    category: str | None = None


@dataclass
class LogSchema:
    """Column mapping for delimited logs.

    ``columns`` maps the fields ``user``, ``item``, ``behavior``, ``timestamp``
    (and optionally ``category``) to either header names or 0-based positions.
    ``behavior_map`` translates raw labels to canonical behavior names; labels
    missing from it are skipped.  ``None`` keeps labels as they are.
    """

    columns: dict[str, str | int]
    behavior_map: dict[str, str] | None = None
    target_behavior: str = "purchase"
    delimiter: str = ","
    has_header: bool = False

    @classmethod
    def taobao(cls) -> "LogSchema":
        # UserBehavior.csv: user, item, category, behavior, timestamp (no header)
        return cls(columns={"user": 0, "item": 1, "category": 2, "behavior": 3, "timestamp": 4},
                   behavior_map=dict(TAOBAO_BEHAVIOR_MAP))


@dataclass
class IngestStats:
    rows: int = 0
    records: int = 0
    malformed: int = 0
    unknown_behavior: int = 0


@dataclass
class MultiBehaviorHistory:
    user: int
    sequences: dict[int, list[int]]
    timestamps: dict[int, list[int]]

    def total(self) -> int:
        return sum(len(s) for s in self.sequences.values())


@dataclass
class PreparedData:
    histories: list[MultiBehaviorHistory]
    user_ids: list[str]
    item_ids: list[str]
    behaviors: list[str]
    target_behavior: int = 0
    item_categories: list[str | None] = field(default_factory=list)

    @property
    def item_count(self) -> int:
        return len(self.item_ids)

    @property
    def user_count(self) -> int:
        return len(self.user_ids)


@dataclass
class DatasetSplit:
    train: list[MultiBehaviorHistory]
    validation_items: np.ndarray
    test_items: np.ndarray
    validation_times: np.ndarray
    test_times: np.ndarray
    item_count: int
    behaviors: list[str]
    target_behavior: int = 0
    item_categories: list[str | None] = field(default_factory=list)

    @property
    def user_count(self) -> int:
        return len(self.train)

    @property
    def behavior_count(self) -> int:
        return len(self.behaviors)


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

def ingest_log(path, schema: LogSchema) -> tuple[list[InteractionRecord], IngestStats]:
    path = Path(path)
    required = ("user", "item", "behavior", "timestamp")
    missing = [k for k in required if k not in schema.columns]
    if missing:
        raise ValueError(f"schema is missing column(s): {', '.join(missing)}")
    stats = IngestStats()
    records: list[InteractionRecord] = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        positions = dict(schema.columns)
        if schema.has_header:
            header = next(reader, [])
            for key, col in schema.columns.items():
                if isinstance(col, str):
                    if col not in header:
                        raise ValueError(f"{path}: header has no column {col!r}")
                    positions[key] = header.index(col)
        elif any(isinstance(c, str) for c in positions.values()):
            raise ValueError("column names require has_header: true")
        width = max(positions.values()) + 1
        for row in reader:
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            stats.rows += 1
            if len(row) < width:
                stats.malformed += 1
                continue
            try:
                ts = int(float(row[positions["timestamp"]]))
            except ValueError:
                stats.malformed += 1
                continue
            user, item = row[positions["user"]].strip(), row[positions["item"]].strip()
            if not user or not item:
                stats.malformed += 1
                continue
            raw = row[positions["behavior"]].strip()
            behavior = raw if schema.behavior_map is None else schema.behavior_map.get(raw)
            if behavior is None:
                stats.unknown_behavior += 1
                continue
            category = row[positions["category"]].strip() if "category" in positions else None
            records.append(InteractionRecord(user, item, behavior, ts, category))
    stats.records = len(records)
    if stats.rows and stats.malformed / stats.rows > MAX_MALFORMED_FRACTION:
        raise ValueError(f"{path}: {stats.malformed}/{stats.rows} malformed rows; check the schema")
    if stats.malformed or stats.unknown_behavior:
        log.info("%s: skipped %d malformed and %d unknown-behavior rows",
                 path, stats.malformed, stats.unknown_behavior)
    return records, stats


# ---------------------------------------------------------------------------
# filtering
# ---------------------------------------------------------------------------

def _truncate(ordered: dict[str, list[tuple[int, int, InteractionRecord]]], cap: int, scope: str):
    out = {}
    for user, events in ordered.items():
        if scope == "all":
            out[user] = events[-cap:]
        else:
            by_b: dict[str, list] = defaultdict(list)
            for ev in events:
                by_b[ev[2].behavior].append(ev)
            kept = [ev for evs in by_b.values() for ev in evs[-cap:]]
            out[user] = sorted(kept, key=lambda ev: (ev[0], ev[1]))
    return out


def filter_and_truncate(records: Sequence[InteractionRecord], target_behavior: str = "purchase",
                        min_target: int = 5, recent_cap: int = 500, cap_scope: str = "all",
                        behaviors: Sequence[str] | None = None) -> PreparedData:
    """Drop sparse users/items (by target-behavior count) and keep each user's recent history.

    Filtering and truncation alternate until neither removes anything, so the
    output is a fixed point of this function.
    """
    if not records:
        raise ValueError("filter_and_truncate: no records")
    if cap_scope not in ("all", "per_behavior"):
        raise ValueError(f"recent_cap_scope must be 'all' or 'per_behavior', got {cap_scope!r}")
    # stable order: timestamp, then input position
    ordered: dict[str, list[tuple[int, int, InteractionRecord]]] = defaultdict(list)
    for pos, rec in enumerate(records):
        ordered[rec.user].append((rec.timestamp, pos, rec))
    for events in ordered.values():
        events.sort(key=lambda ev: (ev[0], ev[1]))

    while True:
        while True:
            user_n: Counter = Counter()
            item_n: Counter = Counter()
            for user, events in ordered.items():
                for _, _, rec in events:
                    if rec.behavior == target_behavior:
                        user_n[user] += 1
                        item_n[rec.item] += 1
            before = sum(len(e) for e in ordered.values())
            ordered = {
                u: [ev for ev in events if item_n[ev[2].item] >= min_target]
                for u, events in ordered.items() if user_n[u] >= min_target
            }
            ordered = {u: e for u, e in ordered.items() if e}
            if sum(len(e) for e in ordered.values()) == before:
                break
        truncated = _truncate(ordered, recent_cap, cap_scope)
        if sum(len(e) for e in truncated.values()) == sum(len(e) for e in ordered.values()):
            break
        ordered = truncated

    if not ordered:
        raise ValueError("filter_and_truncate: nothing left after filtering")

    present = {ev[2].behavior for events in ordered.values() for ev in events}
    if behaviors is None:
        behaviors = [target_behavior] + sorted(present - {target_behavior})
    else:
        behaviors = list(behaviors)
        unknown = present - set(behaviors)
        if unknown:
            raise ValueError(f"behaviors {sorted(unknown)} present in data but not in behavior_order")
    if target_behavior not in behaviors:
        raise ValueError(f"target behavior {target_behavior!r} not in behavior order")
    b_index = {b: i for i, b in enumerate(behaviors)}

    user_ids = sorted(ordered)
    item_ids = sorted({ev[2].item for events in ordered.values() for ev in events})
    item_index = {it: i for i, it in enumerate(item_ids)}
    categories: list[str | None] = [None] * len(item_ids)
    histories = []
    for u_idx, user in enumerate(user_ids):
        seqs: dict[int, list[int]] = {i: [] for i in range(len(behaviors))}
        times: dict[int, list[int]] = {i: [] for i in range(len(behaviors))}
        for ts, _, rec in ordered[user]:
            b = b_index[rec.behavior]
            it = item_index[rec.item]
            seqs[b].append(it)
            times[b].append(ts)
            if rec.category is not None:
                categories[it] = rec.category
        histories.append(MultiBehaviorHistory(u_idx, seqs, times))
    return PreparedData(histories, user_ids, item_ids, behaviors, b_index[target_behavior], categories)


def histories_to_records(data: PreparedData) -> list[InteractionRecord]:
    """Inverse view of ``filter_and_truncate`` output (for re-filtering and checks)."""
    out = []
    for h in data.histories:
        events = []
        for b, items in h.sequences.items():
            for it, ts in zip(items, h.timestamps[b]):
                events.append((ts, b, it))
        for ts, b, it in sorted(events, key=lambda e: e[0]):
            out.append(InteractionRecord(data.user_ids[h.user], data.item_ids[it],
                                         data.behaviors[b], ts, data.item_categories[it]
                                         if data.item_categories else None))
    return out


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

def leave_one_out_split(data: PreparedData) -> DatasetSplit:
    """Hold out each user's last target item for test and the one before for validation.

    Non-target sequences stay in train, except interactions with the test
    item at or after the test timestamp.
    """
    tb = data.target_behavior
    train, val_items, test_items, val_times, test_times = [], [], [], [], []
    for h in data.histories:
        target = h.sequences[tb]
        if len(target) < 3:
            raise ValueError(f"user {data.user_ids[h.user]!r} has {len(target)} target interactions; need >= 3")
        test_item, test_ts = target[-1], h.timestamps[tb][-1]
        seqs = {tb: list(target[:-2])}
        times = {tb: list(h.timestamps[tb][:-2])}
        for b, items in h.sequences.items():
            if b == tb:
                continue
            keep = [(it, ts) for it, ts in zip(items, h.timestamps[b])
                    if not (it == test_item and ts >= test_ts)]
            seqs[b] = [it for it, _ in keep]
            times[b] = [ts for _, ts in keep]
        train.append(MultiBehaviorHistory(h.user, dict(sorted(seqs.items())), dict(sorted(times.items()))))
        val_items.append(target[-2])
        val_times.append(h.timestamps[tb][-2])
        test_items.append(test_item)
        test_times.append(test_ts)
    return DatasetSplit(train, np.asarray(val_items, dtype=np.int64), np.asarray(test_items, dtype=np.int64),
                        np.asarray(val_times, dtype=np.int64), np.asarray(test_times, dtype=np.int64),
                        data.item_count, list(data.behaviors), tb, list(data.item_categories))


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass
class SyntheticConfig:
    users: int = 200
    items: int = 50
    behaviors: int = 3
    correlation_strength: float = 0.9
    seed: int = 0
    category_size: int = 5
    latent_dim: int = 16
    preference_sharpness: float = 12.0
    clicks: tuple[int, int] = (15, 40)
    targets: tuple[int, int] = (6, 12)
    auxiliary: tuple[int, int] = (3, 8)
    recent_window: int = 3
    popularity_skew: float = 1.5
    interests: int = 3
    drift: float = 0.1

    def validate(self) -> None:
        if self.users < 1:
            raise ValueError("synthetic: users must be >= 1")
        if self.items < 10:
            raise ValueError("synthetic: items must be >= 10")
        if self.behaviors < 2:
            raise ValueError("synthetic: behaviors must be >= 2")
        if not 0.0 <= self.correlation_strength <= 1.0:
            raise ValueError("synthetic: correlation_strength must lie in [0, 1]")
        if self.interests < 1 or not 0.0 <= self.drift <= 1.0:
            raise ValueError("synthetic: interests must be >= 1 and drift in [0, 1]")
        if self.popularity_skew < 0:
            raise ValueError("synthetic: popularity_skew must be >= 0")
        if self.category_size < 1 or self.recent_window < 1:
            raise ValueError("synthetic: category_size and recent_window must be >= 1")
        if self.targets[0] < 5:
            raise ValueError("synthetic: at least 5 target interactions per user are required")


def behavior_names(n: int) -> list[str]:
    names = list(DEFAULT_BEHAVIORS[:n])
    names += [f"behavior{k}" for k in range(len(names), n)]
    return names


def generate_synthetic(config: SyntheticConfig) -> list[InteractionRecord]:
    """Multi-behavior logs with a planted click -> purchase dependency.

    Items fall into categories of ``category_size``.  Each user holds a few
    interest categories; the active one sets the latent preference vector and
    switches with probability ``drift`` after every event.  Clicks are drawn
    by softmax over item affinities to the preference vector.  Each purchase,
    with probability ``correlation_strength``, comes from the category of one
    of the last ``recent_window`` clicks; otherwise from a global Zipf
    popularity profile (``popularity_skew``; 0 is uniform) that ignores the
    user.  Auxiliary behaviors (cart, favorite, ...) follow the recent clicks
    half of the time and the click distribution otherwise.  Behavior 0 is the
    target ("purchase"), behavior 1 is "click".
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    n_items = config.items
    n_cat = max(2, n_items // config.category_size)
    category = np.arange(n_items) * n_cat // n_items
    members = [np.flatnonzero(category == c) for c in range(n_cat)]
    centroids = rng.normal(size=(n_cat, config.latent_dim))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    noise = 0.3 / np.sqrt(config.latent_dim)
    item_vecs = centroids[category] + noise * rng.normal(size=(n_items, config.latent_dim))
    popularity = 1.0 / np.arange(1, n_items + 1) ** config.popularity_skew
    popularity = popularity[rng.permutation(n_items)]
    popularity /= popularity.sum()
    names = behavior_names(config.behaviors)
    target, click, aux = names[0], names[1], names[2:]
    n_interests = min(config.interests, n_cat)

    def near_recent(recent: list[int]) -> int:
        window = recent[-config.recent_window:]
        anchor = window[rng.integers(len(window))]
        return int(rng.choice(members[category[anchor]]))

    records: list[InteractionRecord] = []
    for u in range(config.users):
        interests = rng.choice(n_cat, size=n_interests, replace=False)
        click_ps = []
        for c in interests:
            pref = config.preference_sharpness * centroids[c] \
                + rng.normal(size=config.latent_dim) / np.sqrt(config.latent_dim)
            logits = item_vecs @ pref
            p = np.exp(logits - logits.max())
            click_ps.append(p / p.sum())
        active = int(rng.integers(n_interests))
        kinds = [click] * (int(rng.integers(config.clicks[0], config.clicks[1] + 1)) - 1)
        kinds += [target] * int(rng.integers(config.targets[0], config.targets[1] + 1))
        for b in aux:
            kinds += [b] * int(rng.integers(config.auxiliary[0], config.auxiliary[1] + 1))
        order = rng.permutation(len(kinds))
        kinds = [click] + [kinds[i] for i in order]
        recent: list[int] = []
        for t, kind in enumerate(kinds):
            if kind == click:
                item = int(rng.choice(n_items, p=click_ps[active]))
                recent.append(item)
            elif kind == target:
                if rng.random() < config.correlation_strength:
                    item = near_recent(recent)
                else:
                    item = int(rng.choice(n_items, p=popularity))
            elif rng.random() < 0.5:
                item = near_recent(recent)
            else:
                item = int(rng.choice(n_items, p=click_ps[active]))
            records.append(InteractionRecord(f"u{u}", f"i{item}", kind, t, f"c{category[item]}"))
            if n_interests > 1 and rng.random() < config.drift:
                active = int(rng.choice([i for i in range(n_interests) if i != active]))
    return records


# ---------------------------------------------------------------------------
# canonical dataset file
# ---------------------------------------------------------------------------

def dataset_stats(data: PreparedData) -> dict:
    counts = {b: 0 for b in data.behaviors}
    for h in data.histories:
        for b, items in h.sequences.items():
            counts[data.behaviors[b]] += len(items)
    return {
        "users": data.user_count,
        "items": data.item_count,
        "interactions": counts,
        "total_interactions": sum(counts.values()),
        "target_behavior": data.behaviors[data.target_behavior],
    }


def write_dataset(path, data: PreparedData) -> None:
    """One JSON header line, then one line per user with per-behavior index arrays."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": DATASET_FORMAT, "version": DATASET_VERSION,
        "behaviors": data.behaviors, "target_behavior": data.behaviors[data.target_behavior],
        "item_ids": data.item_ids, "item_categories": data.item_categories,
        "user_count": data.user_count,
    }
    with path.open("w") as fh:
        fh.write(json.dumps(header) + "\n")
        for h in data.histories:
            row = {
                "user": h.user, "id": data.user_ids[h.user],
                "sequences": {data.behaviors[b]: s for b, s in h.sequences.items()},
                "timestamps": {data.behaviors[b]: t for b, t in h.timestamps.items()},
            }
            fh.write(json.dumps(row) + "\n")


def read_dataset(path) -> PreparedData:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty dataset file")
    header = json.loads(lines[0])
    if header.get("format") != DATASET_FORMAT or header.get("version") != DATASET_VERSION:
        raise ValueError(f"{path}: not a {DATASET_FORMAT} v{DATASET_VERSION} file")
    behaviors = header["behaviors"]
    b_index = {b: i for i, b in enumerate(behaviors)}
    histories, user_ids = [], []
    for line in lines[1:]:
        row = json.loads(line)
        seqs = {i: [] for i in range(len(behaviors))}
        times = {i: [] for i in range(len(behaviors))}
        for b, s in row["sequences"].items():
            seqs[b_index[b]] = list(s)
            times[b_index[b]] = list(row["timestamps"][b])
        histories.append(MultiBehaviorHistory(row["user"], seqs, times))
        user_ids.append(row["id"])
    if len(histories) != header["user_count"]:
        raise ValueError(f"{path}: header lists {header['user_count']} users, found {len(histories)}")
    return PreparedData(histories, user_ids, header["item_ids"], behaviors,
                        b_index[header["target_behavior"]], header.get("item_categories") or [])


def records_from_rows(rows: Iterable[tuple]) -> list[InteractionRecord]:
    return [InteractionRecord(str(u), str(i), str(b), int(t)) for u, i, b, t in rows]
