"""Implicit-feedback ingestion, user-level splits and time-windowed user states."""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

UNKNOWN_CATEGORY = -1
DEFAULT_MIN_INTERACTIONS = 10
DEFAULT_MAX_BEHAVIORS = 64
SPLIT_FORMAT_VERSION = 1


class IngestError(ValueError):
    pass


class SplitError(ValueError):
    pass


class BehaviorType(str, enum.Enum):
    CLICK = "click"
    PURCHASE = "purchase"
    CART = "cart"
    FAVOR = "favor"
    RATING = "rating"


# Raw UserBehavior-style codes accepted alongside the canonical names.
_BEHAVIOR_ALIASES = {
    "pv": BehaviorType.CLICK,
    "buy": BehaviorType.PURCHASE,
    "fav": BehaviorType.FAVOR,
}


def parse_behavior_type(token: str) -> BehaviorType:
    token = token.strip().lower()
    if token in _BEHAVIOR_ALIASES:
        return _BEHAVIOR_ALIASES[token]
    return BehaviorType(token)


@dataclass(frozen=True, slots=True)
class Item:
    item_id: int
    category_id: int = UNKNOWN_CATEGORY


@dataclass(frozen=True, slots=True)
class BehaviorEvent:
    user_id: int
    item_id: int
    category_id: int
    behavior_type: BehaviorType
    timestamp: int
    rating: float | None = None

    def sort_key(self) -> tuple[int, int]:
        return (self.timestamp, self.item_id)


class Corpus:
    """Ordered item universe; every item carries exactly one category."""

    def __init__(self, items: Iterable[Item]):
        self._category: dict[int, int] = {}
        for it in items:
            if it.item_id in self._category:
                raise ValueError(f"duplicate item_id {it.item_id}")
            self._category[it.item_id] = it.category_id
        self.item_ids = np.array(sorted(self._category), dtype=np.int64)

    def __len__(self) -> int:
        return len(self._category)

    def __contains__(self, item_id) -> bool:
        return int(item_id) in self._category

    def __iter__(self):
        for i in self.item_ids:
            yield Item(int(i), self._category[int(i)])

    def __eq__(self, other) -> bool:
        return isinstance(other, Corpus) and self._category == other._category

    def category_of(self, item_id: int) -> int:
        return self._category[int(item_id)]

    @property
    def categories(self) -> np.ndarray:
        return np.array([self._category[int(i)] for i in self.item_ids], dtype=np.int64)

    def save(self, path: str | Path) -> None:
        lines = [f"{int(i)}\t{self._category[int(i)]}\n" for i in self.item_ids]
        Path(path).write_text("".join(lines))

    @classmethod
    def load(cls, path: str | Path) -> "Corpus":
        items = []
        for n, line in enumerate(Path(path).read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                a, b = line.split("\t")
                items.append(Item(int(a), int(b)))
            except ValueError as exc:
                raise IngestError(f"{path}:{n}: malformed corpus line {line!r}") from exc
        return cls(items)


def _seeded_pick(item_id: int, options: Sequence[int], seed: int) -> int:
    if len(options) == 1:
        return options[0]
    digest = hashlib.blake2b(f"{seed}:{item_id}".encode(), digest_size=8).digest()
    return sorted(options)[int.from_bytes(digest, "little") % len(options)]


def load_item_categories(path: str | Path, seed: int = 0) -> dict[int, int]:
    """Read a MovieLens ``movies.csv`` (movieId,title,genres).

    Genres are mapped to dense ids in sorted name order; multi-genre movies get
    one genre chosen by a seeded hash of the item id.
    """
    import csv

    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            return {}
        for n, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) < 3:
                raise IngestError(f"{path}:{n}: expected movieId,title,genres")
            try:
                rows.append((int(row[0]), [g for g in row[-1].split("|") if g]))
            except ValueError as exc:
                raise IngestError(f"{path}:{n}: bad movieId {row[0]!r}") from exc
    names = sorted({g for _, gs in rows for g in gs if g != "(no genres listed)"})
    gid = {g: i for i, g in enumerate(names)}
    out = {}
    for item, genres in rows:
        ids = [gid[g] for g in genres if g in gid]
        out[item] = _seeded_pick(item, ids, seed) if ids else UNKNOWN_CATEGORY
    return out


def ingest(
    path: str | Path,
    format: str = "movielens_ratings",
    *,
    min_rating: float = 4.0,
    item_categories: dict[int, int] | None = None,
) -> tuple[Corpus, list[BehaviorEvent]]:
    """Parse a behavior log into a corpus and an event list.

    ``movielens_ratings`` rows rated below ``min_rating`` are dropped and the
    rest become clicks. ``tabular_behavior`` rows are kept as-is.
    """
    path = Path(path)
    events: list[BehaviorEvent] = []
    with open(path, encoding="utf-8") as f:
        if format == "movielens_ratings":
            header = f.readline()
            if header and not header.lower().startswith("user"):
                raise IngestError(f"{path}:1: expected header line, got {header.strip()!r}")
            for n, line in enumerate(f, 2):
                line = line.strip()
                if not line:
                    continue
                parts = line.split(",")
                try:
                    if len(parts) != 4:
                        raise ValueError
                    user, item = int(parts[0]), int(parts[1])
                    rating, ts = float(parts[2]), int(float(parts[3]))
                except ValueError:
                    raise IngestError(f"{path}:{n}: malformed ratings line {line!r}") from None
                if ts < 0:
                    raise IngestError(f"{path}:{n}: negative timestamp")
                if rating < min_rating:
                    continue
                cat = UNKNOWN_CATEGORY
                if item_categories is not None:
                    cat = item_categories.get(item, UNKNOWN_CATEGORY)
                events.append(BehaviorEvent(user, item, cat, BehaviorType.CLICK, ts, rating))
        elif format == "tabular_behavior":
            for n, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                parts = line.split("\t")
                try:
                    if len(parts) != 5:
                        raise ValueError
                    user, item, cat = int(parts[0]), int(parts[1]), int(parts[2])
                    btype = parse_behavior_type(parts[3])
                    ts = int(parts[4])
                except ValueError:
                    raise IngestError(f"{path}:{n}: malformed behavior line {line!r}") from None
                if ts < 0:
                    raise IngestError(f"{path}:{n}: negative timestamp")
                events.append(BehaviorEvent(user, item, cat, btype, ts))
        else:
            raise ValueError(f"unknown format {format!r}")
    if not events:
        raise IngestError(f"{path}: empty corpus (no events retained)")
    return corpus_from_events(events), events


def corpus_from_events(events: Iterable[BehaviorEvent], seed: int = 0) -> Corpus:
    cats: dict[int, set[int]] = {}
    for e in events:
        cats.setdefault(e.item_id, set()).add(e.category_id)
    items = []
    for item, cs in cats.items():
        known = [c for c in cs if c != UNKNOWN_CATEGORY]
        items.append(Item(item, _seeded_pick(item, known, seed) if known else UNKNOWN_CATEGORY))
    return Corpus(items)


def group_by_user(events: Iterable[BehaviorEvent]) -> dict[int, tuple[BehaviorEvent, ...]]:
    by_user: dict[int, list[BehaviorEvent]] = {}
    for e in events:
        by_user.setdefault(e.user_id, []).append(e)
    return {u: tuple(sorted(evs, key=BehaviorEvent.sort_key)) for u, evs in sorted(by_user.items())}


@dataclass
class DatasetSplit:
    train_users: tuple[int, ...]
    validation_users: tuple[int, ...]
    test_users: tuple[int, ...]
    events_by_user: dict[int, tuple[BehaviorEvent, ...]]
    seed: int
    params: dict = field(default_factory=dict)

    def known_count(self, user: int) -> int:
        """Length of the observed prefix of an evaluation user's history."""
        return math.ceil(len(self.events_by_user[user]) / 2)

    def known(self, user: int) -> tuple[BehaviorEvent, ...]:
        return self.events_by_user[user][: self.known_count(user)]

    def ground_truth(self, user: int) -> tuple[BehaviorEvent, ...]:
        return self.events_by_user[user][self.known_count(user) :]

    def eval_users(self, which: str) -> tuple[int, ...]:
        if which == "test":
            return self.test_users
        if which in ("validation", "val"):
            return self.validation_users
        raise ValueError(f"unknown evaluation user set {which!r}")

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        roles = {u: "train" for u in self.train_users}
        roles.update({u: "validation" for u in self.validation_users})
        roles.update({u: "test" for u in self.test_users})
        with open(d / "events.jsonl", "w") as f:
            for user, evs in self.events_by_user.items():
                for e in evs:
                    rec = [user, e.item_id, e.category_id, e.behavior_type.value, e.timestamp, e.rating]
                    f.write(json.dumps(rec) + "\n")
        with open(d / "users.jsonl", "w") as f:
            for user in self.events_by_user:
                rec = {"user_id": user, "role": roles[user], "n_events": len(self.events_by_user[user])}
                if roles[user] != "train":
                    rec["known"] = self.known_count(user)
                f.write(json.dumps(rec) + "\n")
        manifest = {"format_version": SPLIT_FORMAT_VERSION, "seed": self.seed, "params": self.params}
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> "DatasetSplit":
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        if manifest.get("format_version") != SPLIT_FORMAT_VERSION:
            raise SplitError(f"{d}: unsupported split format {manifest.get('format_version')}")
        by_user: dict[int, list[BehaviorEvent]] = {}
        with open(d / "events.jsonl") as f:
            for line in f:
                u, i, c, t, ts, r = json.loads(line)
                by_user.setdefault(u, []).append(BehaviorEvent(u, i, c, BehaviorType(t), ts, r))
        roles: dict[str, list[int]] = {"train": [], "validation": [], "test": []}
        with open(d / "users.jsonl") as f:
            for line in f:
                rec = json.loads(line)
                roles[rec["role"]].append(rec["user_id"])
        return cls(
            train_users=tuple(roles["train"]),
            validation_users=tuple(roles["validation"]),
            test_users=tuple(roles["test"]),
            events_by_user={u: tuple(evs) for u, evs in by_user.items()},
            seed=manifest["seed"],
            params=manifest["params"],
        )


def split(
    events: Iterable[BehaviorEvent],
    n_test_users: int,
    n_validation_users: int,
    seed: int,
    min_interactions: int = DEFAULT_MIN_INTERACTIONS,
) -> DatasetSplit:
    """Random user-level train/validation/test split.

    Users with fewer than ``min_interactions`` events are dropped first.
    Evaluation users keep their whole history; the first half (rounded up) is
    the known prefix and the remainder is ground truth.
    """
    by_user = {u: evs for u, evs in group_by_user(events).items() if len(evs) >= min_interactions}
    users = np.array(sorted(by_user), dtype=np.int64)
    need = n_test_users + n_validation_users
    if len(users) <= need:
        raise SplitError(
            f"insufficient users: need more than {need} "
            f"({n_test_users} test + {n_validation_users} validation), have {len(users)}"
        )
    perm = np.random.default_rng(seed).permutation(len(users))
    test = tuple(sorted(int(u) for u in users[perm[:n_test_users]]))
    val = tuple(sorted(int(u) for u in users[perm[n_test_users:need]]))
    train = tuple(sorted(int(u) for u in users[perm[need:]]))
    params = {
        "n_test_users": n_test_users,
        "n_validation_users": n_validation_users,
        "min_interactions": min_interactions,
    }
    return DatasetSplit(train, val, test, by_user, seed, params)


@dataclass(frozen=True)
class UserState:
    user_id: int
    windows: tuple[tuple[int, ...], ...]
    as_of: int

    @property
    def n_behaviors(self) -> int:
        return sum(len(w) for w in self.windows)

    def to_json(self) -> dict:
        return {"user_id": self.user_id, "as_of": self.as_of, "windows": [list(w) for w in self.windows]}

    @classmethod
    def from_json(cls, rec: dict) -> "UserState":
        return cls(rec["user_id"], tuple(tuple(int(i) for i in w) for w in rec["windows"]), rec["as_of"])


def window_sizes(n: int, n_windows: int) -> list[int]:
    """Equal-count partition sizes, larger windows first (most recent side)."""
    q, r = divmod(n, n_windows)
    return [q + 1] * r + [q] * (n_windows - r)


def partition_recent(items: Sequence[int], n_windows: int, max_behaviors: int) -> tuple[tuple[int, ...], ...]:
    """Split a chronologically ordered item list into recency windows.

    Only the last ``max_behaviors`` items are kept; window 0 holds the most
    recent ones.
    """
    recent = list(items[-max_behaviors:])[::-1] if max_behaviors > 0 else []
    out, pos = [], 0
    for size in window_sizes(len(recent), n_windows):
        out.append(tuple(recent[pos : pos + size]))
        pos += size
    return tuple(out)


def build_user_state(
    events_of_user: Sequence[BehaviorEvent],
    as_of: int,
    n_windows: int,
    max_behaviors: int = DEFAULT_MAX_BEHAVIORS,
    *,
    strict: bool = False,
    user_id: int | None = None,
) -> UserState:
    """Bucket a user's behaviors up to ``as_of`` into ``n_windows`` windows.

    With ``strict=True`` only behaviors strictly before ``as_of`` are used.
    """
    if n_windows < 1:
        raise ValueError("n_windows must be >= 1")
    evs = sorted(events_of_user, key=BehaviorEvent.sort_key)
    if strict:
        kept = [e.item_id for e in evs if e.timestamp < as_of]
    else:
        kept = [e.item_id for e in evs if e.timestamp <= as_of]
    if user_id is None:
        user_id = evs[0].user_id if evs else -1
    return UserState(user_id, partition_recent(kept, n_windows, max_behaviors), as_of)
