"""Seeded synthetic interaction logs.

``planted_clusters`` draws users whose behaviors concentrate on a few item
clusters. ``movielens_like`` writes ``ratings.csv``/``movies.csv`` files in
the MovieLens layout with genre preferences and short-term follow-up
behavior, so the full ingest path can run without downloaded data.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import BehaviorEvent, BehaviorType, Corpus, Item


@dataclass
class PlantedCorpus:
    corpus: Corpus
    events: list[BehaviorEvent]
    cluster_of: dict[int, int]


def _zipf_weights(n: int, s: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


def planted_clusters(
    n_items: int = 4096,
    n_clusters: int = 64,
    n_users: int = 2000,
    events_per_user: tuple[int, int] = (20, 60),
    clusters_per_user: tuple[int, int] = (1, 3),
    noise: float = 0.15,
    item_skew: float = 0.6,
    scramble_categories: bool = False,
    seed: int = 0,
) -> PlantedCorpus:
    """Users with Dirichlet weights over a few clusters; ``noise`` of events are uniform items.

    Item ids are shuffled relative to clusters. Categories equal clusters
    unless ``scramble_categories``, in which case they are a random balanced
    relabelling that carries no cluster information.
    """
    rng = np.random.default_rng(seed)
    item_ids = rng.permutation(n_items) + 1
    cluster = np.arange(n_items) % n_clusters
    members = [item_ids[cluster == c] for c in range(n_clusters)]
    within = [_zipf_weights(len(m), item_skew) for m in members]
    if scramble_categories:
        category = rng.permutation(cluster)
    else:
        category = cluster
    cluster_of = {int(i): int(c) for i, c in zip(item_ids, cluster)}
    corpus = Corpus(Item(int(i), int(c)) for i, c in zip(item_ids, category))
    cat_of = dict(zip(item_ids.tolist(), category.tolist()))
    events = []
    for u in range(n_users):
        k = int(rng.integers(clusters_per_user[0], clusters_per_user[1] + 1))
        prefs = rng.choice(n_clusters, size=k, replace=False)
        weights = rng.dirichlet(np.ones(k))
        n = int(rng.integers(events_per_user[0], events_per_user[1] + 1))
        is_noise = rng.random(n) < noise
        picks = rng.choice(k, size=n, p=weights)
        seen = set()
        t = int(rng.integers(1_000_000, 2_000_000))
        for j in range(n):
            if is_noise[j]:
                item = int(item_ids[rng.integers(n_items)])
            else:
                c = prefs[picks[j]]
                item = int(rng.choice(members[c], p=within[c]))
            if item in seen:
                continue
            seen.add(item)
            t += int(rng.integers(1, 600))
            events.append(BehaviorEvent(u + 1, item, cat_of[item], BehaviorType.CLICK, t))
    return PlantedCorpus(corpus, events, cluster_of)


GENRES = (
    "Action", "Adventure", "Animation", "Children's", "Comedy", "Crime", "Documentary", "Drama", "Fantasy",
    "Film-Noir", "Horror", "Musical", "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
)  # fmt: skip


def movielens_like(
    directory: str | Path,
    n_users: int = 6040,
    n_items: int = 3706,
    group_size: int = 8,
    events_per_user: tuple[int, int] = (20, 200),
    follow_up: float = 0.5,
    recent: int = 5,
    low_rating_share: float = 0.3,
    seed: int = 0,
) -> tuple[Path, Path]:
    """Write ``ratings.csv`` and ``movies.csv`` with MovieLens columns.

    Items come in small groups sharing a genre. Each user has a couple of
    favourite genres; an event either follows up on one of the ``recent``
    last liked items (another item of its group) or samples a genre
    preference. ``low_rating_share`` of rows are random items rated 1-3,
    which ingestion filters out.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    movie_ids = np.sort(rng.choice(np.arange(1, 2 * n_items), size=n_items, replace=False))
    n_groups = -(-n_items // group_size)
    group = rng.permutation(np.arange(n_items) % n_groups)
    group_genre = rng.integers(len(GENRES), size=n_groups)
    genre = group_genre[group]
    # second genre on some movies, so multi-genre handling is exercised
    extra = np.where(rng.random(n_items) < 0.3, rng.integers(len(GENRES), size=n_items), -1)
    members = [np.flatnonzero(group == g) for g in range(n_groups)]
    popularity = rng.pareto(1.5, size=n_items) + 1.0
    by_genre = [np.flatnonzero(genre == g) for g in range(len(GENRES))]
    genre_p = [popularity[m] / popularity[m].sum() for m in by_genre]

    with open(directory / "movies.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["movieId", "title", "genres"])
        for i, mid in enumerate(movie_ids):
            names = [GENRES[genre[i]]]
            if extra[i] >= 0 and extra[i] != genre[i]:
                names.append(GENRES[extra[i]])
            w.writerow([int(mid), f"Movie {int(mid)} (2000)", "|".join(names)])

    rows = []
    for u in range(1, n_users + 1):
        k = int(rng.integers(1, 4))
        favs = rng.choice(len(GENRES), size=k, replace=False)
        fav_w = rng.dirichlet(np.full(k, 2.0))
        n = int(np.clip(rng.geometric(1.0 / 60.0) + events_per_user[0], *events_per_user))
        liked: list[int] = []
        seen = set()
        t = int(rng.integers(956_703_932, 1_046_454_590))
        for _ in range(n):
            t += int(rng.integers(1, 3600))
            if rng.random() < low_rating_share:
                item = int(rng.integers(n_items))
                rating = int(rng.integers(1, 4))
            else:
                if liked and rng.random() < follow_up:
                    anchor = liked[-1 - int(rng.integers(min(recent, len(liked))))]
                    pool = members[group[anchor]]
                    item = int(pool[rng.integers(len(pool))])
                else:
                    g = favs[rng.choice(k, p=fav_w)]
                    item = int(rng.choice(by_genre[g], p=genre_p[g]))
                rating = int(rng.integers(4, 6))
            if item in seen:
                continue
            seen.add(item)
            if rating >= 4:
                liked.append(item)
            rows.append((u, int(movie_ids[item]), rating, t))
    with open(directory / "ratings.csv", "w", newline="", encoding="utf-8") as f:
        f.write("userId,movieId,rating,timestamp\n")
        for u, m, r, t in rows:
            f.write(f"{u},{m},{r}.0,{t}\n")
    return directory / "ratings.csv", directory / "movies.csv"
