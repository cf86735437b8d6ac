"""Top-M recommendation metrics, filtered evaluation protocols and simple baselines."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .data import UNKNOWN_CATEGORY, BehaviorEvent, DatasetSplit, build_user_state
from .retrieval import retrieve_hs_many, retrieve_tdm_many

FILTER_MODES = ("none", "interacted_items", "interacted_categories")
METRICS = ("precision", "recall", "f_measure", "novelty")

# A retriever maps each user's known history to a ranked item list of length <= n.
Retriever = Callable[[Sequence[Sequence[BehaviorEvent]], int], list[list[int]]]


def precision_recall_f(recalled: Iterable[int], truth: Iterable[int], M: int) -> tuple[float, float, float]:
    P, G = set(recalled), set(truth)
    if not G:
        raise ValueError("ground truth is empty")
    hit = len(P & G)
    precision = hit / M
    recall = hit / len(G)
    f = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f


def novelty(recalled: Iterable[int], seen: Iterable[int], M: int) -> float:
    return len(set(recalled) - set(seen)) / M


@dataclass
class ModeResult:
    mode: str
    users: int = 0
    dropped_users: int = 0
    shortfall_users: int = 0
    shortfall_items: int = 0
    metrics: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "users": self.users,
            "dropped_users": self.dropped_users,
            "shortfall_users": self.shortfall_users,
            "shortfall_items": self.shortfall_items,
            **self.metrics,
        }


@dataclass
class EvalReport:
    M: int
    modes: dict[str, ModeResult]
    config: dict = field(default_factory=dict)
    per_user: list[dict] = field(default_factory=list)

    def __getitem__(self, mode: str) -> dict[str, float]:
        return self.modes[mode].metrics

    def to_records(self) -> list[dict]:
        return [{"M": self.M, **r.to_dict(), "config": self.config} for r in self.modes.values()]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.to_records())

    def to_table(self, name: str = "model") -> str:
        head = f"{'method':<24}{'filter':<24}" + "".join(f"{m + '@' + str(self.M):>16}" for m in METRICS)
        lines = [head, "-" * len(head)]
        for r in self.modes.values():
            vals = "".join(f"{100 * r.metrics[m]:>15.2f}%" for m in METRICS)
            lines.append(f"{name:<24}{r.mode:<24}{vals}")
        return "\n".join(lines) + "\n"

    def write(self, directory: str | Path, name: str = "model") -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "report.jsonl").write_text(self.to_jsonl())
        (directory / "report.txt").write_text(self.to_table(name))


def _filter(ranked: Sequence[int], banned: Callable[[int], bool]) -> list[int]:
    return [i for i in ranked if not banned(i)]


def evaluate_lists(
    recalled: dict[str, Sequence[Sequence[int]]],
    truth: Sequence[Sequence[int]],
    seen: Sequence[Sequence[int]],
    M: int,
    category_of: Callable[[int], int] | None = None,
    users: Sequence[int] | None = None,
) -> EvalReport:
    """Metrics from already retrieved ranked lists, one list per user and mode.

    Filtered modes drop banned items from the ranked list and the ground truth,
    then keep the first M remaining candidates. Users left without ground
    truth are dropped; users with fewer than M candidates are counted as a
    shortfall.
    """
    modes = {}
    per_user = []
    users = list(range(len(truth))) if users is None else list(users)
    for mode, lists in recalled.items():
        if mode not in FILTER_MODES:
            raise ValueError(f"unknown filter mode {mode!r}")
        res = ModeResult(mode)
        sums = {m: [] for m in METRICS}
        for uid, ranked, G, S in zip(users, lists, truth, seen):
            S = set(S)
            if mode == "none":
                ban = None
            elif mode == "interacted_items":
                ban = S.__contains__
            else:
                if category_of is None:
                    raise ValueError("interacted_categories needs item categories")
                cats = {category_of(i) for i in S}
                ban = lambda i, cats=cats: category_of(i) in cats  # noqa: E731
            if ban is None:
                P, G_f = list(ranked)[:M], list(G)
            else:
                P = _filter(ranked, ban)[:M]
                G_f = [g for g in G if not ban(g)]
            if not G_f:
                res.dropped_users += 1
                continue
            if len(P) < M:
                res.shortfall_users += 1
                res.shortfall_items += M - len(P)
            p, r, f = precision_recall_f(P, G_f, M)
            nv = novelty(P, S, M)
            for m, v in zip(METRICS, (p, r, f, nv)):
                sums[m].append(v)
            per_user.append({"mode": mode, "user": int(uid), "precision": p, "recall": r, "f_measure": f, "novelty": nv})
            res.users += 1
        # fixed-order exact summation keeps reports independent of evaluation order
        res.metrics = {m: (math.fsum(v) / len(v) if v else 0.0) for m, v in sums.items()}
        modes[mode] = res
    return EvalReport(M, modes, per_user=per_user)


def evaluate(
    retriever: Retriever,
    split: DatasetSplit,
    M: int,
    filter_modes: Sequence[str] = FILTER_MODES,
    which: str = "test",
    oversample: int = 4,
    category_of: Callable[[int], int] | None = None,
    config: dict | None = None,
) -> EvalReport:
    """Evaluate ``retriever`` on the held-out half of each evaluation user.

    The unfiltered mode asks for M items; filtered modes ask for
    ``oversample * M`` and complement from the retriever's own ranking.
    """
    users = split.eval_users(which)
    known = [split.known(u) for u in users]
    truth = [[e.item_id for e in split.ground_truth(u)] for u in users]
    seen = [[e.item_id for e in k] for k in known]
    if category_of is None:
        cats = {e.item_id: e.category_id for evs in split.events_by_user.values() for e in evs}
        category_of = lambda i: cats.get(i, UNKNOWN_CATEGORY)  # noqa: E731
    recalled = {}
    cache: dict[int, list[list[int]]] = {}
    for mode in filter_modes:
        n = M if mode == "none" else oversample * M
        if n not in cache:
            cache[n] = retriever(known, n)
        recalled[mode] = cache[n]
    report = evaluate_lists(recalled, truth, seen, M, category_of, users)
    report.config = {"M": M, "which": which, "oversample": oversample, **(config or {})}
    return report


# -- retriever adapters ------------------------------------------------------------


class TreeRetriever:
    """Beam-search retrieval with the trained scorer; keeps per-user ``nodes_scored``."""

    def __init__(self, tree, params, max_behaviors: int = 64, beam_width: int | None = None, mode: str = "tdm"):
        if mode not in ("tdm", "hs"):
            raise ValueError(f"unknown retrieval mode {mode!r}")
        self.tree, self.params, self.max_behaviors = tree, params, max_behaviors
        self.beam_width, self.mode = beam_width, mode
        self.nodes_scored: list[int] = []

    def states(self, histories):
        W = self.params.config.n_windows
        return [
            build_user_state(h, as_of=h[-1].timestamp if h else 0, n_windows=W, max_behaviors=self.max_behaviors)
            for h in histories
        ]

    def __call__(self, histories, n: int) -> list[list[int]]:
        states = self.states(histories)
        beam = None if self.beam_width is None else max(self.beam_width, n)
        if self.mode == "hs":
            results = retrieve_hs_many(self.tree, self.params, states, n, beam)
        else:
            results = retrieve_tdm_many(self.tree, self.params, states, n, beam)
        self.nodes_scored += [r.nodes_scored for r in results]
        return [r.item_ids for r in results]


def training_events(split: DatasetSplit) -> list[BehaviorEvent]:
    return [e for u in split.train_users for e in split.events_by_user[u]]


def _popularity_order(events: Iterable[BehaviorEvent]) -> list[int]:
    counts: dict[int, int] = {}
    for e in events:
        counts[e.item_id] = counts.get(e.item_id, 0) + 1
    return sorted(counts, key=lambda i: (-counts[i], i))


class PopularityRetriever:
    def __init__(self, split: DatasetSplit):
        self.order = _popularity_order(training_events(split))

    def __call__(self, histories, n: int) -> list[list[int]]:
        return [self.order[:n] for _ in histories]


def baseline_popularity(split: DatasetSplit, M: int, which: str = "test") -> dict[int, list[int]]:
    """Global top-M training items for every evaluation user."""
    order = _popularity_order(training_events(split))[:M]
    return {u: list(order) for u in split.eval_users(which)}


class CooccurrenceRetriever:
    """Item-to-item cosine similarity from co-consumption, summed over a user's known items.

    Only the ``n_neighbors`` most similar items of each item are kept. Users
    get at most as many candidates as have non-zero similarity.
    """

    def __init__(self, split: DatasetSplit, n_neighbors: int = 50):
        events = training_events(split)
        items = np.unique(np.array([e.item_id for e in events], dtype=np.int64))
        self.items = items
        users = {u: k for k, u in enumerate(split.train_users)}
        rows = np.array([users[e.user_id] for e in events], dtype=np.int64)
        cols = np.searchsorted(items, np.array([e.item_id for e in events], dtype=np.int64))
        X = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(users), len(items)))
        X.data[:] = 1.0  # repeated consumption counts once
        C = (X.T @ X).tocsr()
        norms = np.sqrt(C.diagonal())
        C.setdiag(0.0)
        C.eliminate_zeros()
        C = sp.diags(1.0 / np.maximum(norms, 1e-12)) @ C @ sp.diags(1.0 / np.maximum(norms, 1e-12))
        self.sim = _top_per_row(C.tocsr(), n_neighbors)

    def __call__(self, histories, n: int) -> list[list[int]]:
        out = []
        for h in histories:
            known = np.searchsorted(self.items, [e.item_id for e in h])
            known = np.array([k for k, e in zip(known, h) if k < len(self.items) and self.items[k] == e.item_id])
            if len(known) == 0:
                out.append([])
                continue
            x = sp.csr_matrix((np.ones(len(known)), (np.zeros(len(known), dtype=np.int64), known)), shape=(1, len(self.items)))
            scores = (x @ self.sim).tocsr()
            cand, val = scores.indices, scores.data
            keep = val > 0
            cand, val = cand[keep], val[keep]
            order = np.lexsort((self.items[cand], -val))[:n]
            out.append(self.items[cand[order]].tolist())
        return out


def _top_per_row(C: sp.csr_matrix, k: int) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    for r in range(C.shape[0]):
        lo, hi = C.indptr[r], C.indptr[r + 1]
        c, v = C.indices[lo:hi], C.data[lo:hi]
        top = np.lexsort((c, -v))[:k]
        rows.append(np.full(len(top), r))
        cols.append(c[top])
        vals.append(v[top])
    cat = lambda parts, dt: np.concatenate(parts) if parts else np.empty(0, dtype=dt)  # noqa: E731
    return sp.csr_matrix((cat(vals, float), (cat(rows, np.int64), cat(cols, np.int64))), shape=C.shape)


def baseline_cooccurrence(split: DatasetSplit, M: int, n_neighbors: int = 50, which: str = "test") -> dict[int, list[int]]:
    ret = CooccurrenceRetriever(split, n_neighbors)
    users = split.eval_users(which)
    lists = ret([split.known(u) for u in users], M)
    return dict(zip(users, lists))
