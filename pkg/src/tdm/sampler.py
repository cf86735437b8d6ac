"""Training-sample construction over the tree.

TDM mode labels every ancestor of the target leaf (root excluded) positive and
draws uniform negatives from the rest of each level. HS mode uses the sibling
of each positive as its only negative.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import UserState
from .tree import TreeIndex


@dataclass
class SampleBatch:
    nodes: np.ndarray
    levels: np.ndarray
    labels: np.ndarray
    user_state: UserState | None = None
    skipped_levels: int = 0

    @property
    def samples(self) -> list[tuple[int, int, int]]:
        return list(zip(self.nodes.tolist(), self.levels.tolist(), self.labels.tolist()))

    def positives(self) -> np.ndarray:
        return self.nodes[self.labels == 1]

    def negatives(self) -> np.ndarray:
        return self.nodes[self.labels == 0]


@dataclass
class FlatSamples:
    """Samples for many targets at once; ``owner[i]`` indexes the target row."""

    owner: np.ndarray
    nodes: np.ndarray
    labels: np.ndarray
    skipped_levels: int = 0
    diagnostics: dict = field(default_factory=dict)


def default_schedule(tree: TreeIndex, total_negatives: int) -> dict[int, int]:
    """Per-level negative counts for levels 2..max_level.

    Each level gets one negative; the remainder is spread in proportion to
    ``min(2**(level-1) - 1, level_width)`` by largest remainder, ties going to
    the deeper level.
    """
    levels = list(range(2, tree.max_level + 1))
    if not levels:
        return {}
    if total_negatives < len(levels):
        raise ValueError(f"total_negatives={total_negatives} is below the minimum of {len(levels)} (one per level)")
    weights = np.array([min(2 ** (j - 1) - 1, tree.level_width(j)) for j in levels], dtype=np.float64)
    rest = total_negatives - len(levels)
    share = rest * weights / weights.sum()
    counts = np.floor(share).astype(np.int64)
    short = rest - int(counts.sum())
    order = sorted(range(len(levels)), key=lambda i: (-(share[i] - counts[i]), -levels[i]))
    for i in order[:short]:
        counts[i] += 1
    return {j: int(c) + 1 for j, c in zip(levels, counts)}


def schedule_array(tree: TreeIndex, schedule: Mapping[int, int] | Sequence[int] | int) -> np.ndarray:
    """Normalise a schedule to an array indexed by level (entries 0 and 1 unused)."""
    if isinstance(schedule, (int, np.integer)):
        schedule = default_schedule(tree, int(schedule))
    out = np.zeros(tree.max_level + 1, dtype=np.int64)
    if isinstance(schedule, Mapping):
        for j, c in schedule.items():
            if 2 <= int(j) <= tree.max_level:
                out[int(j)] = int(c)
    else:
        vals = list(schedule)
        if len(vals) != tree.max_level - 1:
            raise ValueError(f"explicit schedule needs {tree.max_level - 1} entries (levels 2..{tree.max_level})")
        out[2:] = vals
    return out


def _distinct_uniform(rng: np.random.Generator, high: int, rows: int, cols: int) -> np.ndarray:
    """Each row: ``cols`` distinct values drawn uniformly from ``range(high)``."""
    draw = rng.integers(0, high, size=(rows, cols))
    if cols <= 1:
        return draw
    while True:
        srt = np.sort(draw, axis=1)
        order = np.argsort(draw, axis=1, kind="stable")
        dup_sorted = np.zeros_like(draw, dtype=bool)
        dup_sorted[:, 1:] = srt[:, 1:] == srt[:, :-1]
        if not dup_sorted.any():
            return draw
        dup = np.zeros_like(dup_sorted)
        np.put_along_axis(dup, order, dup_sorted, axis=1)
        draw[dup] = rng.integers(0, high, size=int(dup.sum()))


def draw_tdm_many(
    tree: TreeIndex,
    target_leaves: np.ndarray,
    schedule: np.ndarray,
    rng: np.random.Generator,
) -> FlatSamples:
    """Positive paths plus level-wise uniform negatives for every target leaf."""
    targets = np.asarray(target_leaves, dtype=np.int64)
    owners, nodes, labels = [], [], []
    tlevel = tree.level[targets]
    cur = targets.copy()
    curlvl = tlevel.copy()
    for j in range(tree.max_level, 1, -1):
        # Walk every path up to level j.
        deep = curlvl > j
        while deep.any():
            cur[deep] = tree.parent[cur[deep]]
            curlvl[deep] -= 1
            deep = curlvl > j
        rows = np.flatnonzero(tlevel >= j)
        if len(rows) == 0:
            continue
        pos = cur[rows]
        owners.append(rows)
        nodes.append(pos)
        labels.append(np.ones(len(rows), dtype=np.int64))
        lo, hi = tree.level_range(j)
        eligible = hi - lo - 1
        want = min(int(schedule[j]), eligible)
        if want <= 0:
            continue
        if want == eligible:
            draw = np.tile(np.arange(eligible), (len(rows), 1))
        else:
            draw = _distinct_uniform(rng, eligible, len(rows), want)
        offset = pos - lo
        neg = draw + (draw >= offset[:, None])
        owners.append(np.repeat(rows, want))
        nodes.append((neg + lo).ravel())
        labels.append(np.zeros(len(rows) * want, dtype=np.int64))
    if not owners:
        empty = np.empty(0, dtype=np.int64)
        return FlatSamples(empty, empty, empty)
    owner = np.concatenate(owners)
    order = np.argsort(owner, kind="stable")
    return FlatSamples(owner[order], np.concatenate(nodes)[order], np.concatenate(labels)[order])


def draw_hs_many(tree: TreeIndex, target_leaves: np.ndarray) -> FlatSamples:
    """Each positive path node paired with its sibling; levels without a sibling are skipped."""
    targets = np.asarray(target_leaves, dtype=np.int64)
    owners, nodes, labels = [], [], []
    skipped = 0
    tlevel = tree.level[targets]
    cur = targets.copy()
    curlvl = tlevel.copy()
    for j in range(tree.max_level, 1, -1):
        deep = curlvl > j
        while deep.any():
            cur[deep] = tree.parent[cur[deep]]
            curlvl[deep] -= 1
            deep = curlvl > j
        rows = np.flatnonzero(tlevel >= j)
        if len(rows) == 0:
            continue
        pos = cur[rows]
        par = tree.parent[pos]
        pair = tree.child_count[par] == 2
        skipped += int((~pair).sum())
        rows, pos, par = rows[pair], pos[pair], par[pair]
        sib = 2 * tree.first_child[par] + 1 - pos
        owners += [rows, rows]
        nodes += [pos, sib]
        labels += [np.ones(len(rows), dtype=np.int64), np.zeros(len(rows), dtype=np.int64)]
    if not owners:
        empty = np.empty(0, dtype=np.int64)
        return FlatSamples(empty, empty, empty, skipped, {"hs_skipped_levels": skipped})
    owner = np.concatenate(owners)
    order = np.argsort(owner, kind="stable")
    return FlatSamples(
        owner[order], np.concatenate(nodes)[order], np.concatenate(labels)[order], skipped, {"hs_skipped_levels": skipped}
    )


def _as_batch(tree: TreeIndex, flat: FlatSamples, user_state) -> SampleBatch:
    return SampleBatch(flat.nodes, tree.level[flat.nodes], flat.labels, user_state, flat.skipped_levels)


def draw_tdm(
    tree: TreeIndex,
    target_leaf: int,
    negatives_per_level: Mapping[int, int] | Sequence[int] | int,
    rng: np.random.Generator,
    user_state: UserState | None = None,
) -> SampleBatch:
    if not tree.is_leaf(target_leaf):
        raise ValueError(f"node {target_leaf} is not a leaf")
    sched = schedule_array(tree, negatives_per_level)
    return _as_batch(tree, draw_tdm_many(tree, np.array([target_leaf]), sched, rng), user_state)


def draw_hs(
    tree: TreeIndex,
    target_leaf: int,
    rng: np.random.Generator | None = None,
    user_state: UserState | None = None,
) -> SampleBatch:
    """HS-mode batch; ``rng`` is accepted for interface symmetry and unused."""
    if not tree.is_leaf(target_leaf):
        raise ValueError(f"node {target_leaf} is not a leaf")
    return _as_batch(tree, draw_hs_many(tree, np.array([target_leaf])), user_state)
