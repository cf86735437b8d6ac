"""Layer-wise beam retrieval over the tree, plus brute-force and path-product variants.

Scoring is abstracted as ``score_fn(users, nodes) -> probabilities`` for
(user row, node) pairs, so the same search runs against the trained network
or a synthetic table. Several users are searched in lock-step to batch the
network calls; every ordering breaks ties by ascending node (item) id.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .scorer import Behaviors, ScorerParams, encode_states, score_nodes
from .tree import NO_NODE, TreeIndex

ScoreFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class RetrievalResult:
    items: list[tuple[int, float]]
    nodes_scored: int
    beam_trace: list[dict] | None = None
    truncated: bool = False

    @property
    def item_ids(self) -> list[int]:
        return [i for i, _ in self.items]


def _rank(nodes: np.ndarray, scores: np.ndarray, keys: np.ndarray | None = None) -> np.ndarray:
    """Positions sorted by descending score, ties by ascending key (default: node id)."""
    return np.lexsort((nodes if keys is None else keys, -scores))


def model_score_fn(params: ScorerParams, behaviors: Behaviors) -> ScoreFn:
    def fn(users, nodes):
        return score_nodes(params, behaviors, users, nodes)

    return fn


def table_score_fn(table: np.ndarray) -> ScoreFn:
    """Scores from a (n_users, n_nodes) table or a single (n_nodes,) row shared by everyone."""
    table = np.asarray(table, dtype=np.float64)
    if table.ndim == 1:
        return lambda users, nodes: table[nodes]
    return lambda users, nodes: table[users, nodes]


def beam_search(
    tree: TreeIndex,
    score_fn: ScoreFn,
    n_users: int,
    k: int,
    beam_width: int | None = None,
    trace: bool = False,
    path_product: bool = False,
) -> list[RetrievalResult]:
    """Layer-wise retrieval for ``n_users`` users.

    Each round moves leaves of the candidate set into the result set, keeps the
    top ``beam_width`` of the remaining nodes and expands their children. Non-leaf
    candidates are only scored when there are more of them than the beam holds;
    leaves are always scored since the result set is ranked by their scores.

    With ``path_product`` every candidate is scored and ranked by the product
    of probabilities along its path (root excluded).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    beam = k if beam_width is None else beam_width
    if beam < k:
        raise ValueError("beam_width must be >= k")
    is_leaf = tree.child_count == 0
    # Per user: candidate nodes and, for path products, the accumulated ancestor product.
    cand = [np.array([tree.root_id]) for _ in range(n_users)]
    acc = [np.ones(1) for _ in range(n_users)]
    result_nodes = [[] for _ in range(n_users)]
    result_scores = [[] for _ in range(n_users)]
    scored = np.zeros(n_users, dtype=np.int64)
    traces = [[] for _ in range(n_users)] if trace else None
    while any(len(q) for q in cand):
        need_users, need_nodes, plan = [], [], []
        for u, q in enumerate(cand):
            if not len(q):
                plan.append(None)
                continue
            leaf_mask = is_leaf[q]
            interior = q[~leaf_mask]
            if path_product:
                score_sel = q[q != tree.root_id]
            else:
                score_sel = q[leaf_mask] if len(interior) <= beam else q
            plan.append(score_sel)
            need_users.append(np.full(len(score_sel), u))
            need_nodes.append(score_sel)
        if need_nodes:
            flat_nodes = np.concatenate(need_nodes)
            flat_scores = score_fn(np.concatenate(need_users), flat_nodes) if len(flat_nodes) else np.empty(0)
        pos = 0
        for u, q in enumerate(cand):
            sel = plan[u]
            if sel is None:
                continue
            s = flat_scores[pos : pos + len(sel)]
            pos += len(sel)
            scored[u] += len(sel)
            full = np.full(len(q), np.nan)
            if len(sel):
                full[np.searchsorted(q, sel) if _is_sorted(q) else _positions(q, sel)] = s
            if path_product:
                full = np.where(q == tree.root_id, 1.0, full) * acc[u]
            leaf_mask = is_leaf[q]
            result_nodes[u].append(q[leaf_mask])
            result_scores[u].append(full[leaf_mask])
            interior = q[~leaf_mask]
            iscore = full[~leaf_mask]
            if len(interior) > beam:
                keep = _rank(interior, iscore)[:beam]
                selected = interior[keep]
                sel_score = iscore[keep]
            else:
                selected = interior
                sel_score = iscore
            if trace:
                lvl = int(tree.level[q[0]])
                traces[u].append(
                    {"level": lvl, "candidates": q.tolist(), "selected": np.sort(selected).tolist()}
                )
            order = np.argsort(selected, kind="stable")
            selected, sel_score = selected[order], sel_score[order]
            kids = tree.children_of(selected)
            if path_product:
                acc[u] = np.repeat(sel_score, tree.child_count[selected])
            cand[u] = kids
    out = []
    for u in range(n_users):
        nodes = np.concatenate(result_nodes[u]) if result_nodes[u] else np.empty(0, dtype=np.int64)
        scores = np.concatenate(result_scores[u]) if result_scores[u] else np.empty(0)
        items = tree.item_id[nodes]
        top = _rank(nodes, scores, keys=items)[:k]
        out.append(
            RetrievalResult(
                [(int(items[i]), float(scores[i])) for i in top],
                int(scored[u]),
                traces[u] if trace else None,
                truncated=k > tree.n_items,
            )
        )
    return out


def _is_sorted(a: np.ndarray) -> bool:
    return len(a) < 2 or bool((a[1:] > a[:-1]).all())


def _positions(q: np.ndarray, sel: np.ndarray) -> np.ndarray:
    order = np.argsort(q, kind="stable")
    return order[np.searchsorted(q[order], sel)]


def retrieve_tdm(
    tree: TreeIndex,
    params: ScorerParams,
    user_state,
    k: int,
    beam_width: int | None = None,
    trace: bool = False,
) -> RetrievalResult:
    behaviors = encode_states(tree, [user_state], params.config.n_windows)
    return beam_search(tree, model_score_fn(params, behaviors), 1, k, beam_width, trace)[0]


def retrieve_tdm_many(
    tree: TreeIndex,
    params: ScorerParams,
    user_states: Sequence,
    k: int,
    beam_width: int | None = None,
    trace: bool = False,
    chunk: int = 256,
) -> list[RetrievalResult]:
    out = []
    for lo in range(0, len(user_states), chunk):
        part = user_states[lo : lo + chunk]
        behaviors = encode_states(tree, part, params.config.n_windows)
        out += beam_search(tree, model_score_fn(params, behaviors), len(part), k, beam_width, trace)
    return out


def retrieve_hs(tree: TreeIndex, params: ScorerParams, user_state, k: int, beam_width: int | None = None) -> RetrievalResult:
    behaviors = encode_states(tree, [user_state], params.config.n_windows)
    return beam_search(tree, model_score_fn(params, behaviors), 1, k, beam_width, path_product=True)[0]


def retrieve_hs_many(tree, params, user_states, k, beam_width=None, chunk: int = 256) -> list[RetrievalResult]:
    out = []
    for lo in range(0, len(user_states), chunk):
        part = user_states[lo : lo + chunk]
        behaviors = encode_states(tree, part, params.config.n_windows)
        out += beam_search(tree, model_score_fn(params, behaviors), len(part), k, beam_width, path_product=True)
    return out


def bruteforce_nodes(tree: TreeIndex, level: int | None) -> np.ndarray:
    return tree.leaves if level is None else tree.level_nodes(level)


def bruteforce_search(
    tree: TreeIndex, score_fn: ScoreFn, n_users: int, k: int, level: int | None = None
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Top-k (nodes, scores) per user over every node of a level (default: all leaves)."""
    nodes = bruteforce_nodes(tree, level)
    out = []
    for u in range(n_users):
        s = score_fn(np.full(len(nodes), u), nodes)
        top = _rank(nodes, s)[:k]
        out.append((nodes[top], s[top]))
    return out


def retrieve_bruteforce(
    tree: TreeIndex, params: ScorerParams, user_state, k: int, level: int | None = None
) -> RetrievalResult:
    """Score every node of ``level`` (default: every leaf) and keep the top k.

    For leaf candidates the result lists items; otherwise the ids are node ids.
    """
    behaviors = encode_states(tree, [user_state], params.config.n_windows)
    nodes, scores = bruteforce_search(tree, model_score_fn(params, behaviors), 1, k, level)[0]
    n_scored = len(bruteforce_nodes(tree, level))
    leaf = tree.child_count[nodes] == 0
    if leaf.all():
        items = tree.item_id[nodes]
        order = _rank(items, scores)
        pairs = [(int(items[i]), float(scores[i])) for i in order]
    else:
        pairs = [(int(n), float(s)) for n, s in zip(nodes, scores)]
    return RetrievalResult(pairs, n_scored, truncated=k > n_scored)


# -- layer-wise recall ------------------------------------------------------------


def ground_truth_at_level(tree: TreeIndex, items: Sequence[int], level: int) -> set[int]:
    """Ancestors at ``level`` of the ground-truth leaves (leaves above the level are skipped)."""
    leaves = tree.leaves_of_items(items)
    anc = tree.ancestors_at_level(leaves, level)
    return set(int(a) for a in anc if a != NO_NODE)


def beam_level_sets(tree: TreeIndex, score_fn: ScoreFn, n_users: int, k: int, level: int) -> list[set[int]]:
    """Nodes the beam retains at ``level``: the top k of that level's candidates.

    The search is run with tracing; leaves reached at the level count as
    retrieved too, ranked together with the interior nodes.
    """
    res = beam_search(tree, score_fn, n_users, k, trace=True)
    out = []
    for u, r in enumerate(res):
        entry = next((t for t in r.beam_trace if t["level"] == level), None)
        if entry is None:
            out.append(set())
            continue
        cands = np.array(entry["candidates"], dtype=np.int64)
        if len(cands) <= k:
            out.append(set(cands.tolist()))
        else:
            s = score_fn(np.full(len(cands), u), cands)
            out.append(set(cands[_rank(cands, s)[:k]].tolist()))
    return out


def layerwise_recall(
    tree: TreeIndex,
    score_fn: ScoreFn,
    ground_truth: Sequence[Sequence[int]],
    k: int,
    level: int,
    method: str = "beam",
) -> float:
    """Mean per-user recall of level-``level`` nodes against ancestors of the ground truth.

    Users whose ground truth has no node at the level are skipped.
    """
    n_users = len(ground_truth)
    if method == "beam":
        retrieved = beam_level_sets(tree, score_fn, n_users, k, level)
    elif method == "bruteforce":
        retrieved = [set(n.tolist()) for n, _ in bruteforce_search(tree, score_fn, n_users, k, level)]
    else:
        raise ValueError(f"unknown method {method!r}")
    vals = []
    for got, items in zip(retrieved, ground_truth):
        truth = ground_truth_at_level(tree, items, level)
        if truth:
            vals.append(len(got & truth) / len(truth))
    return float(np.mean(vals)) if vals else 0.0
