"""Tree construction: category-based initialization and k-means tree learning.

Both builders only decide an item order; the tree itself is the recursive
halving of that order (``TreeIndex.from_item_order``). Learnt trees put the
larger cluster of every bisection on the left, so the halving reproduces the
clustering exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .data import Corpus
from .tree import TreeIndex


@dataclass
class KMeansOptions:
    max_iter: int = 100
    tol: float = 1e-6
    rebalance: str = "margin"  # or "random"


@dataclass
class BuildDiagnostics:
    degenerate_splits: int = 0
    kmeans_iterations: list[int] = field(default_factory=list)


def init_category_tree(corpus: Corpus, seed: int = 0) -> TreeIndex:
    """Random category order, random order inside each category, then halve recursively."""
    if len(corpus) == 0:
        raise ValueError("cannot build a tree over an empty corpus")
    rng = np.random.default_rng(seed)
    items, cats = corpus.item_ids, corpus.categories
    uniq = np.unique(cats)
    order = []
    for cat in uniq[rng.permutation(len(uniq))]:
        members = items[cats == cat]
        order.append(members[rng.permutation(len(members))])
    return TreeIndex.from_item_order(np.concatenate(order))


def two_means(x: np.ndarray, rng: np.random.Generator, max_iter: int = 100, tol: float = 1e-6):
    """Lloyd's algorithm with k-means++ seeding for k=2.

    Returns (labels, centroids, iterations). ``labels`` is None when the
    points cannot be separated (all identical).
    """
    n = len(x)
    first = int(rng.integers(n))
    d2 = ((x - x[first]) ** 2).sum(axis=1)
    total = d2.sum()
    if total <= 0.0:
        return None, None, 0
    second = int(rng.choice(n, p=d2 / total))
    cent = np.stack([x[first], x[second]])
    labels = None
    it = 0
    for it in range(1, max_iter + 1):
        dist = ((x[:, None, :] - cent[None, :, :]) ** 2).sum(axis=2)
        labels = (dist[:, 1] < dist[:, 0]).astype(np.int64)
        new = cent.copy()
        for k in (0, 1):
            members = x[labels == k]
            if len(members):
                new[k] = members.mean(axis=0)
        shift = np.sqrt(((new - cent) ** 2).sum(axis=1)).max()
        cent = new
        if shift <= tol:
            break
    dist = ((x[:, None, :] - cent[None, :, :]) ** 2).sum(axis=2)
    labels = (dist[:, 1] < dist[:, 0]).astype(np.int64)
    if labels.min() == labels.max():
        return None, None, it
    return labels, cent, it


def rebalance(
    cluster_a: np.ndarray,
    cluster_b: np.ndarray,
    centroids: np.ndarray,
    x: np.ndarray,
    rng: np.random.Generator | None = None,
    mode: str = "margin",
) -> tuple[np.ndarray, np.ndarray]:
    """Move points from the larger cluster until sizes differ by at most one.

    ``cluster_a``/``cluster_b`` index rows of ``x``; ``centroids[0]`` belongs
    to a. In margin mode the moved points are those whose distance to their
    own centroid is largest relative to the other centroid, i.e. the smallest
    assignment margin ``d(other) - d(own)``; ties go to the lower index.
    """
    a = np.asarray(cluster_a, dtype=np.int64)
    b = np.asarray(cluster_b, dtype=np.int64)
    swapped = len(a) < len(b)
    if swapped:
        a, b = b, a
        centroids = centroids[::-1]
    n_move = (len(a) - len(b)) // 2
    if n_move > 0:
        if mode == "margin":
            own = np.sqrt(((x[a] - centroids[0]) ** 2).sum(axis=1))
            other = np.sqrt(((x[a] - centroids[1]) ** 2).sum(axis=1))
            margin = other - own
            pick = np.lexsort((a, margin))[:n_move]
        elif mode == "random":
            if rng is None:
                raise ValueError("random rebalancing needs an rng")
            pick = rng.choice(len(a), size=n_move, replace=False)
        else:
            raise ValueError(f"unknown rebalance mode {mode!r}")
        keep = np.ones(len(a), dtype=bool)
        keep[pick] = False
        b = np.concatenate([b, a[pick]])
        a = a[keep]
    if swapped:
        a, b = b, a
    return np.sort(a), np.sort(b)


def learn_item_order(
    embeddings: np.ndarray,
    seed: int = 0,
    options: KMeansOptions | None = None,
    diagnostics: BuildDiagnostics | None = None,
) -> np.ndarray:
    """Row order produced by recursive balanced 2-means bisection of ``embeddings``."""
    opts = options or KMeansOptions()
    diag = diagnostics if diagnostics is not None else BuildDiagnostics()
    x = np.asarray(embeddings, dtype=np.float64)
    n = len(x)
    if n == 0:
        return np.empty(0, dtype=np.int64)
    order = np.empty(n, dtype=np.int64)
    # Stack of (row indices, output offset, seed sequence); each subproblem owns its seed stream.
    stack = [(np.arange(n), 0, np.random.SeedSequence(seed))]
    while stack:
        idx, offset, ss = stack.pop()
        if len(idx) == 1:
            order[offset] = idx[0]
            continue
        rng = np.random.default_rng(ss)
        labels, cent, iters = two_means(x[idx], rng, opts.max_iter, opts.tol)
        diag.kmeans_iterations.append(iters)
        if labels is None:
            diag.degenerate_splits += 1
            perm = rng.permutation(len(idx))
            half = (len(idx) + 1) // 2
            left, right = np.sort(perm[:half]), np.sort(perm[half:])
        else:
            left, right = rebalance(
                np.flatnonzero(labels == 0), np.flatnonzero(labels == 1), cent, x[idx], rng, opts.rebalance
            )
            if len(left) < len(right) or (len(left) == len(right) and left[0] > right[0]):
                left, right = right, left
        child_ss = ss.spawn(2)
        stack.append((idx[right], offset + len(left), child_ss[1]))
        stack.append((idx[left], offset, child_ss[0]))
    return order


def learn_tree(
    corpus: Corpus,
    leaf_embeddings: Mapping[int, np.ndarray] | np.ndarray,
    seed: int = 0,
    options: KMeansOptions | None = None,
    diagnostics: BuildDiagnostics | None = None,
) -> TreeIndex:
    """Rebuild the tree by recursive balanced 2-means over item embeddings.

    ``leaf_embeddings`` is either a mapping item_id -> vector or an array whose
    rows follow ``corpus.item_ids``.
    """
    items = corpus.item_ids
    if len(items) == 0:
        raise ValueError("cannot build a tree over an empty corpus")
    if isinstance(leaf_embeddings, Mapping):
        missing = [int(i) for i in items if int(i) not in leaf_embeddings]
        if missing:
            raise KeyError(f"{len(missing)} corpus items lack embeddings, e.g. {missing[:5]}")
        x = np.stack([np.asarray(leaf_embeddings[int(i)], dtype=np.float64) for i in items])
    else:
        x = np.asarray(leaf_embeddings, dtype=np.float64)
        if len(x) != len(items):
            raise ValueError(f"expected {len(items)} embedding rows, got {len(x)}")
    order = learn_item_order(x, seed, options, diagnostics)
    return TreeIndex.from_item_order(items[order])


def leaf_embeddings(tree: TreeIndex, emb: np.ndarray) -> dict[int, np.ndarray]:
    """item_id -> embedding row of its leaf."""
    return {int(tree.item_id[n]): emb[n] for n in tree.leaves}


def save_embeddings_text(embeddings: Mapping[int, np.ndarray], path: str | Path) -> None:
    with open(path, "w") as f:
        for item in sorted(embeddings):
            f.write(f"{item}\t" + ",".join(repr(float(v)) for v in embeddings[item]) + "\n")


def load_embeddings_text(path: str | Path) -> dict[int, np.ndarray]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            item, vec = line.split("\t")
            out[int(item)] = np.array([float(v) for v in vec.split(",")])
        except ValueError as exc:
            raise ValueError(f"{path}:{n}: expected 'item_id<TAB>v1,...,vd'") from exc
    dims = {len(v) for v in out.values()}
    if len(dims) > 1:
        raise ValueError(f"{path}: inconsistent embedding dimensions {sorted(dims)}")
    return out
