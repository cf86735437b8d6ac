"""Independent reference implementations used by the tests."""

import heapq
from dataclasses import dataclass

import numpy as np

from tdm.scorer import Behaviors, ScorerConfig, bce_loss, forward, init_params, loss_and_grad

FD_STEP = 1e-4
# Denominator floor for the relative error so that gradients that are zero in
# exact arithmetic do not turn finite-difference round-off into huge ratios.
REL_FLOOR = 1e-6


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_FLOOR)


def micro_config(variant: str) -> ScorerConfig:
    # product_dnn dots the last layer with the candidate, so its last width is d
    hidden = (8, 4, 4) if variant == "product_dnn" else (8, 4, 2)
    return ScorerConfig(variant=variant, dim=4, n_windows=3, attention_hidden=5, hidden=hidden)


def micro_instance(
    variant: str, seed: int, train: bool = True, n_nodes: int = 12, n_samples: int = 12, noise: float = 0.2
):
    """Random parameters, behaviors, candidates and labels for a tiny network."""
    rng = np.random.default_rng(seed)
    cfg = micro_config(variant)
    params = init_params(n_nodes, cfg, seed)
    for name, w in params.weights.items():
        params.weights[name] = w + rng.normal(0.0, noise, w.shape)
    if not train:
        params.bn_state["bn_steps"] = np.array(float(rng.integers(1, 20)))
        for name, s in params.bn_state.items():
            if name.endswith("_mean"):
                params.bn_state[name] = rng.normal(0.0, 0.2, s.shape)
            elif name.endswith("_var"):
                params.bn_state[name] = rng.uniform(0.3, 2.0, s.shape)
    n_users = int(rng.integers(2, 6))
    windows = [
        [rng.integers(0, n_nodes, int(rng.integers(0, 4))).tolist() for _ in range(cfg.n_windows)]
        for _ in range(n_users)
    ]
    behaviors = Behaviors.from_windows(windows, cfg.n_windows)
    users = rng.integers(0, n_users, n_samples)
    cand = rng.integers(0, n_nodes, n_samples)
    labels = rng.integers(0, 2, n_samples)
    return params, behaviors, users, cand, labels


@dataclass
class GradCheck:
    # worst relative error of the plain central difference
    plain_worst: float = 0.0
    # worst after refining disagreeing probes with a Richardson estimate
    worst: float = 0.0
    checked: int = 0
    refined: int = 0
    # probes whose step flips a PReLU sign: the loss has a kink there
    kinks: int = 0
    zero_rows_ok: bool = True


def _pattern(cache) -> np.ndarray:
    parts = [(rec["zn"] > 0).ravel() for rec in cache.store["layers"] if "zn" in rec]
    if "pre" in cache.store:
        parts.append((cache.store["pre"] > 0).ravel())
    return np.concatenate(parts) if parts else np.zeros(0, dtype=bool)


def gradient_check(
    params,
    behaviors,
    users,
    cand,
    labels,
    train: bool = True,
    per_tensor: int | None = None,
    seed: int = 0,
    tol: float = 1e-4,
) -> GradCheck:
    """Compare the analytic gradient with central differences at step ``FD_STEP``.

    ``per_tensor`` limits the check to that many random coordinates of each
    weight array (all coordinates when None). Embedding rows no sample touches
    must have an exactly zero gradient. Probes that cross an activation kink
    are counted and left out. A probe off by more than ``tol`` is refined with
    ``(4 D(h/2) - D(h)) / 3``, which removes the O(h^2) truncation term.
    """
    rng = np.random.default_rng(seed)

    def probe(name, idx, step):
        w = params.weights[name]
        orig = w[idx]
        vals, pats = [], []
        for delta in (step, -step):
            w[idx] = orig + delta
            cache = forward(params, behaviors, users, cand, train=train, keep_cache=True)
            vals.append(float(bce_loss(cache.prob, labels).mean()))
            pats.append(_pattern(cache))
        w[idx] = orig
        smooth = all(np.array_equal(p, base) for p in pats)
        return (vals[0] - vals[1]) / (2 * step), smooth

    _, grads, cache = loss_and_grad(params, behaviors, users, cand, labels, train=train)
    base = _pattern(cache)
    touched = np.unique(np.concatenate([cand, behaviors.nodes[behaviors.mask > 0]]))
    out = GradCheck()
    untouched = np.setdiff1d(np.arange(params.n_nodes), touched)
    out.zero_rows_ok = bool(np.all(grads["emb"][untouched] == 0.0))
    touched_rows = set(touched.tolist())
    for name, w in params.weights.items():
        coords = list(np.ndindex(w.shape))
        if name == "emb":
            coords = [c for c in coords if c[0] in touched_rows]
        if per_tensor is not None and len(coords) > per_tensor:
            coords = [coords[i] for i in rng.choice(len(coords), per_tensor, replace=False)]
        for idx in coords:
            a = grads[name][idx]
            d1, smooth = probe(name, idx, FD_STEP)
            if not smooth:
                out.kinks += 1
                continue
            out.checked += 1
            err = relative_error(a, d1)
            out.plain_worst = max(out.plain_worst, err)
            if err >= tol:
                d_half, smooth_half = probe(name, idx, FD_STEP / 2)
                if smooth_half:
                    out.refined += 1
                    err = relative_error(a, (4 * d_half - d1) / 3)
            out.worst = max(out.worst, err)
    return out


def heap_scores(tree, rng: np.random.Generator) -> np.ndarray:
    """Random scores where each interior node holds the max of its children."""
    scores = np.zeros(tree.n_nodes)
    scores[tree.leaves] = rng.random(len(tree.leaves))
    for node in range(tree.n_nodes - 1, -1, -1):
        kids = tree.children(node)
        if len(kids):
            scores[node] = scores[kids].max()
    return scores


def brute_top_k(tree, scores: np.ndarray, k: int) -> list[int]:
    """Top-k items by leaf score, ties by ascending leaf id."""
    leaves = sorted(tree.leaves.tolist(), key=lambda n: (-scores[n], n))[:k]
    return [int(tree.item_of_leaf[n]) for n in leaves]


def heap_beam_search(tree, scores: np.ndarray, k: int, beam: int) -> list[int]:
    """Layer-wise search over explicit node sets using heapq.

    Leaves leave the candidate set for the result set; the best ``beam``
    remaining nodes are expanded.
    """
    key = lambda n: (-scores[n], n)  # noqa: E731
    candidates = [0]
    found = []
    while candidates:
        found += [n for n in candidates if tree.child_count[n] == 0]
        rest = [n for n in candidates if tree.child_count[n] > 0]
        top = heapq.nsmallest(beam, rest, key=key)
        candidates = [int(c) for n in top for c in tree.children(n)]
    best = heapq.nsmallest(k, found, key=key)
    return [int(tree.item_of_leaf[n]) for n in best]


def hs_path_products(tree, node_prob: np.ndarray) -> dict[int, float]:
    """Leaf probability as the product of the node probabilities along its path, root excluded."""
    out = {}
    for leaf in tree.leaves.tolist():
        out[leaf] = float(np.prod([node_prob[n] for n in tree.path(leaf)[1:]]))
    return out


def spreadsheet_bce(probs, labels) -> float:
    """Mean cross-entropy summed by hand, one sample at a time."""
    total = 0.0
    for p, y in zip(probs, labels):
        total += -np.log(p) if y == 1 else -np.log(1.0 - p)
    return total / len(probs)

