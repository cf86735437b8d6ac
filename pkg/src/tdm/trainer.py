"""Mini-batch training of the scorer and the alternating model/tree loop.

Training interactions are the events of training users; the input state of
each one is built from the user's behaviors strictly before it. Per epoch
the interactions are shuffled, sampled (TDM or HS mode) and fed to the
optimizer in mini-batches of ``batch_size`` interactions.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import builder
from .data import DEFAULT_MAX_BEHAVIORS, Corpus, DatasetSplit, window_sizes
from .sampler import draw_hs_many, draw_tdm_many, schedule_array
from .scorer import (
    Behaviors,
    NumericError,
    ScorerConfig,
    ScorerParams,
    bce_loss,
    forward,
    init_params,
    loss_and_grad,
    update_bn_stats,
)
from .tree import TreeIndex

log = logging.getLogger(__name__)

DIVERGENCE_LOSS = 1e3


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(f"{message}: {json.dumps(diagnostics, sort_keys=True)}")
        self.diagnostics = diagnostics


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 100
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    negatives: str = "total=100"  # "total=N" or explicit per-level list "1,2,4"
    mode: str = "tdm"  # or "hs"
    variant: str = "attention_dnn"
    seed: int = 0
    tree_rounds: int = 1
    patience: int = 3
    dim: int = 24
    n_windows: int = 10
    hidden: tuple[int, ...] = (128, 64, 24)
    attention_hidden: int = 36
    max_behaviors: int = DEFAULT_MAX_BEHAVIORS
    max_interactions: int = 0  # >0: random subset of interactions per epoch
    max_heldout: int = 0  # >0: fixed random subset of held-out interactions for the losses
    kmeans_max_iter: int = 100

    def __post_init__(self):
        if isinstance(self.hidden, str):
            self.hidden = tuple(int(v) for v in self.hidden.split(",") if v.strip())
        self.hidden = tuple(int(v) for v in self.hidden)
        if self.learning_rate < 0 or not np.isfinite(self.learning_rate):
            raise ValueError("learning_rate must be finite and >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.max_interactions < 0 or self.max_heldout < 0:
            raise ValueError("max_interactions and max_heldout must be >= 0")
        if self.tree_rounds < 1:
            raise ValueError("tree_rounds must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.mode not in ("tdm", "hs"):
            raise ValueError(f"unknown sampling mode {self.mode!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0 and 0 <= self.momentum < 1):
            raise ValueError("optimizer hyper-parameters out of range")
        parse_negatives(self.negatives)

    def scorer_config(self) -> ScorerConfig:
        return ScorerConfig(
            variant=self.variant,
            dim=self.dim,
            n_windows=self.n_windows,
            attention_hidden=self.attention_hidden,
            hidden=self.hidden,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kw = {}
        for key, raw in values.items():
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            kw[key] = _coerce(types[key], raw)
        return cls(**kw)

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        """Read ``key=value`` lines (``#`` comments allowed) or a JSON object."""
        text = Path(path).read_text()
        if text.lstrip().startswith("{"):
            return cls.from_mapping(json.loads(text))
        values = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{n}: expected key=value")
            key, val = line.split("=", 1)
            values[key.strip()] = val.strip()
        return cls.from_mapping(values)


def _coerce(typ: str, raw):
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(raw, list) else raw
    if typ == "int":
        return int(raw)
    if typ == "float":
        return float(raw)
    return raw


def parse_negatives(spec) -> int | list[int]:
    """``"total=N"``/``N`` -> N, ``"1,2,4"``/list -> explicit per-level counts."""
    if isinstance(spec, (int, np.integer)):
        return int(spec)
    if isinstance(spec, (list, tuple)):
        return [int(v) for v in spec]
    s = str(spec).strip()
    if s.startswith("total="):
        return int(s[len("total=") :])
    if "," in s:
        return [int(v) for v in s.split(",")]
    return int(s)


# -- optimizers ------------------------------------------------------------------


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, weights: dict, grads: dict) -> None:
        if self.lr == 0:
            return
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            weights[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, lr, momentum=0.0):
        self.lr, self.momentum = lr, momentum
        self.vel: dict[str, np.ndarray] = {}

    def step(self, weights: dict, grads: dict) -> None:
        if self.lr == 0:
            return
        for name, g in grads.items():
            v = self.vel.setdefault(name, np.zeros_like(g))
            v *= self.momentum
            v += g
            weights[name] -= self.lr * v


def make_optimizer(config: TrainConfig):
    if config.optimizer == "adam":
        return Adam(config.learning_rate, config.beta1, config.beta2, config.eps)
    return SGD(config.learning_rate, config.momentum)


# -- interactions ------------------------------------------------------------------


@dataclass
class Interactions:
    """Flat (user history, target) records.

    ``history`` concatenates each user's chronological item ids; interaction
    ``i`` predicts ``target[i]`` from ``history[start[i]:end[i]]``.
    """

    history: np.ndarray
    start: np.ndarray
    end: np.ndarray
    target: np.ndarray

    def __len__(self) -> int:
        return len(self.target)

    def subset(self, idx: np.ndarray) -> "Interactions":
        return Interactions(self.history, self.start[idx], self.end[idx], self.target[idx])


def training_interactions(split: DatasetSplit, users: Sequence[int] | None = None) -> Interactions:
    """Every event of the training users that has at least one earlier behavior.

    Events sharing a timestamp do not see each other.
    """
    users = split.train_users if users is None else users
    hist, start, end, target = [], [], [], []
    offset = 0
    for u in users:
        evs = split.events_by_user[u]
        items = np.array([e.item_id for e in evs], dtype=np.int64)
        ts = np.array([e.timestamp for e in evs], dtype=np.int64)
        before = np.searchsorted(ts, ts, side="left")  # count of strictly earlier events
        keep = np.flatnonzero(before > 0)
        hist.append(items)
        start.append(np.full(len(keep), offset))
        end.append(offset + before[keep])
        target.append(items[keep])
        offset += len(items)
    cat = lambda parts: np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)  # noqa: E731
    return Interactions(cat(hist), cat(start), cat(end), cat(target))


def heldout_interactions(split: DatasetSplit, which: str = "validation") -> Interactions:
    """Known half as history, each ground-truth event as a target."""
    hist, start, end, target = [], [], [], []
    offset = 0
    for u in split.eval_users(which):
        known = np.array([e.item_id for e in split.known(u)], dtype=np.int64)
        truth = np.array([e.item_id for e in split.ground_truth(u)], dtype=np.int64)
        hist.append(known)
        start.append(np.full(len(truth), offset))
        end.append(np.full(len(truth), offset + len(known)))
        target.append(truth)
        offset += len(known)
    cat = lambda parts: np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)  # noqa: E731
    return Interactions(cat(hist), cat(start), cat(end), cat(target))


def window_behaviors(
    tree: TreeIndex, history: np.ndarray, start: np.ndarray, end: np.ndarray, n_windows: int, max_behaviors: int
) -> Behaviors:
    """Vectorised equivalent of encoding ``partition_recent`` states for many rows."""
    start = np.maximum(start, end - max_behaviors)
    n = end - start
    rows = len(n)
    q, r = np.divmod(n, n_windows)
    L = max(1, int((q + (r > 0)).max(initial=0)))
    nodes = np.zeros((rows, n_windows, L), dtype=np.int64)
    mask = np.zeros((rows, n_windows, L))
    total = int(n.sum())
    if total:
        row = np.repeat(np.arange(rows), n)
        t = np.arange(total) - np.repeat(np.cumsum(n) - n, n)  # 0 = most recent
        item = history[end[row] - 1 - t]
        qr, rr = q[row], r[row]
        big = rr * (qr + 1)
        head = t < big
        w = np.where(head, t // np.maximum(qr + 1, 1), rr + (t - big) // np.maximum(qr, 1))
        slot = np.where(head, t % np.maximum(qr + 1, 1), (t - big) % np.maximum(qr, 1))
        leaf = tree.leaf_of_item.lookup(item, missing=-1)
        keep = leaf >= 0  # items outside the tree are dropped
        nodes[row[keep], w[keep], slot[keep]] = leaf[keep]
        mask[row[keep], w[keep], slot[keep]] = 1.0
    return Behaviors(nodes, mask)


# -- loss -----------------------------------------------------------------------


def loss(params: ScorerParams, behaviors: Behaviors, user_index, nodes, labels) -> float:
    """Mean cross-entropy over (user, node, label) samples, eval-mode network."""
    if len(nodes) == 0:
        raise ValueError("loss needs a non-empty batch")
    value = float(bce_loss(forward(params, behaviors, user_index, nodes).prob, labels).mean())
    if not np.isfinite(value):
        raise NumericError("loss")
    return value


@dataclass
class FixedSample:
    """Held-out interactions with their samples drawn once, for comparable losses."""

    behaviors: Behaviors
    owner: np.ndarray
    nodes: np.ndarray
    labels: np.ndarray


def fixed_sample(tree: TreeIndex, inter: Interactions, config: TrainConfig, seed: int) -> FixedSample | None:
    leaves = tree.leaf_of_item.lookup(inter.target, missing=-1)
    inter = inter.subset(np.flatnonzero(leaves >= 0))
    leaves = leaves[leaves >= 0]
    if len(inter) == 0:
        return None
    rng = np.random.default_rng(seed)
    if config.max_heldout and len(inter) > config.max_heldout:
        keep = np.sort(rng.choice(len(inter), config.max_heldout, replace=False))
        inter, leaves = inter.subset(keep), leaves[keep]
    flat = _draw(tree, leaves, config, rng)
    beh = window_behaviors(tree, inter.history, inter.start, inter.end, config.n_windows, config.max_behaviors)
    return FixedSample(beh, flat.owner, flat.nodes, flat.labels)


def heldout_loss(params: ScorerParams, sample: FixedSample | None, chunk: int = 512) -> float:
    """Eval-mode mean loss over a fixed sample, evaluated in interaction chunks."""
    if sample is None:
        return float("nan")
    total, count = 0.0, 0
    bounds = np.searchsorted(sample.owner, np.arange(0, sample.behaviors.n_users + chunk, chunk))
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        if hi <= lo:
            continue
        own = sample.owner[lo:hi]
        base = own[0]
        beh = sample.behaviors.take(np.arange(base, own[-1] + 1))
        prob = forward(params, beh, own - base, sample.nodes[lo:hi]).prob
        total += float(bce_loss(prob, sample.labels[lo:hi]).sum())
        count += hi - lo
    return total / count


def _draw(tree: TreeIndex, leaves: np.ndarray, config: TrainConfig, rng: np.random.Generator):
    if config.mode == "hs":
        return draw_hs_many(tree, leaves)
    return draw_tdm_many(tree, leaves, schedule_array(tree, parse_negatives(config.negatives)), rng)


# -- training --------------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    validation_loss: float
    steps: int
    samples: int
    clamp_events: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainReport:
    round: int
    epochs: list[EpochStats] = field(default_factory=list)
    test_loss: float = float("nan")
    stopped_early: bool = False
    tree_hash: str = ""
    params_checksum: str = ""
    wall_time: float = 0.0  # kept out of to_dict so reports stay reproducible
    hs_skipped_levels: int = 0

    @property
    def train_loss(self) -> list[float]:
        return [e.train_loss for e in self.epochs]

    @property
    def validation_loss(self) -> list[float]:
        return [e.validation_loss for e in self.epochs]

    @property
    def clamp_events(self) -> int:
        return sum(e.clamp_events for e in self.epochs)

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "epochs": [e.to_dict() for e in self.epochs],
            "test_loss": self.test_loss,
            "stopped_early": self.stopped_early,
            "tree_hash": self.tree_hash,
            "params_checksum": self.params_checksum,
            "clamp_events": self.clamp_events,
            "hs_skipped_levels": self.hs_skipped_levels,
        }


def _epoch_rng(seed: int, rnd: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, rnd, epoch]))


def train_epoch(
    params: ScorerParams,
    tree: TreeIndex,
    inter: Interactions,
    config: TrainConfig,
    optimizer=None,
    epoch: int = 0,
    rnd: int = 0,
) -> tuple[ScorerParams, dict]:
    """One shuffled pass over ``inter``; updates ``params`` in place and returns it with stats."""
    if params.n_nodes != tree.n_nodes:
        raise ValueError(f"embedding table has {params.n_nodes} rows, tree has {tree.n_nodes} nodes")
    opt = optimizer if optimizer is not None else make_optimizer(config)
    rng = _epoch_rng(config.seed, rnd, epoch)
    order = rng.permutation(len(inter))
    if config.max_interactions and len(order) > config.max_interactions:
        order = order[: config.max_interactions]
    leaves_all = tree.leaf_of_item.lookup(inter.target)
    if len(leaves_all) != len(inter):
        raise ValueError("training targets contain items missing from the tree")
    loss_sum, n_samples, steps, clamps, hs_skipped = 0.0, 0, 0, 0, 0
    for lo in range(0, len(order), config.batch_size):
        idx = order[lo : lo + config.batch_size]
        flat = _draw(tree, leaves_all[idx], config, rng)
        hs_skipped += flat.skipped_levels
        if len(flat.nodes) == 0:
            continue
        beh = window_behaviors(
            tree, inter.history, inter.start[idx], inter.end[idx], config.n_windows, config.max_behaviors
        )
        try:
            batch_loss, grads, cache = loss_and_grad(params, beh, flat.owner, flat.nodes, flat.labels)
        except NumericError as exc:
            raise TrainingDiverged(
                "non-finite activations", {"epoch": epoch, "step": steps, "layer": exc.layer}
            ) from exc
        if not np.isfinite(batch_loss) or batch_loss > DIVERGENCE_LOSS:
            raise TrainingDiverged("loss diverged", {"epoch": epoch, "step": steps, "loss": batch_loss})
        opt.step(params.weights, grads)
        if opt.lr != 0:
            update_bn_stats(params, cache)
        loss_sum += batch_loss * len(flat.nodes)
        n_samples += len(flat.nodes)
        clamps += cache.n_clamped
        steps += 1
    stats = {
        "train_loss": loss_sum / n_samples if n_samples else float("nan"),
        "steps": steps,
        "samples": n_samples,
        "clamp_events": clamps,
        "hs_skipped_levels": hs_skipped,
    }
    return params, stats


def train(
    params: ScorerParams,
    tree: TreeIndex,
    split: DatasetSplit,
    config: TrainConfig,
    rnd: int = 0,
) -> tuple[ScorerParams, TrainReport]:
    """Train to the epoch budget, stopping once validation loss fails to improve ``patience`` times."""
    t0 = time.perf_counter()
    inter = training_interactions(split)
    val = fixed_sample(tree, heldout_interactions(split, "validation"), config, config.seed + 7919)
    test = fixed_sample(tree, heldout_interactions(split, "test"), config, config.seed + 104729)
    opt = make_optimizer(config)
    report = TrainReport(round=rnd, tree_hash=tree.content_hash())
    best, bad = np.inf, 0
    for epoch in range(config.epochs):
        params, st = train_epoch(params, tree, inter, config, opt, epoch, rnd)
        vloss = heldout_loss(params, val)
        report.epochs.append(
            EpochStats(epoch, st["train_loss"], vloss, st["steps"], st["samples"], st["clamp_events"])
        )
        report.hs_skipped_levels += st["hs_skipped_levels"]
        log.info("round %d epoch %d train %.5f validation %.5f", rnd, epoch, st["train_loss"], vloss)
        if np.isfinite(vloss):
            if vloss < best:
                best, bad = vloss, 0
            else:
                bad += 1
                if bad >= config.patience:
                    report.stopped_early = True
                    break
    report.test_loss = heldout_loss(params, test)
    report.params_checksum = params.checksum()
    report.wall_time = time.perf_counter() - t0
    return params, report


def remap_params(params: ScorerParams, old_tree: TreeIndex, new_tree: TreeIndex, seed: int) -> ScorerParams:
    """Carry leaf embeddings over by item identity; fresh rows for the interior nodes.

    Dense weights and normalisation statistics are kept as they are.
    """
    fresh = init_params(new_tree.n_nodes, params.config, seed)
    out = params.copy()
    emb = fresh.weights["emb"]
    items = new_tree.item_id[new_tree.leaves]
    old_leaves = old_tree.leaf_of_item.lookup(items)
    if len(old_leaves) != len(items):
        raise ValueError("new tree contains items unknown to the old tree")
    emb[new_tree.leaves] = params.weights["emb"][old_leaves]
    out.weights["emb"] = emb
    return out


@dataclass
class RoundResult:
    params: ScorerParams
    tree: TreeIndex
    report: TrainReport


def joint_train(
    corpus: Corpus,
    split: DatasetSplit,
    config: TrainConfig,
    out_dir: str | Path | None = None,
    initial_tree: TreeIndex | None = None,
) -> tuple[ScorerParams, TreeIndex, list[RoundResult]]:
    """Category tree, train, then alternate tree learning and retraining.

    With ``out_dir`` every round writes params, tree, report and manifest
    under ``round_<r>/`` plus wall times in ``timing.json``.
    """
    tree = initial_tree if initial_tree is not None else builder.init_category_tree(corpus, config.seed)
    params = init_params(tree.n_nodes, config.scorer_config(), config.seed)
    rounds = []
    for rnd in range(config.tree_rounds):
        if rnd > 0:
            emb = builder.leaf_embeddings(tree, params.weights["emb"])
            new_tree = builder.learn_tree(
                corpus, emb, seed=config.seed + rnd, options=builder.KMeansOptions(max_iter=config.kmeans_max_iter)
            )
            params = remap_params(params, tree, new_tree, seed=config.seed + 1000 * rnd)
            tree = new_tree
        params, report = train(params, tree, split, config, rnd)
        rounds.append(RoundResult(params.copy(), tree, report))
        if out_dir is not None:
            write_checkpoint(Path(out_dir) / f"round_{rnd}", params, tree, report, config)
    if out_dir is not None:
        timing = {f"round_{r.report.round}": r.report.wall_time for r in rounds}
        (Path(out_dir) / "timing.json").write_text(json.dumps(timing, indent=2) + "\n")
    return params, tree, rounds


def write_checkpoint(directory: Path, params: ScorerParams, tree: TreeIndex, report: TrainReport, config: TrainConfig):
    directory.mkdir(parents=True, exist_ok=True)
    params.save(directory / "params.bin")
    tree.save(directory / "tree.bin")
    (directory / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    manifest = {
        "config": config.to_dict(),
        "round": report.round,
        "params_checksum": params.checksum(),
        "tree_hash": tree.content_hash(),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
