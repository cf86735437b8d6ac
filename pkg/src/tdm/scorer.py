"""Binary preference model over (user state, tree node) pairs.

Three variants share one parameter layout:

* ``attention_dnn``: each behavior in a time window is weighted by an
  activation unit that sees the behavior, the candidate node and their
  elementwise product; window outputs are weighted means. Window outputs and
  the candidate embedding feed three dense layers (BN + PReLU) and a 2-way
  softmax.
* ``dnn``: the same network with every behavior weight fixed to 1.
* ``product_dnn``: no attention and no candidate embedding in the input; the
  last dense layer is linear and the logit is its dot product with the
  candidate embedding.

Everything is float64 and batched. Samples point at a shared table of user
behavior windows (``user_index``) so the user-only work is done once per user.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

VARIANTS = ("attention_dnn", "dnn", "product_dnn")
PROB_CLAMP = 1e-7
CHECKPOINT_MAGIC = b"TDMP"
CHECKPOINT_VERSION = 1


class NumericError(FloatingPointError):
    def __init__(self, layer: str):
        super().__init__(f"non-finite activations in layer {layer!r}")
        self.layer = layer


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ScorerConfig:
    variant: str = "attention_dnn"
    dim: int = 24
    n_windows: int = 10
    attention_hidden: int = 36
    hidden: tuple[int, ...] = (128, 64, 24)
    batch_norm: bool = True
    bn_momentum: float = 0.99
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not self.hidden:
            raise ValueError("at least one hidden layer is required")
        if self.variant == "product_dnn" and self.hidden[-1] != self.dim:
            raise ValueError("product_dnn needs the last hidden width to equal the embedding dim")

    @property
    def uses_attention(self) -> bool:
        return self.variant == "attention_dnn"

    @property
    def input_width(self) -> int:
        extra = 0 if self.variant == "product_dnn" else 1
        return (self.n_windows + extra) * self.dim

    def layer_has_bn_prelu(self, i: int) -> bool:
        """Whether dense layer ``i`` (0-based) is followed by BN and PReLU."""
        return not (self.variant == "product_dnn" and i == len(self.hidden) - 1)


@dataclass
class ScorerParams:
    config: ScorerConfig
    weights: dict[str, np.ndarray]
    bn_state: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return self.weights["emb"].shape[0]

    @property
    def n_parameters(self) -> int:
        return sum(w.size for w in self.weights.values())

    def copy(self) -> "ScorerParams":
        return ScorerParams(
            self.config,
            {k: v.copy() for k, v in self.weights.items()},
            {k: v.copy() for k, v in self.bn_state.items()},
        )

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.weights):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.weights[name]).tobytes())
        for name in sorted(self.bn_state):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.bn_state[name]).tobytes())
        return h.hexdigest()

    def check_finite(self) -> None:
        for name, w in self.weights.items():
            if not np.isfinite(w).all():
                raise NumericError(name)

    # -- checkpoint ----------------------------------------------------------

    def to_bytes(self) -> bytes:
        header = {
            "config": asdict(self.config),
            "n_nodes": self.n_nodes,
            "weights": [[k, list(self.weights[k].shape)] for k in sorted(self.weights)],
            "bn_state": [[k, list(self.bn_state[k].shape)] for k in sorted(self.bn_state)],
        }
        hbytes = json.dumps(header, sort_keys=True).encode()
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<I", CHECKPOINT_VERSION))
        buf.write(struct.pack("<I", len(hbytes)))
        buf.write(hbytes)
        for k in sorted(self.weights):
            buf.write(np.ascontiguousarray(self.weights[k], dtype="<f8").tobytes())
        for k in sorted(self.bn_state):
            buf.write(np.ascontiguousarray(self.bn_state[k], dtype="<f8").tobytes())
        body = buf.getvalue()
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ScorerParams":
        if len(data) < 44 or data[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError("not a scorer checkpoint (bad magic)")
        body, digest = data[:-32], data[-32:]
        (version,) = struct.unpack_from("<I", body, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})")
        if hashlib.sha256(body).digest() != digest:
            raise CheckpointError("checkpoint checksum mismatch (file corrupted)")
        (hlen,) = struct.unpack_from("<I", body, 8)
        header = json.loads(body[12 : 12 + hlen])
        cfg = dict(header["config"])
        cfg["hidden"] = tuple(cfg["hidden"])
        config = ScorerConfig(**cfg)
        off = 12 + hlen

        def read(entries):
            nonlocal off
            out = {}
            for name, shape in entries:
                count = int(np.prod(shape)) if shape else 1
                arr = np.frombuffer(body, dtype="<f8", count=count, offset=off).reshape(shape)
                out[name] = arr.astype(np.float64)
                off += 8 * count
            return out

        weights = read(header["weights"])
        bn_state = read(header["bn_state"])
        if off != len(body):
            raise CheckpointError("trailing bytes in checkpoint")
        return cls(config, weights, bn_state)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "ScorerParams":
        return cls.from_bytes(Path(path).read_bytes())


def _dense_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(3.0 / fan_in)
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(n_nodes: int, config: ScorerConfig | None = None, seed: int = 0) -> ScorerParams:
    """Random parameters for a tree with ``n_nodes`` nodes (pass ``tree.n_nodes``)."""
    if hasattr(n_nodes, "n_nodes"):
        n_nodes = n_nodes.n_nodes
    config = config or ScorerConfig()
    rng = np.random.default_rng(seed)
    d = config.dim
    w: dict[str, np.ndarray] = {"emb": rng.uniform(-0.05, 0.05, size=(n_nodes, d))}
    if config.uses_attention:
        H = config.attention_hidden
        w["att_w1"] = _dense_init(rng, 3 * d, H)
        w["att_b1"] = np.zeros(H)
        w["att_a1"] = np.full(H, 0.25)
        w["att_w2"] = _dense_init(rng, H, 1)
        # Unit bias makes the untrained activation unit start near plain averaging.
        w["att_b2"] = np.ones(1)
    fan_in = config.input_width
    for i, width in enumerate(config.hidden):
        w[f"fc{i}_w"] = _dense_init(rng, fan_in, width)
        w[f"fc{i}_b"] = np.zeros(width)
        if config.layer_has_bn_prelu(i):
            w[f"fc{i}_a"] = np.full(width, 0.25)
            if config.batch_norm:
                w[f"bn{i}_gamma"] = np.ones(width)
                w[f"bn{i}_beta"] = np.zeros(width)
        fan_in = width
    if config.variant != "product_dnn":
        w["out_w"] = _dense_init(rng, fan_in, 2)
        w["out_b"] = np.zeros(2)
    bn_state = {}
    if config.batch_norm:
        for i, width in enumerate(config.hidden):
            if config.layer_has_bn_prelu(i):
                bn_state[f"bn{i}_mean"] = np.zeros(width)
                bn_state[f"bn{i}_var"] = np.zeros(width)
        bn_state["bn_steps"] = np.zeros(())
    return ScorerParams(config, w, bn_state)


def count_parameters(config: ScorerConfig, n_nodes: int) -> int:
    """Closed-form trainable parameter count."""
    d, total = config.dim, n_nodes * config.dim
    if config.uses_attention:
        H = config.attention_hidden
        total += 3 * d * H + 3 * H + 1
    fan_in = config.input_width
    for i, width in enumerate(config.hidden):
        total += fan_in * width + width
        if config.layer_has_bn_prelu(i):
            total += width * (3 if config.batch_norm else 1)
        fan_in = width
    if config.variant != "product_dnn":
        total += 2 * fan_in + 2
    return total


# -- behavior encoding -------------------------------------------------------


@dataclass
class Behaviors:
    """Padded behavior windows for a set of users.

    ``nodes`` is (U, W, L) with node ids, ``mask`` marks real entries.
    """

    nodes: np.ndarray
    mask: np.ndarray

    @property
    def n_users(self) -> int:
        return self.nodes.shape[0]

    @classmethod
    def from_windows(cls, windows_per_user: Sequence[Sequence[Sequence[int]]], n_windows: int) -> "Behaviors":
        """Build from per-user lists of node-id windows."""
        U = len(windows_per_user)
        L = 1
        for wins in windows_per_user:
            if len(wins) != n_windows:
                raise ValueError(f"expected {n_windows} windows, got {len(wins)}")
            for win in wins:
                L = max(L, len(win))
        nodes = np.zeros((U, n_windows, L), dtype=np.int64)
        mask = np.zeros((U, n_windows, L))
        for u, wins in enumerate(windows_per_user):
            for j, win in enumerate(wins):
                nodes[u, j, : len(win)] = win
                mask[u, j, : len(win)] = 1.0
        return cls(nodes, mask)

    def take(self, users: np.ndarray) -> "Behaviors":
        users = np.asarray(users)
        nodes, mask = self.nodes[users], self.mask[users]
        L = max(1, int(mask.sum(axis=2).max(initial=0)))
        return Behaviors(nodes[:, :, :L], mask[:, :, :L])


def encode_states(tree, states, n_windows: int) -> Behaviors:
    """Map user-state item ids to leaf node ids, dropping unknown items."""
    lookup = tree.leaf_of_item.lookup
    per_user = []
    for st in states:
        wins = st.windows if hasattr(st, "windows") else st
        per_user.append([lookup(np.asarray(w, dtype=np.int64)) for w in wins])
    return Behaviors.from_windows(per_user, n_windows)


# -- forward / backward ---------------------------------------------------------


def _prelu(z, a):
    return np.where(z > 0, z, a * z)


@dataclass
class _Pairs:
    """Real (sample, behavior) pairs, ordered by sample then window."""

    sample: np.ndarray
    entry: np.ndarray  # flat index into the (U, W, L) behavior arrays
    segment: np.ndarray  # sample * W + window
    inv: np.ndarray  # 1 / size of the pair's window
    seg_ids: np.ndarray
    seg_starts: np.ndarray
    sample_ids: np.ndarray
    sample_starts: np.ndarray


def _run_starts(keys: np.ndarray) -> np.ndarray:
    if len(keys) == 0:
        return np.empty(0, dtype=np.int64)
    return np.flatnonzero(np.concatenate([[True], keys[1:] != keys[:-1]]))


def _attention_pairs(mask: np.ndarray, user_index: np.ndarray) -> _Pairs:
    U, W, L = mask.shape
    real = mask.reshape(U, W * L) > 0
    per_user = real.sum(axis=1)
    ent = np.flatnonzero(real.reshape(-1))
    offsets = np.cumsum(per_user) - per_user
    n = per_user[user_index]
    sample = np.repeat(np.arange(len(user_index)), n)
    within = np.arange(len(sample)) - np.repeat(np.cumsum(n) - n, n)
    entry = ent[offsets[user_index][sample] + within]
    window = entry // L  # = u * W + w
    segment = sample * W + window % W
    inv = 1.0 / mask.sum(axis=2).reshape(-1)[window]
    seg_starts = _run_starts(segment)
    sample_starts = _run_starts(sample)
    return _Pairs(sample, entry, segment, inv, segment[seg_starts], seg_starts, sample[sample_starts], sample_starts)


def _check(x: np.ndarray, name: str) -> None:
    if not np.isfinite(x).all():
        raise NumericError(name)


def bn_running_stats(params: ScorerParams, i: int) -> tuple[np.ndarray, np.ndarray]:
    """Bias-corrected running mean/variance for BN layer ``i``."""
    st = params.bn_state
    steps = float(st["bn_steps"])
    if steps == 0:
        width = params.config.hidden[i]
        return np.zeros(width), np.ones(width)
    corr = 1.0 - params.config.bn_momentum**steps
    return st[f"bn{i}_mean"] / corr, st[f"bn{i}_var"] / corr


@dataclass
class ForwardCache:
    prob: np.ndarray
    raw_prob: np.ndarray
    user_index: np.ndarray
    cand: np.ndarray
    train: bool
    store: dict = field(default_factory=dict)

    @property
    def n_clamped(self) -> int:
        return int(((self.raw_prob < PROB_CLAMP) | (self.raw_prob > 1 - PROB_CLAMP)).sum())


def forward(
    params: ScorerParams,
    behaviors: Behaviors,
    user_index: np.ndarray,
    cand: np.ndarray,
    train: bool = False,
    keep_cache: bool | None = None,
) -> ForwardCache:
    """Score ``cand[s]`` for user ``user_index[s]``; returns probabilities and a cache.

    ``train=True`` normalises with batch statistics; otherwise the running
    statistics are used.
    """
    cfg, w = params.config, params.weights
    keep = train if keep_cache is None else keep_cache
    user_index = np.asarray(user_index, dtype=np.int64)
    cand = np.asarray(cand, dtype=np.int64)
    E = w["emb"]
    if len(cand) and (cand.min() < 0 or cand.max() >= E.shape[0]):
        raise IndexError(f"candidate node id out of range [0, {E.shape[0]})")
    if behaviors.nodes.size and (behaviors.nodes.min() < 0 or behaviors.nodes.max() >= E.shape[0]):
        raise IndexError(f"behavior node id out of range [0, {E.shape[0]})")
    S, d, W = len(cand), cfg.dim, cfg.n_windows
    mask = behaviors.mask
    B = E[behaviors.nodes] * mask[..., None]  # (U, W, L, d)
    counts = mask.sum(axis=2)
    inv = 1.0 / np.maximum(counts, 1.0)  # (U, W)
    c = E[cand]
    store: dict = {}

    if cfg.uses_attention:
        # Work on the flat list of real (sample, behavior) pairs so padding costs nothing.
        pairs = _attention_pairs(mask, user_index)
        ent_node = behaviors.nodes.reshape(-1)[pairs.entry]
        Wb, Wc, Wp = w["att_w1"][:d], w["att_w1"][d : 2 * d], w["att_w1"][2 * d :]
        Bp = E[ent_node]  # (P, d)
        cp = c[pairs.sample]
        Bc = Bp * cp
        pre = Bp @ Wb
        pre += (c @ Wc)[pairs.sample]
        pre += Bc @ Wp
        pre += w["att_b1"]
        slope = np.where(pre > 0, 1.0, w["att_a1"])
        act = pre * slope
        wt = act @ w["att_w2"][:, 0] + w["att_b2"][0]  # (P,)
        _check(wt, "attention")
        scale = wt * pairs.inv
        pooled = np.zeros((S * W, d))
        if len(pairs.sample):
            pooled[pairs.seg_ids] = np.add.reduceat(scale[:, None] * Bp, pairs.seg_starts, axis=0)
        pooled = pooled.reshape(S, W, d)
        if keep:
            store.update(pairs=pairs, ent_node=ent_node, Bp=Bp, cp=cp, Bc=Bc, pre=pre, slope=slope, act=act, wt=wt)
    else:
        pooled_u = B.sum(axis=2) * inv[..., None]  # (U, W, d)
        pooled = pooled_u[user_index]
    _check(pooled, "pooling")

    x = pooled.reshape(S, W * d)
    if cfg.variant != "product_dnn":
        x = np.concatenate([x, c], axis=1)
    layers = []
    for i, _width in enumerate(cfg.hidden):
        z = x @ w[f"fc{i}_w"] + w[f"fc{i}_b"]
        rec = {"x": x}
        if cfg.layer_has_bn_prelu(i):
            if cfg.batch_norm:
                if train:
                    mu = z.mean(axis=0)
                    var = z.var(axis=0)
                else:
                    mu, var = bn_running_stats(params, i)
                inv_std = 1.0 / np.sqrt(var + cfg.bn_eps)
                xhat = (z - mu) * inv_std
                zn = w[f"bn{i}_gamma"] * xhat + w[f"bn{i}_beta"]
                rec.update(xhat=xhat, inv_std=inv_std, batch_mean=mu, batch_var=var)
            else:
                zn = z
            h = _prelu(zn, w[f"fc{i}_a"])
            rec["zn"] = zn
        else:
            h = z
        _check(h, f"fc{i}")
        layers.append(rec)
        x = h
    if cfg.variant == "product_dnn":
        delta = np.einsum("sd,sd->s", c, x)
    else:
        logits = x @ w["out_w"] + w["out_b"]
        delta = logits[:, 1] - logits[:, 0]
    _check(delta, "output")
    raw = expit(delta)
    prob = np.clip(raw, PROB_CLAMP, 1.0 - PROB_CLAMP)
    if keep:
        store.update(B=B, inv=inv, c=c, layers=layers, top=x)
    return ForwardCache(prob, raw, user_index, cand, train, store)


def bce_loss(prob: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample cross-entropy on clamped probabilities."""
    p = np.clip(prob, PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(labels, dtype=np.float64)
    return -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))


def _scatter_rows(n_rows: int, idx: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Sum rows of ``values`` into an (n_rows, d) array at ``idx``."""
    if len(idx) == 0:
        return np.zeros((n_rows, values.shape[1]))
    m = sp.csr_matrix((np.ones(len(idx)), (idx, np.arange(len(idx)))), shape=(n_rows, len(idx)))
    return np.asarray(m @ values)


def backward(params: ScorerParams, behaviors: Behaviors, cache: ForwardCache, labels: np.ndarray) -> dict[str, np.ndarray]:
    """Gradient of the mean cross-entropy over the batch w.r.t. every weight.

    Uses the unclamped probability, so it is the exact derivative wherever the
    clamp is inactive.
    """
    if not cache.store:
        raise ValueError("forward cache missing; call forward with keep_cache=True")
    cfg, w, st = params.config, params.weights, cache.store
    y = np.asarray(labels, dtype=np.float64)
    S, d, W = len(cache.cand), cfg.dim, cfg.n_windows
    g = (cache.raw_prob - y) / S
    grads: dict[str, np.ndarray] = {}
    c, top = st["c"], st["top"]
    if cfg.variant == "product_dnn":
        dc = g[:, None] * top
        dh = g[:, None] * c
    else:
        dlog = np.stack([-g, g], axis=1)
        grads["out_w"] = top.T @ dlog
        grads["out_b"] = dlog.sum(axis=0)
        dh = dlog @ w["out_w"].T
        dc = np.zeros_like(c)

    for i in reversed(range(len(cfg.hidden))):
        rec = st["layers"][i]
        if cfg.layer_has_bn_prelu(i):
            zn, a = rec["zn"], w[f"fc{i}_a"]
            pos = zn > 0
            grads[f"fc{i}_a"] = np.where(pos, 0.0, zn * dh).sum(axis=0)
            dzn = np.where(pos, dh, a * dh)
            if cfg.batch_norm:
                xhat, inv_std, gamma = rec["xhat"], rec["inv_std"], w[f"bn{i}_gamma"]
                grads[f"bn{i}_gamma"] = (dzn * xhat).sum(axis=0)
                grads[f"bn{i}_beta"] = dzn.sum(axis=0)
                dxhat = dzn * gamma
                if cache.train:
                    n = dxhat.shape[0]
                    dz = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
                else:
                    dz = dxhat * inv_std
            else:
                dz = dzn
        else:
            dz = dh
        x = rec["x"]
        grads[f"fc{i}_w"] = x.T @ dz
        grads[f"fc{i}_b"] = dz.sum(axis=0)
        dh = dz @ w[f"fc{i}_w"].T

    dx = dh
    if cfg.variant != "product_dnn":
        dc = dc + dx[:, W * d :]
    dpooled = dx[:, : W * d].reshape(S, W, d)

    n_nodes = w["emb"].shape[0]
    mask, nodes = behaviors.mask, behaviors.nodes
    uidx = cache.user_index
    if cfg.uses_attention:
        pairs = st["pairs"]
        Bp, cp, Bc, pre, slope, act, wt = (st[k] for k in ("Bp", "cp", "Bc", "pre", "slope", "act", "wt"))
        Wb, Wc, Wp = w["att_w1"][:d], w["att_w1"][d : 2 * d], w["att_w1"][2 * d :]
        gp = dpooled.reshape(S * W, d)[pairs.segment] * pairs.inv[:, None]  # (P, d)
        dwt = np.einsum("pd,pd->p", gp, Bp)
        grads["att_w2"] = (act.T @ dwt)[:, None]
        grads["att_b2"] = np.array([dwt.sum()])
        dact = dwt[:, None] * w["att_w2"][:, 0]
        grads["att_a1"] = (dact * np.where(pre > 0, 0.0, pre)).sum(axis=0)
        dpre = dact * slope
        grads["att_b1"] = dpre.sum(axis=0)
        grads["att_w1"] = np.concatenate([Bp.T @ dpre, cp.T @ dpre, Bc.T @ dpre], axis=0)
        dpre_p = dpre @ Wp.T  # (P, d)
        dBp = wt[:, None] * gp + dpre @ Wb.T + dpre_p * cp
        dcp = dpre @ Wc.T + dpre_p * Bp
        if len(pairs.sample):
            dc[pairs.sample_ids] += np.add.reduceat(dcp, pairs.sample_starts, axis=0)
        rows = st["ent_node"]
        vals = dBp
    else:
        inv = st["inv"]
        dpool_u = _scatter_rows(behaviors.n_users, uidx, dpooled.reshape(S, W * d)).reshape(-1, W, d)
        dB = (dpool_u * inv[..., None])[:, :, None, :] * np.ones_like(mask)[..., None]
        sel = mask.reshape(-1) > 0
        rows = nodes.reshape(-1)[sel]
        vals = dB.reshape(-1, d)[sel]
    grads["emb"] = _scatter_rows(n_nodes, np.concatenate([rows, cache.cand]), np.concatenate([vals, dc]))
    return grads


def update_bn_stats(params: ScorerParams, cache: ForwardCache) -> None:
    """Fold the batch statistics of a training forward pass into the running stats."""
    cfg = params.config
    if not (cfg.batch_norm and cache.train):
        return
    m = cfg.bn_momentum
    for i, rec in enumerate(cache.store["layers"]):
        if "batch_mean" not in rec:
            continue
        params.bn_state[f"bn{i}_mean"] = m * params.bn_state[f"bn{i}_mean"] + (1 - m) * rec["batch_mean"]
        params.bn_state[f"bn{i}_var"] = m * params.bn_state[f"bn{i}_var"] + (1 - m) * rec["batch_var"]
    params.bn_state["bn_steps"] = params.bn_state["bn_steps"] + 1


def loss_and_grad(params: ScorerParams, behaviors: Behaviors, user_index, cand, labels, train: bool = True):
    cache = forward(params, behaviors, user_index, cand, train=train, keep_cache=True)
    loss = float(bce_loss(cache.prob, labels).mean())
    return loss, backward(params, behaviors, cache, labels), cache


# -- convenience scoring -----------------------------------------------------------


def user_vectors(params: ScorerParams, behaviors: Behaviors) -> np.ndarray:
    """product_dnn only: the user-side vector whose dot with a node embedding is the logit."""
    if params.config.variant != "product_dnn":
        raise ValueError("user vectors exist only for product_dnn")
    users = np.arange(behaviors.n_users)
    cache = forward(params, behaviors, users, np.zeros(len(users), dtype=np.int64), keep_cache=True)
    return cache.store["top"]


def score_nodes(params: ScorerParams, behaviors: Behaviors, user_index, nodes, chunk: int = 4096) -> np.ndarray:
    """Eval-mode probabilities for (user, node) pairs, chunked to bound memory."""
    user_index = np.asarray(user_index, dtype=np.int64)
    nodes = np.asarray(nodes, dtype=np.int64)
    if len(nodes) <= chunk:
        return forward(params, behaviors, user_index, nodes).prob
    out = np.empty(len(nodes))
    for lo in range(0, len(nodes), chunk):
        out[lo : lo + chunk] = forward(params, behaviors, user_index[lo : lo + chunk], nodes[lo : lo + chunk]).prob
    return out
