"""Leveled recommendation tree with array-backed navigation and a binary file format.

Node ids are dense and assigned in level order (breadth-first, children in
order), so the children of a node occupy a contiguous id range and every level
is a contiguous id range as well.
"""

from __future__ import annotations

import hashlib
import struct
from collections.abc import Mapping
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"TDMT"
FORMAT_VERSION = 1
NO_ITEM = -1
NO_NODE = -1

_RECORD = np.dtype(
    [
        ("parent", "<i8"),
        ("first_child", "<i8"),
        ("child_count", "<u4"),
        ("level", "<u4"),
        ("item_id", "<i8"),
    ]
)
_ITEM_PAIR = np.dtype([("item_id", "<i8"), ("node_id", "<i8")])


class TreeError(ValueError):
    pass


class TreeFormatError(TreeError):
    pass


class UnsupportedTreeOperation(TreeError):
    pass


class _ArrayMap(Mapping):
    """Read-only int -> int mapping over sorted key arrays."""

    def __init__(self, keys: np.ndarray, values: np.ndarray):
        order = np.argsort(keys, kind="stable")
        self._keys = np.asarray(keys, dtype=np.int64)[order]
        self._values = np.asarray(values, dtype=np.int64)[order]

    def _find(self, key) -> int:
        try:
            key = int(key)
        except (TypeError, ValueError):
            return -1
        pos = int(np.searchsorted(self._keys, key))
        if pos < len(self._keys) and self._keys[pos] == key:
            return pos
        return -1

    def __getitem__(self, key) -> int:
        pos = self._find(key)
        if pos < 0:
            raise KeyError(key)
        return int(self._values[pos])

    def __contains__(self, key) -> bool:
        return self._find(key) >= 0

    def __iter__(self):
        return (int(k) for k in self._keys)

    def __len__(self) -> int:
        return len(self._keys)

    def lookup(self, keys: np.ndarray, missing: int | None = None) -> np.ndarray:
        """Values for ``keys`` in input order.

        Absent keys are dropped, or replaced by ``missing`` when it is given.
        """
        keys = np.asarray(keys, dtype=np.int64)
        if len(self._keys) == 0 or len(keys) == 0:
            if missing is None or len(keys) == 0:
                return np.empty(0, dtype=np.int64)
            return np.full(len(keys), missing, dtype=np.int64)
        pos = np.clip(np.searchsorted(self._keys, keys), 0, len(self._keys) - 1)
        hit = self._keys[pos] == keys
        if missing is None:
            return self._values[pos[hit]]
        return np.where(hit, self._values[pos], missing)


class TreeIndex:
    """Immutable tree over a corpus; leaves are in bijection with items."""

    def __init__(self, parent, first_child, child_count, level, item_id):
        self.parent = np.asarray(parent, dtype=np.int64)
        self.first_child = np.asarray(first_child, dtype=np.int64)
        self.child_count = np.asarray(child_count, dtype=np.int64)
        self.level = np.asarray(level, dtype=np.int64)
        self.item_id = np.asarray(item_id, dtype=np.int64)
        for a in (self.parent, self.first_child, self.child_count, self.level, self.item_id):
            a.setflags(write=False)
        self._validate()
        self.root_id = 0
        self.max_level = int(self.level.max())
        starts = np.searchsorted(self.level, np.arange(1, self.max_level + 2))
        self._level_start = starts
        leaves = np.flatnonzero(self.child_count == 0)
        self.leaves = leaves
        self.leaves.setflags(write=False)
        self.leaf_of_item = _ArrayMap(self.item_id[leaves], leaves)
        self.item_of_leaf = _ArrayMap(leaves, self.item_id[leaves])
        self._is_binary = bool((self.child_count <= 2).all())

    def _validate(self) -> None:
        n = len(self.parent)
        if n == 0:
            raise TreeError("empty tree")
        if not (len(self.first_child) == len(self.child_count) == len(self.level) == len(self.item_id) == n):
            raise TreeError("node arrays differ in length")
        if self.parent[0] != NO_NODE or (self.parent[1:] == NO_NODE).any():
            raise TreeError("node 0 must be the unique root")
        if self.level[0] != 1:
            raise TreeError("root must sit at level 1")
        if (np.diff(self.level) < 0).any():
            raise TreeError("node ids must be in level order")
        child = np.arange(1, n)
        p = self.parent[1:]
        if (p < 0).any() or (p >= child).any():
            raise TreeError("parent ids must precede children")
        if (self.level[child] != self.level[p] + 1).any():
            raise TreeError("child level must be parent level + 1")
        internal = self.child_count > 0
        if (self.item_id[internal] != NO_ITEM).any():
            raise TreeError("non-leaf nodes cannot carry items")
        leaf_items = self.item_id[~internal]
        if (leaf_items == NO_ITEM).any():
            raise TreeError("every leaf must carry an item")
        if len(np.unique(leaf_items)) != len(leaf_items):
            raise TreeError("item mapped to more than one leaf")
        counts = np.bincount(p, minlength=n)
        if (counts != self.child_count).any():
            raise TreeError("child counts disagree with parent links")
        fc = self.first_child[p]
        if ((child < fc) | (child >= fc + self.child_count[p])).any():
            raise TreeError("children are not stored contiguously after first_child")

    # -- construction -------------------------------------------------------

    @classmethod
    def from_nested(cls, spec) -> "TreeIndex":
        """Build from a nested list: an int is a leaf item, a list is an internal node."""
        parent, level, items, kids = [NO_NODE], [1], [], []
        queue = [spec]
        head = 0
        while head < len(queue):
            node = queue[head]
            nid = head
            head += 1
            if isinstance(node, (list, tuple)):
                if not node:
                    raise TreeError("internal node without children")
                items.append(NO_ITEM)
                kids.append((len(queue), len(node)))
                for child in node:
                    queue.append(child)
                    parent.append(nid)
                    level.append(level[nid] + 1)
            else:
                items.append(int(node))
                kids.append((NO_NODE, 0))
        first = [k[0] for k in kids]
        count = [k[1] for k in kids]
        return cls(parent, first, count, level, items)

    @classmethod
    def from_item_order(cls, items: Sequence[int]) -> "TreeIndex":
        """Near-complete binary tree from a ranked item list.

        The list is halved recursively (left half takes the extra item when
        the size is odd) until each part holds one item.
        """
        items = np.asarray(items, dtype=np.int64)
        if len(items) == 0:
            raise TreeError("cannot build a tree over an empty corpus")
        # One row per node in level order: (start, stop) slice of the item list.
        starts, stops = [np.array([0])], [np.array([len(items)])]
        parents, levels = [np.array([NO_NODE])], [np.array([1])]
        seg_start, seg_stop = starts[0], stops[0]
        seg_ids = np.array([0])
        next_id = 1
        lvl = 1
        while True:
            size = seg_stop - seg_start
            split = size > 1
            if not split.any():
                break
            s0, s1, ids = seg_start[split], seg_stop[split], seg_ids[split]
            mid = s0 + (s1 - s0 + 1) // 2
            child_start = np.stack([s0, mid], axis=1).ravel()
            child_stop = np.stack([mid, s1], axis=1).ravel()
            child_parent = np.repeat(ids, 2)
            child_ids = np.arange(next_id, next_id + len(child_start))
            next_id += len(child_start)
            lvl += 1
            starts.append(child_start)
            stops.append(child_stop)
            parents.append(child_parent)
            levels.append(np.full(len(child_start), lvl))
            seg_start, seg_stop, seg_ids = child_start, child_stop, child_ids
        start = np.concatenate(starts)
        stop = np.concatenate(stops)
        parent = np.concatenate(parents)
        level = np.concatenate(levels)
        n = len(parent)
        child_count = np.bincount(parent[1:], minlength=n)
        first_child = np.full(n, NO_NODE, dtype=np.int64)
        # Children were emitted in parent order, so the first occurrence is the first child.
        uniq, first_pos = np.unique(parent[1:], return_index=True)
        first_child[uniq] = first_pos + 1
        item_id = np.full(n, NO_ITEM, dtype=np.int64)
        is_leaf = (stop - start) == 1
        item_id[is_leaf] = items[start[is_leaf]]
        return cls(parent, first_child, child_count, level, item_id)

    # -- navigation ---------------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return len(self.parent)

    @property
    def n_items(self) -> int:
        return len(self.leaves)

    def _check(self, node: int) -> int:
        node = int(node)
        if not 0 <= node < self.n_nodes:
            raise TreeError(f"node id {node} out of range [0, {self.n_nodes})")
        return node

    def is_leaf(self, node: int) -> bool:
        return self.child_count[self._check(node)] == 0

    def children(self, node: int) -> np.ndarray:
        node = self._check(node)
        lo = self.first_child[node]
        return np.arange(lo, lo + self.child_count[node]) if lo >= 0 else np.empty(0, dtype=np.int64)

    def children_of(self, nodes: np.ndarray) -> np.ndarray:
        """Concatenated children of ``nodes``, in the given node order."""
        nodes = np.asarray(nodes, dtype=np.int64)
        counts = self.child_count[nodes]
        total = int(counts.sum())
        if total == 0:
            return np.empty(0, dtype=np.int64)
        offsets = np.repeat(self.first_child[nodes] - np.concatenate([[0], np.cumsum(counts)[:-1]]), counts)
        return np.arange(total) + offsets

    def level_of(self, node: int) -> int:
        return int(self.level[self._check(node)])

    def ancestor_at_level(self, node: int, j: int) -> int:
        node = self._check(node)
        lvl = self.level[node]
        if not 1 <= j <= lvl:
            raise TreeError(f"level {j} out of range [1, {lvl}] for node {node}")
        while lvl > j:
            node = int(self.parent[node])
            lvl -= 1
        return node

    def ancestors_at_level(self, nodes: np.ndarray, j: int) -> np.ndarray:
        """Vectorised ancestor lookup; nodes above level ``j`` map to ``NO_NODE``."""
        nodes = np.asarray(nodes, dtype=np.int64).copy()
        lvl = self.level[nodes].copy()
        out_of_range = lvl < j
        while True:
            deep = lvl > j
            if not deep.any():
                break
            nodes[deep] = self.parent[nodes[deep]]
            lvl[deep] -= 1
        nodes[out_of_range] = NO_NODE
        return nodes

    def path(self, node: int) -> list[int]:
        """Nodes from the root down to ``node`` inclusive."""
        node = self._check(node)
        out = [node]
        while self.parent[node] != NO_NODE:
            node = int(self.parent[node])
            out.append(node)
        return out[::-1]

    def encoding(self, leaf: int) -> str:
        """Branch code from root to leaf: first child is '1', second is '0'."""
        leaf = self._check(leaf)
        if not self._is_binary:
            raise UnsupportedTreeOperation("encoding is only defined for binary trees")
        if not self.is_leaf(leaf):
            raise TreeError(f"node {leaf} is not a leaf")
        p = self.path(leaf)
        return "".join("1" if child == self.first_child[par] else "0" for par, child in zip(p, p[1:]))

    def level_range(self, j: int) -> tuple[int, int]:
        if not 1 <= j <= self.max_level:
            raise TreeError(f"level {j} out of range [1, {self.max_level}]")
        return int(self._level_start[j - 1]), int(self._level_start[j])

    def level_nodes(self, j: int) -> np.ndarray:
        lo, hi = self.level_range(j)
        return np.arange(lo, hi)

    def level_width(self, j: int) -> int:
        lo, hi = self.level_range(j)
        return hi - lo

    def leaves_of_items(self, items: Iterable[int]) -> np.ndarray:
        """Leaf ids for the known items; unknown items are dropped."""
        return self.leaf_of_item.lookup(np.fromiter(items, dtype=np.int64))

    # -- equality and persistence ------------------------------------------

    def __eq__(self, other) -> bool:
        if not isinstance(other, TreeIndex):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, a), getattr(other, a))
            for a in ("parent", "first_child", "child_count", "level", "item_id")
        )

    def __repr__(self) -> str:
        return f"TreeIndex(n_nodes={self.n_nodes}, n_items={self.n_items}, max_level={self.max_level})"

    def to_bytes(self) -> bytes:
        rec = np.empty(self.n_nodes, dtype=_RECORD)
        rec["parent"] = self.parent
        rec["first_child"] = self.first_child
        rec["child_count"] = self.child_count
        rec["level"] = self.level
        rec["item_id"] = self.item_id
        pairs = np.empty(len(self.leaves), dtype=_ITEM_PAIR)
        order = np.argsort(self.item_id[self.leaves], kind="stable")
        pairs["item_id"] = self.item_id[self.leaves][order]
        pairs["node_id"] = self.leaves[order]
        body = b"".join(
            [
                MAGIC,
                struct.pack("<I", FORMAT_VERSION),
                struct.pack("<Q", self.n_nodes),
                rec.tobytes(),
                struct.pack("<Q", len(pairs)),
                pairs.tobytes(),
            ]
        )
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, data: bytes) -> "TreeIndex":
        if len(data) < 48 or data[:4] != MAGIC:
            raise TreeFormatError("not a tree file (bad magic)")
        body, digest = data[:-32], data[-32:]
        (version,) = struct.unpack_from("<I", body, 4)
        if version != FORMAT_VERSION:
            raise TreeFormatError(f"tree format version {version} unsupported (expected {FORMAT_VERSION})")
        if hashlib.sha256(body).digest() != digest:
            raise TreeFormatError("tree file checksum mismatch (file corrupted)")
        (n,) = struct.unpack_from("<Q", body, 8)
        off = 16
        rec = np.frombuffer(body, dtype=_RECORD, count=n, offset=off)
        off += n * _RECORD.itemsize
        (m,) = struct.unpack_from("<Q", body, off)
        off += 8
        pairs = np.frombuffer(body, dtype=_ITEM_PAIR, count=m, offset=off)
        tree = cls(rec["parent"], rec["first_child"], rec["child_count"], rec["level"], rec["item_id"])
        if m != tree.n_items or not np.array_equal(tree.item_id[pairs["node_id"]], pairs["item_id"]):
            raise TreeFormatError("item map disagrees with leaf records")
        return tree

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "TreeIndex":
        return cls.from_bytes(Path(path).read_bytes())

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def complete_binary_tree(n_leaves: int, items: Sequence[int] | None = None) -> TreeIndex:
    if items is None:
        items = np.arange(n_leaves)
    return TreeIndex.from_item_order(items)
