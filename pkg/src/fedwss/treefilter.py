"""Minimum-spanning-tree filtering over pixel grids.

A 4-connected grid graph is built from per-pixel feature distances, reduced
to an MST by Borůvka rounds, and used to smooth class probability maps: each
output pixel is the affinity-weighted average of all pixels, with affinity
exp(-path_distance / sigma_a) along the unique tree path. The two-pass
dynamic program computes this exactly in O(N) per channel.

Everything here operates on plain arrays: pseudo-labels are soft targets and
never carry gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from numba import njit

from .engine import DiffTensor, absval, mul, scale, sub, tsum, upsample2_array
from .pgm import write_pgm


class AffinitySource(Enum):
    LOW = "low"
    HIGH1 = "high1"
    HIGH2 = "high2"


@dataclass
class AffinitySpec:
    source: AffinitySource
    sigma_a: float = 1.0

    def __post_init__(self):
        if self.sigma_a <= 0:
            raise ValueError("sigma_a must be positive")


@dataclass
class GridGraph:
    height: int
    width: int
    edge_u: np.ndarray
    edge_v: np.ndarray
    edge_w: np.ndarray

    @property
    def num_edges(self) -> int:
        return len(self.edge_u)


@dataclass
class SpanningTree:
    height: int
    width: int
    parent: np.ndarray        # parent pixel id; -1 at the root
    parent_weight: np.ndarray  # weight of the edge to the parent
    order: np.ndarray          # BFS traversal, root first
    root: int

    @property
    def total_weight(self) -> float:
        # canonical reduction order (sorted ascending) so equal-multiset
        # trees report bitwise-equal totals
        return float(np.sort(self.parent_weight[self.parent >= 0]).sum())


_EDGE_CACHE: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}


def _grid_edges(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    key = (h, w)
    cached = _EDGE_CACHE.get(key)
    if cached is None:
        ids = np.arange(h * w).reshape(h, w)
        hu = ids[:, :-1].ravel()
        vu = ids[:-1, :].ravel()
        u = np.concatenate([hu, vu])
        v = np.concatenate([hu + 1, vu + w])
        cached = (u.astype(np.int64), v.astype(np.int64))
        _EDGE_CACHE[key] = cached
    return cached


def build_grid_graph(feature: np.ndarray) -> GridGraph:
    """4-connected graph; edge weight is the Euclidean feature difference."""
    c, h, w = feature.shape
    u, v = _grid_edges(h, w)
    dh = feature[:, :, 1:] - feature[:, :, :-1]
    dv = feature[:, 1:, :] - feature[:, :-1, :]
    wh = np.sqrt((dh * dh).sum(axis=0)).ravel()
    wv = np.sqrt((dv * dv).sum(axis=0)).ravel()
    return GridGraph(h, w, u, v, np.concatenate([wh, wv]))


@njit(cache=True)
def _boruvka_select(n, eu, ev, order):
    """Borůvka rounds over edges pre-sorted by (weight, u, v); returns the
    chosen-edge mask. First-seen per component equals lexicographic-min."""
    parent = np.arange(n)
    chosen = np.zeros(len(eu), dtype=np.bool_)
    cheapest = np.full(n, -1, dtype=np.int64)
    n_comp = n
    while n_comp > 1:
        for s in range(len(order)):
            idx = order[s]
            ru = eu[idx]
            while parent[ru] != ru:
                ru = parent[ru]
            rv = ev[idx]
            while parent[rv] != rv:
                rv = parent[rv]
            if ru == rv:
                continue
            if cheapest[ru] == -1:
                cheapest[ru] = idx
            if cheapest[rv] == -1:
                cheapest[rv] = idx
        for node in range(n):
            idx = cheapest[node]
            if idx == -1:
                continue
            cheapest[node] = -1
            ru = eu[idx]
            while parent[ru] != ru:
                ru = parent[ru]
            rv = ev[idx]
            while parent[rv] != rv:
                rv = parent[rv]
            if ru == rv:
                continue
            parent[ru] = rv
            chosen[idx] = True
            n_comp -= 1
        for i in range(n):
            r = i
            while parent[r] != r:
                r = parent[r]
            parent[i] = r
    return chosen


@njit(cache=True)
def _tree_bfs(n, eu, ev, ew, root):
    """Parent links, parent edge weights, and root-first BFS order."""
    counts = np.zeros(n + 1, dtype=np.int64)
    for e in range(len(eu)):
        counts[eu[e] + 1] += 1
        counts[ev[e] + 1] += 1
    offsets = np.cumsum(counts)
    adj = np.empty(offsets[-1], dtype=np.int64)
    adj_w = np.empty(offsets[-1], dtype=np.float64)
    fill = offsets[:-1].copy()
    for e in range(len(eu)):
        adj[fill[eu[e]]] = ev[e]
        adj_w[fill[eu[e]]] = ew[e]
        fill[eu[e]] += 1
        adj[fill[ev[e]]] = eu[e]
        adj_w[fill[ev[e]]] = ew[e]
        fill[ev[e]] += 1
    parent = np.full(n, -1, dtype=np.int64)
    pweight = np.zeros(n, dtype=np.float64)
    order = np.empty(n, dtype=np.int64)
    seen = np.zeros(n, dtype=np.bool_)
    order[0] = root
    seen[root] = True
    head, tail = 0, 1
    while head < tail:
        u = order[head]
        head += 1
        for s in range(offsets[u], offsets[u + 1]):
            v = adj[s]
            if not seen[v]:
                seen[v] = True
                parent[v] = u
                pweight[v] = adj_w[s]
                order[tail] = v
                tail += 1
    return parent, pweight, order


def boruvka_mst(g: GridGraph, root: int = 0) -> SpanningTree:
    """Minimum spanning tree by Borůvka rounds.

    Equal-weight candidates are broken by the lexicographically smallest
    (weight, pixel id, neighbor id) key, so the tree is deterministic.
    """
    n = g.height * g.width
    if n == 0 or g.num_edges == 0:
        raise ValueError("cannot build a spanning tree over an empty graph")
    order = np.lexsort((g.edge_v, g.edge_u, g.edge_w)).astype(np.int64)
    chosen = _boruvka_select(n, g.edge_u, g.edge_v, order)
    parent, pweight, bfs = _tree_bfs(n, g.edge_u[chosen], g.edge_v[chosen],
                                     g.edge_w[chosen], root)
    return SpanningTree(g.height, g.width, parent, pweight, bfs, root)


@njit(cache=True)
def _two_pass(order, parent, decay, values):
    """Affinity-weighted sums over all tree paths.

    Leaf-to-root aggregation followed by root-to-leaf distribution; ``decay``
    holds exp(-w/sigma) for each node's parent edge.
    """
    n_ch, n = values.shape
    up = values.copy()
    for t in range(n - 1, 0, -1):
        i = order[t]
        p = parent[i]
        a = decay[i]
        for ch in range(n_ch):
            up[ch, p] += a * up[ch, i]
    out = up.copy()
    for t in range(1, n):
        i = order[t]
        p = parent[i]
        a = decay[i]
        for ch in range(n_ch):
            out[ch, i] = up[ch, i] + a * (out[ch, p] - a * up[ch, i])
    return out


def tree_filter(p: np.ndarray, tree: SpanningTree, sigma_a: float = 1.0) -> np.ndarray:
    """Filter class maps along the tree; renormalizes classes per pixel.

    ``p`` must be nonnegative, shaped [num_classes, H, W] with extents
    matching the tree's grid.
    """
    c, h, w = p.shape
    if (h, w) != (tree.height, tree.width):
        raise ValueError(f"map extents {h}x{w} do not match tree grid "
                         f"{tree.height}x{tree.width}")
    if sigma_a <= 0:
        raise ValueError("sigma_a must be positive")
    decay = np.exp(-tree.parent_weight / sigma_a)
    stacked = np.concatenate([p.reshape(c, h * w), np.ones((1, h * w))], axis=0)
    sums = _two_pass(tree.order, tree.parent, decay, np.ascontiguousarray(stacked))
    out = sums[:c] / sums[c:]
    return (out / out.sum(axis=0, keepdims=True)).reshape(c, h, w)


def _upsample_to(x: np.ndarray, h: int, w: int) -> np.ndarray:
    while x.shape[1] < h or x.shape[2] < w:
        x = upsample2_array(x)
    if x.shape[1:] != (h, w):
        raise ValueError(f"cannot upsample {x.shape} to {h}x{w} by doubling")
    return x


def _normalize_pixels(f: np.ndarray) -> np.ndarray:
    norm = np.sqrt((f * f).sum(axis=0, keepdims=True))
    return f / np.maximum(norm, 1e-12)


def cascade_pseudo_label(p: np.ndarray, image: np.ndarray, d2: np.ndarray,
                         d3: np.ndarray, sigma_a: float = 1.0,
                         l2_normalize: bool = True) -> np.ndarray:
    """Soft pseudo-labels from three stacked tree filters.

    The first tree comes from the raw image (boundary detail), the next two
    from decoder features upsampled to full resolution (semantic
    consistency); high-level feature vectors are L2-normalized per pixel by
    default to bound path distances. The result is a plain array: no
    gradient flows into the pseudo-label.
    """
    h, w = p.shape[1:]
    out = p
    for feat in (image, _upsample_to(d2, h, w), _upsample_to(d3, h, w)):
        if feat is not image and l2_normalize:
            feat = _normalize_pixels(feat)
        tree = boruvka_mst(build_grid_graph(feat))
        out = tree_filter(out, tree, sigma_a)
    return out


def mstree_loss(p: DiffTensor, pseudo: np.ndarray,
                unlabeled_mask: np.ndarray) -> DiffTensor:
    """Mean L1 gap between prediction and pseudo-label over unlabeled pixels,
    summed across classes; gradient flows through the prediction only."""
    n_u = int(unlabeled_mask.sum())
    if n_u == 0:
        return p.tape.constant(np.zeros(()))
    tape = p.tape
    mask3 = np.broadcast_to(unlabeled_mask.astype(np.float64), p.data.shape)
    gap = absval(sub(p, tape.constant(pseudo)))
    return scale(tsum(mul(gap, tape.constant(mask3))), 1.0 / n_u)


def dump_pseudo_label(path: str | Path, pseudo: np.ndarray) -> None:
    """Debug dump of argmax(pseudo) as a PGM raster of raw class ids."""
    write_pgm(path, pseudo.argmax(axis=0).astype(np.uint8))
