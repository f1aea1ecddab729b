"""Independent brute-force references for the fast implementations.

Each oracle recomputes a quantity by the most direct method available
(finite differences, exhaustive enumeration, explicit double loops) without
sharing code with the production path it checks. The CLI ``oracle``
subcommand and the test suite both run these.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from . import engine as eg
from .engine import Tape
from .losses import GatedCrfConfig, SparseLabelMap
from .metrics import boundary
from .segnet import SiteEncoding, UNetConfig, build_model, forward_graph, lift_params
from .treefilter import GridGraph, SpanningTree


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_grads(fn: Callable[[list[np.ndarray]], float],
                      arrays: list[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradients of a scalar function of several arrays."""
    grads = []
    work = [a.copy() for a in arrays]
    for ai, a in enumerate(work):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(work)
            flat[i] = orig - h
            fm = fn(work)
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_err(analytic: np.ndarray, reference: np.ndarray) -> float:
    """Elementwise |a - r| scaled by max(|a|, |r|, 1)."""
    a = np.asarray(analytic, dtype=float)
    r = np.asarray(reference, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(r)), 1.0)
    return float((np.abs(a - r) / denom).max())


def gradcheck(builder: Callable[[Tape, list], "eg.DiffTensor"],
              arrays: list[np.ndarray], tol: float = 1e-4,
              h: float = 1e-5, subset: int | None = None,
              rng: np.random.Generator | None = None) -> float:
    """Compare reverse-mode gradients of ``builder`` against central
    differences; returns the worst relative error (and asserts in callers).

    ``builder`` receives a tape plus the lifted leaf tensors and must return
    a scalar tensor. With ``subset`` set, only that many randomly chosen
    coordinates per array are finite-differenced.
    """
    tape = Tape()
    leaves = [tape.leaf(a, requires_grad=True) for a in arrays]
    loss = builder(tape, leaves)
    tape.backward(loss)
    analytic = [leaf.grad for leaf in leaves]

    def value(arrs: list[np.ndarray]) -> float:
        t = Tape()
        ls = [t.leaf(a, requires_grad=False) for a in arrs]
        return builder(t, ls).item()

    worst = 0.0
    work = [a.copy() for a in arrays]
    for ai, a in enumerate(work):
        flat = a.reshape(-1)
        idx: Iterable[int] = range(flat.size)
        if subset is not None and flat.size > subset:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, size=subset,
                                                           replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = value(work)
            flat[i] = orig - h
            fm = value(work)
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            an = analytic[ai].reshape(-1)[i]
            worst = max(worst, max_rel_err(np.asarray(an), np.asarray(fd)))
    return worst


# ---------------------------------------------------------------------------
# graph / tree references


def kruskal_total_weight(g: GridGraph) -> float:
    """MST total weight via Kruskal with union-find (sorted-ascending sum,
    the canonical reduction order shared with SpanningTree.total_weight)."""
    order = np.lexsort((g.edge_v, g.edge_u, g.edge_w))
    n = g.height * g.width
    parent = list(range(n))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    picked = []
    for idx in order:
        ru, rv = find(int(g.edge_u[idx])), find(int(g.edge_v[idx]))
        if ru != rv:
            parent[ru] = rv
            picked.append(float(g.edge_w[idx]))
            if len(picked) == n - 1:
                break
    return float(np.sort(np.asarray(picked)).sum())


def tree_path_distances(tree: SpanningTree) -> np.ndarray:
    """[N,N] matrix of summed edge weights along unique tree paths."""
    n = tree.height * tree.width
    children: list[list[int]] = [[] for _ in range(n)]
    for v in range(n):
        if tree.parent[v] >= 0:
            children[tree.parent[v]].append(v)
    dist = np.zeros((n, n))
    for s in range(n):
        seen = np.zeros(n, bool)
        seen[s] = True
        stack = [s]
        while stack:
            u = stack.pop()
            neigh = list(children[u])
            if tree.parent[u] >= 0:
                neigh.append(int(tree.parent[u]))
            for v in neigh:
                if not seen[v]:
                    seen[v] = True
                    w = tree.parent_weight[v] if tree.parent[v] == u \
                        else tree.parent_weight[u]
                    dist[s, v] = dist[s, u] + w
                    stack.append(v)
    return dist


def tree_filter_allpairs(p: np.ndarray, tree: SpanningTree,
                         sigma_a: float = 1.0) -> np.ndarray:
    """O(N^2) filtering from explicit path distances, same conventions as the
    two-pass implementation (affinity exp(-E/sigma), per-pixel class renorm)."""
    c, h, w = p.shape
    affinity = np.exp(-tree_path_distances(tree) / sigma_a)
    flat = p.reshape(c, h * w)
    out = (affinity @ flat.T).T / affinity.sum(axis=1)
    out = out / out.sum(axis=0, keepdims=True)
    return out.reshape(c, h, w)


# ---------------------------------------------------------------------------
# loss references


def partial_ce_direct(p: np.ndarray, y: SparseLabelMap) -> float:
    labels = y.labels
    total = 0.0
    count = 0
    for i in range(labels.shape[0]):
        for j in range(labels.shape[1]):
            if labels[i, j] != 255:
                total -= np.log(max(p[int(labels[i, j]), i, j], 1e-12))
                count += 1
    return total / count if count else 0.0


def mstree_direct(p: np.ndarray, pseudo: np.ndarray, unlabeled: np.ndarray) -> float:
    total = 0.0
    count = 0
    for i in range(unlabeled.shape[0]):
        for j in range(unlabeled.shape[1]):
            if unlabeled[i, j]:
                total += float(np.abs(p[:, i, j] - pseudo[:, i, j]).sum())
                count += 1
    return total / count if count else 0.0


def gated_crf_double_loop(p: np.ndarray, image: np.ndarray,
                          cfg: GatedCrfConfig) -> float:
    """Explicit per-pixel-pair evaluation of the windowed CRF loss."""
    _, h, w = p.shape
    num = 0.0
    den = 0.0
    for yy in range(h):
        for xx in range(w):
            for dy in range(-cfg.radius, cfg.radius + 1):
                for dx in range(-cfg.radius, cfg.radius + 1):
                    if dy == 0 and dx == 0:
                        continue
                    jy, jx = yy + dy, xx + dx
                    if not (0 <= jy < h and 0 <= jx < w):
                        continue
                    di = image[:, yy, xx] - image[:, jy, jx]
                    k = np.exp(-(dx * dx + dy * dy) / (2 * cfg.sigma_xy ** 2)
                               - float((di * di).sum()) / (2 * cfg.sigma_rgb ** 2))
                    num += k * (1.0 - float((p[:, yy, xx] * p[:, jy, jx]).sum()))
                    den += k
    return num / den if den else 0.0


def contrastive_direct(c_k: np.ndarray, others: list[np.ndarray]) -> float:
    if not others:
        return 0.0
    return -sum(float(np.abs(c_k - c_i).mean()) for c_i in others) / len(others)


# ---------------------------------------------------------------------------
# metric references


def hd95_allpairs(a: np.ndarray, b: np.ndarray) -> float:
    """Directed distances by exhaustive boundary-pair enumeration."""
    a = np.asarray(a, bool)
    b = np.asarray(b, bool)
    ea, eb = not a.any(), not b.any()
    if ea and eb:
        return 0.0
    if ea or eb:
        return float(np.hypot(*a.shape))
    pa = np.argwhere(boundary(a)).astype(float)
    pb = np.argwhere(boundary(b)).astype(float)
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=2))
    pooled = np.concatenate([d.min(axis=1), d.min(axis=0)])
    return float(np.percentile(pooled, 95))


# ---------------------------------------------------------------------------
# gradient suite


def _simplex(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    p = rng.random(shape) + 0.05
    return p / p.sum(axis=0, keepdims=True)


def _op_grad_cases():
    """(name, builder, array-factory) for every engine op."""

    def unary(op):
        return lambda tape, ls: eg.tsum(eg.mul(op(ls[0]), _weight(tape, ls[0])))

    def _weight(tape, x):
        # fixed mixing constant so plain sums do not mask sign errors
        rng = np.random.default_rng(99)
        return tape.constant(rng.standard_normal(x.data.shape))

    cases = [
        ("conv2d", lambda t, ls: eg.tsum(eg.conv2d(ls[0], ls[1], ls[2])),
         lambda rng: [rng.standard_normal((1, 4, 4)),
                      rng.standard_normal((2, 1, 3, 3)), rng.standard_normal(2)]),
        ("conv1x1", lambda t, ls: eg.tsum(eg.conv1x1(ls[0], ls[1], ls[2])),
         lambda rng: [rng.standard_normal((3, 4, 4)),
                      rng.standard_normal((2, 3)), rng.standard_normal(2)]),
        ("dense", lambda t, ls: eg.tsum(eg.dense(ls[0], ls[1], ls[2])),
         lambda rng: [rng.standard_normal(5), rng.standard_normal((4, 5)),
                      rng.standard_normal(4)]),
        ("maxpool2", unary(eg.maxpool2),
         lambda rng: [rng.standard_normal((2, 4, 4))]),
        ("bilinear_upsample2", unary(eg.bilinear_upsample2),
         lambda rng: [rng.standard_normal((2, 3, 4))]),
        ("relu", unary(eg.relu),
         lambda rng: [rng.standard_normal((3, 5)) + 0.01]),
        ("sigmoid", unary(eg.sigmoid),
         lambda rng: [rng.standard_normal((3, 5))]),
        ("softmax_channels", unary(eg.softmax_channels),
         lambda rng: [rng.standard_normal((3, 2, 2))]),
        ("absval", unary(eg.absval),
         lambda rng: [rng.standard_normal((3, 5)) + np.where(
             rng.random((3, 5)) < 0.5, -0.2, 0.2)]),
        ("log", unary(eg.log),
         lambda rng: [rng.random((3, 5)) + 0.2]),
        ("clamp", unary(lambda x: eg.clamp(x, -0.5, 0.5)),
         lambda rng: [rng.standard_normal((3, 5)) * 2.0]),
        ("add", lambda t, ls: eg.tsum(eg.mul(eg.add(ls[0], ls[1]), eg.mul(ls[0], ls[1]))),
         lambda rng: [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))]),
        ("sub", lambda t, ls: eg.tsum(eg.mul(eg.sub(ls[0], ls[1]), eg.mul(ls[0], ls[1]))),
         lambda rng: [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))]),
        ("mul", lambda t, ls: eg.tsum(eg.mul(ls[0], ls[1])),
         lambda rng: [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))]),
        ("concat_channels", lambda t, ls: eg.tsum(
            eg.mul(eg.concat_channels(ls), _cat_weight(t, ls))),
         lambda rng: [rng.standard_normal((2, 3)), rng.standard_normal((4, 3))]),
        ("global_avg_pool", unary(eg.global_avg_pool),
         lambda rng: [rng.standard_normal((3, 4, 4))]),
        ("scale_channels", lambda t, ls: eg.tsum(eg.scale_channels(ls[0], ls[1])),
         lambda rng: [rng.standard_normal((3, 4, 4)), rng.standard_normal(3)]),
        ("tmean", lambda t, ls: eg.tmean(eg.mul(ls[0], ls[0])),
         lambda rng: [rng.standard_normal((3, 4))]),
        ("stop_gradient", lambda t, ls: eg.tsum(eg.mul(ls[0], eg.stop_gradient(ls[0]))),
         lambda rng: [rng.standard_normal((3, 4))]),
    ]

    def _cat_weight(tape, ls):
        rng = np.random.default_rng(98)
        n = sum(x.data.shape[0] for x in ls)
        return tape.constant(rng.standard_normal((n,) + ls[0].data.shape[1:]))

    return cases


def _loss_grad_cases():
    """Composite-loss checks: the contrastive, sparse-label, tree-energy,
    CRF, and combined objectives with respect to their direct inputs."""
    from .losses import gated_crf, local_objective, partial_ce, seg_loss
    from .segnet import contrastive_loss

    crf_cfg = GatedCrfConfig()
    weights_default = _LossWeightsDefault()

    def contrastive(tape, ls):
        others = [tape.leaf(o) for o in _CONTEXT["others"]]
        return contrastive_loss(eg.sigmoid(ls[0]), others)

    def pce(tape, ls):
        return partial_ce(eg.softmax_channels(ls[0]), _CONTEXT["labels"])

    def mstree(tape, ls):
        from .treefilter import mstree_loss
        return mstree_loss(eg.softmax_channels(ls[0]), _CONTEXT["pseudo"],
                           _CONTEXT["labels"].unlabeled_mask)

    def crf(tape, ls):
        return gated_crf(eg.softmax_channels(ls[0]), _CONTEXT["image"], crf_cfg)

    def seg(tape, ls):
        return seg_loss(eg.softmax_channels(ls[0]), _CONTEXT["labels"],
                        _CONTEXT["pseudo"], _CONTEXT["image"],
                        weights_default, crf_cfg)

    def total(tape, ls):
        p = eg.softmax_channels(ls[0])
        others = [tape.leaf(o) for o in _CONTEXT["others"]]
        return local_objective(
            seg_loss(p, _CONTEXT["labels"], _CONTEXT["pseudo"], _CONTEXT["image"],
                     weights_default, crf_cfg),
            contrastive_loss(eg.sigmoid(ls[1]), others), weights_default)

    return [("contrastive_loss", contrastive, 1),
            ("partial_ce", pce, 0),
            ("mstree_loss", mstree, 0),
            ("gated_crf", crf, 0),
            ("seg_loss", seg, 0),
            ("local_objective", total, 2)]


class _LossWeightsDefault:
    lambda1 = 0.1
    lambda2 = 0.1
    lambda3 = 1.0


_CONTEXT: dict = {}


def _fresh_loss_context(rng: np.random.Generator) -> None:
    h = w = 6
    labels = np.full((h, w), 255, dtype=np.int64)
    for cls in range(2):
        labels[tuple(rng.integers(0, h, size=2))] = cls
    pseudo = _simplex(rng, (2, h, w))
    _CONTEXT.update(
        labels=SparseLabelMap(labels, 2),
        pseudo=pseudo,
        image=rng.random((1, h, w)),
        others=[rng.random(4) for _ in range(2)],
    )


def full_network_builder(config: UNetConfig, image: np.ndarray,
                         labels: SparseLabelMap, pseudo: np.ndarray,
                         site: SiteEncoding):
    """Builder for the complete per-site objective over all model parameters
    (the pseudo-label is frozen at its base-parameter value: it is a
    constant soft target, not a differentiation path)."""
    from .losses import GatedCrfConfig, LossWeights, local_objective, seg_loss
    from .segnet import contrastive_loss

    weights = LossWeights()
    crf_cfg = GatedCrfConfig()

    def builder(tape: Tape, leaves: list) -> "eg.DiffTensor":
        tensors = dict(zip(builder.names, leaves))
        out = forward_graph(tape, tensors, image, site, all_sites=True)
        others = [a for i, a in enumerate(out.all_site_attentions) if i != site.k]
        con = contrastive_loss(out.attention, others)
        return local_objective(
            seg_loss(out.probs, labels, pseudo, image, weights, crf_cfg), con, weights)

    return builder


def grad_cases(seeds: int = 20, full_net_full_seeds: int = 1):
    """Yield (name, worst relative error, tolerance) per gradient case."""
    for name, builder, make in _op_grad_cases():
        worst = 0.0
        for s in range(seeds):
            rng = np.random.default_rng(1000 + s)
            worst = max(worst, gradcheck(builder, make(rng)))
        yield name, worst, 1e-4

    for name, builder, n_leaves_kind in _loss_grad_cases():
        worst = 0.0
        for s in range(seeds):
            rng = np.random.default_rng(2000 + s)
            _fresh_loss_context(rng)
            if n_leaves_kind == 2:
                arrays = [rng.standard_normal((2, 6, 6)), rng.standard_normal(4)]
            elif n_leaves_kind == 1:
                arrays = [rng.standard_normal(4)]
            else:
                arrays = [rng.standard_normal((2, 6, 6))]
            worst = max(worst, gradcheck(builder, arrays))
        yield name, worst, 1e-4

    # complete network objective on an 8x8 desk instance
    config = UNetConfig(in_channels=1, num_classes=2, level_channels=(2, 4, 8, 16),
                        num_sites=2, scr_hidden=4)
    worst = 0.0
    for s in range(seeds):
        rng = np.random.default_rng(3000 + s)
        params = build_model(config, seed=4000 + s)
        image = rng.random((1, 8, 8))
        labels = np.full((8, 8), 255, dtype=np.int64)
        labels[2, 2] = 1
        labels[6, 6] = 0
        labels_map = SparseLabelMap(labels, 2)
        site = SiteEncoding(0, 2)
        from .segnet import forward
        from .treefilter import cascade_pseudo_label
        out = forward(params, image, site)
        pseudo = cascade_pseudo_label(out.probs.data, image, out.d2.data,
                                      out.d3.data, sigma_a=1.0)
        builder = full_network_builder(config, image, labels_map, pseudo, site)
        named = params.all_params()
        builder.names = list(named)
        arrays = [named[n] for n in builder.names]
        subset = None if s < full_net_full_seeds else 8
        worst = max(worst, gradcheck(builder, arrays, subset=subset, h=1e-6,
                                     rng=np.random.default_rng(5000 + s)))
    yield "full_network_objective", worst, 1e-3


# ---------------------------------------------------------------------------
# suite runners (used by the CLI `oracle` subcommand)


def _report(name: str, ok: bool, detail: str) -> bool:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return ok


def run_grad_suite(seeds: int = 20) -> bool:
    ok = True
    for name, worst, tol in grad_cases(seeds):
        ok &= _report(name, worst <= tol, f"max rel err {worst:.3e} (tol {tol:g})")
    return ok


def run_mst_suite(cases: int = 50) -> bool:
    from .treefilter import boruvka_mst, build_grid_graph
    ok = True
    rng = np.random.default_rng(20240501)
    for case in range(cases):
        h, w = int(rng.integers(5, 9)), int(rng.integers(5, 9))
        g = build_grid_graph(rng.random((int(rng.integers(1, 4)), h, w)))
        got = boruvka_mst(g).total_weight
        want = kruskal_total_weight(g)
        ok &= _report(f"mst[{case}] {h}x{w}", got == want,
                      f"boruvka {got:.12f} vs kruskal {want:.12f}")
    return ok


def run_treefilter_suite(cases: int = 25) -> bool:
    from .treefilter import boruvka_mst, build_grid_graph, tree_filter
    ok = True
    rng = np.random.default_rng(20240502)
    for case in range(cases):
        feat = rng.random((2, 8, 8))
        p = rng.random((2, 8, 8)) + 0.05
        p /= p.sum(axis=0, keepdims=True)
        tree = boruvka_mst(build_grid_graph(feat))
        err = float(np.abs(tree_filter(p, tree, 1.0)
                           - tree_filter_allpairs(p, tree, 1.0)).max())
        ok &= _report(f"treefilter[{case}]", err <= 1e-9, f"max abs err {err:.3e}")
    return ok


def run_crf_suite(cases: int = 10) -> bool:
    from .losses import gated_crf
    ok = True
    rng = np.random.default_rng(20240503)
    cfg = GatedCrfConfig()
    for case in range(cases):
        p = rng.random((2, 6, 6))
        p /= p.sum(axis=0, keepdims=True)
        img = rng.random((1, 6, 6))
        tape = Tape()
        got = gated_crf(tape.leaf(p), img, cfg).item()
        want = gated_crf_double_loop(p, img, cfg)
        ok &= _report(f"crf[{case}]", abs(got - want) <= 1e-10,
                      f"fast {got:.12f} vs double loop {want:.12f}")
    return ok


def run_metrics_suite(cases: int = 50) -> bool:
    from .metrics import hd95
    ok = True
    rng = np.random.default_rng(20240504)
    for case in range(cases):
        a = rng.random((16, 16)) < 0.3
        b = rng.random((16, 16)) < 0.3
        got, want = hd95(a, b), hd95_allpairs(a, b)
        ok &= _report(f"hd95[{case}]", abs(got - want) <= 1e-9,
                      f"edt {got:.12f} vs all-pairs {want:.12f}")
    return ok


SUITES = {
    "grad": run_grad_suite,
    "mst": run_mst_suite,
    "treefilter": run_treefilter_suite,
    "crf": run_crf_suite,
    "metrics": run_metrics_suite,
}
