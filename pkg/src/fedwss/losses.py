"""Sparse-supervision losses and the combined training objectives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as eg
from .engine import DiffTensor
from .treefilter import mstree_loss

UNLABELED = 255

_PROB_FLOOR = 1e-12  # clamp before log; saturated softmax would give -inf


@dataclass
class SparseLabelMap:
    """Per-pixel class map over {0..num_classes-1} plus UNLABELED (255)."""
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        bad = (self.labels != UNLABELED) & (self.labels >= self.num_classes)
        if bad.any():
            raise ValueError(
                f"label values {sorted(np.unique(self.labels[bad]))} exceed "
                f"num_classes={self.num_classes}")

    @property
    def labeled_mask(self) -> np.ndarray:
        return self.labels != UNLABELED

    @property
    def unlabeled_mask(self) -> np.ndarray:
        return self.labels == UNLABELED

    def one_hot(self) -> np.ndarray:
        """[num_classes,H,W] indicator of labeled pixels' classes."""
        h, w = self.labels.shape
        y = np.zeros((self.num_classes, h, w))
        mask = self.labeled_mask
        rows, cols = np.nonzero(mask)
        y[self.labels[mask].astype(int), rows, cols] = 1.0
        return y


@dataclass
class LossWeights:
    lambda1: float = 0.1
    lambda2: float = 0.1
    lambda3: float = 1.0

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class GatedCrfConfig:
    radius: int = 2
    sigma_xy: float = 3.0
    sigma_rgb: float = 0.1

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError("window radius must be >= 1")
        if self.sigma_xy <= 0 or self.sigma_rgb <= 0:
            raise ValueError("kernel bandwidths must be positive")


def partial_ce(p: DiffTensor, y: SparseLabelMap) -> DiffTensor:
    """Cross-entropy restricted to labeled pixels; exact 0 when none are."""
    n_l = int(y.labeled_mask.sum())
    if n_l == 0:
        return p.tape.constant(np.zeros(()))
    one_hot = p.tape.constant(y.one_hot())
    logp = eg.log(eg.clamp(p, _PROB_FLOOR, 1.0))
    return eg.scale(eg.tsum(eg.mul(one_hot, logp)), -1.0 / n_l)


def gated_crf(p: DiffTensor, image: np.ndarray, cfg: GatedCrfConfig) -> DiffTensor:
    """Windowed pairwise smoothness penalty.

    For every ordered in-bounds pixel pair (i, j) with j in the (2r+1)^2
    window of i, a Gaussian position/intensity kernel weights the class
    incompatibility 1 - sum_c P_ic P_jc; the loss is the kernel-weighted
    average. Image intensities are expected in [0, 1]. Gradient flows
    through both pair members.
    """
    r = cfg.radius
    c, h, w = p.data.shape
    pd = p.data
    den = 0.0
    num = 0.0
    acc = np.zeros_like(pd)  # acc[c,i] = sum_j k_ij * P_jc over both pair roles
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            ys0, ys1 = max(0, -dy), min(h, h - dy)
            xs0, xs1 = max(0, -dx), min(w, w - dx)
            if ys0 >= ys1 or xs0 >= xs1:
                continue
            src = (slice(None), slice(ys0, ys1), slice(xs0, xs1))
            dst = (slice(None), slice(ys0 + dy, ys1 + dy), slice(xs0 + dx, xs1 + dx))
            di = image[src] - image[dst]
            kern = np.exp(-(dx * dx + dy * dy) / (2.0 * cfg.sigma_xy ** 2)
                          - (di * di).sum(axis=0) / (2.0 * cfg.sigma_rgb ** 2))
            den += kern.sum()
            dot = (pd[src] * pd[dst]).sum(axis=0)
            num += (kern * (1.0 - dot)).sum()
            acc[src] += kern * pd[dst]
    if den == 0.0:
        return p.tape.constant(np.zeros(()))

    def backward(g):
        # every unordered pair contributes through both ordered roles
        return (acc * (-2.0 * float(g) / den),)

    return eg.apply_op((p,), np.asarray(num / den), backward)


def seg_loss(p: DiffTensor, y: SparseLabelMap, pseudo: np.ndarray | None,
             image: np.ndarray, weights: LossWeights,
             cfg: GatedCrfConfig) -> DiffTensor:
    """Sparse-supervision objective: pCE + l1 * tree energy + l2 * gated CRF."""
    total = partial_ce(p, y)
    if weights.lambda1 != 0.0:
        if pseudo is None:
            raise ValueError("tree-energy term enabled but no pseudo-label given")
        total = eg.add(total, eg.scale(mstree_loss(p, pseudo, y.unlabeled_mask),
                                       weights.lambda1))
    if weights.lambda2 != 0.0:
        total = eg.add(total, eg.scale(gated_crf(p, image, cfg), weights.lambda2))
    return total


def local_objective(seg: DiffTensor, con: DiffTensor,
                    weights: LossWeights) -> DiffTensor:
    """Total per-site objective: segmentation loss + l3 * site contrast."""
    return eg.add(seg, eg.scale(con, weights.lambda3))
