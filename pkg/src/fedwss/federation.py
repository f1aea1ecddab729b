"""Federated round protocol.

Each communication round broadcasts the global parameters, initializes every
site's head by learned element-wise interpolation between the global and the
local head (the adaptive-aggregation phase), trains locally on the site's
sparse labels, and aggregates with sample-count weights. A plain-average
baseline mode (no attention, no contrast term, no adaptive head
initialization, labeled-pixel loss only) serves the ablation comparisons.

Sites are independent between the broadcast and aggregation barriers; all
randomness is drawn from per-(site, round, phase) streams split off the
master seed, so results do not depend on execution order.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterable, Sequence

import numpy as np

from . import engine as eg
from .engine import DiffTensor, Tape
from .losses import GatedCrfConfig, LossWeights, SparseLabelMap, gated_crf, partial_ce
from .metrics import dsc, hd95
from .segnet import (ModelParams, SiteEncoding, UNetConfig, build_model,
                     contrastive_loss, forward_graph, lift_params)
from .synthdata import Sample, Task, augment
from .treefilter import cascade_pseudo_label, mstree_loss

ParamDict = dict[str, np.ndarray]


class Mode(Enum):
    FEDICRA = "fedicra"
    FEDAVG = "fedavg"


@dataclass
class AblationFlags:
    aa: bool = True
    scr: bool = True
    mstree: bool = True
    gcrf: bool = True

    @staticmethod
    def baseline() -> "AblationFlags":
        return AblationFlags(aa=False, scr=False, mstree=False, gcrf=False)


@dataclass
class TrainConfig:
    lr0: float = 1e-2
    lr_power: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    batch_size: int = 4
    local_epochs: int = 1
    rounds: int = 50
    aa_lr: float = 1e-2
    aa_max_epochs: int = 5
    aa_tol: float = 1e-4
    augment: bool = True
    eval_every: int = 5
    workers: int = 1
    sigma_a: float = 1.0


def poly_lr(cfg: TrainConfig, round_index: int) -> float:
    """lr0 * (1 - t/T)^power for t in [0, T]; hits 0 exactly at t = T."""
    frac = 1.0 - round_index / cfg.rounds
    return cfg.lr0 * frac ** cfg.lr_power if frac > 0 else 0.0


def stream(master_seed: int, *key: int) -> np.random.Generator:
    """Independent generator for a (purpose, site, round, ...) key; adding
    sites or rounds never perturbs other streams."""
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=key))


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict (in place)."""

    def __init__(self, params: ParamDict, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 1e-2):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = beta1, beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: ParamDict) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


@dataclass
class SiteState:
    theta: ParamDict
    weight_matrix: ParamDict
    n_samples: int


@dataclass
class FederationState:
    round: int
    phi_g: ParamDict
    theta_g: ParamDict
    sites: list[SiteState]
    total_rounds: int


@dataclass
class SiteData:
    spec_site: int
    task: Task
    num_classes: int
    train: list[Sample]
    test: list[Sample]


# ---------------------------------------------------------------------------
# server-side parameter algebra


def weighted_average(parts: Sequence[ParamDict], counts: Sequence[int]) -> ParamDict:
    """Sample-count-weighted element-wise mean of parameter snapshots."""
    if len(parts) != len(counts) or not parts:
        raise ValueError("need one sample count per snapshot")
    if any(c <= 0 for c in counts):
        raise ValueError(f"sample counts must be positive: {list(counts)}")
    total = float(sum(counts))
    out: ParamDict = {}
    for name, ref in parts[0].items():
        acc = np.zeros_like(ref)
        for part, c in zip(parts, counts):
            arr = part[name]
            if arr.shape != ref.shape:
                raise ValueError(
                    f"shape mismatch for {name}: {arr.shape} vs {ref.shape}")
            acc += (c / total) * arr
        out[name] = acc
    return out


def adaptive_aggregate(theta_i: ParamDict, theta_g: ParamDict,
                       weight_matrix: ParamDict) -> ParamDict:
    """Element-wise interpolation theta_i + (theta_g - theta_i) * W."""
    out = {}
    for name, ti in theta_i.items():
        tg = theta_g[name]
        w = weight_matrix[name]
        if tg.shape != ti.shape or w.shape != ti.shape:
            raise ValueError(f"shape mismatch for {name}: "
                             f"{ti.shape}, {tg.shape}, {w.shape}")
        out[name] = ti + (tg - ti) * w
    return out


def clip_weights(weight_matrix: ParamDict) -> ParamDict:
    """Clamp every interpolation weight into [0, 1] (in place)."""
    for arr in weight_matrix.values():
        np.clip(arr, 0.0, 1.0, out=arr)
    return weight_matrix


def init_weight_matrix(theta: ParamDict) -> ParamDict:
    return {name: np.ones_like(arr) for name, arr in theta.items()}


# ---------------------------------------------------------------------------
# batch objective


def batch_objective(tape: Tape, tensors: dict[str, DiffTensor],
                    batch: list[tuple[np.ndarray, SparseLabelMap]],
                    site_enc: SiteEncoding, flags: AblationFlags,
                    weights: LossWeights, crf_cfg: GatedCrfConfig,
                    sigma_a: float) -> tuple[DiffTensor, dict[str, float]]:
    """Mean of per-image total objectives over a batch, plus term values."""
    terms = {"loss_pce": 0.0, "loss_mstree": 0.0, "loss_gcrf": 0.0, "loss_con": 0.0}
    total: DiffTensor | None = None
    for image, labels in batch:
        out = forward_graph(tape, tensors, image, site_enc,
                            all_sites=flags.scr, use_attention=flags.scr)
        loss = partial_ce(out.probs, labels)
        terms["loss_pce"] += loss.item()
        if flags.mstree:
            pseudo = cascade_pseudo_label(out.probs.data, image, out.d2.data,
                                          out.d3.data, sigma_a)
            ms = mstree_loss(out.probs, pseudo, labels.unlabeled_mask)
            terms["loss_mstree"] += ms.item()
            loss = eg.add(loss, eg.scale(ms, weights.lambda1))
        if flags.gcrf:
            crf = gated_crf(out.probs, image, crf_cfg)
            terms["loss_gcrf"] += crf.item()
            loss = eg.add(loss, eg.scale(crf, weights.lambda2))
        if flags.scr:
            others = [a for i, a in enumerate(out.all_site_attentions)
                      if i != site_enc.k]
            con = contrastive_loss(out.attention, others)
            terms["loss_con"] += con.item()
            loss = eg.add(loss, eg.scale(con, weights.lambda3))
        total = loss if total is None else eg.add(total, loss)
    n = len(batch)
    for key in terms:
        terms[key] /= n
    return eg.scale(total, 1.0 / n), terms


def _epoch_batches(samples: list[Sample], cfg: TrainConfig, num_classes: int,
                   rng: np.random.Generator) -> Iterable[list]:
    """Shuffled mini-batches of (image, sparse labels), augmented in place."""
    perm = rng.permutation(len(samples))
    for start in range(0, len(perm), cfg.batch_size):
        batch = []
        for idx in perm[start:start + cfg.batch_size]:
            s = samples[int(idx)]
            img, lab = s.image, s.sparse_label.labels
            if cfg.augment:
                img, lab = augment(img, lab, rng)
            batch.append((img, SparseLabelMap(lab, num_classes)))
        yield batch


# ---------------------------------------------------------------------------
# adaptive-aggregation phase


def update_weight_matrix(theta_k: ParamDict, theta_g: ParamDict,
                         weight_matrix: ParamDict,
                         epoch_batches: Callable[[int], Iterable],
                         objective: Callable[[Tape, dict[str, DiffTensor], object],
                                             DiffTensor],
                         cfg: TrainConfig, convergence: bool) -> tuple[
                             ParamDict, ParamDict, list[float]]:
    """Alternate head interpolation and weight-matrix descent.

    Per batch: compose theta_hat = theta_k + (theta_g - theta_k) * W on the
    tape, evaluate the local objective with that head, and take one Adam
    step on W (no weight decay: decay would bias the interpolation toward
    the local head), clipping into [0, 1]. In convergence mode, epochs run
    until the epoch-mean loss improves by less than ``aa_tol`` relative or
    ``aa_max_epochs`` elapse; otherwise exactly one epoch runs.

    When the global and local heads coincide, the interpolation and the
    weight gradient are identically zero, so the phase returns immediately.
    """
    if all(np.array_equal(theta_k[n], theta_g[n]) for n in theta_k):
        return weight_matrix, {n: a.copy() for n, a in theta_k.items()}, []

    diff = {n: theta_g[n] - theta_k[n] for n in theta_k}
    opt = AdamW(weight_matrix, lr=cfg.aa_lr, beta1=cfg.beta1, beta2=cfg.beta2,
                eps=cfg.eps, weight_decay=0.0)
    epoch_losses: list[float] = []
    epoch = 0
    while True:
        losses = []
        for batch in epoch_batches(epoch):
            tape = Tape()
            w_leaves = {n: tape.leaf(weight_matrix[n], requires_grad=True)
                        for n in weight_matrix}
            theta_hat = {}
            for n in theta_k:
                delta = eg.mul(tape.constant(diff[n]), w_leaves[n])
                theta_hat[n] = eg.add(tape.constant(theta_k[n]), delta)
            loss = objective(tape, theta_hat, batch)
            tape.backward(loss)
            opt.step({n: w_leaves[n].grad for n in weight_matrix})
            clip_weights(weight_matrix)
            losses.append(loss.item())
        epoch += 1
        epoch_losses.append(float(np.mean(losses)))
        if not convergence:
            break
        if epoch >= cfg.aa_max_epochs:
            break
        if len(epoch_losses) >= 2:
            prev, cur = epoch_losses[-2], epoch_losses[-1]
            if prev - cur < cfg.aa_tol * max(abs(prev), 1e-12):
                break
    theta_hat = adaptive_aggregate(theta_k, theta_g, weight_matrix)
    return weight_matrix, theta_hat, epoch_losses


# ---------------------------------------------------------------------------
# local training


def local_train(phi: ParamDict, theta_hat: ParamDict, site_enc: SiteEncoding,
                samples: list[Sample], num_classes: int, cfg: TrainConfig,
                weights: LossWeights, crf_cfg: GatedCrfConfig,
                flags: AblationFlags, round_index: int,
                rng: np.random.Generator) -> tuple[ParamDict, ParamDict, dict]:
    """Run the configured local epochs of AdamW on the full site objective."""
    if not samples:
        raise ValueError("site dataset is empty")
    phi_k = {n: a.copy() for n, a in phi.items()}
    theta_k = {n: a.copy() for n, a in theta_hat.items()}
    merged: ParamDict = {**phi_k, **theta_k}
    opt = AdamW(merged, lr=poly_lr(cfg, round_index), beta1=cfg.beta1,
                beta2=cfg.beta2, eps=cfg.eps, weight_decay=cfg.weight_decay)
    epoch_losses: list[float] = []
    term_totals = {"loss_pce": 0.0, "loss_mstree": 0.0, "loss_gcrf": 0.0,
                   "loss_con": 0.0}
    steps = 0
    for _ in range(cfg.local_epochs):
        losses = []
        for batch in _epoch_batches(samples, cfg, num_classes, rng):
            tape = Tape()
            tensors = lift_params(tape, merged, requires_grad=True)
            loss, terms = batch_objective(tape, tensors, batch, site_enc, flags,
                                          weights, crf_cfg, cfg.sigma_a)
            tape.backward(loss)
            opt.step({n: tensors[n].grad for n in merged})
            losses.append(loss.item())
            for key in term_totals:
                term_totals[key] += terms[key]
            steps += 1
        epoch_losses.append(float(np.mean(losses)))
    term_means = {k: (v / steps if steps else 0.0) for k, v in term_totals.items()}
    return phi_k, theta_k, {"epoch_losses": epoch_losses, "terms": term_means}


# ---------------------------------------------------------------------------
# rounds


def _effective_flags(mode: Mode, flags: AblationFlags) -> AblationFlags:
    return AblationFlags.baseline() if mode is Mode.FEDAVG else replace(flags)


def _site_round(state: FederationState, data: SiteData, site_enc: SiteEncoding,
                cfg: TrainConfig, weights: LossWeights, crf_cfg: GatedCrfConfig,
                flags: AblationFlags, master_seed: int, t: int) -> tuple[
                    ParamDict, ParamDict, dict]:
    site = state.sites[site_enc.k]
    if flags.aa:
        aa_rng = stream(master_seed, 3, site_enc.k, t)
        phi_const = state.phi_g

        def objective(tape: Tape, theta_hat: dict[str, DiffTensor], batch):
            tensors = lift_params(tape, phi_const, requires_grad=False)
            tensors.update(theta_hat)
            loss, _ = batch_objective(tape, tensors, batch, site_enc, flags,
                                      weights, crf_cfg, cfg.sigma_a)
            return loss

        def epochs(epoch: int):
            return _epoch_batches(data.train, cfg, data.num_classes, aa_rng)

        _, theta_hat, _ = update_weight_matrix(
            site.theta, state.theta_g, site.weight_matrix, epochs, objective,
            cfg, convergence=(t <= 2))
    else:
        theta_hat = {n: a.copy() for n, a in state.theta_g.items()}

    rng = stream(master_seed, 2, site_enc.k, t)
    return local_train(state.phi_g, theta_hat, site_enc, data.train,
                       data.num_classes, cfg, weights, crf_cfg, flags,
                       round_index=t - 1, rng=rng)


def evaluate_model(phi: ParamDict, theta: ParamDict, data: SiteData,
                   site_enc: SiteEncoding, use_attention: bool) -> tuple[float, float]:
    """Mean foreground DSC / HD95 over a site's test split.

    The nested task scores the full outer region (classes 1 and 2 combined)
    and the inner region separately, then averages; the blob task scores its
    single foreground class.
    """
    from .segnet import forward

    params = ModelParams(dict(phi), dict(theta))
    dscs, hds = [], []
    for sample in data.test:
        out = forward(params, sample.image, site_enc, use_attention=use_attention)
        pred = out.probs.data.argmax(axis=0)
        gt = sample.full_mask
        if data.task is Task.NESTED:
            pairs = [(pred >= 1, gt >= 1), (pred == 2, gt == 2)]
        else:
            pairs = [(pred == 1, gt == 1)]
        dscs.append(float(np.mean([dsc(a, b) for a, b in pairs])))
        hds.append(float(np.mean([hd95(a, b) for a, b in pairs])))
    return float(np.mean(dscs)), float(np.mean(hds))


def run_round(state: FederationState, datasets: list[SiteData], cfg: TrainConfig,
              weights: LossWeights, crf_cfg: GatedCrfConfig, mode: Mode,
              flags: AblationFlags, master_seed: int,
              recorder: list | None = None) -> FederationState:
    """One communication round: broadcast, per-site head initialization and
    local training, then weighted aggregation of both parameter groups."""
    flags = _effective_flags(mode, flags)
    t = state.round + 1
    K = len(datasets)

    def work(k: int):
        return _site_round(state, datasets[k], SiteEncoding(k, K), cfg, weights,
                           crf_cfg, flags, master_seed, t)

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(work, range(K)))
    else:
        results = [work(k) for k in range(K)]

    counts = [s.n_samples for s in state.sites]
    state.phi_g = weighted_average([r[0] for r in results], counts)
    state.theta_g = weighted_average([r[1] for r in results], counts)
    for k, (_, theta_k, _) in enumerate(results):
        state.sites[k].theta = theta_k
    state.round = t

    if recorder is not None:
        do_eval = (cfg.eval_every > 0 and t % cfg.eval_every == 0) \
            or t == state.total_rounds
        for k, (_, _, info) in enumerate(results):
            row = {"round": t, "site": k}
            row.update(info["terms"])
            if do_eval:
                d, h = evaluate_model(state.phi_g, state.sites[k].theta,
                                      datasets[k], SiteEncoding(k, K),
                                      use_attention=flags.scr)
                row["dsc"], row["hd95"] = d, h
            else:
                row["dsc"] = row["hd95"] = None
            recorder.append(row)
    return state


def init_state(model_cfg: UNetConfig, datasets: list[SiteData],
               master_seed: int, rounds: int) -> FederationState:
    seed = int(stream(master_seed, 0).integers(0, 2 ** 31 - 1))
    params = build_model(model_cfg, seed)
    sites = [SiteState(theta={n: a.copy() for n, a in params.theta.items()},
                       weight_matrix=init_weight_matrix(params.theta),
                       n_samples=len(d.train))
             for d in datasets]
    return FederationState(round=0, phi_g=params.phi, theta_g=params.theta,
                           sites=sites, total_rounds=rounds)


def run_federation(model_cfg: UNetConfig, cfg: TrainConfig, weights: LossWeights,
                   crf_cfg: GatedCrfConfig, mode: Mode, flags: AblationFlags,
                   datasets: list[SiteData], master_seed: int,
                   recorder: list | None = None,
                   checkpoint_hook: Callable[[int, FederationState], None] | None = None,
                   with_state: bool = False):
    """Run the full protocol and evaluate final per-site models.

    The personalized mode evaluates each site with the aggregated shared
    part plus that site's own head; the plain-average baseline evaluates
    the aggregated global model everywhere, matching its single-model
    semantics.
    """
    eff = _effective_flags(mode, flags)
    state = init_state(model_cfg, datasets, master_seed, cfg.rounds)
    for _ in range(cfg.rounds):
        state = run_round(state, datasets, cfg, weights, crf_cfg, mode, flags,
                          master_seed, recorder)
        if checkpoint_hook is not None:
            checkpoint_hook(state.round, state)

    K = len(datasets)
    per_site = []
    for k in range(K):
        theta_eval = state.theta_g if mode is Mode.FEDAVG else state.sites[k].theta
        d, h = evaluate_model(state.phi_g, theta_eval, datasets[k],
                              SiteEncoding(k, K), use_attention=eff.scr)
        entry = {"site": k, "dsc": d, "hd95": h}
        if eff.aa:
            wm = state.sites[k].weight_matrix
            entry["aa_weight_mean"] = float(
                np.mean([a.mean() for a in wm.values()]))
        if eff.scr:
            from .segnet import forward
            probe = forward(ModelParams(dict(state.phi_g), dict(theta_eval)),
                            datasets[k].test[0].image, SiteEncoding(k, K))
            entry["scr_attention_mean"] = float(probe.attention.data.mean())
        per_site.append(entry)
    report = {
        "mode": mode.value,
        "master_seed": master_seed,
        "rounds": cfg.rounds,
        "flags": {"aa": eff.aa, "scr": eff.scr, "mstree": eff.mstree,
                  "gcrf": eff.gcrf},
        "per_site": per_site,
        "avg_dsc": float(np.mean([s["dsc"] for s in per_site])),
        "avg_hd95": float(np.mean([s["hd95"] for s in per_site])),
    }
    return (report, state) if with_state else report
