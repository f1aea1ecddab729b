"""Segmentation network: a UNet with a site-conditioned channel attention
block at the bottleneck, split into a shared representation part (encoder +
attention FCs, ``phi``) and a personalized head (decoder + output layer,
``theta``).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import engine as eg
from .engine import DiffTensor, Tape


@dataclass
class UNetConfig:
    in_channels: int = 1
    num_classes: int = 3
    level_channels: tuple[int, ...] = (16, 32, 64, 128, 256)
    num_sites: int = 4
    scr_hidden: int = 32

    def __post_init__(self):
        self.level_channels = tuple(self.level_channels)
        if len(self.level_channels) < 4:
            raise ValueError("level_channels needs at least 4 entries")
        if any(b <= a for a, b in zip(self.level_channels, self.level_channels[1:])):
            raise ValueError(f"level_channels must be strictly increasing: {self.level_channels}")
        if self.num_sites < 1:
            raise ValueError("num_sites must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    @property
    def depth(self) -> int:
        """Number of pooling stages."""
        return len(self.level_channels) - 1

    @property
    def bottleneck_channels(self) -> int:
        return self.level_channels[-1]

    def scaled(self, divisor: int) -> "UNetConfig":
        """Copy with level widths divided (desk-scale runs)."""
        lc = tuple(max(2, c // divisor) for c in self.level_channels)
        return UNetConfig(self.in_channels, self.num_classes, lc,
                          self.num_sites, self.scr_hidden)


@dataclass
class ModelParams:
    """Disjoint parameter partition: shared ``phi``, personalized ``theta``."""
    phi: dict[str, np.ndarray]
    theta: dict[str, np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.phi.items()},
                           {k: v.copy() for k, v in self.theta.items()})

    def all_params(self) -> dict[str, np.ndarray]:
        merged = dict(self.phi)
        merged.update(self.theta)
        return merged


@dataclass
class SiteEncoding:
    k: int
    K: int
    one_hot: np.ndarray = field(init=False)

    def __post_init__(self):
        if not 0 <= self.k < self.K:
            raise ValueError(f"site index {self.k} out of range for K={self.K}")
        v = np.zeros(self.K)
        v[self.k] = 1.0
        self.one_hot = v


@dataclass
class ForwardOutput:
    logits: DiffTensor
    probs: DiffTensor
    bottleneck: DiffTensor
    attention: DiffTensor | None
    d2: DiffTensor
    d3: DiffTensor
    all_site_attentions: list[DiffTensor] | None


def _kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                     fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def build_model(config: UNetConfig, seed: int) -> ModelParams:
    """Kaiming-uniform (fan-in) conv and FC weights, zero biases.

    Parameters are drawn in a fixed name order, so identical (config, seed)
    pairs produce bitwise-identical models.
    """
    rng = np.random.default_rng(seed)
    lc = config.level_channels
    phi: dict[str, np.ndarray] = {}
    theta: dict[str, np.ndarray] = {}

    def conv(store, name, c_in, c_out):
        store[f"{name}.w"] = _kaiming_uniform(rng, (c_out, c_in, 3, 3), c_in * 9)
        store[f"{name}.b"] = np.zeros(c_out)

    def fc(store, name, n_in, n_out):
        store[f"{name}.w"] = _kaiming_uniform(rng, (n_out, n_in), n_in)
        store[f"{name}.b"] = np.zeros(n_out)

    c_prev = config.in_channels
    for i in range(config.depth):
        conv(phi, f"enc{i}.c1", c_prev, lc[i])
        conv(phi, f"enc{i}.c2", lc[i], lc[i])
        c_prev = lc[i]
    conv(phi, "mid.c1", c_prev, lc[-1])
    conv(phi, "mid.c2", lc[-1], lc[-1])

    C = config.bottleneck_channels
    fc(phi, "scr.fc1", config.num_sites, config.scr_hidden)
    fc(phi, "scr.fc2", config.scr_hidden, C)
    fc(phi, "scr.fc3", 2 * C, C)

    c_prev = lc[-1]
    for i in reversed(range(config.depth)):
        conv(theta, f"dec{i}.c1", c_prev + lc[i], lc[i])
        conv(theta, f"dec{i}.c2", lc[i], lc[i])
        c_prev = lc[i]
    theta["head.w"] = _kaiming_uniform(rng, (config.num_classes, lc[0]), lc[0])
    theta["head.b"] = np.zeros(config.num_classes)
    return ModelParams(phi, theta)


def parameter_count(config: UNetConfig) -> int:
    """Analytic parameter total for a config (enumeration over the layer plan)."""
    lc = config.level_channels
    n = 0
    c_prev = config.in_channels
    for i in range(config.depth):
        n += lc[i] * c_prev * 9 + lc[i] + lc[i] * lc[i] * 9 + lc[i]
        c_prev = lc[i]
    n += lc[-1] * c_prev * 9 + lc[-1] + lc[-1] * lc[-1] * 9 + lc[-1]
    C = config.bottleneck_channels
    n += config.scr_hidden * config.num_sites + config.scr_hidden
    n += C * config.scr_hidden + C
    n += C * 2 * C + C
    c_prev = lc[-1]
    for i in reversed(range(config.depth)):
        n += lc[i] * (c_prev + lc[i]) * 9 + lc[i] + lc[i] * lc[i] * 9 + lc[i]
        c_prev = lc[i]
    n += config.num_classes * lc[0] + config.num_classes
    return n


def lift_params(tape: Tape, params: dict[str, np.ndarray],
                requires_grad: bool) -> dict[str, DiffTensor]:
    return {name: tape.leaf(arr, requires_grad=requires_grad)
            for name, arr in params.items()}


def _conv_block(t: dict[str, DiffTensor], name: str, x: DiffTensor) -> DiffTensor:
    x = eg.relu(eg.conv2d(x, t[f"{name}.c1.w"], t[f"{name}.c1.b"]))
    return eg.relu(eg.conv2d(x, t[f"{name}.c2.w"], t[f"{name}.c2.b"]))


def _attention_vector(t: dict[str, DiffTensor], one_hot: DiffTensor,
                      pooled: DiffTensor) -> DiffTensor:
    expanded = eg.dense(eg.relu(eg.dense(one_hot, t["scr.fc1.w"], t["scr.fc1.b"])),
                        t["scr.fc2.w"], t["scr.fc2.b"])
    return eg.sigmoid(eg.dense(eg.concat_channels([expanded, pooled]),
                               t["scr.fc3.w"], t["scr.fc3.b"]))


def scr_attention(f: DiffTensor, site: SiteEncoding,
                  tensors: dict[str, DiffTensor]) -> tuple[DiffTensor, DiffTensor]:
    """Site-conditioned channel attention over the bottleneck feature.

    The one-hot site code is expanded to the bottleneck width by two FC
    layers, concatenated with the globally pooled feature, and squashed by a
    sigmoid FC into per-channel gains c_hat; the output feature is the
    residual f + f * c_hat.
    """
    if tensors["scr.fc1.w"].data.shape[1] != site.K:
        raise eg.ShapeMismatchError(
            f"site encoding length {site.K} does not match attention input "
            f"width {tensors['scr.fc1.w'].data.shape[1]}")
    tape = f.tape
    one_hot = tape.constant(site.one_hot)
    pooled = eg.global_avg_pool(f)
    c_hat = _attention_vector(tensors, one_hot, pooled)
    f_prime = eg.add(f, eg.scale_channels(f, c_hat))
    return c_hat, f_prime


def forward_graph(tape: Tape, tensors: dict[str, DiffTensor], image: np.ndarray,
                  site: SiteEncoding, all_sites: bool = False,
                  use_attention: bool = True) -> ForwardOutput:
    """Run the network on one image, recording onto ``tape``.

    ``tensors`` maps parameter names to tape tensors (leaves, or composed
    values such as adaptively aggregated head parameters). With
    ``all_sites``, the attention branch is re-run for every site encoding on
    the same bottleneck feature. With ``use_attention`` off, the bottleneck
    passes through unchanged (channel gains pinned to zero).
    """
    depth = sum(1 for name in tensors if name.endswith(".c1.w") and name.startswith("enc"))
    c, h, w = image.shape
    if h % (1 << depth) or w % (1 << depth):
        raise eg.ShapeMismatchError(
            f"image extents {h}x{w} not divisible by {1 << depth}")
    x = tape.constant(image)
    skips = []
    for i in range(depth):
        x = _conv_block(tensors, f"enc{i}", x)
        skips.append(x)
        x = eg.maxpool2(x)
    f = _conv_block(tensors, "mid", x)

    attention = None
    all_attn: list[DiffTensor] | None = None
    if use_attention:
        attention, x = scr_attention(f, site, tensors)
        if all_sites:
            pooled = eg.global_avg_pool(f)
            all_attn = []
            for i in range(site.K):
                if i == site.k:
                    all_attn.append(attention)
                else:
                    enc = tape.constant(SiteEncoding(i, site.K).one_hot)
                    all_attn.append(_attention_vector(tensors, enc, pooled))
    else:
        x = f

    d2 = d3 = None
    for stage, i in enumerate(reversed(range(depth)), start=1):
        x = eg.bilinear_upsample2(x)
        x = eg.concat_channels([skips[i], x])
        x = _conv_block(tensors, f"dec{i}", x)
        if stage == 2:
            d2 = x
        elif stage == 3:
            d3 = x

    logits = eg.conv1x1(x, tensors["head.w"], tensors["head.b"])
    probs = eg.softmax_channels(logits)
    return ForwardOutput(logits=logits, probs=probs, bottleneck=f,
                         attention=attention, d2=d2, d3=d3,
                         all_site_attentions=all_attn)


def forward(params: ModelParams, image: np.ndarray, site: SiteEncoding,
            all_sites: bool = False, use_attention: bool = True) -> ForwardOutput:
    """Evaluation forward on a fresh tape (no gradients recorded)."""
    tape = Tape()
    tensors = lift_params(tape, params.all_params(), requires_grad=False)
    return forward_graph(tape, tensors, image, site, all_sites=all_sites,
                         use_attention=use_attention)


def contrastive_loss(c_k: DiffTensor, others: list[DiffTensor]) -> DiffTensor:
    """Negative mean channel-wise distance to the other sites' attention
    vectors; the comparison vectors are treated as constants so the gradient
    pushes only this site's attention away from them. Returns exact 0 for a
    single-site federation.
    """
    if not others:
        return c_k.tape.constant(np.zeros(()))
    total = None
    for c_i in others:
        d = eg.tmean(eg.absval(eg.sub(c_k, eg.stop_gradient(c_i))))
        total = d if total is None else eg.add(total, d)
    return eg.scale(total, -1.0 / len(others))


def export_embeddings(path: str | Path, params: ModelParams,
                      images: list[np.ndarray], site: SiteEncoding) -> None:
    """Dump per-image attention vectors and pooled bottleneck features as CSV
    for offline embedding inspection."""
    rows = []
    for idx, img in enumerate(images):
        out = forward(params, img, site, all_sites=True)
        pooled = out.bottleneck.data.mean(axis=(1, 2))
        for i, c_hat in enumerate(out.all_site_attentions):
            rows.append([idx, site.k, i, "attention"] + [repr(v) for v in c_hat.data])
        rows.append([idx, site.k, -1, "bottleneck"] + [repr(v) for v in pooled])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "site", "encoding", "kind", "values..."])
        writer.writerows(rows)
