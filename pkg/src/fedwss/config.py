"""Strict plain-text experiment configuration.

Files are ``[section]`` headers over ``key = value`` lines with ``#``
comments. Every key has a paper-derived or desk-scale default, so an empty
or sites-only file is valid; unknown sections, unknown keys, and type
mismatches are hard errors that name the offending key and line.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .federation import AblationFlags, Mode, TrainConfig
from .losses import GatedCrfConfig, LossWeights
from .segnet import UNetConfig
from .synthdata import Annotation, SiteSpec, Task, default_shift


class ConfigError(ValueError):
    pass


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_int_list(raw: str) -> tuple[int, ...]:
    return tuple(int(part.strip()) for part in raw.split(","))


def _parse_annotations(raw: str) -> tuple[str, ...]:
    names = tuple(part.strip().lower() for part in raw.split(","))
    valid = {a.value for a in Annotation}
    for name in names:
        if name not in valid:
            raise ValueError(f"unknown annotation {name!r}; choose from {sorted(valid)}")
    return names


_SCHEMA: dict[str, dict[str, tuple]] = {
    "experiment": {
        "mode": (str, "fedicra"),
        "rounds": (int, 50),
        "seed": (int, 0),
        "out": (str, "runs/exp"),
        "eval_every": (int, 5),
        "workers": (int, 1),
        "save_checkpoints": (_parse_bool, False),
        "export_embeddings": (_parse_bool, False),
    },
    "model": {
        "level_channels": (_parse_int_list, (16, 32, 64, 128, 256)),
        "channel_divisor": (int, 1),
        "scr_hidden": (int, 32),
    },
    "train": {
        "lr0": (float, 1e-2),
        "lr_power": (float, 0.9),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "eps": (float, 1e-8),
        "weight_decay": (float, 1e-2),
        "batch_size": (int, 4),
        "local_epochs": (int, 1),
        "aa_lr": (float, 1e-2),
        "aa_max_epochs": (int, 5),
        "aa_tol": (float, 1e-4),
        "augment": (_parse_bool, True),
    },
    "loss": {
        "lambda1": (float, 0.1),
        "lambda2": (float, 0.1),
        "lambda3": (float, 1.0),
        "sigma_a": (float, 1.0),
        "crf_radius": (int, 2),
        "crf_sigma_xy": (float, 3.0),
        "crf_sigma_rgb": (float, 0.1),
    },
    "ablation": {
        "aa": (_parse_bool, True),
        "scr": (_parse_bool, True),
        "mstree": (_parse_bool, True),
        "gcrf": (_parse_bool, True),
    },
    "sites": {
        "count": (int, 4),
        "task": (str, "nested"),
        "image_size": (int, 48),
        "n_train": (int, 40),
        "n_test": (int, 15),
        "annotations": (_parse_annotations,
                        ("scribble1", "point", "bbox", "block")),
    },
}


def _read_values(path: str | Path) -> dict[str, dict[str, object]]:
    values = {section: dict() for section in _SCHEMA}
    section = None
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            if section not in _SCHEMA:
                raise ConfigError(
                    f"{path}:{lineno}: unknown section [{section}]; "
                    f"expected one of {sorted(_SCHEMA)}")
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        if section is None:
            raise ConfigError(f"{path}:{lineno}: key outside any [section]")
        key, _, raw_value = line.partition("=")
        key = key.strip().lower()
        if key not in _SCHEMA[section]:
            raise ConfigError(
                f"{path}:{lineno}: unknown key {key!r} in section [{section}]")
        parser = _SCHEMA[section][key][0]
        try:
            values[section][key] = parser(raw_value.strip())
        except (ValueError, TypeError) as exc:
            raise ConfigError(
                f"{path}:{lineno}: bad value for {key!r}: {exc}") from exc
    return values


@dataclass
class ExperimentConfig:
    mode: Mode
    master_seed: int
    out_dir: Path
    save_checkpoints: bool
    export_embeddings: bool
    model: UNetConfig
    train: TrainConfig
    loss_weights: LossWeights
    crf: GatedCrfConfig
    flags: AblationFlags
    task: Task
    image_size: int
    n_train: int
    n_test: int
    annotations: tuple[str, ...]
    num_sites: int
    raw: dict = field(default_factory=dict)

    def site_specs(self) -> list[SiteSpec]:
        from .federation import stream
        specs = []
        for k in range(self.num_sites):
            ann = Annotation(self.annotations[k % len(self.annotations)])
            seed = int(stream(self.master_seed, 1, k).integers(0, 2 ** 31 - 1))
            specs.append(SiteSpec(site=k, n_train=self.n_train, n_test=self.n_test,
                                  task=self.task, image_size=self.image_size,
                                  annotation=ann, shift=default_shift(k),
                                  seed=seed))
        return specs

    def data_digest(self) -> str:
        """Hash of everything that determines the generated datasets."""
        key = json.dumps({"seed": self.master_seed, "task": self.task.value,
                          "size": self.image_size, "n_train": self.n_train,
                          "n_test": self.n_test, "sites": self.num_sites,
                          "annotations": list(self.annotations)}, sort_keys=True)
        return hashlib.sha256(key.encode()).hexdigest()

    def resolved(self) -> dict:
        out = {section: dict(vals) for section, vals in self.raw.items()}
        out["model"]["num_classes"] = self.model.num_classes
        out["model"]["in_channels"] = self.model.in_channels
        out["model"]["effective_level_channels"] = list(self.model.level_channels)
        return out


def _build(values: dict[str, dict[str, object]]) -> ExperimentConfig:
    resolved = {section: {key: values[section].get(key, spec[1])
                          for key, spec in keys.items()}
                for section, keys in _SCHEMA.items()}
    exp, model, train = resolved["experiment"], resolved["model"], resolved["train"]
    loss, ablation, sites = resolved["loss"], resolved["ablation"], resolved["sites"]

    try:
        mode = Mode(str(exp["mode"]).lower())
    except ValueError:
        raise ConfigError(f"unknown mode {exp['mode']!r}; "
                          f"choose from {[m.value for m in Mode]}") from None
    try:
        task = Task(str(sites["task"]).lower())
    except ValueError:
        raise ConfigError(f"unknown task {sites['task']!r}; "
                          f"choose from {[t.value for t in Task]}") from None

    num_classes = 3 if task is Task.NESTED else 2
    unet = UNetConfig(in_channels=1, num_classes=num_classes,
                      level_channels=model["level_channels"],
                      num_sites=sites["count"], scr_hidden=model["scr_hidden"])
    if model["channel_divisor"] > 1:
        unet = unet.scaled(model["channel_divisor"])

    train_cfg = TrainConfig(
        lr0=train["lr0"], lr_power=train["lr_power"], beta1=train["beta1"],
        beta2=train["beta2"], eps=train["eps"], weight_decay=train["weight_decay"],
        batch_size=train["batch_size"], local_epochs=train["local_epochs"],
        rounds=exp["rounds"], aa_lr=train["aa_lr"],
        aa_max_epochs=train["aa_max_epochs"], aa_tol=train["aa_tol"],
        augment=train["augment"], eval_every=exp["eval_every"],
        workers=exp["workers"], sigma_a=loss["sigma_a"])

    return ExperimentConfig(
        mode=mode,
        master_seed=exp["seed"],
        out_dir=Path(str(exp["out"])),
        save_checkpoints=exp["save_checkpoints"],
        export_embeddings=exp["export_embeddings"],
        model=unet,
        train=train_cfg,
        loss_weights=LossWeights(loss["lambda1"], loss["lambda2"], loss["lambda3"]),
        crf=GatedCrfConfig(loss["crf_radius"], loss["crf_sigma_xy"],
                           loss["crf_sigma_rgb"]),
        flags=AblationFlags(ablation["aa"], ablation["scr"], ablation["mstree"],
                            ablation["gcrf"]),
        task=task,
        image_size=sites["image_size"],
        n_train=sites["n_train"],
        n_test=sites["n_test"],
        annotations=tuple(sites["annotations"]),
        num_sites=sites["count"],
        raw=resolved,
    )


def parse_config(path: str | Path | None) -> ExperimentConfig:
    """Load a config file; a missing path yields the all-defaults experiment."""
    values = _read_values(path) if path is not None else \
        {section: {} for section in _SCHEMA}
    return _build(values)


def apply_overrides(cfg: ExperimentConfig, **overrides) -> ExperimentConfig:
    """Apply CLI-level overrides (mode, seed, out, rounds, ablation switches)."""
    if overrides.get("mode") is not None:
        cfg.mode = Mode(overrides["mode"])
        cfg.raw["experiment"]["mode"] = cfg.mode.value
    if overrides.get("seed") is not None:
        cfg.master_seed = int(overrides["seed"])
        cfg.raw["experiment"]["seed"] = cfg.master_seed
    if overrides.get("out") is not None:
        cfg.out_dir = Path(overrides["out"])
        cfg.raw["experiment"]["out"] = str(cfg.out_dir)
    if overrides.get("rounds") is not None:
        cfg.train.rounds = int(overrides["rounds"])
        cfg.raw["experiment"]["rounds"] = cfg.train.rounds
    for name in ("aa", "scr", "mstree", "gcrf"):
        if overrides.get(f"no_{name}"):
            setattr(cfg.flags, name, False)
            cfg.raw["ablation"][name] = False
    return cfg
