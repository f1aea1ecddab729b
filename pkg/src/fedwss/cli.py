"""Batch experiment runner.

Subcommands: ``run`` (full federation experiment), ``gen-data`` (materialize
the synthetic sites), ``eval`` (score a parameter snapshot), and ``oracle``
(brute-force verification suites).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, apply_overrides, parse_config
from .federation import Mode, SiteData, run_federation, stream
from .figures import render_round_figures
from .oracles import SUITES
from .pgm import write_pgm
from .segnet import ModelParams, SiteEncoding, export_embeddings, forward
from .snapshot import read_params, save_params
from .synthdata import dump_site, generate_site, load_site


def _load_or_generate_data(cfg: ExperimentConfig) -> list[SiteData]:
    data_dir = cfg.out_dir / "data"
    digest_file = data_dir / "digest.txt"
    specs = cfg.site_specs()
    if digest_file.exists() and digest_file.read_text().strip() == cfg.data_digest():
        per_site = [load_site(data_dir / f"site_{s.site}") for s in specs]
    else:
        per_site = []
        for s in specs:
            samples = generate_site(s)
            dump_site(data_dir / f"site_{s.site}", s, samples)
            per_site.append(samples)
        data_dir.mkdir(parents=True, exist_ok=True)
        digest_file.write_text(cfg.data_digest() + "\n")
    return [SiteData(spec_site=s.site, task=s.task, num_classes=s.num_classes,
                     train=samples[:s.n_train], test=samples[s.n_train:])
            for s, samples in zip(specs, per_site)]


def _write_metrics_csv(path: Path, rows: list[dict]) -> None:
    header = ["round", "site", "loss_pce", "loss_mstree", "loss_gcrf",
              "loss_con", "dsc", "hd95"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([row[h] if row[h] is not None else "" for h in header])


def _write_predictions(cfg: ExperimentConfig, datasets: list[SiteData],
                       state) -> None:
    K = len(datasets)
    use_attention = cfg.flags.scr and cfg.mode is not Mode.FEDAVG
    for k, data in enumerate(datasets):
        theta = state.theta_g if cfg.mode is Mode.FEDAVG else state.sites[k].theta
        params = ModelParams(dict(state.phi_g), dict(theta))
        site_dir = cfg.out_dir / "predictions" / f"site_{k}"
        site_dir.mkdir(parents=True, exist_ok=True)
        for i, sample in enumerate(data.test):
            out = forward(params, sample.image, SiteEncoding(k, K),
                          use_attention=use_attention)
            write_pgm(site_dir / f"pred_{i:03d}.pgm",
                      out.probs.data.argmax(axis=0).astype(np.uint8))


def cmd_run(args: argparse.Namespace) -> int:
    cfg = parse_config(args.config)
    cfg = apply_overrides(cfg, mode=args.mode, seed=args.seed, out=args.out,
                          rounds=args.rounds, no_aa=args.no_aa, no_scr=args.no_scr,
                          no_mstree=args.no_mstree, no_gcrf=args.no_gcrf)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    (cfg.out_dir / "resolved_config.json").write_text(
        json.dumps(cfg.resolved(), indent=2, sort_keys=True) + "\n")

    datasets = _load_or_generate_data(cfg)

    checkpoint_hook = None
    if cfg.save_checkpoints:
        ckpt_dir = cfg.out_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)

        def checkpoint_hook(t, state):
            merged = {f"phi_g.{n}": a for n, a in state.phi_g.items()}
            merged.update({f"theta_g.{n}": a for n, a in state.theta_g.items()})
            for k, site in enumerate(state.sites):
                merged.update({f"site{k}.theta.{n}": a
                               for n, a in site.theta.items()})
            save_params(ckpt_dir / f"round_{t:03d}.fws", merged)

    rows: list[dict] = []
    report, state = run_federation(
        cfg.model, cfg.train, cfg.loss_weights, cfg.crf, cfg.mode, cfg.flags,
        datasets, cfg.master_seed, recorder=rows, checkpoint_hook=checkpoint_hook,
        with_state=True)

    _write_metrics_csv(cfg.out_dir / "metrics.csv", rows)
    (cfg.out_dir / "summary.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n")
    _write_predictions(cfg, datasets, state)
    render_round_figures(rows, cfg.out_dir / "figures")

    if cfg.export_embeddings:
        K = len(datasets)
        for k, data in enumerate(datasets):
            theta = state.theta_g if cfg.mode is Mode.FEDAVG else state.sites[k].theta
            export_embeddings(cfg.out_dir / f"embeddings_site_{k}.csv",
                              ModelParams(dict(state.phi_g), dict(theta)),
                              [s.image for s in data.test], SiteEncoding(k, K))

    print(f"run complete: avg DSC {report['avg_dsc']:.4f}, "
          f"avg HD95 {report['avg_hd95']:.3f} -> {cfg.out_dir}")
    return 0


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = parse_config(args.config)
    cfg = apply_overrides(cfg, seed=args.seed, out=args.out)
    data_dir = cfg.out_dir / "data"
    for spec in cfg.site_specs():
        samples = generate_site(spec)
        dump_site(data_dir / f"site_{spec.site}", spec, samples)
        print(f"site {spec.site}: {spec.n_train} train / {spec.n_test} test "
              f"({spec.annotation.value}) -> {data_dir / f'site_{spec.site}'}")
    data_dir.mkdir(parents=True, exist_ok=True)
    (data_dir / "digest.txt").write_text(cfg.data_digest() + "\n")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    from .federation import evaluate_model

    cfg = parse_config(args.config)
    cfg = apply_overrides(cfg, seed=args.seed, out=args.out)
    snapshot = read_params(args.snapshot)
    phi = {n: a for n, a in snapshot.items() if not n.startswith(("dec", "head"))}
    theta = {n: a for n, a in snapshot.items() if n.startswith(("dec", "head"))}
    datasets = _load_or_generate_data(cfg)
    k = args.site
    if not 0 <= k < len(datasets):
        print(f"error: site {k} out of range (K={len(datasets)})", file=sys.stderr)
        return 2
    d, h = evaluate_model(phi, theta, datasets[k], SiteEncoding(k, len(datasets)),
                          use_attention=not args.no_scr)
    print(json.dumps({"site": k, "dsc": d, "hd95": h}, sort_keys=True))
    return 0


def cmd_oracle(args: argparse.Namespace) -> int:
    name = args.suite
    if name not in SUITES:
        print(f"error: unknown suite {name!r}; available: "
              f"{{{', '.join(sorted(SUITES))}}}", file=sys.stderr)
        return 2
    ok = SUITES[name]() if args.cases is None else SUITES[name](args.cases)
    print(f"suite {name}: {'all passed' if ok else 'FAILURES'}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedwss",
        description="Personalized federated weakly-supervised segmentation "
                    "on synthetic multi-site data")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", type=Path, default=None,
                       help="experiment config file (defaults apply if omitted)")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--out", type=Path, default=None, help="output directory")

    run = sub.add_parser("run", help="run a federation experiment")
    add_common(run)
    run.add_argument("--mode", choices=[m.value for m in Mode], default=None)
    run.add_argument("--rounds", type=int, default=None)
    run.add_argument("--no-aa", action="store_true",
                     help="disable adaptive head aggregation")
    run.add_argument("--no-scr", action="store_true",
                     help="disable site-contrastive attention")
    run.add_argument("--no-mstree", action="store_true",
                     help="disable the tree energy loss")
    run.add_argument("--no-gcrf", action="store_true",
                     help="disable the gated CRF loss")
    run.set_defaults(func=cmd_run)

    gen = sub.add_parser("gen-data", help="generate and dump the synthetic sites")
    add_common(gen)
    gen.set_defaults(func=cmd_gen_data)

    ev = sub.add_parser("eval", help="evaluate a parameter snapshot on one site")
    add_common(ev)
    ev.add_argument("--snapshot", type=Path, required=True)
    ev.add_argument("--site", type=int, default=0)
    ev.add_argument("--no-scr", action="store_true")
    ev.set_defaults(func=cmd_eval)

    orc = sub.add_parser("oracle", help="run a brute-force verification suite")
    orc.add_argument("suite", help=f"one of {{{', '.join(sorted(SUITES))}}}")
    orc.add_argument("--cases", type=int, default=None)
    orc.set_defaults(func=cmd_oracle)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # surface a diagnostic, not a traceback
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
