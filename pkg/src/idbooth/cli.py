"""Command-line surface: ``idbooth {pretrain,finetune,generate,evaluate}``.

stdout carries only the paths of written reports/artifacts; diagnostics go to
stderr. Exit codes: 0 ok, 2 invalid config, 3 identity-embedder gate failed,
4 missing base model, 5 missing inputs.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_GATE, EXIT_NO_BASE, EXIT_MISSING = 0, 2, 3, 4, 5
OUT_ENV = "IDBOOTH_OUT"

log = logging.getLogger("idbooth")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def build_parser() -> argparse.ArgumentParser:
    from .config import METHODS

    p = argparse.ArgumentParser(prog="idbooth", description=__doc__.splitlines()[0])
    p.add_argument("--config", type=Path, help="JSON run config (defaults used when omitted)")
    p.add_argument("--seed", type=int, help="global seed override")
    p.add_argument("--out", help=f"output root override (env {OUT_ENV} wins over the config file)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes over identities")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, e.g. finetune.epochs=4 (repeatable, last wins)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("pretrain", help="train autoencoder, identity net, feature net, base denoiser; make prior set")

    ft = sub.add_parser("finetune", help="per-identity LoRA fine-tuning")
    ft.add_argument("--method", choices=sorted(METHODS), default="idbooth")
    ft.add_argument("--ids", nargs="*", help="identity labels (default: all experiment identities)")

    gen = sub.add_parser("generate", help="synthesize a dataset from fine-tuned identities")
    gen.add_argument("--method", choices=sorted(METHODS), default="idbooth")
    gen.add_argument("--per-id", type=int, default=None)

    ev = sub.add_parser("evaluate", help="write metric, verification and recognition reports")
    ev.add_argument("--suite", choices=("metrics", "verify", "recognition", "all"), default="all")
    return p


def resolve_config(args: argparse.Namespace):
    from .config import ConfigError, RunConfig, apply_overrides

    try:
        if args.config is not None:
            if not args.config.exists():
                raise CliError(EXIT_CONFIG, f"config file not found: {args.config}")
            cfg = RunConfig.load(args.config)
        else:
            cfg = RunConfig()
        overrides = {}
        for item in args.set:
            key, sep, value = item.partition("=")
            if not sep:
                raise CliError(EXIT_CONFIG, f"override {item!r} is not KEY=VALUE")
            overrides[key] = _parse_value(value)
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["out"] = args.out
        if os.environ.get(OUT_ENV):
            overrides["out"] = os.environ[OUT_ENV]
        return apply_overrides(cfg, overrides)
    except json.JSONDecodeError as e:
        raise CliError(EXIT_CONFIG, f"config {args.config} is not valid JSON: {e}") from e
    except ConfigError as e:
        raise CliError(EXIT_CONFIG, f"invalid config: {e}") from e


def _persist_config(cfg) -> Path:
    run = cfg.run_dir
    run.mkdir(parents=True, exist_ok=True)
    path = run / "config.json"
    text = cfg.to_json()
    if path.exists() and path.read_text() != text:
        log.warning("config differs from the one stored in %s; overwriting", path)
    path.write_text(text)
    return path


def _load_base(cfg):
    from .pretraining import BaseBundle

    d = cfg.run_dir / "base"
    if not (d / "digests.json").exists():
        raise CliError(EXIT_NO_BASE, f"no pretrained base at {d}; run 'idbooth pretrain' first")
    bundle = BaseBundle.load(d)
    if bundle.denoiser is None:
        raise CliError(EXIT_NO_BASE, f"base at {d} has no denoiser")
    return bundle


def cmd_pretrain(cfg) -> list[Path]:
    from .experiments import PhiGateError, pretrain_all, prior_set, save_base

    try:
        bundle, info = pretrain_all(cfg)
    except PhiGateError as e:
        raise CliError(EXIT_GATE, str(e)) from e
    base = cfg.run_dir / "base"
    save_base(bundle, info, base)
    prior = prior_set(bundle, cfg)
    prior.save(cfg.run_dir / "priors")
    return [base / "pretrain_stats.json", cfg.run_dir / "priors" / "index.json"]


def _finetune_one(run_dir: str, cfg_json: str, method: str, id_seed: int) -> str:
    """Worker entry point; loads everything from disk so it can run in any process."""
    from .config import RunConfig
    from .experiments import method_config
    from .facesim import ImageDataset, build_constrained_dataset, make_identity
    from .finetune import finetune_identity, identity_token
    from .pretraining import BaseBundle

    cfg = RunConfig.from_dict(json.loads(cfg_json))
    run = Path(run_dir)
    bundle = BaseBundle.load(run / "base")
    ident = make_identity(id_seed)
    real = build_constrained_dataset([ident], cfg.experiment.n_per_id)
    prior = ImageDataset.load(run / "priors")
    out = run / "identities" / method / ident.id_label
    finetune_identity(bundle, real, prior, method_config(cfg, method, cfg.seed), identity_token(ident.id_label), out)
    return str(out / "lora.ckpt")


def _map(fn, jobs: int, arg_lists):
    if jobs <= 1:
        return [fn(*a) for a in arg_lists]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, *zip(*arg_lists)))


def _select_identities(cfg, labels):
    from .experiments import experiment_identities

    ids = experiment_identities(cfg)
    if not labels:
        return ids
    by_label = {i.id_label: i for i in ids}
    missing = [l for l in labels if l not in by_label]
    if missing:
        raise CliError(EXIT_MISSING, f"unknown identity labels {missing}; known: {sorted(by_label)}")
    return [by_label[l] for l in labels]


def cmd_finetune(cfg, method: str, labels, jobs: int) -> list[Path]:
    _load_base(cfg)
    if not (cfg.run_dir / "priors" / "index.json").exists():
        raise CliError(EXIT_MISSING, f"no prior set at {cfg.run_dir / 'priors'}")
    ids = _select_identities(cfg, labels)
    args = [(str(cfg.run_dir), cfg.to_json(), method, i.seed) for i in ids]
    return [Path(p) for p in _map(_finetune_one, jobs, args)]


def _generate_one(run_dir: str, cfg_json: str, method: str, id_seed: int, per_id: int):
    from .config import RunConfig
    from .facesim import make_identity
    from .finetune import IdentityModel
    from .pretraining import BaseBundle
    from .sampler import synthesize_identity

    cfg = RunConfig.from_dict(json.loads(cfg_json))
    run = Path(run_dir)
    ident = make_identity(id_seed)
    model = IdentityModel.load(BaseBundle.load(run / "base"), run / "identities" / method / ident.id_label / "lora.ckpt")
    return synthesize_identity(model, ident.id_label, ident.gender, per_id, cfg.sampler, cfg.seed)


def cmd_generate(cfg, method: str, per_id: int | None, jobs: int) -> list[Path]:
    from .experiments import experiment_identities
    from .facesim import ImageDataset

    _load_base(cfg)
    per_id = per_id or cfg.sampler.per_id
    ids = experiment_identities(cfg)
    for i in ids:
        ckpt = cfg.run_dir / "identities" / method / i.id_label / "lora.ckpt" / "manifest.json"
        if not ckpt.exists():
            raise CliError(EXIT_MISSING, f"missing checkpoint {ckpt.parent}; run 'idbooth finetune --method {method}'")
    args = [(str(cfg.run_dir), cfg.to_json(), method, i.seed, per_id) for i in ids]
    parts = _map(_generate_one, jobs, args)
    out = cfg.run_dir / "samples" / f"{method}_{per_id}"
    ImageDataset.concat(parts).save(out)
    return [out / "index.json"]


def _sample_sets(cfg):
    from .facesim import ImageDataset

    root = cfg.run_dir / "samples"
    sets = {}
    if root.exists():
        for d in sorted(root.iterdir()):
            if (d / "index.json").exists():
                sets[d.name] = ImageDataset.load(d)
    if not sets:
        raise CliError(EXIT_MISSING, f"no synthetic datasets under {root}; run 'idbooth generate' first")
    return sets


def cmd_evaluate(cfg, suite: str) -> list[Path]:
    from .experiments import (augmentation_study, evaluate_real, evaluate_synthetic, real_dataset, reference_features,
                              wild_reference)
    from .distmetrics import plot_metric_bars, write_metric_rows
    from .verification import plot_score_histogram, write_reports

    bundle = _load_base(cfg)
    sets = _sample_sets(cfg)
    real = real_dataset(cfg)
    reports, plots = cfg.run_dir / "reports", cfg.run_dir / "plots"
    reports.mkdir(parents=True, exist_ok=True)
    plots.mkdir(parents=True, exist_ok=True)
    written = []
    if suite in ("metrics", "verify", "all"):
        ref = reference_features(bundle, wild_reference(cfg))
        evals = {name: evaluate_synthetic(bundle, real, ds, ref, cfg) for name, ds in sets.items()}
        if suite in ("metrics", "all"):
            rows = [(name, mode, ev.metrics[mode]) for name, ev in evals.items() for mode in ("entire", "face")]
            write_metric_rows(reports / "table1_metrics.csv", rows)
            plot_metric_bars(rows, plots / "metrics.png")
            written += [reports / "table1_metrics.csv", plots / "metrics.png"]
        if suite in ("verify", "all"):
            rows = [("among_real", "real", evaluate_real(bundle, real, cfg))]
            for setting in ("among_synthetic", "synthetic_vs_real"):
                rows += [(setting, name, ev.verification[setting]) for name, ev in evals.items()]
            write_reports(reports / "table3_verification.csv", rows)
            written.append(reports / "table3_verification.csv")
            for name, ev in evals.items():
                for setting, scores in ev.scores.items():
                    p = plots / f"scores_{name}_{setting}.png"
                    plot_score_histogram(scores, p, f"{name} {setting}")
                    written.append(p)
    if suite in ("recognition", "all"):
        synth = {}
        for name, ds in sets.items():
            method, per_id = name.rsplit("_", 1)
            synth[(f"+{per_id}", method, cfg.seed)] = ds
        augmentation_study(cfg, real, synth, [cfg.seed], reports)
        written.append(reports / "table4_recognition.csv")
    return written


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.jobs < 1:
            raise CliError(EXIT_CONFIG, "--jobs must be >= 1")
        _persist_config(cfg)
        if args.command == "pretrain":
            paths = cmd_pretrain(cfg)
        elif args.command == "finetune":
            paths = cmd_finetune(cfg, args.method, args.ids, args.jobs)
        elif args.command == "generate":
            paths = cmd_generate(cfg, args.method, args.per_id, args.jobs)
        else:
            paths = cmd_evaluate(cfg, args.suite)
    except CliError as e:
        print(f"idbooth: error: {e}", file=sys.stderr)
        return e.code
    for p in paths:
        print(p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
