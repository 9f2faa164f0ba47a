"""End-to-end studies on the desk configuration: base preparation, the
three-method comparison, the augmentation study and the ablations.

Every function here is deterministic given the run config, so the acceptance
tests and the CLI share one code path.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import facesim
from .config import LOSS_PRESETS, METHODS, RunConfig
from .distmetrics import FeatureSet, MetricReport, extract_features, metric_report, write_metric_rows
from .facesim import ImageDataset
from .finetune import (IdentityModel, finetune_identity, generate_prior_set, identity_token, prepare_items,
                       pretrain_base)
from .pretraining import (BaseBundle, embed_images, schedule_from, train_autoencoder, train_feature_extractor,
                          train_identity_net)
from .recognition import (VAL_OFFSET, StratumResult, build_heldout, evaluate_benchmark, mean_accuracy,
                          train_recognizer, write_table4)
from .sampler import synthesize_identity
from .verification import (VerificationReport, build_pairs, cosine_scores, plot_score_histogram,
                           verification_report, write_reports)

log = logging.getLogger(__name__)

WILD_REFERENCE_OFFSET = 500_000  # metric reference renders never overlap the pretraining corpus
SETTINGS = ("among_synthetic", "synthetic_vs_real")


class PhiGateError(RuntimeError):
    """The identity embedder failed its separability precondition."""


# ---------------------------------------------------------------------------
# base model


def base_key(cfg: RunConfig) -> str:
    """Hash of everything the base bundle depends on."""
    parts = {"seed": cfg.seed, "scheduler": dataclasses.asdict(cfg.scheduler), "nets": dataclasses.asdict(cfg.nets),
             "pretrain": dataclasses.asdict(cfg.pretrain)}
    return hashlib.sha256(json.dumps(parts, sort_keys=True).encode()).hexdigest()[:16]


def pretrain_all(cfg: RunConfig) -> tuple[BaseBundle, dict]:
    """Autoencoder, identity embedder (gated), feature extractor and base denoiser."""
    p, n, seed = cfg.pretrain, cfg.nets, cfg.seed
    wild = facesim.build_wild_reference(p.wild_n, seed=seed, cartoon_prob=p.cartoon_prob)
    ae = train_autoencoder(wild, n, p, seed)
    phi = train_identity_net(n, p, ae, seed)
    eer = float(phi.val_stats[2])
    if not eer < p.phi_eer_gate:
        raise PhiGateError(f"identity embedder validation EER {eer:.4f} >= gate {p.phi_eer_gate}")
    photo = wild.subset(i for i, r in enumerate(wild.records) if r["style"] == "photo")
    fx = train_feature_extractor(photo, n, p, seed)
    bundle = BaseBundle(schedule_from(cfg.scheduler), ae, None, None, phi, fx)
    curve = pretrain_base(bundle, wild, n, p, seed)
    stats = {"ae_val_mae": float(ae.val_mae), "phi_val_stats": [float(v) for v in phi.val_stats],
             "base_loss_first": float(np.mean(curve[: max(len(curve) // 10, 1)])),
             "base_loss_last": float(np.mean(curve[-max(len(curve) // 10, 1):]))}
    return bundle, {"stats": stats, "curve": curve}


def save_base(bundle: BaseBundle, info: dict, directory: Path) -> None:
    bundle.save(directory)
    (directory / "pretrain_stats.json").write_text(json.dumps(info["stats"], indent=1, sort_keys=True) + "\n")
    with open(directory / "base_loss.csv", "w") as fh:
        fh.write("step,loss\n")
        fh.writelines(f"{i},{v!r}\n" for i, v in enumerate(info["curve"]))


def default_cache_root() -> Path:
    return Path(os.environ.get("IDBOOTH_CACHE", Path.home() / ".cache" / "idbooth"))


def obtain_base(cfg: RunConfig, cache_root: str | Path | None = None) -> BaseBundle:
    """Load the base bundle for ``cfg`` from the cache, training it on a miss."""
    d = Path(cache_root or default_cache_root()) / f"base-{base_key(cfg)}"
    if (d / "digests.json").exists():
        return BaseBundle.load(d)
    bundle, info = pretrain_all(cfg)
    tmp = d.with_name(d.name + f".tmp{os.getpid()}")
    save_base(bundle, info, tmp)
    tmp.rename(d)
    return BaseBundle.load(d)


# ---------------------------------------------------------------------------
# data


def experiment_identities(cfg: RunConfig) -> list[facesim.ProceduralIdentity]:
    return [facesim.make_identity(s) for s in facesim.identity_seeds("experiment", cfg.experiment.n_identities)]


def real_dataset(cfg: RunConfig) -> ImageDataset:
    return facesim.build_constrained_dataset(experiment_identities(cfg), cfg.experiment.n_per_id)


def wild_reference(cfg: RunConfig) -> ImageDataset:
    return facesim.build_wild_reference(cfg.metrics.reference_n, seed=cfg.seed + 1, offset=WILD_REFERENCE_OFFSET)


def prior_set(bundle: BaseBundle, cfg: RunConfig) -> ImageDataset:
    return generate_prior_set(bundle, cfg.finetune.prior_set_size, cfg.sampler, seed=cfg.seed)


# ---------------------------------------------------------------------------
# fine-tuning + synthesis


def method_config(cfg: RunConfig, method: str, seed: int, **changes):
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(METHODS)}")
    return dataclasses.replace(cfg.finetune, tid_mode=METHODS[method], seed=seed, **changes)


def finetune_all(bundle: BaseBundle, real: ImageDataset, prior: ImageDataset, ft_cfg,
                 ids: Sequence[facesim.ProceduralIdentity], out_dir: Path | None = None) -> dict[str, IdentityModel]:
    """One LoRA + token per identity, sharing one prior set."""
    priors = prepare_items(bundle, prior)
    models = {}
    for ident in ids:
        target = None if out_dir is None else out_dir / ident.id_label
        models[ident.id_label], _ = finetune_identity(bundle, real.for_identity(ident.id_label), prior, ft_cfg,
                                                      identity_token(ident.id_label), target, priors)
    return models


def synthesize_all(models: dict[str, IdentityModel], ids: Sequence[facesim.ProceduralIdentity], per_id: int,
                   sampler_cfg, seed: int) -> ImageDataset:
    return ImageDataset.concat([synthesize_identity(models[i.id_label], i.id_label, i.gender, per_id, sampler_cfg, seed)
                                for i in ids])


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class SyntheticEvaluation:
    metrics: dict[str, MetricReport]  # mode -> report
    verification: dict[str, VerificationReport]  # setting -> report
    scores: dict = field(default_factory=dict, repr=False)


def reference_features(bundle: BaseBundle, reference: ImageDataset) -> dict[str, FeatureSet]:
    return {m: extract_features(reference.images, bundle.features, m) for m in ("entire", "face")}


def evaluate_synthetic(bundle: BaseBundle, real: ImageDataset, synth: ImageDataset,
                       ref_feats: dict[str, FeatureSet], cfg: RunConfig) -> SyntheticEvaluation:
    metrics = {}
    for mode, ref in ref_feats.items():
        fake = extract_features(synth.images, bundle.features, mode, ids=synth.labels)
        metrics[mode] = metric_report(ref, fake, cfg.metrics.k_neighbors)
    e_syn = embed_images(bundle.phi, synth.images)
    e_real = embed_images(bundle.phi, real.images)
    seed = cfg.verification.pair_seed
    scores = {
        "among_synthetic": cosine_scores(build_pairs(synth.labels, mode="among", seed=seed), e_syn),
        "synthetic_vs_real": cosine_scores(build_pairs(synth.labels, real.labels, mode="versus", seed=seed),
                                           e_syn, e_real),
    }
    return SyntheticEvaluation(metrics, {k: verification_report(v) for k, v in scores.items()}, scores)


def evaluate_real(bundle: BaseBundle, real: ImageDataset, cfg: RunConfig) -> VerificationReport:
    emb = embed_images(bundle.phi, real.images)
    return verification_report(cosine_scores(build_pairs(real.labels, mode="among", seed=cfg.verification.pair_seed),
                                             emb))


# ---------------------------------------------------------------------------
# studies


@dataclass
class MethodRun:
    method: str
    seed: int
    synthetic: ImageDataset
    evaluation: SyntheticEvaluation
    lora_dir: Path | None = None


def run_method(bundle: BaseBundle, cfg: RunConfig, method: str, seed: int, real: ImageDataset, prior: ImageDataset,
               ref_feats: dict[str, FeatureSet], out_dir: Path | None = None, per_id: int | None = None,
               **ft_changes) -> MethodRun:
    ids = experiment_identities(cfg)
    ft = method_config(cfg, method, seed, **ft_changes)
    lora_dir = None if out_dir is None else out_dir / "identities"
    models = finetune_all(bundle, real, prior, ft, ids, lora_dir)
    synth = synthesize_all(models, ids, per_id or cfg.sampler.per_id, cfg.sampler, seed)
    if out_dir is not None:
        synth.save(out_dir / "samples")
    return MethodRun(method, seed, synth, evaluate_synthetic(bundle, real, synth, ref_feats, cfg), lora_dir)


def table_rows(runs: Iterable[MethodRun], label=lambda r: r.method):
    """Metric and verification table rows averaged over seeds, keyed by ``label(run)``."""
    grouped: dict[str, list[MethodRun]] = {}
    for r in runs:
        grouped.setdefault(label(r), []).append(r)
    t1, t3 = [], []
    for name, group in grouped.items():
        for mode in ("entire", "face"):
            reps = [g.evaluation.metrics[mode] for g in group]
            t1.append((name, mode, _mean_dataclass(reps)))
        for setting in SETTINGS:
            t3.append((setting, name, _mean_dataclass([g.evaluation.verification[setting] for g in group])))
    return t1, t3


def _mean_dataclass(items):
    first = items[0]
    out = {}
    for f in dataclasses.fields(first):
        vals = [getattr(x, f.name) for x in items]
        if isinstance(vals[0], dict):
            keys = vals[0].keys()
            out[f.name] = {k: float(np.mean([v[k] for v in vals])) for k in keys}
        elif isinstance(vals[0], int) and not isinstance(vals[0], bool):
            out[f.name] = vals[0]
        else:
            out[f.name] = float(np.mean(vals))
    return type(first)(**out)


def write_tables(out_dir: Path, runs: Sequence[MethodRun], label=lambda r: r.method, prefix: str = "") -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    t1, t3 = table_rows(runs, label)
    p1, p3 = out_dir / f"{prefix}table1_metrics.csv", out_dir / f"{prefix}table3_verification.csv"
    write_metric_rows(p1, t1)
    write_reports(p3, t3)
    return [p1, p3]


def plot_scores(out_dir: Path, runs: Sequence[MethodRun]) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for r in runs:
        for setting, scores in r.evaluation.scores.items():
            p = out_dir / f"scores_{r.method}_s{r.seed}_{setting}.png"
            plot_score_histogram(scores, p, f"{r.method} {setting}")
            paths.append(p)
    return paths


@dataclass
class StudyContext:
    """Shared, seed-independent inputs to every study."""

    cfg: RunConfig
    bundle: BaseBundle
    real: ImageDataset
    prior: ImageDataset
    ref_feats: dict[str, FeatureSet]

    @classmethod
    def create(cls, cfg: RunConfig, bundle: BaseBundle) -> "StudyContext":
        return cls(cfg, bundle, real_dataset(cfg), prior_set(bundle, cfg), reference_features(bundle, wild_reference(cfg)))


def method_study(ctx: StudyContext, methods: Sequence[str] | None = None, seeds: Sequence[int] | None = None,
                 out_dir: Path | None = None, per_id: int | None = None) -> list[MethodRun]:
    methods = methods or ctx.cfg.experiment.methods
    seeds = ctx.cfg.experiment.seeds if seeds is None else seeds
    runs = []
    for seed in seeds:
        for method in methods:
            sub = None if out_dir is None else out_dir / method / f"seed{seed}"
            runs.append(run_method(ctx.bundle, ctx.cfg, method, seed, ctx.real, ctx.prior, ctx.ref_feats, sub, per_id))
            log.info("%s seed %d: synthetic-vs-real EER %.4f", method, seed,
                     runs[-1].evaluation.verification["synthetic_vs_real"].eer)
    return runs


def mean_over_seeds(runs: Sequence[MethodRun], method: str, value) -> float:
    return float(np.mean([value(r) for r in runs if r.method == method]))


def loss_ablation(ctx: StudyContext, seeds: Sequence[int], out_dir: Path | None = None) -> list[MethodRun]:
    """L_REC alone, + L_PR, + L_TID (the full method)."""
    presets = {"rec": ("dreambooth", {"use_prior": False}), "rec_pr": ("dreambooth", {}), "rec_pr_tid": ("idbooth", {})}
    assert tuple(presets) == LOSS_PRESETS
    runs = []
    for seed in seeds:
        for name, (method, changes) in presets.items():
            r = run_method(ctx.bundle, ctx.cfg, method, seed, ctx.real, ctx.prior, ctx.ref_feats, None, **changes)
            r.method = name
            runs.append(r)
    if out_dir is not None:
        write_tables(out_dir, runs, prefix="loss_ablation_")
    return runs


def prompt_ablation(ctx: StudyContext, seeds: Sequence[int], out_dir: Path | None = None) -> list[MethodRun]:
    """Fine-tune the full method once per seed, then sample under each prompt preset."""
    from .config import PROMPT_PRESETS

    ids = experiment_identities(ctx.cfg)
    runs = []
    for seed in seeds:
        models = finetune_all(ctx.bundle, ctx.real, ctx.prior, method_config(ctx.cfg, "idbooth", seed), ids)
        for preset in PROMPT_PRESETS:
            scfg = dataclasses.replace(ctx.cfg.sampler, prompt_preset=preset)
            synth = synthesize_all(models, ids, scfg.per_id, scfg, seed)
            ev = evaluate_synthetic(ctx.bundle, ctx.real, synth, ctx.ref_feats, ctx.cfg)
            runs.append(MethodRun(preset, seed, synth, ev))
    if out_dir is not None:
        write_tables(out_dir, runs, prefix="prompt_ablation_")
    return runs


@dataclass
class AugmentationResult:
    setting: str
    method: str
    seed: int
    strata: list[StratumResult]

    @property
    def accuracy(self) -> float:
        return mean_accuracy(self.strata)


def recognition_sets(cfg: RunConfig) -> tuple[ImageDataset, ImageDataset]:
    rc = cfg.recognition
    val = build_heldout(rc.val_ids, rc.val_per_id, seed=cfg.seed, offset=VAL_OFFSET)
    bench = build_heldout(rc.benchmark_ids, rc.benchmark_per_id, seed=cfg.seed)
    return val, bench


def augmentation_study(cfg: RunConfig, real: ImageDataset, synthetic: dict[tuple[str, str, int], ImageDataset],
                       seeds: Sequence[int], out_dir: Path | None = None) -> list[AugmentationResult]:
    """Recognizer trained on real only and on real + each synthetic set.

    ``synthetic`` maps (setting, method, seed) to a dataset, e.g.
    ("+21", "idbooth", 0).
    """
    val, bench = recognition_sets(cfg)
    rc = cfg.recognition
    results = []
    for seed in seeds:
        res = train_recognizer(real, val, rc, seed)
        results.append(AugmentationResult("real", "-", seed,
                                          evaluate_benchmark(res.net, bench, rc.benchmark_pairs, seed, real)))
        for (setting, method, s), synth in sorted(synthetic.items()):
            if s != seed:
                continue
            train = ImageDataset.concat([real, synth])
            res = train_recognizer(train, val, rc, seed)
            results.append(AugmentationResult(setting, method, seed,
                                              evaluate_benchmark(res.net, bench, rc.benchmark_pairs, seed, train)))
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_table4(out_dir / "table4_recognition.csv", _average_strata(results))
    return results


def _average_strata(results: Sequence[AugmentationResult]):
    grouped: dict[tuple[str, str], list[AugmentationResult]] = {}
    for r in results:
        grouped.setdefault((r.setting, r.method), []).append(r)
    rows = []
    for (setting, method), group in grouped.items():
        strata = [StratumResult(s.stratum, float(np.mean([g.strata[k].accuracy for g in group])), s.report)
                  for k, s in enumerate(group[0].strata)]
        rows.append((setting, method, strata))
    return rows
