"""Acceptance suite. Each test carries a ``criterion`` marker; the terminal
summary prints one PASS/FAIL line per criterion.

Criteria 6, 7 and 9 train on the desk configuration and use the cached base
model (``IDBOOTH_CACHE``, default ~/.cache/idbooth); the first run trains it.
"""
import csv
import json
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from oracles import density_coverage_loop, rates_exhaustive
from tiny_config import TINY

from idbooth import cli
from idbooth.config import LOSS_PRESETS, METHODS, PROMPT_PRESETS, FinetuneConfig, SamplerConfig, apply_overrides
from idbooth.distmetrics import density_coverage, frechet_distance, vendi_score
from idbooth.experiments import (SETTINGS, StudyContext, augmentation_study, experiment_identities, loss_ablation,
                                 mean_over_seeds, method_study, prompt_ablation, run_method, synthesize_all,
                                 write_tables)
from idbooth.facesim import FACE_BOX, build_constrained_dataset, crop_face, make_identity
from idbooth.finetune import IdentityModel, finetune_step, generate_prior_set, prepare_items
from idbooth.nets import Autoencoder, IdentityNet
from idbooth.objectives import lambda_tid, loss_rec, loss_tid
from idbooth.scheduler import (TERMINAL, add_noise, build_schedule, estimate_z0, reverse_step,
                               select_inference_timesteps)
from idbooth.verification import ScoreSet, error_rates, fdr_from_moments

# ---------------------------------------------------------------------------
# 1. diffusion algebra


@pytest.mark.criterion(1)
def test_c1_roundtrip_1000_random_draws():
    start = time.perf_counter()
    s = build_schedule()
    rng = np.random.default_rng(0)
    for _ in range(1000):
        z0 = rng.standard_normal((4, 6, 6))
        eps = rng.standard_normal(z0.shape)
        t = int(rng.integers(0, s.T))
        back = estimate_z0(add_noise(z0, t, eps, s), t, eps, s)
        assert np.max(np.abs(back - z0)) <= 1e-5
    assert time.perf_counter() - start < 10


@pytest.mark.criterion(1)
def test_c1_oracle_reverse_trajectory():
    start = time.perf_counter()
    s = build_schedule(50)
    rng = np.random.default_rng(1)
    z0 = rng.standard_normal((4, 12, 12))
    eps = rng.standard_normal(z0.shape)
    ts = select_inference_timesteps(50, 50)
    z = add_noise(z0, int(ts[0]), eps, s)
    for i, t in enumerate(ts):
        t_prev = int(ts[i + 1]) if i + 1 < len(ts) else TERMINAL
        z = reverse_step(z, int(t), t_prev, eps, s)
    assert np.max(np.abs(z - z0)) < 1e-3
    assert time.perf_counter() - start < 10


# ---------------------------------------------------------------------------
# 2. gradient correctness (float64 central differences, h = 1e-4)

H = 1e-4


def _directional_fd(f, x, v):
    with torch.no_grad():
        return (float(f(x + H * v)) - float(f(x - H * v))) / (2 * H)


def _check_probes(f, x, gen, probes=20):
    x = x.clone().requires_grad_(True)
    f(x).backward()
    for _ in range(probes):
        v = torch.randn(x.shape, generator=gen, dtype=torch.float64)
        v = v / v.norm()
        analytic = float((x.grad * v).sum())
        fd = _directional_fd(f, x.detach(), v)
        assert abs(fd - analytic) <= 1e-3 * max(abs(analytic), 1e-6), (fd, analytic)


@pytest.mark.criterion(2)
def test_c2_loss_rec_gradient():
    gen = torch.Generator().manual_seed(0)
    eps = torch.randn(2, 4, 6, 6, generator=gen, dtype=torch.float64)
    x = torch.randn(2, 4, 6, 6, generator=gen, dtype=torch.float64)
    _check_probes(lambda e: loss_rec(eps, e), x, gen)


@pytest.mark.criterion(2)
def test_c2_loss_tid_gradient_away_from_hinge():
    gen = torch.Generator().manual_seed(1)
    p, n = torch.nn.functional.normalize(torch.randn(2, 16, generator=gen, dtype=torch.float64), dim=-1)
    u = torch.randn(16, generator=gen, dtype=torch.float64)

    def f(v):
        return loss_tid(torch.nn.functional.normalize(v, dim=-1), p, n, 0.4)

    u = u if float(f(u)) > 0 else -u  # land on the active side of the hinge
    assert float(f(u)) > 1e-2
    _check_probes(f, u, gen)


@pytest.mark.criterion(2)
def test_c2_full_identity_path_gradient():
    """lambda(t) * L_TID through estimate_z0 -> decode -> crop -> phi, w.r.t. the noise prediction."""
    start = time.perf_counter()
    torch.manual_seed(0)
    ae = Autoencoder(c_z=4, width=8).double().eval()
    phi = IdentityNet(dim=16, width=8).double().eval()
    s = build_schedule()
    gen = torch.Generator().manual_seed(2)
    z0 = torch.randn(1, 4, 12, 12, generator=gen, dtype=torch.float64)
    eps = torch.randn(z0.shape, generator=gen, dtype=torch.float64)
    t = 300
    zt = add_noise(z0, t, eps, s)
    pos, neg = torch.nn.functional.normalize(torch.randn(2, 1, 16, generator=gen, dtype=torch.float64), dim=-1)

    def f(eps_pred):
        x_hat = ae.decode(estimate_z0(zt, t, eps_pred, s))
        return lambda_tid(t, s.T) * loss_tid(phi(crop_face(x_hat, FACE_BOX)), pos, neg, 1.5)

    x = eps + 0.1 * torch.randn(eps.shape, generator=gen, dtype=torch.float64)
    with torch.no_grad():
        assert float(f(x)) > 1e-2  # margin 1.5 keeps the hinge active
    _check_probes(f, x, gen)
    assert time.perf_counter() - start < 120


# ---------------------------------------------------------------------------
# 3. gating semantics


@pytest.mark.criterion(3)
def test_c3_detector_failure_matches_zero_identity_weight(tiny_bundle):
    real = build_constrained_dataset([make_identity(5)], 3)
    prior = generate_prior_set(tiny_bundle, 2, SamplerConfig(steps=2), seed=0)
    items, priors = prepare_items(tiny_bundle, real), prepare_items(tiny_bundle, prior)

    def grads(cfg, **kw):
        model = IdentityModel.create(tiny_bundle, "sks_g", seed=0)
        with torch.no_grad():
            for name, p in model.trainable().items():
                if name.endswith("lora_B"):
                    p.normal_(0, 0.01, generator=torch.Generator().manual_seed(3))
        parts, _ = finetune_step(model, items[0], priors[0], cfg, np.random.default_rng(7), **kw)
        return parts, {k: p.grad.clone() for k, p in model.trainable().items() if "lora_" in k}

    failed, g_fail = grads(FinetuneConfig(tid_mode="triplet", detector_fail_rate=1 - 1e-12))
    zero, g_zero = grads(FinetuneConfig(tid_mode="triplet"), lambda_tid_override=0.0)
    assert not failed.tid_applied and zero.tid_applied
    assert g_fail.keys() == g_zero.keys() and len(g_fail) > 0
    for k in g_fail:
        assert torch.equal(g_fail[k], g_zero[k]), k


# ---------------------------------------------------------------------------
# 4. metric oracles


@pytest.mark.criterion(4)
def test_c4_density_coverage_brute_force():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    for _ in range(100):
        n, m, d = int(rng.integers(6, 33)), int(rng.integers(1, 33)), int(rng.integers(1, 5))
        real = rng.integers(-3, 4, size=(n, d)).astype(float)  # integer grid forces distance ties
        fake = rng.integers(-3, 4, size=(m, d)).astype(float)
        assert density_coverage(real, fake, 5) == density_coverage_loop(real, fake, 5)
    assert time.perf_counter() - start < 60


@pytest.mark.criterion(4)
def test_c4_error_rates_exhaustive():
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    for _ in range(500):
        g = rng.integers(0, 20, size=int(rng.integers(1, 33))) / 20
        im = rng.integers(0, 20, size=int(rng.integers(1, 33))) / 20
        rep = error_rates(ScoreSet(g, im))
        oracle = rates_exhaustive(g, im)
        got = (rep.eer, rep.fmr100, rep.fmr1000, rep.fnmr100, rep.fnmr1000)
        assert got == pytest.approx(oracle, abs=1e-12)
    assert time.perf_counter() - start < 60


@pytest.mark.criterion(4)
def test_c4_closed_forms():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((40, 5))
    assert abs(frechet_distance(x, x)) <= 1e-6
    for n in (1, 3, 8):
        assert abs(vendi_score(np.eye(n)) - n) <= 1e-6
    assert abs(vendi_score(np.ones((6, 3))) - 1) <= 1e-6


# ---------------------------------------------------------------------------
# 5. anchored separability value


@pytest.mark.criterion(5)
def test_c5_fdr_anchor():
    assert fdr_from_moments(0.871, 0.070, 0.021, 0.0725) == pytest.approx(70.969, rel=0.01)


# ---------------------------------------------------------------------------
# 6-7. directional desk studies

STUDY_SEEDS = [0, 1, 2, 3, 4]


def _log(msg):
    print(f"[acceptance] {msg}", flush=True)


@pytest.fixture(scope="module")
def study_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("desk_study")


@pytest.fixture(scope="module")
def context(desk_base):
    cfg, bundle, _ = desk_base
    return StudyContext.create(cfg, bundle)


@pytest.fixture(scope="module")
def method_runs(context, study_dir):
    start = time.perf_counter()
    runs = method_study(context, seeds=STUDY_SEEDS, out_dir=study_dir / "methods")
    write_tables(study_dir / "reports", runs)
    elapsed = time.perf_counter() - start
    _log(f"method study: {elapsed / 60:.1f} min, tables in {study_dir / 'reports'}")
    return runs, elapsed


@pytest.mark.slow
@pytest.mark.criterion(6)
def test_c6_identity_loss_lowers_eer_and_keeps_diversity(method_runs):
    runs, elapsed = method_runs
    eer = {m: mean_over_seeds(runs, m, lambda r: r.evaluation.verification["synthetic_vs_real"].eer)
           for m in METHODS}
    vendi = {m: mean_over_seeds(runs, m, lambda r: r.evaluation.metrics["entire"].vendi_mean) for m in METHODS}
    _log(f"synthetic-vs-real EER {eer}")
    _log(f"per-identity Vendi {vendi}")
    assert elapsed < 90 * 60
    assert eer["idbooth"] <= eer["dreambooth"]
    assert vendi["idbooth"] >= vendi["portraitbooth"]


@pytest.fixture(scope="module")
def augmentation(context, method_runs, study_dir):
    start = time.perf_counter()
    cfg, bundle = context.cfg, context.bundle
    ids = experiment_identities(cfg)
    synthetic = {}
    for seed in STUDY_SEEDS:
        lora = study_dir / "methods" / "idbooth" / f"seed{seed}" / "identities"
        models = {i.id_label: IdentityModel.load(bundle, lora / i.id_label / "lora.ckpt") for i in ids}
        big = synthesize_all(models, ids, 100, cfg.sampler, seed)
        labels = np.asarray(big.labels)
        first21 = np.concatenate([np.flatnonzero(labels == i.id_label)[:21] for i in ids])
        synthetic[("+21", "idbooth", seed)] = big.subset(first21)
        synthetic[("+100", "idbooth", seed)] = big
    results = augmentation_study(cfg, context.real, synthetic, STUDY_SEEDS, study_dir / "reports")
    elapsed = time.perf_counter() - start
    _log(f"augmentation study: {elapsed / 60:.1f} min")
    return results, synthetic, elapsed


@pytest.mark.slow
@pytest.mark.criterion(7)
def test_c7_synthetic_augmentation_helps(augmentation, method_runs):
    results, synthetic, elapsed = augmentation
    runs, _ = method_runs
    # the 21/id subset is exactly the set evaluated in the method study
    for r in runs:
        if r.method == "idbooth":
            assert np.array_equal(synthetic[("+21", "idbooth", r.seed)].images, r.synthetic.images)
    acc = {s: float(np.mean([r.accuracy for r in results if r.setting == s])) for s in ("real", "+21", "+100")}
    _log(f"mean benchmark accuracy {acc}")
    assert elapsed < 60 * 60
    assert acc["+21"] >= acc["real"]
    assert acc["+100"] >= acc["+21"]


# ---------------------------------------------------------------------------
# 8. reproducibility


def _tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.criterion(8)
def test_c8_cli_pipeline_rerun_is_byte_identical(tmp_path, monkeypatch):
    monkeypatch.delenv(cli.OUT_ENV, raising=False)
    cfg_path = tmp_path / "tiny.json"
    cfg_path.write_text(json.dumps(TINY))
    trees = []
    for name in ("a", "b"):
        out = tmp_path / name
        for cmd in (["pretrain"], ["finetune", "--method", "idbooth"], ["finetune", "--method", "dreambooth"],
                    ["generate", "--method", "idbooth"], ["generate", "--method", "dreambooth"], ["evaluate"]):
            assert cli.main(["--config", str(cfg_path), "--out", str(out), *cmd]) == 0
        trees.append(_tree_bytes(out / "tiny"))
    a, b = trees
    assert a.keys() == b.keys()
    kinds = {Path(k).suffix for k in a}
    assert {".f32", ".json", ".csv", ".png"} <= kinds
    # the stored config differs only in the output root it was invoked with
    ca, cb = (json.loads(t.pop("config.json")) for t in (a, b))
    assert ca.pop("out") != cb.pop("out") and ca == cb
    assert [k for k in a if a[k] != b[k]] == []


@pytest.mark.slow
@pytest.mark.criterion(8)
def test_c8_desk_rerun_is_byte_identical(desk_base, tmp_path):
    cfg, bundle, _ = desk_base
    cfg = apply_overrides(cfg, {"experiment.n_identities": 2})  # imposter pairs need two identities
    ctx = StudyContext.create(cfg, bundle)
    trees = []
    for name in ("a", "b"):
        out = tmp_path / name
        run = run_method(bundle, cfg, "idbooth", 0, ctx.real, ctx.prior, ctx.ref_feats, out)
        write_tables(out / "reports", [run])
        trees.append(_tree_bytes(out))
    assert trees[0].keys() == trees[1].keys()
    assert [k for k in trees[0] if trees[0][k] != trees[1][k]] == []


# ---------------------------------------------------------------------------
# 9. ablation harness


@pytest.mark.slow
@pytest.mark.criterion(9)
def test_c9_ablations_emit_tables(desk_base, tmp_path):
    cfg, bundle, _ = desk_base
    cfg = apply_overrides(cfg, {"experiment.n_identities": 3, "sampler.per_id": 6})
    ctx = StudyContext.create(cfg, bundle)
    loss_runs = loss_ablation(ctx, [0], tmp_path)
    prompt_runs = prompt_ablation(ctx, [0], tmp_path)
    assert [r.method for r in loss_runs] == list(LOSS_PRESETS)
    assert [r.method for r in prompt_runs] == list(PROMPT_PRESETS)
    for prefix, names in (("loss_ablation_", LOSS_PRESETS), ("prompt_ablation_", PROMPT_PRESETS)):
        with open(tmp_path / f"{prefix}table1_metrics.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [(r["method"], r["mode"]) for r in rows] == [(n, m) for n in names for m in ("entire", "face")]
        with open(tmp_path / f"{prefix}table3_verification.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert {(r["setting"], r["method"]) for r in rows} == {(s, n) for s in SETTINGS for n in names}
        assert all(0.0 <= float(r["eer"]) <= 1.0 for r in rows)
    # presets really change the prompts: background slot only from the background preset onward
    bg = {r.method: {rec["background"] for rec in r.synthetic.records} for r in prompt_runs}
    assert bg["base"] == {None} and None not in bg["background"]
    neg = {r.method: {rec["negative_style"] for rec in r.synthetic.records} for r in prompt_runs}
    assert neg["background"] == {False} and neg["negative"] == {True}
    # the loss presets differ in what was optimised
    tid = {r.method: r for r in loss_runs}
    assert not np.array_equal(tid["rec"].synthetic.images, tid["rec_pr"].synthetic.images)
