import json
from pathlib import Path

import pytest

from idbooth import cli
from tiny_config import TINY


@pytest.fixture
def tiny_cfg(tmp_path, monkeypatch):
    monkeypatch.delenv(cli.OUT_ENV, raising=False)
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


def run(args, capsys):
    code = cli.main([str(a) for a in args])
    out = capsys.readouterr()
    return code, out.out.split(), out.err


def test_invalid_config_exit_2(tmp_path, tiny_cfg, capsys):
    assert run(["--config", tmp_path / "nope.json", "pretrain"], capsys)[0] == cli.EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(["--config", bad, "pretrain"], capsys)[0] == cli.EXIT_CONFIG
    bad.write_text(json.dumps({"finetune": {"bogus": 1}}))
    assert run(["--config", bad, "pretrain"], capsys)[0] == cli.EXIT_CONFIG
    code, _, err = run(["--config", tiny_cfg, "--out", tmp_path, "--set", "finetune.tid_mode=quad", "pretrain"],
                       capsys)
    assert code == cli.EXIT_CONFIG and "tid_mode" in err
    assert run(["--config", tiny_cfg, "--out", tmp_path, "--jobs", "0", "pretrain"], capsys)[0] == cli.EXIT_CONFIG


def test_missing_base_exit_4(tmp_path, tiny_cfg, capsys):
    code, out, err = run(["--config", tiny_cfg, "--out", tmp_path, "finetune"], capsys)
    assert code == cli.EXIT_NO_BASE and out == [] and "pretrain" in err
    assert run(["--config", tiny_cfg, "--out", tmp_path, "evaluate"], capsys)[0] == cli.EXIT_NO_BASE


def test_gate_failure_exit_3(tmp_path, tiny_cfg, capsys):
    code, out, err = run(["--config", tiny_cfg, "--out", tmp_path, "--set", "pretrain.phi_eer_gate=0.0", "pretrain"],
                         capsys)
    assert code == cli.EXIT_GATE and out == [] and "EER" in err


def test_out_env_overrides(tmp_path, tiny_cfg, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
    args = cli.build_parser().parse_args(["--config", str(tiny_cfg), "--out", "ignored", "pretrain"])
    assert cli.resolve_config(args).out == str(tmp_path / "env")


def _pipeline(root, cfg, capsys, jobs=1):
    paths = []
    for cmd in (["pretrain"], ["finetune", "--method", "idbooth"], ["generate", "--method", "idbooth"],
                ["evaluate"]):
        extra = ["--jobs", str(jobs)] if cmd[0] in ("finetune", "generate") else []
        code, out, err = run(["--config", cfg, "--out", root, *extra, *cmd], capsys)
        assert code == cli.EXIT_OK, err
        assert out and all(Path(p).exists() for p in out)  # stdout carries only paths
        paths += out
    return paths


def test_end_to_end_and_rerun_identical(tmp_path, tiny_cfg, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    # inputs missing before the upstream stage ran
    run(["--config", tiny_cfg, "--out", a, "pretrain"], capsys)
    assert run(["--config", tiny_cfg, "--out", a, "generate"], capsys)[0] == cli.EXIT_MISSING
    assert run(["--config", tiny_cfg, "--out", a, "evaluate"], capsys)[0] == cli.EXIT_MISSING
    assert run(["--config", tiny_cfg, "--out", a, "finetune", "--ids", "id9999999"], capsys)[0] == cli.EXIT_MISSING

    pa = _pipeline(a, tiny_cfg, capsys)
    pb = _pipeline(b, tiny_cfg, capsys, jobs=2)
    run_a, run_b = a / "tiny", b / "tiny"
    for rel in ("reports/table1_metrics.csv", "reports/table3_verification.csv", "reports/table4_recognition.csv",
                "samples/idbooth_3/index.json", "identities/idbooth/id0000000/lora.ckpt/manifest.json",
                "identities/idbooth/id0000001/train_log.csv", "base/digests.json"):
        assert (run_a / rel).read_bytes() == (run_b / rel).read_bytes(), rel
    for f in sorted((run_a / "samples/idbooth_3").glob("*.png")):
        assert f.read_bytes() == (run_b / "samples/idbooth_3" / f.name).read_bytes()
    header = (run_a / "reports/table4_recognition.csv").read_text().splitlines()[0]
    assert header == "csv_version,setting,method,overall,cross_pose,cross_jitter,average"
    assert json.loads((run_a / "config.json").read_text())["name"] == "tiny"
    assert len(pa) == len(pb)
