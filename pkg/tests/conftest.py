import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))


def make_tiny_bundle(seed: int = 0):
    """Randomly initialised miniature base model for fast plumbing tests."""
    from idbooth.config import SchedulerConfig
    from idbooth.nets import Autoencoder, ConditionEncoder, Denoiser, FeatureAutoencoder, IdentityNet
    from idbooth.pretraining import BaseBundle, freeze, schedule_from

    torch.manual_seed(seed)
    return BaseBundle(
        schedule=schedule_from(SchedulerConfig()),
        autoencoder=freeze(Autoencoder(c_z=4, width=8)),
        denoiser=freeze(Denoiser(c_z=4, ch=16, cond_dim=16, emb_dim=32)),
        conditioner=freeze(ConditionEncoder(dim=16)),
        phi=freeze(IdentityNet(dim=16, width=8)),
        features=freeze(FeatureAutoencoder(dim=8, width=8)),
    )


@pytest.fixture(scope="session")
def tiny_bundle():
    return make_tiny_bundle()


@pytest.fixture(scope="session")
def desk_base():
    """Base bundle for the default desk configuration, trained once and cached."""
    from idbooth.config import RunConfig
    from idbooth.experiments import base_key, default_cache_root, obtain_base

    cfg = RunConfig()
    bundle = obtain_base(cfg)
    return cfg, bundle, default_cache_root() / f"base-{base_key(cfg)}"


# acceptance reporting: one pass/fail line per criterion at the end of the run
_CRITERIA: dict[int, list[tuple[str, str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number covered by the test")


def pytest_runtest_logreport(report):
    crit = getattr(report, "criterion", None)
    if crit is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _CRITERIA.setdefault(crit, []).append((report.nodeid.split("::")[-1], report.outcome))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = marker.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(_CRITERIA):
        results = _CRITERIA[crit]
        ok = all(o == "passed" for _, o in results)
        failed = [n for n, o in results if o != "passed"]
        detail = f"{len(results)} test(s)" + (f"; failing: {', '.join(failed)}" if failed else "")
        terminalreporter.write_line(f"criterion {crit}: {'PASS' if ok else 'FAIL'} ({detail})")
