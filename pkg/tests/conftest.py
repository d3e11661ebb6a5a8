import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from dryrecover.dspcore import AudioClip, save_audio
from dryrecover.synth import guitar_phrase

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))

TINY_DENOISER = dict(n_layers=1, c_emb=64, n_heads=1, dropout=0.0)
TINY_VOCODER = dict(
    initial_channels=16,
    mpd_channels=(4, 8, 8, 8, 8),
    msd_channels=(4, 8, 8, 8, 8, 8, 8),
    msd_groups=(1,) * 7,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def dry_dir(tmp_path):
    """Ten 1 s plucked-string clips written as float WAVs."""
    d = tmp_path / "src"
    d.mkdir()
    for i in range(10):
        save_audio(guitar_phrase(1.0, seed=i), d / f"clip{i:02d}.wav")
    return d


def random_clip(rng, n, peak=0.9):
    x = rng.standard_normal(n)
    return AudioClip((peak * x / np.max(np.abs(x))).astype(np.float32))


# -- acceptance report -----------------------------------------------------------------

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "passed": True, "ran": False, "detail": []})
    if report.when == "call":
        entry["ran"] = True
    if report.failed:
        entry["passed"] = False
        entry["detail"].append(f"{item.name} ({report.when})")
    elif report.skipped and report.when in ("setup", "call"):
        entry["detail"].append(f"{item.name} skipped")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        status = "PASS" if entry["passed"] and entry["ran"] else "FAIL"
        detail = f"  [{'; '.join(entry['detail'])}]" if entry["detail"] else ""
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {entry['title']}{detail}")
