from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from stream4d.io import RunConfig, load_manifest  # noqa: E402
from stream4d.pipeline import reconstruct, synthesize, write_reconstruction  # noqa: E402
from stream4d.synth import default_scene, render_all  # noqa: E402


@pytest.fixture(scope="session")
def scene():
    return default_scene()


@pytest.fixture(scope="session")
def bundles(scene):
    return render_all(scene)


@pytest.fixture(scope="session")
def static_scene():
    return default_scene(dynamic=False)


@pytest.fixture(scope="session")
def dataset(tmp_path_factory, scene):
    root = tmp_path_factory.mktemp("dataset")
    return synthesize(scene, root)


@pytest.fixture(scope="session")
def manifest(dataset):
    return load_manifest(dataset)


@pytest.fixture(scope="session")
def reconstruction(manifest):
    return reconstruct(manifest, RunConfig())


@pytest.fixture(scope="session")
def reconstruction_dir(tmp_path_factory, reconstruction):
    out = tmp_path_factory.mktemp("recon")
    write_reconstruction(reconstruction, out)
    return out


# --------------------------------------------------------------------------
# acceptance reporting: one PASS/FAIL line per criterion in the terminal summary

_CRITERIA: list[str] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    number, title = marker.args
    details = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    status = "PASS" if report.passed else "FAIL"
    line = f"{status}  criterion {number}: {title}"
    if details:
        line += f"  [{details}]"
    _CRITERIA.append(line)


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
