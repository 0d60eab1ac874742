import numpy as np
import pytest

from thingseg.scanio import PointCloud
from thingseg.taxonomy import load_taxonomy


@pytest.fixture(scope="session")
def toy_tax():
    return load_taxonomy("toy")


@pytest.fixture(scope="session")
def kitti_tax():
    return load_taxonomy("semantickitti-ntn")


def random_cloud(rng, n, n_classes=8, n_beams=4, labelled=True, with_beams=True):
    """Random cloud with labels in 0..n_classes-1 (0 is unlabeled)."""
    xyz = rng.normal(0.0, 5.0, size=(n, 3))
    label = rng.integers(1 if labelled else 0, n_classes, size=n)
    beam = rng.integers(0, n_beams, size=n) if with_beams else None
    return PointCloud(xyz=xyz, intensity=rng.random(n), label=label, beam=beam)


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line for an acceptance criterion and assert it."""
    lines = request.config.stash.setdefault(_ACCEPT_KEY, {})

    def record(number, ok, detail):
        lines[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(lines[number])
        assert ok, detail

    return record


_ACCEPT_KEY = pytest.StashKey[dict]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPT_KEY, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
