import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_spec():
    """Smallest graph under the two-pool policy: two pools, two upsamples, one skip."""
    from patch2img.graph import NetworkSpec

    layers = [
        {"id": "c1", "kind": "conv", "filters": 4, "kernel": 3},
        {"id": "r1", "kind": "relu"},
        {"id": "p1", "kind": "maxpool2"},
        {"id": "p2", "kind": "maxpool2"},
        {"id": "u1", "kind": "upsample2"},
        {"id": "u2", "kind": "upsample2"},
        {"id": "cat", "kind": "concat", "inputs": ["u2", "r1"]},
        {"id": "c2", "kind": "conv", "filters": 1, "kernel": 3},
        {"id": "s", "kind": "sigmoid"},
    ]
    return NetworkSpec.from_dict({"name": "tiny", "layers": layers})


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion(capsys):
    """Record one acceptance result line, print it, then assert it."""

    def record(number, title, passed, detail="", skipped=False):
        status = "SKIP" if skipped else ("PASS" if passed else "FAIL")
        line = f"[{status}] criterion {number}: {title}" + (f" -- {detail}" if detail else "")
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        if skipped:
            pytest.skip(detail)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
