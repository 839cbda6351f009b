import os

import numpy as np
import pytest
import torch

from topicmatch.config import RunConfig

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CACHE_DIR = os.environ.get("TOPICMATCH_CACHE", os.path.join(ROOT, ".cache"))

# one line per acceptance criterion, echoed in the terminal summary
CRITERIA = []

# toy run used by the end-to-end checks; short enough for CPU, cached by config hash
TOY_STEPS = 600


def toy_config(**kw):
    return RunConfig(steps=TOY_STEPS, checkpoint_every=0).override(**kw)


@pytest.fixture(scope="session")
def trained_checkpoint():
    """Path to a trained toy checkpoint, training it on first use."""
    from topicmatch.train import train

    cfg = toy_config()
    out = os.path.join(CACHE_DIR, f"toy_{cfg.hash()}")
    path = os.path.join(out, "final.tfm")
    if not os.path.exists(path):
        train(cfg, out)
    return path


@pytest.fixture(scope="session")
def trained_model(trained_checkpoint):
    from topicmatch.checkpoint import load_model

    return load_model(trained_checkpoint)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


@pytest.fixture
def criterion():
    """Record and print a PASS/FAIL line, then assert."""

    def check(number, name, ok, detail=""):
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {name}" + (f" ({detail})" if detail else "")
        CRITERIA.append((number, line))
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(CRITERIA):
            terminalreporter.write_line(line)
