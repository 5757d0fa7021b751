from __future__ import annotations

import numpy as np
import pytest

from aceprune.refmodel import default_manifest, init_model, save_model, toy_corpus


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_model():
    """One block, d_model 16: fast enough for per-test forward passes."""
    return init_model(default_manifest(seed=3, d_model=16, n_heads=2, d_ff=32, n_layers=1, context_len=32))


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory):
    """The default toy model and corpus on disk, written once per session."""
    d = tmp_path_factory.mktemp("toy")
    save_model(init_model(default_manifest(seed=0)), d / "model")
    (d / "corpus.txt").write_bytes(toy_corpus(0))
    return d


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_log():
    """Collects one verdict line per acceptance criterion for the run summary."""
    return _ACCEPTANCE_LINES.append


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
