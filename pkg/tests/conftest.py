import os

# BLAS threading only adds overhead at these matrix sizes
for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from unlearn_forge.model import ModelConfig, init_params  # noqa: E402


@pytest.fixture
def tiny_config():
    return ModelConfig(embed_dim=8, n_layers=1, n_heads=2, context_len=24, ffn_mult=2.0, seed=3, init_std=0.3)


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config, "double")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE_LINES = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion."""
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def emit(criterion, ok, detail):
        line = f"{criterion}: {'PASS' if ok else 'FAIL'} ({detail})"
        _ACCEPTANCE_LINES.append(line)
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
