import numpy as np
import pytest

from cmser.model import CrossModalModel, ModelConfig


def random_batch(rng, dims, batch=3, frames=5, ragged=True):
    """One ``(x, mask)`` pair per modality dim, zeros in masked positions."""
    out = []
    for d in dims:
        x = rng.normal(size=(batch, frames, d))
        mask = np.ones((batch, frames), dtype=bool)
        if ragged:
            for b in range(batch):
                mask[b, rng.integers(1, frames + 1):] = False
        x[~mask] = 0.0
        out.append((x, mask))
    return out


def condition(model, seed=0):
    """Move a freshly initialised model to a well-scaled point for finite differences."""
    rng = np.random.default_rng(seed)
    bias_names = ("bias", "beta", "b_update", "b_reset", "b_cand")
    for name, p in model.parameters():
        p.value *= 2.0
        if name.endswith(bias_names):
            p.value += 0.1 * rng.standard_normal(p.shape)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_bimodal():
    return CrossModalModel(ModelConfig([("a", 3), ("b", 2)], hidden=4, n_classes=3, seed=1))


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
