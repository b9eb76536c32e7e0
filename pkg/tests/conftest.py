import pytest

from maskdiff.config import Config
from maskdiff.denoiser import build_model


def tiny_config(**kw) -> Config:
    """Small enough that a 50-step sample takes well under a second."""
    base = dict(height=8, width=8, dyn_width=8, mask_width=4, norm_groups=2, batch_size=4, n_clips=8, clip_len=8)
    base.update(kw)
    return Config(**base)


@pytest.fixture(scope="session")
def tiny_cfg() -> Config:
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_model(tiny_cfg):
    return build_model(tiny_cfg, seed=0)


# -- acceptance verdicts --------------------------------------------------------------

ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def verdict(request):
    """Record ``(criterion, passed, detail)`` for the end-of-run summary, then assert."""
    store = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    def record(n: int, passed: bool, detail: str) -> None:
        line = f"criterion {n:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        store[n] = line
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(ACCEPTANCE_KEY, {})
    if store:
        terminalreporter.section("acceptance criteria")
        for n in sorted(store):
            terminalreporter.write_line(store[n])
