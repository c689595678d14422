import contextlib

import pytest

from mobiforge.backbone import ModelConfig
from mobiforge.datagen import generate_corpus

SMALL = ModelConfig(L=16, c0=8, n_blocks=1, n_heads=2, c_cond=8, feature_dim=4, vae_hidden=16, K=10)

ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def small_config():
    return SMALL


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(seed=0, n_per_kind=16, L=SMALL.L)


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


class Verdict:
    def __init__(self):
        self.checks = []

    def check(self, ok, detail: str):
        self.checks.append((bool(ok), detail))


@pytest.fixture
def criterion(request):
    """``with criterion(n) as c: c.check(ok, detail)`` records one PASS/FAIL line per criterion."""
    lines = request.config.stash[ACCEPTANCE]

    @contextlib.contextmanager
    def run(number: int):
        verdict = Verdict()
        try:
            yield verdict
        except Exception as exc:
            verdict.check(False, f"raised {type(exc).__name__}: {exc}")
            raise
        finally:
            ok = bool(verdict.checks) and all(c[0] for c in verdict.checks)
            detail = "; ".join(d for _, d in verdict.checks)
            lines[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
            print(lines[number])
        failed = [d for passed, d in verdict.checks if not passed]
        assert not failed, f"criterion {number} failed: {failed}"

    return run


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
