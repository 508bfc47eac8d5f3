import numpy as np
import pytest

from eusa.corpus import CorpusConfig, generate_corpus, generate_video
from eusa.tracker import TrackerModel


@pytest.fixture(scope="session")
def tiny_model():
    """Untrained narrow tracker; cheap enough for finite differences."""
    return TrackerModel.init(seed=3, widths=(4, 8, 8))


@pytest.fixture(scope="session")
def tiny_video():
    return generate_video(CorpusConfig(n_videos=2, frames_per_video=8, seed=5), 0)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(CorpusConfig(n_videos=4, frames_per_video=10, seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_VERDICTS] = {}


@pytest.fixture(scope="session")
def verdict(request):
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""
    table = request.config.stash[_VERDICTS]

    def record(criterion: str, ok: bool, detail: str) -> None:
        table[criterion] = (ok, detail)

    return record


def pytest_terminal_summary(terminalreporter, config):
    table = config.stash.get(_VERDICTS, {})
    if not table:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(table):
        ok, detail = table[criterion]
        terminalreporter.write_line(f"{criterion}: {'PASS' if ok else 'FAIL'}  {detail}")
