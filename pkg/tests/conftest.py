import pytest

from conceptnce.ontology import default_vocabulary
from conceptnce.synthgen import GenConfig, generate

_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request):
    """Record one pass/fail line for an acceptance criterion, then assert it."""
    lines = request.config.stash[_VERDICTS]

    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number}: {title} | {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return record


@pytest.fixture(scope="session")
def small_synth():
    """20 studies over 6 concepts with plenty of present findings."""
    cfg = GenConfig(n_studies=20, vocab=default_vocabulary(6), p_present=0.3, p_unknown=0.1, seed=5)
    records, images = generate(cfg)
    return cfg, records, images
