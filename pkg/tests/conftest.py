import pytest

from privrep.data import generate_synthetic
from privrep.training import TrainConfig, train_standard


@pytest.fixture(scope="session")
def small_corpus():
    corpus, records = generate_synthetic(n=400, num_entities=2, seed=3)
    return corpus


@pytest.fixture(scope="session")
def small_records():
    return generate_synthetic(n=400, num_entities=2, seed=3)[1]


@pytest.fixture(scope="session")
def small_bundle(small_corpus):
    return train_standard(small_corpus, TrainConfig(epochs=3, seed=3, rep_dim=16, embed_dim=8))


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        ok, detail = RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
