import pytest

from mpe.data import split
from mpe.synth import SynthConfig, synth_quadruples

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def synth_fixture():
    """The 50-location / 20-object / 10-slot corpus, ~2e4 records."""
    config = SynthConfig(n_locations=50, out_degree=3, n_objects=20, n_slots=10, records_per_object=1000,
                         object_signal=0.5, time_signal=0.5)
    graph, quads = synth_quadruples(config)
    return config, graph, quads


@pytest.fixture(scope="session")
def small_corpus():
    config = SynthConfig(n_locations=12, out_degree=2, n_objects=5, n_slots=4, records_per_object=120, seed=3)
    _, quads = synth_quadruples(config)
    train, val, test = split(quads, seed=1)
    return train, val, test


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
