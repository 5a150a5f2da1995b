import pytest

from mtlavsr import pipeline, synthdata


@pytest.fixture(scope="session")
def tiny_corpus():
    return synthdata.build_corpus(30, 11)


@pytest.fixture(scope="session")
def tiny_corpus_features(tiny_corpus):
    return tiny_corpus, pipeline.extract_features(tiny_corpus.utterances.values())


def pytest_terminal_summary(terminalreporter):
    import oracles
    if oracles.ACCEPTANCE_LOG:
        terminalreporter.section("acceptance criteria")
        for line in sorted(oracles.ACCEPTANCE_LOG, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
