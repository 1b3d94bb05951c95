import numpy as np
import pytest

from tsenet import audio, features, synth


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    """Four synthetic speakers (2 m, 2 f), four utterances each."""
    out = tmp_path_factory.mktemp("corpus")
    synth.make_corpus(out, n_male=2, n_female=2, utts_per_speaker=4, seed=11, prefix="spk")
    return out


@pytest.fixture(scope="session")
def manifest(corpus_dir):
    return audio.UtteranceManifest.read_csv(corpus_dir / "utterances.csv")


@pytest.fixture(scope="session")
def corpus_features(manifest):
    return {u.utterance_id: features.pipeline(audio.read_wav(u.path)) for u in manifest.all_utterances()}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def accept():
    """Record one acceptance verdict line; returns the verdict."""
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"ACCEPTANCE {number} {'PASS' if ok else 'FAIL'}: {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
