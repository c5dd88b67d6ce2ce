import pytest

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""
    def record(n: int, ok: bool, detail: str) -> None:
        ACCEPTANCE_LINES[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])


@pytest.fixture(scope="session")
def trained_synth():
    """Default synthetic corpus with a d=128 model trained 30 epochs on its first 800 queries."""
    from xmlr import encoder as enc
    from xmlr import featstore
    from xmlr import trainkit as tk
    from xmlr.numkit import Rng

    m, queries, _ = featstore.synth_corpus(Rng(0))
    params = enc.ModelParams.init(Rng(1), m.d_v, m.d_s, queries[0].tokens.shape[1], d=128, max_len=20)
    params, _ = tk.train(tk.TrainData.from_records(m, queries[:800]), params, tk.TrainConfig(epochs=30, seed=0))
    return m, queries[:800], queries[800:], params
