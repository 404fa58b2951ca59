import json

import pytest

MICRO = {
    "corpus": {"path": "bundled:toy1000", "tokenizer": {"mode": "bpe", "vocab_size": 300}},
    "model": {"preset": "micro"},
    "train": {"batch_size": 4, "seq_len": 32, "steps": 60, "warmup": 10, "log_every": 10, "checkpoints": [10, 30, 60]},
    "acts": {"n_docs": 20, "max_tokens": 32, "layers": [0, 1]},
    "sae": {"steps": 50, "batch_size": 64, "lambda_warmup": 10, "dead_window": 20, "eval_docs": 8},
}


@pytest.fixture
def micro_config(tmp_path):
    path = tmp_path / "micro.json"
    path.write_text(json.dumps(MICRO))
    return path


ACCEPTANCE: dict[int, tuple[bool, str]] = {}
N_CRITERIA = 12


@pytest.fixture
def verdict():
    """Record the outcome of one acceptance criterion for the summary."""

    def record(number: int, passed: bool, detail: str) -> None:
        ACCEPTANCE[number] = (bool(passed), detail)

    return record


def pytest_terminal_summary(terminalreporter):
    ran = [r for k in ("passed", "failed", "xfailed", "error") for r in terminalreporter.stats.get(k, [])
           if "test_acceptance" in getattr(r, "nodeid", "")]
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        ok, detail = ACCEPTANCE.get(n, (False, "not run in this session"))
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
