from pathlib import Path

import pytest

from avssl.config import load_config

TINY = Path(__file__).parent / "configs" / "tiny.yaml"

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def tiny_cfg():
    return load_config(TINY)


@pytest.fixture(scope="session")
def tiny_run(tiny_cfg, tmp_path_factory):
    """One short training run shared by the evaluation and CLI tests."""
    from avssl.data import generate_dataset
    from avssl.train import train

    root = tmp_path_factory.mktemp("tiny_run")
    ds = generate_dataset(tiny_cfg.data, tiny_cfg.seed, root / "data")
    train(tiny_cfg, root / "run", dataset=ds, log=lambda *_: None)
    return {"root": root, "data": root / "data", "run": root / "run", "ckpt": root / "run" / "checkpoint.ckpt", "dataset": ds}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
