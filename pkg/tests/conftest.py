import sys
from pathlib import Path

import pytest

from vidbackdoor.harness import ExperimentConfig, StageCache, run_pipeline

sys.path.insert(0, str(Path(__file__).parent))

_VERDICTS: dict[int, str] = {}


def record(number: int, name: str, ok: bool, detail: str) -> None:
    """Log one acceptance verdict; the terminal summary prints them in criterion order."""
    line = f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {name}: {detail}"
    _VERDICTS[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])


@pytest.fixture(scope="session")
def cache():
    return StageCache()


@pytest.fixture(scope="session")
def base(tmp_path_factory):
    return ExperimentConfig(out_dir=str(tmp_path_factory.mktemp("acceptance") / "default"))


@pytest.fixture(scope="session")
def runs(base, cache):
    """Lazily run and memoise default-config pipelines keyed by their dotted-path overrides."""
    done = {}

    def get(**overrides):
        key = repr(sorted(overrides.items()))
        if key not in done:
            tag = "_".join(f"{k}={v}" for k, v in sorted(overrides.items())).replace("'", "") or "default"
            cfg = base.replace(**overrides, out_dir=f"{base.out_dir}/../{tag}")
            done[key] = (cfg, run_pipeline(cfg, cache))
        return done[key]

    return get
