import time
from collections import defaultdict

import pytest

from ldpatch.cli import main

# criterion -> list of (part, passed, detail)
_VERDICTS = defaultdict(list)


class Verdicts:
    def record(self, criterion: str, passed: bool, detail: str, part: str = "") -> bool:
        _VERDICTS[criterion].append((part, bool(passed), detail))
        return bool(passed)


@pytest.fixture(scope="session")
def verdicts():
    return Verdicts()


class PipelineRun:
    """Outputs and per-stage wall times of one default CLI pipeline run."""

    def __init__(self, root):
        self.root = root
        self.seconds = {}

    def stage(self, name, *args):
        t0 = time.perf_counter()
        code = main([name, *map(str, args), "--quiet"])
        self.seconds[name] = time.perf_counter() - t0
        if code != 0:
            raise RuntimeError(f"stage {name} exited with {code}")

    @property
    def total_seconds(self):
        return sum(self.seconds.values())


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("default_run")
    run = PipelineRun(d)
    run.stage("train-ae", "--out", d / "ae.art")
    run.stage("train-diffusion", "--ae", d / "ae.art", "--out", d / "diffusion.art")
    run.stage("train-detector", "--out", d / "detector.art")
    run.stage("optimize-patch", "--ae", d / "ae.art", "--diffusion", d / "diffusion.art",
              "--detector", d / "detector.art", "--out", d / "patch.art")
    run.stage("evaluate", "--detector", d / "detector.art", "--patch", d / "patch.art",
              "--out", d / "report.json")
    return run


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")

    def key(name):
        return int(name.split("-")[1])

    for criterion in sorted(_VERDICTS, key=key):
        parts = _VERDICTS[criterion]
        ok = all(p for _, p, _ in parts)
        details = "; ".join((f"{part}: " if part else "") + f"{detail} [{'pass' if p else 'FAIL'}]"
                            for part, p, detail in parts)
        tr.write_line(f"{criterion} {'PASS' if ok else 'FAIL'}  {details}")
