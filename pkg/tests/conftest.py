import pytest
from hypothesis import settings

from archdiff.archspace import enumerate_space, get_space
from archdiff.numerics import Rng
from archdiff.scorenet import ScoreNetConfig, train
from archdiff.sde import VeSde

settings.register_profile("default", deadline=None)
settings.load_profile("default")

TRAIN_STEPS = 3000
# half-split nets: at 3000 steps about 8% of rows still straddle two ops
HALF_TRAIN_STEPS = 10_000
_results: list[tuple[str, bool, str]] = []


@pytest.fixture(scope="session")
def tiny5():
    return get_space("tiny5")


@pytest.fixture(scope="session")
def tiny_full_net(tiny5):
    """Desk-preset score network trained on every tiny5 architecture."""
    archs = list(enumerate_space(tiny5))
    return train(tiny5, archs, ScoreNetConfig.desk(), VeSde(), Rng(0), steps=TRAIN_STEPS).model


@pytest.fixture(scope="session")
def tiny_half_split(tiny5):
    archs = list(enumerate_space(tiny5))
    idx = sorted(Rng(0, 1).permutation(len(archs))[: len(archs) // 2].tolist())
    return [archs[i] for i in idx]


def _train_half(tiny5, archs, pos: bool):
    cfg = ScoreNetConfig.desk(use_pos_emb=pos)
    return train(tiny5, archs, cfg, VeSde(), Rng(1), steps=HALF_TRAIN_STEPS).model


@pytest.fixture(scope="session")
def tiny_half_net(tiny5, tiny_half_split):
    return _train_half(tiny5, tiny_half_split, True)


@pytest.fixture(scope="session")
def tiny_half_net_no_pos(tiny5, tiny_half_split):
    return _train_half(tiny5, tiny_half_split, False)


@pytest.fixture
def report():
    """Record one acceptance line: report(criterion, passed, detail)."""
    def _record(criterion: str, passed: bool, detail: str) -> None:
        passed = bool(passed)
        _results.append((criterion, passed, detail))
        print(f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")
    return _record


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in sorted(_results, key=lambda r: int(r[0].split()[1])):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")

