import math

import pytest
from hypothesis import settings

from avur.data import ToyTaskConfig
from avur.pipeline import PipelineConfig

settings.register_profile("repo", deadline=None, max_examples=100)
settings.load_profile("repo")

TINY_TASK = dict(vocab_size=8, num_visemes=4, min_len=3, max_len=6, n_train=40, n_dev=8, n_test=8)
TINY_PIPE = dict(seeds=(0,), snrs=(math.inf, 0.0), pool_size=60, base_steps=30, stage1_steps=20, lm_corpus=40,
                 lm_steps=10, align_steps=10, scorer_steps=10, scorer_lists=10, codebook_size=4, n_best=4, beam=4)


def tiny_config(**kw) -> PipelineConfig:
    """A pipeline small enough to run end to end in a few seconds."""
    base = dict(TINY_PIPE, task=ToyTaskConfig(**TINY_TASK))
    base.update(kw)
    return PipelineConfig(**base)


@pytest.fixture
def tiny():
    return tiny_config


# acceptance summary: one line per criterion, whatever the capture mode

_CRITERIA: dict[str, list[tuple[str, str]]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    _CRITERIA.setdefault(str(mark.args[0]), []).append((item.name, rep.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for key in sorted(_CRITERIA, key=lambda k: (int(k.rstrip("abcd")), k)):
        results = _CRITERIA[key]
        failed = [name for name, out in results if out != "passed"]
        status = "PASS" if not failed else "FAIL"
        detail = f"{len(results) - len(failed)}/{len(results)} checks"
        if failed:
            detail += " (failed: " + ", ".join(failed) + ")"
        terminalreporter.write_line(f"criterion {key}: {status}  {detail}")
