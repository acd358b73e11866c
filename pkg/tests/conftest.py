"""Shared fixtures for the acceptance suite.

The linear cross-modality study is expensive, so one session object caches
datasets, forward models and per-method results; the criteria that share a
configuration (oracle recovery, discriminator ablation, dataset scale) read
from the same runs.
"""

import time
from collections import defaultdict
from dataclasses import replace

import pytest

from cyclealign import config, data, transfer
from cyclealign import forward_model as fm

SCALE_SIZES = (5000, 20000, 50000)


class LinearStudy:
    """Lazily computed runs of the scrambled-observation linear task."""

    def __init__(self):
        self.task = config.load_preset("cross_modality_linear", ["scale=ci", "eval.seeds=0,1,2"]).task()
        self.seeds = self.task.seeds
        self.seconds = defaultdict(float)
        self._full = {}
        self._prepared = {}
        self._l1 = {}
        self._reports = {}

    def _collect(self, seed):
        # the largest size is collected once; smaller sizes are its leading episodes
        if seed not in self._full:
            t = time.perf_counter()
            sx, sy, _, _ = transfer.dataset_seeds(seed)
            h = self.task.collect_horizon
            n = max(SCALE_SIZES) // h
            self._full[seed] = (data.collect(self.task.spec_x, self.task.collect_mode_x, n, h, sx),
                                data.collect(self.task.spec_y, self.task.collect_mode_y, n, h, sy))
            self.seconds["collect"] += time.perf_counter() - t
        return self._full[seed]

    def prepared(self, size, seed):
        key = (size, seed)
        if key not in self._prepared:
            dx, dy = (d.head(size) for d in self._collect(seed))
            t = time.perf_counter()
            F = fm.train_forward(dy, replace(self.task.forward, seed=seed))
            self.seconds[("forward", size)] += time.perf_counter() - t
            self._prepared[key] = (dx, dy, F)
        return self._prepared[key]

    def report(self, kind, size=None):
        size = size or self.task.triples_x
        key = (kind, size)
        if key not in self._reports:
            prepared = {s: self.prepared(size, s) for s in self.seeds}
            t = time.perf_counter()
            self._reports[key] = transfer.run_baseline(kind, self.task, prepared=prepared)
            self.seconds[key] += time.perf_counter() - t
        return self._reports[key]

    def l1(self, kind, size=None):
        return list(self.report(kind, size).state_l1)


@pytest.fixture(scope="session")
def linear_study():
    return LinearStudy()


# ---------------------------------------------------------------------------
# one verdict line per acceptance criterion, echoed in the terminal summary

_VERDICTS = {}


@pytest.fixture
def verdict():
    def record(number, ok, detail):
        _VERDICTS[number] = (bool(ok), detail)
        assert ok, f"criterion {number}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        ok, detail = _VERDICTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
