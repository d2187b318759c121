from __future__ import annotations

import numpy as np
import pytest

from metcross.data import FlowPanel, StationSet
from metcross.synth import SynthSpec, generate


def make_panel(values, city="c", granularity=10, start="2020-01-01T00:00", prefix="s"):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[None, :]
    ids = tuple(f"{prefix}{i}" for i in range(values.shape[0]))
    ts = np.datetime64(start, "m") + np.arange(values.shape[1]) * np.timedelta64(granularity, "m")
    return FlowPanel(StationSet(city, ids), granularity, ts, values)


@pytest.fixture(scope="session")
def tiny_pair():
    """A small synthetic city pair that trains in well under a second."""
    return generate(SynthSpec(S=8, G=5, days=6, granularity_minutes=60, seed=4))


@pytest.fixture(scope="session")
def tiny_task(tiny_pair):
    from metcross.experiment import prepare_task
    return prepare_task(tiny_pair.source.city, tiny_pair.target.city, train_days=3, test_days=2)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.REPORT:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(mod.REPORT):
        tr.write_line(mod.REPORT[n])
    if mod.SWEEP:
        tr.write_line("")
        names = list(next(iter(mod.SWEEP.values())))
        tr.write_line("seed  " + "  ".join(f"{n:>9}" for n in names) + "   (test MAE)")
        for seed, row in sorted(mod.SWEEP.items()):
            tr.write_line(f"{seed:>4}  " + "  ".join(f"{row[n][0]:9.4f}" for n in names))
