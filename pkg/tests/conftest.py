import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from lcrl.model import (Alternative, ClassParams, PanelDataset, Respondent, Trial,
                        route_choice_alternatives)


def make_dataset(n_resp=3, n_trials=5, seed=0, covariates=("const", "x1"), alternatives=None,
                 polarity="cost"):
    """Random small panel: contexts alternate in blocks, choices and feedback uniform."""
    alts = alternatives or route_choice_alternatives()
    rng = np.random.default_rng(seed)
    resp = []
    for n in range(n_resp):
        trials = []
        for t in range(n_trials):
            ctx = "DS" if (t < n_trials // 2) == (n % 2 == 0) else "SP"
            trials.append(Trial(t + 1, ctx, int(rng.integers(1, len(alts) + 1)),
                                float(rng.choice([2.0, 5.0, 7.0]))))
        x = (1.0,) + tuple(float(rng.integers(0, 2)) for _ in covariates[1:])
        resp.append(Respondent(f"r{n + 1}", x, tuple(trials)))
    return PanelDataset(tuple(alts), tuple(resp), polarity, tuple(covariates))


def random_class(alts, rng):
    return ClassParams.build(alts, gamma_ds=rng.normal(0, 1, 1), gamma_sp_shift=rng.normal(0, 1, 1),
                             beta_ds=rng.uniform(0.1, 2), beta_sp=rng.uniform(0.1, 2),
                             alpha=rng.uniform(0.05, 0.95), q0=[rng.uniform(2, 7)])


def oracle_class(p):
    return dict(gamma_ds=list(p.gamma_ds), gamma_sp_shift=list(p.gamma_sp_shift), beta_ds=p.beta_ds,
                beta_sp=p.beta_sp, alpha=p.alpha, q0=list(p.q0))


def oracle_respondents(ds):
    return [(list(r.covariates), [(t.context, t.chosen, t.feedback) for t in r.trials])
            for r in ds.respondents]


@pytest.fixture
def alts():
    return route_choice_alternatives()


@pytest.fixture
def small_dataset():
    return make_dataset()


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance.RESULTS, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
