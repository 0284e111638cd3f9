import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dense_align.diffusion import DiffusionPolicy, default_prompts, make_schedule, pretrain_base

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

DESK_SCHEDULE = (20, 0.01, 0.35)


@pytest.fixture(scope="session")
def prompts():
    return default_prompts()


@pytest.fixture(scope="session")
def desk_base(prompts):
    """Pretrained N=20 reference policy, shared by the trainer and acceptance tests."""
    sched = make_schedule(*DESK_SCHEDULE)
    init = DiffusionPolicy.create(sched, len(prompts), hidden=(64, 64), rng=np.random.default_rng([0, 100]))
    return pretrain_base(init, prompts, 3000, np.random.default_rng([0, 101]), batch_size=256, lr=2e-3).policy


@pytest.fixture(scope="session")
def tiny_base(prompts):
    """Small, briefly trained policy for fast trainer tests."""
    sched = make_schedule(6, 0.05, 0.5)
    init = DiffusionPolicy.create(sched, len(prompts), hidden=(16, 16), n_freqs=2,
                                  rng=np.random.default_rng(3))
    return pretrain_base(init, prompts, 200, np.random.default_rng(4), batch_size=128, lr=3e-3).policy


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if passed else 'FAIL'}  {detail}")
