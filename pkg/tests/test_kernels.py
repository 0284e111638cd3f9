import os
import subprocess
import sys

import numpy as np
import pytest

from dense_align import _kernels_py as py
from dense_align import kernels
from dense_align.mdp import random_mdp

ext = pytest.importorskip("dense_align._kernels")


@pytest.mark.parametrize("seed", range(5))
def test_enumerate_agrees(seed):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, 5, 3, 4, all_initial=True)
    args = (mdp.transition, np.arange(5), 3, 4)
    for a, b in zip(py.enumerate_paths(*args), ext.enumerate_paths(*args)):
        assert np.array_equal(a, b)


@pytest.mark.parametrize("seed", range(5))
def test_path_sums_agree(seed):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, 4, 2, 5, all_initial=True)
    states, actions = py.enumerate_paths(mdp.transition, np.arange(4), 2, 5)
    values = rng.normal(size=(4, 2))
    assert np.allclose(py.discounted_path_sums(values, states, actions, 0.9),
                       ext.discounted_path_sums(values, states, actions, 0.9), rtol=1e-13, atol=1e-13)


def test_pair_gap_agrees():
    rng = np.random.default_rng(0)
    score, log_z, ratio = rng.normal(size=(3, 300))
    assert py.min_pairwise_gap(score, log_z, ratio, 2.0) == pytest.approx(
        ext.min_pairwise_gap(score, log_z, ratio, 2.0), abs=1e-13)


def test_readonly_inputs():
    mdp = random_mdp(np.random.default_rng(0), 3, 2, 2, all_initial=True)
    t = mdp.transition.copy()
    t.setflags(write=False)
    ext.enumerate_paths(t, np.arange(3), 2, 2)


def test_default_backend_is_compiled():
    if os.environ.get("DENSE_ALIGN_PURE", "") in ("", "0"):
        assert kernels.BACKEND == "compiled"


def test_pure_env_selects_fallback():
    env = dict(os.environ, DENSE_ALIGN_PURE="1")
    out = subprocess.run([sys.executable, "-c", "from dense_align import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
