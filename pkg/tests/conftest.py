import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from segqc.volume import LabelVolume, McSampleSet, ProbStack

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def label_volume(values, dims=None, num_classes=None) -> LabelVolume:
    """Label volume from a flat list; dims default to (len, 1, 1)."""
    arr = np.asarray(values, dtype=np.int64)
    dims = dims or (arr.size, 1, 1)
    num_classes = num_classes or max(2, int(arr.max()) + 1)
    return LabelVolume(arr.reshape(dims), num_classes)


def prob_stack(per_voxel) -> ProbStack:
    """Stack from a (n_voxels, C) table of class probabilities laid along x."""
    p = np.asarray(per_voxel, dtype=np.float64)
    return ProbStack(p.T.reshape(p.shape[1], p.shape[0], 1, 1))


def one_hot(labels: LabelVolume) -> ProbStack:
    data = (np.arange(labels.num_classes)[:, None, None, None] == labels.data[None]).astype(np.float32)
    return ProbStack(data)


def random_probs(rng: np.random.Generator, n: int, c: int, dims=(4, 3, 2), concentration=0.5) -> McSampleSet:
    stacks = []
    for _ in range(n):
        p = rng.dirichlet(np.full(c, concentration), size=dims)  # (X, Y, Z, C)
        stacks.append(ProbStack(np.moveaxis(p, -1, 0)))
    return McSampleSet.from_probs(stacks)


@st.composite
def label_sample_sets(draw, max_n=6, min_n=2, dims=(8, 8, 8), max_classes=4):
    """Random label-only sample sets, correlated so structures overlap often."""
    n = draw(st.integers(min_n, max_n))
    c = draw(st.integers(2, max_classes))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    base = rng.integers(0, c, size=dims)
    flip = draw(st.floats(0.0, 0.6))
    vols = []
    for _ in range(n):
        lab = base.copy()
        m = rng.random(dims) < flip
        lab[m] = rng.integers(0, c, size=int(m.sum()))
        vols.append(LabelVolume(lab, c))
    return McSampleSet.from_labels(vols)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
