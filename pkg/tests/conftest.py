import numpy as np
import pytest

from topo3d.domain import Load, ProblemSpec, build_domain


@pytest.fixture
def tiny_domain():
    return build_domain(2, 2, 2, 2.0, 2.0, 2.0)


@pytest.fixture
def beam_domain():
    return build_domain(6, 3, 3, 2.0, 1.0, 1.0)


def make_problem(domain, seed=0, vf=0.3, bc_case=1):
    rng = np.random.default_rng(seed)
    d = rng.random(3) + 0.1
    d /= np.linalg.norm(d)
    load = Load((1.0, 0.5, 0.5), tuple(d), -1.0)
    return ProblemSpec(domain, vf, (load,), bc_case, seed)
