import numpy as np
import pytest

from elasticdtn import dtn as dtn_mod
from elasticdtn.material import ParamVector, PriorData, reference_tensor
from elasticdtn.mesh import build_block_mesh, two_block_blocks
from elasticdtn.solver import admissible_frequency_bound, smallest_dirichlet_eigenvalue

# every DtN operator assembled during the session, as (mesh_id, asymmetry)
ASYMMETRY_LOG: list[tuple[str, float]] = []
# acceptance lines collected for the terminal summary
ACCEPTANCE_LINES: list[str] = []

_orig_post_init = dtn_mod.DtnOperator.__post_init__


def _recording_post_init(self):
    _orig_post_init(self)
    if self.solutions is not None:
        ASYMMETRY_LOG.append((self.mesh_id, self.asymmetry))


dtn_mod.DtnOperator.__post_init__ = _recording_post_init


def pytest_collection_modifyitems(config, items):
    # the suite-wide symmetry criterion must see every operator, so it runs last
    last = [it for it in items if "run_last" in it.keywords]
    rest = [it for it in items if "run_last" not in it.keywords]
    items[:] = rest + last


def pytest_configure(config):
    config.addinivalue_line("markers", "run_last: execute after every other test")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def prior():
    return PriorData()


@pytest.fixture(scope="session")
def prior2(prior):
    return prior.with_n(2)


@pytest.fixture(scope="session")
def truth2():
    return ParamVector.from_parts([1.0, 0.6], [1.0, 1.5], [1.0, 1.5])


@pytest.fixture(scope="session")
def mesh_x8():
    """Unit cube, 8^3 cells, split at x = 0.5; both halves touch the top patch."""
    return build_block_mesh(8, 8, 8, two_block_blocks(axis=0))


@pytest.fixture(scope="session")
def mesh_z4():
    return build_block_mesh(4, 4, 4, two_block_blocks(axis=2))


@pytest.fixture(scope="session")
def mesh_x4():
    return build_block_mesh(4, 4, 4, two_block_blocks(axis=0))


@pytest.fixture(scope="session")
def omega_max_x8(mesh_x8, prior):
    lam1 = smallest_dirichlet_eigenvalue(mesh_x8, reference_tensor(prior))
    return admissible_frequency_bound(prior, lam1)


@pytest.fixture(scope="session")
def omega_max_x4(mesh_x4, prior):
    lam1 = smallest_dirichlet_eigenvalue(mesh_x4, reference_tensor(prior))
    return admissible_frequency_bound(prior, lam1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
