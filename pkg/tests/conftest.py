import numpy as np
import pytest
from hypothesis import settings

from sparsevox.sparse_tensor import SparseTensor

settings.register_profile("ci", max_examples=50, deadline=None)
settings.load_profile("ci")


def random_sparse(rng, n_sites=40, grid=8, channels=2, batches=1, stride=1, dtype=np.float64):
    """Random tensor with unique sites on a ``grid``^3 lattice (scaled by ``stride``)."""
    cells = grid ** 3 * batches
    n_sites = min(n_sites, cells)
    flat = rng.choice(cells, size=n_sites, replace=False)
    b, rest = np.divmod(flat, grid ** 3)
    z, rest = np.divmod(rest, grid * grid)
    y, x = np.divmod(rest, grid)
    coords = np.stack([b, x * stride, y * stride, z * stride], axis=1)
    feats = rng.normal(size=(n_sites, channels)).astype(dtype)
    return SparseTensor(coords, feats, stride)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
