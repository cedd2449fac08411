import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

from tace.geometry import Structure
from tace.model import TACE, ModelConfig


def random_rotation(rng, improper=False):
    R = Rotation.random(random_state=int(rng.integers(2**31))).as_matrix()
    return -R if improper else R


def random_cluster(rng, n=5, species=(1, 8), spread=1.6, min_dist=0.8):
    while True:
        pos = rng.normal(size=(n, 3)) * spread
        d = np.linalg.norm(pos[:, None] - pos[None], axis=-1) + np.eye(n) * 10
        if d.min() > min_dist:
            return Structure(pos, rng.choice(species, size=n))


def random_crystal(rng, n=4, species=(1, 8), a=4.0):
    cell = np.eye(3) * a + rng.normal(size=(3, 3)) * 0.3
    while True:
        frac = rng.uniform(size=(n, 3))
        pos = frac @ cell
        s = Structure(pos, rng.choice(species, size=n), cell=cell, pbc=True)
        from tace.geometry import build_neighbor_list

        nl = build_neighbor_list(s, 0.8)
        if len(nl) == 0:
            return s


def small_model(**kw):
    base = dict(species=(1, 8), l_max=2, edge_l_max=3, channels=8, radial_hidden=(16,), n_basis=6,
                cutoff=3.5, zero_init_readout=False, correlation=3)
    base.update(kw)
    return TACE(ModelConfig(**base))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_grad(fn, x, h=1e-4):
    """Test-side central differences at h and h/2, Richardson-combined."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)

    def central(step):
        g = np.zeros(flat.size)
        for k in range(flat.size):
            up, dn = flat.copy(), flat.copy()
            up[k] += step
            dn[k] -= step
            g[k] = (fn(up.reshape(x.shape)) - fn(dn.reshape(x.shape))) / (2 * step)
        return g.reshape(x.shape)

    return (4 * central(h / 2) - central(h)) / 3


def assert_fd_close(analytic, fd, rel=1e-6, floor=1e-8):
    analytic, fd = np.asarray(analytic), np.asarray(fd)
    err = float(np.max(np.abs(analytic - fd))) if fd.size else 0.0
    scale = float(np.max(np.abs(fd))) if fd.size else 0.0
    assert err <= rel * scale + floor, f"max error {err:.3e} vs scale {scale:.3e}"
    return err / max(scale, 1e-300)


# -- acceptance reporting ----------------------------------------------------------

ACCEPTANCE = {}


def report(number, passed, detail=""):
    ACCEPTANCE[number] = (bool(passed), detail)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
