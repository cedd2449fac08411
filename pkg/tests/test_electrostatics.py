import itertools
import math

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from tace.electrostatics import (COULOMB, LesConfig, les_energy_finite, les_energy_periodic,
                                 les_energy_periodic_reference, qeq_charges, redistribute_charges)
from tace.exceptions import GeometryError, PositivityError, WrongVariantError


def _pairwise_ksum(pos, cell, q, sigma, kcut):
    """|S(k)|^2 expanded as sum_ij q_i q_j cos(k.(r_i - r_j)); own k enumeration."""
    recip = 2 * np.pi * np.linalg.inv(cell).T
    reach = int(np.ceil(kcut / np.min(np.linalg.norm(recip, axis=1)))) + 2
    rng_ = range(-reach, reach + 1)
    n = np.array(list(itertools.product(rng_, rng_, rng_)), dtype=float)
    k = n @ recip
    kn = np.linalg.norm(k, axis=1)
    k = k[(kn > 0) & (kn < kcut)]
    k2 = np.einsum("ka,ka->k", k, k)
    diff = pos[:, None, :] - pos[None, :, :]
    s2 = np.einsum("i,j,kij->k", q, q, np.cos(np.einsum("ka,ija->kij", k, diff)))
    vol = abs(np.linalg.det(cell))
    return float(np.sum(np.exp(-0.5 * sigma**2 * k2) / k2 * s2) * 2 * np.pi * COULOMB / vol)


def _random_cell(rng):
    n = int(rng.integers(1, 9))
    cell = np.diag(rng.uniform(3.0, 7.0, 3)) + rng.normal(size=(3, 3)) * 0.5
    pos = rng.uniform(size=(n, 3)) @ cell
    q = rng.normal(size=n)
    return pos, cell, q


@pytest.mark.parametrize("seed", range(20))
def test_periodic_les_matches_independent_ksum(seed):
    rng = np.random.default_rng(seed)
    pos, cell, q = _random_cell(rng)
    sigma = float(rng.uniform(0.5, 1.5))
    ref = _pairwise_ksum(pos, cell, q, sigma, math.pi)
    got = float(les_energy_periodic(pos, cell, q, LesConfig(sigma=sigma)))
    assert got == pytest.approx(ref, rel=1e-10, abs=1e-14)
    assert les_energy_periodic_reference(pos, cell, q, sigma=sigma) == pytest.approx(ref, rel=1e-10, abs=1e-14)


def test_periodic_les_single_atom_and_zero_charges():
    cell = np.eye(3) * 10.0
    pos = np.array([[1.0, 2.0, 3.0]])
    ref = _pairwise_ksum(pos, cell, np.ones(1), 1.0, math.pi)
    assert float(les_energy_periodic(pos, cell, [1.0])) == pytest.approx(ref, rel=1e-10)
    assert float(les_energy_periodic(pos, cell, [0.0])) == 0.0


def test_periodic_les_translation_invariant(rng):
    pos, cell, q = _random_cell(rng)
    e0 = float(les_energy_periodic(pos, cell, q))
    e1 = float(les_energy_periodic(pos + rng.normal(size=3), cell, q))
    assert abs(e0 - e1) <= 1e-12 * max(abs(e0), 1.0)


def test_periodic_les_rejects_partial_pbc():
    with pytest.raises(WrongVariantError):
        les_energy_periodic(np.zeros((1, 3)), np.eye(3) * 5, [1.0], pbc=(True, True, False))


def _erf_pair(r, qi, qj, sigma):
    return float(COULOMB * mpmath.erf(mpmath.mpf(r) / (mpmath.sqrt(2) * sigma)) * qi * qj / r)


def test_finite_les_examples():
    pos = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    e = float(les_energy_finite(pos, [1.0, 1.0]))
    assert e == pytest.approx(_erf_pair(1.0, 1, 1, 1.0), rel=1e-12)
    assert e == pytest.approx(9.8305, abs=1e-4)
    far = np.array([[0.0, 0, 0], [1e4, 0, 0]])
    assert float(les_energy_finite(far, [1.0, -1.0])) == pytest.approx(-COULOMB / 1e4, rel=1e-6)
    assert float(les_energy_finite(np.zeros((1, 3)), [2.0])) == 0.0
    with pytest.raises(GeometryError):
        les_energy_finite(np.zeros((2, 3)), [1.0, 1.0])


@settings(max_examples=200, deadline=None)
@given(r=st.floats(1e-3, 50.0), qi=st.floats(-3, 3), qj=st.floats(-3, 3), sigma=st.floats(0.2, 3.0))
def test_finite_les_pair_closed_form(r, qi, qj, sigma):
    pos = np.array([[0.0, 0.0, 0.0], [r, 0.0, 0.0]])
    got = float(les_energy_finite(pos, [qi, qj], LesConfig(sigma=sigma)))
    assert got == pytest.approx(_erf_pair(r, qi, qj, sigma), rel=1e-12, abs=1e-300)


def test_finite_les_matches_pair_sum(rng):
    pos = rng.normal(size=(6, 3)) * 2
    q = rng.normal(size=6)
    ref = sum(_erf_pair(np.linalg.norm(pos[i] - pos[j]), q[i], q[j], 1.0)
              for i in range(6) for j in range(i + 1, 6))
    assert float(les_energy_finite(pos, q)) == pytest.approx(ref, rel=1e-12)


def test_qeq_examples():
    np.testing.assert_allclose(qeq_charges([0.0, 0.0], [1.0, 1.0], 1.0), [0.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(qeq_charges([0.5, -0.5], [1.0, 1.0], 0.0), [-0.5, 0.5], atol=1e-15)
    with pytest.raises(PositivityError):
        qeq_charges([0.0, 0.0], [1.0, 0.0], 0.0)


def test_qeq_conservation_1000_draws():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        n = int(rng.integers(1, 20))
        chi = rng.normal(size=n) * 3
        eta = rng.uniform(0.05, 5.0, n)
        qtot = float(rng.integers(-3, 4))
        q = qeq_charges(chi, eta, qtot)
        assert abs(float(q.sum()) - qtot) <= 1e-12
        shifted = qeq_charges(chi + rng.normal(), eta, qtot)
        assert float((shifted - q).abs().max()) <= 1e-12 * max(1.0, float(q.abs().max()))


def test_qeq_batched_graphs():
    chi = torch.tensor([0.1, -0.2, 0.3, 0.0, 0.5], dtype=torch.float64)
    eta = torch.tensor([1.0, 2.0, 0.5, 1.0, 3.0], dtype=torch.float64)
    batch = torch.tensor([0, 0, 1, 1, 1])
    q = qeq_charges(chi, eta, torch.tensor([1.0, -1.0]), batch, 2)
    torch.testing.assert_close(q[:2], qeq_charges(chi[:2], eta[:2], 1.0))
    torch.testing.assert_close(q[2:], qeq_charges(chi[2:], eta[2:], -1.0))


def test_redistribution():
    q = redistribute_charges([0.3, 0.3, 0.6], 0.0)
    assert float(q.sum()) == pytest.approx(0.0, abs=1e-15)
    np.testing.assert_allclose(q, [-0.1, -0.1, 0.2], atol=1e-15)


def test_les_config_validation():
    with pytest.raises(ValueError):
        LesConfig(sigma=0)
    with pytest.raises(ValueError):
        LesConfig(kcut=-1)
