"""Charge equilibration and latent Ewald summation.

Energies are in eV, distances in Angstrom, charges in e. The vacuum
permittivity enters through the Coulomb constant ``COULOMB``
(1/(4 pi eps0) in eV Angstrom / e^2).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
import torch

from .exceptions import GeometryError, PositivityError, WrongVariantError

COULOMB = 14.399645


@dataclass(frozen=True)
class LesConfig:
    sigma: float = 1.0
    kcut: float = math.pi
    coulomb: float = COULOMB

    def __post_init__(self):
        if self.sigma <= 0 or self.kcut <= 0:
            raise ValueError("LES sigma and kcut must be positive")


def _segment_sum(values: torch.Tensor, index: torch.Tensor, n: int) -> torch.Tensor:
    out = torch.zeros((n,) + values.shape[1:], dtype=values.dtype, device=values.device)
    return out.index_add(0, index, values)


def qeq_charges(chi, eta, total_charge, batch=None, n_graphs=None):
    """Charges minimising the QEq energy under sum(Q) = total charge, per graph.

    ``Q_i = ((Q_tot + sum chi/eta) / sum 1/eta - chi_i) / eta_i``
    """
    chi = torch.as_tensor(chi, dtype=torch.float64)
    eta = torch.as_tensor(eta, dtype=torch.float64)
    if torch.any(eta <= 0):
        raise PositivityError("hardness must be strictly positive")
    if batch is None:
        batch = torch.zeros(chi.shape[0], dtype=torch.long)
        n_graphs = 1
    total_charge = torch.as_tensor(total_charge, dtype=chi.dtype).reshape(-1)
    inv_eta = 1.0 / eta
    sum_inv = _segment_sum(inv_eta, batch, n_graphs)
    sum_chi = _segment_sum(chi * inv_eta, batch, n_graphs)
    mu = (total_charge + sum_chi) / sum_inv
    return (mu[batch] - chi) * inv_eta


def redistribute_charges(q, total_charge, batch=None, n_graphs=None):
    """Spread the surplus ``sum(q) - Q_tot`` uniformly over the atoms of each graph."""
    q = torch.as_tensor(q, dtype=torch.float64)
    if batch is None:
        batch = torch.zeros(q.shape[0], dtype=torch.long)
        n_graphs = 1
    total_charge = torch.as_tensor(total_charge, dtype=q.dtype).reshape(-1)
    counts = _segment_sum(torch.ones_like(q), batch, n_graphs)
    surplus = _segment_sum(q, batch, n_graphs) - total_charge
    return q - (surplus / counts)[batch]


def kvector_indices(cell: np.ndarray, kcut: float) -> np.ndarray:
    """Integer triples ``n`` with ``0 < |n @ B| < kcut`` where ``B = 2 pi inv(cell).T``."""
    cell = np.asarray(cell, dtype=np.float64)
    recip = 2.0 * math.pi * np.linalg.inv(cell).T
    # |k . a_j| = 2 pi |n_j| and |k . a_j| <= |k| |a_j|
    bounds = [int(math.floor(kcut * np.linalg.norm(a) / (2.0 * math.pi))) for a in cell]
    grids = np.meshgrid(*[np.arange(-b, b + 1) for b in bounds], indexing="ij")
    n = np.stack([g.ravel() for g in grids], axis=1)
    k = n @ recip
    norm = np.linalg.norm(k, axis=1)
    keep = (norm > 0) & (norm < kcut)
    return n[keep].astype(np.int64)


def les_energy_periodic(positions, cell, q, cfg: LesConfig = LesConfig(), pbc=(True, True, True)) -> torch.Tensor:
    """Smeared reciprocal-space energy ``1/(2 eps0 V) sum_k exp(-sigma^2 k^2/2)/k^2 |S(k)|^2``."""
    if not all(pbc):
        raise WrongVariantError("periodic LES needs a fully periodic cell; use les_energy_finite")
    positions = torch.as_tensor(positions, dtype=torch.float64)
    cell = torch.as_tensor(cell, dtype=torch.float64)
    q = torch.as_tensor(q, dtype=torch.float64)
    n = torch.as_tensor(kvector_indices(cell.detach().cpu().numpy(), cfg.kcut), dtype=positions.dtype)
    if n.shape[0] == 0:
        return (q * 0.0).sum()
    recip = 2.0 * math.pi * torch.linalg.inv(cell).transpose(0, 1)
    k = n @ recip
    k2 = (k * k).sum(-1)
    phase = positions @ k.transpose(0, 1)
    re = (q.unsqueeze(-1) * torch.cos(phase)).sum(0)
    im = (q.unsqueeze(-1) * torch.sin(phase)).sum(0)
    volume = torch.abs(torch.linalg.det(cell))
    weight = torch.exp(-0.5 * cfg.sigma**2 * k2) / k2
    # 1/(2 eps0 V) = 2 pi k_e / V
    return 2.0 * math.pi * cfg.coulomb / volume * (weight * (re * re + im * im)).sum()


def les_energy_finite(positions, q, cfg: LesConfig = LesConfig()) -> torch.Tensor:
    """``1/2 k_e sum_{i != j} erf(r_ij / (sqrt(2) sigma)) q_i q_j / r_ij``."""
    positions = torch.as_tensor(positions, dtype=torch.float64)
    q = torch.as_tensor(q, dtype=torch.float64)
    n = positions.shape[0]
    if n < 2:
        return (q * 0.0).sum()
    i, j = torch.triu_indices(n, n, offset=1)
    r = torch.linalg.norm(positions[j] - positions[i], dim=-1)
    if torch.any(r < 1e-8):
        raise GeometryError("coincident atoms in finite LES sum")
    screened = torch.special.erf(r / (math.sqrt(2.0) * cfg.sigma)) / r
    return cfg.coulomb * (screened * q[i] * q[j]).sum()


def les_energy_periodic_reference(positions, cell, q, sigma=1.0, kcut=math.pi, coulomb=COULOMB) -> float:
    """Plain-loop k-sum over a generous integer box; slow, for cross-checks only."""
    positions = np.asarray(positions, dtype=float)
    cell = np.asarray(cell, dtype=float)
    q = np.asarray(q, dtype=float)
    recip = 2.0 * math.pi * np.linalg.inv(cell).T
    box = [int(math.ceil(kcut * np.linalg.norm(a) / (2.0 * math.pi))) + 1 for a in cell]
    volume = abs(np.linalg.det(cell))
    total = 0.0
    for n in itertools.product(*[range(-b, b + 1) for b in box]):
        k = n[0] * recip[0] + n[1] * recip[1] + n[2] * recip[2]
        k2 = float(k @ k)
        if k2 == 0.0 or math.sqrt(k2) >= kcut:
            continue
        re = sum(qi * math.cos(float(k @ r)) for qi, r in zip(q, positions))
        im = sum(qi * math.sin(float(k @ r)) for qi, r in zip(q, positions))
        total += math.exp(-0.5 * sigma**2 * k2) / k2 * (re * re + im * im)
    return 2.0 * math.pi * coulomb / volume * total
