"""Synthetic Lennard-Jones clusters with analytic energies and forces."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from .geometry import LabeledFrame, Structure


@dataclass(frozen=True)
class LennardJones:
    epsilon: float = 0.1
    sigma: float = 2.5

    def energy_forces(self, positions: np.ndarray):
        pos = np.asarray(positions, dtype=np.float64)
        n = len(pos)
        energy = 0.0
        forces = np.zeros_like(pos)
        for i in range(n):
            for j in range(i + 1, n):
                d = pos[j] - pos[i]
                r = float(np.linalg.norm(d))
                s6 = (self.sigma / r) ** 6
                energy += 4.0 * self.epsilon * (s6 * s6 - s6)
                # dE/dr
                dedr = 4.0 * self.epsilon * (-12.0 * s6 * s6 + 6.0 * s6) / r
                forces[i] += dedr * d / r
                forces[j] -= dedr * d / r
        return energy, forces

    def label(self, structure: Structure) -> LabeledFrame:
        e, f = self.energy_forces(structure.positions)
        return LabeledFrame(structure=structure, energy=e, forces=f)


def random_clusters(n_frames: int, species: int = 18, r_min: float = 2.6, r_max: float = 4.2, seed: int = 0,
                    trimer_fraction: float = 0.5) -> List[Structure]:
    """Dimers and trimers whose pair distances all lie in ``[r_min, r_max]``."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n_frames:
        n = 3 if rng.random() < trimer_fraction else 2
        pos = np.zeros((n, 3))
        pos[1] = rng.normal(size=3)
        pos[1] *= rng.uniform(r_min, r_max) / np.linalg.norm(pos[1])
        if n == 3:
            d = rng.normal(size=3)
            pos[2] = pos[0] + d / np.linalg.norm(d) * rng.uniform(r_min, r_max)
            r12 = np.linalg.norm(pos[2] - pos[1])
            if not r_min <= r12 <= r_max:
                continue
        out.append(Structure(pos, [species] * n))
    return out


def lj_dataset(n_frames: int = 20, epsilon: float = 0.1, sigma: float = 2.5, seed: int = 0, **kwargs) -> List[LabeledFrame]:
    lj = LennardJones(epsilon, sigma)
    return [lj.label(s) for s in random_clusters(n_frames, seed=seed, **kwargs)]


def multi_fidelity_lj(n_frames: int = 20, epsilon: float = 0.1, ratio: float = 1.1, sigma: float = 2.5,
                      seed: int = 0, **kwargs) -> List[LabeledFrame]:
    """The same geometries labeled twice: fidelity 0 with ``epsilon``, fidelity 1 with ``ratio * epsilon``."""
    structures = random_clusters(n_frames, seed=seed, **kwargs)
    frames = []
    for fid, eps in ((0, epsilon), (1, ratio * epsilon)):
        lj = LennardJones(eps, sigma)
        for s in structures:
            frames.append(lj.label(s.copy(fidelity=fid)))
    return frames
