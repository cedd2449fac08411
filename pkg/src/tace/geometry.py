"""Structures, training frames and neighbor lists."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .exceptions import GeometryError, InvalidCellError, ShapeError

logger = logging.getLogger(__name__)

BRUTE_FORCE_LIMIT = 64


@dataclass
class Structure:
    """Atoms, cell and the optional attributes consumed by universal embeddings.

    Lengths are in Angstrom, charges in e, fields in V/Angstrom and magnetic
    moments in Bohr magnetons. Collinear moments are stored lifted to
    ``(0, 0, m)`` with ``collinear=True``.
    """

    positions: np.ndarray
    numbers: np.ndarray
    cell: Optional[np.ndarray] = None
    pbc: Tuple[bool, bool, bool] = (False, False, False)
    charges: Optional[np.ndarray] = None
    magmoms: Optional[np.ndarray] = None
    collinear: bool = False
    total_charge: Optional[float] = None
    external_field: Optional[np.ndarray] = None
    fidelity: Optional[int] = None
    info: Dict[str, str] = field(default_factory=dict)
    arrays: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.numbers = np.asarray(self.numbers, dtype=np.int64).reshape(-1)
        n = len(self.positions)
        if len(self.numbers) != n:
            raise ShapeError(f"{len(self.numbers)} species for {n} positions")
        if np.any(self.numbers <= 0):
            raise ShapeError("species must be positive atomic numbers")
        self.pbc = tuple(bool(p) for p in np.broadcast_to(np.asarray(self.pbc, dtype=bool), (3,)))
        if self.cell is not None:
            self.cell = np.asarray(self.cell, dtype=np.float64).reshape(3, 3)
        if any(self.pbc):
            if self.cell is None or abs(np.linalg.det(self.cell)) <= 1e-10:
                raise InvalidCellError("periodic structure needs a non-singular cell (|det| > 1e-10)")
        if self.charges is not None:
            self.charges = np.asarray(self.charges, dtype=np.float64).reshape(n)
        if self.magmoms is not None:
            m = np.asarray(self.magmoms, dtype=np.float64)
            if m.ndim == 1:
                lifted = np.zeros((n, 3))
                lifted[:, 2] = m
                m, self.collinear = lifted, True
            self.magmoms = m.reshape(n, 3)
        if self.external_field is not None:
            self.external_field = np.asarray(self.external_field, dtype=np.float64).reshape(3)
        if self.total_charge is not None:
            self.total_charge = float(self.total_charge)
        if self.fidelity is not None:
            self.fidelity = int(self.fidelity)

    def __len__(self):
        return len(self.positions)

    @property
    def is_periodic(self) -> bool:
        return any(self.pbc)

    @property
    def volume(self) -> float:
        if self.cell is None:
            raise InvalidCellError("structure has no cell")
        return float(abs(np.linalg.det(self.cell)))

    def copy(self, **changes) -> "Structure":
        fields = {
            "positions": self.positions.copy(),
            "numbers": self.numbers.copy(),
            "cell": None if self.cell is None else self.cell.copy(),
            "charges": None if self.charges is None else self.charges.copy(),
            "magmoms": None if self.magmoms is None else self.magmoms.copy(),
            "external_field": None if self.external_field is None else self.external_field.copy(),
            "info": dict(self.info),
            "arrays": {k: v.copy() for k, v in self.arrays.items()},
        }
        fields.update(changes)
        return replace(self, **fields)


LABEL_KEYS = (
    "energy",
    "forces",
    "virial",
    "charges",
    "magnetic_forces",
    "dipole",
    "polarization",
    "polarizability",
    "electric_enthalpy",
)


@dataclass
class LabeledFrame:
    structure: Structure
    energy: Optional[float] = None
    forces: Optional[np.ndarray] = None
    virial: Optional[np.ndarray] = None
    charges: Optional[np.ndarray] = None
    magnetic_forces: Optional[np.ndarray] = None
    dipole: Optional[np.ndarray] = None
    polarization: Optional[np.ndarray] = None
    polarizability: Optional[np.ndarray] = None
    electric_enthalpy: Optional[float] = None

    def __post_init__(self):
        n = len(self.structure)
        for name in ("forces", "magnetic_forces"):
            val = getattr(self, name)
            if val is not None:
                val = np.asarray(val, dtype=np.float64)
                if val.shape != (n, 3):
                    raise ShapeError(f"{name} must have shape ({n}, 3), got {val.shape}")
                setattr(self, name, val)
        if self.charges is not None:
            self.charges = np.asarray(self.charges, dtype=np.float64).reshape(n)
        for name in ("dipole", "polarization"):
            val = getattr(self, name)
            if val is not None:
                setattr(self, name, np.asarray(val, dtype=np.float64).reshape(3))
        if self.virial is not None:
            self.virial = np.asarray(self.virial, dtype=np.float64).reshape(3, 3)
        if self.polarizability is not None:
            alpha = np.asarray(self.polarizability, dtype=np.float64).reshape(3, 3)
            asym = float(np.linalg.norm(alpha - alpha.T))
            if asym > 0.0:
                logger.info("symmetrizing polarizability label (asymmetry norm %.3e)", asym)
            self.polarizability = 0.5 * (alpha + alpha.T)
        if self.energy is not None:
            self.energy = float(self.energy)
        if self.electric_enthalpy is not None:
            self.electric_enthalpy = float(self.electric_enthalpy)

    def has(self, label: str) -> bool:
        return getattr(self, label) is not None


@dataclass
class NeighborList:
    """Directed edges ``i <- j``: vector ``r_j + shift @ cell - r_i``."""

    receivers: np.ndarray
    senders: np.ndarray
    shifts: np.ndarray
    cutoff: float
    n_atoms: int

    @property
    def edges(self):
        return [
            (int(i), int(j), tuple(int(s) for s in sh))
            for i, j, sh in zip(self.receivers, self.senders, self.shifts)
        ]

    def __len__(self):
        return len(self.receivers)

    @property
    def avg_neighbors(self) -> float:
        return len(self.receivers) / self.n_atoms if self.n_atoms else 0.0


def _image_ranges(structure: Structure, cutoff: float) -> np.ndarray:
    if not structure.is_periodic:
        return np.zeros((1, 3), dtype=np.int64)
    cell = structure.cell
    inv = np.linalg.inv(cell)
    # distance between lattice planes spanned by the other two vectors
    heights = 1.0 / np.linalg.norm(inv, axis=0)
    reach = [int(math.ceil(cutoff / h)) + 1 if p else 0 for h, p in zip(heights, structure.pbc)]
    grids = np.meshgrid(*[np.arange(-r, r + 1) for r in reach], indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1).astype(np.int64)


def _wrap(structure: Structure):
    """Positions wrapped into the cell along periodic axes plus the integer offsets removed."""
    pos = structure.positions
    if not structure.is_periodic:
        return pos, np.zeros((len(pos), 3), dtype=np.int64)
    frac = pos @ np.linalg.inv(structure.cell)
    offsets = np.floor(frac).astype(np.int64)
    offsets[:, ~np.asarray(structure.pbc)] = 0
    return pos - offsets @ structure.cell, offsets


def _finalize(recv, send, shifts, offsets, cutoff, n):
    # express shifts w.r.t. the caller's (unwrapped) positions
    shifts = shifts - offsets[send] + offsets[recv]
    order = np.lexsort((shifts[:, 2], shifts[:, 1], shifts[:, 0], send, recv))
    return NeighborList(recv[order], send[order], shifts[order], float(cutoff), n)


def _brute_force(structure: Structure, cutoff: float) -> NeighborList:
    pos, offsets = _wrap(structure)
    n = len(pos)
    images = _image_ranges(structure, cutoff)
    cell = structure.cell if structure.cell is not None else np.zeros((3, 3))
    recv, send, shifts = [], [], []
    for shift in images:
        disp = pos[None, :, :] + (shift @ cell)[None, None, :] - pos[:, None, :]
        dist = np.linalg.norm(disp, axis=-1)
        mask = dist <= cutoff
        if not shift.any():
            np.fill_diagonal(mask, False)
        i, j = np.nonzero(mask)
        recv.append(i)
        send.append(j)
        shifts.append(np.repeat(shift[None, :], len(i), axis=0))
    recv = np.concatenate(recv).astype(np.int64)
    send = np.concatenate(send).astype(np.int64)
    shifts = np.concatenate(shifts).astype(np.int64).reshape(-1, 3)
    return _finalize(recv, send, shifts, offsets, cutoff, n)


def _tree_search(structure: Structure, cutoff: float) -> NeighborList:
    pos, offsets = _wrap(structure)
    n = len(pos)
    images = _image_ranges(structure, cutoff)
    cell = structure.cell if structure.cell is not None else np.zeros((3, 3))
    image_pos = (pos[None, :, :] + (images @ cell)[:, None, :]).reshape(-1, 3)
    tree = cKDTree(image_pos)
    hits = tree.query_ball_point(pos, r=cutoff)
    recv, flat = [], []
    for i, idx in enumerate(hits):
        recv.extend([i] * len(idx))
        flat.extend(idx)
    recv = np.asarray(recv, dtype=np.int64)
    flat = np.asarray(flat, dtype=np.int64)
    send = flat % n
    shifts = images[flat // n]
    keep = ~((send == recv) & ~shifts.any(axis=1))
    return _finalize(recv[keep], send[keep], shifts[keep].reshape(-1, 3), offsets, cutoff, n)


def build_neighbor_list(structure: Structure, cutoff: float, method: str = "auto") -> NeighborList:
    """All directed pairs within ``cutoff`` (inclusive), periodic images included.

    ``method`` is ``"brute"``, ``"tree"`` or ``"auto"`` (brute force below
    64 atoms). Edges are sorted by ``(i, j, shift)``.
    """
    if cutoff <= 0:
        raise GeometryError(f"cutoff must be positive, got {cutoff}")
    if structure.is_periodic and (structure.cell is None or abs(np.linalg.det(structure.cell)) <= 1e-10):
        raise InvalidCellError("periodic structure needs a non-singular cell")
    if len(structure) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return NeighborList(empty, empty, np.zeros((0, 3), dtype=np.int64), float(cutoff), 0)
    if method == "auto":
        method = "brute" if len(structure) < BRUTE_FORCE_LIMIT else "tree"
    if method == "brute":
        return _brute_force(structure, cutoff)
    if method == "tree":
        return _tree_search(structure, cutoff)
    raise ValueError(f"unknown neighbor search method {method!r}")
