"""Concatenate structures into one disconnected graph for a forward pass."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch

from .geometry import NeighborList, Structure, build_neighbor_list


@dataclass
class GraphBatch:
    positions: torch.Tensor
    species: torch.Tensor
    batch: torch.Tensor
    natoms: torch.Tensor
    cell: torch.Tensor
    pbc: torch.Tensor
    receivers: torch.Tensor
    senders: torch.Tensor
    shifts: torch.Tensor
    edge_graph: torch.Tensor
    total_charge: torch.Tensor
    fidelity: Optional[torch.Tensor] = None
    external_field: Optional[torch.Tensor] = None
    magmoms: Optional[torch.Tensor] = None
    charges: Optional[torch.Tensor] = None
    collinear: Optional[torch.Tensor] = None
    strain: Optional[torch.Tensor] = None

    @property
    def n_graphs(self) -> int:
        return int(self.natoms.shape[0])

    @property
    def periodic(self) -> torch.Tensor:
        return self.pbc.all(dim=-1)

    @property
    def n_atoms(self) -> int:
        return int(self.positions.shape[0])

    def clone(self) -> "GraphBatch":
        kwargs = {}
        for f in fields(self):
            v = getattr(self, f.name)
            kwargs[f.name] = v.detach().clone() if torch.is_tensor(v) else v
        return GraphBatch(**kwargs)


def collate(
    structures: Sequence[Structure],
    species_index: Callable[[np.ndarray], np.ndarray],
    cutoff: float,
    neighbor_lists: Optional[Sequence[NeighborList]] = None,
) -> GraphBatch:
    if neighbor_lists is None:
        neighbor_lists = [build_neighbor_list(s, cutoff) for s in structures]
    pos, spec, batch, cells, pbc = [], [], [], [], []
    recv, send, shifts, egraph = [], [], [], []
    offset = 0
    for g, (s, nl) in enumerate(zip(structures, neighbor_lists)):
        n = len(s)
        pos.append(s.positions)
        spec.append(species_index(s.numbers))
        batch.append(np.full(n, g, dtype=np.int64))
        cells.append(s.cell if s.cell is not None and s.is_periodic else np.zeros((3, 3)))
        pbc.append(s.pbc)
        recv.append(nl.receivers + offset)
        send.append(nl.senders + offset)
        shifts.append(nl.shifts.astype(np.float64) * np.asarray(s.pbc, dtype=np.float64))
        egraph.append(np.full(len(nl), g, dtype=np.int64))
        offset += n

    def cat(parts, dtype, shape):
        return torch.as_tensor(np.concatenate(parts).reshape(shape) if parts else np.zeros(shape), dtype=dtype)

    n_total = offset
    out = GraphBatch(
        positions=cat(pos, torch.float64, (n_total, 3)),
        species=cat(spec, torch.long, (n_total,)),
        batch=cat(batch, torch.long, (n_total,)),
        natoms=torch.as_tensor([len(s) for s in structures], dtype=torch.long),
        cell=torch.as_tensor(np.asarray(cells, dtype=np.float64).reshape(-1, 3, 3)),
        pbc=torch.as_tensor(np.asarray(pbc, dtype=bool).reshape(-1, 3)),
        receivers=cat(recv, torch.long, (-1,)),
        senders=cat(send, torch.long, (-1,)),
        shifts=cat(shifts, torch.float64, (-1, 3)),
        edge_graph=cat(egraph, torch.long, (-1,)),
        total_charge=torch.as_tensor(
            [0.0 if s.total_charge is None else s.total_charge for s in structures], dtype=torch.float64
        ),
    )
    if any(s.fidelity is not None for s in structures):
        out.fidelity = torch.as_tensor([-1 if s.fidelity is None else s.fidelity for s in structures], dtype=torch.long)
    if any(s.external_field is not None for s in structures):
        out.external_field = torch.as_tensor(
            np.stack([np.zeros(3) if s.external_field is None else s.external_field for s in structures]),
            dtype=torch.float64,
        )
    if any(s.magmoms is not None for s in structures):
        out.magmoms = cat(
            [np.zeros((len(s), 3)) if s.magmoms is None else s.magmoms for s in structures], torch.float64, (n_total, 3)
        )
        out.collinear = cat([np.full(len(s), bool(s.collinear)) for s in structures], torch.bool, (n_total,))
    if any(s.charges is not None for s in structures):
        out.charges = cat(
            [np.zeros(len(s)) if s.charges is None else s.charges for s in structures], torch.float64, (n_total,)
        )
    return out


def missing_attributes(structures: Sequence[Structure], names: List[str]) -> List[str]:
    """Attribute names required by the model that some structure does not carry."""
    missing = []
    for name in names:
        if any(getattr(s, name) is None for s in structures if len(s)):
            missing.append(name)
    return missing
