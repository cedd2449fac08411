"""The TACE network.

Node features are dicts ``{rank: tensor}`` with shapes ``(N, c, 3, ..., 3)``.
Each layer builds one-particle messages by contracting sender features with
symmetric traceless edge tensors, pools them into the atomic basis ``A``,
self-contracts ``A`` into the product basis ``B`` and mixes ``B`` (plus a
residual over ``A`` after the first layer) into the next node features.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from . import ict
from .batching import GraphBatch, collate
from .electrostatics import LesConfig, les_energy_finite, les_energy_periodic, qeq_charges, redistribute_charges
from .embeddings import (
    EQUIVARIANT_ATTRIBUTES,
    AttributeSpec,
    BesselBasis,
    ElementEmbedding,
    RadialBasisConfig,
    RadialMLP,
    UniversalEquivariantEmbedding,
    UniversalInvariantEmbedding,
    edge_tensors,
)
from .exceptions import ConfigurationError, WrongVariantError
from .geometry import Structure

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
_LETTERS = "abcdefgh"


@dataclass(frozen=True)
class ModelConfig:
    species: Tuple[int, ...] = (1,)
    l_max: int = 2
    edge_l_max: int = 3
    channels: int = 64
    layers: int = 2
    correlation: int = 3
    path_mode: str = "single"
    weight_mode: str = "coupled"
    readout_hidden: Tuple[int, ...] = (16,)
    n_basis: int = 8
    cutoff: float = 5.0
    envelope_exponent: int = 6
    bessel_order: int = 0
    radial_hidden: Tuple[int, ...] = (64, 64, 64)
    invariant_attributes: Tuple[AttributeSpec, ...] = ()
    equivariant_attributes: Tuple[str, ...] = ()
    les: bool = False
    les_sigma: float = 1.0
    les_kcut: float = math.pi
    charge_head: str = "none"
    dipole: bool = False
    polarizability: bool = False
    zero_init_readout: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "species", tuple(int(z) for z in self.species))
        object.__setattr__(self, "readout_hidden", tuple(int(h) for h in self.readout_hidden))
        object.__setattr__(self, "radial_hidden", tuple(int(h) for h in self.radial_hidden))
        object.__setattr__(self, "equivariant_attributes", tuple(self.equivariant_attributes))
        object.__setattr__(
            self,
            "invariant_attributes",
            tuple(a if isinstance(a, AttributeSpec) else AttributeSpec(**a) for a in self.invariant_attributes),
        )
        problems = []
        if not self.species or len(set(self.species)) != len(self.species):
            problems.append("species must be a non-empty list of distinct atomic numbers")
        if self.layers < 1:
            problems.append("layers must be >= 1")
        if self.correlation < 1:
            problems.append("correlation must be >= 1")
        if not 0 <= self.l_max <= ict.MAX_RANK:
            problems.append(f"l_max must lie in [0, {ict.MAX_RANK}]")
        if not self.l_max <= self.edge_l_max <= ict.MAX_RANK:
            problems.append(f"edge_l_max must lie in [l_max, {ict.MAX_RANK}]")
        if self.channels < 1:
            problems.append("channels must be >= 1")
        if self.path_mode not in ("single", "all"):
            problems.append("path_mode must be 'single' or 'all'")
        if self.weight_mode not in ("coupled", "uncoupled"):
            problems.append("weight_mode must be 'coupled' or 'uncoupled'")
        if self.charge_head not in ("none", "direct", "qeq"):
            problems.append("charge_head must be 'none', 'direct' or 'qeq'")
        if self.dipole and self.l_max < 1:
            problems.append("a dipole head needs l_max >= 1")
        if self.polarizability and self.l_max < 2:
            problems.append("a polarizability head needs l_max >= 2")
        if self.equivariant_attributes and self.l_max < 1:
            problems.append("equivariant attributes need l_max >= 1")
        for name in self.equivariant_attributes:
            if name not in EQUIVARIANT_ATTRIBUTES:
                problems.append(f"unknown equivariant attribute {name!r}")
        if self.cutoff <= 0:
            problems.append("cutoff must be positive")
        if self.les and (self.les_sigma <= 0 or self.les_kcut <= 0):
            problems.append("LES sigma and kcut must be positive")
        if problems:
            raise ConfigurationError("; ".join(problems))

    @property
    def radial(self) -> RadialBasisConfig:
        return RadialBasisConfig(self.n_basis, self.cutoff, self.envelope_exponent, self.bessel_order)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["species"] = list(self.species)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _normal(*shape, std: float) -> nn.Parameter:
    return nn.Parameter(torch.randn(*shape, dtype=torch.float64) * std)


def _mix(x: torch.Tensor, w: torch.Tensor, rank: int) -> torch.Tensor:
    """Per-atom channel mixing: ``x (N, c, ...)`` with ``w (N, c, d)``."""
    idx = _LETTERS[:rank]
    return torch.einsum(f"ny{idx},nyz->nz{idx}", x, w)


def _scale(x: torch.Tensor, w: torch.Tensor, rank: int) -> torch.Tensor:
    """Per-atom, per-channel scaling: ``w`` has shape ``(N, c)``."""
    return x * w.reshape(*w.shape, *([1] * rank))


@dataclass(frozen=True)
class _Message:
    nu1: int
    nu2: int
    path: ict.ContractionPath
    offset: int
    n_radial: int


@dataclass(frozen=True)
class _ProductTerm:
    """A chain of self-contractions ``((A^f0 x A^f1) x A^f2) ...``."""

    factors: Tuple[int, ...]
    ranks: Tuple[int, ...]

    @property
    def rank(self) -> int:
        return self.ranks[-1]

    @property
    def key(self) -> str:
        return "_".join(map(str, self.factors)) + "-" + "_".join(map(str, self.ranks))


def product_terms(l_max: int, correlation: int) -> List[_ProductTerm]:
    """All product-basis chains up to ``correlation`` factors with ranks ``<= l_max``.

    Factors are non-decreasing so that commuting products are counted once.
    """
    level = [_ProductTerm((a,), (a,)) for a in range(l_max + 1)]
    terms = list(level)
    for _ in range(1, correlation):
        nxt = []
        for term in level:
            for a in range(term.factors[-1], l_max + 1):
                for nu3 in range(l_max + 1):
                    try:
                        ict.canonical_path(term.rank, a, nu3)
                    except ict.InvalidSignatureError:
                        continue
                    nxt.append(_ProductTerm(term.factors + (a,), term.ranks + (nu3,)))
        terms.extend(nxt)
        level = nxt
    return terms


class InteractionLayer(nn.Module):
    def __init__(self, cfg: ModelConfig, t: int, in_ranks: Sequence[int]):
        super().__init__()
        self.cfg, self.t, self.in_ranks = cfg, t, tuple(in_ranks)
        c = cfg.channels
        n_weight_species = len(cfg.species) if cfg.weight_mode == "coupled" else 1
        table = ict.get_decomposition_table(ict.MAX_RANK)
        self.messages: Dict[int, List[_Message]] = {}
        offset = 0
        for nu3 in range(cfg.l_max + 1):
            entries = []
            for nu1 in self.in_ranks:
                for nu2 in range(cfg.edge_l_max + 1):
                    try:
                        paths = ict.enumerate_paths(nu1, nu2, nu3, mode=cfg.path_mode)
                    except ict.InvalidSignatureError:
                        continue
                    for path in paths:
                        n_radial = len(table.components(nu3)) if cfg.path_mode == "all" else 1
                        entries.append(_Message(nu1, nu2, path, offset, n_radial))
                        offset += n_radial * c
            if entries:
                self.messages[nu3] = entries
        self.out_ranks = tuple(sorted(self.messages))
        self.radial = RadialMLP(cfg.n_basis, cfg.radial_hidden, offset)
        self.mix_a = nn.ParameterDict(
            {str(nu): _normal(len(m), c, c, std=1.0 / math.sqrt(c * len(m))) for nu, m in self.messages.items()}
        )
        self.equivariant = nn.ModuleList(
            UniversalEquivariantEmbedding(name, len(cfg.species), c) for name in cfg.equivariant_attributes
        )
        self.terms = [t_ for t_ in product_terms(cfg.l_max, cfg.correlation) if t_.rank in self.out_ranks
                      and all(f in self.out_ranks for f in t_.factors)]
        fan_in = {nu: sum(1 for t_ in self.terms if t_.rank == nu) for nu in self.out_ranks}
        self.mix_b = nn.ParameterDict(
            {t_.key: _normal(n_weight_species, c, std=1.0 / math.sqrt(fan_in[t_.rank])) for t_ in self.terms}
        )
        self.residual = t >= 1 or cfg.layers == 1
        self.mix_res = nn.ParameterDict(
            {str(nu): _normal(n_weight_species, c, c, std=1.0 / math.sqrt(c)) for nu in self.out_ranks}
            if self.residual else {}
        )
        self.coupled = cfg.weight_mode == "coupled"

    def one_particle_basis(self, h, edge_attrs, radial, senders, nu3: int) -> List[torch.Tensor]:
        """Per-path messages ``R * (h_j x E_ij)`` of rank ``nu3``; each ``(E, c, 3, ...)``."""
        c = self.cfg.channels
        out = []
        for m in self.messages[nu3]:
            prod = ict.contract(h[m.nu1][senders], edge_attrs[m.nu2], m.path)
            r = radial[:, m.offset: m.offset + m.n_radial * c]
            if self.cfg.path_mode == "single":
                out.append(_scale(prod, r, nu3))
            else:
                r = r.reshape(-1, m.n_radial, c)
                comps = ict.decompose(prod, nu3)
                out.append(sum(_scale(comp.data, r[:, q], nu3) for q, comp in enumerate(comps)))
        return out

    def atomic_basis(self, messages: List[torch.Tensor], receivers, n_atoms: int, nu3: int, avg_neighbors):
        c = self.cfg.channels
        pooled = []
        for phi in messages:
            acc = torch.zeros((n_atoms, c) + phi.shape[2:], dtype=phi.dtype, device=phi.device)
            pooled.append(acc.index_add(0, receivers, phi))
        w = self.mix_a[str(nu3)]
        idx = _LETTERS[:nu3]
        a = torch.einsum(f"pny{idx},pyz->nz{idx}", torch.stack(pooled), w)
        if self.cfg.path_mode == "single":
            a = ict.highest_weight_project(a, nu3)
        return a / avg_neighbors

    def product_basis(self, A: Dict[int, torch.Tensor]) -> Dict[str, torch.Tensor]:
        cache: Dict[Tuple, torch.Tensor] = {}
        out = {}
        for term in self.terms:
            cur = A[term.factors[0]]
            for n in range(1, len(term.factors)):
                key = (term.factors[: n + 1], term.ranks[: n + 1])
                if key not in cache:
                    path = ict.canonical_path(term.ranks[n - 1], term.factors[n], term.ranks[n])
                    cache[key] = ict.highest_weight_project(
                        ict.contract(cur, A[term.factors[n]], path), term.ranks[n]
                    )
                cur = cache[key]
            out[term.key] = cur
        return out

    def message_update(self, B, A, species) -> Dict[int, torch.Tensor]:
        sel = species if self.coupled else torch.zeros_like(species)
        h = {}
        for term in self.terms:
            contrib = _scale(B[term.key], self.mix_b[term.key][sel], term.rank)
            h[term.rank] = contrib if term.rank not in h else h[term.rank] + contrib
        if self.residual:
            for nu in self.out_ranks:
                h[nu] = h[nu] + _mix(A[nu], self.mix_res[str(nu)][sel], nu)
        return h

    def forward(self, h, edge_attrs, basis, batch: GraphBatch, avg_neighbors, vectors):
        radial = self.radial(basis)
        A = {}
        for nu3 in self.out_ranks:
            msgs = self.one_particle_basis(h, edge_attrs, radial, batch.senders, nu3)
            A[nu3] = self.atomic_basis(msgs, batch.receivers, batch.n_atoms, nu3, avg_neighbors)
        for emb in self.equivariant:
            A[1] = emb(A[1], vectors.get(emb.name), batch.species, batch.batch)
        B = self.product_basis(A)
        return self.message_update(B, A, batch.species), A


class _ReadoutMLP(nn.Module):
    def __init__(self, c: int, hidden: Sequence[int], zero_last: bool):
        super().__init__()
        sizes = [c, *hidden, 1]
        self.layers = nn.ModuleList(nn.Linear(a, b, bias=False, dtype=torch.float64) for a, b in zip(sizes[:-1], sizes[1:]))
        for layer in self.layers:
            nn.init.normal_(layer.weight, std=1.0 / math.sqrt(layer.in_features))
        if zero_last:
            nn.init.zeros_(self.layers[-1].weight)

    def forward(self, x):
        for k, layer in enumerate(self.layers):
            x = layer(x)
            if k < len(self.layers) - 1:
                x = torch.nn.functional.silu(x)
        return x.squeeze(-1)


class TACE(nn.Module):
    """Energy model; call ``forward`` on a :class:`GraphBatch` from :meth:`collate`."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.element = ElementEmbedding(cfg.species, c)
            self.invariant = UniversalInvariantEmbedding(cfg.invariant_attributes, c)
            self.basis = BesselBasis(cfg.radial)
            layers, ranks = [], (0,)
            for t in range(cfg.layers):
                layer = InteractionLayer(cfg, t, ranks)
                layers.append(layer)
                ranks = layer.out_ranks
            self.layers = nn.ModuleList(layers)
            std = 1.0 / math.sqrt(c)
            self.readouts = nn.ParameterList(
                [_normal(c, std=std) for _ in range(cfg.layers - 1)]
            )
            self.final_readout = _ReadoutMLP(c, cfg.readout_hidden, cfg.zero_init_readout)
            if cfg.zero_init_readout:
                for w in self.readouts:
                    nn.init.zeros_(w)
            if cfg.dipole:
                self.dipole_head = _normal(c, std=std)
            if cfg.polarizability:
                self.alpha_iso = _normal(c, std=std)
                self.alpha_aniso = _normal(c, std=std)
            if cfg.charge_head != "none":
                self.chi_head = _normal(c, std=std)
            if cfg.charge_head == "qeq":
                self.eta_head = _normal(c, std=std)
            if cfg.les:
                self.les_head = _normal(c, std=std)
        self.register_buffer("isolated_energies", torch.zeros(len(cfg.species), dtype=torch.float64))
        self.register_buffer("energy_scale", torch.tensor(1.0, dtype=torch.float64))
        self.register_buffer("avg_neighbors", torch.tensor(1.0, dtype=torch.float64))
        self.double()

    # -- data plumbing -------------------------------------------------------------

    @property
    def species(self) -> Tuple[int, ...]:
        return self.cfg.species

    def species_index(self, numbers) -> np.ndarray:
        return self.element.species_index(numbers)

    def collate(self, structures: Sequence[Structure], neighbor_lists=None) -> GraphBatch:
        return collate(structures, self.species_index, self.cfg.cutoff, neighbor_lists)

    @property
    def has_field(self) -> bool:
        return "external_field" in self.cfg.equivariant_attributes

    @property
    def has_magmoms(self) -> bool:
        return "magmoms" in self.cfg.equivariant_attributes

    def set_field_sigma(self, name: str, sigma: float) -> None:
        for layer in self.layers:
            for emb in layer.equivariant:
                if emb.name == name:
                    emb.sigma.fill_(float(sigma))

    # -- forward -------------------------------------------------------------------

    def _geometry(self, batch: GraphBatch):
        pos, cell = batch.positions, batch.cell
        if batch.strain is not None:
            pos = pos + torch.einsum("ni,nij->nj", pos, batch.strain[batch.batch])
            cell = cell + torch.einsum("gij,gjk->gik", cell, batch.strain)
        vec = pos[batch.senders] - pos[batch.receivers]
        vec = vec + torch.einsum("ei,eij->ej", batch.shifts, cell[batch.edge_graph])
        return pos, cell, vec

    def forward(self, batch: GraphBatch) -> Dict[str, torch.Tensor]:
        cfg = self.cfg
        pos, cell, vec = self._geometry(batch)
        r = torch.linalg.norm(vec, dim=-1)
        rhat = vec / r.unsqueeze(-1)
        edge_attrs = [e.unsqueeze(1) for e in edge_tensors(rhat, cfg.edge_l_max)]
        basis = self.basis(r)

        attrs = {"fidelity": batch.fidelity, "total_charge": batch.total_charge, "charges": batch.charges}
        node_attr, e_uni = self.invariant(attrs, batch.batch, batch.natoms)
        h = {0: self.element(batch.species) + node_attr}
        vectors = {"external_field": batch.external_field, "magmoms": batch.magmoms}

        layer_energies = []
        for t, layer in enumerate(self.layers):
            h, _ = layer(h, edge_attrs, basis, batch, self.avg_neighbors, vectors)
            if t < cfg.layers - 1:
                layer_energies.append(h[0] @ self.readouts[t])
            else:
                layer_energies.append(self.final_readout(h[0]))
        layer_energies = torch.stack(layer_energies)

        node_energy = self.isolated_energies[batch.species] + e_uni + self.energy_scale * layer_energies.sum(0)
        G = batch.n_graphs
        energy = torch.zeros(G, dtype=pos.dtype, device=pos.device).index_add(0, batch.batch, node_energy)
        out = {"node_energy": node_energy, "layer_energies": layer_energies}

        h0 = h[0]
        if cfg.dipole:
            mu = torch.einsum("nci,c->ni", h[1], self.dipole_head)
            out["dipole"] = torch.zeros(G, 3, dtype=pos.dtype).index_add(0, batch.batch, mu)
        if cfg.polarizability:
            eye = torch.eye(3, dtype=pos.dtype)
            gamma = h0 @ self.alpha_iso
            beta = ict.highest_weight_project(torch.einsum("ncij,c->nij", h[2], self.alpha_aniso), 2)
            beta = 0.5 * (beta + beta.transpose(-1, -2))
            alpha = gamma[:, None, None] * eye + beta
            out["polarizability"] = torch.zeros(G, 3, 3, dtype=pos.dtype).index_add(0, batch.batch, alpha)
        if cfg.charge_head == "direct":
            out["charges"] = redistribute_charges(h0 @ self.chi_head, batch.total_charge, batch.batch, G)
        elif cfg.charge_head == "qeq":
            chi = h0 @ self.chi_head
            eta = torch.nn.functional.softplus(h0 @ self.eta_head) + 1e-3
            out["charges"] = qeq_charges(chi, eta, batch.total_charge, batch.batch, G)
            out["chi"], out["eta"] = chi, eta
        if cfg.les:
            q_les = h0 @ self.les_head
            e_lr = self._les(pos, cell, q_les, batch)
            out["les_charges"], out["long_range_energy"] = q_les, e_lr
            energy = energy + e_lr
        out["energy"] = energy
        return out

    def _les(self, pos, cell, q, batch: GraphBatch) -> torch.Tensor:
        cfg = LesConfig(self.cfg.les_sigma, self.cfg.les_kcut)
        parts = []
        start = 0
        for g, n in enumerate(batch.natoms.tolist()):
            sl = slice(start, start + n)
            start += n
            if batch.periodic[g]:
                parts.append(les_energy_periodic(pos[sl], cell[g], q[sl], cfg))
            elif bool(batch.pbc[g].any()):
                raise WrongVariantError("LES supports fully periodic or non-periodic structures only")
            else:
                parts.append(les_energy_finite(pos[sl], q[sl], cfg))
        if not parts:
            return torch.zeros(0, dtype=pos.dtype)
        return torch.stack(parts)

    # -- persistence ---------------------------------------------------------------

    def save(self, path) -> None:
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path) -> "TACE":
        return load_checkpoint(path)


def save_checkpoint(model: TACE, path, extra: Optional[dict] = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": model.cfg.to_dict(),
        "species": list(model.cfg.species),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "stats": {
            "isolated_energies": model.isolated_energies.tolist(),
            "energy_scale": float(model.energy_scale),
            "avg_neighbors": float(model.avg_neighbors),
        },
        "decomposition": ict.get_decomposition_table(ict.MAX_RANK).to_state(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def read_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path}: not a format-{CHECKPOINT_FORMAT} checkpoint")
    return payload


def load_checkpoint(path) -> TACE:
    payload = read_checkpoint(path)
    model = TACE(ModelConfig.from_dict(payload["config"]))
    model.load_state_dict(payload["state_dict"])
    return model
