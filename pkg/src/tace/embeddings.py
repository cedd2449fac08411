"""Radial, angular, element and attribute embeddings."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, List, Sequence

import numpy as np
import torch
from scipy.optimize import brentq
from scipy.special import spherical_jn
from torch import nn

from . import ict
from .exceptions import DomainError, MissingAttributeError, UnknownElementError, UnknownLabelError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RadialBasisConfig:
    n_max: int = 8
    cutoff: float = 5.0
    envelope_exponent: int = 6
    order: int = 0
    trainable: bool = False

    def __post_init__(self):
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        if self.cutoff <= 0:
            raise ValueError("cutoff must be positive")


def polynomial_envelope(x: torch.Tensor, p: int = 6) -> torch.Tensor:
    """Smooth cutoff on ``x = r / c``; value 1 at 0, vanishes with p-1 derivatives at 1."""
    env = (
        1.0
        - (p + 1.0) * (p + 2.0) / 2.0 * x**p
        + p * (p + 2.0) * x ** (p + 1)
        - p * (p + 1.0) / 2.0 * x ** (p + 2)
    )
    return torch.where(x < 1.0, env, torch.zeros_like(x))


@lru_cache(maxsize=None)
def bessel_zeros(order: int, count: int) -> tuple:
    """First ``count`` positive zeros of ``j_order``."""
    if order == 0:
        return tuple(math.pi * n for n in range(1, count + 1))
    zeros, a, step = [], order + 1e-3, 0.1
    f = lambda x: spherical_jn(order, x)
    while len(zeros) < count:
        b = a + step
        if f(a) * f(b) < 0:
            zeros.append(brentq(f, a, b, xtol=1e-15))
        a = b
    return tuple(zeros)


def spherical_bessel(order: int, x: torch.Tensor) -> torch.Tensor:
    j_prev = torch.sin(x) / x
    if order == 0:
        return j_prev
    j_cur = torch.sin(x) / x**2 - torch.cos(x) / x
    for ell in range(1, order):
        j_prev, j_cur = j_cur, (2 * ell + 1) / x * j_cur - j_prev
    return j_cur


class BesselBasis(nn.Module):
    """Zeros-of-``j_l`` radial basis times a polynomial envelope."""

    def __init__(self, cfg: RadialBasisConfig):
        super().__init__()
        self.cfg = cfg
        zeros = torch.tensor(bessel_zeros(cfg.order, cfg.n_max), dtype=torch.float64)
        if cfg.trainable:
            self.frequencies = nn.Parameter(zeros)
        else:
            self.register_buffer("frequencies", zeros)
        if cfg.order == 0:
            norm = torch.full((cfg.n_max,), math.sqrt(2.0 / cfg.cutoff), dtype=torch.float64)
        else:
            norm = torch.tensor(
                [math.sqrt(2.0 / cfg.cutoff**3) / abs(spherical_jn(cfg.order + 1, z)) for z in zeros.tolist()],
                dtype=torch.float64,
            )
        self.register_buffer("norm", norm)

    def forward(self, r: torch.Tensor) -> torch.Tensor:
        c = self.cfg.cutoff
        r = r.unsqueeze(-1)
        arg = self.frequencies * r / c
        if self.cfg.order == 0:
            raw = self.norm * torch.sin(arg) / r
        else:
            raw = self.norm * spherical_bessel(self.cfg.order, arg)
        return raw * polynomial_envelope(r / c, self.cfg.envelope_exponent)


def radial_basis(r, cfg: RadialBasisConfig) -> np.ndarray:
    """Evaluate the radial basis at one or more distances (Angstrom)."""
    r = torch.as_tensor(np.asarray(r, dtype=np.float64))
    if torch.any(r <= 0):
        raise DomainError("radial basis needs r > 0")
    with torch.no_grad():
        return BesselBasis(cfg).to(torch.float64)(r).numpy()


class RadialMLP(nn.Module):
    """Bias-free SiLU MLP, so a vanishing basis maps to vanishing weights."""

    def __init__(self, n_in: int, hidden: Sequence[int], n_out: int):
        super().__init__()
        sizes = [n_in, *hidden, n_out]
        self.layers = nn.ModuleList(nn.Linear(a, b, bias=False, dtype=torch.float64) for a, b in zip(sizes[:-1], sizes[1:]))
        for layer in self.layers:
            nn.init.normal_(layer.weight, std=1.0 / math.sqrt(layer.in_features))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for k, layer in enumerate(self.layers):
            x = layer(x)
            if k < len(self.layers) - 1:
                x = torch.nn.functional.silu(x)
        return x


def angular_prefactor(nu: int) -> float:
    return ict.double_factorial(2 * nu - 1) / math.factorial(nu)


def edge_tensors(rhat: torch.Tensor, l_max: int) -> List[torch.Tensor]:
    """Symmetric traceless edge tensors ``E^(nu)`` for ``nu = 0..l_max``; shapes ``(E, 3, ..., 3)``."""
    out = [torch.ones(rhat.shape[:-1], dtype=rhat.dtype, device=rhat.device)]
    outer = None
    for nu in range(1, l_max + 1):
        outer = rhat if outer is None else outer.unsqueeze(-1) * rhat.reshape(*rhat.shape[:-1], *([1] * (nu - 1)), 3)
        out.append(angular_prefactor(nu) * ict.highest_weight_project(outer, nu))
    return out


def angular_embedding(rhat, nu: int) -> torch.Tensor:
    """``(2nu-1)!!/nu!`` times the highest-weight part of ``rhat`` repeated ``nu`` times."""
    rhat = torch.as_tensor(np.asarray(rhat, dtype=np.float64)) if not torch.is_tensor(rhat) else rhat
    norm = torch.linalg.norm(rhat, dim=-1, keepdim=True)
    dev = torch.max(torch.abs(norm - 1.0)) if norm.numel() else torch.tensor(0.0)
    if dev > 1e-10:
        if dev > 1e-6:
            raise DomainError(f"edge direction is not a unit vector (|norm - 1| = {float(dev):.2e})")
        logger.warning("normalizing edge direction with |norm - 1| = %.2e", float(dev))
        rhat = rhat / norm
    return edge_tensors(rhat, nu)[nu]


class ElementEmbedding(nn.Module):
    """Linear map of the one-hot species encoding into ``channels`` scalars."""

    def __init__(self, species: Sequence[int], channels: int):
        super().__init__()
        self.species = tuple(int(z) for z in species)
        self.index = {z: k for k, z in enumerate(self.species)}
        self.weight = nn.Parameter(torch.randn(len(self.species), channels, dtype=torch.float64))

    def species_index(self, numbers) -> np.ndarray:
        try:
            return np.asarray([self.index[int(z)] for z in numbers], dtype=np.int64)
        except KeyError as exc:
            raise UnknownElementError(f"element Z={exc.args[0]} is not in the model species {self.species}") from None

    def forward(self, species_idx: torch.Tensor) -> torch.Tensor:
        return self.weight[species_idx]


GRAPH_INVARIANTS = ("fidelity", "total_charge")
NODE_INVARIANTS = ("charges",)
EQUIVARIANT_ATTRIBUTES = ("external_field", "magmoms")


@dataclass(frozen=True)
class AttributeSpec:
    """One invariant attribute: ``discrete`` ids with ``num_classes`` or a ``continuous`` value."""

    name: str
    kind: str = "continuous"
    num_classes: int = 0
    dim: int = 8

    def __post_init__(self):
        if self.name not in GRAPH_INVARIANTS + NODE_INVARIANTS:
            raise ValueError(f"unknown invariant attribute {self.name!r}")
        if self.kind not in ("discrete", "continuous"):
            raise ValueError(f"attribute kind must be discrete or continuous, got {self.kind!r}")
        if self.kind == "discrete" and self.num_classes < 1:
            raise ValueError(f"discrete attribute {self.name!r} needs num_classes >= 1")

    @property
    def graph_level(self) -> bool:
        return self.name in GRAPH_INVARIANTS


class _ContinuousEmbedding(nn.Module):
    def __init__(self, dim: int, hidden=(16, 16)):
        super().__init__()
        sizes = [1, *hidden, dim]
        self.layers = nn.ModuleList(nn.Linear(a, b, dtype=torch.float64) for a, b in zip(sizes[:-1], sizes[1:]))

    def forward(self, x):
        x = x.unsqueeze(-1)
        for k, layer in enumerate(self.layers):
            x = layer(x)
            if k < len(self.layers) - 1:
                x = torch.nn.functional.silu(x)
        return x


class UniversalInvariantEmbedding(nn.Module):
    """Concatenate per-attribute embeddings and project them onto the scalar channels.

    Also produces the attribute baseline energy per atom; graph-level
    contributions are shared equally among the atoms of the graph.
    """

    def __init__(self, specs: Sequence[AttributeSpec], channels: int, zero_init_baseline: bool = True):
        super().__init__()
        self.specs = tuple(specs)
        self.embedders = nn.ModuleDict()
        for spec in self.specs:
            if spec.kind == "discrete":
                emb = nn.Embedding(spec.num_classes, spec.dim, dtype=torch.float64)
                nn.init.normal_(emb.weight)
                self.embedders[spec.name] = emb
            else:
                self.embedders[spec.name] = _ContinuousEmbedding(spec.dim)
        graph_dim = sum(s.dim for s in self.specs if s.graph_level)
        node_dim = sum(s.dim for s in self.specs if not s.graph_level)
        total = graph_dim + node_dim
        self.project = nn.Linear(max(total, 1), channels, bias=False, dtype=torch.float64)
        nn.init.normal_(self.project.weight, std=1.0 / math.sqrt(max(total, 1)))
        self.graph_baseline = nn.Linear(max(graph_dim, 1), 1, bias=False, dtype=torch.float64)
        self.node_baseline = nn.Linear(max(node_dim, 1), 1, bias=False, dtype=torch.float64)
        if zero_init_baseline:
            nn.init.zeros_(self.graph_baseline.weight)
            nn.init.zeros_(self.node_baseline.weight)
        self.graph_dim, self.node_dim = graph_dim, node_dim

    def _embed(self, spec: AttributeSpec, values: torch.Tensor) -> torch.Tensor:
        if spec.kind == "discrete":
            if values.numel() and (int(values.min()) < 0 or int(values.max()) >= spec.num_classes):
                raise UnknownLabelError(
                    f"{spec.name} id outside [0, {spec.num_classes - 1}]: {values.tolist()}"
                )
            return self.embedders[spec.name](values)
        return self.embedders[spec.name](values)

    def forward(self, attrs: Dict[str, torch.Tensor], batch: torch.Tensor, natoms: torch.Tensor):
        """Return ``(node_features (N, c), baseline (N,))``; zeros when no attribute is configured."""
        n = batch.shape[0]
        dtype = self.project.weight.dtype
        if not self.specs:
            zero = torch.zeros(n, dtype=dtype, device=batch.device)
            return torch.zeros(n, self.project.out_features, dtype=dtype, device=batch.device), zero
        graph_parts, node_parts = [], []
        for spec in self.specs:
            if spec.name not in attrs or attrs[spec.name] is None:
                raise MissingAttributeError(f"model expects attribute {spec.name!r}")
            emb = self._embed(spec, attrs[spec.name])
            (graph_parts if spec.graph_level else node_parts).append(emb)
        pieces, baseline = [], torch.zeros(n, dtype=dtype, device=batch.device)
        if graph_parts:
            g = torch.cat(graph_parts, dim=-1)
            pieces.append(g[batch])
            baseline = baseline + (self.graph_baseline(g).squeeze(-1) / natoms.to(dtype))[batch]
        if node_parts:
            v = torch.cat(node_parts, dim=-1)
            pieces.append(v)
            baseline = baseline + self.node_baseline(v).squeeze(-1)
        return self.project(torch.cat(pieces, dim=-1)), baseline


class UniversalEquivariantEmbedding(nn.Module):
    """Add ``w[c, z] * v / sigma`` to the rank-1 atomic basis.

    ``v`` is a graph-level vector (field, broadcast to atoms) or a per-atom
    vector (magnetic moments).
    """

    def __init__(self, name: str, n_species: int, channels: int):
        super().__init__()
        if name not in EQUIVARIANT_ATTRIBUTES:
            raise ValueError(f"unknown equivariant attribute {name!r}")
        self.name = name
        self.weight = nn.Parameter(torch.randn(n_species, channels, dtype=torch.float64))
        self.register_buffer("sigma", torch.tensor(1.0, dtype=torch.float64))

    @property
    def graph_level(self) -> bool:
        return self.name == "external_field"

    def forward(self, a1: torch.Tensor, vector: torch.Tensor, species_idx: torch.Tensor, batch: torch.Tensor):
        if vector is None:
            raise MissingAttributeError(f"model expects attribute {self.name!r}")
        v = vector[batch] if self.graph_level else vector
        return a1 + self.weight[species_idx].unsqueeze(-1) * (v / self.sigma).unsqueeze(-2)
