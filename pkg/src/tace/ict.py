"""Irreducible Cartesian tensors: decomposition tables, contraction paths, mixing.

Tensors are plain ``torch`` arrays whose trailing ``rank`` axes have length 3
and carry the Cartesian indices; any leading axes (atoms, edges, channels)
broadcast through every operation. :class:`CartesianTensor` wraps such an
array together with its rank for the public, validated entry points.

Decomposition matrices are obtained numerically. The quadratic Casimir of the
rank-``nu`` rotation action has eigenvalue ``l(l+1)`` on the weight-``l``
subspace; copies of the same weight are split apart by diagonalising a fixed,
generic symmetric combination of index permutations inside each eigenspace.
Permutations commute with rotations, so every split is an invariant subspace.
"""

from __future__ import annotations

import itertools
import math
import threading
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Sequence, Tuple

import numpy as np
import torch

from .exceptions import InvalidSignatureError, ShapeError, UnsupportedRankError

MAX_RANK = 4
_LETTERS = "abcdefghijklmnopqrstuvwxyz"

__all__ = [
    "MAX_RANK",
    "CartesianTensor",
    "IrrepComponent",
    "DecompositionTable",
    "ContractionPath",
    "build_decomposition_table",
    "get_decomposition_table",
    "decompose",
    "highest_weight_project",
    "detrace_symmetric",
    "enumerate_paths",
    "canonical_path",
    "contract",
    "linear_mix",
    "rotate",
    "double_factorial",
]


def double_factorial(n: int) -> int:
    """``n!!`` with the convention ``(-1)!! = 0!! = 1``."""
    out = 1
    while n > 1:
        out *= n
        n -= 2
    return out


@dataclass(frozen=True)
class CartesianTensor:
    """A rank-``rank`` Cartesian tensor with a channel axis.

    ``data`` has shape ``(..., channels, 3, ..., 3)``. A tensor without an
    explicit channel axis is wrapped with ``channels=1`` by :meth:`from_array`.
    """

    data: torch.Tensor
    rank: int

    def __post_init__(self):
        if self.rank < 0:
            raise UnsupportedRankError(f"rank must be non-negative, got {self.rank}")
        shape = tuple(self.data.shape)
        if len(shape) < self.rank + 1 or any(s != 3 for s in shape[len(shape) - self.rank:]):
            raise ShapeError(
                f"rank-{self.rank} tensor needs a channel axis and {self.rank} trailing axes of length 3, got {shape}"
            )

    @classmethod
    def from_array(cls, values, rank: int, channels_axis: bool = False) -> "CartesianTensor":
        data = values if torch.is_tensor(values) else torch.as_tensor(np.asarray(values, dtype=np.float64))
        if not channels_axis:
            data = data.unsqueeze(-rank - 1) if rank > 0 else data.reshape(*data.shape, 1)
        return cls(data, rank)

    @property
    def channels(self) -> int:
        return int(self.data.shape[-self.rank - 1])

    @property
    def n_components(self) -> int:
        return 3**self.rank

    def flat(self) -> torch.Tensor:
        return self.data.reshape(*self.data.shape[: self.data.ndim - self.rank], 3**self.rank)


@dataclass(frozen=True)
class IrrepComponent:
    """The ``(rank; weight; label)`` piece of a tensor, embedded in the full 3^rank space."""

    rank: int
    weight: int
    label: int
    data: torch.Tensor


@dataclass(frozen=True)
class _Projector:
    weight: int
    label: int
    matrix: np.ndarray


@dataclass
class DecompositionTable:
    max_rank: int
    entries: Dict[int, List[_Projector]] = field(default_factory=dict)
    weight_projectors: Dict[Tuple[int, int], np.ndarray] = field(default_factory=dict)

    def components(self, rank: int) -> List[_Projector]:
        if rank > self.max_rank:
            raise UnsupportedRankError(f"rank {rank} exceeds decomposition table max_rank {self.max_rank}")
        return self.entries[rank]

    def multiplicity(self, rank: int, weight: int) -> int:
        return sum(1 for p in self.components(rank) if p.weight == weight)

    def projector(self, rank: int, weight: int, label: int = 1) -> np.ndarray:
        for p in self.components(rank):
            if p.weight == weight and p.label == label:
                return p.matrix
        raise KeyError((rank, weight, label))

    def to_state(self) -> dict:
        """Plain-data form used when the table is stored alongside a checkpoint."""
        return {
            "max_rank": self.max_rank,
            "entries": {
                nu: [(p.weight, p.label, torch.from_numpy(p.matrix.copy())) for p in comps]
                for nu, comps in self.entries.items()
            },
        }

    @classmethod
    def from_state(cls, state: dict) -> "DecompositionTable":
        table = cls(max_rank=int(state["max_rank"]))
        for nu, comps in state["entries"].items():
            nu = int(nu)
            table.entries[nu] = [_Projector(int(w), int(q), m.numpy().copy()) for w, q, m in comps]
            for w in sorted({int(w) for w, _, _ in comps}):
                table.weight_projectors[(nu, w)] = sum(p.matrix for p in table.entries[nu] if p.weight == w)
        return table


def _so3_generators() -> np.ndarray:
    eps = np.zeros((3, 3, 3))
    for i, j, k in itertools.permutations(range(3)):
        eps[i, j, k] = np.linalg.det(np.eye(3)[[i, j, k]])
    return -eps


def _rank_generators(rank: int) -> List[np.ndarray]:
    gens = _so3_generators()
    out = []
    for a in range(3):
        total = np.zeros((3**rank, 3**rank))
        for slot in range(rank):
            mats = [np.eye(3)] * rank
            mats[slot] = gens[a]
            term = np.ones((1, 1))
            for m in mats:
                term = np.kron(term, m)
            total += term
        out.append(total)
    return out


def _permutation_operator(rank: int, perm: Sequence[int]) -> np.ndarray:
    n = 3**rank
    basis = np.eye(n).reshape((n,) + (3,) * rank)
    return basis.transpose((0,) + tuple(1 + p for p in perm)).reshape(n, n).T


def _multiplicity_splitter(rank: int) -> np.ndarray:
    # Fixed irrational coefficients keep the split generic and reproducible.
    perms = list(itertools.permutations(range(rank)))
    x = np.zeros((3**rank, 3**rank))
    for idx, perm in enumerate(perms):
        p = _permutation_operator(rank, perm)
        x += math.sqrt(idx + 2.0) * (p + p.T)
    return x


def build_decomposition_table(max_rank: int) -> DecompositionTable:
    """Construct projectors ``P_(nu;l;q)`` for every rank up to ``max_rank``."""
    if max_rank > MAX_RANK:
        raise UnsupportedRankError(f"ranks above {MAX_RANK} are not supported (got {max_rank})")
    if max_rank < 0:
        raise UnsupportedRankError(f"max_rank must be non-negative, got {max_rank}")
    table = DecompositionTable(max_rank=max_rank)
    table.entries[0] = [_Projector(0, 1, np.ones((1, 1)))]
    table.weight_projectors[(0, 0)] = np.ones((1, 1))
    for nu in range(1, max_rank + 1):
        gens = _rank_generators(nu)
        casimir = -sum(g @ g for g in gens)
        evals, evecs = np.linalg.eigh(casimir)
        ells = np.rint((-1.0 + np.sqrt(1.0 + 4.0 * np.clip(evals, 0.0, None))) / 2.0).astype(int)
        splitter = _multiplicity_splitter(nu)
        comps: List[_Projector] = []
        for ell in sorted(set(ells.tolist())):
            basis = evecs[:, ells == ell]
            table.weight_projectors[(nu, ell)] = basis @ basis.T
            dim = 2 * ell + 1
            mult = basis.shape[1] // dim
            if mult * dim != basis.shape[1]:
                raise RuntimeError(f"rank {nu} weight {ell}: eigenspace dimension {basis.shape[1]} not a multiple of {dim}")
            if mult == 1:
                comps.append(_Projector(ell, 1, basis @ basis.T))
                continue
            sub = basis.T @ splitter @ basis
            sub = 0.5 * (sub + sub.T)
            s_vals, s_vecs = np.linalg.eigh(sub)
            for q in range(mult):
                block = s_vals[q * dim:(q + 1) * dim]
                if block.max() - block.min() > 1e-8:
                    raise RuntimeError(f"rank {nu} weight {ell}: multiplicity split is not degenerate")
                u = basis @ s_vecs[:, q * dim:(q + 1) * dim]
                comps.append(_Projector(ell, q + 1, u @ u.T))
        table.entries[nu] = comps
    return table


_TABLE_LOCK = threading.Lock()
_TABLE_CACHE: Dict[int, DecompositionTable] = {}


def get_decomposition_table(max_rank: int = MAX_RANK) -> DecompositionTable:
    """Cached table; safe to call from several threads."""
    if max_rank > MAX_RANK:
        raise UnsupportedRankError(f"ranks above {MAX_RANK} are not supported (got {max_rank})")
    with _TABLE_LOCK:
        if MAX_RANK not in _TABLE_CACHE:
            _TABLE_CACHE[MAX_RANK] = build_decomposition_table(MAX_RANK)
        return _TABLE_CACHE[MAX_RANK]


@lru_cache(maxsize=None)
def _torch_matrix(kind: str, rank: int, weight: int, label: int, dtype: torch.dtype) -> torch.Tensor:
    table = get_decomposition_table()
    if kind == "weight":
        mat = table.weight_projectors[(rank, weight)]
    else:
        mat = table.projector(rank, weight, label)
    return torch.as_tensor(mat, dtype=dtype)


def _apply_matrix(x: torch.Tensor, rank: int, mat: torch.Tensor) -> torch.Tensor:
    lead = x.shape[: x.ndim - rank]
    flat = x.reshape(*lead, 3**rank)
    return (flat @ mat.T).reshape(x.shape)


def _unwrap(T, rank):
    if isinstance(T, CartesianTensor):
        return T.data, T.rank
    if rank is None:
        raise ShapeError("rank must be given for raw arrays")
    return torch.as_tensor(T), rank


def project(x: torch.Tensor, rank: int, weight: int, label: int | None = None) -> torch.Tensor:
    """Apply ``P_(rank;weight;label)``, or the multiplicity-summed projector when ``label`` is None."""
    if rank > MAX_RANK:
        raise UnsupportedRankError(f"ranks above {MAX_RANK} are not supported (got {rank})")
    if label is None:
        mat = _torch_matrix("weight", rank, weight, 0, x.dtype)
    else:
        mat = _torch_matrix("component", rank, weight, label, x.dtype)
    return _apply_matrix(x, rank, mat.to(x.device))


def decompose(T, rank: int | None = None, table: DecompositionTable | None = None) -> List[IrrepComponent]:
    """Split ``T`` into irreducible components whose sum reconstructs ``T``."""
    data, rank = _unwrap(T, rank)
    table = table or get_decomposition_table()
    comps = table.components(rank)
    out = []
    for p in comps:
        mat = torch.as_tensor(p.matrix, dtype=data.dtype, device=data.device)
        out.append(IrrepComponent(rank, p.weight, p.label, _apply_matrix(data, rank, mat)))
    return out


def highest_weight_project(T, rank: int | None = None):
    """Fully symmetric, traceless ``(rank; rank; 1)`` part of ``T``."""
    data, rank = _unwrap(T, rank)
    if rank > MAX_RANK:
        raise UnsupportedRankError(f"ranks above {MAX_RANK} are not supported (got {rank})")
    out = data if rank <= 1 else project(data, rank, rank)
    return CartesianTensor(out, rank) if isinstance(T, CartesianTensor) else out


def _symmetrize(x: torch.Tensor, rank: int) -> torch.Tensor:
    lead = x.ndim - rank
    perms = list(itertools.permutations(range(rank)))
    acc = torch.zeros_like(x)
    for perm in perms:
        acc = acc + x.permute(*range(lead), *(lead + p for p in perm))
    return acc / len(perms)


def _pairings(positions: Tuple[int, ...], k: int):
    """All ways of choosing ``k`` disjoint unordered pairs from ``positions``."""
    if k == 0:
        yield ()
        return
    if len(positions) < 2 * k:
        return
    first, rest = positions[0], positions[1:]
    # pairs containing ``first``
    for idx, other in enumerate(rest):
        remaining = rest[:idx] + rest[idx + 1:]
        for tail in _pairings(remaining, k - 1):
            yield ((first, other),) + tail
    # pairings not using ``first``
    yield from _pairings(rest, k)


def detrace_symmetric(T: torch.Tensor, rank: int) -> torch.Tensor:
    """Highest-weight part via full symmetrisation and explicit trace removal.

    Independent of the Casimir projectors; used to cross-check them.
    """
    if rank > MAX_RANK:
        raise UnsupportedRankError(f"ranks above {MAX_RANK} are not supported (got {rank})")
    x = torch.as_tensor(T)
    if rank <= 1:
        return x
    s = _symmetrize(x, rank)
    eye = torch.eye(3, dtype=s.dtype, device=s.device)
    out = torch.zeros_like(s)
    traced = s
    for k in range(rank // 2 + 1):
        if k > 0:
            traced = torch.diagonal(traced, dim1=-2, dim2=-1).sum(-1)
        coef = (-1) ** k * double_factorial(2 * rank - 2 * k - 1) / double_factorial(2 * rank - 1)
        for pairs in _pairings(tuple(range(rank)), k):
            used = {i for pr in pairs for i in pr}
            rest = [i for i in range(rank) if i not in used]
            operands, subs = [traced], ["..." + "".join(_LETTERS[i] for i in rest)]
            for a, b in pairs:
                operands.append(eye)
                subs.append(_LETTERS[a] + _LETTERS[b])
            expr = ",".join(subs) + "->..." + _LETTERS[:rank]
            out = out + coef * torch.einsum(expr, *operands)
    return out


@dataclass(frozen=True)
class ContractionPath:
    nu1: int
    nu2: int
    k: int
    pairing: Tuple[Tuple[int, int], ...]

    def __post_init__(self):
        if not 0 <= self.k <= min(self.nu1, self.nu2):
            raise InvalidSignatureError(f"k={self.k} outside [0, min({self.nu1}, {self.nu2})]")
        if len(self.pairing) != self.k:
            raise InvalidSignatureError("pairing length must equal k")

    @property
    def nu3(self) -> int:
        return self.nu1 + self.nu2 - 2 * self.k


def _check_signature(nu1: int, nu2: int, nu3: int) -> int:
    if min(nu1, nu2, nu3) < 0:
        raise InvalidSignatureError(f"negative rank in ({nu1}, {nu2}, {nu3})")
    twice_k = nu1 + nu2 - nu3
    if twice_k % 2 or twice_k < 0 or twice_k // 2 > min(nu1, nu2):
        raise InvalidSignatureError(f"no contraction maps ranks ({nu1}, {nu2}) to {nu3}")
    return twice_k // 2


@lru_cache(maxsize=None)
def _all_paths(nu1: int, nu2: int, nu3: int) -> Tuple[ContractionPath, ...]:
    k = _check_signature(nu1, nu2, nu3)
    paths = []
    for left in itertools.combinations(range(nu1), k):
        for right in itertools.combinations(range(nu2), k):
            for perm in itertools.permutations(right):
                paths.append(ContractionPath(nu1, nu2, k, tuple(zip(left, perm))))
    paths.sort(key=lambda p: p.pairing)
    return tuple(paths)


def enumerate_paths(nu1: int, nu2: int, nu3: int, mode: str = "all") -> List[ContractionPath]:
    """Contraction paths mapping ranks ``(nu1, nu2)`` to ``nu3``.

    ``mode="all"`` lists every pairing lexicographically, ``mode="single"``
    keeps only the first of them.
    """
    paths = _all_paths(nu1, nu2, nu3)
    if mode == "all":
        return list(paths)
    if mode == "single":
        return [paths[0]]
    raise ValueError(f"unknown path mode {mode!r}")


def canonical_path(nu1: int, nu2: int, nu3: int) -> ContractionPath:
    return _all_paths(nu1, nu2, nu3)[0]


@lru_cache(maxsize=None)
def _einsum_expr(path: ContractionPath) -> str:
    left = list(_LETTERS[: path.nu1])
    right = list(_LETTERS[path.nu1: path.nu1 + path.nu2])
    for a, b in path.pairing:
        right[b] = left[a]
    paired_left = {a for a, _ in path.pairing}
    paired_right = {b for _, b in path.pairing}
    out = [c for i, c in enumerate(left) if i not in paired_left]
    out += [c for i, c in enumerate(right) if i not in paired_right]
    return f"...{''.join(left)},...{''.join(right)}->...{''.join(out)}"


def contract(T1, T2, path: ContractionPath, normalize: bool = True):
    """Channel-wise contraction of ``T1`` and ``T2`` along ``path``.

    The result is scaled by ``3**(-k/2)`` unless ``normalize`` is False.
    """
    wrapped = isinstance(T1, CartesianTensor)
    a, ra = _unwrap(T1, path.nu1)
    b, rb = _unwrap(T2, path.nu2)
    if ra != path.nu1 or rb != path.nu2:
        raise ShapeError(f"path expects ranks ({path.nu1}, {path.nu2}), got ({ra}, {rb})")
    lead_a = a.shape[: a.ndim - ra]
    lead_b = b.shape[: b.ndim - rb]
    if lead_a and lead_b and lead_a[-1] != lead_b[-1] and 1 not in (lead_a[-1], lead_b[-1]):
        raise ShapeError(f"channel mismatch: {lead_a[-1]} vs {lead_b[-1]}")
    out = torch.einsum(_einsum_expr(path), a, b)
    if normalize and path.k:
        out = out * 3.0 ** (-0.5 * path.k)
    return CartesianTensor(out, path.nu3) if wrapped else out


def linear_mix(T, weights: torch.Tensor, rank: int | None = None):
    """Mix channels: ``out[..., c] = sum_ct T[..., ct] * weights[ct, c]``."""
    wrapped = isinstance(T, CartesianTensor)
    x, rank = _unwrap(T, rank)
    weights = torch.as_tensor(weights, dtype=x.dtype)
    c_in = x.shape[x.ndim - rank - 1]
    if weights.ndim != 2 or weights.shape[0] != c_in:
        raise ShapeError(f"weights of shape {tuple(weights.shape)} do not mix {c_in} input channels")
    idx = _LETTERS[:rank]
    out = torch.einsum(f"...y{idx},yz->...z{idx}", x, weights)
    return CartesianTensor(out, rank) if wrapped else out


def rotate(T: torch.Tensor, R: torch.Tensor, rank: int) -> torch.Tensor:
    """Act with the 3x3 matrix ``R`` on each of the trailing ``rank`` indices."""
    R = torch.as_tensor(R, dtype=T.dtype)
    out = T
    for slot in range(rank):
        axis = T.ndim - rank + slot
        out = torch.movedim(torch.tensordot(out, R, dims=([axis], [1])), -1, axis)
    return out
