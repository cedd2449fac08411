"""Forces, stress and field responses by differentiating the model energy.

First derivatives come from reverse-mode autodiff. Second derivatives
(polarizability, Born charges, Hessian) are central differences of first
derivatives, Richardson-extrapolated once.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Dict

import numpy as np
import torch

from .batching import GraphBatch
from .exceptions import CapabilityError, MissingAttributeError, WrongVariantError
from .geometry import Structure

FIELD_STEP = 1e-3
POSITION_STEP = 1e-3


def compute_properties(
    model,
    batch: GraphBatch,
    forces: bool = True,
    stress: bool = False,
    magnetic: bool = False,
    polarization: bool = False,
    create_graph: bool = False,
) -> Dict[str, torch.Tensor]:
    """Forward pass plus the requested energy derivatives for a whole batch.

    Adds ``forces`` (N, 3), ``virial`` and ``stress`` (G, 3, 3),
    ``magnetic_forces`` (N, 3) and ``polarization`` (G, 3) to the output.
    """
    changes, wrt = {}, {}
    if forces:
        wrt["positions"] = batch.positions.detach().clone().requires_grad_(True)
        changes["positions"] = wrt["positions"]
    if stress:
        wrt["strain"] = torch.zeros(batch.n_graphs, 3, 3, dtype=torch.float64, requires_grad=True)
        changes["strain"] = 0.5 * (wrt["strain"] + wrt["strain"].transpose(1, 2))
    if magnetic:
        if batch.magmoms is None:
            raise MissingAttributeError("magnetic forces need magnetic moments on every structure")
        wrt["magmoms"] = batch.magmoms.detach().clone().requires_grad_(True)
        changes["magmoms"] = wrt["magmoms"]
    if polarization:
        field = batch.external_field
        if field is None:
            field = torch.zeros(batch.n_graphs, 3, dtype=torch.float64)
        wrt["external_field"] = field.detach().clone().requires_grad_(True)
        changes["external_field"] = wrt["external_field"]
    b = dataclasses.replace(batch, **changes)
    out = model(b)
    if not wrt:
        return out
    names = list(wrt)
    grads = torch.autograd.grad(
        out["energy"].sum(), [wrt[k] for k in names], create_graph=create_graph, allow_unused=True
    )
    grads = {k: torch.zeros_like(wrt[k]) if g is None else g for k, g in zip(names, grads)}
    if forces:
        out["forces"] = -grads["positions"]
    if stress:
        g = grads["strain"]
        out["virial"] = -g
        volume = torch.abs(torch.linalg.det(batch.cell))
        safe = torch.where(volume > 0, volume, torch.ones_like(volume))
        out["stress"] = g / safe[:, None, None]
    if magnetic:
        mf = -grads["magmoms"]
        if batch.collinear is not None:
            keep = torch.ones_like(mf)
            keep[batch.collinear, :2] = 0.0
            mf = mf * keep
        out["magnetic_forces"] = mf
    if polarization:
        out["polarization"] = -grads["external_field"]
    return out


def _single(model, structure: Structure, **flags) -> Dict[str, torch.Tensor]:
    return compute_properties(model, model.collate([structure]), **flags)


def energy(model, structure: Structure) -> float:
    with torch.no_grad():
        return float(model(model.collate([structure]))["energy"][0])


def forces(model, structure: Structure) -> np.ndarray:
    return _single(model, structure)["forces"].detach().numpy()


def stress(model, structure: Structure) -> np.ndarray:
    """``(1/V) dE/d(strain)`` in eV/A^3."""
    if not structure.is_periodic:
        raise WrongVariantError("stress needs a periodic structure")
    return _single(model, structure, forces=False, stress=True)["stress"][0].detach().numpy()


def virial(model, structure: Structure) -> np.ndarray:
    if not structure.is_periodic:
        raise WrongVariantError("virial needs a periodic structure")
    return _single(model, structure, forces=False, stress=True)["virial"][0].detach().numpy()


def magnetic_forces(model, structure: Structure) -> np.ndarray:
    """``-dE/dm`` in eV/mu_B; collinear structures report only the z component."""
    if not getattr(model, "has_magmoms", False):
        raise CapabilityError("model was built without a magnetic-moment embedding")
    return _single(model, structure, forces=False, magnetic=True)["magnetic_forces"].detach().numpy()


def _require_field(model):
    if not getattr(model, "has_field", False):
        raise CapabilityError("model was built without an external-field embedding")


def _with_field(structure: Structure, field) -> Structure:
    return structure.copy(external_field=np.asarray(field, dtype=np.float64))


def polarization(model, structure: Structure, field=None) -> np.ndarray:
    """``P = -dU/dE`` in e*A, evaluated at ``field`` (default: the structure's own, else zero)."""
    _require_field(model)
    if field is None:
        field = structure.external_field if structure.external_field is not None else np.zeros(3)
    s = _with_field(structure, field)
    return _single(model, s, forces=False, polarization=True)["polarization"][0].detach().numpy()


def _richardson(f: Callable[[float], np.ndarray], h: float) -> np.ndarray:
    def central(step):
        return (f(step) - f(-step)) / (2.0 * step)

    return (4.0 * central(h / 2.0) - central(h)) / 3.0


def polarizability_response(model, structure: Structure, step: float = FIELD_STEP) -> np.ndarray:
    """``alpha[a, b] = dP_a / dE_b`` at the structure's field (default zero)."""
    _require_field(model)
    base = structure.external_field if structure.external_field is not None else np.zeros(3)
    out = np.zeros((3, 3))
    for b in range(3):
        e = np.zeros(3)
        e[b] = 1.0
        out[:, b] = _richardson(lambda h: polarization(model, structure, base + h * e), step)
    return out


def born_charges(model, structure: Structure, step: float = POSITION_STEP) -> np.ndarray:
    """``Z[i, a, b] = dP_a / dr_ib`` at zero field, in units of e."""
    _require_field(model)
    s0 = _with_field(structure, np.zeros(3))
    n = len(structure)
    out = np.zeros((n, 3, 3))
    for i in range(n):
        for b in range(3):
            def shifted(h, i=i, b=b):
                pos = s0.positions.copy()
                pos[i, b] += h
                return polarization(model, s0.copy(positions=pos), np.zeros(3))

            out[i, :, b] = _richardson(shifted, step)
    return out


def hessian(model, structure: Structure, step: float = POSITION_STEP) -> np.ndarray:
    """``d^2E / dr_ia dr_jb`` as a ``(3N, 3N)`` matrix from differences of forces."""
    n = len(structure)
    out = np.zeros((3 * n, 3 * n))
    for i in range(n):
        for a in range(3):
            def shifted(h, i=i, a=a):
                pos = structure.positions.copy()
                pos[i, a] += h
                return -forces(model, structure.copy(positions=pos)).ravel()

            out[3 * i + a] = _richardson(shifted, step)
    return out


def finite_difference(
    fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-4, richardson: bool = False
) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array.

    With ``richardson`` the steps ``h`` and ``h/2`` are combined to cancel the
    leading ``h**2`` error term.
    """
    x = np.asarray(x, dtype=np.float64)

    def central(step):
        grad = np.zeros(x.size)
        for k in range(x.size):
            xp, xm = x.copy().reshape(-1), x.copy().reshape(-1)
            xp[k] += step
            xm[k] -= step
            grad[k] = (fn(xp.reshape(x.shape)) - fn(xm.reshape(x.shape))) / (2.0 * step)
        return grad.reshape(x.shape)

    if richardson:
        return (4.0 * central(h / 2.0) - central(h)) / 3.0
    return central(h)
