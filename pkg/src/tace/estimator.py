"""scikit-learn style wrappers around the decomposition and the potential."""

from __future__ import annotations

import dataclasses
from typing import Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.metrics import r2_score
from sklearn.utils.validation import check_is_fitted

from . import ict
from .gradients import compute_properties
from .model import TACE, ModelConfig
from .training import LossConfig, TrainConfig, train
from .validation import check_frames, check_species, check_structures, check_tensor_values


class IrreducibleDecomposer(TransformerMixin, BaseEstimator):
    """Map flat rank-``rank`` tensors ``(n, 3**rank)`` to their irreducible parts.

    ``transform`` returns ``(n, n_components, 3**rank)``; ``inverse_transform``
    sums the parts back.
    """

    def __init__(self, rank: int = 2):
        self.rank = rank

    def fit(self, X=None, y=None):
        table = ict.get_decomposition_table(max(self.rank, 0))
        self.components_ = [(p.weight, p.label) for p in table.components(self.rank)]
        self.n_features_in_ = 3**self.rank
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        x = torch.as_tensor(check_tensor_values(np.atleast_2d(X), self.rank))
        parts = ict.decompose(x, self.rank)
        return np.stack([p.data.reshape(len(x), -1).numpy() for p in parts], axis=1)

    def inverse_transform(self, Xt):
        return np.asarray(Xt).sum(axis=1)


class TACERegressor(RegressorMixin, BaseEstimator):
    """Fit the potential on labeled frames; ``predict`` returns total energies (eV)."""

    def __init__(
        self,
        species=None,
        l_max: int = 2,
        edge_l_max: int = 3,
        channels: int = 64,
        layers: int = 2,
        correlation: int = 3,
        path_mode: str = "single",
        weight_mode: str = "coupled",
        cutoff: float = 5.0,
        n_basis: int = 8,
        radial_hidden=(64, 64, 64),
        readout_hidden=(16,),
        invariant_attributes=(),
        equivariant_attributes=(),
        les: bool = False,
        charge_head: str = "none",
        dipole: bool = False,
        polarizability: bool = False,
        epochs: int = 500,
        batch_size: int = 4,
        lr: float = 1e-2,
        loss_weights: Optional[dict] = None,
        valid_fraction: float = 0.0,
        random_state: int = 0,
    ):
        self.species = species
        self.l_max = l_max
        self.edge_l_max = edge_l_max
        self.channels = channels
        self.layers = layers
        self.correlation = correlation
        self.path_mode = path_mode
        self.weight_mode = weight_mode
        self.cutoff = cutoff
        self.n_basis = n_basis
        self.radial_hidden = radial_hidden
        self.readout_hidden = readout_hidden
        self.invariant_attributes = invariant_attributes
        self.equivariant_attributes = equivariant_attributes
        self.les = les
        self.charge_head = charge_head
        self.dipole = dipole
        self.polarizability = polarizability
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.loss_weights = loss_weights
        self.valid_fraction = valid_fraction
        self.random_state = random_state

    def _model_config(self, frames) -> ModelConfig:
        species = self.species
        if species is None:
            species = sorted({int(z) for f in frames for z in f.structure.numbers})
        return ModelConfig(
            species=tuple(species), l_max=self.l_max, edge_l_max=self.edge_l_max, channels=self.channels,
            layers=self.layers, correlation=self.correlation, path_mode=self.path_mode,
            weight_mode=self.weight_mode, cutoff=self.cutoff, n_basis=self.n_basis,
            radial_hidden=tuple(self.radial_hidden), readout_hidden=tuple(self.readout_hidden),
            invariant_attributes=tuple(self.invariant_attributes),
            equivariant_attributes=tuple(self.equivariant_attributes), les=self.les,
            charge_head=self.charge_head, dipole=self.dipole, polarizability=self.polarizability,
            seed=self.random_state,
        )

    def fit(self, X, y=None):
        frames = check_frames(X)
        if y is not None:
            y = np.asarray(y, dtype=np.float64).reshape(-1)
            frames = [dataclasses.replace(f, energy=float(e)) for f, e in zip(frames, y)]
        self.model_ = TACE(self._model_config(frames))
        check_species([f.structure for f in frames], self.model_.species)
        cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                          valid_fraction=self.valid_fraction, seed=self.random_state)
        self.train_state_ = train(self.model_, frames, LossConfig(**(self.loss_weights or {})), cfg)
        self.n_features_in_ = 1
        return self

    def _outputs(self, X, forces: bool = False):
        check_is_fitted(self, "model_")
        structures = check_structures(X)
        check_species(structures, self.model_.species)
        self.model_.eval()
        batch = self.model_.collate(structures)
        if forces:
            return compute_properties(self.model_, batch, forces=True)
        with torch.no_grad():
            return self.model_(batch)

    def predict(self, X) -> np.ndarray:
        return self._outputs(X)["energy"].detach().numpy()

    def predict_forces(self, X):
        """Per-structure ``(N_k, 3)`` force arrays in eV/A."""
        structures = check_structures(X)
        out = self._outputs(structures, forces=True)["forces"].detach().numpy()
        splits = np.cumsum([len(s) for s in structures])[:-1]
        return np.split(out, splits)

    def score(self, X, y=None, sample_weight=None) -> float:
        frames = check_frames(X)
        if y is None:
            y = np.asarray([f.energy for f in frames], dtype=np.float64)
        return r2_score(y, self.predict(frames), sample_weight=sample_weight)
