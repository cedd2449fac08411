"""Equivariant interatomic potentials built from irreducible Cartesian tensors."""

from .batching import GraphBatch, collate
from .electrostatics import LesConfig, les_energy_finite, les_energy_periodic, qeq_charges
from .estimator import IrreducibleDecomposer, TACERegressor
from .extxyz import read_extxyz, write_extxyz
from .geometry import LabeledFrame, NeighborList, Structure, build_neighbor_list
from .ict import (
    CartesianTensor,
    build_decomposition_table,
    contract,
    decompose,
    enumerate_paths,
    highest_weight_project,
    linear_mix,
)
from .model import TACE, ModelConfig, load_checkpoint, save_checkpoint
from .training import LossConfig, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "CartesianTensor",
    "GraphBatch",
    "IrreducibleDecomposer",
    "LabeledFrame",
    "LesConfig",
    "LossConfig",
    "ModelConfig",
    "NeighborList",
    "Structure",
    "TACE",
    "TACERegressor",
    "TrainConfig",
    "build_decomposition_table",
    "build_neighbor_list",
    "collate",
    "contract",
    "decompose",
    "enumerate_paths",
    "highest_weight_project",
    "les_energy_finite",
    "les_energy_periodic",
    "linear_mix",
    "load_checkpoint",
    "qeq_charges",
    "read_extxyz",
    "save_checkpoint",
    "train",
    "write_extxyz",
]
