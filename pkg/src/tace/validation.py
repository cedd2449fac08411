"""Input checks shared by the estimators and the command line."""

from __future__ import annotations

from typing import List, Sequence

import numpy as np

from .exceptions import ShapeError
from .geometry import LabeledFrame, Structure


def check_frames(X) -> List[LabeledFrame]:
    """Accept labeled frames, bare structures or a mix; always return frames."""
    if isinstance(X, (Structure, LabeledFrame)):
        X = [X]
    out = []
    for k, item in enumerate(X):
        if isinstance(item, LabeledFrame):
            out.append(item)
        elif isinstance(item, Structure):
            out.append(LabeledFrame(structure=item))
        else:
            raise TypeError(f"item {k} is {type(item).__name__}, expected Structure or LabeledFrame")
    return out


def check_structures(X) -> List[Structure]:
    return [f.structure for f in check_frames(X)]


def check_tensor_values(values, rank: int) -> np.ndarray:
    """Reshape flat ``3**rank`` components (optionally batched on leading axes) into tensor form."""
    arr = np.asarray(values, dtype=np.float64)
    size = 3**rank
    if rank > 0 and arr.ndim >= rank and arr.shape[arr.ndim - rank:] == (3,) * rank:
        return arr
    if arr.ndim == 0 and rank == 0:
        return arr
    if arr.ndim >= 1 and arr.shape[-1] == size:
        return arr.reshape(*arr.shape[:-1], *(3,) * rank)
    raise ShapeError(f"rank-{rank} tensor needs {size} components, got shape {arr.shape}")


def check_species(structures: Sequence[Structure], species: Sequence[int]) -> None:
    from .exceptions import UnknownElementError

    known = set(int(z) for z in species)
    for k, s in enumerate(structures):
        bad = sorted(set(int(z) for z in s.numbers) - known)
        if bad:
            raise UnknownElementError(f"structure {k} contains elements {bad} not in the model species {sorted(known)}")
