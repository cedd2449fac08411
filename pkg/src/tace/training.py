"""Loss, dataset statistics and the training loop."""

from __future__ import annotations

import copy
import csv
import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .batching import GraphBatch
from .exceptions import ConfigurationError, NumericalError
from .geometry import LABEL_KEYS, LabeledFrame, build_neighbor_list
from .gradients import compute_properties

logger = logging.getLogger(__name__)

DEFAULT_WEIGHTS = {"energy": 1.0, "forces": 10.0}
LOSS_TERMS = LABEL_KEYS
_PER_ATOM = ("forces", "charges", "magnetic_forces")


@dataclass
class LossConfig:
    """Per-term MSE weights; ``None`` means "default if any frame carries the label, else off"."""

    energy: Optional[float] = None
    forces: Optional[float] = None
    virial: Optional[float] = None
    charges: Optional[float] = None
    magnetic_forces: Optional[float] = None
    dipole: Optional[float] = None
    polarization: Optional[float] = None
    polarizability: Optional[float] = None
    electric_enthalpy: Optional[float] = None

    def resolve(self, frames: Sequence[LabeledFrame]) -> Dict[str, float]:
        """Active weights for ``frames``; raises if a positive weight has no labels at all."""
        out = {}
        for name in LOSS_TERMS:
            w = getattr(self, name)
            present = any(f.has(name) for f in frames)
            if w is None:
                if present:
                    out[name] = DEFAULT_WEIGHTS.get(name, 1.0)
                continue
            if w < 0:
                raise ConfigurationError(f"loss weight for {name} must be non-negative")
            if w > 0:
                if not present:
                    raise ConfigurationError(f"loss weight for {name} is positive but no frame carries {name} labels")
                out[name] = float(w)
        if not out:
            raise ConfigurationError("no loss term is active (no labels found)")
        return out


def check_capabilities(model, weights: Dict[str, float]) -> None:
    cfg = model.cfg
    needs = {
        "charges": cfg.charge_head != "none",
        "dipole": cfg.dipole,
        "polarizability": cfg.polarizability,
        "polarization": model.has_field,
        "magnetic_forces": model.has_magmoms,
    }
    missing = [k for k in weights if not needs.get(k, True)]
    if missing:
        raise ConfigurationError(f"model has no head for weighted labels: {', '.join(missing)}")


@dataclass
class LabelBatch:
    values: Dict[str, torch.Tensor]
    masks: Dict[str, torch.Tensor]


def collate_labels(frames: Sequence[LabeledFrame], names: Sequence[str]) -> LabelBatch:
    values, masks = {}, {}
    for name in names:
        vals, mask = [], []
        for f in frames:
            n = len(f.structure)
            v = getattr(f, name)
            if name in _PER_ATOM:
                shape = (n, 3) if name != "charges" else (n,)
                vals.append(np.zeros(shape) if v is None else np.asarray(v, dtype=np.float64).reshape(shape))
                mask.append(np.full(n, v is not None))
            else:
                shape = {"energy": (), "electric_enthalpy": (), "dipole": (3,), "polarization": (3,)}.get(name, (3, 3))
                vals.append(np.zeros(shape) if v is None else np.asarray(v, dtype=np.float64).reshape(shape))
                mask.append(v is not None)
        if name in _PER_ATOM:
            values[name] = torch.as_tensor(np.concatenate(vals) if vals else np.zeros((0, 3)))
            masks[name] = torch.as_tensor(np.concatenate(mask) if mask else np.zeros(0, dtype=bool))
        else:
            values[name] = torch.as_tensor(np.stack(vals) if vals else np.zeros((0,)))
            masks[name] = torch.as_tensor(np.asarray(mask, dtype=bool))
    return LabelBatch(values, masks)


def minimum_image_polarization(residual: torch.Tensor, cell: torch.Tensor, periodic: torch.Tensor) -> torch.Tensor:
    """Reduce polarization residuals modulo the polarization quantum ``e * lattice vector``."""
    if not bool(periodic.any()):
        return residual
    out = residual.clone()
    idx = torch.nonzero(periodic).reshape(-1)
    c = cell[idx]
    frac = torch.einsum("gi,gij->gj", residual[idx], torch.linalg.inv(c))
    frac = frac - torch.round(frac.detach())
    out[idx] = torch.einsum("gi,gij->gj", frac, c)
    return out


def residuals(pred: Dict[str, torch.Tensor], labels: LabelBatch, batch: GraphBatch) -> Dict[str, Tuple[torch.Tensor, torch.Tensor]]:
    """``name -> (residual elements, mask)`` with one mask entry per residual row."""
    natoms = batch.natoms.to(torch.float64)
    out = {}
    for name, target in labels.values.items():
        mask = labels.masks[name]
        if name in ("energy", "electric_enthalpy"):
            res = (pred["energy"] - target) / torch.clamp(natoms, min=1.0)
        elif name == "polarization":
            res = minimum_image_polarization(pred["polarization"] - target, batch.cell, batch.periodic)
        else:
            res = pred[name] - target
        out[name] = (res, mask)
    return out


def masked_mse(res: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    if not bool(mask.any()):
        return res.sum() * 0.0
    sel = res[mask]
    return (sel * sel).mean()


def compute_loss(pred, labels: LabelBatch, batch: GraphBatch, weights: Dict[str, float]):
    """Weighted sum of masked MSE terms and the per-term breakdown."""
    terms = {}
    total = None
    for name, (res, mask) in residuals(pred, labels, batch).items():
        if name not in weights:
            continue
        terms[name] = masked_mse(res, mask)
        contrib = weights[name] * terms[name]
        total = contrib if total is None else total + contrib
    if total is None:
        total = torch.zeros((), dtype=torch.float64)
    return total, terms


def _derivative_flags(names) -> dict:
    return {
        "forces": "forces" in names,
        "stress": "virial" in names,
        "magnetic": "magnetic_forces" in names,
        "polarization": "polarization" in names,
    }


# -- dataset statistics ------------------------------------------------------------


def fit_isolated_energies(frames: Sequence[LabeledFrame], species: Sequence[int], ridge: float = 1e-8) -> np.ndarray:
    """Least-squares per-species energies from ``E_frame ~ sum_z n_z E_z``."""
    species = list(species)
    labeled = [f for f in frames if f.energy is not None]
    if not labeled:
        logger.warning("no energy labels; isolated-atom energies set to zero")
        return np.zeros(len(species))
    counts = np.zeros((len(labeled), len(species)))
    index = {z: k for k, z in enumerate(species)}
    for row, f in enumerate(labeled):
        for z in f.structure.numbers:
            counts[row, index[int(z)]] += 1
    energies = np.asarray([f.energy for f in labeled])
    lhs = counts.T @ counts + ridge * np.eye(len(species))
    sol = np.linalg.solve(lhs, counts.T @ energies)
    absent = counts.sum(axis=0) == 0
    for z in np.asarray(species)[absent]:
        logger.warning("species Z=%d never appears in the training energies; its isolated energy is 0", z)
    sol[absent] = 0.0
    return sol


def force_rms(frames: Sequence[LabeledFrame]) -> float:
    comps = [f.forces.ravel() for f in frames if f.forces is not None]
    if not comps:
        return 1.0
    rms = float(np.sqrt(np.mean(np.concatenate(comps) ** 2)))
    return rms if rms > 1e-12 else 1.0


def vector_sigma(values: Sequence[np.ndarray]) -> float:
    norms = np.asarray([np.linalg.norm(v, axis=-1) for v in values], dtype=object)
    flat = np.concatenate([np.atleast_1d(n) for n in norms]) if len(norms) else np.zeros(0)
    sigma = float(np.std(flat)) if flat.size else 0.0
    return sigma if sigma > 1e-12 else 1.0


def prepare_model(model, frames: Sequence[LabeledFrame], isolated_energies=None) -> None:
    """Set the dataset statistics stored with the model from the training frames."""
    structures = [f.structure for f in frames]
    e0 = fit_isolated_energies(frames, model.species) if isolated_energies is None else np.asarray(isolated_energies)
    nls = [build_neighbor_list(s, model.cfg.cutoff) for s in structures]
    n_atoms = sum(len(s) for s in structures)
    avg = sum(len(nl) for nl in nls) / n_atoms if n_atoms else 1.0
    with torch.no_grad():
        model.isolated_energies.copy_(torch.as_tensor(e0, dtype=torch.float64))
        model.energy_scale.fill_(force_rms(frames))
        model.avg_neighbors.fill_(avg if avg > 0 else 1.0)
    if model.has_field:
        fields = [s.external_field for s in structures if s.external_field is not None]
        model.set_field_sigma("external_field", vector_sigma(fields) if fields else 1.0)
    if model.has_magmoms:
        moms = [s.magmoms for s in structures if s.magmoms is not None]
        model.set_field_sigma("magmoms", vector_sigma(moms) if moms else 1.0)


# -- training loop -----------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 4
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    amsgrad: bool = True
    patience: int = 50
    factor: float = 0.5
    min_lr: float = 1e-5
    valid_fraction: float = 0.0
    seed: int = 0
    metrics_path: Optional[str] = None
    checkpoint_path: Optional[str] = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.valid_fraction < 1.0:
            raise ConfigurationError("valid_fraction must lie in [0, 1)")
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")


@dataclass
class TrainState:
    epoch: int
    model_state: dict
    optimizer_state: dict
    scheduler_state: dict
    rng_state: dict
    best_metric: float
    best_state: dict
    seed: int
    lr: float
    history: List[dict] = field(default_factory=list)


def split_frames(frames: Sequence[LabeledFrame], valid_fraction: float, seed: int):
    frames = list(frames)
    n_valid = int(round(valid_fraction * len(frames)))
    order = np.random.default_rng(seed).permutation(len(frames))
    valid = [frames[k] for k in order[:n_valid]]
    train = [frames[k] for k in order[n_valid:]]
    return train, valid


class _Prepared:
    """Frames with neighbor lists computed once."""

    def __init__(self, model, frames: Sequence[LabeledFrame]):
        self.frames = list(frames)
        self.nls = [build_neighbor_list(f.structure, model.cfg.cutoff) for f in self.frames]

    def batch(self, model, idx, names):
        frames = [self.frames[k] for k in idx]
        b = model.collate([f.structure for f in frames], [self.nls[k] for k in idx])
        return b, collate_labels(frames, names)


def _metrics(res_lists: Dict[str, List[torch.Tensor]]) -> Dict[str, Tuple[float, float]]:
    out = {}
    for name, parts in res_lists.items():
        if not parts:
            continue
        v = torch.cat([p.reshape(-1) for p in parts]).detach()
        if v.numel() == 0:
            continue
        out[name] = (float(torch.sqrt((v * v).mean())), float(v.abs().mean()))
    return out


def _collect(res_lists, pred, labels, batch) -> None:
    for name, (res, mask) in residuals(pred, labels, batch).items():
        if bool(mask.any()):
            res_lists.setdefault(name, []).append(res[mask].detach())


def evaluate(model, frames: Sequence[LabeledFrame], names: Optional[Sequence[str]] = None, batch_size: int = 8,
             prepared: Optional[_Prepared] = None, weights: Optional[Dict[str, float]] = None):
    """Per-label ``(rmse, mae)`` and, with ``weights``, the mean weighted loss."""
    names = list(names) if names is not None else [k for k in LOSS_TERMS if any(f.has(k) for f in frames)]
    prepared = prepared or _Prepared(model, frames)
    flags = _derivative_flags(names)
    res_lists: Dict[str, List[torch.Tensor]] = {}
    loss_sum, count = 0.0, 0
    for start in range(0, len(prepared.frames), batch_size):
        idx = list(range(start, min(start + batch_size, len(prepared.frames))))
        batch, labels = prepared.batch(model, idx, names)
        pred = compute_properties(model, batch, **flags)
        _collect(res_lists, pred, labels, batch)
        if weights:
            loss, _ = compute_loss(pred, labels, batch, weights)
            loss_sum += float(loss.detach()) * len(idx)
            count += len(idx)
    metrics = _metrics(res_lists)
    return (metrics, loss_sum / count) if weights else metrics


def _optimizer(model, cfg: TrainConfig):
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), amsgrad=cfg.amsgrad)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="min", factor=cfg.factor, patience=cfg.patience, min_lr=cfg.min_lr
    )
    return opt, sched


def _dump_nan(batch_frames: Sequence[LabeledFrame], terms: Dict[str, torch.Tensor], epoch: int) -> str:
    lines = [f"non-finite loss at epoch {epoch}"]
    lines += [f"  term {k} = {float(v.detach())!r}" for k, v in terms.items()]
    for k, f in enumerate(batch_frames):
        s = f.structure
        lines.append(f"  frame {k}: natoms={len(s)} numbers={s.numbers.tolist()} "
                     f"min |r|={np.abs(s.positions).min() if len(s) else 0.0:.3g}")
    return "\n".join(lines)


_CSV_STATS = ("rmse", "mae")


def _csv_header(names):
    cols = ["epoch", "lr"]
    for split in ("train", "valid"):
        for name in names:
            cols += [f"{split}_{name}_{stat}" for stat in _CSV_STATS]
    return cols


def _csv_row(epoch, lr, names, train_m, valid_m):
    row = [epoch, repr(lr)]
    for metrics in (train_m, valid_m):
        for name in names:
            pair = metrics.get(name)
            row += [repr(pair[0]), repr(pair[1])] if pair else ["", ""]
    return row


def train(model, frames: Sequence[LabeledFrame], loss_cfg: Optional[LossConfig] = None,
          cfg: Optional[TrainConfig] = None, valid_frames: Optional[Sequence[LabeledFrame]] = None,
          state: Optional[TrainState] = None, prepare: bool = True) -> TrainState:
    """Fit ``model`` in place; the model ends up holding the best-validation parameters.

    Without validation frames the running training loss of each epoch is the
    selection metric.
    """
    from .model import save_checkpoint

    cfg = cfg or TrainConfig()
    loss_cfg = loss_cfg or LossConfig()
    if valid_frames is None and cfg.valid_fraction > 0:
        frames, valid_frames = split_frames(frames, cfg.valid_fraction, cfg.seed)
    frames = list(frames)
    valid_frames = list(valid_frames or [])
    if not frames:
        raise ConfigurationError("no training frames")
    weights = loss_cfg.resolve(frames)
    check_capabilities(model, weights)
    names = list(weights)
    flags = _derivative_flags(names)
    needs_graph = any(k in weights for k in ("forces", "virial", "magnetic_forces", "polarization"))
    if state is None and prepare:
        prepare_model(model, frames)

    train_data = _Prepared(model, frames)
    valid_data = _Prepared(model, valid_frames) if valid_frames else None
    opt, sched = _optimizer(model, cfg)
    rng = np.random.default_rng(cfg.seed)
    if state is not None:
        model.load_state_dict(state.model_state)
        opt.load_state_dict(state.optimizer_state)
        sched.load_state_dict(state.scheduler_state)
        rng.bit_generator.state = state.rng_state
        start_epoch, best_metric, best_state = state.epoch, state.best_metric, state.best_state
        history = list(state.history)
    else:
        start_epoch, best_metric = 0, math.inf
        best_state = copy.deepcopy(model.state_dict())
        history = []

    if cfg.metrics_path and start_epoch == 0:
        with open(cfg.metrics_path, "w", newline="") as fh:
            csv.writer(fh).writerow(_csv_header(names))

    for epoch in range(start_epoch, cfg.epochs):
        model.train()
        order = rng.permutation(len(frames))
        res_lists: Dict[str, List[torch.Tensor]] = {}
        running, seen = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start: start + cfg.batch_size].tolist()
            batch, labels = train_data.batch(model, idx, names)
            pred = compute_properties(model, batch, create_graph=needs_graph, **flags)
            loss, terms = compute_loss(pred, labels, batch, weights)
            if not torch.isfinite(loss):
                raise NumericalError(_dump_nan([frames[k] for k in idx], terms, epoch))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            _collect(res_lists, pred, labels, batch)
            running += float(loss.detach()) * len(idx)
            seen += len(idx)
        train_metrics = _metrics(res_lists)
        if valid_data is not None:
            model.eval()
            valid_metrics, metric = evaluate(model, valid_frames, names, cfg.batch_size, valid_data, weights)
        else:
            valid_metrics, metric = {}, running / max(seen, 1)
        sched.step(metric)
        lr = opt.param_groups[0]["lr"]
        history.append({"epoch": epoch + 1, "lr": lr, "metric": metric, "train": train_metrics, "valid": valid_metrics})
        if metric < best_metric:
            best_metric = metric
            best_state = copy.deepcopy(model.state_dict())
            if cfg.checkpoint_path:
                save_checkpoint(model, cfg.checkpoint_path, extra={"epoch": epoch + 1, "metric": metric})
        if cfg.metrics_path:
            with open(cfg.metrics_path, "a", newline="") as fh:
                csv.writer(fh).writerow(_csv_row(epoch + 1, lr, names, train_metrics, valid_metrics))
        if epoch % 50 == 0 or epoch + 1 == cfg.epochs:
            logger.info("epoch %d lr %.2e metric %.6g", epoch + 1, lr, metric)

    final = TrainState(
        epoch=max(cfg.epochs, start_epoch),
        model_state=copy.deepcopy(model.state_dict()),
        optimizer_state=copy.deepcopy(opt.state_dict()),
        scheduler_state=copy.deepcopy(sched.state_dict()),
        rng_state=copy.deepcopy(rng.bit_generator.state),
        best_metric=best_metric,
        best_state=best_state,
        seed=cfg.seed,
        lr=opt.param_groups[0]["lr"],
        history=history,
    )
    model.load_state_dict(best_state)
    return final


def save_train_state(state: TrainState, path) -> None:
    torch.save(dataclasses.asdict(state), path)


def load_train_state(path) -> TrainState:
    return TrainState(**torch.load(path, map_location="cpu", weights_only=False))
