"""``tace`` command line: decompose, train, eval, predict, les-check, spectra.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from typing import List, Optional, Sequence

import numpy as np
import torch

from . import analysis, electrostatics, ict
from .exceptions import ConfigurationError, NumericalError, TaceError
from .validation import check_tensor_values

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

logger = logging.getLogger("tace")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise UsageError(f"expected numbers, got {text!r}") from None


def _set_threads(threads: int, deterministic: bool) -> None:
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    elif threads > 0:
        torch.set_num_threads(threads)


# -- decompose ---------------------------------------------------------------------


def cmd_decompose(args) -> int:
    if args.file:
        with open(args.file, "r", encoding="utf-8") as fh:
            values = _floats(fh.read())
    elif args.values:
        values = _floats(" ".join(args.values))
    else:
        raise UsageError("give tensor components as arguments or with --file")
    if len(values) != 3**args.rank:
        raise UsageError(f"rank {args.rank} needs {3 ** args.rank} values, got {len(values)}")
    if args.rank > ict.MAX_RANK:
        raise UsageError(f"rank must be at most {ict.MAX_RANK}")
    T = torch.as_tensor(check_tensor_values(np.asarray(values), args.rank))
    parts = ict.decompose(T, args.rank)
    total = torch.zeros_like(T)
    print(f"rank {args.rank}: {len(parts)} irreducible components")
    for p in parts:
        total = total + p.data
        flat = " ".join(f"{v:.10g}" for v in p.data.reshape(-1).tolist())
        print(f"l={p.weight} q={p.label} norm={float(torch.linalg.norm(p.data)):.10g}  {flat}")
    print(f"reconstruction residual {float(torch.linalg.norm(total - T)):.3e}")
    return EXIT_OK


# -- train / eval / predict --------------------------------------------------------


def _read_frames(path):
    from .extxyz import read_extxyz

    return read_extxyz(path)


def cmd_train(args) -> int:
    from .config import load_run_config
    from .model import TACE, save_checkpoint
    from .training import train

    run = load_run_config(args.config, args.set or [])
    _set_threads(run.threads, run.deterministic or args.deterministic)
    if not run.train_path:
        raise ConfigurationError("data.train is required")
    frames = _read_frames(run.train_path)
    valid = _read_frames(run.valid_path) if run.valid_path else None
    species = {int(z) for f in frames for z in f.structure.numbers}
    model = TACE(run.model_config(species))
    os.makedirs(run.directory, exist_ok=True)
    tcfg = run.train_config()
    state = train(model, frames, run.loss, tcfg, valid_frames=valid)
    save_checkpoint(model, tcfg.checkpoint_path, extra={"epoch": state.epoch, "metric": state.best_metric})
    last = state.history[-1] if state.history else {}
    print(f"trained {state.epoch} epochs, best metric {state.best_metric:.6g}")
    for name, (rmse, mae) in sorted(last.get("train", {}).items()):
        print(f"  train {name}: rmse {rmse:.6g} mae {mae:.6g}")
    print(f"checkpoint: {tcfg.checkpoint_path}")
    print(f"metrics: {tcfg.metrics_path}")
    return EXIT_OK


def _load_model(path):
    from .model import load_checkpoint

    model = load_checkpoint(path)
    model.eval()
    return model


UNITS = {
    "energy": "eV/atom", "electric_enthalpy": "eV/atom", "forces": "eV/A", "virial": "eV",
    "charges": "e", "magnetic_forces": "eV/muB", "dipole": "e*A", "polarization": "e*A",
    "polarizability": "e*A^2/V",
}


def cmd_eval(args) -> int:
    from .training import evaluate

    _set_threads(0, args.deterministic)
    model = _load_model(args.checkpoint)
    frames = _read_frames(args.data)
    metrics = evaluate(model, frames)
    print(f"{'label':<18} {'rmse':>14} {'mae':>14}  unit")
    for name, (rmse, mae) in metrics.items():
        print(f"{name:<18} {rmse:>14.6g} {mae:>14.6g}  {UNITS.get(name, '')}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label", "rmse", "mae", "unit"])
            for name, (rmse, mae) in metrics.items():
                w.writerow([name, repr(rmse), repr(mae), UNITS.get(name, "")])
    return EXIT_OK


def cmd_predict(args) -> int:
    from .extxyz import format_frame
    from .gradients import compute_properties

    _set_threads(0, args.deterministic)
    model = _load_model(args.checkpoint)
    frames = _read_frames(args.structures)
    with open(args.output, "w", encoding="utf-8") as fh:
        for f in frames:
            s = f.structure
            batch = model.collate([s])
            out = compute_properties(model, batch, forces=True, stress=args.stress and s.is_periodic)
            info = {"tace_energy": repr(float(out["energy"][0].detach()))}
            arrays = {"tace_forces": out["forces"].detach().numpy()}
            if "stress" in out:
                info["tace_stress"] = " ".join(repr(float(v)) for v in out["stress"][0].detach().reshape(-1))
            for key in ("dipole", "polarizability"):
                if key in out:
                    info[f"tace_{key}"] = " ".join(repr(float(v)) for v in out[key][0].detach().reshape(-1))
            for key in ("charges", "les_charges"):
                if key in out:
                    arrays[f"tace_{key}"] = out[key].detach().numpy()
            fh.write(format_frame(f, extra_info=info, extra_arrays=arrays))
    print(f"wrote {len(frames)} frames to {args.output}")
    return EXIT_OK


# -- les-check ---------------------------------------------------------------------


def _finite_oracle(positions, q, sigma, coulomb) -> float:
    total = 0.0
    for i in range(len(q)):
        for j in range(i + 1, len(q)):
            r = float(np.linalg.norm(positions[j] - positions[i]))
            total += coulomb * math.erf(r / (math.sqrt(2.0) * sigma)) * q[i] * q[j] / r
    return total


def cmd_les_check(args) -> int:
    frames = _read_frames(args.structure)
    s = frames[args.frame].structure
    if args.charges:
        q = np.asarray(_floats(args.charges))
    elif s.charges is not None:
        q = s.charges
    elif frames[args.frame].charges is not None:
        q = frames[args.frame].charges
    else:
        raise UsageError("no charges given (use --charges or an initial_charges column)")
    if len(q) != len(s):
        raise UsageError(f"{len(q)} charges for {len(s)} atoms")
    cfg = electrostatics.LesConfig(args.sigma, args.kcut)
    if s.is_periodic:
        engine = float(electrostatics.les_energy_periodic(s.positions, s.cell, q, cfg, s.pbc))
        oracle = electrostatics.les_energy_periodic_reference(s.positions, s.cell, q, args.sigma, args.kcut)
        kind = "periodic"
    else:
        engine = float(electrostatics.les_energy_finite(s.positions, q, cfg))
        oracle = _finite_oracle(s.positions, q, args.sigma, cfg.coulomb)
        kind = "finite"
    diff = abs(engine - oracle)
    print(f"variant    {kind}")
    print(f"engine     {engine!r} eV")
    print(f"reference  {oracle!r} eV")
    print(f"difference {diff:.3e} eV")
    return EXIT_OK


# -- spectra -----------------------------------------------------------------------


def cmd_spectra(args) -> int:
    dipoles, alphas = analysis.read_tensor_series(args.trajectory)
    out = args.output or (os.path.splitext(args.trajectory)[0] + f"_{args.mode}.dat")
    if args.mode == "ir":
        if dipoles is None:
            raise UsageError("trajectory has no dipole series")
        spec = analysis.ir_spectrum(dipoles, args.dt, args.padding, args.window)
        analysis.write_spectrum(out, {"thz": spec.thz, "cm-1": spec.wavenumber, "intensity": spec.intensity})
        print(f"IR peak at {analysis.peak_frequency(spec):.4f} THz; wrote {out}")
    else:
        if alphas is None:
            raise UsageError("trajectory has no polarizability series")
        spec = analysis.raman_spectra(alphas, args.dt, args.padding, args.window)
        analysis.write_spectrum(out, {"thz": spec.thz, "cm-1": spec.wavenumber,
                                      "isotropic": spec.isotropic, "anisotropic": spec.anisotropic})
        print(f"wrote {out}")
    return EXIT_OK


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tace", description="Irreducible Cartesian tensor potentials and analysis tools.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    d = sub.add_parser("decompose", help="print the irreducible components of a Cartesian tensor")
    d.add_argument("values", nargs="*", help="3**rank components, row-major")
    d.add_argument("--rank", type=int, required=True)
    d.add_argument("--file", help="read components from a whitespace-separated file")
    d.set_defaults(func=cmd_decompose)

    t = sub.add_parser("train", help="train a model from a configuration file")
    t.add_argument("config")
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a configuration value")
    t.add_argument("--deterministic", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-label RMSE and MAE of a checkpoint on a dataset")
    e.add_argument("checkpoint")
    e.add_argument("data")
    e.add_argument("--csv", help="also write the table as CSV")
    e.add_argument("--deterministic", action="store_true")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="append predictions to an extended-XYZ file")
    pr.add_argument("checkpoint")
    pr.add_argument("structures")
    pr.add_argument("output")
    pr.add_argument("--stress", action="store_true", help="also predict stress for periodic frames")
    pr.add_argument("--deterministic", action="store_true")
    pr.set_defaults(func=cmd_predict)

    l = sub.add_parser("les-check", help="compare the LES energy with a brute-force reference")
    l.add_argument("structure")
    l.add_argument("--charges", help="per-atom charges (default: initial_charges column)")
    l.add_argument("--sigma", type=float, default=1.0)
    l.add_argument("--kcut", type=float, default=math.pi)
    l.add_argument("--frame", type=int, default=0)
    l.set_defaults(func=cmd_les_check)

    s = sub.add_parser("spectra", help="IR or Raman spectra from a dipole/polarizability trajectory")
    s.add_argument("trajectory")
    s.add_argument("--dt", type=float, required=True, help="time step in fs")
    s.add_argument("--mode", choices=("ir", "raman"), default="ir")
    s.add_argument("--padding", type=int, default=4)
    s.add_argument("--window", choices=("hann", "none"), default="hann")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_spectra)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"tace: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"tace: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (TaceError, OSError) as exc:
        print(f"tace: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
