"""Extended-XYZ reader and writer.

Per-frame keys understood: ``energy``, ``dipole``, ``polarization``,
``polarizability`` (9 values, row-major), ``virial`` (9 values),
``total_charge``, ``external_field``, ``fidelity``, ``electric_enthalpy``,
plus ``Lattice``/``Properties``/``pbc``. Per-atom columns understood:
``species``/``Z``, ``pos``, ``forces``, ``charges`` (label),
``initial_charges`` (input attribute), ``magmoms`` (1 or 3 columns),
``magnetic_forces``. Anything else is kept verbatim and written back out.
Floats are written with ``repr`` so values round-trip exactly.
"""

from __future__ import annotations

import shlex
from typing import Iterable, List

import numpy as np

from .exceptions import ParseError
from .geometry import LabeledFrame, Structure

SYMBOLS = (
    "X H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni Cu Zn Ga Ge As Se Br Kr "
    "Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe Cs Ba La Ce Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb "
    "Lu Hf Ta W Re Os Ir Pt Au Hg Tl Pb Bi Po At Rn Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No Lr Rf "
    "Db Sg Bh Hs Mt Ds Rg Cn Nh Fl Mc Lv Ts Og"
).split()
ATOMIC_NUMBERS = {s: z for z, s in enumerate(SYMBOLS) if z > 0}

_VECTOR_KEYS = {"dipole": 3, "polarization": 3, "external_field": 3, "polarizability": 9, "virial": 9}
_SCALAR_KEYS = ("energy", "total_charge", "electric_enthalpy")
_FRAME_ORDER = ("energy", "electric_enthalpy", "virial", "dipole", "polarization", "polarizability",
                "total_charge", "external_field", "fidelity")


def _fmt(x) -> str:
    return repr(float(x))


def _parse_comment(line: str, lineno: int, frame: int) -> dict:
    try:
        tokens = shlex.split(line, posix=True)
    except ValueError as exc:
        raise ParseError(f"unbalanced quotes in comment line: {exc}", lineno, frame) from None
    out = {}
    for tok in tokens:
        key, sep, value = tok.partition("=")
        out[key] = value if sep else "T"
    return out


def _parse_properties(spec: str, lineno: int, frame: int):
    parts = spec.split(":")
    if len(parts) % 3:
        raise ParseError(f"malformed Properties string {spec!r}", lineno, frame)
    cols = []
    for k in range(0, len(parts), 3):
        name, kind, count = parts[k], parts[k + 1].upper(), parts[k + 2]
        if kind not in "RISL" or not count.isdigit():
            raise ParseError(f"malformed Properties entry {name}:{kind}:{count}", lineno, frame)
        cols.append((name, kind, int(count)))
    return cols


def _convert(values: List[str], kind: str):
    if kind == "R":
        return np.asarray([float(v) for v in values], dtype=np.float64)
    if kind == "I":
        return np.asarray([int(v) for v in values], dtype=np.int64)
    if kind == "L":
        return np.asarray([v.upper() in ("T", "TRUE", "1") for v in values], dtype=bool)
    return np.asarray(values, dtype=object)


def _parse_pbc(value: str):
    flags = value.split()
    if len(flags) == 1:
        flags = flags * 3
    return tuple(f.upper() in ("T", "TRUE", "1") for f in flags)


def _frame_from_parts(n, header, columns, data, lineno, frame) -> LabeledFrame:
    per_atom = {}
    start = 0
    for name, kind, count in columns:
        block = [row[start:start + count] for row in data]
        start += count
        flat = [v for row in block for v in row]
        try:
            arr = _convert(flat, kind)
        except ValueError:
            raise ParseError(f"could not convert column {name!r} to type {kind}", lineno, frame) from None
        per_atom[name] = (kind, arr.reshape(n, count) if count > 1 else arr.reshape(n))

    if "species" in per_atom:
        symbols = per_atom.pop("species")[1]
        try:
            numbers = np.asarray([ATOMIC_NUMBERS[str(s)] for s in symbols], dtype=np.int64)
        except KeyError as exc:
            raise ParseError(f"unknown element symbol {exc.args[0]!r}", lineno, frame) from None
        per_atom.pop("Z", None)
    elif "Z" in per_atom:
        numbers = per_atom.pop("Z")[1].astype(np.int64)
    else:
        raise ParseError("Properties must contain species or Z", lineno, frame)
    if "pos" not in per_atom:
        raise ParseError("Properties must contain pos", lineno, frame)
    positions = per_atom.pop("pos")[1].reshape(n, 3)

    header = dict(header)
    header.pop("Properties", None)
    cell = None
    if "Lattice" in header:
        vals = header.pop("Lattice").split()
        if len(vals) != 9:
            raise ParseError("Lattice needs 9 values", lineno, frame)
        cell = np.asarray([float(v) for v in vals]).reshape(3, 3)
    pbc = _parse_pbc(header.pop("pbc")) if "pbc" in header else ((cell is not None),) * 3

    known = {}
    try:
        for key in _SCALAR_KEYS:
            if key in header:
                known[key] = float(header.pop(key))
        for key, size in _VECTOR_KEYS.items():
            if key in header:
                vals = [float(v) for v in header.pop(key).split()]
                if len(vals) != size:
                    raise ParseError(f"{key} needs {size} values, got {len(vals)}", lineno, frame)
                known[key] = np.asarray(vals)
        if "fidelity" in header:
            known["fidelity"] = int(header.pop("fidelity"))
    except ValueError as exc:
        raise ParseError(f"bad numeric header value: {exc}", lineno, frame) from None

    magmoms = per_atom.pop("magmoms")[1] if "magmoms" in per_atom else None
    input_charges = per_atom.pop("initial_charges")[1] if "initial_charges" in per_atom else None
    forces = per_atom.pop("forces")[1] if "forces" in per_atom else None
    charges = per_atom.pop("charges")[1] if "charges" in per_atom else None
    mag_forces = per_atom.pop("magnetic_forces")[1] if "magnetic_forces" in per_atom else None
    extra_arrays = {name: arr for name, (kind, arr) in per_atom.items()}

    structure = Structure(
        positions=positions,
        numbers=numbers,
        cell=cell,
        pbc=pbc,
        charges=input_charges,
        magmoms=magmoms,
        total_charge=known.get("total_charge"),
        external_field=known.get("external_field"),
        fidelity=known.get("fidelity"),
        info=header,
        arrays=extra_arrays,
    )
    return LabeledFrame(
        structure=structure,
        energy=known.get("energy"),
        forces=forces,
        virial=known.get("virial"),
        charges=charges,
        magnetic_forces=mag_forces,
        dipole=known.get("dipole"),
        polarization=known.get("polarization"),
        polarizability=known.get("polarizability"),
        electric_enthalpy=known.get("electric_enthalpy"),
    )


def parse_extxyz(text: str) -> List[LabeledFrame]:
    lines = text.splitlines()
    frames = []
    pos = 0
    while pos < len(lines):
        if not lines[pos].strip():
            pos += 1
            continue
        frame = len(frames)
        header_line = pos + 1
        try:
            n = int(lines[pos].strip())
        except ValueError:
            raise ParseError(f"expected atom count, got {lines[pos].strip()!r}", header_line, frame) from None
        if n < 0:
            raise ParseError("negative atom count", header_line, frame)
        if pos + 1 >= len(lines):
            raise ParseError("missing comment line", header_line + 1, frame)
        header = _parse_comment(lines[pos + 1], header_line + 1, frame)
        columns = _parse_properties(header.get("Properties", "species:S:1:pos:R:3"), header_line + 1, frame)
        width = sum(c for _, _, c in columns)
        data = []
        for k in range(n):
            lineno = pos + 3 + k
            if pos + 2 + k >= len(lines):
                raise ParseError(f"header declares {n} atoms but file ended after {k}", lineno, frame)
            row = lines[pos + 2 + k].split()
            if len(row) != width:
                raise ParseError(
                    f"header declares {n} atoms; row {k + 1} has {len(row)} columns, expected {width}",
                    lineno, frame,
                )
            data.append(row)
        frames.append(_frame_from_parts(n, header, columns, data, header_line + 1, frame))
        pos += 2 + n
    return frames


def read_extxyz(path) -> List[LabeledFrame]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_extxyz(fh.read())


def _quote(value: str) -> str:
    if value == "" or any(ch.isspace() for ch in value) or '"' in value or "=" in value:
        return '"' + value.replace('"', '\\"') + '"'
    return value


def _kind_of(arr: np.ndarray) -> str:
    if arr.dtype == bool:
        return "L"
    if np.issubdtype(arr.dtype, np.integer):
        return "I"
    if np.issubdtype(arr.dtype, np.floating):
        return "R"
    return "S"


def _format_value(v, kind):
    if kind == "R":
        return _fmt(v)
    if kind == "L":
        return "T" if v else "F"
    return str(v)


def format_frame(frame: LabeledFrame, extra_info: dict | None = None, extra_arrays: dict | None = None) -> str:
    s = frame.structure
    n = len(s)
    columns = [("species", "S", 1, np.asarray([SYMBOLS[z] for z in s.numbers], dtype=object)),
               ("pos", "R", 3, s.positions)]
    if frame.forces is not None:
        columns.append(("forces", "R", 3, frame.forces))
    if frame.charges is not None:
        columns.append(("charges", "R", 1, frame.charges))
    if s.charges is not None:
        columns.append(("initial_charges", "R", 1, s.charges))
    if s.magmoms is not None:
        if s.collinear:
            columns.append(("magmoms", "R", 1, s.magmoms[:, 2]))
        else:
            columns.append(("magmoms", "R", 3, s.magmoms))
    if frame.magnetic_forces is not None:
        columns.append(("magnetic_forces", "R", 3, frame.magnetic_forces))
    arrays = dict(s.arrays)
    arrays.update(extra_arrays or {})
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        count = 1 if arr.ndim == 1 else arr.shape[1]
        columns.append((name, _kind_of(arr), count, arr))

    header = []
    if s.cell is not None:
        header.append("Lattice=" + _quote(" ".join(_fmt(v) for v in s.cell.ravel())))
    header.append("Properties=" + ":".join(f"{name}:{kind}:{count}" for name, kind, count, _ in columns))
    values = {
        "energy": frame.energy,
        "electric_enthalpy": frame.electric_enthalpy,
        "virial": frame.virial,
        "dipole": frame.dipole,
        "polarization": frame.polarization,
        "polarizability": frame.polarizability,
        "total_charge": s.total_charge,
        "external_field": s.external_field,
        "fidelity": s.fidelity,
    }
    for key in _FRAME_ORDER:
        v = values[key]
        if v is None:
            continue
        if key == "fidelity":
            header.append(f"fidelity={int(v)}")
        elif np.ndim(v) == 0:
            header.append(f"{key}={_fmt(v)}")
        else:
            header.append(f"{key}=" + _quote(" ".join(_fmt(x) for x in np.ravel(v))))
    info = dict(s.info)
    info.update(extra_info or {})
    for key, value in info.items():
        header.append(f"{key}={_quote(str(value))}")
    header.append('pbc="' + " ".join("T" if p else "F" for p in s.pbc) + '"')

    out = [str(n), " ".join(header)]
    for a in range(n):
        row = []
        for _, kind, count, arr in columns:
            if count == 1:
                row.append(_format_value(arr[a], kind))
            else:
                row.extend(_format_value(x, kind) for x in arr[a])
        out.append(" ".join(row))
    return "\n".join(out) + "\n"


def write_extxyz(frames: Iterable[LabeledFrame], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for frame in frames:
            if isinstance(frame, Structure):
                frame = LabeledFrame(structure=frame)
            fh.write(format_frame(frame))
