import csv
import re

import numpy as np
import pytest
import torch

from tace.cli import main
from tace.datasets import lj_dataset
from tace.extxyz import read_extxyz, write_extxyz
from tace.geometry import LabeledFrame, Structure


def run(argv, capsys=None):
    try:
        code = main([str(a) for a in argv])
    except SystemExit as exc:
        code = exc.code
    out = capsys.readouterr() if capsys else None
    return code, out


def test_decompose_identity_and_antisymmetric(capsys):
    code, out = run(["decompose", "--rank", "2", 1, 0, 0, 0, 1, 0, 0, 0, 1], capsys)
    assert code == 0
    norms = {int(m.group(1)): float(m.group(2)) for m in re.finditer(r"l=(\d) q=1 norm=(\S+)", out.out)}
    assert norms[0] > 1 and norms[1] < 1e-12 and norms[2] < 1e-12
    code, out = run(["decompose", "--rank", "2", 0, 1, 2, -1, 0, 3, -2, -3, 0], capsys)
    norms = {int(m.group(1)): float(m.group(2)) for m in re.finditer(r"l=(\d) q=1 norm=(\S+)", out.out)}
    assert norms[1] > 1 and norms[0] < 1e-12 and norms[2] < 1e-12


def test_decompose_rank3_from_file(tmp_path, capsys):
    p = tmp_path / "t.txt"
    p.write_text(" ".join(map(str, np.random.default_rng(0).normal(size=27))))
    code, out = run(["decompose", "--rank", "3", "--file", p], capsys)
    assert code == 0 and "7 irreducible components" in out.out
    assert float(re.search(r"residual (\S+)", out.out).group(1)) < 1e-12


@pytest.mark.parametrize("argv", [
    ["decompose", "--rank", "2", 1, 2, 3],
    ["decompose", "--rank", "2"],
    ["decompose", "--rank", "5"] + [0] * 243,
    ["decompose", "--rank", "1", "a", "b", "c"],
    ["frobnicate"],
    [],
    ["spectra", "x.txt"],
])
def test_usage_errors_exit_1(argv, capsys):
    assert run(argv, capsys)[0] == 1


def _write_config(tmp_path, extra=""):
    write_extxyz(lj_dataset(6, seed=2), tmp_path / "train.xyz")
    text = f"""
[data]
train = train.xyz
[model]
channels = 4
layers = 1
l_max = 1
edge_l_max = 1
correlation = 2
radial_hidden = 8
n_basis = 4
cutoff = 6.0
[optimizer]
epochs = 4
batch_size = 2
[output]
directory = out
{extra}
"""
    p = tmp_path / "run.ini"
    p.write_text(text)
    return p


def test_train_eval_predict(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    code, out = run(["train", cfg, "--deterministic"], capsys)
    assert code == 0, out.err
    ckpt = tmp_path / "out" / "model.pt"
    assert ckpt.exists()
    rows = list(csv.reader(open(tmp_path / "out" / "metrics.csv")))
    assert len(rows) == 5 and rows[0][0] == "epoch"

    code, out = run(["eval", ckpt, tmp_path / "train.xyz", "--csv", tmp_path / "eval.csv"], capsys)
    assert code == 0 and "forces" in out.out
    table = {r["label"]: r for r in csv.DictReader(open(tmp_path / "eval.csv"))}
    assert float(table["forces"]["rmse"]) >= float(table["forces"]["mae"]) > 0

    pred = tmp_path / "pred.xyz"
    code, out = run(["predict", ckpt, tmp_path / "train.xyz", pred], capsys)
    assert code == 0
    frames = read_extxyz(pred)
    assert len(frames) == 6
    assert "tace_energy" in frames[0].structure.info and "tace_forces" in frames[0].structure.arrays


def test_train_deterministic_bit_identical(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    assert run(["train", cfg, "--deterministic", "--set", "output.checkpoint=a.pt"], capsys)[0] == 0
    assert run(["train", cfg, "--deterministic", "--set", "output.checkpoint=b.pt"], capsys)[0] == 0
    a = torch.load(tmp_path / "out" / "a.pt", weights_only=False)["state_dict"]
    b = torch.load(tmp_path / "out" / "b.pt", weights_only=False)["state_dict"]
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_train_config_errors_exit_1(tmp_path, capsys):
    cfg = _write_config(tmp_path, "colour = blue")
    assert run(["train", cfg], capsys)[0] == 1
    cfg = _write_config(tmp_path)
    assert run(["train", cfg, "--set", "model.nonsense=1"], capsys)[0] == 1
    assert run(["train", cfg, "--set", "loss.dipole=1"], capsys)[0] == 1


def test_data_errors_exit_2(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    (tmp_path / "train.xyz").write_text("2\n\nH 0 0 0\n")
    assert run(["train", cfg], capsys)[0] == 2
    assert run(["eval", tmp_path / "missing.pt", tmp_path / "train.xyz"], capsys)[0] == 2
    assert run(["spectra", tmp_path / "nope.txt", "--dt", "1"], capsys)[0] == 2


def test_nan_exit_3(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    frames = lj_dataset(4)
    frames[0].forces[0, 0] = float("nan")
    write_extxyz(frames, tmp_path / "train.xyz")
    code, out = run(["train", cfg], capsys)
    assert code == 3 and "non-finite" in out.err


def test_les_check_periodic_and_finite(tmp_path, capsys):
    s = Structure([[0.0, 0, 0], [1.3, 0.4, 0.2]], [11, 17], cell=np.eye(3) * 4.0, pbc=True, charges=[1.0, -1.0])
    write_extxyz([LabeledFrame(s)], tmp_path / "nacl.xyz")
    code, out = run(["les-check", tmp_path / "nacl.xyz"], capsys)
    assert code == 0 and "periodic" in out.out
    assert float(re.search(r"difference (\S+)", out.out).group(1)) < 1e-10
    f = Structure([[0.0, 0, 0], [1.0, 0, 0]], [1, 1])
    write_extxyz([LabeledFrame(f)], tmp_path / "h2.xyz")
    code, out = run(["les-check", tmp_path / "h2.xyz", "--charges", "1 1"], capsys)
    assert code == 0 and "finite" in out.out
    assert float(re.search(r"engine\s+(\S+)", out.out).group(1)) == pytest.approx(9.8305, abs=1e-4)
    assert run(["les-check", tmp_path / "h2.xyz"], capsys)[0] == 1
    assert run(["les-check", tmp_path / "h2.xyz", "--charges", "1"], capsys)[0] == 1


def test_spectra_command(tmp_path, capsys):
    t = np.arange(1024) * 0.5e-3
    mu = np.zeros((1024, 3))
    mu[:, 0] = np.cos(2 * np.pi * 50.0 * t)
    alpha = np.tile(np.eye(3).reshape(1, 9), (1024, 1)) * (1 + 0.1 * mu[:, :1])
    traj = tmp_path / "traj.txt"
    np.savetxt(traj, np.column_stack([mu, alpha]))
    code, out = run(["spectra", traj, "--dt", "0.5", "-o", tmp_path / "ir.dat"], capsys)
    assert code == 0
    data = np.loadtxt(tmp_path / "ir.dat")
    assert abs(data[np.argmax(data[:, 2]), 0] - 50.0) <= data[1, 0] - data[0, 0]
    code, out = run(["spectra", traj, "--dt", "0.5", "--mode", "raman"], capsys)
    assert code == 0
    raman = np.loadtxt(tmp_path / "traj_raman.dat")
    assert raman.shape[1] == 4
    np.savetxt(traj, mu[:10])
    assert run(["spectra", traj, "--dt", "0.5"], capsys)[0] == 2
    np.savetxt(traj, mu)
    assert run(["spectra", traj, "--dt", "0.5", "--mode", "raman"], capsys)[0] == 1
