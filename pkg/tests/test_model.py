import numpy as np
import pytest
import torch

from tace import ict
from tace.embeddings import AttributeSpec
from tace.exceptions import ConfigurationError, MissingAttributeError, UnknownElementError
from tace.geometry import Structure
from tace.model import TACE, ModelConfig, product_terms

from conftest import random_cluster, random_crystal, random_rotation, small_model


def _energy(model, structures):
    with torch.no_grad():
        return model(model.collate(structures))


def _transform(s, R=None, t=None, perm=None):
    pos = s.positions @ (R.T if R is not None else np.eye(3))
    if t is not None:
        pos = pos + t
    cell = s.cell if s.cell is None or R is None else s.cell @ R.T
    numbers = s.numbers
    if perm is not None:
        pos, numbers = pos[perm], numbers[perm]
    return Structure(pos, numbers, cell=cell, pbc=s.pbc)


@pytest.mark.parametrize("opts", [
    dict(),
    dict(path_mode="all", channels=4),
    dict(weight_mode="uncoupled"),
    dict(layers=1, correlation=2),
    dict(l_max=3, edge_l_max=3, channels=4, correlation=2),
])
def test_energy_invariance(opts, rng):
    model = small_model(**opts)
    for trial in range(6):
        s = random_cluster(rng, n=5) if trial % 2 else random_crystal(rng, n=4)
        e0 = float(_energy(model, [s])["energy"])
        R = random_rotation(rng, improper=trial % 3 == 0)
        perm = rng.permutation(len(s))
        e1 = float(_energy(model, [_transform(s, R, rng.normal(size=3), perm)])["energy"])
        assert abs(e1 - e0) <= 1e-9 * max(1.0, abs(e0))


def test_node_energies_permute_with_atoms(rng):
    model = small_model()
    s = random_cluster(rng, n=6)
    perm = rng.permutation(6)
    a = _energy(model, [s])["node_energy"]
    b = _energy(model, [_transform(s, perm=perm)])["node_energy"]
    torch.testing.assert_close(b, a[perm], rtol=0, atol=1e-12)


def test_dipole_and_polarizability_equivariance(rng):
    model = small_model(dipole=True, polarizability=True)
    for trial in range(5):
        s = random_cluster(rng, n=5)
        R = random_rotation(rng, improper=trial % 2 == 1)
        out0 = _energy(model, [s])
        out1 = _energy(model, [_transform(s, R, rng.normal(size=3))])
        Rt = torch.as_tensor(R)
        mu, alpha = out0["dipole"][0], out0["polarizability"][0]
        torch.testing.assert_close(out1["dipole"][0], Rt @ mu, rtol=0, atol=1e-10 * float(mu.norm()) + 1e-14)
        torch.testing.assert_close(out1["polarizability"][0], Rt @ alpha @ Rt.T, rtol=0, atol=1e-10 * float(alpha.norm()))
        torch.testing.assert_close(alpha, alpha.T, rtol=0, atol=0)
        aniso = alpha - torch.trace(alpha) / 3 * torch.eye(3, dtype=alpha.dtype)
        assert abs(float(torch.trace(aniso))) <= 1e-14 * float(alpha.norm())


def test_centrosymmetric_dipole_vanishes():
    model = small_model(dipole=True)
    s = Structure([[1.0, 0.2, 0.0], [-1.0, -0.2, 0.0], [0.0, 0.9, 0.4], [0.0, -0.9, -0.4]], [8, 8, 1, 1])
    mu = _energy(model, [s])["dipole"][0]
    assert float(mu.abs().max()) < 1e-12


def test_polarizability_isotropic_when_head_zeroed(rng):
    model = small_model(polarizability=True)
    with torch.no_grad():
        model.alpha_aniso.zero_()
    alpha = _energy(model, [random_cluster(rng)])["polarizability"][0]
    torch.testing.assert_close(alpha, alpha[0, 0] * torch.eye(3, dtype=alpha.dtype), rtol=0, atol=1e-15)


def test_determinism(rng):
    s = random_cluster(rng)
    a = _energy(small_model(dipole=True), [s])
    b = _energy(small_model(dipole=True), [s])
    assert torch.equal(a["energy"], b["energy"]) and torch.equal(a["dipole"], b["dipole"])
    c = _energy(small_model(seed=5), [s])
    assert not torch.equal(a["energy"], c["energy"])


def test_batched_equals_individual(rng):
    model = small_model()
    structs = [random_cluster(rng, n=k) for k in (2, 3, 5)] + [random_crystal(rng, n=3)]
    batched = _energy(model, structs)["energy"]
    single = torch.cat([_energy(model, [s])["energy"] for s in structs])
    torch.testing.assert_close(batched, single, rtol=1e-13, atol=1e-13)


def test_empty_structure():
    model = small_model()
    out = _energy(model, [Structure(np.zeros((0, 3)), [])])
    assert out["energy"].shape == (1,) and float(out["energy"][0]) == 0.0
    assert out["node_energy"].shape == (0,)


def test_isolated_atom_and_separated_dimer():
    model = small_model()
    with torch.no_grad():
        model.isolated_energies.copy_(torch.tensor([-13.6, -432.1], dtype=torch.float64))
    e_h = float(_energy(model, [Structure([[0, 0, 0]], [1])])["energy"])
    assert e_h == -13.6
    far = Structure([[0, 0, 0], [0, 0, model.cfg.cutoff + 0.1]], [1, 8])
    assert float(_energy(model, [far])["energy"]) == pytest.approx(-13.6 - 432.1, abs=1e-12)


def test_locality(rng):
    """An atom beyond layers * cutoff of atom 0 does not influence its site energy."""
    model = small_model(layers=2, cutoff=2.0)
    chain = np.array([[0, 0, 0], [1.5, 0, 0], [3.0, 0.2, 0], [7.5, 0, 0], [8.6, 0.3, 0]])
    s = Structure(chain, [1, 8, 1, 8, 1])
    moved = s.copy(positions=chain + np.array([[0, 0, 0]] * 3 + [[0.3, -0.2, 0.1], [0.1, 0.4, 0]]))
    a = _energy(model, [s])["node_energy"]
    b = _energy(model, [moved])["node_energy"]
    assert abs(float(a[0] - b[0])) <= 1e-12
    assert abs(float(a[3] - b[3])) > 1e-8


def test_first_layer_is_two_body(rng):
    """With correlation 1 the first-layer site energy is a sum over neighbors of pair terms."""
    model = small_model(layers=2, correlation=1, cutoff=4.0)
    with torch.no_grad():
        model.avg_neighbors.fill_(2.0)
    s = Structure([[0, 0, 0], [1.2, 0.3, 0], [-0.4, 1.1, 0.5]], [8, 1, 1])
    full = _energy(model, [s])["layer_energies"][0]
    pair = lambda j: _energy(model, [Structure(s.positions[[0, j]], s.numbers[[0, j]])])["layer_energies"][0][0]
    assert float(full[0]) == pytest.approx(float(pair(1) + pair(2)), abs=1e-10)


def test_cutoff_continuity():
    model = small_model(cutoff=3.0)
    rc = model.cfg.cutoff
    es = []
    for d in np.arange(rc - 5e-4, rc + 5e-4, 1e-4):
        s = Structure([[0, 0, 0], [1.0, 0, 0], [1.0 + d, 0.0, 0.0]], [1, 8, 1])
        es.append(float(_energy(model, [s])["energy"]))
    assert np.max(np.abs(np.diff(es))) < 1e-8


def test_unknown_species_and_missing_attributes():
    model = small_model()
    with pytest.raises(UnknownElementError):
        model.collate([Structure([[0, 0, 0]], [6])])
    fid = small_model(invariant_attributes=(AttributeSpec("fidelity", "discrete", 2),))
    with pytest.raises(MissingAttributeError):
        _energy(fid, [Structure([[0, 0, 0], [1, 0, 0]], [1, 8])])
    field = small_model(equivariant_attributes=("external_field",))
    with pytest.raises(MissingAttributeError):
        _energy(field, [Structure([[0, 0, 0], [1, 0, 0]], [1, 8])])


def test_fidelity_and_charge_change_energy(rng):
    s = random_cluster(rng)
    fid = small_model(invariant_attributes=(AttributeSpec("fidelity", "discrete", 2),))
    e0 = float(_energy(fid, [s.copy(fidelity=0)])["energy"])
    e1 = float(_energy(fid, [s.copy(fidelity=1)])["energy"])
    assert abs(e0 - e1) > 1e-8
    q = small_model(invariant_attributes=(AttributeSpec("total_charge"),))
    a = _energy(q, [s.copy(total_charge=0.0)])["node_energy"]
    b = _energy(q, [s.copy(total_charge=1.0)])["node_energy"]
    assert float((a - b).abs().max()) > 1e-8


@pytest.mark.parametrize("kwargs", [
    dict(dipole=True, l_max=0, edge_l_max=0),
    dict(polarizability=True, l_max=1, edge_l_max=1),
    dict(layers=0),
    dict(correlation=0),
    dict(l_max=3, edge_l_max=2),
    dict(edge_l_max=5),
    dict(path_mode="some"),
    dict(weight_mode="both"),
    dict(charge_head="magic"),
    dict(equivariant_attributes=("spin",)),
    dict(equivariant_attributes=("external_field",), l_max=0, edge_l_max=0),
    dict(species=()),
    dict(species=(1, 1)),
    dict(cutoff=0.0),
])
def test_configuration_errors(kwargs):
    with pytest.raises(ConfigurationError):
        ModelConfig(**kwargs)


def test_config_dict_roundtrip():
    cfg = ModelConfig(species=(1, 8), invariant_attributes=(AttributeSpec("fidelity", "discrete", 3),), les=True)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_residual_and_weight_shapes():
    two = small_model(layers=2)
    assert not two.layers[0].residual and two.layers[1].residual
    assert small_model(layers=1, correlation=2).layers[0].residual
    coupled, uncoupled = small_model(), small_model(weight_mode="uncoupled")
    key = next(iter(coupled.layers[0].mix_b))
    assert coupled.layers[0].mix_b[key].shape == (2, 8)
    assert uncoupled.layers[0].mix_b[key].shape == (1, 8)


def test_product_term_counts():
    assert len(product_terms(2, 1)) == 3
    terms = product_terms(2, 3)
    assert len(terms) == 28
    assert all(list(t.factors) == sorted(t.factors) for t in terms)


def test_layer_operations_directly(rng):
    model = small_model(layers=1, correlation=3)
    layer = model.layers[0]
    n_edges = 4
    rhat = torch.as_tensor(rng.normal(size=(n_edges, 3)))
    rhat = rhat / rhat.norm(dim=-1, keepdim=True)
    from tace.embeddings import edge_tensors

    edges = [e.unsqueeze(1) for e in edge_tensors(rhat, model.cfg.edge_l_max)]
    senders = torch.tensor([1, 0, 2, 1])
    c = model.cfg.channels
    ones = layer.radial.layers[-1].out_features
    radial = torch.ones(n_edges, ones, dtype=torch.float64)
    # unit scalar features and unit radial weights give back the angular tensor
    msgs = layer.one_particle_basis({0: torch.ones(3, c, dtype=torch.float64)}, edges, radial, senders, 2)
    torch.testing.assert_close(msgs[0], edges[2].expand(-1, c, 3, 3))
    # zero radial weights
    zero = layer.one_particle_basis({0: torch.ones(3, c, dtype=torch.float64)}, edges, 0 * radial, senders, 2)
    assert all(torch.count_nonzero(m) == 0 for m in zero)
    # linear in h
    h1, h2 = torch.as_tensor(rng.normal(size=(3, c))), torch.as_tensor(rng.normal(size=(3, c)))
    r = torch.as_tensor(rng.normal(size=(n_edges, ones)))
    f = lambda h: layer.one_particle_basis({0: h}, edges, r, senders, 1)[0]
    torch.testing.assert_close(f(h1 + h2), f(h1) + f(h2), rtol=0, atol=1e-12)
    # product basis: single factor is A; A = 0 gives B = 0; rank-0 from two rank-1 factors is a dot product
    A = {nu: torch.as_tensor(rng.normal(size=(3, c) + (3,) * nu)) for nu in layer.out_ranks}
    B = layer.product_basis(A)
    for nu in layer.out_ranks:
        torch.testing.assert_close(B[f"{nu}-{nu}"], A[nu], rtol=0, atol=0)
    torch.testing.assert_close(B["1_1-1_0"], (A[1] * A[1]).sum(-1) / np.sqrt(3.0), rtol=1e-14, atol=1e-14)
    zeroB = layer.product_basis({nu: torch.zeros_like(a) for nu, a in A.items()})
    assert all(torch.count_nonzero(b) == 0 for b in zeroB.values())
    # zero weights give zero features
    species = torch.tensor([0, 1, 0])
    with torch.no_grad():
        for p in list(layer.mix_b.values()) + list(layer.mix_res.values()):
            p.zero_()
    h = layer.message_update(B, A, species)
    assert all(torch.count_nonzero(v) == 0 for v in h.values())


def test_atomic_basis_mirror(rng):
    model = small_model(layers=1, correlation=1)
    s = random_cluster(rng, n=4)
    mirror = np.diag([1.0, 1.0, -1.0])

    def first_a1(struct):
        batch = model.collate([struct])
        pos, cell, vec = model._geometry(batch)
        r = vec.norm(dim=-1)
        from tace.embeddings import edge_tensors

        edges = [e.unsqueeze(1) for e in edge_tensors(vec / r.unsqueeze(-1), model.cfg.edge_l_max)]
        h = {0: model.element(batch.species)}
        _, A = model.layers[0](h, edges, model.basis(r), batch, model.avg_neighbors, {})
        return A[1]

    with torch.no_grad():
        a = first_a1(s)
        b = first_a1(_transform(s, mirror))
    torch.testing.assert_close(b, a @ torch.as_tensor(mirror).T, rtol=0, atol=1e-10)


def test_charge_heads_conserve_total_charge(rng):
    for head in ("direct", "qeq"):
        model = small_model(charge_head=head)
        structs = [random_cluster(rng).copy(total_charge=q) for q in (0.0, 1.0, -2.0)]
        out = _energy(model, structs)
        batch = model.collate(structs).batch
        totals = torch.zeros(3, dtype=torch.float64).index_add(0, batch, out["charges"])
        torch.testing.assert_close(totals, torch.tensor([0.0, 1.0, -2.0], dtype=torch.float64), rtol=0, atol=1e-12)
        if head == "qeq":
            assert torch.all(out["eta"] > 0)


def test_les_head(rng):
    model = small_model(les=True)
    s = random_cluster(rng)
    out = _energy(model, [s])
    assert out["les_charges"].shape == (len(s),)
    R = random_rotation(rng)
    rot = _energy(model, [_transform(s, R)])
    torch.testing.assert_close(rot["les_charges"], out["les_charges"], rtol=0, atol=1e-11)
    with torch.no_grad():
        model.les_head.zero_()
    zero = _energy(model, [s])
    assert float(zero["long_range_energy"][0]) == 0.0
    crystal = _energy(model, [random_crystal(rng)])
    assert float(crystal["long_range_energy"][0]) == 0.0
