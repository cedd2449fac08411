import numpy as np
import pytest
from sklearn.base import clone

from tace.datasets import lj_dataset
from tace.estimator import IrreducibleDecomposer, TACERegressor
from tace.exceptions import ShapeError, UnknownElementError
from tace.geometry import Structure


def test_decomposer_roundtrip(rng):
    X = rng.normal(size=(10, 9))
    dec = IrreducibleDecomposer(rank=2).fit(X)
    Xt = dec.transform(X)
    assert Xt.shape == (10, 3, 9)
    np.testing.assert_allclose(dec.inverse_transform(Xt), X, atol=1e-13)
    assert [w for w, _ in dec.components_] == [0, 1, 2]
    with pytest.raises(ShapeError):
        dec.transform(rng.normal(size=(4, 8)))


def test_decomposer_params():
    dec = IrreducibleDecomposer(rank=3)
    assert dec.get_params() == {"rank": 3}
    assert clone(dec).rank == 3


def test_regressor_fit_predict_score():
    frames = lj_dataset(6, seed=1)
    est = TACERegressor(channels=4, layers=1, l_max=1, edge_l_max=1, correlation=2, radial_hidden=(8,),
                        n_basis=4, cutoff=6.0, epochs=30, random_state=0)
    assert clone(est).get_params()["channels"] == 4
    est.fit(frames)
    e = est.predict(frames)
    assert e.shape == (6,)
    forces = est.predict_forces(frames)
    assert [f.shape for f in forces] == [(len(fr.structure), 3) for fr in frames]
    assert np.isfinite(est.score(frames))
    with pytest.raises(UnknownElementError):
        est.predict([Structure([[0, 0, 0]], [6])])
    y = np.asarray([f.energy for f in frames]) + 1.0
    est2 = TACERegressor(channels=4, layers=1, l_max=1, edge_l_max=1, correlation=2, radial_hidden=(8,),
                         n_basis=4, cutoff=6.0, epochs=2).fit([f.structure for f in frames], y)
    assert est2.predict(frames).shape == (6,)


def test_regressor_not_fitted():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        TACERegressor().predict([Structure([[0, 0, 0]], [1])])
