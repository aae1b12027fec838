import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import biharmdg.adapt as adapt_mod
from biharmdg.adapt import (AdaptConfig, AdaptError, adapt_run, corner_diameter, doerfler_mark,
                            slope)
from biharmdg.analysis import RunRecord
from biharmdg.linalg import SolverError
from biharmdg.mesh import lshape
from biharmdg.problems import lshape_singular, square_sine


def test_doerfler_examples():
    np.testing.assert_array_equal(doerfler_mark([16, 9, 4, 1], 0.5), [0])
    np.testing.assert_array_equal(doerfler_mark([1, 4, 16, 9], 0.5), [2])
    np.testing.assert_array_equal(doerfler_mark([3.0, 1.0, 2.0, 5.0], 1 - 1e-12), [0, 1, 2, 3])
    assert len(doerfler_mark(np.ones(7), 0.5)) == 4
    assert len(doerfler_mark(np.ones(8), 0.5)) == 4


def test_doerfler_ties_by_id():
    np.testing.assert_array_equal(doerfler_mark([1, 1, 1, 1], 0.4), [0, 1])


def test_doerfler_edge_cases():
    assert doerfler_mark(np.zeros(5), 0.5).size == 0
    with pytest.raises(ValueError):
        doerfler_mark([1.0, -1.0], 0.5)
    with pytest.raises(ValueError):
        doerfler_mark([1.0], 1.0)
    with pytest.raises(ValueError):
        doerfler_mark([1.0], 0.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=40),
       st.floats(0.01, 0.99))
def test_doerfler_is_greedy_minimal_prefix(vals, theta):
    eta2 = np.array(vals)
    M = doerfler_mark(eta2, theta)
    total = eta2.sum()
    if total == 0:
        assert M.size == 0
        return
    order = np.lexsort((np.arange(eta2.size), -eta2))
    k = M.size
    np.testing.assert_array_equal(np.sort(order[:k]), M)
    assert eta2[M].sum() >= theta * total * (1 - 1e-12)
    assert eta2[order[:k - 1]].sum() < theta * total


def test_config_validation():
    with pytest.raises(ValueError):
        AdaptConfig(theta=1.0)
    with pytest.raises(ValueError):
        AdaptConfig(estimator="zeta")
    with pytest.raises(ValueError):
        AdaptConfig(p=1)
    with pytest.raises(ValueError):
        AdaptConfig(max_dofs=0)
    assert AdaptConfig().theta == 0.5


def test_adapt_run_respects_caps():
    recs = adapt_run(square_sine(), config=AdaptConfig(p=2, max_levels=4, max_dofs=10_000))
    assert len(recs) == 4
    assert all(b.ndof > a.ndof for a, b in zip(recs, recs[1:]))
    recs = adapt_run(square_sine(), config=AdaptConfig(p=2, max_levels=50, max_dofs=200))
    assert recs[-1].ndof <= 200 and len(recs) < 50


def test_adapt_run_gimel_and_mesh_callback():
    seen = []
    recs = adapt_run(lshape_singular(), config=AdaptConfig(p=2, estimator="gimel", max_levels=3),
                     mesh_callback=lambda it, m: seen.append((it, m.n_elements)))
    assert [s[0] for s in seen] == [1, 2, 3]
    assert [s[1] for s in seen] == [r.nelem for r in recs]
    assert all("corner_h" in r.extra for r in recs)


def test_adapt_error_carries_iteration(monkeypatch):
    real = adapt_mod.discrete_solve
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 2:
            raise SolverError("boom")
        return real(*args, **kwargs)

    monkeypatch.setattr(adapt_mod, "discrete_solve", flaky)
    with pytest.raises(AdaptError) as exc:
        adapt_run(square_sine(), config=AdaptConfig(p=2, max_levels=3))
    assert exc.value.iteration == 2


def test_corner_diameter():
    assert corner_diameter(lshape(), (0.0, 0.0)) == pytest.approx(np.sqrt(2))
    assert np.isnan(corner_diameter(lshape(), (0.3, 0.3)))


def test_slope():
    recs = [RunRecord(i, 1, n, 1.0, n ** -0.5, 1.0) for i, n in enumerate([10, 100, 1000])]
    assert slope(recs) == pytest.approx(-0.5)
    with pytest.raises(ValueError):
        slope(recs[:1])
