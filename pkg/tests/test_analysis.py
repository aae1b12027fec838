import csv

import numpy as np
import pytest

from biharmdg.analysis import (CSV_COLUMNS, RunRecord, ZeroErrorError, dg_error, discrete_solve,
                               effectivity, eoc, fill_eoc, graded_rule, hessian_error,
                               run_uniform, write_records)
from biharmdg.forms import generalized_hessian
from biharmdg.mesh import lshape, refine_nvb
from biharmdg.polybasis import quad_triangle
from biharmdg.problems import (lshape_singular, polynomial_problem, random_polynomial,
                               square_sine)


def test_errors_vanish_for_polynomial_solution():
    prob = polynomial_problem(random_polynomial(3, np.random.default_rng(0)), lshape)
    mesh = refine_nvb(lshape(), [0, 2])
    sol = discrete_solve(prob, mesh, 3)
    assert hessian_error(prob.hess, sol.H) < 1e-9
    assert dg_error(prob.hess, sol.u_h, prob.boundary) < 1e-9


def test_effectivity():
    assert effectivity(2.0, 1.0) == 2.0
    with pytest.raises(ZeroErrorError):
        effectivity(1.0, 1e-15)
    with pytest.raises(ZeroDivisionError):
        effectivity(1.0, 0.0)


def test_eoc():
    o = eoc([0.1, 0.025], [1.0, 0.5])
    assert np.isnan(o[0])
    assert o[1] == pytest.approx(2.0)
    assert len(eoc([], [])) == 0


def test_fill_eoc_and_record_row():
    recs = [RunRecord(1, 2, 12, 1.0, 4.0, 2.0, eta=8.0, gimel=4.0),
            RunRecord(2, 8, 48, 0.5, 1.0, 1.0, eta=2.0, gimel=2.0)]
    fill_eoc(recs)
    assert recs[1].eoc_hess == pytest.approx(2.0)
    assert recs[1].eoc_dg == pytest.approx(1.0)
    row = recs[1].row()
    assert tuple(row) == CSV_COLUMNS
    assert row["eff_hess"] == 2.0 and row["eff_dg"] == 2.0


def test_row_with_zero_error_has_nan_effectivity():
    r = RunRecord(1, 2, 12, 1.0, 0.0, 0.0, eta=0.0, gimel=0.0)
    assert np.isnan(r.row()["eff_hess"])


def test_graded_rule():
    base = quad_triangle(6)
    for v in range(3):
        g = graded_rule(base, v, 3)
        assert g.weights.sum() == pytest.approx(0.5, abs=1e-14)
        x, y = g.points.T
        assert np.sum(g.weights * x**3 * y**2) == pytest.approx(6 * 2 / 5040, rel=1e-12)
    # singular integrand r^(-0.9) at vertex 0 is resolved better by the graded rule
    f = lambda p: np.hypot(p[:, 0], p[:, 1]) ** -0.9
    fine = graded_rule(quad_triangle(30), 0, 25)
    exact = np.sum(fine.weights * f(fine.points))
    plain = abs(np.sum(base.weights * f(base.points)) - exact)
    g3 = graded_rule(base, 0, 3)
    graded = abs(np.sum(g3.weights * f(g3.points)) - exact)
    assert graded < plain / 4


def test_write_records(tmp_path):
    write_records([], tmp_path / "a.csv")
    rows = list(csv.reader(open(tmp_path / "a.csv")))
    assert rows == [list(CSV_COLUMNS)]
    rec = RunRecord(1, 2, 12, 1.0, 1.0, 1.0, eta=2.0, gimel=3.0)
    write_records([rec], tmp_path / "b.csv", warning="truncated")
    rows = list(csv.reader(open(tmp_path / "b.csv")))
    assert len(rows) == 3 and rows[2][0] == "# truncated"
    assert float(rows[1][CSV_COLUMNS.index("eff_dg")]) == pytest.approx(3.0)


def test_run_uniform_truncation_and_eoc():
    records, warning = run_uniform(square_sine(), 2, 5, max_dofs=800)
    assert [r.ndof for r in records] == [12, 48, 192, 768]
    assert "level 5" in warning
    assert np.isnan(records[0].eoc_hess)
    hs = [r.h for r in records]
    np.testing.assert_allclose(np.diff(np.log2(hs)), -1.0)


def test_run_uniform_red_refinement_and_bad_name():
    records, _ = run_uniform(square_sine(), 2, 2, refinement="red")
    assert [r.nelem for r in records] == [2, 8]
    with pytest.raises(ValueError):
        run_uniform(square_sine(), 2, 2, refinement="blue")


def test_corner_quadrature_converges():
    prob = lshape_singular()
    sol = discrete_solve(prob, lshape(), 2)
    a = hessian_error(prob.hess, sol.H, prob.singular_point)
    b = hessian_error(prob.hess, sol.H, prob.singular_point, boost=10)
    assert a == pytest.approx(b, rel=1e-3)


def test_generalized_hessian_matches_solution_field():
    prob = square_sine()
    sol = discrete_solve(prob, prob.initial_mesh(), 3)
    H = generalized_hessian(sol.u_h, prob.boundary)
    np.testing.assert_allclose(H.coef, sol.H.coef)
