"""Acceptance criteria, each printed as one PASS/FAIL line.

Runtime is dominated by the uniform p=2 (8 levels) and p=5 (7 levels)
studies on the unit square, the uniform L-shape studies, the degree study
up to p=20 and two adaptive runs; about ten minutes in total.
"""
import numpy as np
import pytest

from biharmdg import verify
from biharmdg.adapt import AdaptConfig, adapt_run, slope
from biharmdg.analysis import run_pstudy, run_uniform
from biharmdg.problems import Z_LSHAPE, lshape_singular, square_sine

# published (DG error, Hessian error) per level for the square-sine problem
REFERENCE_P2 = [(1.5095e1, 9.4596e0), (1.4193e1, 1.1561e1), (1.1255e1, 1.0065e1),
                (4.7746e0, 5.3481e0), (2.4031e0, 2.7127e0), (1.2006e0, 1.3597e0),
                (5.9949e-1, 6.8016e-1), (2.9948e-1, 3.4011e-1)]
REFERENCE_P5 = [(9.1635e0, 8.7192e0), (1.9076e0, 1.7656e0), (2.8588e-2, 2.5638e-2),
                (7.0726e-3, 6.6088e-3), (4.4821e-4, 4.1799e-4), (2.8049e-5, 2.6155e-5),
                (1.7624e-6, 1.6442e-6)]
MAGNITUDE_FACTOR = 2.0
BAND_RATIO = 3.0


@pytest.fixture(scope="module")
def square_p2():
    return run_uniform(square_sine(), 2, 8)[0]


@pytest.fixture(scope="module")
def square_p5():
    return run_uniform(square_sine(), 5, 7)[0]


@pytest.fixture(scope="module")
def lshape_p2():
    return run_uniform(lshape_singular(), 2, 7)[0]


def _magnitudes(records, reference):
    worst = 1.0
    for r, (dg, hs) in zip(records, reference):
        for ours, ref in ((r.err_dg, dg), (r.err_hess, hs)):
            worst = max(worst, ours / ref, ref / ours)
    return worst


def _orders(records, first):
    return [(r.level, r.eoc_hess, r.eoc_dg) for r in records if r.level >= first]


def test_uniform_square_p2(square_p2, criterion):
    assert len(square_p2) == 8
    orders = _orders(square_p2, 6)
    eoc_ok = all(abs(a - 1) <= 0.05 and abs(b - 1) <= 0.05 for _, a, b in orders)
    worst = _magnitudes(square_p2, REFERENCE_P2)
    detail = (", ".join(f"L{l} {a:.3f}/{b:.3f}" for l, a, b in orders)
              + f"; worst magnitude factor {worst:.3f}")
    criterion("uniform square-sine p=2: orders 1.00+-0.05 at levels>=6, magnitudes within x2",
              eoc_ok and worst <= MAGNITUDE_FACTOR, detail)


def test_uniform_square_p5(square_p5, criterion):
    assert len(square_p5) == 7
    orders = _orders(square_p5, 5)
    eoc_ok = all(abs(a - 4) <= 0.10 and abs(b - 4) <= 0.10 for _, a, b in orders)
    worst = _magnitudes(square_p5, REFERENCE_P5)
    detail = (", ".join(f"L{l} {a:.3f}/{b:.3f}" for l, a, b in orders)
              + f"; worst magnitude factor {worst:.3f}")
    criterion("uniform square-sine p=5: orders 4.00+-0.10 at levels>=5, magnitudes within x2",
              eoc_ok and worst <= MAGNITUDE_FACTOR, detail)


def test_error_measures_agree(square_p2, square_p5, criterion):
    ratios = [r.err_hess / r.err_dg for r in square_p2 + square_p5]
    criterion("error measures agree within [1/2, 2] on all square-sine levels",
              all(0.5 <= q <= 2.0 for q in ratios),
              f"ratio range [{min(ratios):.3f}, {max(ratios):.3f}]")


def test_monotone_decrease_p2(square_p2):
    for name in ("err_hess", "err_dg"):
        e = [getattr(r, name) for r in square_p2 if r.level >= 4]
        assert all(b < a for a, b in zip(e, e[1:]))


def _band(records):
    f = [r.eff_hess for r in records if r.level >= 3]
    return max(f) / min(f), f


RELIABILITY_RUNS = [("square-sine", 3, 6), ("square-sine", 4, 6),
                    ("lshape-singular", 3, 6), ("lshape-singular", 4, 6),
                    ("lshape-singular", 5, 6)]


def test_effectivity_band(square_p2, square_p5, lshape_p2, criterion):
    runs = {("square-sine", 2): square_p2, ("square-sine", 5): square_p5,
            ("lshape-singular", 2): lshape_p2}
    problems = {"square-sine": square_sine, "lshape-singular": lshape_singular}
    for name, p, levels in RELIABILITY_RUNS:
        runs[(name, p)] = run_uniform(problems[name](), p, levels)[0]
    parts, ok = [], True
    for (name, p), recs in sorted(runs.items()):
        ratio, f = _band(recs)
        ok &= ratio <= BAND_RATIO and all(np.isfinite(f))
        parts.append(f"{name} p={p} {min(f):.2f}..{max(f):.2f} (x{ratio:.2f})")
    criterion("eta effectivity band max/min <= 3 over levels>=3, p=2..5, both problems",
              ok, "; ".join(parts))


@pytest.fixture(scope="module")
def pstudy_rows():
    return run_pstudy(lshape_singular(), range(2, 21))


def test_pstudy(pstudy_rows, criterion):
    rows = pstudy_rows
    assert all(r["status"] == "ok" for r in rows)
    p = np.array([r["p"] for r in rows])
    fh = np.array([r["eff_hess"] for r in rows])
    fd = np.array([r["eff_dg"] for r in rows])
    grow = (fh[-1] >= 5 * fh[0] and fd[-1] >= 5 * fd[0]
            and np.all(np.diff(fh[p >= 4]) > 0) and np.all(np.diff(fd) > 0))
    ratio = fh / fd
    close = np.all((ratio[p >= 15] >= 0.5) & (ratio[p >= 15] <= 2.0))
    trend = abs(ratio[-1] - 1) < abs(ratio[0] - 1)
    detail = (f"F_Hbb {fh[0]:.2f}->{fh[-1]:.2f}, F_DG {fd[0]:.2f}->{fd[-1]:.2f}, "
              f"ratio {ratio[0]:.3f}->{ratio[-1]:.3f}, p>=15 in "
              f"[{ratio[p >= 15].min():.3f}, {ratio[p >= 15].max():.3f}]")
    criterion("degree study: both indices grow with p, ratio tends to 1 (in [1/2,2] for p>=15)",
              bool(grow and close and trend), detail)


@pytest.fixture(scope="module")
def adaptive_p2():
    return adapt_run(lshape_singular(), config=AdaptConfig(p=2, max_levels=40, max_dofs=20_000))


@pytest.fixture(scope="module")
def adaptive_p5():
    return adapt_run(lshape_singular(), config=AdaptConfig(p=5, max_levels=80, max_dofs=40_000))


def test_adaptive_rates(lshape_p2, adaptive_p2, adaptive_p5, criterion):
    uni = slope(lshape_p2, first=2)
    a2 = slope(adaptive_p2, first=len(adaptive_p2) // 2)
    a5 = slope(adaptive_p5, first=len(adaptive_p5) // 2)
    ok = (abs(uni + Z_LSHAPE / 2) <= 0.05 and abs(a2 + 0.5) <= 0.08 and abs(a5 + 2.0) <= 0.3)
    detail = (f"uniform p=2 {uni:.4f} (target {-Z_LSHAPE / 2:.4f}), adaptive p=2 {a2:.4f} "
              f"({len(adaptive_p2)} it), adaptive p=5 {a5:.4f} ({len(adaptive_p5)} it)")
    criterion("L-shape rates vs dofs: uniform -z/2+-0.05, adaptive p=2 -0.5+-0.08, "
              "p=5 -2.0+-0.3", ok, detail)


@pytest.mark.parametrize("which", ["adaptive_p2", "adaptive_p5"])
def test_corner_refinement(which, request):
    recs = request.getfixturevalue(which)
    h = np.array([r.extra["corner_h"] for r in recs])
    assert np.all(np.diff(h) <= 0)
    # bisection halves the corner elements every second step
    assert np.all(h[3:] < h[:-3])


VERIFY_CHECKS = [
    ("lifting vanishing <= 1e-12", verify.check_lifting_vanishing),
    ("bilinear form equivalence <= 1e-10 on 50 pairs", verify.check_form_equivalence),
    ("generalized Hessian orthogonality <= 1e-8 (vertex-continuous gradients)",
     verify.check_gh_orthogonality),
    ("generalized Hessian Galerkin property on p=6 bubbles <= 1e-8", verify.check_gh_bubbles),
    ("Green identity <= 1e-12", verify.check_green_identity),
    ("divdiv symcurl = 0 and curl Hessian = 0 <= 1e-12", verify.check_complex),
    ("coercivity at default penalties", verify.check_coercivity),
    ("coercivity loss detected at zero penalties", verify.check_coercivity_failure_detected),
    ("polynomial reproduction and vanishing estimators <= 1e-8", verify.check_reproduction),
    ("patchwise comparison constant bounded across p=2..5 runs", verify.check_comparison),
]


@pytest.mark.parametrize("name,check", VERIFY_CHECKS, ids=[n for n, _ in VERIFY_CHECKS])
def test_invariant_suite(name, check, criterion):
    res = check()
    criterion(f"invariant: {name}", res.passed, f"{res.value:.3e} ({res.detail})")


@pytest.mark.xfail(strict=True, reason="the residual equals a vertex jump functional that "
                   "vanishes only for test fields with vertex-continuous gradients")
def test_invariant_gh_orthogonality_full_space(criterion):
    res = verify.check_gh_orthogonality(full_space=True)
    criterion("invariant: generalized Hessian orthogonality <= 1e-8 (full Lagrange space)",
              res.passed, f"{res.value:.3e} ({res.detail})")
