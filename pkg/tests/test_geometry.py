import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from parahom.coeffs import preset
from parahom.geometry import (BoundaryMeasure, Cone, GraphDomain,
                              LipschitzCylinder, ParabolicCube, ParabolicPoint,
                              QUASI_TRIANGLE_CONSTANT, boundary_measure,
                              cone_contains, flatten_pullback,
                              parabolic_distance, parabolic_norm)


def rho_bisect(X, t):
    """Independent root-finding oracle for the defining equation."""
    x2 = float(np.dot(X, X))
    if x2 == 0.0 and t == 0.0:
        return 0.0
    lo, hi = 1e-14, 1e14
    for _ in range(300):
        mid = np.sqrt(lo * hi)
        if t * t / mid ** 4 + x2 / mid ** 2 > 1.0:
            lo = mid
        else:
            hi = mid
    return float(np.sqrt(lo * hi))


class TestParabolicNorm:
    def test_spatial_only(self):
        assert parabolic_norm(np.array([3.0, 4.0]), 0.0) == pytest.approx(5.0)

    def test_time_only(self):
        assert parabolic_norm(np.array([0.0]), 4.0) == pytest.approx(2.0)

    def test_mixed_closed_form(self):
        # rho^4 - rho^2 - 2 = 0 factors as (rho^2 - 2)(rho^2 + 1)
        assert parabolic_norm(np.array([1.0]), np.sqrt(2.0)) == \
            pytest.approx(np.sqrt(2.0), rel=1e-14)

    def test_against_bisection(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            X = rng.normal(size=3) * 10 ** rng.uniform(-2, 2)
            t = rng.normal() * 10 ** rng.uniform(-2, 2)
            assert parabolic_norm(X, t) == pytest.approx(rho_bisect(X, t),
                                                         rel=1e-12)

    def test_scaling_law(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(1000, 2))
        t = rng.normal(size=1000)
        for g in (0.01, 0.5, 3.0, 10.0):
            lhs = parabolic_norm(g * X, g * g * t)
            rhs = g * parabolic_norm(X, t)
            assert np.all(np.abs(lhs - rhs) <= 1e-12 * rhs)

    def test_root_consistency(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(1000, 3))
        t = rng.normal(size=1000)
        rho = parabolic_norm(X, t)
        res = t ** 2 / rho ** 4 + np.sum(X * X, axis=1) / rho ** 2
        assert np.abs(res - 1.0).max() <= 1e-12

    def test_zero_iff_origin(self):
        assert parabolic_norm(np.zeros(2), 0.0) == 0.0
        assert parabolic_norm(np.array([1e-30, 0.0]), 0.0) > 0.0


class TestDistance:
    def test_coincident(self):
        p = ParabolicPoint(np.array([1.0, 2.0]), 3.0)
        assert parabolic_distance(p, p) == 0.0

    def test_examples(self):
        o = ParabolicPoint(np.array([0.0, 0.0]), 0.0)
        assert parabolic_distance(o, ParabolicPoint(np.array([3.0, 4.0]), 0.0)) \
            == pytest.approx(5.0)
        assert parabolic_distance(o, ParabolicPoint(np.array([0.0, 0.0]), 4.0)) \
            == pytest.approx(2.0)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            parabolic_distance(ParabolicPoint(np.array([0.0]), 0.0),
                               ParabolicPoint(np.array([0.0, 0.0]), 0.0))

    def test_quasi_triangle(self):
        rng = np.random.default_rng(4)
        P = rng.normal(size=(500, 3, 2)) * 3
        T = rng.normal(size=(500, 3))
        for (Xs, ts) in zip(P, T):
            p, q, r = (ParabolicPoint(Xs[i], ts[i]) for i in range(3))
            d_pr = parabolic_distance(p, r)
            d_pq = parabolic_distance(p, q)
            d_qr = parabolic_distance(q, r)
            assert d_pr <= QUASI_TRIANGLE_CONSTANT * (d_pq + d_qr) + 1e-14


class TestCone:
    def test_axis_point(self):
        c = Cone(np.array([0.0]), 0.0, 1.0)
        assert cone_contains(c, np.array([0.0]), 0.0, 1.0)

    def test_outside(self):
        c = Cone(np.array([0.0]), 0.0, 1.0)
        assert not cone_contains(c, np.array([2.0]), 0.0, 1.0)

    def test_derived_point(self):
        # ||(1, 1)|| = ((1 + sqrt 5)/2)^(1/2) ~ 1.272 < 3
        c = Cone(np.array([0.0]), 0.0, 3.0)
        assert cone_contains(c, np.array([1.0]), 1.0, 1.0)
        assert parabolic_norm(np.array([1.0]), 1.0) == \
            pytest.approx(np.sqrt((1 + np.sqrt(5)) / 2))

    def test_monotone_in_eta(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2000, 1))
        t = rng.normal(size=2000)
        lam = rng.uniform(0, 2, size=2000)
        etas = sorted(rng.uniform(0.2, 5.0, size=4))
        prev = None
        for eta in etas:
            c = Cone(np.zeros(1), 0.0, eta)
            inside = cone_contains(c, x, t, lam)
            if prev is not None:
                assert np.all(inside | ~prev)   # containment set grows
            prev = inside

    def test_truncation(self):
        c = Cone(np.zeros(1), 0.0, 2.0, truncation=0.5)
        assert cone_contains(c, np.array([0.0]), 0.0, 0.4)
        assert not cone_contains(c, np.array([0.0]), 0.0, 0.6)


class TestGraphDomain:
    def test_lipschitz_violation_detected(self):
        with pytest.raises(ValueError, match="Lipschitz"):
            GraphDomain(m=0.1, box=((-1.0, 1.0),),
                        phi=lambda x: np.asarray(x)[..., 0])

    def test_json_roundtrip(self):
        dom = GraphDomain.from_json(
            {"phi": {"kind": "closed_form", "expr": "0.25*sin(x1)"},
             "m": 0.25, "box": [[-2.0, 2.0]]})
        assert dom.m == 0.25
        x = np.array([[0.3]])
        assert dom.phi_values(x)[0] == pytest.approx(0.25 * np.sin(0.3))

    def test_zero_phi_table(self):
        dom = GraphDomain(m=0.0, box=((-1.0, 1.0),))
        assert np.all(dom.phi_values(np.array([[0.1], [0.7]])) == 0.0)


class TestFlattenPullback:
    def test_identity_for_zero_phi(self):
        A = preset("trig", d=2)
        dom = GraphDomain(m=0.0, box=((-1.0, 1.0),))
        At = flatten_pullback(dom, A)
        pts = np.random.default_rng(0).normal(size=(50, 2))
        assert np.array_equal(At(pts), A(pts))   # bitwise

    def test_shear_matrix(self):
        A = preset("constant", d=2)
        dom = GraphDomain(m=0.5, box=((-2.0, 2.0),),
                          phi=lambda x: 0.5 * np.asarray(x)[..., 0])
        At = flatten_pullback(dom, A)
        got = At(np.array([0.0, 0.0]))
        assert np.allclose(got, [[1.0, -0.5], [-0.5, 1.25]], atol=1e-12)

    def test_ellipticity_bound(self):
        # min eigenvalue of the pulled-back field obeys the J J^T bound,
        # verified against a brute-force eigensolve over random samples
        rng = np.random.default_rng(6)
        m = 0.8
        dom = GraphDomain(m=m, box=((-3.0, 3.0),),
                          phi=lambda x: m * np.sin(np.asarray(x)[..., 0]))
        A = preset("constant", d=2)
        At = flatten_pullback(dom, A)
        pts = np.column_stack([rng.uniform(-2.5, 2.5, 400),
                               rng.uniform(0, 2, 400)])
        eigs = np.linalg.eigvalsh(At(pts))
        bound = 1.0 / (1.0 + m * m + m * np.sqrt(2.0 + m * m))
        assert eigs.min() >= bound - 1e-10
        assert At.lam >= eigs.max() - 1e-10

    def test_non_lipschitz_rejected(self):
        with pytest.raises(ValueError):
            dom = GraphDomain(m=0.2, box=((-1.0, 1.0),),
                              phi=lambda x: np.asarray(x)[..., 0] ** 2)
            flatten_pullback(dom, preset("constant", d=2))


class TestBoundaryMeasure:
    def test_flat_graph(self):
        dom = GraphDomain(m=0.0, box=((-4.0, 4.0),))
        r = 1.0
        bm = boundary_measure(dom, ParabolicCube(np.zeros(1), 0.0, r))
        assert bm.value == pytest.approx((2 * r) * 2 * r * r, rel=1e-12)
        assert not bm.empty

    def test_constant_slope(self):
        dom = GraphDomain(m=1.0, box=((-4.0, 4.0),),
                          phi=lambda x: np.asarray(x)[..., 0])
        bm = boundary_measure(dom, ParabolicCube(np.zeros(1), 0.0, 1.0))
        assert bm.value == pytest.approx(np.sqrt(2.0) * 2 * 2, rel=1e-6)

    def test_empty_intersection(self):
        dom = GraphDomain(m=0.0, box=((-1.0, 1.0),))
        bm = boundary_measure(dom, ParabolicCube(np.array([5.0]), 0.0, 0.5))
        assert bm.empty and bm.value == 0.0

    def test_refinement_second_order(self):
        dom = GraphDomain(m=0.3, box=((-4.0, 4.0),),
                          phi=lambda x: 0.3 * np.sin(np.asarray(x)[..., 0]))
        cube = ParabolicCube(np.zeros(1), 0.0, 1.5)
        ref = boundary_measure(dom, cube, quad_pts=4097).value
        e1 = abs(boundary_measure(dom, cube, quad_pts=65).value - ref)
        e2 = abs(boundary_measure(dom, cube, quad_pts=129).value - ref)
        assert e1 / max(e2, 1e-16) > 3.0   # ~ O(h^2)

    def test_cylinder_perimeter(self):
        dom = LipschitzCylinder(base_box=((0.0, 1.0), (0.0, 1.0)), T=1.0)
        # small cube straddling one face
        bm = boundary_measure(dom, ParabolicCube(np.array([0.0, 0.5]), 0.5, 0.2))
        assert bm.value == pytest.approx(0.4 * 2 * 0.04, rel=1e-12)


class TestCylinder:
    def test_chart_validation(self):
        dom = LipschitzCylinder(base_box=((0.0, 1.0), (0.0, 2.0)), T=1.0)
        assert dom.validate_charts()
        assert len(dom.charts()) == 4
        assert dom.r0 == pytest.approx(0.5)

    def test_json(self):
        dom = LipschitzCylinder.from_json(
            {"base_box": [[0, 1], [0, 1]], "T": 2.0})
        assert dom.T == 2.0


@settings(max_examples=200, deadline=None)
@given(st.floats(0.01, 10.0), st.floats(-30.0, 30.0), st.floats(-30.0, 30.0),
       st.floats(-30.0, 30.0))
def test_scaling_property(gamma, x1, x2, t):
    X = np.array([x1, x2])
    lhs = float(parabolic_norm(gamma * X, gamma * gamma * t))
    rhs = gamma * float(parabolic_norm(X, t))
    assert abs(lhs - rhs) <= 1e-12 * max(rhs, 1e-30)


@settings(max_examples=200, deadline=None)
@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(-400, 400))
def test_root_consistency_property(x1, x2, t):
    X = np.array([x1, x2])
    rho = float(parabolic_norm(X, t))
    if rho > 1e-60:     # below that the residual itself underflows
        assert abs(t * t / rho ** 4 + float(X @ X) / rho ** 2 - 1.0) <= 1e-12
