import numpy as np
import pytest

from oracles import central_difference, mesh_pair_population, sampling_distance_batch

from tricontact.geometry import RigidMotion, triangle
from tricontact.kernels import (DegenerateTriangle, KernelCounters, KernelParams,
                                Kind, batch_closest, closest_comparison,
                                closest_hybrid, closest_iterative,
                                comparison_batch, functional_value, gradient_of_J,
                                hybrid_batch, iterative_batch)

from conftest import sphere_triangles

UNIT = triangle([0, 0, 0], [1, 0, 0], [0, 1, 0])


def offset(tri, dx=0.0, dy=0.0, dz=0.0):
    return np.asarray(tri) + np.array([dx, dy, dz])


class TestComparison:
    def test_identical_triangles(self):
        r = closest_comparison(UNIT, UNIT)
        assert r.distance == pytest.approx(0.0, abs=1e-12)
        assert r.kind == Kind.CONTACT

    def test_parallel_offset(self):
        r = closest_comparison(UNIT, offset(UNIT, dz=1.0))
        assert r.distance == pytest.approx(1.0, abs=1e-12)
        assert r.kind == Kind.NO_CONTACT
        assert np.allclose(r.point_a[:2], r.point_b[:2], atol=1e-12)
        assert r.point_b[2] - r.point_a[2] == pytest.approx(1.0)

    def test_vertex_vertex_case(self):
        t2 = triangle([2, 0, 0], [3, 0, 0], [2, 1, 0])
        r = closest_comparison(UNIT, t2)
        assert r.distance == pytest.approx(1.0)
        assert np.allclose(r.point_a, [1, 0, 0], atol=1e-12)
        assert np.allclose(r.point_b, [2, 0, 0], atol=1e-12)

    def test_edge_edge_case(self):
        t2 = triangle([0.2, 0.2, 1.0], [1.2, 0.2, 1.0], [0.7, 0.2, 2.0])
        t2 = np.array([[0.5, -0.5, 1.0], [0.5, 0.5, 1.0], [0.5, 0.0, 2.0]])
        r = closest_comparison(UNIT, t2)
        assert r.distance == pytest.approx(1.0)

    def test_intersecting_triangles(self):
        t2 = triangle([0.2, 0.2, -0.5], [0.4, 0.2, 0.5], [0.3, 0.4, 0.5])
        r = closest_comparison(UNIT, t2)
        assert r.distance == 0.0
        assert r.kind == Kind.CONTACT
        assert np.allclose(r.point_a, r.point_b)
        # the reported point lies on the plane of the first triangle
        assert abs(r.point_a[2]) < 1e-12

    def test_coplanar_overlap(self):
        inner = triangle([0.1, 0.1, 0.0], [0.3, 0.1, 0.0], [0.1, 0.3, 0.0])
        r = closest_comparison(UNIT, inner)
        assert r.distance == pytest.approx(0.0, abs=1e-12)

    def test_degenerate_raises(self):
        bad = triangle([0, 0, 0], [1, 0, 0], [2, 0, 0])
        with pytest.raises(DegenerateTriangle):
            closest_comparison(UNIT, bad)

    def test_symmetry(self, rng):
        A = rng.normal(size=(200, 3, 3))
        B = rng.normal(size=(200, 3, 3))
        eps = np.full(200, 1e-2)
        d1 = comparison_batch(A, B, eps).distance
        d2 = comparison_batch(B, A, eps).distance
        assert np.max(np.abs(d1 - d2)) < 1e-6

    def test_rigid_motion_invariance(self, rng):
        A = rng.normal(size=(100, 3, 3))
        B = rng.normal(size=(100, 3, 3)) + np.array([1.5, 0, 0])
        eps = np.full(100, 1e-2)
        base = comparison_batch(A, B, eps).distance
        motion = RigidMotion.random_rotation(rng, translation=rng.normal(size=3))
        A2 = motion.apply_points(A.reshape(-1, 3)).reshape(-1, 3, 3)
        B2 = motion.apply_points(B.reshape(-1, 3)).reshape(-1, 3, 3)
        moved = comparison_batch(A2, B2, eps).distance
        mask = base > 1e-9
        assert np.max(np.abs(base[mask] - moved[mask]) / base[mask]) < 1e-5

    def test_against_sampling_oracle(self, rng):
        A = rng.normal(size=(400, 3, 3))
        B = rng.normal(size=(400, 3, 3)) + rng.normal(scale=0.5, size=(400, 1, 3))
        eps = np.full(400, 1e-2)
        exact = comparison_batch(A, B, eps).distance
        oracle, bound = sampling_distance_batch(A, B)
        # sampling can only overestimate; its excess is grid-resolution bounded
        assert (exact <= oracle + 1e-9).all()
        assert (oracle - exact <= bound + 1e-9).all()


class TestIterative:
    def test_parallel_offset_converges(self):
        p = KernelParams()
        r = closest_iterative(UNIT, offset(UNIT, dz=1.0), p)
        assert r.kind == Kind.NO_CONTACT
        assert r.distance == pytest.approx(1.0, abs=1e-9)
        # J-hat = 0.5 * d^2 at the analytic minimum
        jh = 0.5 * r.distance**2
        assert jh == pytest.approx(0.5, abs=1e-9)

    def test_fixed_sweep_count(self, rng):
        # the iterative kernel does identical work regardless of input
        A = rng.normal(size=(50, 3, 3))
        B = rng.normal(size=(50, 3, 3))
        p1 = KernelParams(n_iterative=1)
        p4 = KernelParams(n_iterative=4)
        r1 = iterative_batch(A, B, p1, np.full(50, 1e-2))
        r4 = iterative_batch(A, B, p4, np.full(50, 1e-2))
        # more sweeps never increase the measured distance
        assert (r4.distance <= r1.distance + 1e-9).all()

    def test_coplanar_parallel_far_apart(self):
        # degenerate flat valley: either unsettled within four sweeps or the
        # fallback-quality answer
        t2 = offset(UNIT, dx=5.0, dz=0.0)
        p = KernelParams()
        r = closest_iterative(UNIT, t2, p)
        exact = closest_comparison(UNIT, t2, p)
        assert r.kind == Kind.NOT_TERMINATED or abs(r.distance - exact.distance) <= p.c_factor * p.epsilon + 1e-4

    def test_converged_never_underestimates(self, rng):
        meshes = [sphere_triangles(1), sphere_triangles(2)]
        A, B = mesh_pair_population(rng, 1500, meshes)
        p = KernelParams()
        eps = np.full(len(A), p.epsilon)
        it = iterative_batch(A, B, p, eps)
        cm = comparison_batch(A, B, eps)
        settled = it.kind != np.int8(Kind.NOT_TERMINATED)
        # feasible final iterates can only overestimate the true distance
        assert (it.distance[settled] >= cm.distance[settled] - 1e-9).all()

    def test_converged_contact_distances_accurate(self, rng):
        meshes = [sphere_triangles(1), sphere_triangles(2)]
        A, B = mesh_pair_population(rng, 1000, meshes)
        p = KernelParams()
        eps = np.full(len(A), p.epsilon)
        it = iterative_batch(A, B, p, eps)
        cm = comparison_batch(A, B, eps)
        contact = it.kind == np.int8(Kind.CONTACT)
        assert contact.any()
        err = np.abs(it.distance[contact] - cm.distance[contact])
        assert err.max() <= p.c_factor * p.epsilon + 1e-4

    def test_barycentric_iterates_recorded_when_open(self, rng):
        # construct a crawling configuration that stays open
        t2 = offset(UNIT, dx=40.0, dz=0.01)
        r = closest_iterative(UNIT, t2, KernelParams())
        assert np.isfinite(r.bary_a).all() and np.isfinite(r.bary_b).all()


class TestGradient:
    def test_zero_at_interior_minimum(self):
        # two parallel offset triangles: the quadratic part is stationary at
        # matching coordinates, penalties inactive
        p = KernelParams()
        g = gradient_of_J(UNIT, offset(UNIT, dz=1.0), 0.3, 0.3, 0.3, 0.3, p)
        assert np.max(np.abs(g)) < 1e-10

    def test_matches_finite_differences_interior(self, rng):
        p = KernelParams()
        worst = 0.0
        for _ in range(100):
            A = rng.normal(size=(3, 3))
            B = rng.normal(size=(3, 3)) + np.array([1.0, 0, 0])
            x = rng.uniform(0.05, 0.45, size=4)
            g = gradient_of_J(A, B, *x, p)
            fd = central_difference(lambda y: functional_value(A, B, *y, p), x)
            denom = max(np.linalg.norm(fd), 1e-12)
            worst = max(worst, np.linalg.norm(g - fd) / denom)
        assert worst < 1e-4

    def test_penalty_contribution_active(self, rng):
        p = KernelParams()
        A = rng.normal(size=(3, 3))
        B = rng.normal(size=(3, 3)) + np.array([1.0, 0, 0])
        x = np.array([-0.1, 0.3, 0.3, 0.3])
        g_active = gradient_of_J(A, B, *x, p)
        g_inside = gradient_of_J(A, B, 0.1, 0.3, 0.3, 0.3, p)
        sq = max(
            np.einsum("ij,ij->i", A[[1, 2, 0]] - A, A[[1, 2, 0]] - A).max(),
            np.einsum("ij,ij->i", B[[1, 2, 0]] - B, B[[1, 2, 0]] - B).max(),
        )
        # the a1 component carries the -alpha_iterative penalty term
        fd = central_difference(lambda y: functional_value(A, B, *y, p), x)
        assert np.linalg.norm(g_active - fd) / np.linalg.norm(fd) < 1e-4
        assert g_active[0] - g_inside[0] == pytest.approx(-p.alpha_iterative * sq, rel=0.5)

    def test_subgradient_zero_exactly_at_kink(self):
        p = KernelParams()
        A = UNIT
        B = offset(UNIT, dz=1.0)
        g_at_kink = gradient_of_J(A, B, 0.0, 0.3, 0.3, 0.3, p)
        g_inside = gradient_of_J(A, B, 1e-9, 0.3, 0.3, 0.3, p)
        assert g_at_kink[0] == pytest.approx(g_inside[0], abs=1e-6)


class TestHybrid:
    def test_pass_through_when_settled(self):
        p = KernelParams()
        counters = KernelCounters()
        t2 = offset(UNIT, dz=1.0)
        r_h = closest_hybrid(UNIT, t2, p, counters)
        r_i = closest_iterative(UNIT, t2, p)
        assert r_i.kind != Kind.NOT_TERMINATED
        assert r_h.kind == r_i.kind
        assert r_h.distance == r_i.distance
        assert counters.iterative_invocations == 1
        assert counters.fallback_invocations == 0

    def test_fallback_path_and_counters(self):
        p = KernelParams()
        counters = KernelCounters()
        t2 = offset(UNIT, dx=40.0, dz=0.01)  # crawling configuration
        r_i = closest_iterative(UNIT, t2, p)
        r_h = closest_hybrid(UNIT, t2, p, counters)
        r_c = closest_comparison(UNIT, t2, p)
        assert r_h.kind != Kind.NOT_TERMINATED
        if r_i.kind == Kind.NOT_TERMINATED:
            assert counters.fallback_invocations == 1
            assert r_h.distance == pytest.approx(r_c.distance, abs=1e-12)
        assert counters.comparison_invocations == counters.fallback_invocations

    def test_never_not_terminated(self, rng):
        A = rng.normal(size=(500, 3, 3))
        B = rng.normal(size=(500, 3, 3))
        res = hybrid_batch(A, B, KernelParams(), None, 1e-2)
        assert not (res.kind == np.int8(Kind.NOT_TERMINATED)).any()

    def test_classification_against_comparison(self, rng):
        meshes = [sphere_triangles(1), sphere_triangles(2)]
        A, B = mesh_pair_population(rng, 3000, meshes)
        p = KernelParams()
        eps = np.full(len(A), p.epsilon)
        counters = KernelCounters()
        hy = hybrid_batch(A, B, p, counters, eps)
        cm = comparison_batch(A, B, eps)
        agree = hy.kind == cm.kind
        band = np.abs(cm.distance - 2 * p.epsilon) <= p.c_factor * p.epsilon
        assert agree.mean() >= 0.999
        assert (agree | band).all()
        assert counters.fallback_invocations <= counters.iterative_invocations

    def test_degenerate_propagates_only_from_fallback(self):
        p = KernelParams()
        bad = triangle([0, 0, 0], [1, 0, 0], [2, 0, 0])
        far = offset(UNIT, dz=1.0)
        # a settled pair never consults the comparison kernel
        r = closest_hybrid(bad, far, p)
        assert r.kind != Kind.NOT_TERMINATED


class TestBatchClosest:
    def test_empty(self):
        assert batch_closest([], KernelParams()) == []

    def test_single_pair_equals_hybrid(self):
        p = KernelParams()
        t2 = offset(UNIT, dz=0.005)
        single = closest_hybrid(UNIT, t2, p)
        batched = batch_closest([(UNIT, t2)], p)
        assert len(batched) == 1
        assert batched[0].kind == single.kind
        assert batched[0].distance == pytest.approx(single.distance)

    def test_elementwise_equals_map(self, rng):
        p = KernelParams()
        pairs = [(rng.normal(size=(3, 3)), rng.normal(size=(3, 3))) for _ in range(64)]
        batched = batch_closest(pairs, p)
        for got, (a, b) in zip(batched, pairs):
            want = closest_hybrid(a, b, p)
            assert got.kind == want.kind
            assert got.distance == pytest.approx(want.distance, abs=1e-12)

    def test_positional_errors(self):
        p = KernelParams()
        bad = triangle([0, 0, 0], [1, 0, 0], [2, 0, 0])
        crawler = offset(UNIT, dx=40.0, dz=0.01)
        good = offset(UNIT, dz=1.0)
        out = batch_closest([(UNIT, good), (bad, crawler), (UNIT, good)], p)
        assert isinstance(out[0], type(out[2]))
        if isinstance(out[1], DegenerateTriangle):
            assert out[0].distance == pytest.approx(1.0, abs=1e-9)

    def test_counters_accumulate(self, rng):
        p = KernelParams()
        counters = KernelCounters()
        pairs = [(rng.normal(size=(3, 3)), rng.normal(size=(3, 3))) for _ in range(32)]
        batch_closest(pairs, p, counters)
        assert counters.iterative_invocations == 32
        assert counters.fallback_invocations <= 32
