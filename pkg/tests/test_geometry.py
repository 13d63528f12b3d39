import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tricontact.geometry import (RigidMotion, TriangleSoup, apply_motion,
                                 barycentric_point, flatten, is_degenerate,
                                 load_obj, mesh_to_triangles, save_obj,
                                 triangle, triangles_to_mesh, unflatten)


def random_soup(rng, n):
    return flatten(rng.normal(size=(n, 3, 3)))


class TestBarycentric:
    def setup_method(self):
        self.tri = triangle([0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 3.0, 1.0])

    def test_vertices(self):
        assert np.allclose(barycentric_point(self.tri, 0, 0), self.tri[0])
        assert np.allclose(barycentric_point(self.tri, 1, 0), self.tri[1])
        assert np.allclose(barycentric_point(self.tri, 0, 1), self.tri[2])

    def test_centroid(self):
        c = barycentric_point(self.tri, 1 / 3, 1 / 3)
        assert np.allclose(c, self.tri.mean(axis=0))

    def test_outside_coordinates_allowed(self):
        p = barycentric_point(self.tri, -0.5, 2.0)
        assert np.isfinite(p).all()


class TestSoup:
    def test_flatten_empty(self):
        soup = flatten([])
        assert soup.count == 0
        assert soup.coords.size == 0

    def test_flatten_two(self, rng):
        tris = rng.normal(size=(2, 3, 3))
        soup = flatten(tris)
        assert soup.count == 2
        assert soup.coords.shape == (18,)
        assert np.array_equal(unflatten(soup), tris)

    def test_layout_vertex_major(self):
        tri = triangle([1, 2, 3], [4, 5, 6], [7, 8, 9])
        soup = flatten([tri])
        assert np.array_equal(soup.coords, np.arange(1.0, 10.0))

    def test_bad_buffer_length(self):
        with pytest.raises(ValueError):
            TriangleSoup(np.zeros(10))

    @given(st.integers(min_value=0, max_value=20), st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_round_trip_property(self, n, seed):
        tris = np.random.default_rng(seed).normal(size=(n, 3, 3))
        assert np.array_equal(unflatten(flatten(tris)), tris)


class TestRigidMotion:
    def test_identity_is_noop(self, rng):
        soup = random_soup(rng, 5)
        out = apply_motion(soup, RigidMotion.identity())
        assert np.array_equal(out.coords, soup.coords)

    def test_translation_only(self):
        soup = flatten([triangle([0, 0, 0], [1, 0, 0], [0, 1, 0])])
        out = apply_motion(soup, RigidMotion(translation=np.array([1.0, 0.0, 0.0])))
        assert np.allclose(out.triangles()[0][:, 0], soup.triangles()[0][:, 0] + 1.0)
        assert np.allclose(out.triangles()[0][:, 1:], soup.triangles()[0][:, 1:])

    def test_isometry(self, rng):
        soup = random_soup(rng, 10)
        motion = RigidMotion.random_rotation(rng, translation=rng.normal(size=3))
        out = apply_motion(soup, motion)
        a = soup.coords.reshape(-1, 3)
        b = out.coords.reshape(-1, 3)
        da = np.linalg.norm(a[:, None] - a[None, :], axis=2)
        db = np.linalg.norm(b[:, None] - b[None, :], axis=2)
        mask = da > 1e-12
        assert np.max(np.abs(da[mask] - db[mask]) / da[mask]) < 1e-6

    def test_composition(self, rng):
        soup = random_soup(rng, 4)
        m1 = RigidMotion.random_rotation(rng, translation=rng.normal(size=3))
        m2 = RigidMotion.random_rotation(rng, translation=rng.normal(size=3))
        sequential = apply_motion(apply_motion(soup, m1), m2)
        fused = apply_motion(soup, m2.compose(m1))
        assert np.allclose(sequential.coords, fused.coords, atol=1e-6)

    def test_quaternion_stays_unit(self, rng):
        m = RigidMotion.random_rotation(rng)
        for _ in range(100):
            m = m.compose(RigidMotion.random_rotation(rng))
        assert abs(np.linalg.norm(m.rotation) - 1.0) < 1e-9

    def test_empty_soup(self):
        out = apply_motion(TriangleSoup(), RigidMotion.identity())
        assert out.count == 0


class TestDegeneracy:
    def test_regular_triangle(self):
        assert not is_degenerate(triangle([0, 0, 0], [1, 0, 0], [0, 1, 0]))

    def test_collapsed_triangle(self):
        assert is_degenerate(triangle([0, 0, 0], [1, 0, 0], [2, 0, 0]))
        assert is_degenerate(triangle([1, 1, 1], [1, 1, 1], [1, 1, 1]))


class TestObj:
    def test_round_trip(self, tmp_path, rng):
        tris = rng.normal(size=(6, 3, 3))
        verts, faces = triangles_to_mesh(tris)
        path = tmp_path / "mesh.obj"
        save_obj(path, verts, faces)
        v2, f2 = load_obj(path)
        assert np.allclose(mesh_to_triangles(v2, f2), mesh_to_triangles(verts, faces))

    def test_ignores_normals_and_comments(self, tmp_path):
        path = tmp_path / "mesh.obj"
        path.write_text(
            "# comment\nv 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 3//1\n"
        )
        verts, faces = load_obj(path)
        assert verts.shape == (3, 3)
        assert faces.tolist() == [[0, 1, 2]]

    def test_rejects_quads(self, tmp_path):
        path = tmp_path / "mesh.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
        with pytest.raises(ValueError):
            load_obj(path)
