import numpy as np
import pytest

from oracles import central_difference

from conftest import cached_tree
from tricontact.geometry import triangle, triangle_normals
from tricontact.kernels import closest_point_triangle_batch
from tricontact.surrogate import (EmptyInput, EmptyMesh, FitParams,
                                  build_surrogate_tree, cluster_triangles,
                                  conservative_epsilon, fit_energy,
                                  fit_energy_gradient, fit_surrogate_triangle,
                                  seed_triangle, tree_from_json, tree_to_json,
                                  validate_conservative)


def point_to_triangle(point, tri):
    closest, _ = closest_point_triangle_batch(np.asarray(point)[None], np.asarray(tri)[None])
    return float(np.linalg.norm(point - closest[0]))


class TestFit:
    def test_empty_input(self):
        with pytest.raises(EmptyInput):
            fit_surrogate_triangle(np.empty((0, 3, 3)))

    def test_energy_gradient_matches_fd(self, rng):
        children = rng.normal(scale=0.3, size=(6, 3, 3))
        params = FitParams()
        tri = seed_triangle(children) + rng.normal(scale=0.05, size=(3, 3))
        g = fit_energy_gradient(tri, children, params)
        fd = central_difference(lambda t: fit_energy(t, children, params), tri)
        assert np.abs(g - fd).max() / max(np.abs(fd).max(), 1e-12) < 1e-6

    def test_single_child_energy_decreases(self, rng):
        child = rng.normal(size=(1, 3, 3))
        params = FitParams()
        fitted = fit_surrogate_triangle(child, params)
        assert fit_energy(fitted, child, params) <= fit_energy(seed_triangle(child), child, params)

    def test_objective_monotone_from_seed(self, rng):
        for _ in range(5):
            children = rng.normal(scale=0.2, size=(8, 3, 3)) + rng.normal(size=3)
            params = FitParams()
            fitted = fit_surrogate_triangle(children, params)
            assert fit_energy(fitted, children, params) <= fit_energy(
                seed_triangle(children), children, params) + 1e-12

    def test_planar_patch_stays_planar(self, rng):
        # 8 triangles tiling a unit square in z = 0, normals +z
        quads = []
        for i in range(2):
            for j in range(2):
                x, y = i * 0.5, j * 0.5
                quads.append([[x, y, 0], [x + 0.5, y, 0], [x + 0.5, y + 0.5, 0]])
                quads.append([[x, y, 0], [x + 0.5, y + 0.5, 0], [x, y + 0.5, 0]])
        children = np.asarray(quads)
        fitted = fit_surrogate_triangle(children, FitParams())
        diameter = np.sqrt(2.0)
        assert np.abs(fitted[:, 2]).max() <= 1e-2 * diameter
        normal = triangle_normals(fitted[None])[0]
        angle = np.degrees(np.arccos(np.clip(abs(normal[2]), -1, 1)))
        assert angle < 10.0

    def test_icosphere_octant_epsilon(self, sphere1280):
        mask = (sphere1280.mean(axis=1) > 0).all(axis=1)
        octant = sphere1280[mask]
        assert octant.shape[0] > 100
        fitted = fit_surrogate_triangle(octant, FitParams())
        eps = conservative_epsilon(fitted, octant, 1e-2)
        assert eps < 0.7  # coarsest sphere surrogates sit near half a diameter

    def test_post_scale_shrinks(self, rng):
        children = rng.normal(scale=0.2, size=(4, 3, 3))
        full = fit_surrogate_triangle(children, FitParams())
        shrunk = fit_surrogate_triangle(children, FitParams(post_scale=0.8))
        def edge_len(t):
            return np.linalg.norm(t[[1, 2, 0]] - t, axis=1).sum()
        assert edge_len(shrunk) < edge_len(full) + 1e-12


class TestConservativeEpsilon:
    def test_identical_child(self):
        t = triangle([0, 0, 0], [1, 0, 0], [0, 1, 0])
        assert conservative_epsilon(t, t[None], 0.25) == pytest.approx(0.25)

    def test_offset_child(self):
        t = triangle([0, 0, 0], [1, 0, 0], [0, 1, 0])
        child = t + np.array([0, 0, 0.7])
        assert conservative_epsilon(t, child[None], 0.0) == pytest.approx(0.7)

    def test_empty(self):
        t = triangle([0, 0, 0], [1, 0, 0], [0, 1, 0])
        with pytest.raises(EmptyInput):
            conservative_epsilon(t, np.empty((0, 3, 3)), 0.0)

    def test_covers_sampled_halo_points(self, rng):
        surrogate = rng.normal(size=(3, 3))
        children = rng.normal(scale=0.6, size=(12, 3, 3))
        child_eps = rng.uniform(0.01, 0.1, 12)
        eps = conservative_epsilon(surrogate, children, child_eps)
        # sample the children's halo boundaries and check containment
        bary = rng.dirichlet((1, 1, 1), size=40)
        worst = 0.0
        for tri, ce in zip(children, child_eps):
            pts = bary @ tri
            dirs = rng.normal(size=(40, 3))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            halo_pts = pts + ce * dirs
            tiled = np.broadcast_to(surrogate, (40, 3, 3))
            closest, _ = closest_point_triangle_batch(halo_pts, tiled)
            worst = max(worst, float(np.linalg.norm(halo_pts - closest, axis=1).max()))
        assert worst <= eps + 1e-6


class TestClustering:
    def test_k_one(self, rng):
        tris = rng.normal(size=(10, 3, 3))
        groups = cluster_triangles(tris, 1, seed=0)
        assert len(groups) == 1
        assert np.array_equal(np.sort(groups[0]), np.arange(10))

    def test_k_exceeds_count(self, rng):
        tris = rng.normal(size=(5, 3, 3))
        groups = cluster_triangles(tris, 12, seed=0)
        assert len(groups) == 5
        assert all(g.size == 1 for g in groups)

    def test_two_separated_clumps(self, rng):
        a = rng.normal(scale=0.1, size=(7, 3, 3))
        b = rng.normal(scale=0.1, size=(9, 3, 3)) + np.array([50.0, 0, 0])
        tris = np.concatenate([a, b])
        groups = cluster_triangles(tris, 2, seed=3)
        sets = [set(g.tolist()) for g in groups]
        assert {frozenset(range(7)), frozenset(range(7, 16))} == {frozenset(s) for s in sets}

    def test_partition_exact(self, rng):
        tris = rng.normal(size=(37, 3, 3))
        groups = cluster_triangles(tris, 8, seed=1)
        merged = np.sort(np.concatenate(groups))
        assert np.array_equal(merged, np.arange(37))
        assert all(g.size > 0 for g in groups)


class TestTree:
    def test_empty_mesh(self):
        with pytest.raises(EmptyMesh):
            build_surrogate_tree(np.empty((0, 3, 3)), 8)

    def test_recursion_base(self, rng):
        tris = rng.normal(scale=0.3, size=(8, 3, 3))
        tree = build_surrogate_tree(tris, 8, seed=0)
        assert tree.root.is_leaf
        assert np.array_equal(np.sort(tree.root.payload), np.arange(8))

    def test_level_structure_1280(self, sphere1280):
        tree = cached_tree("sphere1280", sphere1280)
        counts: dict[int, int] = {}
        for node in tree.nodes():
            counts[node.level] = counts.get(node.level, 0) + 1
        assert counts[0] == 1
        assert counts[1] == 8
        assert 48 <= counts[2] <= 80
        leaves = [n for n in tree.nodes() if n.is_leaf]
        assert 120 <= len(leaves) <= 320
        assert max(n.payload.size for n in leaves) <= 8

    def test_leaf_union_is_permutation(self, tree320, sphere320):
        union = np.sort(np.concatenate([n.payload for n in tree320.nodes() if n.is_leaf]))
        assert np.array_equal(union, np.arange(sphere320.shape[0]))

    def test_determinism(self, sphere80):
        t1 = build_surrogate_tree(sphere80, 8, seed=5)
        t2 = build_surrogate_tree(sphere80, 8, seed=5)
        assert tree_to_json(t1) == tree_to_json(t2)

    def test_seed_changes_tree(self, sphere80):
        t1 = build_surrogate_tree(sphere80, 8, seed=5)
        t2 = build_surrogate_tree(sphere80, 8, seed=6)
        assert tree_to_json(t1) != tree_to_json(t2)

    def test_conservative_chain_invariant(self, tree320):
        for node in tree320.nodes():
            if node.is_leaf:
                continue
            child_tris = np.stack([c.triangle for c in node.children])
            chain = conservative_epsilon(node.triangle, child_tris,
                                         [c.epsilon for c in node.children])
            assert chain <= node.epsilon + 1e-6

    def test_epsilon_at_least_finest(self, tree320):
        for node in tree320.nodes():
            assert node.epsilon >= tree320.finest_epsilon - 1e-12


class TestValidation:
    def test_built_tree_passes(self, tree320, sphere320):
        report = validate_conservative(tree320, sphere320)
        assert report["ok"]
        assert report["worst_slack"] >= -1e-6

    def test_halved_root_fails(self, sphere320):
        tree = build_surrogate_tree(sphere320, 8, seed=0)
        tree.root.epsilon *= 0.5
        report = validate_conservative(tree, sphere320)
        assert not report["ok"]
        assert report["worst_slack"] < 0.0

    def test_single_triangle_mesh(self):
        t = triangle([0, 0, 0], [1, 0, 0], [0, 1, 0])
        tree = build_surrogate_tree(t[None], 8, seed=0, finest_epsilon=1e-2)
        report = validate_conservative(tree, t[None])
        assert report["ok"]
        # a one-triangle mesh needs exactly the finest halo
        assert tree.root.epsilon == pytest.approx(1e-2, abs=1e-9)
        assert report["worst_slack"] == pytest.approx(0.0, abs=1e-9)


class TestSerialization:
    def test_round_trip(self, tree320):
        text = tree_to_json(tree320)
        back = tree_from_json(text)
        assert tree_to_json(back) == text
        assert back.n_surrogate == tree320.n_surrogate
        assert back.finest_epsilon == tree320.finest_epsilon
        assert back.mesh_checksum == tree320.mesh_checksum

    def test_version_gate(self, tree320):
        import json
        doc = json.loads(tree_to_json(tree320))
        doc["version"] = 999
        with pytest.raises(ValueError):
            tree_from_json(json.dumps(doc))
