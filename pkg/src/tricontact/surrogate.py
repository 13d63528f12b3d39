"""Conservative surrogate-triangle trees.

Each particle gets a rooted hierarchy of single-triangle surrogates: the
root is the coarsest stand-in for the whole mesh, leaves hold disjoint
payloads of real triangle indices, and every node's halo width makes it
conservative for the geometry below it (fine geometry plus its halo can
never collide without the surrogate halo colliding first).

Construction is offline: k-means clustering of triangle barycenters splits
the mesh top-down, then a bottom-up pass fits each node's triangle to its
immediate children by penalised descent and assigns the smallest halo that
keeps the conservative chain intact.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import REAL, as_triangles
from .kernels import closest_point_triangle_batch


class EmptyInput(ValueError):
    pass


class EmptyMesh(ValueError):
    pass


@dataclass
class FitParams:
    """Weights and stopping controls for the surrogate-triangle fit.

    ``alpha_area`` is relative: the effective area-regulariser weight is
    ``alpha_area * (mean child area)**2`` so the fit is scale invariant.
    """

    beta_size: int = 8
    alpha_area: float = 1e-3
    alpha_inside: float = 1.0
    beta_normal: int = 2
    max_fit_iterations: int = 80
    rel_tol: float = 1e-8
    initial_step: float = 0.05
    shrink: float = 0.5
    grow: float = 1.5
    post_scale: float = 1.0  # optional shrink about the centroid, (0, 1]

    def __post_init__(self):
        if self.beta_size < 2 or self.beta_size % 2 != 0:
            raise ValueError("beta_size must be an even integer >= 2")
        if self.beta_normal < 2:
            raise ValueError("beta_normal must be >= 2")
        if self.alpha_area <= 0.0 or self.alpha_inside < 0.0:
            raise ValueError("bad penalty weights")
        if not 0.0 < self.post_scale <= 1.0:
            raise ValueError("post_scale must be in (0, 1]")


# ---------------------------------------------------------------------------
# Fit functional: max-distance hugging + area regulariser + outside penalty.
#
# The descent is batched over many independent fit problems of the same
# child count, which is what makes whole-tree construction cheap.
# ---------------------------------------------------------------------------


def _fit_setup(children: np.ndarray, params: FitParams):
    """Precompute child-dependent constants for a (m, c, 3, 3) batch."""
    m, c = children.shape[0], children.shape[1]
    flat = children.reshape(m, c * 3, 3)  # child vertices per problem
    cross = np.cross(children[:, :, 1] - children[:, :, 0], children[:, :, 2] - children[:, :, 0])
    norm = np.linalg.norm(cross, axis=2, keepdims=True)
    normals = cross / np.where(norm > 0.0, norm, 1.0)          # (m, c, 3)
    normals_rep = np.repeat(normals, 3, axis=1)                # per child vertex
    areas = 0.5 * norm[..., 0]
    mean_area = areas.mean(axis=1)
    alpha_area = params.alpha_area * mean_area * mean_area     # (m,)
    return flat, normals_rep, alpha_area


def _fit_energy_batch(tris, children, flat, normals_rep, alpha_area, params):
    m, c = children.shape[0], children.shape[1]
    # point-triangle distances: each of the 3 surrogate vertices vs each child
    q = np.repeat(tris.reshape(m, 3, 1, 3), c, axis=2).reshape(m * 3 * c, 3)
    t = np.repeat(children[:, None, :, :, :], 3, axis=1).reshape(m * 3 * c, 3, 3)
    closest, _ = closest_point_triangle_batch(q, t)
    dist = np.linalg.norm(q - closest, axis=1).reshape(m, 3 * c)
    size = (dist**params.beta_size).sum(axis=1) / params.beta_size

    n = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
    nn = np.einsum("ij,ij->i", n, n)
    area = 0.5 * alpha_area / np.maximum(nn, 1e-300)

    # outside penalty, gated by the child outward normals
    s = np.einsum("ivk,ipk->ivp", tris, normals_rep) - np.einsum(
        "ipk,ipk->ip", flat, normals_rep
    )[:, None, :]
    inside = params.alpha_inside / params.beta_normal * (
        np.maximum(0.0, s) ** params.beta_normal
    ).sum(axis=(1, 2))
    return size + area + inside


def _fit_gradient_batch(tris, children, flat, normals_rep, alpha_area, params):
    m, c = children.shape[0], children.shape[1]
    q = np.repeat(tris.reshape(m, 3, 1, 3), c, axis=2).reshape(m * 3 * c, 3)
    t = np.repeat(children[:, None, :, :, :], 3, axis=1).reshape(m * 3 * c, 3, 3)
    closest, _ = closest_point_triangle_batch(q, t)
    diff = (q - closest).reshape(m, 3, c, 3)
    dist = np.linalg.norm(diff, axis=3)
    w = dist ** (params.beta_size - 2)
    grad = np.einsum("ivc,ivck->ivk", w, diff)

    u = tris[:, 1] - tris[:, 0]
    v = tris[:, 2] - tris[:, 0]
    n = np.cross(u, v)
    nn = np.einsum("ij,ij->i", n, n)
    coef = (-0.5 * alpha_area / np.maximum(nn, 1e-300) ** 2)[:, None]
    g_u = coef * 2.0 * np.cross(v, n)
    g_v = coef * 2.0 * np.cross(n, u)
    grad[:, 1] += g_u
    grad[:, 2] += g_v
    grad[:, 0] += -g_u - g_v

    s = np.einsum("ivk,ipk->ivp", tris, normals_rep) - np.einsum(
        "ipk,ipk->ip", flat, normals_rep
    )[:, None, :]
    sw = np.maximum(0.0, s) ** (params.beta_normal - 1)
    grad += params.alpha_inside * np.einsum("ivp,ipk->ivk", sw, normals_rep)
    return grad


def _seed_batch(children: np.ndarray) -> np.ndarray:
    centers = children.mean(axis=2)                      # (m, c, 3)
    target = centers.mean(axis=1, keepdims=True)
    d2 = np.einsum("ick,ick->ic", centers - target, centers - target)
    pick = np.argmin(d2, axis=1)
    return children[np.arange(children.shape[0]), pick].copy()


def fit_surrogate_triangle_batch(children: np.ndarray, params: FitParams | None = None) -> np.ndarray:
    """Fit one surrogate triangle per problem of a (m, c, 3, 3) batch.

    Gradient descent with per-problem backtracking from a copied child
    triangle; every returned triangle scores no worse than its seed.
    """
    params = params or FitParams()
    children = np.asarray(children, dtype=REAL)
    if children.ndim != 4 or children.shape[0] == 0 or children.shape[1] == 0:
        raise EmptyInput("expected a non-empty (m, c, 3, 3) batch")
    m = children.shape[0]
    flat, normals_rep, alpha_area = _fit_setup(children, params)

    tris = _seed_batch(children)
    energy = _fit_energy_batch(tris, children, flat, normals_rep, alpha_area, params)
    diam = np.maximum(np.ptp(children.reshape(m, -1, 3), axis=1).max(axis=1), 1e-12)
    step = params.initial_step * diam
    active = np.ones(m, dtype=bool)

    for _ in range(params.max_fit_iterations):
        if not active.any():
            break
        grad = _fit_gradient_batch(tris, children, flat, normals_rep, alpha_area, params)
        gnorm = np.linalg.norm(grad.reshape(m, 9), axis=1)
        active &= gnorm > 0.0
        trying = active.copy()
        moved = np.zeros(m, dtype=bool)
        for _ in range(40):
            if not trying.any():
                break
            scale = np.where(gnorm > 0.0, step / np.maximum(gnorm, 1e-300), 0.0)
            cand = tris - scale[:, None, None] * grad
            cand_energy = _fit_energy_batch(cand, children, flat, normals_rep, alpha_area, params)
            better = trying & (cand_energy < energy)
            if better.any():
                improvement = energy[better] - cand_energy[better]
                small = improvement <= params.rel_tol * np.maximum(np.abs(cand_energy[better]), 1e-30)
                tris[better] = cand[better]
                energy[better] = cand_energy[better]
                step[better] *= params.grow
                moved[better] = True
                # converged problems leave the active set
                conv_idx = np.nonzero(better)[0][small]
                active[conv_idx] = False
            trying &= ~better
            step[trying] *= params.shrink
            trying &= step * gnorm > 1e-14 * diam
        active &= moved

    if params.post_scale < 1.0:
        center = tris.mean(axis=1, keepdims=True)
        tris = center + params.post_scale * (tris - center)
    return tris


def fit_energy(tri: np.ndarray, children: np.ndarray, params: FitParams | None = None) -> float:
    """Value of the surrogate-fit functional for a candidate triangle."""
    params = params or FitParams()
    children = as_triangles(children)
    if children.shape[0] == 0:
        raise EmptyInput("no child triangles")
    batch = children[None]
    flat, normals_rep, alpha_area = _fit_setup(batch, params)
    tri = np.asarray(tri, dtype=REAL).reshape(1, 3, 3)
    return float(_fit_energy_batch(tri, batch, flat, normals_rep, alpha_area, params)[0])


def fit_energy_gradient(tri: np.ndarray, children: np.ndarray, params: FitParams | None = None) -> np.ndarray:
    """Analytic gradient of :func:`fit_energy` wrt the nine vertex coordinates."""
    params = params or FitParams()
    children = as_triangles(children)
    batch = children[None]
    flat, normals_rep, alpha_area = _fit_setup(batch, params)
    tri = np.asarray(tri, dtype=REAL).reshape(1, 3, 3)
    return _fit_gradient_batch(tri, batch, flat, normals_rep, alpha_area, params)[0]


def seed_triangle(children: np.ndarray) -> np.ndarray:
    """Copy of the child whose barycenter is nearest the barycenter centroid."""
    return _seed_batch(as_triangles(children)[None])[0]


def fit_surrogate_triangle(children: np.ndarray, params: FitParams | None = None) -> np.ndarray:
    """Fit a single surrogate triangle to a child set (batch of one)."""
    children = as_triangles(children)
    if children.shape[0] == 0:
        raise EmptyInput("no child triangles")
    return fit_surrogate_triangle_batch(children[None], params)[0]


def conservative_epsilon(surrogate: np.ndarray, children: np.ndarray,
                         child_epsilons) -> float:
    """Smallest halo making ``surrogate`` conservative over its children.

    Point-to-triangle distance is convex in the query point, so its
    maximum over a child triangle is attained at a child vertex; the halo
    ``max_v (dist(v, surrogate) + eps_child)`` therefore contains every
    child's halo volume exactly.
    """
    children = as_triangles(children)
    if children.shape[0] == 0:
        raise EmptyInput("no child triangles")
    surrogate = np.asarray(surrogate, dtype=REAL).reshape(3, 3)
    eps = np.asarray(child_epsilons, dtype=REAL)
    if eps.ndim == 0:
        eps = np.full(children.shape[0], float(eps), dtype=REAL)
    pts = children.reshape(-1, 3)
    tiled = np.broadcast_to(surrogate, (pts.shape[0], 3, 3))
    closest, _ = closest_point_triangle_batch(pts, tiled)
    dist = np.linalg.norm(pts - closest, axis=1).reshape(-1, 3)
    return float((dist + eps[:, None]).max())


# ---------------------------------------------------------------------------
# k-means clustering of triangles by barycenter.
# ---------------------------------------------------------------------------


def cluster_triangles(triangles: np.ndarray, k: int, seed: int) -> list[np.ndarray]:
    """Partition triangle indices into <= k compact, non-empty groups.

    Lloyd iterations on barycenters with deterministic farthest-point
    seeding; empty clusters are re-seeded from the largest cluster's
    farthest member.
    """
    triangles = as_triangles(triangles)
    n = triangles.shape[0]
    if n == 0:
        raise EmptyInput("no triangles to cluster")
    k = min(k, n)
    if k == 1:
        return [np.arange(n, dtype=np.int64)]
    centers_pts = triangles.mean(axis=1)

    rng = np.random.default_rng(seed)
    first = int(rng.integers(n))
    centers = [centers_pts[first]]
    d2 = np.einsum("ij,ij->i", centers_pts - centers[0], centers_pts - centers[0])
    for _ in range(k - 1):
        nxt = int(np.argmax(d2))
        centers.append(centers_pts[nxt])
        alt = np.einsum("ij,ij->i", centers_pts - centers[-1], centers_pts - centers[-1])
        d2 = np.minimum(d2, alt)
    centers = np.asarray(centers)

    assign = np.zeros(n, dtype=np.int64)
    for _ in range(50):
        diff = centers_pts[:, None, :] - centers[None, :, :]
        dist2 = np.einsum("ijk,ijk->ij", diff, diff)
        new_assign = np.argmin(dist2, axis=1)
        counts = np.bincount(new_assign, minlength=k)
        for empty in np.nonzero(counts == 0)[0]:
            big = int(np.argmax(counts))
            members = np.nonzero(new_assign == big)[0]
            far = members[np.argmax(dist2[members, big])]
            new_assign[far] = empty
            counts = np.bincount(new_assign, minlength=k)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(k):
            members = assign == c
            if members.any():
                centers[c] = centers_pts[members].mean(axis=0)
    return [np.nonzero(assign == c)[0].astype(np.int64) for c in range(k)]


# ---------------------------------------------------------------------------
# Surrogate tree.
# ---------------------------------------------------------------------------

TREE_FORMAT_VERSION = 1


@dataclass
class SurrogateNode:
    triangle: np.ndarray                  # (3, 3) fitted surrogate
    epsilon: float                        # conservative halo width
    level: int                            # distance from the root
    children: list["SurrogateNode"] = field(default_factory=list)
    payload: np.ndarray | None = None     # leaf: mesh triangle indices

    @property
    def is_leaf(self) -> bool:
        return self.payload is not None

    def walk(self):
        yield self
        for child in self.children:
            yield from child.walk()

    def leaf_indices(self) -> np.ndarray:
        if self.is_leaf:
            return self.payload
        return np.concatenate([c.leaf_indices() for c in self.children])


@dataclass
class SurrogateTree:
    root: SurrogateNode
    n_surrogate: int
    finest_epsilon: float
    mesh_checksum: str

    def nodes(self):
        yield from self.root.walk()

    def depth(self) -> int:
        return max(node.level for node in self.nodes())


def mesh_checksum(triangles: np.ndarray) -> str:
    data = np.ascontiguousarray(as_triangles(triangles), dtype=np.float64)
    return hashlib.sha256(data.tobytes()).hexdigest()[:16]


def _child_seed(seed: int, index: int) -> int:
    return (seed * 1000003 + index + 1) % (2**63)


def _split_skeleton(triangles, indices, n_surrogate, seed, level, out):
    """Top-down clustering into an unfitted node skeleton."""
    node = SurrogateNode(np.zeros((3, 3), dtype=REAL), 0.0, level)
    out.append(node)
    if indices.size <= n_surrogate:
        node.payload = indices.copy()
        return node
    k = min(n_surrogate, int(np.ceil(indices.size / n_surrogate)))
    groups = cluster_triangles(triangles[indices], k, seed)
    node.children = [
        _split_skeleton(triangles, indices[g], n_surrogate, _child_seed(seed, i), level + 1, out)
        for i, g in enumerate(groups)
    ]
    return node


def _batch_fit_and_chain(nodes, child_sets, child_eps, fit):
    """Fit the nodes' triangles to their child sets and chain the halos.

    ``child_sets[i]`` is an (c_i, 3, 3) array, ``child_eps[i]`` the halo of
    each child; nodes are grouped by child count so the descent vectorises.
    """
    by_count: dict[int, list[int]] = {}
    for i, cs in enumerate(child_sets):
        by_count.setdefault(cs.shape[0], []).append(i)
    for count, members in sorted(by_count.items()):
        batch = np.stack([child_sets[i] for i in members])
        tris = fit_surrogate_triangle_batch(batch, fit)
        pts = batch.reshape(len(members) * count * 3, 3)
        tiled = np.repeat(tris, count * 3, axis=0)
        closest, _ = closest_point_triangle_batch(pts, tiled)
        dist = np.linalg.norm(pts - closest, axis=1).reshape(len(members), count, 3)
        for row, i in enumerate(members):
            eps = float((dist[row] + np.asarray(child_eps[i])[:, None]).max())
            nodes[i].triangle = tris[row]
            nodes[i].epsilon = eps


def build_surrogate_tree(triangles: np.ndarray, n_surrogate: int,
                         fit: FitParams | None = None, seed: int = 0,
                         finest_epsilon: float = 1e-2) -> SurrogateTree:
    """Recursive top-down split, bottom-up fit and halo assignment.

    Leaves keep at most ``n_surrogate`` mesh triangle indices; their halo
    covers the payload plus the finest halo width.  Internal halos chain
    over the immediate children, which by transitivity contains all leaf
    geometry.  Identical inputs yield identical trees.
    """
    triangles = as_triangles(triangles)
    if triangles.shape[0] == 0:
        raise EmptyMesh("cannot build a surrogate tree over an empty mesh")
    if n_surrogate < 1:
        raise ValueError("n_surrogate must be >= 1")
    fit = fit or FitParams()
    indices = np.arange(triangles.shape[0], dtype=np.int64)
    all_nodes: list[SurrogateNode] = []
    root = _split_skeleton(triangles, indices, n_surrogate, seed, 0, all_nodes)

    # bottom-up: fit leaves against mesh payloads, then internals per level
    for level in range(max(n.level for n in all_nodes), -1, -1):
        tier = [n for n in all_nodes if n.level == level]
        leaves = [n for n in tier for _ in [0] if n.is_leaf]
        if leaves:
            _batch_fit_and_chain(
                leaves,
                [triangles[n.payload] for n in leaves],
                [np.full(n.payload.size, finest_epsilon) for n in leaves],
                fit,
            )
        internals = [n for n in tier if not n.is_leaf]
        if internals:
            _batch_fit_and_chain(
                internals,
                [np.stack([c.triangle for c in n.children]) for n in internals],
                [np.array([c.epsilon for c in n.children]) for n in internals],
                fit,
            )
    return SurrogateTree(root, n_surrogate, finest_epsilon, mesh_checksum(triangles))


# ---------------------------------------------------------------------------
# Validation.
# ---------------------------------------------------------------------------


def _bary_samples(count: int) -> np.ndarray:
    """Deterministic barycentric sample set covering corners, edges, interior."""
    rows = int(np.ceil((np.sqrt(8.0 * count + 1.0) - 1.0) / 2.0)) + 1
    rows = max(rows, 2)
    pts = []
    for i in range(rows):
        for j in range(rows - i):
            pts.append((i / (rows - 1), j / (rows - 1)))
    return np.asarray(pts, dtype=REAL)


def validate_conservative(tree: SurrogateTree, triangles: np.ndarray,
                          samples_per_triangle: int = 10) -> dict:
    """Check every node's halo against the geometry below it.

    Two conditions per node: sampled surface points of every descendant
    mesh triangle, padded by the finest halo, must lie within the node's
    halo of the node's triangle; and the chain condition must hold, i.e.
    the smallest conservative halo over the immediate children (with their
    halos) must not exceed the node's halo.  Returns ``{"ok",
    "worst_slack", "checked_nodes"}``; negative slack means a violation of
    that depth.
    """
    triangles = as_triangles(triangles)
    bary = _bary_samples(samples_per_triangle)
    worst = np.inf
    checked = 0
    for node in tree.nodes():
        idx = node.leaf_indices()
        tris = triangles[idx]
        v0 = tris[:, 0]
        e1 = tris[:, 1] - tris[:, 0]
        e2 = tris[:, 2] - tris[:, 0]
        pts = (
            v0[:, None, :]
            + bary[None, :, 0, None] * e1[:, None, :]
            + bary[None, :, 1, None] * e2[:, None, :]
        ).reshape(-1, 3)
        tiled = np.broadcast_to(node.triangle.astype(REAL), (pts.shape[0], 3, 3))
        closest, _ = closest_point_triangle_batch(pts, tiled)
        dist = np.linalg.norm(pts - closest, axis=1)
        slack = node.epsilon - (dist + tree.finest_epsilon)
        worst = min(worst, float(slack.min()))
        if node.is_leaf:
            need = conservative_epsilon(node.triangle, tris, tree.finest_epsilon)
        else:
            need = conservative_epsilon(
                node.triangle,
                np.stack([c.triangle for c in node.children]),
                [c.epsilon for c in node.children],
            )
        worst = min(worst, float(node.epsilon - need))
        checked += 1
    return {"ok": worst >= -1e-6, "worst_slack": worst, "checked_nodes": checked}


# ---------------------------------------------------------------------------
# Serialization (tree cache files).
# ---------------------------------------------------------------------------


def _node_to_dict(node: SurrogateNode) -> dict:
    out = {
        "triangle": [float(c) for c in node.triangle.ravel()],
        "epsilon": float(node.epsilon),
    }
    if node.is_leaf:
        out["payload"] = [int(i) for i in node.payload]
    else:
        out["children"] = [_node_to_dict(c) for c in node.children]
    return out


def _node_from_dict(data: dict, level: int) -> SurrogateNode:
    tri = np.asarray(data["triangle"], dtype=REAL).reshape(3, 3)
    if "payload" in data:
        return SurrogateNode(tri, float(data["epsilon"]), level,
                             payload=np.asarray(data["payload"], dtype=np.int64))
    children = [_node_from_dict(c, level + 1) for c in data["children"]]
    return SurrogateNode(tri, float(data["epsilon"]), level, children=children)


def tree_to_json(tree: SurrogateTree) -> str:
    doc = {
        "version": TREE_FORMAT_VERSION,
        "n_surrogate": tree.n_surrogate,
        "finest_epsilon": tree.finest_epsilon,
        "mesh_checksum": tree.mesh_checksum,
        "root": _node_to_dict(tree.root),
    }
    return json.dumps(doc, sort_keys=True)


def tree_from_json(text: str) -> SurrogateTree:
    doc = json.loads(text)
    version = doc.get("version")
    if version != TREE_FORMAT_VERSION:
        raise ValueError(f"unsupported tree format version {version!r}")
    return SurrogateTree(
        root=_node_from_dict(doc["root"], 0),
        n_surrogate=int(doc["n_surrogate"]),
        finest_epsilon=float(doc["finest_epsilon"]),
        mesh_checksum=str(doc["mesh_checksum"]),
    )
