"""Flat-buffer triangle geometry: vectors, triangle soups, and rigid motions.

Conventions
-----------
A vector is a numpy array of shape ``(3,)``, a triangle an array of shape
``(3, 3)`` with one vertex per row, and a batch of triangles an array of
shape ``(n, 3, 3)``.  The engine streams triangles through kernels as a
"soup": a contiguous buffer of ``9 * count`` scalars, vertex-major
(``v1.x v1.y v1.z v2.x ... v3.z`` per triangle).

The scalar type defaults to double precision.  Set the environment variable
``TRICONTACT_REAL=float32`` before import to run the whole engine in single
precision.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

REAL = np.float32 if os.environ.get("TRICONTACT_REAL") == "float32" else np.float64


def vec3(x, y, z) -> np.ndarray:
    return np.array([x, y, z], dtype=REAL)


def triangle(v1, v2, v3) -> np.ndarray:
    """Build a (3, 3) triangle from three vertex-like sequences."""
    return np.array([v1, v2, v3], dtype=REAL)


def as_triangles(obj) -> np.ndarray:
    """Coerce a triangle, a sequence of triangles, or a batch to (n, 3, 3)."""
    arr = np.asarray(obj, dtype=REAL)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1:] != (3, 3):
        raise ValueError(f"expected triangles of shape (n, 3, 3), got {arr.shape}")
    return arr


def barycentric_point(tri: np.ndarray, a: float, b: float) -> np.ndarray:
    """Point ``v1 + a*(v2-v1) + b*(v3-v1)``; (a, b) may lie outside [0, 1]."""
    tri = np.asarray(tri, dtype=REAL)
    return tri[0] + a * (tri[1] - tri[0]) + b * (tri[2] - tri[0])


def triangle_cross(tris: np.ndarray) -> np.ndarray:
    """Unnormalised normal ``(v2-v1) x (v3-v1)`` per triangle, shape (n, 3)."""
    tris = as_triangles(tris)
    return np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])


def triangle_normals(tris: np.ndarray) -> np.ndarray:
    """Unit normals per triangle (right-hand rule over vertex order)."""
    n = triangle_cross(tris)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.where(norm > 0.0, norm, 1.0)


def triangle_areas(tris: np.ndarray) -> np.ndarray:
    return 0.5 * np.linalg.norm(triangle_cross(tris), axis=1)


def degenerate_mask(tris: np.ndarray, rel_tol: float = 1e-12) -> np.ndarray:
    """Flag triangles whose squared area is below ``rel_tol * longest_edge**4``."""
    tris = as_triangles(tris)
    cross = triangle_cross(tris)
    sq_area = 0.25 * np.einsum("ij,ij->i", cross, cross)
    edges = tris[:, [1, 2, 0]] - tris
    longest_sq = np.einsum("ijk,ijk->ij", edges, edges).max(axis=1)
    return (longest_sq == 0.0) | (sq_area < rel_tol * longest_sq * longest_sq)


def is_degenerate(tri: np.ndarray, rel_tol: float = 1e-12) -> bool:
    return bool(degenerate_mask(tri, rel_tol)[0])


@dataclass
class TriangleSoup:
    """Topology-free triangle buffer: ``9 * count`` scalars, vertex-major."""

    coords: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=REAL))

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype=REAL).ravel()
        if self.coords.size % 9 != 0:
            raise ValueError("soup buffer length must be a multiple of 9")

    @property
    def count(self) -> int:
        return self.coords.size // 9

    def triangles(self) -> np.ndarray:
        """View of the buffer as (count, 3, 3); shares memory."""
        return self.coords.reshape(-1, 3, 3)

    def copy(self) -> "TriangleSoup":
        return TriangleSoup(self.coords.copy())


def flatten(triangles) -> TriangleSoup:
    """Flatten an ordered collection of triangles into a soup (input order kept)."""
    tris = list(triangles) if not isinstance(triangles, np.ndarray) else triangles
    if len(tris) == 0:
        return TriangleSoup()
    return TriangleSoup(as_triangles(np.asarray(tris, dtype=REAL)).ravel())


def unflatten(soup: TriangleSoup) -> np.ndarray:
    """Inverse of :func:`flatten`; returns a (count, 3, 3) array copy."""
    return soup.triangles().copy()


# ---------------------------------------------------------------------------
# Rigid motions: unit quaternion (w, x, y, z) plus translation.
# ---------------------------------------------------------------------------

_QUAT_NORM_TOL = 1e-9


@dataclass
class RigidMotion:
    """Rotate-then-translate transform with a unit quaternion rotation."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0], dtype=REAL))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=REAL))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=REAL).reshape(4)
        self.translation = np.asarray(self.translation, dtype=REAL).reshape(3)
        self._renormalize()

    def _renormalize(self):
        norm = float(np.linalg.norm(self.rotation))
        if norm == 0.0:
            raise ValueError("zero quaternion")
        if abs(norm - 1.0) > _QUAT_NORM_TOL:
            self.rotation = self.rotation / norm

    @staticmethod
    def identity() -> "RigidMotion":
        return RigidMotion()

    @staticmethod
    def from_axis_angle(axis, angle: float, translation=(0.0, 0.0, 0.0)) -> "RigidMotion":
        axis = np.asarray(axis, dtype=REAL)
        axis = axis / np.linalg.norm(axis)
        half = 0.5 * angle
        q = np.concatenate(([np.cos(half)], np.sin(half) * axis))
        return RigidMotion(q, np.asarray(translation, dtype=REAL))

    @staticmethod
    def random_rotation(rng: np.random.Generator, translation=(0.0, 0.0, 0.0)) -> "RigidMotion":
        """Uniform random rotation (normalised 4-normal sample)."""
        q = rng.normal(size=4)
        return RigidMotion(q / np.linalg.norm(q), np.asarray(translation, dtype=REAL))

    def rotation_matrix(self) -> np.ndarray:
        w, x, y, z = (float(c) for c in self.rotation)
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ],
            dtype=REAL,
        )

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        """Rotate then translate an (..., 3) array of points."""
        points = np.asarray(points, dtype=REAL)
        return points @ self.rotation_matrix().T + self.translation

    def compose(self, other: "RigidMotion") -> "RigidMotion":
        """Motion equivalent to applying ``other`` first, then ``self``."""
        w1, x1, y1, z1 = (float(c) for c in self.rotation)
        w2, x2, y2, z2 = (float(c) for c in other.rotation)
        q = np.array(
            [
                w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
                w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
                w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
            ],
            dtype=REAL,
        )
        t = self.apply_points(other.translation)
        return RigidMotion(q, t)


def apply_motion(soup: TriangleSoup, motion: RigidMotion) -> TriangleSoup:
    """Transform every soup coordinate by rotate-then-translate."""
    if soup.count == 0:
        return TriangleSoup()
    pts = soup.coords.reshape(-1, 3)
    return TriangleSoup(motion.apply_points(pts).ravel())


# ---------------------------------------------------------------------------
# OBJ import/export (triangulated faces only).
# ---------------------------------------------------------------------------


def load_obj(path) -> tuple[np.ndarray, np.ndarray]:
    """Read an OBJ file; returns (vertices (m, 3), faces (n, 3) int).

    Only ``v`` and triangular ``f`` records are honoured; normals and
    texture coordinates on ``f`` entries are ignored.
    """
    vertices: list[list[float]] = []
    faces: list[list[int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                vertices.append([float(c) for c in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                if len(idx) != 3:
                    raise ValueError("only triangulated faces are supported")
                faces.append([i - 1 if i > 0 else len(vertices) + i for i in idx])
    return (
        np.asarray(vertices, dtype=REAL).reshape(-1, 3),
        np.asarray(faces, dtype=np.int64).reshape(-1, 3),
    )


def save_obj(path, vertices: np.ndarray, faces: np.ndarray) -> None:
    vertices = np.asarray(vertices, dtype=REAL)
    faces = np.asarray(faces, dtype=np.int64)
    with open(path, "w", encoding="utf-8") as fh:
        for v in vertices:
            fh.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for f in faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def mesh_to_triangles(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Expand an indexed mesh into a (n, 3, 3) triangle batch."""
    return np.asarray(vertices, dtype=REAL)[np.asarray(faces, dtype=np.int64)]


def triangles_to_mesh(tris: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Weld exactly-equal vertices of a triangle batch into an indexed mesh."""
    tris = as_triangles(tris)
    flat = tris.reshape(-1, 3)
    verts, inverse = np.unique(flat, axis=0, return_inverse=True)
    return verts, inverse.reshape(-1, 3)
