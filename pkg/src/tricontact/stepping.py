"""Time integrators: explicit Euler, multiresolution explicit detection,
implicit Euler with Picard iterations, and the fused multiscale Picard
scheme with per-pair active sets and a removal-veto memory.

All detection work is batched through the hybrid kernel; comparison-based
fallbacks run only for pairs of real mesh triangles, never on surrogate
levels.  Counter reports are deterministic for identical configurations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .contact import (ContactPoint, ForceModelParams, MassProperties,
                      accumulate, contact_from_segment, contact_force,
                      immovable_mass, mass_properties_from_mesh,
                      merge_contacts)
from .geometry import REAL, RigidMotion, as_triangles
from .kernels import KernelCounters, KernelParams, Kind, hybrid_batch
from .surrogate import SurrogateTree, build_surrogate_tree, FitParams

MODES = (
    "ExplicitSingle",
    "ExplicitMultiscale",
    "ImplicitSingle",
    "ImplicitSurrogateInPicard",
    "ImplicitMultiscalePicard",
)

EXPLICIT_MODES = ("ExplicitSingle", "ExplicitMultiscale")
IMPLICIT_MODES = ("ImplicitSingle", "ImplicitSurrogateInPicard", "ImplicitMultiscalePicard")


class PicardDiverged(RuntimeError):
    def __init__(self, step_index: int, iterations: int):
        super().__init__(f"Picard loop exceeded {iterations} iterations at step {step_index}")
        self.step_index = step_index
        self.iterations = iterations


@dataclass
class StepConfig:
    dt: float = 1e-4
    mode: str = "ExplicitSingle"
    convergence_rel_tol: float = 0.01
    max_picard_iterations: int = 200
    theta_init: float = 1.0
    theta_min: float = 0.05
    theta_grow: float = 1.2
    theta_shrink: float = 0.5
    surrogate_force_damping: tuple | None = None  # per-height scales, default 2**-h
    force: ForceModelParams = field(default_factory=ForceModelParams)

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.convergence_rel_tol <= 0.0:
            raise ValueError("convergence tolerance must be positive")

    def damping_for_height(self, height: int) -> float:
        if height <= 0:
            return 1.0
        if self.surrogate_force_damping is not None:
            idx = min(height, len(self.surrogate_force_damping) - 1)
            return float(self.surrogate_force_damping[idx])
        return float(2.0 ** (-height))


# ---------------------------------------------------------------------------
# Flattened tree arrays for batched traversal.
# ---------------------------------------------------------------------------


class FlatTree:
    """Array view of a surrogate tree with the mesh triangles appended.

    Ids ``0 .. n_nodes-1`` are surrogate nodes in preorder (root = 0); ids
    ``n_nodes .. n_nodes + n_fine - 1`` are the real mesh triangles, whose
    parent is their owning leaf node.  Heights count upward from the mesh
    level (fine = 0, leaf surrogate = 1, ...).
    """

    def __init__(self, tree: SurrogateTree, mesh_tris: np.ndarray):
        mesh_tris = as_triangles(mesh_tris)
        nodes = list(tree.nodes())
        index = {id(node): i for i, node in enumerate(nodes)}
        self.n_nodes = len(nodes)
        self.n_fine = mesh_tris.shape[0]
        total = self.n_nodes + self.n_fine

        self.tri = np.empty((total, 3, 3), dtype=REAL)
        self.eps = np.empty(total, dtype=REAL)
        self.parent = np.full(total, -1, dtype=np.int64)
        self.level = np.zeros(total, dtype=np.int64)
        self.height = np.zeros(total, dtype=np.int64)
        self.children: list[np.ndarray] = [np.empty(0, dtype=np.int64)] * total

        for i, node in enumerate(nodes):
            self.tri[i] = node.triangle
            self.eps[i] = node.epsilon
            self.level[i] = node.level
            if node.is_leaf:
                fine_ids = self.n_nodes + node.payload
                self.children[i] = fine_ids.astype(np.int64)
                self.parent[fine_ids] = i
            else:
                kid_ids = np.array([index[id(c)] for c in node.children], dtype=np.int64)
                self.children[i] = kid_ids
                self.parent[kid_ids] = i

        self.tri[self.n_nodes:] = mesh_tris
        self.eps[self.n_nodes:] = tree.finest_epsilon
        self.level[self.n_nodes:] = self.level[self.parent[self.n_nodes:]] + 1

        for i in range(self.n_nodes - 1, -1, -1):
            kids = self.children[i]
            self.height[i] = 1 + int(self.height[kids].max()) if kids.size else 1
        self.root = 0

    def is_fine(self, ids: np.ndarray) -> np.ndarray:
        return np.asarray(ids) >= self.n_nodes

    def fine_index(self, ids: np.ndarray) -> np.ndarray:
        """Mesh triangle index of fine ids."""
        return np.asarray(ids) - self.n_nodes


# ---------------------------------------------------------------------------
# Particles and systems.
# ---------------------------------------------------------------------------


@dataclass
class Particle:
    body_tris: np.ndarray
    flat: FlatTree
    motion: RigidMotion
    v: np.ndarray
    omega: np.ndarray
    mass: MassProperties
    epsilon: float
    immovable: bool = False

    def com_world(self) -> np.ndarray:
        return self.motion.apply_points(self.mass.center_of_mass)

    def bound_radius(self) -> float:
        com = self.mass.center_of_mass
        r = np.linalg.norm(self.body_tris.reshape(-1, 3) - com, axis=1).max()
        # the root halo already covers the geometry; either bound works
        return float(r) + self.epsilon

    def world_tris(self, motion: RigidMotion | None = None) -> np.ndarray:
        motion = motion or self.motion
        return motion.apply_points(self.flat.tri.reshape(-1, 3)).reshape(-1, 3, 3)


@dataclass
class System:
    particles: list[Particle]
    gravity: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=REAL))
    time: float = 0.0
    step_index: int = 0


def system_from_scene(scene, kernel_params: KernelParams | None = None,
                      n_surrogate: int = 8, fit: FitParams | None = None) -> System:
    """Build particles (mass properties + surrogate trees) from a scene."""
    from .geometry import mesh_to_triangles

    kernel_params = kernel_params or KernelParams()
    particles = []
    for idx, sp in enumerate(scene.particles):
        tris = mesh_to_triangles(sp.vertices, sp.faces)
        tree = build_surrogate_tree(
            tris, n_surrogate, fit=fit, seed=idx, finest_epsilon=sp.epsilon
        )
        mass = immovable_mass() if sp.immovable else mass_properties_from_mesh(tris, sp.density)
        particles.append(
            Particle(
                body_tris=tris,
                flat=FlatTree(tree, tris),
                motion=sp.motion,
                v=np.asarray(sp.velocity, dtype=REAL).copy(),
                omega=np.asarray(sp.omega, dtype=REAL).copy(),
                mass=mass,
                epsilon=sp.epsilon,
                immovable=sp.immovable,
            )
        )
    return System(particles=particles, gravity=np.asarray(scene.gravity, dtype=REAL))


# ---------------------------------------------------------------------------
# Counters.
# ---------------------------------------------------------------------------


@dataclass
class StepStats:
    """Per-step detection workload and solver telemetry."""

    checks_by_level: dict = field(default_factory=dict)  # height bin -> kernel pairs
    sweep_histograms: list = field(default_factory=list)  # per Picard sweep
    picard_iterations: int = 0
    contacts_merged: int = 0
    kernel: KernelCounters = field(default_factory=KernelCounters)
    broad_phase_pairs: int = 0

    def record_checks(self, level_bin: int, count: int) -> None:
        if count:
            self.checks_by_level[level_bin] = self.checks_by_level.get(level_bin, 0) + count
            if self.sweep_histograms:
                hist = self.sweep_histograms[-1]
                hist[level_bin] = hist.get(level_bin, 0) + count

    def begin_sweep(self) -> None:
        self.sweep_histograms.append({})

    @property
    def total_checks(self) -> int:
        return sum(self.checks_by_level.values())

    @property
    def finest_checks(self) -> int:
        return self.checks_by_level.get(0, 0)


# ---------------------------------------------------------------------------
# Broad phase.
# ---------------------------------------------------------------------------


def broad_phase_pairs(system: System, motions: list[RigidMotion] | None = None) -> list[tuple[int, int]]:
    """Bounding-sphere overlap candidates via uniform-grid binning.

    Returns lexicographically sorted (i, j) with i < j.  This stage is
    bookkeeping, not detection: its tests are excluded from all counters.
    """
    particles = system.particles
    n = len(particles)
    if n < 2:
        return []
    motions = motions or [p.motion for p in particles]
    centers = np.stack([m.apply_points(p.mass.center_of_mass) if not p.immovable
                        else m.apply_points(np.zeros(3)) for m, p in zip(motions, particles)])
    radii = np.array([p.bound_radius() for p in particles])

    cell = 2.0 * float(radii.max())
    bins: dict[tuple[int, int, int], list[int]] = {}
    keys = np.floor(centers / cell).astype(np.int64)
    for i in range(n):
        bins.setdefault(tuple(keys[i]), []).append(i)
    pairs = set()
    offsets = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)]
    for key, members in bins.items():
        for off in offsets:
            other = bins.get((key[0] + off[0], key[1] + off[1], key[2] + off[2]))
            if not other:
                continue
            for i in members:
                for j in other:
                    if i < j:
                        pairs.add((i, j))
    out = []
    for i, j in sorted(pairs):
        if np.linalg.norm(centers[i] - centers[j]) <= radii[i] + radii[j]:
            out.append((i, j))
    return out


# ---------------------------------------------------------------------------
# Detection.
# ---------------------------------------------------------------------------


def _sorted_contacts(contacts: list[ContactPoint]) -> list[ContactPoint]:
    return sorted(contacts, key=lambda c: (c.pair, c.source))


def single_level_contacts(p_i: Particle, p_j: Particle, pair: tuple[int, int],
                          params: KernelParams, stats: StepStats,
                          motion_i=None, motion_j=None,
                          chunk: int = 262144) -> list[ContactPoint]:
    """All fine-triangle pairs through the hybrid kernel (flat detection)."""
    world_i = (motion_i or p_i.motion).apply_points(p_i.body_tris.reshape(-1, 3)).reshape(-1, 3, 3)
    world_j = (motion_j or p_j.motion).apply_points(p_j.body_tris.reshape(-1, 3)).reshape(-1, 3, 3)
    ni, nj = world_i.shape[0], world_j.shape[0]
    eps_pair = 0.5 * (p_i.epsilon + p_j.epsilon)
    ii, jj = np.meshgrid(np.arange(ni), np.arange(nj), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    contacts: list[ContactPoint] = []
    for start in range(0, ii.size, chunk):
        si, sj = ii[start:start + chunk], jj[start:start + chunk]
        res = hybrid_batch(world_i[si], world_j[sj], params, stats.kernel, eps_pair)
        stats.record_checks(0, si.size)
        for h in np.nonzero(res.kind == np.int8(Kind.CONTACT))[0]:
            contacts.append(
                contact_from_segment(
                    res.point_a[h], res.point_b[h], p_i.epsilon, p_j.epsilon,
                    pair=pair, source=(int(si[h]), int(sj[h])),
                )
            )
    return _sorted_contacts(contacts)


def multiscale_contacts(p_i: Particle, p_j: Particle, pair: tuple[int, int],
                        params: KernelParams, stats: StepStats,
                        motion_i=None, motion_j=None) -> list[ContactPoint]:
    """Top-down unfolding detection over both surrogate trees.

    Pairings start at the roots; a pairing with contact or an unsettled
    verdict unfolds the surrogate side(s) one level, a no-contact verdict
    prunes the branch, and only contacts between real mesh triangles yield
    contact points.  Comparison fallbacks run on mesh-level pairs only.
    """
    fi, fj = p_i.flat, p_j.flat
    world_i = p_i.world_tris(motion_i)
    world_j = p_j.world_tris(motion_j)
    ids_i = np.array([fi.root], dtype=np.int64)
    ids_j = np.array([fj.root], dtype=np.int64)
    contacts: list[ContactPoint] = []
    while ids_i.size:
        A = world_i[ids_i]
        B = world_j[ids_j]
        eps_i = fi.eps[ids_i]
        eps_j = fj.eps[ids_j]
        fine_i = fi.is_fine(ids_i)
        fine_j = fj.is_fine(ids_j)
        both_fine = fine_i & fine_j
        hgt = np.maximum(fi.height[ids_i], fj.height[ids_j])
        for lvl in np.unique(hgt):
            stats.record_checks(int(lvl), int((hgt == lvl).sum()))
        res = hybrid_batch(A, B, params, stats.kernel, 0.5 * (eps_i + eps_j),
                           allow_fallback=both_fine)
        is_contact = res.kind == np.int8(Kind.CONTACT)
        unsettled = res.kind == np.int8(Kind.NOT_TERMINATED)

        hits = np.nonzero(both_fine & is_contact)[0]
        for h in hits:
            contacts.append(
                contact_from_segment(
                    res.point_a[h], res.point_b[h], float(eps_i[h]), float(eps_j[h]),
                    pair=pair,
                    source=(int(fi.fine_index(ids_i[h])), int(fj.fine_index(ids_j[h]))),
                )
            )

        expand = np.nonzero((is_contact | unsettled) & ~both_fine)[0]
        next_i: list[np.ndarray] = []
        next_j: list[np.ndarray] = []
        for k in expand:
            ci = fi.children[ids_i[k]] if not fine_i[k] else ids_i[k:k + 1]
            cj = fj.children[ids_j[k]] if not fine_j[k] else ids_j[k:k + 1]
            gi, gj = np.meshgrid(ci, cj, indexing="ij")
            next_i.append(gi.ravel())
            next_j.append(gj.ravel())
        if next_i:
            ids_i = np.concatenate(next_i)
            ids_j = np.concatenate(next_j)
        else:
            ids_i = np.empty(0, dtype=np.int64)
            ids_j = np.empty(0, dtype=np.int64)
    return _sorted_contacts(contacts)


# ---------------------------------------------------------------------------
# Force assembly.
# ---------------------------------------------------------------------------


def _pair_forces(contacts: list[ContactPoint], system: System, cfg: StepConfig,
                 motions: list[RigidMotion]) -> dict[int, list]:
    """Per-particle (contact, force) lists; opposite signs per pair side."""
    per_particle: dict[int, list] = {}
    for c in contacts:
        i, j = c.pair
        p_i, p_j = system.particles[i], system.particles[j]
        com_i = motions[i].apply_points(p_i.mass.center_of_mass)
        com_j = motions[j].apply_points(p_j.mass.center_of_mass)
        f = contact_force(
            c, p_i.mass, p_j.mass,
            ForceModelParams(cfg.force.k_s, c.eps[0]),
            centers_fallback=com_i - com_j,
        )
        scale = cfg.damping_for_height(max(c.level))
        f = f * scale
        per_particle.setdefault(i, []).append((c, f))
        per_particle.setdefault(j, []).append((c, -f))
    return per_particle


def _rates(system: System, cfg: StepConfig, contacts: list[ContactPoint],
           motions: list[RigidMotion], omegas: list[np.ndarray]):
    """Raw force/torque and the induced (dv, domega) per particle."""
    per_particle = _pair_forces(contacts, system, cfg, motions)
    n = len(system.particles)
    force = np.zeros((n, 3), dtype=REAL)
    torque = np.zeros((n, 3), dtype=REAL)
    dv = np.zeros((n, 3), dtype=REAL)
    domega = np.zeros((n, 3), dtype=REAL)
    for i, p in enumerate(system.particles):
        items = per_particle.get(i, [])
        if p.immovable:
            continue
        com_w = motions[i].apply_points(p.mass.center_of_mass)
        rot = motions[i].rotation_matrix()
        cs = [c for c, _ in items]
        fs = [f for _, f in items]
        dv[i], domega[i] = accumulate(cs, fs, p.mass, com_w, rot, omegas[i])
        force[i] = np.sum(fs, axis=0) if fs else 0.0
        torque[i] = np.sum([np.cross(c.position - com_w, f) for c, f in items], axis=0) if items else 0.0
    return force, torque, dv, domega


def advance_motion(p: Particle, motion: RigidMotion, v: np.ndarray,
                   omega: np.ndarray, dt: float) -> RigidMotion:
    """Translate by v dt and rotate by omega dt about the world centre of mass."""
    com_w = motion.apply_points(p.mass.center_of_mass)
    speed = float(np.linalg.norm(omega))
    if speed > 0.0:
        delta = RigidMotion.from_axis_angle(np.asarray(omega) / speed, speed * dt)
        rot = delta.compose(RigidMotion(motion.rotation, np.zeros(3)))
    else:
        rot = RigidMotion(motion.rotation, np.zeros(3))
    new_com = com_w + np.asarray(v, dtype=REAL) * dt
    translation = new_com - rot.apply_points(p.mass.center_of_mass)
    return RigidMotion(rot.rotation, translation)


def _detect_all(system: System, cfg: StepConfig, params: KernelParams,
                stats: StepStats, motions: list[RigidMotion],
                multiscale: bool) -> list[ContactPoint]:
    pairs = broad_phase_pairs(system, motions)
    stats.broad_phase_pairs = len(pairs)
    contacts: list[ContactPoint] = []
    for i, j in pairs:
        p_i, p_j = system.particles[i], system.particles[j]
        if multiscale:
            found = multiscale_contacts(p_i, p_j, (i, j), params, stats,
                                        motion_i=motions[i], motion_j=motions[j])
        else:
            found = single_level_contacts(p_i, p_j, (i, j), params, stats,
                                          motion_i=motions[i], motion_j=motions[j])
        contacts.extend(merge_contacts(found, min(p_i.epsilon, p_j.epsilon)))
    return contacts


# ---------------------------------------------------------------------------
# Explicit Euler.
# ---------------------------------------------------------------------------


def explicit_step(system: System, cfg: StepConfig,
                  params: KernelParams | None = None) -> StepStats:
    """One explicit Euler step: detect, move geometry, then update velocities."""
    if cfg.mode not in EXPLICIT_MODES:
        raise ValueError(f"explicit_step cannot run mode {cfg.mode}")
    params = params or KernelParams()
    stats = StepStats()
    stats.begin_sweep()
    motions = [p.motion for p in system.particles]
    contacts = _detect_all(system, cfg, params, stats, motions,
                           multiscale=cfg.mode == "ExplicitMultiscale")
    stats.contacts_merged = len(contacts)
    omegas = [p.omega for p in system.particles]
    _, _, dv, domega = _rates(system, cfg, contacts, motions, omegas)
    for i, p in enumerate(system.particles):
        if p.immovable:
            continue
        p.motion = advance_motion(p, p.motion, p.v, p.omega, cfg.dt)
        p.v = p.v + cfg.dt * (dv[i] + system.gravity)
        p.omega = p.omega + cfg.dt * domega[i]
    system.time += cfg.dt
    system.step_index += 1
    stats.picard_iterations = 0
    return stats


# ---------------------------------------------------------------------------
# Implicit Euler (Picard loop; single-level or surrogate-accelerated).
# ---------------------------------------------------------------------------


def _rel_change(new: np.ndarray, old: np.ndarray, floor: float = 1e-9) -> float:
    scale = max(float(np.linalg.norm(new)), float(np.linalg.norm(old)))
    if scale < floor:
        return 0.0
    return float(np.linalg.norm(new - old)) / scale


def implicit_step(system: System, cfg: StepConfig,
                  params: KernelParams | None = None) -> StepStats:
    """Implicit Euler via Picard sweeps on guessed end-of-step states."""
    if cfg.mode not in ("ImplicitSingle", "ImplicitSurrogateInPicard"):
        raise ValueError(f"implicit_step cannot run mode {cfg.mode}")
    params = params or KernelParams()
    multiscale = cfg.mode == "ImplicitSurrogateInPicard"
    stats = StepStats()

    n = len(system.particles)
    motions = [p.motion for p in system.particles]
    v_guess = [p.v.copy() for p in system.particles]
    w_guess = [p.omega.copy() for p in system.particles]
    guess_motions = list(motions)
    theta = np.full(n, cfg.theta_init)
    prev_raw = np.zeros((n, 6), dtype=REAL)
    applied = np.zeros((n, 6), dtype=REAL)
    have_prev = False

    for sweep in range(cfg.max_picard_iterations):
        stats.begin_sweep()
        contacts = _detect_all(system, cfg, params, stats, guess_motions, multiscale)
        force, torque, dv, domega = _rates(system, cfg, contacts, guess_motions, w_guess)
        raw = np.concatenate([force, torque], axis=1)

        if have_prev:
            for i in range(n):
                # zero against zero counts as agreement: pulls theta back up
                # once transient (surrogate) forces have faded
                theta[i] = (
                    min(1.0, cfg.theta_grow * theta[i])
                    if float(raw[i] @ prev_raw[i]) >= 0.0
                    else max(cfg.theta_min, cfg.theta_shrink * theta[i])
                )
        rates = np.concatenate([dv, domega], axis=1)
        applied = theta[:, None] * rates + (1.0 - theta[:, None]) * (applied if have_prev else rates)
        blended_dv = applied[:, :3]
        blended_dw = applied[:, 3:]

        # converged when the raw forces are stationary and the relaxed rates
        # have caught up with them (no stale blend left in the commit)
        converged = have_prev and all(
            _rel_change(raw[i, :3], prev_raw[i, :3]) <= cfg.convergence_rel_tol
            and _rel_change(raw[i, 3:], prev_raw[i, 3:]) <= cfg.convergence_rel_tol
            and _rel_change(applied[i, :3], rates[i, :3]) <= cfg.convergence_rel_tol
            and _rel_change(applied[i, 3:], rates[i, 3:]) <= cfg.convergence_rel_tol
            for i in range(n)
        )
        if not have_prev and not contacts:
            converged = True  # force-free step needs a single sweep

        for i, p in enumerate(system.particles):
            if p.immovable:
                continue
            v_guess[i] = p.v + cfg.dt * (blended_dv[i] + system.gravity)
            w_guess[i] = p.omega + cfg.dt * blended_dw[i]
            guess_motions[i] = advance_motion(p, motions[i], v_guess[i], w_guess[i], cfg.dt)
        prev_raw = raw
        have_prev = True
        stats.picard_iterations = sweep + 1
        stats.contacts_merged = len(contacts)
        if converged:
            break
    else:
        raise PicardDiverged(system.step_index, cfg.max_picard_iterations)

    for i, p in enumerate(system.particles):
        if p.immovable:
            continue
        p.motion = guess_motions[i]
        p.v = v_guess[i]
        p.omega = w_guess[i]
    system.time += cfg.dt
    system.step_index += 1
    return stats


# ---------------------------------------------------------------------------
# Fused multiscale Picard (active sets persist across sweeps).
# ---------------------------------------------------------------------------


@dataclass
class PairSide:
    """Active-set bookkeeping of one particle against one partner."""

    active: set = field(default_factory=set)
    removed: set = field(default_factory=set)   # narrowed away at least once
    vetoed: set = field(default_factory=set)    # re-added: removal now vetoed


def narrow_active_set(side: PairSide, flat: FlatTree, non_contact_nodes) -> set:
    """Replace no-contact nodes by their parents, honouring the veto.

    Returns the replacement node set for the listed nodes (vetoed nodes and
    the root stay put); newly removed nodes are recorded for the memory.
    """
    out: set = set()
    for node in non_contact_nodes:
        if node in side.vetoed or flat.parent[node] < 0:
            out.add(int(node))
        else:
            out.add(int(flat.parent[node]))
            side.removed.add(int(node))
    return out


def widen_nodes(side: PairSide, flat: FlatTree, node: int) -> set:
    """Children of a surrogate node (the node itself when already fine).

    Children that were once removed become vetoed on re-entry.
    """
    if flat.is_fine(np.array([node]))[0]:
        return {int(node)}
    kids = {int(k) for k in flat.children[node]}
    for k in kids:
        if k in side.removed:
            side.vetoed.add(k)
    return kids


def active_set_cleanup(side: PairSide, flat: FlatTree) -> None:
    """Restore tree consistency: no active node keeps an active ancestor.

    Whenever any child of a surrogate node is active, all its siblings are
    activated and the parent retires.
    """
    active = set(side.active)
    changed = True
    while changed:
        changed = False
        for node in sorted(active):
            parent = int(flat.parent[node])
            if parent >= 0 and parent in active:
                active.discard(parent)
                active.update(int(k) for k in flat.children[parent])
                changed = True
                break
    side.active = active


def multiscale_picard_step(system: System, cfg: StepConfig,
                           params: KernelParams | None = None) -> StepStats:
    """Fused Picard/tree-unfolding implicit step (per-pair active sets).

    Active sets start at the roots and persist across Picard sweeps.
    Pairings with contact or an unsettled verdict widen one level per
    sweep; no-contact pairings narrow toward the parents subject to the
    removal veto; halo contacts on surrogate levels feed damped forces
    into the guess.  Termination needs both state convergence and an
    unchanged active set.
    """
    if cfg.mode != "ImplicitMultiscalePicard":
        raise ValueError(f"multiscale_picard_step cannot run mode {cfg.mode}")
    params = params or KernelParams()
    stats = StepStats()

    n = len(system.particles)
    motions = [p.motion for p in system.particles]
    v_guess = [p.v.copy() for p in system.particles]
    w_guess = [p.omega.copy() for p in system.particles]
    guess_motions = list(motions)
    theta = np.full(n, cfg.theta_init)
    prev_raw = np.zeros((n, 6), dtype=REAL)
    applied = np.zeros((n, 6), dtype=REAL)
    have_prev = False

    pairs = broad_phase_pairs(system, motions)
    stats.broad_phase_pairs = len(pairs)
    state: dict[tuple[int, int], PairSide] = {}
    for i, j in pairs:
        state[(i, j)] = PairSide(active={system.particles[i].flat.root})
        state[(j, i)] = PairSide(active={system.particles[j].flat.root})

    for sweep in range(cfg.max_picard_iterations):
        stats.begin_sweep()
        contacts: list[ContactPoint] = []
        sets_changed = False
        for i, j in pairs:
            p_i, p_j = system.particles[i], system.particles[j]
            fi, fj = p_i.flat, p_j.flat
            side_i, side_j = state[(i, j)], state[(j, i)]
            ids_i = np.array(sorted(side_i.active), dtype=np.int64)
            ids_j = np.array(sorted(side_j.active), dtype=np.int64)
            gi, gj = np.meshgrid(ids_i, ids_j, indexing="ij")
            gi, gj = gi.ravel(), gj.ravel()
            world_i = p_i.world_tris(guess_motions[i])
            world_j = p_j.world_tris(guess_motions[j])
            eps_i = fi.eps[gi]
            eps_j = fj.eps[gj]
            fine_i = fi.is_fine(gi)
            fine_j = fj.is_fine(gj)
            both_fine = fine_i & fine_j
            hgt = np.maximum(fi.height[gi], fj.height[gj])
            for lvl in np.unique(hgt):
                stats.record_checks(int(lvl), int((hgt == lvl).sum()))
            res = hybrid_batch(world_i[gi], world_j[gj], params, stats.kernel,
                               0.5 * (eps_i + eps_j), allow_fallback=both_fine)
            is_contact = res.kind == np.int8(Kind.CONTACT)
            unsettled = res.kind == np.int8(Kind.NOT_TERMINATED)

            pair_contacts: list[ContactPoint] = []
            for h in np.nonzero(is_contact)[0]:
                hi = int(fi.height[gi[h]])
                hj = int(fj.height[gj[h]])
                src_i = int(fi.fine_index(gi[h])) if fine_i[h] else int(gi[h])
                src_j = int(fj.fine_index(gj[h])) if fine_j[h] else int(gj[h])
                pair_contacts.append(
                    contact_from_segment(
                        res.point_a[h], res.point_b[h], float(eps_i[h]), float(eps_j[h]),
                        pair=(i, j), source=(src_i, src_j), level=(hi, hj),
                    )
                )
            # merge within the same representation level only
            by_level: dict[tuple, list[ContactPoint]] = {}
            for c in _sorted_contacts(pair_contacts):
                by_level.setdefault(c.level, []).append(c)
            for lvl in sorted(by_level):
                contacts.extend(merge_contacts(by_level[lvl], min(p_i.epsilon, p_j.epsilon)))

            # widen / narrow per side
            keep = is_contact | unsettled
            new_i: set = set()
            new_j: set = set()
            for h in np.nonzero(keep)[0]:
                new_i |= widen_nodes(side_i, fi, int(gi[h]))
                new_j |= widen_nodes(side_j, fj, int(gj[h]))
            prune_i = set(int(x) for x in gi[~keep]) - set(int(x) for x in gi[keep])
            prune_j = set(int(x) for x in gj[~keep]) - set(int(x) for x in gj[keep])
            new_i |= narrow_active_set(side_i, fi, sorted(prune_i))
            new_j |= narrow_active_set(side_j, fj, sorted(prune_j))

            old_i, old_j = set(side_i.active), set(side_j.active)
            side_i.active = new_i
            side_j.active = new_j
            active_set_cleanup(side_i, fi)
            active_set_cleanup(side_j, fj)
            # memory bookkeeping: removal is vetoed once a node re-enters
            for side, old in ((side_i, old_i), (side_j, old_j)):
                side.vetoed |= side.active & side.removed
                side.removed |= old - side.active
            if side_i.active != old_i or side_j.active != old_j:
                sets_changed = True

        force, torque, dv, domega = _rates(system, cfg, contacts, guess_motions, w_guess)
        raw = np.concatenate([force, torque], axis=1)
        if have_prev:
            for k in range(n):
                # zero against zero counts as agreement: pulls theta back up
                # once transient surrogate-level forces have faded
                theta[k] = (
                    min(1.0, cfg.theta_grow * theta[k])
                    if float(raw[k] @ prev_raw[k]) >= 0.0
                    else max(cfg.theta_min, cfg.theta_shrink * theta[k])
                )
        rates = np.concatenate([dv, domega], axis=1)
        applied = theta[:, None] * rates + (1.0 - theta[:, None]) * (applied if have_prev else rates)

        # a surrogate-level contact always widens some active set, so a
        # converged state may only carry mesh-level contacts
        mesh_level_only = all(max(c.level) == 0 for c in contacts)
        converged = have_prev and not sets_changed and mesh_level_only and all(
            _rel_change(raw[k, :3], prev_raw[k, :3]) <= cfg.convergence_rel_tol
            and _rel_change(raw[k, 3:], prev_raw[k, 3:]) <= cfg.convergence_rel_tol
            and _rel_change(applied[k, :3], rates[k, :3]) <= cfg.convergence_rel_tol
            and _rel_change(applied[k, 3:], rates[k, 3:]) <= cfg.convergence_rel_tol
            for k in range(n)
        )
        if not have_prev and not contacts and not sets_changed:
            converged = True

        for k, p in enumerate(system.particles):
            if p.immovable:
                continue
            v_guess[k] = p.v + cfg.dt * (applied[k, :3] + system.gravity)
            w_guess[k] = p.omega + cfg.dt * applied[k, 3:]
            guess_motions[k] = advance_motion(p, motions[k], v_guess[k], w_guess[k], cfg.dt)
        prev_raw = raw
        have_prev = True
        stats.picard_iterations = sweep + 1
        stats.contacts_merged = len([c for c in contacts if max(c.level) == 0])
        if converged:
            break
    else:
        raise PicardDiverged(system.step_index, cfg.max_picard_iterations)

    for k, p in enumerate(system.particles):
        if p.immovable:
            continue
        p.motion = guess_motions[k]
        p.v = v_guess[k]
        p.omega = w_guess[k]
    system.time += cfg.dt
    system.step_index += 1
    return stats


def step(system: System, cfg: StepConfig, params: KernelParams | None = None) -> StepStats:
    """Advance one step in the configured mode."""
    if cfg.mode in EXPLICIT_MODES:
        return explicit_step(system, cfg, params)
    if cfg.mode == "ImplicitMultiscalePicard":
        return multiscale_picard_step(system, cfg, params)
    return implicit_step(system, cfg, params)
