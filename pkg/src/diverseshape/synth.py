"""Synthetic ground-truth mesh family: icosphere template, smooth displacement
fields with known coefficients, region atlases, occlusion masks, and the
occlusion curriculum.

Everything is deterministic in its seed so tests can freeze expected values.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import RankDeficiencyError
from .mesh import Mesh, RegionAtlas, VertexMask, vertex_adjacency

# Icosahedron with unit-sphere projection applied at construction.
_PHI = (1.0 + np.sqrt(5.0)) / 2.0
_ICO_VERTS = np.array(
    [
        [-1, _PHI, 0], [1, _PHI, 0], [-1, -_PHI, 0], [1, -_PHI, 0],
        [0, -1, _PHI], [0, 1, _PHI], [0, -1, -_PHI], [0, 1, -_PHI],
        [_PHI, 0, -1], [_PHI, 0, 1], [-_PHI, 0, -1], [-_PHI, 0, 1],
    ],
    dtype=np.float64,
)
_ICO_FACES = np.array(
    [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ],
    dtype=np.int64,
)

DEFAULT_BUMP_WIDTH = 1.0  # Gaussian falloff radius in unit-sphere chord units


def make_template(subdivisions: int) -> Mesh:
    """Unit icosphere: 10 * 4**k + 2 vertices after k midpoint subdivisions."""
    if not 0 <= subdivisions <= 5:
        raise ValueError(f"subdivisions must be in [0, 5], got {subdivisions}")
    verts = [v / np.linalg.norm(v) for v in _ICO_VERTS]
    faces = [tuple(f) for f in _ICO_FACES]
    for _ in range(subdivisions):
        midpoint = {}

        def split(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in midpoint:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                midpoint[key] = len(verts) - 1
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = split(a, b), split(b, c), split(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return Mesh(np.array(verts), np.array(faces, dtype=np.int64))


def _bfs_hops(adjacency, starts) -> np.ndarray:
    """Hop distance from the start set to every vertex (-1 if unreachable)."""
    dist = np.full(len(adjacency), -1, dtype=np.int64)
    queue = deque()
    for s in starts:
        dist[s] = 0
        queue.append(int(s))
    while queue:
        v = queue.popleft()
        for w in adjacency[v]:
            if dist[w] < 0:
                dist[w] = dist[v] + 1
                queue.append(int(w))
    return dist


def farthest_point_sample(mesh: Mesh, count: int, start: int = 0) -> np.ndarray:
    """Greedy hop-distance FPS; ties broken toward the lowest vertex index."""
    n = mesh.n_vertices
    if not 1 <= count <= n:
        raise ValueError(f"sample count must be in [1, {n}], got {count}")
    adjacency = vertex_adjacency(mesh)
    chosen = [int(start)]
    min_dist = _bfs_hops(adjacency, [start])
    for _ in range(count - 1):
        nxt = int(np.argmax(min_dist))  # argmax returns the first (lowest) index on ties
        chosen.append(nxt)
        min_dist = np.minimum(min_dist, _bfs_hops(adjacency, [nxt]))
    return np.array(chosen, dtype=np.int64)


def template_landmarks(template: Mesh, count: int = 68) -> np.ndarray:
    """Fixed landmark vertex indices: deterministic FPS from vertex 0."""
    return farthest_point_sample(template, count, start=0)


@dataclass(frozen=True)
class GroundTruthGenerator:
    """Template plus orthonormal smooth displacement fields with known coefficients.

    shape_fields and expr_fields are (n, N, 3); flattened fields are mutually
    orthonormal across both groups, which makes coefficient recovery by
    projection exact.
    """

    template: Mesh
    shape_fields: np.ndarray
    expr_fields: np.ndarray
    seed: int

    @property
    def n_shape(self) -> int:
        return self.shape_fields.shape[0]

    @property
    def n_expr(self) -> int:
        return self.expr_fields.shape[0]


def make_generator(template: Mesh, n_s: int, n_e: int, seed: int,
                   bump_width: float = DEFAULT_BUMP_WIDTH) -> GroundTruthGenerator:
    """Build n_s + n_e displacement fields from Gaussian radial bumps at FPS centers."""
    if n_s < 1 or n_e < 1:
        raise ValueError("need at least one field per group")
    n = template.n_vertices
    total = n_s + n_e
    if total > n:
        raise ValueError(f"n_s + n_e = {total} exceeds vertex count {n}")
    rng = np.random.default_rng(seed)
    start = int(rng.integers(n))
    centers = farthest_point_sample(template, total, start=start)
    pos = template.vertices
    fields = np.empty((total, 3 * n))
    for k, c in enumerate(centers):
        falloff = np.exp(-np.sum((pos - pos[c]) ** 2, axis=1) / (2.0 * bump_width**2))
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        fields[k] = np.outer(falloff, direction).reshape(-1)
    # Joint orthonormalization keeps shape/expression groups mutually orthogonal.
    q, r = np.linalg.qr(fields.T)
    diag = np.abs(np.diag(r))
    if diag.min() <= 1e-10 * max(diag.max(), 1.0):
        raise RankDeficiencyError("displacement fields are linearly dependent")
    q = q * np.sign(np.diag(r))
    ortho = q.T.reshape(total, n, 3)
    return GroundTruthGenerator(template, ortho[:n_s].copy(), ortho[n_s:].copy(), seed)


@dataclass(frozen=True)
class SyntheticSample:
    mesh: Mesh
    shape_coeffs: np.ndarray
    expr_coeffs: np.ndarray


def _displace(gen: GroundTruthGenerator, beta: np.ndarray, psi: np.ndarray) -> Mesh:
    disp = np.tensordot(beta, gen.shape_fields, axes=1) + np.tensordot(psi, gen.expr_fields, axes=1)
    return gen.template.with_vertices(gen.template.vertices + disp)


def sample_dataset(gen: GroundTruthGenerator, count: int, coeff_sigma: float,
                   seed: int) -> list:
    """Draw meshes template + sum(beta * shape) + sum(psi * expr), beta/psi ~ N(0, sigma^2)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        beta = coeff_sigma * rng.standard_normal(gen.n_shape)
        psi = coeff_sigma * rng.standard_normal(gen.n_expr)
        out.append(SyntheticSample(_displace(gen, beta, psi), beta, psi))
    return out


@dataclass(frozen=True)
class SubjectDataset:
    """Expression samples grouped by subject, with each subject's neutral shape.

    Coefficient sigmas decay geometrically across modes so the PCA spectrum is
    well ordered and coarse-rank truncation is meaningful.
    """

    samples: list
    subject_ids: list
    neutrals: list
    shape_coeffs: np.ndarray  # (n_subjects, n_s)
    expr_coeffs: np.ndarray  # (len(samples), n_e)

    @property
    def meshes(self) -> list:
        return [s for s in self.samples]


def sample_subject_dataset(gen: GroundTruthGenerator, n_subjects: int,
                           samples_per_subject: int, shape_sigma: float,
                           expr_sigma: float, seed: int,
                           sigma_decay: float = 0.7) -> SubjectDataset:
    if n_subjects < 1 or samples_per_subject < 1:
        raise ValueError("need at least one subject and one sample per subject")
    rng = np.random.default_rng(seed)
    s_scale = shape_sigma * sigma_decay ** np.arange(gen.n_shape)
    e_scale = expr_sigma * sigma_decay ** np.arange(gen.n_expr)
    samples, subject_ids, neutrals = [], [], []
    shape_coeffs = np.empty((n_subjects, gen.n_shape))
    expr_coeffs = np.empty((n_subjects * samples_per_subject, gen.n_expr))
    row = 0
    for sid in range(n_subjects):
        beta = s_scale * rng.standard_normal(gen.n_shape)
        shape_coeffs[sid] = beta
        neutrals.append(_displace(gen, beta, np.zeros(gen.n_expr)))
        for _ in range(samples_per_subject):
            psi = e_scale * rng.standard_normal(gen.n_expr)
            expr_coeffs[row] = psi
            samples.append(_displace(gen, beta, psi))
            subject_ids.append(sid)
            row += 1
    return SubjectDataset(samples, subject_ids, neutrals, shape_coeffs, expr_coeffs)


def make_region_atlas(template: Mesh) -> RegionAtlas:
    """Partition into 14 BFS-connected regions around hop-FPS seeds."""
    n_regions = RegionAtlas.N_REGIONS
    n = template.n_vertices
    if n < n_regions:
        raise ValueError(f"template needs at least {n_regions} vertices, got {n}")
    adjacency = vertex_adjacency(template)
    seeds = farthest_point_sample(template, n_regions, start=0)
    label = np.full(n, -1, dtype=np.int64)
    queue = deque()
    for i, s in enumerate(seeds):
        label[s] = i
        queue.append(int(s))
    # Multi-source BFS: each vertex inherits its BFS parent's label, so every
    # region is connected by construction.
    while queue:
        v = queue.popleft()
        for w in adjacency[v]:
            if label[w] < 0:
                label[w] = label[v]
                queue.append(int(w))
    names = tuple(f"region_{i:02d}" for i in range(n_regions))
    masks = tuple(VertexMask(label == i) for i in range(n_regions))
    return RegionAtlas(names, masks)


def grow_occlusion(mesh: Mesh, fraction: float, seed: int) -> VertexMask:
    """BFS-grow a connected mask of exactly ceil(fraction * N) vertices."""
    if not 0.0 < fraction <= 0.9:
        raise ValueError(f"fraction must be in (0, 0.9], got {fraction}")
    n = mesh.n_vertices
    target = int(np.ceil(fraction * n))
    rng = np.random.default_rng(seed)
    start = int(rng.integers(n))
    adjacency = vertex_adjacency(mesh)
    selected = np.zeros(n, dtype=bool)
    selected[start] = True
    taken = 1
    queue = deque([start])
    while queue and taken < target:
        v = queue.popleft()
        for w in adjacency[v]:
            if not selected[w]:
                selected[w] = True
                queue.append(int(w))
                taken += 1
                if taken == target:
                    break
    return VertexMask(selected)


@dataclass(frozen=True)
class CurriculumSchedule:
    """Linear occlusion-size ramp used while training completion models."""

    start_fraction: float = 0.05
    end_fraction: float = 0.40
    ramp_epochs: int = 30

    def __post_init__(self):
        if not 0.0 < self.start_fraction < 1.0 or not 0.0 < self.end_fraction < 1.0:
            raise ValueError("fractions must lie in (0, 1)")
        if self.start_fraction > self.end_fraction:
            raise ValueError("start_fraction must not exceed end_fraction")
        if self.ramp_epochs < 1:
            raise ValueError("ramp_epochs must be positive")


def curriculum_fraction(schedule: CurriculumSchedule, epoch: int) -> float:
    """Ramp linearly from start to end over ramp_epochs, constant afterwards."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    t = min(1.0, epoch / schedule.ramp_epochs)
    return schedule.start_fraction + t * (schedule.end_fraction - schedule.start_fraction)
