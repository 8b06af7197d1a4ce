"""Triangle mesh values, OBJ I/O, vertex masks, graph Laplacian, rigid alignment.

Everything here is an immutable value; every function is pure. Vertex data is
64-bit float throughout, face indices are 0-based int64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DegenerateSelectionError, MeshFormatError

# OBJ record types we silently skip (normals/UVs/grouping are out of scope).
_IGNORED_OBJ_RECORDS = {"vn", "vt", "vp", "o", "g", "s", "usemtl", "mtllib"}


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Mesh:
    """Vertex positions (N, 3) plus triangle faces (F, 3) of vertex indices."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3 or v.shape[0] == 0:
            raise ValueError(f"vertices must be a non-empty (N, 3) array, got {v.shape}")
        if f.size == 0:
            f = f.reshape((0, 3))
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValueError(f"faces must be an (F, 3) array, got {f.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range [0, N)")
        if f.size and (
            np.any(f[:, 0] == f[:, 1]) or np.any(f[:, 1] == f[:, 2]) or np.any(f[:, 0] == f[:, 2])
        ):
            raise ValueError("degenerate face: repeated vertex index")
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "faces", _frozen(f))

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def flat(self) -> np.ndarray:
        """Vertices flattened to a 3N vector, vertex-major (x0, y0, z0, x1, ...)."""
        return self.vertices.reshape(-1)

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        """Same topology, new vertex positions (accepts (N, 3) or flat 3N)."""
        v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        return Mesh(v, self.faces)


@dataclass(frozen=True)
class VertexMask:
    """Boolean selection over the vertices of one mesh."""

    flags: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.flags, dtype=bool)
        if f.ndim != 1 or f.size == 0:
            raise ValueError("mask flags must be a non-empty 1-D boolean array")
        object.__setattr__(self, "flags", _frozen(f))

    @classmethod
    def full(cls, n: int) -> "VertexMask":
        return cls(np.ones(n, dtype=bool))

    @classmethod
    def from_indices(cls, n: int, indices) -> "VertexMask":
        flags = np.zeros(n, dtype=bool)
        flags[np.asarray(indices, dtype=np.int64)] = True
        return cls(flags)

    def __len__(self) -> int:
        return self.flags.size

    @property
    def count(self) -> int:
        return int(self.flags.sum())

    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.flags)

    def complement(self) -> "VertexMask":
        return VertexMask(~self.flags)

    def coord_flags(self) -> np.ndarray:
        """Per-coordinate flags (3N,) matching Mesh.flat() layout."""
        return np.repeat(self.flags, 3)

    def save(self, path) -> None:
        """One line per vertex, `0` or `1`, LF endings."""
        with open(path, "w", newline="\n") as fh:
            for b in self.flags:
                fh.write("1\n" if b else "0\n")

    @classmethod
    def load(cls, path) -> "VertexMask":
        flags = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                tok = line.strip()
                if tok == "":
                    continue
                if tok not in ("0", "1"):
                    raise MeshFormatError(f"{path}:{lineno}: mask line must be 0 or 1, got {tok!r}")
                flags.append(tok == "1")
        return cls(np.array(flags, dtype=bool))


@dataclass(frozen=True)
class RegionAtlas:
    """A fixed set of 14 named vertex regions jointly covering the mesh."""

    names: tuple
    masks: tuple = field(repr=False)

    N_REGIONS = 14

    def __post_init__(self):
        names = tuple(self.names)
        masks = tuple(self.masks)
        if len(names) != self.N_REGIONS or len(masks) != self.N_REGIONS:
            raise ValueError(f"atlas needs exactly {self.N_REGIONS} regions, got {len(names)}")
        if len(set(names)) != len(names):
            raise ValueError("region names must be unique")
        n = len(masks[0])
        if any(len(m) != n for m in masks):
            raise ValueError("all region masks must match one vertex count")
        union = np.zeros(n, dtype=bool)
        for m in masks:
            union |= m.flags
        if not union.all():
            raise ValueError("region masks do not cover every vertex")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "masks", masks)

    def __iter__(self):
        return iter(zip(self.names, self.masks))

    def __getitem__(self, name: str) -> VertexMask:
        return self.masks[self.names.index(name)]


@dataclass(frozen=True)
class RigidTransform:
    """Similarity transform x -> scale * R x + t with proper orthonormal R."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        s = float(self.scale)
        if r.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if t.shape != (3,):
            raise ValueError("translation must be a 3-vector")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-10:
            raise ValueError("rotation is not orthonormal within 1e-10")
        if np.linalg.det(r) < 0:
            raise ValueError("rotation must have determinant +1")
        if not s > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "rotation", _frozen(r))
        object.__setattr__(self, "translation", _frozen(t))
        object.__setattr__(self, "scale", s)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3), 1.0)

    def apply(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return self.scale * (p @ self.rotation.T) + self.translation

    def apply_mesh(self, mesh: Mesh) -> Mesh:
        return mesh.with_vertices(self.apply(mesh.vertices))


def load_obj(path) -> Mesh:
    """Parse the ASCII OBJ v/f subset; 1-based indices become 0-based."""
    vertices = []
    faces = []
    pending_faces = []  # (lineno, raw indices) so range checks see the final vertex count
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens or tokens[0].startswith("#"):
                continue
            rec = tokens[0]
            if rec == "v":
                if len(tokens) != 4:
                    raise MeshFormatError(f"{path}:{lineno}: vertex record needs 3 coordinates")
                try:
                    vertices.append([float(t) for t in tokens[1:]])
                except ValueError:
                    raise MeshFormatError(f"{path}:{lineno}: non-numeric vertex coordinate") from None
            elif rec == "f":
                if len(tokens) != 4:
                    raise MeshFormatError(f"{path}:{lineno}: face record needs 3 vertices")
                idx = []
                for t in tokens[1:]:
                    head = t.split("/")[0]  # drop /vt/vn references
                    try:
                        i = int(head)
                    except ValueError:
                        raise MeshFormatError(f"{path}:{lineno}: non-integer face index {t!r}") from None
                    if i < 1:
                        raise MeshFormatError(f"{path}:{lineno}: face index must be positive (1-based)")
                    idx.append(i - 1)
                pending_faces.append((lineno, idx))
            elif rec in _IGNORED_OBJ_RECORDS:
                continue
            else:
                raise MeshFormatError(f"{path}:{lineno}: unsupported record type {rec!r}")
    if not vertices:
        raise MeshFormatError(f"{path}: no vertex records found")
    n = len(vertices)
    for lineno, idx in pending_faces:
        if max(idx) >= n:
            raise MeshFormatError(f"{path}:{lineno}: face index {max(idx) + 1} exceeds vertex count {n}")
        if len(set(idx)) != 3:
            raise MeshFormatError(f"{path}:{lineno}: degenerate face (repeated vertex)")
        faces.append(idx)
    return Mesh(np.array(vertices, dtype=np.float64), np.array(faces, dtype=np.int64).reshape(-1, 3))


def save_obj(mesh: Mesh, path) -> None:
    """Write `v %.6f %.6f %.6f` lines then 1-based `f` lines, LF endings."""
    with open(path, "w", newline="\n") as fh:
        for x, y, z in mesh.vertices:
            fh.write(f"v {x:.6f} {y:.6f} {z:.6f}\n")
        for a, b, c in mesh.faces:
            fh.write(f"f {a + 1} {b + 1} {c + 1}\n")


def mesh_edges(mesh: Mesh) -> np.ndarray:
    """Unique undirected edges as a sorted (E, 2) index array."""
    f = mesh.faces
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def vertex_adjacency(mesh: Mesh) -> list:
    """Neighbor index arrays per vertex, each sorted ascending (deterministic BFS order)."""
    neighbors = [[] for _ in range(mesh.n_vertices)]
    for a, b in mesh_edges(mesh):
        neighbors[a].append(b)
        neighbors[b].append(a)
    return [np.array(sorted(ns), dtype=np.int64) for ns in neighbors]


def graph_laplacian(mesh: Mesh) -> sp.csr_matrix:
    """Uniform combinatorial Laplacian: degree on the diagonal, -1 per edge."""
    n = mesh.n_vertices
    edges = mesh_edges(mesh)
    if len(edges) == 0:
        return sp.csr_matrix((n, n), dtype=np.float64)
    i = np.concatenate([edges[:, 0], edges[:, 1]])
    j = np.concatenate([edges[:, 1], edges[:, 0]])
    off = sp.coo_matrix((-np.ones(len(i)), (i, j)), shape=(n, n))
    deg = -np.asarray(off.sum(axis=1)).reshape(-1)
    return (sp.diags(deg) + off).tocsr()


def procrustes_align(source: Mesh, target: Mesh, weights: VertexMask) -> RigidTransform:
    """Closed-form similarity transform minimizing the weighted vertex SSD.

    Cross-covariance SVD with the usual reflection guard; raises
    DegenerateSelectionError when the selected source points are collinear
    or fewer than three.
    """
    if source.n_vertices != target.n_vertices:
        raise ValueError("source and target vertex counts differ")
    if len(weights) != source.n_vertices:
        raise ValueError("mask length does not match vertex count")
    idx = weights.indices()
    if idx.size < 3:
        raise DegenerateSelectionError(f"need at least 3 selected vertices, got {idx.size}")
    x = source.vertices[idx]
    y = target.vertices[idx]
    mu_x = x.mean(axis=0)
    mu_y = y.mean(axis=0)
    xc = x - mu_x
    yc = y - mu_y
    sv = np.linalg.svd(xc, compute_uv=False)
    if sv[1] <= 1e-12 * max(sv[0], 1.0):
        raise DegenerateSelectionError("selected vertices are rank-deficient (collinear)")
    cov = yc.T @ xc / idx.size
    u, s, vt = np.linalg.svd(cov)
    d = np.ones(3)
    if np.linalg.det(u @ vt) < 0:
        d[2] = -1.0
    rot = u @ np.diag(d) @ vt
    var_x = (xc**2).sum() / idx.size
    scale = float((s * d).sum() / var_x)
    trans = mu_y - scale * rot @ mu_x
    return RigidTransform(rot, trans, scale)


def masked_mean_l2(a: Mesh, b: Mesh, mask: VertexMask) -> float:
    """Mean Euclidean distance between corresponding vertices over the mask."""
    if a.n_vertices != b.n_vertices:
        raise ValueError("meshes have different vertex counts")
    if len(mask) != a.n_vertices:
        raise ValueError("mask length does not match vertex count")
    idx = mask.indices()
    if idx.size == 0:
        raise ValueError("mask selects no vertices")
    d = np.linalg.norm(a.vertices[idx] - b.vertices[idx], axis=1)
    return float(d.mean())
