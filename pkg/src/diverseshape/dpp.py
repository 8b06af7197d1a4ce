"""Quality-diversity DPP kernel and the expected-cardinality diversity loss.

The kernel over M candidate completions is L[i, j] = q_i * S[i, j] * q_j with
S[i, j] = exp(-k * ||masked difference||_2) and q_i = exp(-max(0, z.z - 3 sqrt(d))).
The non-squared L2 distance makes S a Laplacian-type kernel, hence positive
semidefinite; the rank-1 Hadamard scaling by q preserves that.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .mesh import Mesh, VertexMask, _frozen

_SYM_TOL = 1e-10
_PSD_TOL = -1e-9
BRUTE_FORCE_LIMIT = 10


@dataclass(frozen=True)
class DppKernel:
    """M x M kernel L = diag(q) S diag(q) with its factors."""

    L: np.ndarray
    q: np.ndarray
    S: np.ndarray
    k: float

    def __post_init__(self):
        L = np.asarray(self.L, dtype=np.float64)
        q = np.asarray(self.q, dtype=np.float64)
        S = np.asarray(self.S, dtype=np.float64)
        m = L.shape[0]
        if L.shape != (m, m) or S.shape != (m, m) or q.shape != (m,):
            raise ValueError("inconsistent kernel factor shapes")
        if np.abs(L - L.T).max() > 1e-12:
            raise ValueError("kernel must be symmetric within 1e-12")
        if np.any(np.abs(np.diag(S) - 1.0) > 1e-12):
            raise ValueError("similarity diagonal must be 1")
        if np.any(q <= 0.0) or np.any(q > 1.0):
            raise ValueError("quality values must lie in (0, 1]")
        if np.linalg.eigvalsh(L).min() < _PSD_TOL:
            raise ValueError("kernel is not positive semidefinite")
        object.__setattr__(self, "L", _frozen(L))
        object.__setattr__(self, "q", _frozen(q))
        object.__setattr__(self, "S", _frozen(S))
        object.__setattr__(self, "k", float(self.k))

    @property
    def size(self) -> int:
        return self.L.shape[0]


def similarity(a: Mesh, b: Mesh, mask: VertexMask, k: float) -> float:
    """exp(-k * L2 distance) over the masked coordinate differences."""
    if k <= 0:
        raise ValueError("similarity scale k must be positive")
    if mask.count == 0:
        raise ValueError("mask selects no vertices")
    idx = mask.indices()
    dist = np.linalg.norm((a.vertices[idx] - b.vertices[idx]).reshape(-1))
    return float(np.exp(-k * dist))


def quality(z: np.ndarray) -> float:
    """Hinged realism score: 1 inside the z.z <= 3 sqrt(d) ball, decaying outside."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.size < 1:
        raise ValueError("latent must be a non-empty vector")
    excess = z @ z - 3.0 * np.sqrt(z.size)
    return float(np.exp(-max(0.0, excess)))


def masked_pairwise_distances(flats: np.ndarray, coord_flags: np.ndarray) -> np.ndarray:
    """Pairwise L2 distances between rows restricted to the flagged coordinates."""
    sub = flats[:, coord_flags]
    diff = sub[:, None, :] - sub[None, :, :]
    return np.sqrt(np.maximum((diff**2).sum(axis=2), 0.0))


def build_kernel(completions, latents, mask: VertexMask, k: float) -> DppKernel:
    """Assemble the quality-diversity kernel for M completions on the occluded mask."""
    m = len(completions)
    if m < 2:
        raise ValueError(f"need at least 2 completions, got {m}")
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 2 or latents.shape[0] != m:
        raise ValueError("latents must be an (M, d) array matching the completions")
    if k <= 0:
        raise ValueError("similarity scale k must be positive")
    if mask.count == 0:
        raise ValueError("mask selects no vertices")
    flats = np.stack([c.flat() for c in completions])
    dist = masked_pairwise_distances(flats, mask.coord_flags())
    s = np.exp(-k * dist)
    np.fill_diagonal(s, 1.0)
    q = np.array([quality(z) for z in latents])
    L = (q[:, None] * s) * q[None, :]
    return DppKernel(0.5 * (L + L.T), q, s, k)


def expected_cardinality_loss(L: np.ndarray) -> float:
    """-tr(I - (L + I)^-1) = -sum(lambda / (1 + lambda)); always <= 0."""
    L = np.asarray(L, dtype=np.float64)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ValueError("kernel must be square")
    if np.abs(L - L.T).max() > _SYM_TOL:
        raise ValueError("kernel must be symmetric")
    eig = np.clip(np.linalg.eigvalsh(L), 0.0, None)
    return float(-(eig / (1.0 + eig)).sum())


def loss_gradient_wrt_kernel(L: np.ndarray) -> np.ndarray:
    """Gradient of the expected-cardinality loss: -(L + I)^-2."""
    L = np.asarray(L, dtype=np.float64)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ValueError("kernel must be square")
    if np.abs(L - L.T).max() > _SYM_TOL:
        raise ValueError("kernel must be symmetric")
    inv = np.linalg.inv(L + np.eye(L.shape[0]))
    g = -(inv @ inv)
    return 0.5 * (g + g.T)


def brute_force_expected_cardinality(L: np.ndarray) -> float:
    """Oracle by subset enumeration: sum over Y of |Y| det(L_Y) / det(L + I)."""
    L = np.asarray(L, dtype=np.float64)
    m = L.shape[0]
    if L.shape != (m, m):
        raise ValueError("kernel must be square")
    if m > BRUTE_FORCE_LIMIT:
        raise ValueError(f"brute force limited to M <= {BRUTE_FORCE_LIMIT}, got {m}")
    total = 0.0
    for size in range(1, m + 1):
        for subset in itertools.combinations(range(m), size):
            sub = L[np.ix_(subset, subset)]
            total += size * np.linalg.det(sub)
    return float(total / np.linalg.det(L + np.eye(m)))


def median_masked_distance(completions, mask: VertexMask) -> float:
    """Median pairwise masked distance; the default 1/k similarity scale."""
    flats = np.stack([c.flat() for c in completions])
    dist = masked_pairwise_distances(flats, mask.coord_flags())
    iu = np.triu_indices(len(completions), k=1)
    return float(np.median(dist[iu]))
