"""Global + local PCA shape model.

A coarse global model (orthonormal shape and expression bases over the whole
mesh) is paired with 14 region-restricted residual PCA models. The combined
shape is the coarse reconstruction plus the sum of the region contributions,
optionally pushed through a rigid transform.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientDataError
from .mesh import Mesh, RegionAtlas, RigidTransform, VertexMask, _frozen
from . import modelio

_ORTHO_TOL = 1e-10


def _check_orthonormal(basis: np.ndarray, what: str) -> None:
    if basis.shape[1] == 0:
        return
    gram = basis.T @ basis
    if np.abs(gram - np.eye(basis.shape[1])).max() > _ORTHO_TOL:
        raise ValueError(f"{what} columns are not orthonormal within {_ORTHO_TOL}")


def _check_eigs(eigs: np.ndarray, what: str) -> None:
    if np.any(eigs < 0):
        raise ValueError(f"{what} eigenvalues must be non-negative")
    if np.any(np.diff(eigs) > 0):
        raise ValueError(f"{what} eigenvalues must be sorted descending")


@dataclass(frozen=True)
class GlobalModel:
    """Template mesh with full-rank orthonormal shape/expression bases (3N x k)."""

    template: Mesh
    shape_basis: np.ndarray
    expr_basis: np.ndarray
    shape_eig: np.ndarray
    expr_eig: np.ndarray

    def __post_init__(self):
        n3 = 3 * self.template.n_vertices
        for name in ("shape_basis", "expr_basis", "shape_eig", "expr_eig"):
            object.__setattr__(self, name, _frozen(np.asarray(getattr(self, name), dtype=np.float64)))
        if self.shape_basis.shape[0] != n3 or self.expr_basis.shape[0] != n3:
            raise ValueError("basis row count must equal 3 * vertex count")
        if self.shape_basis.shape[1] != self.shape_eig.size:
            raise ValueError("shape basis/eigenvalue counts differ")
        if self.expr_basis.shape[1] != self.expr_eig.size:
            raise ValueError("expression basis/eigenvalue counts differ")
        _check_orthonormal(self.shape_basis, "shape basis")
        _check_orthonormal(self.expr_basis, "expression basis")
        _check_eigs(self.shape_eig, "shape")
        _check_eigs(self.expr_eig, "expression")

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[1]

    @property
    def n_expr(self) -> int:
        return self.expr_basis.shape[1]


@dataclass(frozen=True)
class LocalModels:
    """Per-region residual bases, stored full-length (3N rows, zero off-region)."""

    atlas: RegionAtlas
    shape_bases: tuple
    expr_bases: tuple
    shape_eigs: tuple = field(repr=False)
    expr_eigs: tuple = field(repr=False)

    def __post_init__(self):
        k = RegionAtlas.N_REGIONS
        for name in ("shape_bases", "expr_bases", "shape_eigs", "expr_eigs"):
            vals = tuple(np.asarray(v, dtype=np.float64) for v in getattr(self, name))
            if len(vals) != k:
                raise ValueError(f"{name} must have {k} entries")
            object.__setattr__(self, name, tuple(_frozen(v) for v in vals))
        for i, mask in enumerate(self.atlas.masks):
            off = ~mask.coord_flags()
            for basis, what in ((self.shape_bases[i], "shape"), (self.expr_bases[i], "expression")):
                if basis.shape[0] != 3 * len(mask):
                    raise ValueError(f"region {i} {what} basis has wrong row count")
                if basis.shape[1] and np.any(basis[off] != 0.0):
                    raise ValueError(f"region {i} {what} basis has support outside its mask")
                _check_orthonormal(basis, f"region {i} {what} basis")

    @property
    def shape_ranks(self) -> tuple:
        return tuple(b.shape[1] for b in self.shape_bases)

    @property
    def expr_ranks(self) -> tuple:
        return tuple(b.shape[1] for b in self.expr_bases)


@dataclass(frozen=True)
class BlendshapeModel:
    """Global model + local residual models + the coarse truncation ranks."""

    global_model: GlobalModel
    local_models: LocalModels
    coarse_ranks: tuple

    def __post_init__(self):
        n_s, n_e = self.coarse_ranks
        if not (0 <= n_s <= self.global_model.n_shape and 0 <= n_e <= self.global_model.n_expr):
            raise ValueError("coarse ranks exceed global basis ranks")
        object.__setattr__(self, "coarse_ranks", (int(n_s), int(n_e)))

    @property
    def template(self) -> Mesh:
        return self.global_model.template


def _pca(data: np.ndarray, rank: int, what: str, center: bool):
    """PCA by SVD; returns (mean, basis columns, eigenvalues) for the top `rank`."""
    n = data.shape[0]
    if center:
        mean = data.mean(axis=0)
        centered = data - mean
        denom = max(n - 1, 1)
    else:
        mean = np.zeros(data.shape[1])
        centered = data
        denom = max(n - 1, 1)
    if rank == 0:
        return mean, np.zeros((data.shape[1], 0)), np.zeros(0)
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    tol = max(s[0] if s.size else 0.0, 1.0) * 1e-12
    effective = int((s > tol).sum())
    if rank > effective:
        raise InsufficientDataError(
            f"{what}: requested {rank} components but data rank is {effective}")
    return mean, vt[:rank].T.copy(), (s[:rank] ** 2) / denom


def train_global(dataset, subject_ids, neutrals, n_shape: int, n_expr: int) -> GlobalModel:
    """Shape basis from per-subject neutrals, expression basis from residuals.

    dataset: expression samples (Mesh); subject_ids: per-sample index into
    neutrals; neutrals: one neutral Mesh per subject. The template is the mean
    neutral, shape PCA is centered there, and expression PCA runs about the
    origin on (sample - its subject's neutral) displacements.
    """
    if len(dataset) == 0 or len(neutrals) == 0:
        raise InsufficientDataError("empty dataset")
    if len(subject_ids) != len(dataset):
        raise ValueError("subject_ids length must match dataset length")
    if len(neutrals) <= n_shape:
        raise InsufficientDataError(
            f"need more than {n_shape} subjects to train {n_shape} shape components")
    if len(dataset) <= n_expr:
        raise InsufficientDataError(
            f"need more than {n_expr} samples to train {n_expr} expression components")
    neutral_mat = np.stack([m.flat() for m in neutrals])
    mean, shape_basis, shape_eig = _pca(neutral_mat, n_shape, "shape PCA", center=True)
    template = neutrals[0].with_vertices(mean)
    resid = np.stack([m.flat() - neutrals[sid].flat() for m, sid in zip(dataset, subject_ids)])
    _, expr_basis, expr_eig = _pca(resid, n_expr, "expression PCA", center=False)
    return GlobalModel(template, shape_basis, expr_basis, shape_eig, expr_eig)


def fit_global_params(model: GlobalModel, target: Mesh):
    """Least-squares coefficients of the full global model for a target mesh.

    With orthonormal (and mutually orthogonal) bases this is plain projection;
    solving the joint system also handles bases that are only approximately
    orthogonal across the two groups.
    """
    if target.n_vertices != model.template.n_vertices:
        raise ValueError("target vertex count does not match template")
    basis = np.concatenate([model.shape_basis, model.expr_basis], axis=1)
    delta = target.flat() - model.template.flat()
    if basis.shape[1] == 0:
        return np.zeros(0), np.zeros(0)
    coeffs, *_ = np.linalg.lstsq(basis, delta, rcond=None)
    return coeffs[: model.n_shape].copy(), coeffs[model.n_shape:].copy()


def _global_displacement(model: GlobalModel, beta, psi) -> np.ndarray:
    beta = np.asarray(beta, dtype=np.float64)
    psi = np.asarray(psi, dtype=np.float64)
    disp = np.zeros(3 * model.template.n_vertices)
    if beta.size:
        disp += model.shape_basis[:, : beta.size] @ beta
    if psi.size:
        disp += model.expr_basis[:, : psi.size] @ psi
    return disp


def coarse_reconstruct(model: BlendshapeModel, beta, psi) -> Mesh:
    """Template plus the top-(N_S, N_E) basis contributions; extra coefficients ignored."""
    n_s, n_e = model.coarse_ranks
    beta = np.asarray(beta, dtype=np.float64)
    psi = np.asarray(psi, dtype=np.float64)
    if beta.size < n_s or psi.size < n_e:
        raise ValueError("coefficient vectors shorter than the coarse ranks")
    disp = _global_displacement(model.global_model, beta[:n_s], psi[:n_e])
    return model.template.with_vertices(model.template.flat() + disp)


def train_local(global_model: GlobalModel, dataset, atlas: RegionAtlas,
                coarse_ranks, local_ranks) -> LocalModels:
    """Region-wise PCA of the residuals left after the coarse global model.

    Shape residuals remove the full expression fit plus the top-N_S shape
    components; expression residuals remove the full shape fit plus the
    top-N_E expression components.
    """
    n_s, n_e = coarse_ranks
    r_s, r_e = local_ranks
    if not (0 <= n_s <= global_model.n_shape and 0 <= n_e <= global_model.n_expr):
        raise ValueError("coarse ranks exceed global basis ranks")
    template_flat = global_model.template.flat()
    shape_resid = []
    expr_resid = []
    for mesh in dataset:
        beta, psi = fit_global_params(global_model, mesh)
        x = mesh.flat()
        shape_resid.append(x - template_flat - _global_displacement(global_model, beta[:n_s], psi))
        expr_resid.append(x - template_flat - _global_displacement(global_model, beta, psi[:n_e]))
    shape_resid = np.stack(shape_resid)
    expr_resid = np.stack(expr_resid)

    shape_bases, expr_bases, shape_eigs, expr_eigs = [], [], [], []
    n3 = shape_resid.shape[1]
    for i, mask in enumerate(atlas.masks):
        coords = np.flatnonzero(mask.coord_flags())
        for resid, rank, out_b, out_e, what in (
            (shape_resid, r_s, shape_bases, shape_eigs, "shape"),
            (expr_resid, r_e, expr_bases, expr_eigs, "expression"),
        ):
            # PCA on the restricted coordinates, scattered back so off-region
            # rows are exactly zero.
            _, sub_basis, eig = _pca(resid[:, coords], rank,
                                     f"region {i} {what} PCA", center=False)
            basis = np.zeros((n3, rank))
            basis[coords] = sub_basis
            out_b.append(basis)
            out_e.append(eig)
    return LocalModels(atlas, tuple(shape_bases), tuple(expr_bases),
                       tuple(shape_eigs), tuple(expr_eigs))


def evaluate(model: BlendshapeModel, beta, psi, local_betas, local_psis,
             rigid: RigidTransform) -> Mesh:
    """Rigid-transformed coarse reconstruction plus all region contributions."""
    local = model.local_models
    if len(local_betas) != RegionAtlas.N_REGIONS or len(local_psis) != RegionAtlas.N_REGIONS:
        raise ValueError("need one coefficient vector per region")
    base = coarse_reconstruct(model, beta, psi)
    disp = base.flat().copy()
    for i in range(RegionAtlas.N_REGIONS):
        lb = np.asarray(local_betas[i], dtype=np.float64)
        lp = np.asarray(local_psis[i], dtype=np.float64)
        if lb.size != local.shape_ranks[i] or lp.size != local.expr_ranks[i]:
            raise ValueError(f"region {i}: coefficient sizes {lb.size}/{lp.size} do not match "
                             f"ranks {local.shape_ranks[i]}/{local.expr_ranks[i]}")
        if lb.size:
            disp += local.shape_bases[i] @ lb
        if lp.size:
            disp += local.expr_bases[i] @ lp
    return rigid.apply_mesh(model.template.with_vertices(disp))


def strip_locals(model: BlendshapeModel, coarse_ranks=None) -> BlendshapeModel:
    """Variant with empty local bases (a purely global model), for baselines."""
    g = model.global_model
    if coarse_ranks is None:
        coarse_ranks = (g.n_shape, g.n_expr)
    n3 = 3 * g.template.n_vertices
    empty = tuple(np.zeros((n3, 0)) for _ in range(RegionAtlas.N_REGIONS))
    zeros = tuple(np.zeros(0) for _ in range(RegionAtlas.N_REGIONS))
    locals_ = LocalModels(model.local_models.atlas, empty, empty, zeros, zeros)
    return BlendshapeModel(g, locals_, coarse_ranks)


def save_model(model: BlendshapeModel, path) -> None:
    g = model.global_model
    tensors = {
        "template": g.template.vertices,
        "faces": g.template.faces.astype(np.float64),
        "shape_basis": g.shape_basis,
        "expr_basis": g.expr_basis,
        "shape_eig": g.shape_eig,
        "expr_eig": g.expr_eig,
        "coarse_ranks": np.array(model.coarse_ranks, dtype=np.float64),
    }
    local = model.local_models
    for i, mask in enumerate(local.atlas.masks):
        tensors[f"region_{i:02d}_mask"] = mask.flags.astype(np.float64)
        tensors[f"region_{i:02d}_shape"] = local.shape_bases[i]
        tensors[f"region_{i:02d}_expr"] = local.expr_bases[i]
        tensors[f"region_{i:02d}_shape_eig"] = local.shape_eigs[i]
        tensors[f"region_{i:02d}_expr_eig"] = local.expr_eigs[i]
    modelio.write_tensors(path, tensors)


def load_model(path) -> BlendshapeModel:
    t = modelio.read_tensors(path)
    template = Mesh(t["template"], t["faces"].astype(np.int64))
    g = GlobalModel(template, t["shape_basis"], t["expr_basis"], t["shape_eig"], t["expr_eig"])
    names, masks, sb, eb, se, ee = [], [], [], [], [], []
    for i in range(RegionAtlas.N_REGIONS):
        names.append(f"region_{i:02d}")
        masks.append(VertexMask(t[f"region_{i:02d}_mask"] != 0.0))
        sb.append(t[f"region_{i:02d}_shape"])
        eb.append(t[f"region_{i:02d}_expr"])
        se.append(t[f"region_{i:02d}_shape_eig"])
        ee.append(t[f"region_{i:02d}_expr_eig"])
    atlas = RegionAtlas(tuple(names), tuple(masks))
    local = LocalModels(atlas, tuple(sb), tuple(eb), tuple(se), tuple(ee))
    n_s, n_e = t["coarse_ranks"].astype(np.int64)
    return BlendshapeModel(g, local, (int(n_s), int(n_e)))
