"""Iterative latent optimization of M completions: visible-region fidelity to
the partial fit plus the expected-cardinality DPP loss on the occluded region.

Latents start from posterior samples around the encoded partial fit and are
updated by plain gradient descent. The DPP gradient reaches each latent along
two routes: through the decoded completion (similarity term, via the decoder
pullback) and directly through the quality hinge.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dpp import (build_kernel, expected_cardinality_loss, loss_gradient_wrt_kernel,
                  masked_pairwise_distances, median_masked_distance)
from .errors import DivergenceError
from .fitter import FitResult
from .latent import LatentModel, decode, decode_flat, decoder_pullback, encode, sample_latents
from .mesh import Mesh, VertexMask


@dataclass(frozen=True)
class DiversifyHyper:
    num_samples: int = 8
    n_iter: int = 200
    lambda_s: float = 10.0
    lambda_dpp: float = 1.0
    eta: float = 5e-2
    k: float | None = None  # None: 1 / median pairwise masked distance at init
    seed: int = 0

    def __post_init__(self):
        if self.num_samples < 2:
            raise ValueError("need at least 2 samples for a DPP")
        if self.n_iter < 0:
            raise ValueError("n_iter must be >= 0")
        if self.lambda_s < 0 or self.lambda_dpp < 0:
            raise ValueError("loss weights must be >= 0")
        if self.eta <= 0:
            raise ValueError("step size must be positive")
        if self.k is not None and self.k <= 0:
            raise ValueError("similarity scale must be positive")


@dataclass(frozen=True)
class CompletionSet:
    """M completions, their latents, the occlusion mask they diversify over,
    and the per-iteration (total, fidelity, dpp) loss trace."""

    completions: tuple
    latents: np.ndarray
    occlusion: VertexMask
    trace: np.ndarray = field(repr=False)

    def __post_init__(self):
        completions = tuple(self.completions)
        latents = np.asarray(self.latents, dtype=np.float64)
        if latents.ndim != 2 or latents.shape[0] != len(completions):
            raise ValueError("need one latent vector per completion")
        n = completions[0].n_vertices
        if any(c.n_vertices != n for c in completions):
            raise ValueError("completions must share one topology")
        object.__setattr__(self, "completions", completions)
        object.__setattr__(self, "latents", latents)

    def __len__(self) -> int:
        return len(self.completions)


def _fidelity_and_dpp(model: LatentModel, latents: np.ndarray, target_flat: np.ndarray,
                      occlusion: VertexMask, k: float, lambda_s: float,
                      lambda_dpp: float):
    """Loss components and per-latent gradients for one iterate."""
    m, d = latents.shape
    flats = np.stack([decode_flat(model, z) for z in latents])
    occ_coords = occlusion.coord_flags()
    vis_coords = ~occ_coords
    n_vis = int(np.count_nonzero(~occlusion.flags))

    # visible fidelity: per-vertex L1 against the partial fit, averaged over
    # visible vertices, summed over completions
    cots = np.zeros_like(flats)
    l_fid = 0.0
    if n_vis:
        diff = (flats - target_flat[None, :])[:, vis_coords]
        l_fid = float(np.abs(diff).sum() / n_vis)
        cots[:, vis_coords] = lambda_s * np.sign(diff) / n_vis

    # expected-cardinality DPP on the occluded region
    l_dpp = 0.0
    grads_direct = np.zeros_like(latents)
    if lambda_dpp > 0.0:
        meshes = [model.template.with_vertices(f) for f in flats]
        kernel = build_kernel(meshes, latents, occlusion, k)
        l_dpp = expected_cardinality_loss(kernel.L)
        g_l = loss_gradient_wrt_kernel(kernel.L)
        q, s = kernel.q, kernel.S
        dist = masked_pairwise_distances(flats, occ_coords)

        # quality route: dL/dq_i = 2 sum_j G_ij S_ij q_j, hinge active outside
        # (or exactly on) the z.z = 3 sqrt(d) sphere
        dq = 2.0 * (g_l * s) @ q
        zz = np.einsum("md,md->m", latents, latents)
        active = zz >= 3.0 * np.sqrt(d)
        grads_direct[active] += lambda_dpp * (dq * q * -2.0)[active, None] * latents[active]

        # similarity route: cotangent on each completion's occluded coordinates
        w = 2.0 * g_l * (q[:, None] * q[None, :]) * (-k) * s
        occ_vals = flats[:, occ_coords]
        for i in range(m):
            cot_occ = np.zeros(occ_vals.shape[1])
            for j in range(m):
                if j == i or dist[i, j] <= 0.0:
                    continue  # coincident completions: symmetric subgradient 0
                cot_occ += w[i, j] * (occ_vals[i] - occ_vals[j]) / dist[i, j]
            cots[i, occ_coords] += lambda_dpp * cot_occ

    grads = np.stack([decoder_pullback(model, latents[i], cots[i]) for i in range(m)])
    grads += grads_direct
    total = lambda_s * l_fid + lambda_dpp * l_dpp
    return total, l_fid, l_dpp, grads


def resolve_similarity_scale(model: LatentModel, latents: np.ndarray,
                             occlusion: VertexMask) -> float:
    """Default k: reciprocal median pairwise masked distance of the decoded set."""
    meshes = [decode(model, z) for z in latents]
    med = median_masked_distance(meshes, occlusion)
    return 1.0 / med if med > 0 else 1.0


def _partial_target(partial: FitResult):
    """Completions live in model frame, so fidelity targets the unposed fit."""
    return partial.model_mesh if partial.model_mesh is not None else partial.mesh


def diversity_loss(model: LatentModel, latents: np.ndarray, partial: FitResult,
                   mask: VertexMask, hyper: DiversifyHyper):
    """Total diversity objective and its gradient for each latent vector."""
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 2:
        raise ValueError("latents must be an (M, d) array")
    if latents.shape[1] != model.latent_dim:
        raise ValueError("latent dimension does not match the model")
    target = _partial_target(partial)
    if target.n_vertices != model.template.n_vertices:
        raise ValueError("partial fit does not match the model topology")
    k = hyper.k if hyper.k is not None else resolve_similarity_scale(model, latents, mask)
    total, _, _, grads = _fidelity_and_dpp(model, latents, target.flat(), mask,
                                           k, hyper.lambda_s, hyper.lambda_dpp)
    return total, grads


def optimize_completions(model: LatentModel, fit: FitResult, mask: VertexMask,
                         hyper: DiversifyHyper) -> CompletionSet:
    """Posterior-initialized latent descent; decodes the final completions."""
    target = _partial_target(fit)
    if target.n_vertices != model.template.n_vertices:
        raise ValueError("partial fit does not match the model topology")
    if len(mask) != model.template.n_vertices:
        raise ValueError("occlusion mask does not match the model topology")
    mu, sigma = encode(model, target, mask)
    latents = sample_latents(mu, sigma, hyper.num_samples, hyper.seed)
    k = hyper.k if hyper.k is not None else resolve_similarity_scale(model, latents, mask)
    target_flat = target.flat()
    trace = np.empty((hyper.n_iter + 1, 3))
    for it in range(hyper.n_iter):
        total, l_fid, l_dpp, grads = _fidelity_and_dpp(
            model, latents, target_flat, mask, k, hyper.lambda_s, hyper.lambda_dpp)
        if not np.isfinite(total):
            raise DivergenceError(f"diversity loss non-finite at iteration {it}")
        trace[it] = (total, l_fid, l_dpp)
        latents = latents - hyper.eta * grads
    total, l_fid, l_dpp, _ = _fidelity_and_dpp(
        model, latents, target_flat, mask, k, hyper.lambda_s, hyper.lambda_dpp)
    if not np.isfinite(total):
        raise DivergenceError("diversity loss non-finite after final update")
    trace[-1] = (total, l_fid, l_dpp)
    completions = tuple(decode(model, z) for z in latents)
    return CompletionSet(completions, latents, mask, trace)


def interpolate(model: LatentModel, z1: np.ndarray, z2: np.ndarray, steps: int) -> list:
    """Decode along alpha * z1 + (1 - alpha) * z2 from alpha = 1 down to 0."""
    if steps < 2:
        raise ValueError("need at least 2 interpolation steps")
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    if z1.shape != (model.latent_dim,) or z2.shape != (model.latent_dim,):
        raise ValueError("latent dimension does not match the model")
    return [decode(model, a * z1 + (1.0 - a) * z2) for a in np.linspace(1.0, 0.0, steps)]
