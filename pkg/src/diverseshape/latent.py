"""Latent completion models: map a partial mesh to a Gaussian latent posterior,
decode latents back to full meshes, and expose decoder pullbacks for latent
optimization.

Two interchangeable variants behind one contract:
  linear -- probabilistic PCA with a closed-form masked encoder (pseudo-inverse
            restricted to visible rows, so hidden vertex values cannot leak);
  mlp    -- a small dense VAE (3N -> 256 -> 64 -> d, mirrored decoder, ELU)
            trained with L1 reconstruction, L1 Laplacian, and KL losses under
            an occlusion curriculum. Gradients are reverse accumulation by
            hand and are finite-difference checked in the tests.

Throughout, `mask` marks the OCCLUDED (hidden) vertices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, InsufficientDataError
from .mesh import Mesh, VertexMask, graph_laplacian
from .synth import CurriculumSchedule, curriculum_fraction, grow_occlusion
from . import modelio

HIDDEN_WIDTHS = (256, 64)
_SIGMA_FLOOR = 1e-12

_MLP_KEYS = (
    "enc_0_w", "enc_0_b", "enc_1_w", "enc_1_b",
    "enc_2_w", "enc_2_b",  # posterior mean head
    "enc_3_w", "enc_3_b",  # posterior log-variance head
    "dec_0_w", "dec_0_b", "dec_1_w", "dec_1_b", "dec_2_w", "dec_2_b",
)


@dataclass(frozen=True)
class LatentModel:
    variant: str
    latent_dim: int
    template: Mesh
    mean: np.ndarray
    decoder: np.ndarray | None = None  # linear: (3N, d)
    sigma: np.ndarray | None = None  # linear: unmasked posterior scale (d,)
    noise_var: float | None = None  # linear: residual variance behind sigma
    mlp: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.variant not in ("linear", "mlp"):
            raise ValueError(f"unknown variant {self.variant!r}")
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        if self.mean.shape != (3 * self.template.n_vertices,):
            raise ValueError("mean must be a 3N vector")
        if self.variant == "linear":
            if self.decoder is None or self.sigma is None or self.noise_var is None:
                raise ValueError("linear variant needs decoder, sigma, and noise_var")
            if not self.noise_var > 0:
                raise ValueError("noise_var must be positive")
            if self.decoder.shape != (self.mean.size, self.latent_dim):
                raise ValueError("decoder must be (3N, d)")
            if np.linalg.matrix_rank(self.decoder) < self.latent_dim:
                raise ValueError("decoder columns must be linearly independent")
            if np.any(self.sigma <= 0):
                raise ValueError("sigma entries must be strictly positive")
        else:
            if self.mlp is None:
                raise ValueError("mlp variant needs its weight dict")
            missing = [k for k in _MLP_KEYS if k not in self.mlp]
            if missing:
                raise ValueError(f"mlp weights missing {missing}")


@dataclass(frozen=True)
class VaeTrainConfig:
    epochs: int = 40
    batch_size: int = 8
    step_size: float = 1e-3
    kl_weight: float = 1e-3
    lap_weight: float = 1e-1
    curriculum: CurriculumSchedule = field(default_factory=CurriculumSchedule)
    seed: int = 0
    latent_dim: int = 8

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.latent_dim < 1:
            raise ValueError("epochs, batch_size and latent_dim must be positive")
        if self.step_size <= 0 or self.kl_weight <= 0 or self.lap_weight <= 0:
            raise ValueError("step_size and loss weights must be positive")


def train_linear(dataset, d: int) -> LatentModel:
    """Probabilistic PCA: top-d principal directions scaled by singular values."""
    n = len(dataset)
    if n <= d:
        raise InsufficientDataError(f"need more than {d} samples, got {n}")
    x = np.stack([m.flat() for m in dataset])
    mean = x.mean(axis=0)
    u, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    tol = max(s[0] if s.size else 0.0, 1.0) * 1e-12
    rank = int((s > tol).sum())
    if d > rank:
        raise InsufficientDataError(f"latent dim {d} exceeds data rank {rank}")
    lam = s**2 / (n - 1)
    decoder = vt[:d].T * np.sqrt(lam[:d])  # unit-variance training latents
    resid = float(lam[d:].mean()) if lam.size > d else 0.0
    resid = max(resid, _SIGMA_FLOOR)
    sigma = np.sqrt(resid / (lam[:d] + resid))
    return LatentModel("linear", d, dataset[0], mean, decoder=decoder, sigma=sigma,
                       noise_var=resid)


def _elu(a: np.ndarray) -> np.ndarray:
    return np.where(a > 0, a, np.expm1(np.minimum(a, 0.0)))


def _elu_grad(a: np.ndarray) -> np.ndarray:
    return np.where(a > 0, 1.0, np.exp(np.minimum(a, 0.0)))


def _encoder_forward(p: dict, x: np.ndarray):
    a1 = x @ p["enc_0_w"] + p["enc_0_b"]
    h1 = _elu(a1)
    a2 = h1 @ p["enc_1_w"] + p["enc_1_b"]
    h2 = _elu(a2)
    mu = h2 @ p["enc_2_w"] + p["enc_2_b"]
    logvar = h2 @ p["enc_3_w"] + p["enc_3_b"]
    return a1, h1, a2, h2, mu, logvar


def _decoder_forward(p: dict, z: np.ndarray):
    c1 = z @ p["dec_0_w"] + p["dec_0_b"]
    g1 = _elu(c1)
    c2 = g1 @ p["dec_1_w"] + p["dec_1_b"]
    g2 = _elu(c2)
    y = g2 @ p["dec_2_w"] + p["dec_2_b"]
    return c1, g1, c2, g2, y


def vae_training_loss(params: dict, x_in: np.ndarray, x_target: np.ndarray,
                      eps: np.ndarray, laplacian, kl_weight: float,
                      lap_weight: float):
    """Loss and hand-derived gradients for one batch (pure in all arguments).

    x_in / x_target are centered (B, 3N) rows; eps is the frozen (B, d)
    reparameterization draw. Returns (total, components, grads).
    """
    b = x_in.shape[0]
    n3 = x_in.shape[1]
    a1, h1, a2, h2, mu, logvar = _encoder_forward(params, x_in)
    sigma = np.exp(0.5 * logvar)
    z = mu + sigma * eps
    c1, g1, c2, g2, y = _decoder_forward(params, z)

    resid = y - x_target
    l_rec = float(np.abs(resid).mean())
    lap_resid = np.stack([(laplacian @ r.reshape(-1, 3)).reshape(-1) for r in resid])
    l_lap = float(np.abs(lap_resid).mean())
    l_kl = float(0.5 * (mu**2 + sigma**2 - logvar - 1.0).sum(axis=1).mean())
    total = l_rec + lap_weight * l_lap + kl_weight * l_kl

    denom = b * n3
    dy = np.sign(resid) / denom
    lap_sign = np.sign(lap_resid)
    # uniform Laplacian is symmetric, so the adjoint is the Laplacian itself
    dy = dy + lap_weight * np.stack(
        [(laplacian @ s.reshape(-1, 3)).reshape(-1) for s in lap_sign]) / denom

    grads = {}
    grads["dec_2_w"] = g2.T @ dy
    grads["dec_2_b"] = dy.sum(axis=0)
    dg2 = dy @ params["dec_2_w"].T
    dc2 = dg2 * _elu_grad(c2)
    grads["dec_1_w"] = g1.T @ dc2
    grads["dec_1_b"] = dc2.sum(axis=0)
    dg1 = dc2 @ params["dec_1_w"].T
    dc1 = dg1 * _elu_grad(c1)
    grads["dec_0_w"] = z.T @ dc1
    grads["dec_0_b"] = dc1.sum(axis=0)
    dz = dc1 @ params["dec_0_w"].T

    dmu = dz + kl_weight * mu / b
    dlogvar = dz * (0.5 * sigma * eps) + kl_weight * 0.5 * (sigma**2 - 1.0) / b
    grads["enc_2_w"] = h2.T @ dmu
    grads["enc_2_b"] = dmu.sum(axis=0)
    grads["enc_3_w"] = h2.T @ dlogvar
    grads["enc_3_b"] = dlogvar.sum(axis=0)
    dh2 = dmu @ params["enc_2_w"].T + dlogvar @ params["enc_3_w"].T
    da2 = dh2 * _elu_grad(a2)
    grads["enc_1_w"] = h1.T @ da2
    grads["enc_1_b"] = da2.sum(axis=0)
    dh1 = da2 @ params["enc_1_w"].T
    da1 = dh1 * _elu_grad(a1)
    grads["enc_0_w"] = x_in.T @ da1
    grads["enc_0_b"] = da1.sum(axis=0)

    components = {"recon": l_rec, "laplacian": l_lap, "kl": l_kl}
    return total, components, grads


def init_mlp_params(n3: int, d: int, seed: int) -> dict:
    """Glorot-uniform layer initialization, deterministic in the seed."""
    rng = np.random.default_rng(seed)
    widths_enc = [(n3, HIDDEN_WIDTHS[0]), (HIDDEN_WIDTHS[0], HIDDEN_WIDTHS[1]),
                  (HIDDEN_WIDTHS[1], d), (HIDDEN_WIDTHS[1], d)]
    widths_dec = [(d, HIDDEN_WIDTHS[1]), (HIDDEN_WIDTHS[1], HIDDEN_WIDTHS[0]),
                  (HIDDEN_WIDTHS[0], n3)]
    params = {}
    for i, (fan_in, fan_out) in enumerate(widths_enc):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"enc_{i}_w"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[f"enc_{i}_b"] = np.zeros(fan_out)
    for i, (fan_in, fan_out) in enumerate(widths_dec):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"dec_{i}_w"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[f"dec_{i}_b"] = np.zeros(fan_out)
    return params


def train_vae(dataset, cfg: VaeTrainConfig) -> LatentModel:
    """SGD on the masked-input VAE objective with a growing occlusion curriculum."""
    if len(dataset) == 0:
        raise InsufficientDataError("empty dataset")
    template = dataset[0]
    x = np.stack([m.flat() for m in dataset])
    mean = x.mean(axis=0)
    centered = x - mean
    lap = graph_laplacian(template)
    params = init_mlp_params(x.shape[1], cfg.latent_dim, cfg.seed)
    n = len(dataset)
    for epoch in range(cfg.epochs):
        frac = curriculum_fraction(cfg.curriculum, epoch)
        order_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(epoch,)))
        order = order_rng.permutation(n)
        for batch_idx, lo in enumerate(range(0, n, cfg.batch_size)):
            rows = order[lo:lo + cfg.batch_size]
            rng = np.random.default_rng(
                np.random.SeedSequence(cfg.seed, spawn_key=(epoch, batch_idx)))
            x_in = centered[rows].copy()
            for r in range(len(rows)):
                occ = grow_occlusion(template, frac, int(rng.integers(2**31)))
                x_in[r, occ.coord_flags()] = 0.0
            eps = rng.standard_normal((len(rows), cfg.latent_dim))
            total, _, grads = vae_training_loss(params, x_in, centered[rows], eps,
                                                lap, cfg.kl_weight, cfg.lap_weight)
            if not np.isfinite(total):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}")
            for key, g in grads.items():
                params[key] = params[key] - cfg.step_size * g
    return LatentModel("mlp", cfg.latent_dim, template, mean, mlp=params)


def training_loss_on(model_or_params, dataset, cfg: VaeTrainConfig, epoch: int = 0) -> float:
    """Average full-dataset loss with the epoch's curriculum masking (for descent checks)."""
    params = model_or_params.mlp if isinstance(model_or_params, LatentModel) else model_or_params
    template = dataset[0]
    x = np.stack([m.flat() for m in dataset])
    mean = x.mean(axis=0)
    centered = x - mean
    lap = graph_laplacian(template)
    frac = curriculum_fraction(cfg.curriculum, epoch)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(10**6,)))
    x_in = centered.copy()
    for r in range(len(dataset)):
        occ = grow_occlusion(template, frac, int(rng.integers(2**31)))
        x_in[r, occ.coord_flags()] = 0.0
    eps = rng.standard_normal((len(dataset), cfg.latent_dim))
    total, _, _ = vae_training_loss(params, x_in, centered, eps, lap,
                                    cfg.kl_weight, cfg.lap_weight)
    return total


def encode(model: LatentModel, partial: Mesh, mask: VertexMask | None = None):
    """Posterior (mu, sigma) for a partial mesh; `mask` marks hidden vertices."""
    if partial.n_vertices != model.template.n_vertices:
        raise ValueError("partial mesh vertex count does not match the model")
    if mask is not None and len(mask) != partial.n_vertices:
        raise ValueError("mask length does not match the model")
    delta = partial.flat() - model.mean
    if model.variant == "linear":
        if mask is None or mask.count == 0:
            # full-row posterior: the precomputed per-dimension scale
            mu, *_ = np.linalg.lstsq(model.decoder, delta, rcond=None)
            return mu, model.sigma.copy()
        rows = ~mask.coord_flags()
        w_vis = model.decoder[rows]
        mu, *_ = np.linalg.lstsq(w_vis, delta[rows], rcond=None)
        # posterior over z given only the visible rows: latent directions the
        # mask leaves weakly observed get proportionally larger spread
        prec = w_vis.T @ w_vis + model.noise_var * np.eye(model.latent_dim)
        cov = model.noise_var * np.linalg.inv(prec)
        return mu, np.sqrt(np.maximum(np.diag(cov), _SIGMA_FLOOR))
    x = delta.copy()
    if mask is not None:
        x[mask.coord_flags()] = 0.0
    *_, mu, logvar = _encoder_forward(model.mlp, x[None, :])
    return mu[0], np.exp(0.5 * logvar[0])


def decode(model: LatentModel, z: np.ndarray) -> Mesh:
    """Full mesh with template topology from one latent vector."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (model.latent_dim,):
        raise ValueError(f"latent must have length {model.latent_dim}, got {z.shape}")
    if model.variant == "linear":
        flat = model.mean + model.decoder @ z
    else:
        *_, y = _decoder_forward(model.mlp, z[None, :])
        flat = model.mean + y[0]
    return model.template.with_vertices(flat)


def decode_flat(model: LatentModel, z: np.ndarray) -> np.ndarray:
    """decode() without the Mesh wrapper; used in inner optimization loops."""
    z = np.asarray(z, dtype=np.float64)
    if model.variant == "linear":
        return model.mean + model.decoder @ z
    *_, y = _decoder_forward(model.mlp, z[None, :])
    return model.mean + y[0]


def decoder_pullback(model: LatentModel, z: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
    """J(z)^T applied to a per-vertex cotangent field ((N, 3) or flat 3N)."""
    cot = np.asarray(cotangent, dtype=np.float64).reshape(-1)
    if cot.size != model.mean.size:
        raise ValueError("cotangent size does not match the mesh")
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (model.latent_dim,):
        raise ValueError("latent dimension mismatch")
    if model.variant == "linear":
        return model.decoder.T @ cot
    p = model.mlp
    c1, g1, c2, g2, _ = _decoder_forward(p, z[None, :])
    dg2 = cot[None, :] @ p["dec_2_w"].T
    dc2 = dg2 * _elu_grad(c2)
    dg1 = dc2 @ p["dec_1_w"].T
    dc1 = dg1 * _elu_grad(c1)
    return (dc1 @ p["dec_0_w"].T)[0]


def sample_latents(mu: np.ndarray, sigma: np.ndarray, m: int, seed: int) -> np.ndarray:
    """M independent draws from N(mu, diag(sigma^2)), deterministic in seed."""
    if m < 1:
        raise ValueError("need at least one sample")
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    rng = np.random.default_rng(seed)
    return mu[None, :] + sigma[None, :] * rng.standard_normal((m, mu.size))


def save_latent_model(model: LatentModel, path) -> None:
    tensors = {
        "variant": np.array(0.0 if model.variant == "linear" else 1.0),
        "template": model.template.vertices,
        "faces": model.template.faces.astype(np.float64),
        "mean": model.mean,
    }
    if model.variant == "linear":
        tensors["dec_0_w"] = model.decoder
        tensors["sigma"] = model.sigma
        tensors["noise_var"] = np.array(model.noise_var)
    else:
        for key in _MLP_KEYS:
            tensors[key] = model.mlp[key]
    modelio.write_tensors(path, tensors)


def load_latent_model(path) -> LatentModel:
    t = modelio.read_tensors(path)
    template = Mesh(t["template"], t["faces"].astype(np.int64))
    if float(t["variant"]) == 0.0:
        w = t["dec_0_w"]
        return LatentModel("linear", w.shape[1], template, t["mean"],
                           decoder=w, sigma=t["sigma"], noise_var=float(t["noise_var"]))
    params = {key: t[key] for key in _MLP_KEYS}
    return LatentModel("mlp", params["enc_2_w"].shape[1], template, t["mean"], mlp=params)
