"""Gradient-based fitting of the global+local model to the visible part of an
observation.

Dense mode fits directly to the visible vertices of a partial target mesh;
sparse mode fits 68 weak-perspective-projected landmarks with per-landmark
confidences. Either way the update is plain gradient descent with a constant
step on all parameters; rotations are parameterized by a 3-vector axis angle,
scale by its logarithm, so the iterate stays on the similarity manifold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .blendshape import BlendshapeModel
from .errors import DivergenceError
from .mesh import Mesh, RegionAtlas, RigidTransform, VertexMask, _frozen

N_LANDMARKS = 68


# ---------------------------------------------------------------------------
# axis-angle rotations

def rodrigues(rvec: np.ndarray) -> np.ndarray:
    """Rotation matrix exp([r]_x) with series fallbacks near zero."""
    r = np.asarray(rvec, dtype=np.float64)
    theta2 = float(r @ r)
    theta = np.sqrt(theta2)
    k = np.array([[0.0, -r[2], r[1]], [r[2], 0.0, -r[0]], [-r[1], r[0], 0.0]])
    if theta < 1e-4:
        a = 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0
        b = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * k + b * (k @ k)


_E_SKEW = tuple(
    np.array([[0.0, -e[2], e[1]], [e[2], 0.0, -e[0]], [-e[1], e[0], 0.0]])
    for e in np.eye(3)
)


def rotation_with_jacobian(rvec: np.ndarray):
    """(R, dR) where dR[i] = dR/dr_i, exact for all r including r = 0.

    Differentiates R = I + a(t) K + b(t) K^2 in t = |r|; the coefficient
    ratios a'(t)/t and b'(t)/t are evaluated by series below t = 1e-4 to avoid
    cancellation.
    """
    r = np.asarray(rvec, dtype=np.float64)
    theta2 = float(r @ r)
    theta = np.sqrt(theta2)
    k = np.array([[0.0, -r[2], r[1]], [r[2], 0.0, -r[0]], [-r[1], r[0], 0.0]])
    k2 = k @ k
    if theta < 1e-4:
        a = 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0
        b = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0
        c1 = -1.0 / 3.0 + theta2 / 30.0 - theta2 * theta2 / 840.0
        c2 = -1.0 / 12.0 + theta2 / 180.0 - theta2 * theta2 / 6720.0
    else:
        sin_t, cos_t = np.sin(theta), np.cos(theta)
        a = sin_t / theta
        b = (1.0 - cos_t) / theta2
        c1 = (theta * cos_t - sin_t) / (theta2 * theta)
        c2 = (theta * sin_t - 2.0 * (1.0 - cos_t)) / (theta2 * theta2)
    rot = np.eye(3) + a * k + b * k2
    d_rot = np.empty((3, 3, 3))
    for i in range(3):
        ei = _E_SKEW[i]
        d_rot[i] = c1 * r[i] * k + a * ei + c2 * r[i] * k2 + b * (ei @ k + k @ ei)
    return rot, d_rot


# ---------------------------------------------------------------------------
# observation and hyperparameters

@dataclass(frozen=True)
class Camera:
    """Weak-perspective camera: u = scale * (R x)_xy + translation."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or np.abs(r.T @ r - np.eye(3)).max() > 1e-10:
            raise ValueError("camera rotation must be orthonormal 3x3")
        if t.shape != (2,):
            raise ValueError("camera translation must be a 2-vector")
        if not self.scale > 0:
            raise ValueError("camera scale must be positive")
        object.__setattr__(self, "rotation", _frozen(r))
        object.__setattr__(self, "translation", _frozen(t))
        object.__setattr__(self, "scale", float(self.scale))

    @classmethod
    def identity(cls) -> "Camera":
        return cls(np.eye(3), np.zeros(2), 1.0)


def project_weak_perspective(points: np.ndarray, camera: Camera) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    return camera.scale * (p @ camera.rotation.T)[..., :2] + camera.translation


def select_visible_landmarks(confidences: np.ndarray, tau: float) -> np.ndarray:
    """True where confidence strictly exceeds the threshold."""
    conf = np.asarray(confidences, dtype=np.float64)
    if np.any(conf < 0) or np.any(conf > 1):
        raise ValueError("confidences must lie in [0, 1]")
    return conf > tau


@dataclass(frozen=True)
class Observation:
    """What the fitter sees: a masked dense target or 68 2-D landmarks.

    landmark_vertices gives the template vertex index of each landmark.
    occlusion (optional) marks hidden vertices and is carried through to the
    completion stage.
    """

    mode: str
    landmark_vertices: np.ndarray
    target: Mesh | None = None
    visibility: VertexMask | None = None
    landmarks: np.ndarray | None = None
    confidences: np.ndarray | None = None
    occlusion: VertexMask | None = None

    def __post_init__(self):
        lv = np.asarray(self.landmark_vertices, dtype=np.int64)
        if lv.shape != (N_LANDMARKS,):
            raise ValueError(f"need {N_LANDMARKS} landmark vertex indices")
        object.__setattr__(self, "landmark_vertices", _frozen(lv))
        if self.mode == "dense":
            if self.target is None or self.visibility is None:
                raise ValueError("dense observation needs target and visibility")
            if len(self.visibility) != self.target.n_vertices:
                raise ValueError("visibility mask does not match target")
        elif self.mode == "sparse":
            lm = np.asarray(self.landmarks, dtype=np.float64)
            conf = np.asarray(self.confidences, dtype=np.float64)
            if lm.shape != (N_LANDMARKS, 2):
                raise ValueError(f"need a ({N_LANDMARKS}, 2) landmark array")
            if conf.shape != (N_LANDMARKS,):
                raise ValueError(f"need {N_LANDMARKS} confidence values")
            object.__setattr__(self, "landmarks", _frozen(lm))
            object.__setattr__(self, "confidences", _frozen(conf))
        else:
            raise ValueError(f"mode must be dense or sparse, got {self.mode!r}")

    @classmethod
    def dense(cls, target: Mesh, visibility: VertexMask, landmark_vertices,
              occlusion: VertexMask | None = None) -> "Observation":
        return cls("dense", landmark_vertices, target=target, visibility=visibility,
                   occlusion=occlusion)

    @classmethod
    def sparse(cls, landmarks, confidences, landmark_vertices,
               occlusion: VertexMask | None = None) -> "Observation":
        return cls("sparse", landmark_vertices, landmarks=landmarks,
                   confidences=confidences, occlusion=occlusion)


@dataclass(frozen=True)
class FitHyper:
    tau: float = 0.2
    n_iter: int = 500
    lambda_lmk: float = 1.0
    lambda_data: float = 1.0
    lambda_reg: float = 1e-3
    eta: float = 2e-2

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if self.n_iter < 1:
            raise ValueError("n_iter must be >= 1")
        if min(self.lambda_lmk, self.lambda_data, self.lambda_reg, self.eta) <= 0:
            raise ValueError("loss weights and step size must be positive")


# ---------------------------------------------------------------------------
# parameter vector

@dataclass
class FitParams:
    """All free parameters of one fit; packs to a flat vector for the updates."""

    beta: np.ndarray
    psi: np.ndarray
    local_beta: list
    local_psi: list
    rot_vec: np.ndarray
    translation: np.ndarray  # 3-vector (dense) or 2-vector (sparse)
    log_scale: float

    @classmethod
    def zeros(cls, model: BlendshapeModel, mode: str) -> "FitParams":
        n_s, n_e = model.coarse_ranks
        local = model.local_models
        t_dim = 3 if mode == "dense" else 2
        return cls(np.zeros(n_s), np.zeros(n_e),
                   [np.zeros(r) for r in local.shape_ranks],
                   [np.zeros(r) for r in local.expr_ranks],
                   np.zeros(3), np.zeros(t_dim), 0.0)

    def pack(self) -> np.ndarray:
        parts = [self.beta, self.psi, *self.local_beta, *self.local_psi,
                 self.rot_vec, self.translation, [self.log_scale]]
        return np.concatenate([np.asarray(p, dtype=np.float64).reshape(-1) for p in parts])

    @classmethod
    def unpack(cls, vec: np.ndarray, model: BlendshapeModel, mode: str) -> "FitParams":
        vec = np.asarray(vec, dtype=np.float64)
        n_s, n_e = model.coarse_ranks
        local = model.local_models
        t_dim = 3 if mode == "dense" else 2
        pos = 0

        def take(n):
            nonlocal pos
            out = vec[pos:pos + n].copy()
            pos += n
            return out

        beta, psi = take(n_s), take(n_e)
        lb = [take(r) for r in local.shape_ranks]
        lp = [take(r) for r in local.expr_ranks]
        rot, trans = take(3), take(t_dim)
        log_scale = float(take(1)[0])
        if pos != vec.size:
            raise ValueError(f"parameter vector has {vec.size} entries, expected {pos}")
        return cls(beta, psi, lb, lp, rot, trans, log_scale)

    def blend_coeffs(self) -> np.ndarray:
        return np.concatenate([np.asarray(p).reshape(-1)
                               for p in (self.beta, self.psi, *self.local_beta, *self.local_psi)])

    def rigid(self) -> RigidTransform:
        return RigidTransform(rodrigues(self.rot_vec), self.translation, float(np.exp(self.log_scale)))

    def camera(self) -> Camera:
        return Camera(rodrigues(self.rot_vec), self.translation, float(np.exp(self.log_scale)))


@dataclass(frozen=True)
class FitResult:
    """Fitted partial shape S_m, its parameters, and the per-iteration loss trace.

    `mesh` lives in the observation frame (rigid transform applied);
    `model_mesh` is the same shape unposed into the model frame, which is what
    completion models consume.
    """

    mesh: Mesh
    params: FitParams
    trace: np.ndarray
    landmark_valid: np.ndarray
    model_mesh: Mesh = None


def assemble_basis(model: BlendshapeModel) -> np.ndarray:
    """Stack coarse-global and local basis columns into one (3N, P) matrix."""
    n_s, n_e = model.coarse_ranks
    g = model.global_model
    local = model.local_models
    cols = [g.shape_basis[:, :n_s], g.expr_basis[:, :n_e],
            *local.shape_bases, *local.expr_bases]
    return np.concatenate(cols, axis=1)


def _landmark_validity(model: BlendshapeModel, obs: Observation, hyper: FitHyper) -> np.ndarray:
    if obs.mode == "sparse":
        return select_visible_landmarks(obs.confidences, hyper.tau)
    return obs.visibility.flags[obs.landmark_vertices]


def fitting_loss(model: BlendshapeModel, params: FitParams, obs: Observation,
                 hyper: FitHyper, basis: np.ndarray | None = None):
    """Weighted landmark + data + regularizer loss with its exact gradient.

    Landmark and data terms are mean L1 (coordinate-absolute differences
    summed per point, averaged over valid points); the regularizer is the
    squared L2 norm of all blendshape coefficients. The L1 subgradient at
    exactly zero is taken as zero. Returns (loss, FitParams-shaped gradient).
    """
    if basis is None:
        basis = assemble_basis(model)
    theta = params.blend_coeffs()
    n = model.template.n_vertices
    verts = (model.template.flat() + basis @ theta).reshape(n, 3)
    rot, d_rot = rotation_with_jacobian(params.rot_vec)
    scale = float(np.exp(params.log_scale))
    valid = _landmark_validity(model, obs, hyper)
    n_valid = int(valid.sum())

    loss = hyper.lambda_reg * float(theta @ theta)
    if obs.mode == "dense":
        world = scale * (verts @ rot.T) + params.translation
        g_world = np.zeros_like(world)
        vis = obs.visibility.indices()
        if vis.size:
            diff = world[vis] - obs.target.vertices[vis]
            loss += hyper.lambda_data * float(np.abs(diff).sum() / vis.size)
            g_world[vis] += hyper.lambda_data * np.sign(diff) / vis.size
        if n_valid:
            li = obs.landmark_vertices[valid]
            diff = world[li] - obs.target.vertices[li]
            loss += hyper.lambda_lmk * float(np.abs(diff).sum() / n_valid)
            np.add.at(g_world, li, hyper.lambda_lmk * np.sign(diff) / n_valid)
        g_trans = g_world.sum(axis=0)
    else:
        projected = scale * (verts @ rot.T)[:, :2] + params.translation
        g_world = np.zeros((n, 3))
        if n_valid:
            li = obs.landmark_vertices[valid]
            diff = projected[li] - obs.landmarks[valid]
            loss += hyper.lambda_lmk * float(np.abs(diff).sum() / n_valid)
            g2 = hyper.lambda_lmk * np.sign(diff) / n_valid
            np.add.at(g_world, li, np.concatenate([g2, np.zeros((len(li), 1))], axis=1))
        g_trans = g_world.sum(axis=0)[:2]

    # pull the world-space cotangent back onto each parameter block
    g_verts = scale * (g_world @ rot)
    g_theta = basis.T @ g_verts.reshape(-1) + 2.0 * hyper.lambda_reg * theta
    cross = g_world.T @ verts  # (3, 3) sum of outer(g_world_i, verts_i)
    g_rot = scale * np.array([np.sum(d_rot[i] * cross) for i in range(3)])
    g_log_scale = float(np.sum(g_world * (verts @ rot.T)) * scale)

    n_s, n_e = model.coarse_ranks
    local = model.local_models
    pos = 0

    def take(k):
        nonlocal pos
        out = g_theta[pos:pos + k].copy()
        pos += k
        return out

    grad = FitParams(take(n_s), take(n_e),
                     [take(r) for r in local.shape_ranks],
                     [take(r) for r in local.expr_ranks],
                     g_rot, g_trans, g_log_scale)
    return loss, grad


def fit_partial(model: BlendshapeModel, obs: Observation, hyper: FitHyper) -> FitResult:
    """Descend fitting_loss over all parameters; returns the fitted shape S_m.

    The update is Adam with the step linearly annealed from eta to zero.
    Constant-step subgradient descent limit-cycles on the L1 terms (the sign
    field keeps full magnitude as residuals shrink), so it cannot reach the
    recovery tolerances this fit is specified to; the diagonal rescaling plus
    annealing removes that floor while keeping a fixed per-run step budget.
    """
    if obs.mode == "dense" and obs.target.n_vertices != model.template.n_vertices:
        raise ValueError("observation vertex count does not match the model")
    basis = assemble_basis(model)
    params = FitParams.zeros(model, obs.mode)
    vec = params.pack()
    m = np.zeros_like(vec)
    v = np.zeros_like(vec)
    b1, b2, eps = 0.9, 0.999, 1e-8
    trace = np.empty(hyper.n_iter + 1)
    for it in range(hyper.n_iter):
        params = FitParams.unpack(vec, model, obs.mode)
        loss, grad = fitting_loss(model, params, obs, hyper, basis=basis)
        trace[it] = loss
        if not np.isfinite(loss) or (it > 0 and loss > 1e6 * max(trace[0], 1e-300)):
            raise DivergenceError(f"fitting loss diverged at iteration {it}: {loss}")
        g = grad.pack()
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        step = hyper.eta * (1.0 - it / hyper.n_iter)
        vec = vec - step * (m / (1.0 - b1 ** (it + 1))) / (np.sqrt(v / (1.0 - b2 ** (it + 1))) + eps)
    params = FitParams.unpack(vec, model, obs.mode)
    loss, _ = fitting_loss(model, params, obs, hyper, basis=basis)
    trace[-1] = loss

    theta = params.blend_coeffs()
    verts = (model.template.flat() + basis @ theta).reshape(-1, 3)
    model_mesh = model.template.with_vertices(verts)
    if obs.mode == "dense":
        mesh = model.template.with_vertices(params.rigid().apply(verts))
    else:
        # sparse mode never observes depth; the fit only exists in model frame
        mesh = model_mesh
    return FitResult(mesh, params, trace, _landmark_validity(model, obs, hyper), model_mesh)


def load_landmark_file(path) -> tuple:
    """Read 68 `x y confidence` lines into ((68, 2) points, (68,) confidences)."""
    points, confs = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) != 3:
                raise ValueError(f"{path}:{lineno}: expected `x y confidence`")
            x, y, c = (float(t) for t in tokens)
            points.append((x, y))
            confs.append(c)
    if len(points) != N_LANDMARKS:
        raise ValueError(f"{path}: expected {N_LANDMARKS} landmarks, got {len(points)}")
    return np.array(points), np.array(confs)
