"""Sequence annotator: recovers (beta, theta_t, t_t) from 3D keypoint sequences.

Nonlinear least squares on the stacked residual vector with a 3D keypoint data
term, temporal rotation smoothing, a single unified shape per sequence and a
small shape regularizer. The schedule is staged: per-frame (theta_t, t_t)
solves with the shape frozen, then one joint refinement over the shape and all
frames with smoothing active. The optimizer is a damped Gauss-Newton
(Levenberg-Marquardt) loop that only ever accepts descending steps, so the
objective is monotonically non-increasing by construction.

The joint-stage normal matrix is block-arrow (frames couple only to their
neighbors through smoothing, plus a dense shape border), so the damped system
is solved exactly by a block-tridiagonal factorization with a Schur complement
on the shape block instead of a generic sparse solver.

3D keypoints are unambiguous up to per-bone twist, so no pose prior is used;
evaluation is always in keypoint space. A 2D reprojection loss is provided as
an evaluation utility only (the elongated 2D gradient path is exactly what the
3D data term avoids).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from .body import (
    NUM_SHAPE_COEFFS,
    KinematicTree,
    augmentation_matrix,
    rodrigues_batch,
    rotation_geodesic,
    rotation_to_axis_angle,
)

ANNOTATION_FORMAT = "synthpose-annotation"

_SIN_GUARD = 1e-9
_MU_MIN = 1e-14
_MU_MAX = 1e14


@dataclass(frozen=True)
class FitConfig:
    lambda_data: float = 1.0
    lambda_smooth: float = 0.1
    lambda_shape_reg: float = 1e-3
    max_frame_iters: int = 200
    max_joint_iters: int = 100
    tol: float = 1e-10          # stop when an accepted step improves less than this
    schedule: str = "staged"    # "staged" (per-frame warm start, then joint) or "joint"
    mu_init: float = 1e-3

    def __post_init__(self):
        if min(self.lambda_data, self.lambda_smooth, self.lambda_shape_reg) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.tol <= 0:
            raise ValueError("tolerance must be positive")
        if self.schedule not in ("staged", "joint"):
            raise ValueError("schedule must be 'staged' or 'joint'")

    def to_dict(self) -> dict:
        return {
            "lambda_data": self.lambda_data,
            "lambda_smooth": self.lambda_smooth,
            "lambda_shape_reg": self.lambda_shape_reg,
            "max_frame_iters": self.max_frame_iters,
            "max_joint_iters": self.max_joint_iters,
            "tol": self.tol,
            "schedule": self.schedule,
            "mu_init": self.mu_init,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FitConfig":
        return cls(**doc)


@dataclass(frozen=True)
class FitState:
    """Free parameters of one fit: shared shape, per-frame pose and translation."""

    beta: np.ndarray    # (10,)
    thetas: np.ndarray  # (T, J, 3)
    trans: np.ndarray   # (T, 3)


@dataclass
class FitResult:
    sequence_id: str
    beta: np.ndarray
    thetas: np.ndarray
    trans: np.ndarray
    frame_rms: np.ndarray       # per-frame keypoint residual RMS, meters
    iterations: int
    converged: bool
    seconds_per_frame: float
    objective_history: list = field(default_factory=list, repr=False)

    @property
    def frames(self) -> int:
        return self.thetas.shape[0]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _masked_norm(pred, target, mask):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("pred and target shapes disagree")
    if mask is None:
        mask = np.ones(pred.shape[0], dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("mask selects no keypoints")
    diff = pred[mask] - target[mask]
    return float(np.sqrt((diff ** 2).sum()))


def loss_3d(pred, target, mask=None) -> float:
    """Root-sum-of-squares 3D keypoint distance over masked joints, meters."""
    return _masked_norm(pred, target, mask)


def loss_2d(pred, target, mask=None) -> float:
    """Root-sum-of-squares 2D reprojection distance over masked joints, pixels.

    Evaluation utility only; the default fit never touches it.
    """
    return _masked_norm(pred, target, mask)


def loss_smpl(pred_theta, pred_beta, gt_theta, gt_beta) -> float:
    """Parameter-space loss: ||theta - theta_hat|| + ||beta - beta_hat||."""
    pred_theta = np.asarray(pred_theta, dtype=np.float64).ravel()
    gt_theta = np.asarray(gt_theta, dtype=np.float64).ravel()
    pred_beta = np.asarray(pred_beta, dtype=np.float64).ravel()
    gt_beta = np.asarray(gt_beta, dtype=np.float64).ravel()
    if pred_theta.shape != gt_theta.shape or pred_beta.shape != gt_beta.shape:
        raise ValueError("parameter dimensions disagree")
    return float(np.linalg.norm(pred_theta - gt_theta) + np.linalg.norm(pred_beta - gt_beta))


def smoothness_term(thetas: np.ndarray) -> float:
    """Sum of squared per-joint geodesic steps between consecutive frames, rad^2."""
    thetas = np.asarray(thetas, dtype=np.float64)
    if thetas.ndim != 3:
        raise ValueError("thetas must be (T, J, 3)")
    if thetas.shape[0] < 2:
        return 0.0
    rots = rodrigues_batch(thetas)
    steps = rotation_geodesic(rots[:-1], rots[1:])
    return float((steps ** 2).sum())


# ---------------------------------------------------------------------------
# model context and derivatives
# ---------------------------------------------------------------------------

class _Model:
    """Precomputed tree arrays shared by all objective evaluations of one fit."""

    def __init__(self, tree: KinematicTree, keypoint_count: int):
        self.joints = tree.joint_count
        self.rest = tree.rest_offsets
        self.blend = tree.shape_blend
        self.parents_full = np.concatenate([[-1], tree.parents])
        self.descendants = [[] for _ in range(self.joints)]
        for j in range(1, self.joints):
            node = int(self.parents_full[j])
            while node != -1:
                self.descendants[node].append(j)
                node = int(self.parents_full[node])
        if keypoint_count == self.joints:
            self.aug = np.eye(self.joints)
        elif keypoint_count == self.joints + 2:
            self.aug = augmentation_matrix(tree)
        else:
            raise ValueError(
                f"sequence has {keypoint_count} keypoints; expected "
                f"{self.joints} or {self.joints + 2} for this tree")
        # the augmentation is identity rows plus a few sparse affine rows;
        # applying those directly beats a dense (K, J) contraction
        self.extra_terms = []
        for row in self.aug[self.joints:]:
            nz = np.nonzero(row)[0]
            self.extra_terms.append([(int(j), float(row[j])) for j in nz])

    def augment(self, arr):
        """Map per-joint arrays (T, J, ...) to keypoint arrays (T, K, ...)."""
        if not self.extra_terms:
            return arr
        extras = [
            sum(w * arr[:, j] for j, w in terms)
            for terms in self.extra_terms
        ]
        return np.concatenate([arr, np.stack(extras, axis=1)], axis=1)


_E_SKEW = np.zeros((3, 3, 3))
for _k in range(3):
    _e = np.zeros(3)
    _e[_k] = 1.0
    _E_SKEW[_k] = np.array([
        [0.0, -_e[2], _e[1]],
        [_e[2], 0.0, -_e[0]],
        [-_e[1], _e[0], 0.0],
    ])


def _skew(v):
    out = np.zeros((*v.shape[:-1], 3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _drodrigues_batch(aa: np.ndarray) -> np.ndarray:
    """Derivatives of the Rodrigues map: (N, 3) -> (N, 3, 3, 3), [n, k] = dR/dv_k."""
    aa = np.asarray(aa, dtype=np.float64).reshape(-1, 3)
    n = aa.shape[0]
    theta = np.linalg.norm(aa, axis=1)
    rot = rodrigues_batch(aa)
    out = np.empty((n, 3, 3, 3))
    small = theta < 1e-8
    if small.any():
        out[small] = _E_SKEW
    big = ~small
    if big.any():
        v = aa[big]
        r = rot[big]
        th2 = (theta[big] ** 2)[:, None, None]
        skew_v = _skew(v)
        i_minus_r = np.eye(3) - r
        for k in range(3):
            cross = np.cross(v, i_minus_r[:, :, k])
            out[big, k] = ((v[:, k, None, None] * skew_v + _skew(cross)) / th2) @ r
    return out


def _fk_batch(thetas, beta, model: _Model, need_theta_jac=False, need_beta_jac=False,
              rots=None, drots=None):
    """Batched FK over frames; optionally with analytic Jacobians.

    Returns (pos, rots, dpos_dtheta, dpos_dbeta): positions exclude the global
    translation. dpos_dtheta is (T, J, 3, J, 3); dpos_dbeta is (T, J, 3, 10).
    Precomputed rots/drots may be passed in to share work between terms.
    """
    frames, joints = thetas.shape[:2]
    offsets = model.rest + model.blend @ beta
    if rots is None:
        rots = rodrigues_batch(thetas)
    g_rot = np.empty((frames, joints, 3, 3))
    pos = np.empty((frames, joints, 3))
    g_rot[:, 0] = rots[:, 0]
    pos[:, 0] = offsets[0]
    for j in range(1, joints):
        p = model.parents_full[j]
        pos[:, j] = pos[:, p] + g_rot[:, p] @ offsets[j]
        g_rot[:, j] = g_rot[:, p] @ rots[:, j]

    dpos_dtheta = None
    if need_theta_jac:
        if drots is None:
            drots = _drodrigues_batch(thetas.reshape(-1, 3)).reshape(frames, joints, 3, 3, 3)
        dpos_dtheta = np.zeros((frames, joints, 3, joints, 3))
        for j in range(joints):
            desc = model.descendants[j]
            if not desc:
                continue
            rel = pos[:, desc] - pos[:, j:j + 1]          # (T, D, 3)
            g_t = np.swapaxes(g_rot[:, j], 1, 2)          # global rotation transposed
            m = np.einsum("tkab,tbc->tkac", drots[:, j], g_t)
            parent = model.parents_full[j]
            if parent != -1:
                m = np.einsum("tab,tkbc->tkac", g_rot[:, parent], m)
            # non-adjacent advanced indices put the desc axis first
            dpos_dtheta[:, desc, :, j, :] = np.einsum("tkab,tdb->dtak", m, rel)

    dpos_dbeta = None
    if need_beta_jac:
        dpos_dbeta = np.empty((frames, joints, 3, NUM_SHAPE_COEFFS))
        dpos_dbeta[:, 0] = model.blend[0]
        for j in range(1, joints):
            p = model.parents_full[j]
            dpos_dbeta[:, j] = dpos_dbeta[:, p] + np.einsum(
                "tab,bm->tam", g_rot[:, p], model.blend[j])

    return pos, rots, dpos_dtheta, dpos_dbeta


def _log_rotation_batch(q):
    """SO(3) log map: rotations (..., 3, 3) -> axis-angle (..., 3)."""
    trace = q[..., 0, 0] + q[..., 1, 1] + q[..., 2, 2]
    vee = 0.5 * np.stack([
        q[..., 2, 1] - q[..., 1, 2],
        q[..., 0, 2] - q[..., 2, 0],
        q[..., 1, 0] - q[..., 0, 1],
    ], axis=-1)
    sin_phi = np.linalg.norm(vee, axis=-1)
    phi = np.arctan2(sin_phi, (trace - 1.0) / 2.0)
    scale = np.where(sin_phi > _SIN_GUARD,
                     phi / np.where(sin_phi > _SIN_GUARD, sin_phi, 1.0),
                     1.0 + phi ** 2 / 6.0)
    return vee * scale[..., None]


def _jr_batch(theta):
    """Right Jacobian of the exponential map at axis-angle theta (..., 3)."""
    phi = np.linalg.norm(theta, axis=-1)
    k = _skew(theta)
    k2 = k @ k
    phi2 = phi ** 2
    small = phi < 1e-6
    safe2 = np.where(small, 1.0, phi2)
    a = np.where(small, 0.5 - phi2 / 24.0, (1.0 - np.cos(phi)) / safe2)
    b = np.where(small, 1.0 / 6.0 - phi2 / 120.0, (phi - np.sin(phi)) / (safe2 * np.where(small, 1.0, phi)))
    return np.eye(3) - a[..., None, None] * k + b[..., None, None] * k2


def _jl_inv_batch(r):
    """Inverse left Jacobian of the exponential map at axis-angle r (..., 3)."""
    phi = np.linalg.norm(r, axis=-1)
    k = _skew(r)
    k2 = k @ k
    phi2 = phi ** 2
    small = phi < 1e-6
    coef = np.where(
        small,
        1.0 / 12.0 + phi2 / 720.0,
        1.0 / np.where(small, 1.0, phi2)
        - (1.0 + np.cos(phi)) / np.where(small, 1.0, 2.0 * phi * np.sin(phi)),
    )
    return np.eye(3) - 0.5 * k + coef[..., None, None] * k2


def _smooth_residuals_and_jac(rots, thetas, need_jac):
    """Per-pair smoothing residuals r = log(R_a^T R_b), (T-1, J, 3).

    ||r|| is exactly the geodesic step, so sum ||r||^2 equals the scalar
    smoothing objective, but the 3-vector residual gives Gauss-Newton a model
    that stays faithful even under crushing smoothing weights (the scalar
    angle's GN model degrades with the weight). Jacobians follow from the
    SO(3) left/right Jacobians: dr/dtheta_b = Jl(r)^-T Jr(theta_b) and
    dr/dtheta_a = -Jl(r)^-1 Jr(theta_a).
    """
    q = np.swapaxes(rots[:-1], -1, -2) @ rots[1:]
    r = _log_rotation_batch(q)
    if not need_jac:
        return r, None, None
    jl_inv = _jl_inv_batch(r)
    dr_db = np.swapaxes(jl_inv, -1, -2) @ _jr_batch(thetas[1:])
    dr_da = -jl_inv @ _jr_batch(thetas[:-1])
    return r, dr_da, dr_db


# ---------------------------------------------------------------------------
# objective: value and analytic gradient
# ---------------------------------------------------------------------------

def pack_state(state: FitState) -> np.ndarray:
    frames = state.thetas.shape[0]
    parts = [state.beta]
    for t in range(frames):
        parts.append(state.thetas[t].ravel())
        parts.append(state.trans[t])
    return np.concatenate(parts)


def unpack_state(x: np.ndarray, frames: int, joints: int) -> FitState:
    beta = x[:NUM_SHAPE_COEFFS]
    per_frame = 3 * joints + 3
    thetas = np.empty((frames, joints, 3))
    trans = np.empty((frames, 3))
    for t in range(frames):
        base = NUM_SHAPE_COEFFS + t * per_frame
        thetas[t] = x[base:base + 3 * joints].reshape(joints, 3)
        trans[t] = x[base + 3 * joints:base + per_frame]
    return FitState(beta=beta, thetas=thetas, trans=trans)


def _targets_and_masks(seq):
    """Accept a SequenceData or a (targets, masks) pair; drop non-finite points."""
    if isinstance(seq, tuple):
        targets, masks = seq
        targets = np.asarray(targets, dtype=np.float64)
        masks = np.asarray(masks, dtype=bool)
    else:
        targets = np.asarray(seq.x3d, dtype=np.float64)
        masks = np.asarray(seq.in_front, dtype=bool)
    masks = masks & np.isfinite(targets).all(axis=2)
    return targets, masks


def targets_and_masks(seq) -> tuple[np.ndarray, np.ndarray]:
    """Data term inputs for a sequence: 3D targets and the per-frame joint mask
    (behind-camera and non-finite keypoints are dropped)."""
    return _targets_and_masks(seq)


def objective_value(state: FitState, seq, tree: KinematicTree, config: FitConfig) -> float:
    """Full objective: lambda_data * sum ||masked diff||^2 + smoothing + shape reg."""
    targets, masks = _targets_and_masks(seq)
    model = _Model(tree, targets.shape[1])
    pos, rots, _, _ = _fk_batch(state.thetas, state.beta, model)
    pred = model.augment(pos) + state.trans[:, None, :]
    diff = (pred - targets)[masks]
    value = config.lambda_data * float((diff ** 2).sum())
    if config.lambda_smooth > 0 and state.thetas.shape[0] > 1:
        phi = rotation_geodesic(rots[:-1], rots[1:])
        value += config.lambda_smooth * float((phi ** 2).sum())
    value += config.lambda_shape_reg * float((state.beta ** 2).sum())
    return value


def objective_gradient(state: FitState, seq, tree: KinematicTree, config: FitConfig) -> np.ndarray:
    """Analytic gradient of objective_value w.r.t. the packed parameter vector."""
    targets, masks = _targets_and_masks(seq)
    model = _Model(tree, targets.shape[1])
    frames, joints = state.thetas.shape[:2]
    per_frame = 3 * joints + 3
    grad = np.zeros(NUM_SHAPE_COEFFS + frames * per_frame)

    pos, rots, dpos_dtheta, dpos_dbeta = _fk_batch(
        state.thetas, state.beta, model, need_theta_jac=True, need_beta_jac=True)
    pred = model.augment(pos) + state.trans[:, None, :]
    d_aug_theta = model.augment(dpos_dtheta)
    d_aug_beta = model.augment(dpos_dbeta)

    if config.lambda_data > 0:
        for t in range(frames):
            mask = masks[t]
            if not mask.any():
                continue
            diff = (pred[t][mask] - targets[t][mask]).ravel()
            base = NUM_SHAPE_COEFFS + t * per_frame
            jac_theta = d_aug_theta[t][mask].reshape(-1, 3 * joints)
            grad[base:base + 3 * joints] += 2 * config.lambda_data * (jac_theta.T @ diff)
            grad[base + 3 * joints:base + per_frame] += 2 * config.lambda_data * (
                diff.reshape(-1, 3).sum(axis=0))
            jac_beta = d_aug_beta[t][mask].reshape(-1, NUM_SHAPE_COEFFS)
            grad[:NUM_SHAPE_COEFFS] += 2 * config.lambda_data * (jac_beta.T @ diff)

    if config.lambda_smooth > 0 and frames > 1:
        # grad of ||r||^2 is 2 r^T dr; the pair (t-1, t) touches both frames
        resid, dr_a, dr_b = _smooth_residuals_and_jac(rots, state.thetas, need_jac=True)
        w = 2 * config.lambda_smooth
        contrib_a = w * np.einsum("tji,tjik->tjk", resid, dr_a).reshape(frames - 1, -1)
        contrib_b = w * np.einsum("tji,tjik->tjk", resid, dr_b).reshape(frames - 1, -1)
        for t in range(frames - 1):
            base_a = NUM_SHAPE_COEFFS + t * per_frame
            base_b = NUM_SHAPE_COEFFS + (t + 1) * per_frame
            grad[base_a:base_a + 3 * joints] += contrib_a[t]
            grad[base_b:base_b + 3 * joints] += contrib_b[t]

    grad[:NUM_SHAPE_COEFFS] += 2 * config.lambda_shape_reg * state.beta
    return grad


# ---------------------------------------------------------------------------
# Levenberg-Marquardt: dense per-frame loop
# ---------------------------------------------------------------------------

def _lm_dense(fun, x0, max_iters, tol, mu_init):
    x = np.asarray(x0, dtype=np.float64).copy()
    r, jac = fun(x, True)
    obj = float(r @ r)
    mu = mu_init
    nu = 2.0
    iterations = 0
    converged = False
    history = [obj]
    while iterations < max_iters:
        g = jac.T @ r
        if np.abs(g).max() < 1e-12:
            converged = True
            break
        a = jac.T @ jac
        raw_diag = np.diag(a)
        diag = np.maximum(raw_diag, 1e-8 * max(raw_diag.max(), 1e-12))
        gain = None
        while mu <= _MU_MAX:
            try:
                delta = np.linalg.solve(a + mu * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                mu *= nu
                nu *= 2
                continue
            r_try, _ = fun(x + delta, False)
            obj_try = float(r_try @ r_try)
            if obj_try <= obj:
                gain = obj - obj_try
                x = x + delta
                obj = obj_try
                mu = max(mu / 3.0, _MU_MIN)
                nu = 2.0
                break
            mu *= nu
            nu *= 2
        if gain is None:
            converged = True  # no descending step exists at machine precision
            break
        iterations += 1
        history.append(obj)
        if gain < tol:
            converged = True
            break
        r, jac = fun(x, True)
    return x, obj, iterations, converged, history


# ---------------------------------------------------------------------------
# Levenberg-Marquardt: joint stage on the block-arrow normal matrix
# ---------------------------------------------------------------------------

@dataclass
class _ArrowBlocks:
    """Pieces of J^T J and J^T r for parameters [beta | frame_0 | ... | frame_T-1].

    The matrix is block tridiagonal in the frames (smoothing couples neighbors
    only) with a dense 10-wide shape border.
    """

    bb: np.ndarray        # (10, 10)
    be: np.ndarray        # (T, 10, P) cross blocks beta x frame
    dd: np.ndarray        # (T, P, P) frame diagonal blocks
    off: np.ndarray       # (T-1, P, P) frame t x frame t+1 blocks
    grad: np.ndarray      # J^T r, full length


def _arrow_matvec(blocks: _ArrowBlocks, vec):
    frames, p = blocks.dd.shape[0], blocks.dd.shape[1]
    beta = vec[:NUM_SHAPE_COEFFS]
    z = vec[NUM_SHAPE_COEFFS:].reshape(frames, p)
    out = np.empty_like(vec)
    out[:NUM_SHAPE_COEFFS] = blocks.bb @ beta + np.einsum("tip,tp->i", blocks.be, z)
    frame_out = np.einsum("tpq,tq->tp", blocks.dd, z) + np.einsum("tip,i->tp", blocks.be, beta)
    if frames > 1:
        frame_out[:-1] += np.einsum("tpq,tq->tp", blocks.off, z[1:])
        frame_out[1:] += np.einsum("tqp,tq->tp", blocks.off, z[:-1])
    out[NUM_SHAPE_COEFFS:] = frame_out.ravel()
    return out


def _solve_arrow(blocks: _ArrowBlocks, mu, diag):
    """Solve (A + mu * diag) delta = -grad exactly.

    Block-tridiagonal forward elimination over the frames carrying the shape
    cross blocks as extra right-hand sides, then a 10x10 Schur solve for the
    shape step. Raises LinAlgError if a damped block is not positive definite.
    """
    frames, p = blocks.dd.shape[0], blocks.dd.shape[1]
    nb = NUM_SHAPE_COEFFS
    diag_beta = diag[:nb]
    diag_f = diag[nb:].reshape(frames, p)
    idx = np.arange(p)

    # rhs carries [-grad_frame | E_t^T] with nb+1 extra columns for the Schur step
    rhs = np.empty((frames, p, nb + 1))
    rhs[:, :, 0] = -blocks.grad[nb:].reshape(frames, p)
    rhs[:, :, 1:] = np.swapaxes(blocks.be, 1, 2)

    if blocks.off.size == 0 or not blocks.off.any():
        # no smoothing coupling: the frame blocks solve independently in one
        # batched call
        damped = blocks.dd.copy()
        damped[:, idx, idx] += mu * diag_f
        try:
            sol = np.linalg.solve(damped, rhs)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(str(exc)) from None
    else:
        fwd = np.empty_like(rhs)
        gmat = np.empty((frames - 1, p, p))
        for t in range(frames):
            s = blocks.dd[t].copy()
            s[idx, idx] += mu * diag_f[t]
            b = rhs[t]
            if t > 0:
                off_t = blocks.off[t - 1].T
                s -= off_t @ gmat[t - 1]
                b = b - off_t @ fwd[t - 1]
            if t < frames - 1:
                combined = np.linalg.solve(s, np.concatenate([b, blocks.off[t]], axis=1))
                fwd[t] = combined[:, :nb + 1]
                gmat[t] = combined[:, nb + 1:]
            else:
                fwd[t] = np.linalg.solve(s, b)
        sol = np.empty_like(fwd)
        sol[frames - 1] = fwd[frames - 1]
        for t in range(frames - 2, -1, -1):
            sol[t] = fwd[t] - gmat[t] @ sol[t + 1]

    y = sol[:, :, 0]          # C^-1 (-grad_frames)
    w = sol[:, :, 1:]         # C^-1 E^T
    schur = blocks.bb + np.diag(mu * diag_beta) - np.einsum("tip,tpj->ij", blocks.be, w)
    rhs_beta = -blocks.grad[:nb] - np.einsum("tip,tp->i", blocks.be, y)
    d_beta = np.linalg.solve(schur, rhs_beta)
    d_frames = y - np.einsum("tpj,j->tp", w, d_beta)
    return np.concatenate([d_beta, d_frames.ravel()])


class _JointSystem:
    """Residual vector and normal-matrix blocks for the joint refinement.

    Masked-out keypoint rows are zeroed rather than dropped, which keeps every
    per-frame Jacobian the same shape and lets the whole assembly run as a few
    batched einsums over the frame axis.
    """

    def __init__(self, model, targets, masks, config):
        self.model = model
        # zero out masked entries: they never contribute, and 0 * NaN would
        # otherwise poison the masked-row products
        self.targets = np.where(masks[:, :, None], targets, 0.0)
        self.masks = masks
        self.config = config
        self.frames, self.keypoints = targets.shape[:2]
        self.p = 3 * model.joints + 3
        self.sq_data = math.sqrt(config.lambda_data)
        self.sq_smooth = math.sqrt(config.lambda_smooth)
        self.mask_rows = masks[:, :, None].astype(np.float64)  # (T, K, 1)
        self.eye_rows = np.tile(np.eye(3), (self.keypoints, 1))  # (3K, 3)

    def residuals(self, x):
        state = unpack_state(x, self.frames, self.model.joints)
        pos, rots, _, _ = _fk_batch(state.thetas, state.beta, self.model)
        pred = self.model.augment(pos) + state.trans[:, None, :]
        parts = [self.sq_data * (pred - self.targets)[self.masks].ravel()]
        if self.config.lambda_smooth > 0 and self.frames > 1:
            resid, _, _ = _smooth_residuals_and_jac(rots, state.thetas, need_jac=False)
            parts.append(self.sq_smooth * resid.ravel())
        if self.config.lambda_shape_reg > 0:
            parts.append(math.sqrt(self.config.lambda_shape_reg) * state.beta)
        return np.concatenate(parts)

    def blocks(self, x):
        cfg = self.config
        model = self.model
        joints = model.joints
        frames, p = self.frames, self.p
        nb = NUM_SHAPE_COEFFS
        state = unpack_state(x, frames, joints)
        thetas_flat = state.thetas.reshape(-1, 3)
        rots = rodrigues_batch(state.thetas)
        drots = _drodrigues_batch(thetas_flat).reshape(frames, joints, 3, 3, 3)
        pos, _, dpos_dtheta, dpos_dbeta = _fk_batch(
            state.thetas, state.beta, model, need_theta_jac=True, need_beta_jac=True,
            rots=rots, drots=drots)
        pred = model.augment(pos) + state.trans[:, None, :]

        lam_d = cfg.lambda_data
        diff = ((pred - self.targets) * self.mask_rows).reshape(frames, -1)  # (T, 3K)
        obj = lam_d * float((diff ** 2).sum())
        # full-width Jacobians with masked keypoint rows zeroed
        jac_b = (model.augment(dpos_dbeta)
                 * self.mask_rows[:, :, :, None]).reshape(frames, -1, nb)
        jac_f = np.empty((frames, 3 * self.keypoints, p))
        jac_f[:, :, :3 * joints] = (
            model.augment(dpos_dtheta)
            * self.mask_rows[:, :, :, None, None]).reshape(frames, -1, 3 * joints)
        jac_f[:, :, 3 * joints:] = self.eye_rows * self.mask_rows.repeat(3, axis=1)

        jac_b_t = jac_b.transpose(0, 2, 1)
        bb = lam_d * (jac_b_t @ jac_b).sum(axis=0)
        be = lam_d * (jac_b_t @ jac_f)
        dd = lam_d * (jac_f.transpose(0, 2, 1) @ jac_f)
        off = np.zeros((max(frames - 1, 0), p, p))
        grad = np.zeros(nb + frames * p)
        grad[:nb] = lam_d * np.einsum("tri,tr->i", jac_b, diff)
        grad_frames = lam_d * np.einsum("trp,tr->tp", jac_f, diff)

        if cfg.lambda_smooth > 0 and frames > 1:
            resid, dr_a, dr_b = _smooth_residuals_and_jac(rots, state.thetas, need_jac=True)
            lam_s = cfg.lambda_smooth
            obj += lam_s * float((resid ** 2).sum())
            # per joint 3x3 Gauss-Newton blocks at the theta_j positions
            aa = lam_s * np.einsum("tjik,tjil->tjkl", dr_a, dr_a)
            ab = lam_s * np.einsum("tjik,tjil->tjkl", dr_a, dr_b)
            bbk = lam_s * np.einsum("tjik,tjil->tjkl", dr_b, dr_b)
            for j in range(joints):
                sl = slice(3 * j, 3 * j + 3)
                dd[:-1, sl, sl] += aa[:, j]
                dd[1:, sl, sl] += bbk[:, j]
                off[:, sl, sl] += ab[:, j]
            ga = lam_s * np.einsum("tji,tjik->tjk", resid, dr_a).reshape(frames - 1, -1)
            gb = lam_s * np.einsum("tji,tjik->tjk", resid, dr_b).reshape(frames - 1, -1)
            grad_frames[:-1, :3 * joints] += ga
            grad_frames[1:, :3 * joints] += gb

        grad[nb:] = grad_frames.ravel()
        if cfg.lambda_shape_reg > 0:
            bb[np.arange(nb), np.arange(nb)] += cfg.lambda_shape_reg
            grad[:nb] += cfg.lambda_shape_reg * state.beta
            obj += cfg.lambda_shape_reg * float(state.beta @ state.beta)

        return obj, _ArrowBlocks(bb=bb, be=be, dd=dd, off=off, grad=grad)


def _lm_joint(system: _JointSystem, x0, max_iters, tol, mu_init):
    x = np.asarray(x0, dtype=np.float64).copy()
    obj, blocks = system.blocks(x)
    mu = mu_init
    nu = 2.0
    iterations = 0
    converged = False
    history = [obj]
    frames, p = system.frames, system.p
    nb = NUM_SHAPE_COEFFS
    while iterations < max_iters:
        if np.abs(blocks.grad).max() < 1e-12:
            converged = True
            break
        diag = np.concatenate(
            [np.diag(blocks.bb), blocks.dd[:, np.arange(p), np.arange(p)].ravel()])
        diag = np.maximum(diag, 1e-8 * max(diag.max(), 1e-12))
        gain = None
        while mu <= _MU_MAX:
            try:
                delta = _solve_arrow(blocks, mu, diag)
            except np.linalg.LinAlgError:
                mu *= nu
                nu *= 2
                continue
            r_try = system.residuals(x + delta)
            obj_try = float(r_try @ r_try)
            if obj_try <= obj:
                gain = obj - obj_try
                x = x + delta
                obj = obj_try
                mu = max(mu / 3.0, _MU_MIN)
                nu = 2.0
                break
            mu *= nu
            nu *= 2
        if gain is None:
            converged = True
            break
        iterations += 1
        history.append(obj)
        if gain < tol:
            converged = True
            break
        _, blocks = system.blocks(x)
    return x, obj, iterations, converged, history


# ---------------------------------------------------------------------------
# staged fit
# ---------------------------------------------------------------------------

def _kabsch_rotation(src, dst):
    """Best rotation mapping centered src onto centered dst (no scale)."""
    src_c = src - src.mean(axis=0)
    dst_c = dst - dst.mean(axis=0)
    cov = dst_c.T @ src_c
    u, _, vt = np.linalg.svd(cov)
    sign = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, sign]) @ vt


def _init_beta(targets, masks, model: _Model, reg=1e-8, iters=12):
    """Shape init from observed bone lengths.

    Rigid FK preserves bone lengths, so the per-bone target lengths pin the
    length-observable part of the shape directly; a tiny ridge term holds the
    unobservable remainder at zero. Small Gauss-Newton on 10 parameters.
    """
    joints = model.joints
    lengths = np.full(joints, np.nan)
    for child in range(1, joints):
        parent = model.parents_full[child]
        ok = masks[:, child] & masks[:, parent]
        if ok.any():
            lengths[child] = np.linalg.norm(
                targets[ok, child] - targets[ok, parent], axis=1).mean()
    bones = [c for c in range(1, joints) if np.isfinite(lengths[c])]
    beta = np.zeros(NUM_SHAPE_COEFFS)
    if not bones:
        return beta
    rest = model.rest[bones]
    blend = model.blend[bones]
    observed = lengths[bones]
    for _ in range(iters):
        d = rest + blend @ beta
        norms = np.linalg.norm(d, axis=1)
        if norms.min() <= 0:
            break
        resid = norms - observed
        jac = np.einsum("bc,bcm->bm", d / norms[:, None], blend)
        a = jac.T @ jac + reg * np.eye(NUM_SHAPE_COEFFS)
        try:
            beta = beta - np.linalg.solve(a, jac.T @ resid + reg * beta)
        except np.linalg.LinAlgError:
            break
    return beta if np.isfinite(beta).all() else np.zeros(NUM_SHAPE_COEFFS)


def _init_frame(target, mask, rest_aug, rest_root):
    """Root orientation via Kabsch on the rest pose, translation via centroids."""
    pts_t = target[mask]
    pts_r = rest_aug[mask]
    theta_root = np.zeros(3)
    if pts_t.shape[0] >= 3:
        rot = _kabsch_rotation(pts_r, pts_t)
        if np.isfinite(rot).all():
            theta_root = rotation_to_axis_angle(rot)
    rot = rodrigues_batch(theta_root[None])[0]
    trans = pts_t.mean(axis=0) - (rot @ (pts_r.mean(axis=0) - rest_root) + rest_root)
    return theta_root, trans


_TWIST_ANCHOR = 1e-3  # ties data-null pose directions to the warm start


def _frame_fun(beta, model, target, mask, lam_sqrt, theta_anchor):
    """Per-frame residuals: data term plus a tiny proximal pose anchor.

    The anchor pins the keypoint-invisible twist directions to the previous
    frame's solution (the warm start), so consecutive frames arrive at the
    joint stage already twist-aligned; its weight is far below the data term
    and shifts keypoints by well under a micrometer.
    """
    joints = model.joints
    n_masked = int(mask.sum())
    eye_rows = np.tile(np.eye(3), (n_masked, 1))
    sq_anchor = math.sqrt(_TWIST_ANCHOR)
    anchor_jac = np.hstack([sq_anchor * np.eye(3 * joints), np.zeros((3 * joints, 3))])

    def fun(q, need_jac):
        theta = q[:3 * joints].reshape(1, joints, 3)
        trans = q[3 * joints:]
        pos, _, dpos, _ = _fk_batch(theta, beta, model, need_theta_jac=need_jac)
        pred = model.augment(pos)[0] + trans
        resid = np.concatenate([
            lam_sqrt * (pred[mask] - target[mask]).ravel(),
            sq_anchor * (q[:3 * joints] - theta_anchor),
        ])
        if not need_jac:
            return resid, None
        jac_theta = model.augment(dpos)[0][mask].reshape(-1, 3 * joints)
        jac = np.vstack([lam_sqrt * np.hstack([jac_theta, eye_rows]), anchor_jac])
        return resid, jac

    return fun


def fit_sequence(seq, tree: KinematicTree, config: FitConfig | None = None) -> FitResult:
    """Annotate one sequence: minimize the staged objective over (beta, theta_t, t_t).

    Args:
        seq: SequenceData, or a (targets (T, K, 3), masks (T, K)) pair.
        tree: the kinematic tree to fit.
        config: fit weights and optimizer caps; defaults to FitConfig().

    Returns:
        FitResult with one unified shape, per-frame pose and translation, and
        per-frame keypoint residual RMS in meters. Non-convergence is reported
        through the flag; the best iterate is always returned.
    """
    config = config or FitConfig()
    targets, masks = _targets_and_masks(seq)
    if targets.ndim != 3 or targets.shape[0] < 1:
        raise ValueError("need at least one frame of (T, K, 3) keypoints")
    counts = masks.sum(axis=1)
    if counts.min() < 4:
        raise ValueError(f"every frame needs >= 4 usable joints (worst has {counts.min()})")
    model = _Model(tree, targets.shape[1])
    frames, joints = targets.shape[0], model.joints

    start = time.perf_counter()
    # shape init from observed bone lengths; the per-frame stage then fits
    # poses against near-correct bones instead of bending them to compensate
    beta = _init_beta(targets, masks, model)
    thetas = np.zeros((frames, joints, 3))
    trans = np.zeros((frames, 3))

    rest, _, _, _ = _fk_batch(np.zeros((1, joints, 3)), beta, model)
    rest_aug = model.aug @ rest[0]
    iterations = 0
    lam_sqrt = math.sqrt(config.lambda_data) if config.lambda_data > 0 else 1.0

    if config.schedule == "staged":
        prev = None
        for t in range(frames):
            if prev is None:
                theta_root, tr = _init_frame(targets[t], masks[t], rest_aug, rest[0, 0])
                q0 = np.zeros(3 * joints + 3)
                q0[:3] = theta_root
                q0[3 * joints:] = tr
            else:
                q0 = prev.copy()
            fun = _frame_fun(beta, model, targets[t], masks[t], lam_sqrt,
                             q0[:3 * joints].copy())
            q, _, its, _, _ = _lm_dense(
                fun, q0, config.max_frame_iters, config.tol, config.mu_init)
            iterations += its
            thetas[t] = q[:3 * joints].reshape(joints, 3)
            trans[t] = q[3 * joints:]
            prev = q
    else:
        for t in range(frames):
            theta_root, tr = _init_frame(targets[t], masks[t], rest_aug, rest[0, 0])
            thetas[t, 0] = theta_root
            trans[t] = tr

    system = _JointSystem(model, targets, masks, config)
    x0 = pack_state(FitState(beta=beta, thetas=thetas, trans=trans))
    x, _, joint_its, converged, history = _lm_joint(
        system, x0, config.max_joint_iters, config.tol, config.mu_init)
    iterations += joint_its
    final = unpack_state(x, frames, joints)

    pos, _, _, _ = _fk_batch(final.thetas, final.beta, model)
    pred = model.augment(pos) + final.trans[:, None, :]
    frame_rms = np.empty(frames)
    for t in range(frames):
        mask = masks[t]
        err = np.linalg.norm(pred[t][mask] - targets[t][mask], axis=1)
        frame_rms[t] = math.sqrt(float((err ** 2).mean()))

    elapsed = time.perf_counter() - start
    sequence_id = "" if isinstance(seq, tuple) else seq.spec.sequence_id
    return FitResult(
        sequence_id=sequence_id,
        beta=final.beta,
        thetas=final.thetas,
        trans=final.trans,
        frame_rms=frame_rms,
        iterations=iterations,
        converged=converged,
        seconds_per_frame=elapsed / frames,
        objective_history=history,
    )


def predicted_keypoints(result: FitResult, tree: KinematicTree,
                        augmented: bool = True) -> np.ndarray:
    """Keypoints implied by a fit: FK of the fitted parameters per frame."""
    model = _Model(tree, tree.joint_count + (2 if augmented else 0))
    pos, _, _, _ = _fk_batch(result.thetas, result.beta, model)
    return model.augment(pos) + result.trans[:, None, :]


# ---------------------------------------------------------------------------
# annotation file
# ---------------------------------------------------------------------------

def save_fit_result(result: FitResult, path: str | Path,
                    config: FitConfig | None = None) -> None:
    """Annotation file: shape, per-frame pose/translation, residuals,
    convergence metadata and a config echo. Deliberately excludes wall time so
    identical reruns produce identical bytes."""
    doc = {
        "format": ANNOTATION_FORMAT,
        "version": 1,
        "sequence_id": result.sequence_id,
        "beta": result.beta.tolist(),
        "thetas": result.thetas.tolist(),
        "trans": result.trans.tolist(),
        "frame_rms_m": result.frame_rms.tolist(),
        "iterations": result.iterations,
        "converged": result.converged,
        "config": (config or FitConfig()).to_dict(),
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_fit_result(path: str | Path) -> FitResult:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != ANNOTATION_FORMAT:
        raise ValueError(f"{path}: not a {ANNOTATION_FORMAT} file")
    return FitResult(
        sequence_id=doc["sequence_id"],
        beta=np.array(doc["beta"], dtype=np.float64),
        thetas=np.array(doc["thetas"], dtype=np.float64),
        trans=np.array(doc["trans"], dtype=np.float64),
        frame_rms=np.array(doc["frame_rms_m"], dtype=np.float64),
        iterations=int(doc["iterations"]),
        converged=bool(doc["converged"]),
        seconds_per_frame=0.0,
    )
