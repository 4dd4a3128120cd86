"""Per-frame rigid head pose tracking over depth frames.

Each frame minimizes a sum of three terms: the visibility-aware alignment
score of the face distribution against the observed surface, a pixel-flow
temporal term tying the incremental motion to the previous frame, and a
scale-drift penalty whose precision accumulates while the same person stays
in front of the camera. The minimizer alternates visibility classification
with damped Gauss-Newton steps; a particle swarm search kicks in when the
result looks like a bad local minimum.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import cv2
import numpy as np

from .geometry import (
    DepthFrame,
    Pose,
    Rect,
    SurfaceField,
    backproject,
    compose,
    project_masked,
    bilinear_depth_gradient,
    rotation_jacobian,
    rotation_matrix,
    rotation_vector,
    transform,
)
from .visibility import (
    VISIBLE,
    classify_visibility,
    correspond,
    rvs_score,
    rvs_value_grad,
)

# average head height and head-shoulder width used by the localizer, mm
HEAD_HEIGHT_MM = 240.0
HEAD_WIDTH_MM = 320.0
SHOULDER_HEIGHT_MM = 100.0

# a pose candidate explaining fewer rays than this is under-constrained
MIN_MATCHED_RAYS = 50


class LocalizationError(RuntimeError):
    """No convincing head-shoulder response in the frame."""


class TrackingLostError(RuntimeError):
    """Pose estimate diverged beyond recovery; caller should re-localize."""


@dataclass
class TrackerState:
    """Everything one frame hands to the next."""

    pose: Pose
    visible_pixels: np.ndarray  # (M, 2) float (u, v) on the previous frame
    lambda_s: float = 0.0
    prev_frame: DepthFrame | None = None
    frame_index: int = 0

    @staticmethod
    def initial(pose):
        return TrackerState(pose, np.zeros((0, 2)), 0.0, None, 0)


# ---------------------------------------------------------------------------
# Localization


def _head_shoulder_template(scale_px_per_mm):
    """Binary silhouette: head ellipse over a shoulder slab, float32."""
    tw = max(int(round(HEAD_WIDTH_MM * scale_px_per_mm)), 8)
    th = max(int(round((HEAD_HEIGHT_MM + SHOULDER_HEIGHT_MM) * scale_px_per_mm)), 8)
    head_h = int(round(th * HEAD_HEIGHT_MM / (HEAD_HEIGHT_MM + SHOULDER_HEIGHT_MM)))
    head_w = tw // 2  # head is about half the shoulder span
    out = np.zeros((th, tw), dtype=np.float32)
    cy, cx = head_h / 2.0, tw / 2.0
    vv, uu = np.mgrid[0:th, 0:tw] + 0.5
    ellipse = ((uu - cx) / (head_w / 2.0)) ** 2 + ((vv - cy) / (head_h / 2.0)) ** 2
    out[ellipse <= 1.0] = 1.0
    out[head_h:, :] = 1.0
    return out, (cx, cy)


def localize_face(frame, intrinsics, floor=0.2):
    """Find the head in a single frame from depth validity alone.

    A head-shoulder silhouette, resized to the pixel size implied by each
    candidate depth, is correlated against the valid-depth mask; the best
    response gives the head-center pixel. Returns a depth-adaptive face ROI
    and the seed pose (no rotation, translation at the backprojected center).
    """
    valid = frame.valid_mask()
    if valid.sum() < 64:
        raise LocalizationError("not enough valid depth to search")
    mask = valid.astype(np.float32)
    depths = np.percentile(frame.depth[valid], [20.0, 50.0, 80.0])
    candidates = sorted(set(float(np.round(d / 50.0) * 50.0) for d in depths))

    best = None
    for d in candidates:
        if d <= 0.0:
            continue
        templ, (cx, cy) = _head_shoulder_template(intrinsics.f / d)
        if templ.shape[0] >= mask.shape[0] or templ.shape[1] >= mask.shape[1]:
            continue
        res = cv2.matchTemplate(mask, templ, cv2.TM_CCOEFF_NORMED)
        _, score, _, loc = cv2.minMaxLoc(res)
        if best is None or score > best[0]:
            best = (score, (loc[0] + cx, loc[1] + cy), d)
    if best is None or best[0] < floor:
        raise LocalizationError("no head-shoulder correlation above the floor")

    _, (cu, cv_), d_hint = best
    ci, cj = int(round(cv_)), int(round(cu))
    h, w = frame.depth.shape
    patch = frame.depth[
        max(ci - 3, 0) : min(ci + 4, h), max(cj - 3, 0) : min(cj + 4, w)
    ]
    patch = patch[patch > 0.0]
    d_c = float(np.median(patch)) if patch.size else d_hint

    roi_w = int(round(intrinsics.f * HEAD_WIDTH_MM / d_c))
    roi_h = int(round(intrinsics.f * HEAD_HEIGHT_MM / d_c))
    roi = Rect(
        int(round(cu - roi_w / 2.0)), int(round(cv_ - roi_h / 2.0)), roi_w, roi_h
    ).clipped(w, h)
    pose = Pose(np.zeros(3), backproject(np.array([cu, cv_]), d_c, intrinsics), 0.0)
    return roi, pose


def initial_state(frame, dist, intrinsics):
    """Tracker state for frame one: localize, then recess the seed to the
    model origin (localization lands on the face surface; the model origin
    sits at the head center, one front-depth behind it)."""
    roi, pose = localize_face(frame, intrinsics)
    offset = -float(dist.mu[:, 2].min())
    seed = Pose(pose.omega, pose.t + np.array([0.0, 0.0, offset]), 0.0)
    return TrackerState.initial(seed), roi


def face_roi(pose, intrinsics, frame, margin=1.4):
    """Depth-adaptive face rectangle around the current pose's center."""
    z = float(pose.t[2])
    if z <= 0.0:
        raise TrackingLostError("pose center is behind the camera")
    (uv,), ok = project_masked(pose.t[None, :], intrinsics)
    if not ok.all():
        raise TrackingLostError("pose center projects behind the camera")
    w = intrinsics.f * HEAD_WIDTH_MM / z * margin
    h = intrinsics.f * HEAD_HEIGHT_MM / z * margin
    return Rect(
        int(round(uv[0] - w / 2.0)), int(round(uv[1] - h / 2.0)),
        int(round(w)), int(round(h)),
    ).clipped(frame.width, frame.height)


# ---------------------------------------------------------------------------
# Objective terms


@dataclass
class TemporalTerm:
    """Pixel-flow consistency between the previous frame and this one.

    Previous-frame face pixels are lifted to 3D and expressed in the model
    frame of the previous pose, so that evaluating at an absolute pose theta
    applies exactly the incremental motion T(theta) o T(prev)^-1 to them.
    """

    base: np.ndarray  # (M, 3) lifted pixels, previous pose factored out
    sigma_t_sq: float
    frame: DepthFrame  # current frame
    intrinsics: object

    @staticmethod
    def build(state, frame, intrinsics, sigma_t_sq):
        px = np.asarray(state.visible_pixels, dtype=np.float64)
        if px.shape[0] == 0 or state.prev_frame is None:
            return None
        u = px[:, 0].round().astype(np.int64)
        v = px[:, 1].round().astype(np.int64)
        d = state.prev_frame.depth[v, u]
        ok = d > 0.0
        if not ok.any():
            return None
        pts = backproject(px[ok], d[ok], intrinsics)
        R_prev = rotation_matrix(state.pose.omega)
        base = np.exp(-state.pose.alpha) * ((pts - state.pose.t) @ R_prev)
        return TemporalTerm(base, sigma_t_sq, frame, intrinsics)

    def _residuals(self, pose):
        R = rotation_matrix(pose.omega)
        s = np.exp(pose.alpha)
        Y = s * (self.base @ R.T) + pose.t
        uv, in_front = project_masked(Y, self.intrinsics)
        d, du, dv, ok = bilinear_depth_gradient(
            self.frame.depth, uv[:, 0], uv[:, 1]
        )
        ok = ok & in_front
        r = np.where(ok, d - Y[:, 2], 0.0)
        return Y, r, du, dv, ok

    def value(self, pose):
        _, r, _, _, ok = self._residuals(pose)
        return float(0.5 * (r[ok] ** 2).sum() / self.sigma_t_sq)

    def value_grad_curv(self, pose):
        Y, r, du, dv, ok = self._residuals(pose)
        Y, r, du, dv = Y[ok], r[ok], du[ok], dv[ok]
        base = self.base[ok]
        if r.size == 0:
            return 0.0, np.zeros(7), np.zeros((7, 7))
        f = self.intrinsics.f
        s = np.exp(pose.alpha)
        J = rotation_jacobian(pose.omega)
        z = Y[:, 2]
        # d residual / d Y: the sampled depth moves with the projection,
        # the transformed z-coordinate moves with Y directly
        drdY = np.stack(
            [
                du * f / z,
                dv * f / z,
                -(du * Y[:, 0] + dv * Y[:, 1]) * f / z**2 - 1.0,
            ],
            axis=-1,
        )
        dY_rot = s * np.einsum("jab,nb->nja", J, base, optimize=True)  # (M,3,3)
        dr = np.empty((r.size, 7))
        dr[:, 0:3] = np.einsum("nja,na->nj", dY_rot, drdY, optimize=True)
        dr[:, 3:6] = drdY
        dr[:, 6] = np.einsum("na,na->n", Y - pose.t, drdY, optimize=True)
        value = float(0.5 * (r**2).sum() / self.sigma_t_sq)
        grad = dr.T @ r / self.sigma_t_sq
        curv = dr.T @ dr / self.sigma_t_sq
        return value, grad, curv


def temporal_cost(delta, state, frame, intrinsics, config):
    """Flow-consistency cost of an incremental pose; 0 with no prior pixels."""
    term = TemporalTerm.build(state, frame, intrinsics, config.sigma_t_sq)
    if term is None:
        return 0.0
    return term.value(compose(delta, state.pose))


def scale_cost(delta_alpha, lambda_s):
    """Accumulated-precision penalty on log-scale drift."""
    return 0.5 * lambda_s * float(delta_alpha) ** 2


@dataclass
class FrameObjective:
    """The full per-frame cost with frozen correspondences and labels."""

    dist: object
    rays: object
    labels: np.ndarray
    params: object
    temporal: TemporalTerm | None = None
    lambda_s: float = 0.0
    alpha_prev: float = 0.0

    def value(self, pose):
        total = rvs_score(pose, self.dist, self.rays, self.params, labels=self.labels)
        if self.temporal is not None:
            total += self.temporal.value(pose)
        total += scale_cost(pose.alpha - self.alpha_prev, self.lambda_s)
        return total

    def value_grad_curv(self, pose):
        value, grad, curv = rvs_value_grad(
            pose,
            self.dist.mu,
            self.dist.blocks,
            self.rays,
            self.labels,
            self.params,
            with_curvature=True,
        )
        grad = grad.copy()
        curv = curv.copy()
        if self.temporal is not None:
            tv, tg, tc = self.temporal.value_grad_curv(pose)
            value += tv
            grad += tg
            curv += tc
        da = pose.alpha - self.alpha_prev
        value += scale_cost(da, self.lambda_s)
        grad[6] += self.lambda_s * da
        curv[6, 6] += self.lambda_s
        return value, grad, curv


# ---------------------------------------------------------------------------
# Inner minimization


def minimize_pose(
    pose, dist, field_, params, config, temporal=None, lambda_s=0.0, alpha_prev=0.0
):
    """Alternate visibility classification with damped Gauss-Newton steps.

    Returns (pose, rays, labels, accepted) where accepted lists the frozen
    objective value before and after each accepted step.
    """
    accepted = []
    rays = correspond(dist, pose, field_)
    labels = classify_visibility(pose, dist, rays, params)
    lam = 1e-3
    for _ in range(config.max_inner_iters):
        obj = FrameObjective(
            dist, rays, labels, params, temporal, lambda_s, alpha_prev
        )
        value, grad, curv = obj.value_grad_curv(pose)
        step = None
        for _retry in range(10):
            damped = curv + lam * np.diag(np.maximum(np.diag(curv), 1e-12))
            damped.flat[:: damped.shape[0] + 1] += 1e-12
            try:
                delta = np.linalg.solve(damped, -grad)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            candidate = Pose.from_vector(pose.as_vector() + delta)
            new_value = obj.value(candidate)
            predicted = -(grad @ delta + 0.5 * delta @ curv @ delta)
            actual = value - new_value
            if actual > 0.0 and predicted > 0.0:
                ratio = actual / predicted
                lam = lam * 0.33 if ratio > 0.75 else lam
                pose = candidate
                accepted.append((value, new_value))
                step = delta
                break
            lam = min(lam * 4.0, 1e10)
        if step is None:
            break
        rays = correspond(dist, pose, field_)
        labels = classify_visibility(pose, dist, rays, params)
        if np.linalg.norm(step) < config.step_tol:
            break
    return pose, rays, labels, accepted


# ---------------------------------------------------------------------------
# Failure handling


def occluded_fraction(labels):
    """Occluded share of the rays that found a surface at all."""
    labels = np.asarray(labels)
    matched = labels != -1
    n = int(matched.sum())
    if n == 0:
        return 1.0
    return float((labels[matched] == 0).sum() / n)


def detect_failure(delta, labels, config):
    """Bad-minimum test: implausible jump or a mostly-occluded face region."""
    if float(np.linalg.norm(delta.omega)) > config.rot_fail_rad:
        return True
    if float(np.linalg.norm(delta.t)) > config.trans_fail_mm:
        return True
    return occluded_fraction(labels) > config.occlusion_fail_frac


def relative_pose(pose, previous):
    """Pose delta with geodesic rotation: T(delta) o T(previous) = T(pose)."""
    R = rotation_matrix(pose.omega) @ rotation_matrix(previous.omega).T
    return Pose(
        rotation_vector(R), pose.t - previous.t, pose.alpha - previous.alpha
    )


def apply_delta(seed, d_omega, d_t):
    """Compose a rotation/translation offset onto a seed pose; alpha kept."""
    R = rotation_matrix(np.asarray(d_omega)) @ rotation_matrix(seed.omega)
    return Pose(rotation_vector(R), seed.t + np.asarray(d_t), seed.alpha)


def pso_refine(objective, seed, config, rng=None):
    """Particle swarm over rotation/translation offsets around a seed pose.

    The swarm searches a box of +-rot_range_deg per axis and +-trans_range_mm,
    with the scale frozen. The seed itself is particle zero, so the result
    never scores worse than the seed.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    span = np.concatenate(
        [
            np.full(3, np.radians(config.rot_range_deg)),
            np.full(3, config.trans_range_mm),
        ]
    )
    n = config.n_particles
    x = rng.uniform(-span, span, size=(n, 6))
    x[0] = 0.0
    v = np.zeros((n, 6))

    def score(delta):
        return objective(apply_delta(seed, delta[:3], delta[3:]))

    p_best = x.copy()
    p_val = np.array([score(xi) for xi in x])
    g_idx = int(np.argmin(p_val))
    g_best, g_val = p_best[g_idx].copy(), float(p_val[g_idx])

    for _ in range(config.n_iters):
        for i in range(n):
            r1, r2 = rng.random(6), rng.random(6)
            v[i] = (
                config.inertia * v[i]
                + config.cognitive * r1 * (p_best[i] - x[i])
                + config.social * r2 * (g_best - x[i])
            )
            np.clip(v[i], -span, span, out=v[i])
            x[i] = np.clip(x[i] + v[i], -span, span)
            val = score(x[i])
            if val < p_val[i]:
                p_val[i], p_best[i] = val, x[i].copy()
                if val < g_val:
                    g_val, g_best = float(val), x[i].copy()
    if not g_best.any():
        return seed
    return apply_delta(seed, g_best[:3], g_best[3:])


# ---------------------------------------------------------------------------
# Frame driver


def reproject_visible_pixels(pose, dist, labels, frame, intrinsics):
    """Pixels of the visible vertices at a pose, deduplicated on the grid."""
    vis = np.asarray(labels) == VISIBLE
    if not vis.any():
        return np.zeros((0, 2))
    q = transform(pose, dist.mu[vis])
    uv, ok = project_masked(q, intrinsics)
    px = np.round(uv[ok]).astype(np.int64)
    h, w = frame.depth.shape
    inside = (px[:, 0] >= 0) & (px[:, 0] < w) & (px[:, 1] >= 0) & (px[:, 1] < h)
    px = px[inside]
    px = px[frame.depth[px[:, 1], px[:, 0]] > 0.0]
    if px.shape[0] == 0:
        return np.zeros((0, 2))
    return np.unique(px, axis=0).astype(np.float64)


def track_frame(state, frame, dist, intrinsics, config, field_=None, rng=None):
    """Estimate the pose for one frame and roll the tracker state forward.

    Returns (pose, labels, new_state). Raises TrackingLostError when the
    estimate fails the plausibility checks even after swarm refinement.
    """
    if field_ is None:
        field_ = SurfaceField.compute(
            frame, intrinsics, roi=face_roi(state.pose, intrinsics, frame)
        )
    params = config.rvs
    temporal = (
        TemporalTerm.build(state, frame, intrinsics, config.sigma_t_sq)
        if config.use_temporal
        else None
    )
    lambda_s = state.lambda_s
    alpha_prev = state.pose.alpha
    first = state.prev_frame is None

    pose, rays, labels, _ = minimize_pose(
        state.pose, dist, field_, params, config,
        temporal=temporal, lambda_s=lambda_s, alpha_prev=alpha_prev,
    )

    delta = Pose.identity() if first else relative_pose(pose, state.pose)
    if detect_failure(delta, labels, config):
        if not config.use_pso:
            raise TrackingLostError("implausible pose and swarm refinement disabled")

        def full_cost(candidate):
            cand_rays = correspond(dist, candidate, field_)
            cand_labels = classify_visibility(candidate, dist, cand_rays, params)
            if int((cand_labels != -1).sum()) < MIN_MATCHED_RAYS:
                return np.inf
            total = rvs_score(candidate, dist, cand_rays, params, labels=cand_labels)
            if temporal is not None:
                total += temporal.value(candidate)
            total += scale_cost(candidate.alpha - alpha_prev, lambda_s)
            return total

        refined = pso_refine(full_cost, state.pose, config.pso, rng=rng)
        pose, rays, labels, _ = minimize_pose(
            refined, dist, field_, params, config,
            temporal=temporal, lambda_s=lambda_s, alpha_prev=alpha_prev,
        )
        delta = Pose.identity() if first else relative_pose(pose, state.pose)
        if detect_failure(delta, labels, config):
            raise TrackingLostError("pose implausible after swarm refinement")

    pixels = reproject_visible_pixels(pose, dist, labels, frame, intrinsics)
    new_state = TrackerState(
        pose=pose,
        visible_pixels=pixels,
        lambda_s=state.lambda_s + 1.0 / config.sigma_s_sq,
        prev_frame=frame,
        frame_index=state.frame_index + 1,
    )
    return pose, labels, new_state
