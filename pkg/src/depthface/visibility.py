"""Ray correspondence, visibility classification, and the registration score.

Each model vertex defines a ray through its projection into the current frame.
Along that ray the model predicts a 1-d Gaussian over the signed distance
between the observed surface point and the warped vertex (measured along the
observed surface normal): mean from the warped vertex, variance from sensor
noise plus the projected per-vertex shape covariance. Rays are classified
visible or occluded by comparing the predicted mean against the predicted
spread, and the frame score sums per-ray KL divergences:

* visible ray: KL between the predicted Gaussian and the sensor noise model
  centred on the surface, rewarding rays that match the observed depth,
* occluded ray: KL between the predicted Gaussian and a uniform density over
  the sensor's depth range, a constant-rate penalty that lets the pose slide
  model points behind nearer structure without fighting it.

Rays whose projection lands outside the frame or on missing depth are
excluded and contribute nothing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    backproject,
    bilinear_depth,
    project_masked,
    rotation_jacobian,
    rotation_matrix,
)

VISIBLE = 1
OCCLUDED = 0
EXCLUDED = -1


@dataclass(frozen=True)
class RvsParams:
    """Score parameters: sensor noise variance and the occlusion density."""

    sigma_o_sq: float = 25.0
    occlusion_range_mm: tuple = (0.0, 2500.0)
    u_o: float | None = None

    def __post_init__(self):
        lo, hi = self.occlusion_range_mm
        if hi <= lo:
            raise ValueError("occlusion range must be increasing")
        if self.u_o is None:
            object.__setattr__(self, "u_o", 1.0 / (hi - lo))
        if self.sigma_o_sq <= 0.0 or self.u_o <= 0.0:
            raise ValueError("sigma_o_sq and u_o must be positive")


@dataclass
class RayCorrespondences:
    """Per-vertex surface lookups: observed point, normal, and match flag.

    Rows where ``matched`` is False carry zeros and take no part in scoring.
    """

    points: np.ndarray  # (N, 3)
    normals: np.ndarray  # (N, 3)
    matched: np.ndarray  # (N,) bool

    def __len__(self):
        return self.points.shape[0]


def correspond(dist, pose, field):
    """Look up the observed surface under each warped model vertex.

    The vertex is warped by ``pose``, projected into the frame, and the depth
    under the projection is sampled bilinearly (all four neighbours must be
    valid); the surface normal comes from the nearest pixel of the precomputed
    normal field. Vertices that project behind the camera, outside the frame,
    onto missing depth, or onto pixels without a normal are unmatched.
    """
    from .geometry import transform

    q = transform(pose, dist.mu)
    uv, in_front = project_masked(q, field.intrinsics)
    u, v = uv[:, 0], uv[:, 1]
    d, has_depth = bilinear_depth(field.frame.depth, u, v)
    h, w = field.frame.depth.shape
    ui = np.clip(np.round(u).astype(np.int64), 0, w - 1)
    vi = np.clip(np.round(v).astype(np.int64), 0, h - 1)
    matched = in_front & has_depth & field.normal_valid[vi, ui]

    n = dist.mu.shape[0]
    points = np.zeros((n, 3))
    normals = np.zeros((n, 3))
    if matched.any():
        sel = np.nonzero(matched)[0]
        points[sel] = backproject(uv[sel], d[sel], field.intrinsics)
        normals[sel] = field.normals[vi[sel], ui[sel]]
    return RayCorrespondences(points, normals, matched)


def signed_distance(q, points, normals):
    """Signed distance of warped vertices q to the surface, along its normal.

    Negative values mean the vertex sits in front of the observed surface
    (between surface and camera), since normals point away from the camera.
    """
    q = np.asarray(q, dtype=np.float64)
    return np.einsum("...i,...i->...", normals, q - points)


def projected_distribution(pose, dist, rays, params):
    """Per-ray Gaussian over signed distance: mean and variance arrays.

    Unmatched rays get mean 0 and variance ``sigma_o_sq`` as placeholders;
    callers must gate on ``rays.matched``.
    """
    from .geometry import transform

    q = transform(pose, dist.mu)
    m = signed_distance(q, rays.points, rays.normals)
    R = rotation_matrix(pose.omega)
    v = rays.normals @ R  # row-wise R^T n
    quad = np.einsum("ni,nij,nj->n", v, dist.blocks, v, optimize=True)
    s2 = params.sigma_o_sq + np.exp(2.0 * pose.alpha) * quad
    m = np.where(rays.matched, m, 0.0)
    s2 = np.where(rays.matched, s2, params.sigma_o_sq)
    return m, s2


def labels_from_moments(m, s2, matched):
    """Visibility rule: a ray is visible when its mean does not exceed one
    predicted standard deviation behind the surface."""
    labels = np.full(m.shape, EXCLUDED, dtype=np.int8)
    vis = m <= np.sqrt(s2)
    labels[matched] = np.where(vis[matched], VISIBLE, OCCLUDED)
    return labels


def classify_visibility(pose, dist, rays, params):
    """Label every ray VISIBLE, OCCLUDED, or EXCLUDED at the given pose."""
    m, s2 = projected_distribution(pose, dist, rays, params)
    return labels_from_moments(m, s2, rays.matched)


def kl_visible(m, s2, params):
    """KL(N(m, s2) || N(0, sigma_o_sq)), elementwise."""
    so2 = params.sigma_o_sq
    return 0.5 * (np.log(so2 / s2) + (s2 + m**2) / so2 - 1.0)


def kl_occluded(s2, params):
    """KL(N(m, s2) || uniform occluder density), elementwise; mean-free."""
    return -np.log(params.u_o) - 0.5 * np.log(2.0 * np.pi * np.e * s2)


def rvs_score(pose, dist, rays, params, labels=None):
    """Sum of per-ray KL scores at ``pose``; classifies rays unless given."""
    m, s2 = projected_distribution(pose, dist, rays, params)
    if labels is None:
        labels = labels_from_moments(m, s2, rays.matched)
    vis = labels == VISIBLE
    occ = labels == OCCLUDED
    total = 0.0
    if vis.any():
        total += float(kl_visible(m[vis], s2[vis], params).sum())
    if occ.any():
        total += float(kl_occluded(s2[occ], params).sum())
    return total


def rvs_terms(pose, dist, rays, params, labels=None):
    """Per-ray score contributions (0 for excluded rays), for diagnostics."""
    m, s2 = projected_distribution(pose, dist, rays, params)
    if labels is None:
        labels = labels_from_moments(m, s2, rays.matched)
    out = np.zeros(m.shape)
    vis = labels == VISIBLE
    occ = labels == OCCLUDED
    out[vis] = kl_visible(m[vis], s2[vis], params)
    out[occ] = kl_occluded(s2[occ], params)
    return out


def rvs_value_grad(
    delta,
    base_points,
    base_blocks,
    rays,
    labels,
    params,
    with_curvature=False,
):
    """Score, gradient, and optional PSD curvature of the frozen-label score.

    ``delta`` is a Pose applied on top of already-warped base geometry:
    q = exp(alpha) R(omega) g + t with g = base_points and base_blocks the
    already-rotated per-vertex covariances. With base geometry at the raw
    model distribution and labels fixed, this computes the score surface a
    single inner optimization step sees; gradients are with respect to
    delta's 7 parameters (omega, t, alpha).

    Returns (value, grad[7]) or (value, grad[7], curvature[7, 7]).
    """
    so2 = params.sigma_o_sq
    R = rotation_matrix(delta.omega)
    J = rotation_jacobian(delta.omega)
    scale = np.exp(delta.alpha)

    act = labels != EXCLUDED
    g = base_points[act]
    n = rays.normals[act]
    p = rays.points[act]
    blocks = base_blocks[act]
    lab = labels[act]

    rg = g @ R.T
    q = scale * rg + delta.t
    m = np.einsum("ni,ni->n", n, q - p)
    v = n @ R  # R^T n
    quad = np.einsum("ni,nij,nj->n", v, blocks, v, optimize=True)
    s2 = so2 + scale**2 * quad

    vis = lab == VISIBLE
    occ = ~vis
    value = 0.0
    if vis.any():
        value += float(kl_visible(m[vis], s2[vis], params).sum())
    if occ.any():
        value += float(kl_occluded(s2[occ], params).sum())

    # d m / d theta
    dm = np.empty((g.shape[0], 7))
    dm[:, 0:3] = scale * np.einsum("jab,nb,na->nj", J, g, n, optimize=True)
    dm[:, 3:6] = n
    dm[:, 6] = np.einsum("ni,ni->n", n, q - delta.t)
    # d s2 / d theta
    u = np.einsum("nij,nj->ni", blocks, v)  # Sigma R^T n
    ds2 = np.zeros((g.shape[0], 7))
    ds2[:, 0:3] = 2.0 * scale**2 * np.einsum("jab,nb,na->nj", J, u, n, optimize=True)
    ds2[:, 6] = 2.0 * (s2 - so2)

    cm = np.where(vis, m / so2, 0.0)
    cs = np.where(vis, 0.5 * (1.0 / so2 - 1.0 / s2), -0.5 / s2)
    grad = dm.T @ cm + ds2.T @ cs
    if not with_curvature:
        return value, grad

    # Positive-definite curvature from per-ray second derivatives that are
    # exact and positive in (m, s2): 1/so2 for visible means, 1/(2 s2^2) for
    # the variance channel of both branches.
    wm = np.where(vis, 1.0 / so2, 0.0)
    ws = 0.5 / s2**2
    H = (dm * wm[:, None]).T @ dm + (ds2 * ws[:, None]).T @ ds2
    return value, grad, H


def rvs_gradient(pose, dist, rays, params, labels=None):
    """Analytic gradient of rvs_score w.r.t. pose's (omega, t, alpha).

    Labels are classified at ``pose`` and held fixed, matching the score's
    piecewise-smooth branch at that pose.
    """
    if labels is None:
        labels = classify_visibility(pose, dist, rays, params)
    _, grad = rvs_value_grad(
        pose, dist.mu, dist.blocks, rays, labels, params, with_curvature=False
    )
    return grad
