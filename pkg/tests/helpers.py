"""Shared test utilities: independent oracles kept deliberately separate from
the library code paths they check."""

import numpy as np

from depthface.geometry import (
    CameraIntrinsics,
    Pose,
    bilinear_depth,
    rotation_matrix,
    transform,
)


def similarity_matrix(pose):
    """4x4 homogeneous matrix oracle for Pose, built directly from R, t, alpha."""
    M = np.eye(4)
    M[:3, :3] = np.exp(pose.alpha) * rotation_matrix(pose.omega)
    M[:3, 3] = pose.t
    return M


def apply_homogeneous(M, pts):
    pts = np.atleast_2d(pts)
    out = pts @ M[:3, :3].T + M[:3, 3]
    return out


def numerical_gradient(fun, x0, eps=1e-6):
    """Central finite differences of a scalar function of a vector."""
    x0 = np.asarray(x0, dtype=np.float64)
    g = np.zeros_like(x0)
    for i in range(x0.size):
        dx = np.zeros_like(x0)
        dx[i] = eps
        g[i] = (fun(x0 + dx) - fun(x0 - dx)) / (2.0 * eps)
    return g


def icp_point_to_plane(model_points, frame, intrinsics, pose0, iters=30):
    """Independent rigid point-to-plane ICP used as a registration oracle.

    Correspondences by projective lookup with nearest-pixel normals from a
    finite-difference cross product (not the library's plane-fit normals), and
    a small-angle linearized 6-dof solve per iteration. Scale is not estimated.
    """
    depth = frame.depth
    h, w = depth.shape
    # Independent normal map: central differences of the backprojected grid.
    vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
    z = depth.copy()
    x = (uu - intrinsics.u0) * z / intrinsics.f
    y = (vv - intrinsics.v0) * z / intrinsics.f
    P = np.stack([x, y, z], axis=-1)
    valid = z > 0
    dxu = np.zeros_like(P)
    dxv = np.zeros_like(P)
    dxu[:, 1:-1] = (P[:, 2:] - P[:, :-2]) / 2.0
    dxv[1:-1, :] = (P[2:, :] - P[:-2, :]) / 2.0
    ok_n = valid.copy()
    ok_n[:, 1:-1] &= valid[:, 2:] & valid[:, :-2]
    ok_n[1:-1, :] &= valid[2:, :] & valid[:-2, :]
    ok_n[:, [0, -1]] = False
    ok_n[[0, -1], :] = False
    nrm = np.cross(dxu, dxv)
    ln = np.linalg.norm(nrm, axis=-1, keepdims=True)
    nrm = np.divide(nrm, np.maximum(ln, 1e-12))
    flip = np.einsum("hwc,hwc->hw", nrm, P) < 0
    nrm[flip] *= -1.0

    R = rotation_matrix(pose0.omega)
    t = pose0.t.copy()
    scale = np.exp(pose0.alpha)
    for _ in range(iters):
        q = scale * (model_points @ R.T) + t
        zq = q[:, 2]
        front = zq > 0
        u = intrinsics.f * q[:, 0] / np.where(front, zq, 1.0) + intrinsics.u0
        v = intrinsics.f * q[:, 1] / np.where(front, zq, 1.0) + intrinsics.v0
        d, okd = bilinear_depth(depth, u, v)
        ui = np.clip(np.round(u).astype(int), 0, w - 1)
        vi = np.clip(np.round(v).astype(int), 0, h - 1)
        ok = front & okd & ok_n[vi, ui]
        if ok.sum() < 10:
            break
        n = nrm[vi[ok], ui[ok]]
        px = (u[ok] - intrinsics.u0) * d[ok] / intrinsics.f
        py = (v[ok] - intrinsics.v0) * d[ok] / intrinsics.f
        p = np.stack([px, py, d[ok]], axis=-1)
        qk = q[ok]
        r = np.einsum("ij,ij->i", n, qk - p)
        # rows: [ (q x n) ; n ] for delta = (rotvec, t)
        Jrow = np.concatenate([np.cross(qk, n), n], axis=1)
        A = Jrow.T @ Jrow + 1e-9 * np.eye(6)
        g = Jrow.T @ r
        delta = np.linalg.solve(A, -g)
        dR = rotation_matrix(delta[:3])
        R = dR @ R
        t = dR @ t + delta[3:]
        if np.linalg.norm(delta) < 1e-10:
            break
    return R, t


def render_intrinsics():
    return CameraIntrinsics(f=575.0, u0=319.5, v0=239.5)


def pose_deg(yaw=0.0, pitch=0.0, roll=0.0, t=(0.0, 0.0, 900.0), alpha=0.0):
    """Build a Pose from intrinsic yaw(Y)-pitch(X)-roll(Z) angles in degrees."""
    cy, sy = np.cos(np.radians(yaw)), np.sin(np.radians(yaw))
    cp, sp = np.cos(np.radians(pitch)), np.sin(np.radians(pitch))
    cr, sr = np.cos(np.radians(roll)), np.sin(np.radians(roll))
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    Rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    from depthface.geometry import rotation_vector

    return Pose(rotation_vector(Ry @ Rx @ Rz), np.asarray(t, float), alpha)


def kl_quadrature_visible(m, s2, sigma_o_sq):
    """Adaptive quadrature of the visible-ray KL integrand; independent oracle."""
    from scipy.integrate import quad

    s = np.sqrt(s2)
    so = np.sqrt(sigma_o_sq)

    def integrand(y):
        logp = -0.5 * np.log(2 * np.pi * s2) - 0.5 * (y - m) ** 2 / s2
        logq = -0.5 * np.log(2 * np.pi * sigma_o_sq) - 0.5 * y**2 / sigma_o_sq
        return np.exp(logp) * (logp - logq)

    lo, hi = m - 14 * s, m + 14 * s
    val, _ = quad(integrand, lo, hi, epsabs=1e-10, epsrel=1e-12, limit=300)
    return val


def kl_quadrature_occluded(m, s2, u_o):
    """Quadrature of the occluded-ray KL integrand against the uniform density."""
    from scipy.integrate import quad

    s = np.sqrt(s2)

    def integrand(y):
        logp = -0.5 * np.log(2 * np.pi * s2) - 0.5 * (y - m) ** 2 / s2
        return np.exp(logp) * (logp - np.log(u_o))

    lo, hi = m - 14 * s, m + 14 * s
    val, _ = quad(integrand, lo, hi, epsabs=1e-10, epsrel=1e-12, limit=300)
    return val
