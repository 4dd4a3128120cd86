"""Camera model, rigid-plus-scale transforms, and depth-derived surface geometry.

Conventions used across the package:

* Camera space: x right, y down, z forward (into the scene). The camera sits at
  the origin; only points with z > 0 project.
* Depth frames store z in millimetres as float arrays; 0 marks missing data.
* A pose is (omega, t, alpha): rotation vector (radians), translation (mm) and
  log-scale. It acts on model points as ``exp(alpha) * R(omega) @ p + t``.
* Surface normals derived from depth point away from the camera, i.e.
  ``dot(n, p) > 0`` for the surface point p, so a signed distance measured
  along n is negative for points in front of the surface.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

MISSING_DEPTH = 0.0
DEPTH_MAX_MM = 10000.0


class MissingDepthError(ValueError):
    """Raised when an operation needs depth at a pixel that has none."""


class EmptyCloudError(ValueError):
    """Raised when a region of interest contains no usable surface points."""


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics with square pixels and no skew."""

    f: float
    u0: float
    v0: float

    @property
    def matrix(self):
        return np.array(
            [[self.f, 0.0, self.u0], [0.0, self.f, self.v0], [0.0, 0.0, 1.0]]
        )


@dataclass
class DepthFrame:
    """A single depth image; ``depth[v, u]`` is z in mm, 0 means no reading."""

    depth: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.depth.ndim != 2:
            raise ValueError("depth must be a 2-d array")
        valid = self.depth != MISSING_DEPTH
        if valid.any():
            block = self.depth[valid]
            if block.min() <= 0.0 or block.max() >= DEPTH_MAX_MM:
                raise ValueError("non-missing depth must lie in (0, 10000) mm")

    @property
    def height(self):
        return self.depth.shape[0]

    @property
    def width(self):
        return self.depth.shape[1]

    def valid_mask(self):
        return self.depth != MISSING_DEPTH


@dataclass(frozen=True)
class Rect:
    """Integer pixel rectangle, half-open: columns [u, u+w), rows [v, v+h)."""

    u: int
    v: int
    w: int
    h: int

    def clipped(self, width, height):
        u0 = max(self.u, 0)
        v0 = max(self.v, 0)
        u1 = min(self.u + self.w, width)
        v1 = min(self.v + self.h, height)
        return Rect(u0, v0, max(u1 - u0, 0), max(v1 - v0, 0))

    @property
    def area(self):
        return self.w * self.h


@dataclass(frozen=True)
class Pose:
    """Similarity transform parameters: rotation vector, translation, log-scale."""

    omega: np.ndarray
    t: np.ndarray
    alpha: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "omega", np.asarray(self.omega, dtype=np.float64))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64))
        if self.omega.shape != (3,) or self.t.shape != (3,):
            raise ValueError("omega and t must be 3-vectors")

    @staticmethod
    def identity():
        return Pose(np.zeros(3), np.zeros(3), 0.0)

    def as_vector(self):
        """Pack as (omega, t, alpha) into a length-7 vector."""
        return np.concatenate([self.omega, self.t, [self.alpha]])

    @staticmethod
    def from_vector(vec):
        vec = np.asarray(vec, dtype=np.float64)
        return Pose(vec[0:3], vec[3:6], float(vec[6]))


def rotation_matrix(omega):
    """Rodrigues' formula: rotation matrix for a rotation vector.

    Parameters
    ----------
    omega : (3,) array
        Axis-angle vector; its norm is the rotation angle in radians.
    """
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    if theta < 1e-12:
        K = _skew(omega)
        return np.eye(3) + K  # first-order term keeps derivative tests honest
    axis = omega / theta
    K = _skew(axis)
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def rotation_vector(R):
    """Inverse of rotation_matrix; stable near 0 and pi."""
    R = np.asarray(R, dtype=np.float64)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    skew_part = np.array(
        [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]
    )
    if theta < 1e-7:
        return 0.5 * skew_part
    if np.pi - theta < 1e-5:
        # Near pi the skew part vanishes; recover the axis from R + I.
        M = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(M), 0.0, None))
        k = int(np.argmax(axis))
        axis = M[:, k] / max(axis[k], 1e-12)
        axis = axis / np.linalg.norm(axis)
        # Fix the sign using the (possibly tiny) skew part.
        if np.dot(axis, skew_part) < 0.0:
            axis = -axis
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * skew_part


def rotation_jacobian(omega):
    """Derivatives of R(omega) w.r.t. each component of omega.

    Returns a (3, 3, 3) array J with J[i] = dR/d(omega_i), using the
    closed form d R / d w_i = (w_i [w]_x + [w x (I - R) e_i]_x) / |w|^2 * R,
    which degenerates to [e_i]_x at w = 0.
    """
    omega = np.asarray(omega, dtype=np.float64)
    theta_sq = float(omega @ omega)
    if theta_sq < 1e-16:
        return np.stack([_skew(e) for e in np.eye(3)])
    R = rotation_matrix(omega)
    J = np.empty((3, 3, 3))
    ImR = np.eye(3) - R
    for i in range(3):
        v = np.cross(omega, ImR[:, i])
        J[i] = (omega[i] * _skew(omega) + _skew(v)) @ R / theta_sq
    return J


def _skew(v):
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
    )


def transform(pose, points):
    """Apply exp(alpha) * R(omega) @ p + t to one point or an (N, 3) stack."""
    R = rotation_matrix(pose.omega)
    pts = np.asarray(points, dtype=np.float64)
    return np.exp(pose.alpha) * (pts @ R.T) + pose.t


def compose(second, first):
    """Pose of the composite map T(second) o T(first).

    Composition follows the similarity group: the translation of ``first``
    is itself moved by ``second``'s rotation and scale, so that
    ``transform(compose(b, a), x) == transform(b, transform(a, x))``.
    """
    R2 = rotation_matrix(second.omega)
    R1 = rotation_matrix(first.omega)
    omega = rotation_vector(R2 @ R1)
    t = np.exp(second.alpha) * (R2 @ first.t) + second.t
    return Pose(omega, t, first.alpha + second.alpha)


def project(points, intrinsics):
    """Perspective projection of camera-space points to pixel coordinates.

    Parameters
    ----------
    points : (..., 3) array
    intrinsics : CameraIntrinsics

    Returns
    -------
    (..., 2) array of (u, v).

    Raises
    ------
    ValueError
        If any point has non-positive depth.
    """
    pts = np.asarray(points, dtype=np.float64)
    z = pts[..., 2]
    if np.any(z <= 0.0):
        raise ValueError("cannot project points with non-positive z")
    u = intrinsics.f * pts[..., 0] / z + intrinsics.u0
    v = intrinsics.f * pts[..., 1] / z + intrinsics.v0
    return np.stack([u, v], axis=-1)


def project_masked(points, intrinsics):
    """Projection that flags non-positive-depth points instead of raising."""
    pts = np.asarray(points, dtype=np.float64)
    z = pts[..., 2]
    ok = z > 0.0
    safe_z = np.where(ok, z, 1.0)
    u = intrinsics.f * pts[..., 0] / safe_z + intrinsics.u0
    v = intrinsics.f * pts[..., 1] / safe_z + intrinsics.v0
    return np.stack([u, v], axis=-1), ok


def backproject(pixels, depth, intrinsics):
    """Lift pixels with depth readings to camera-space 3D points.

    ``pixels`` is (..., 2) as (u, v); ``depth`` broadcasts against its leading
    shape. Raises MissingDepthError if any depth is missing/non-positive.
    """
    px = np.asarray(pixels, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    if np.any(d <= 0.0):
        raise MissingDepthError("backprojection needs positive depth")
    x = (px[..., 0] - intrinsics.u0) * d / intrinsics.f
    y = (px[..., 1] - intrinsics.v0) * d / intrinsics.f
    return np.stack([x, y, np.broadcast_to(d, x.shape)], axis=-1)


def bilinear_depth(depth, u, v):
    """Sample a depth array at subpixel locations.

    A sample is valid only when all four neighbouring pixels exist and carry
    non-missing depth; invalid samples return 0.

    Returns
    -------
    values : float array, same shape as u
    valid : bool array
    """
    depth = np.asarray(depth)
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    h, w = depth.shape
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    inside = (u0 >= 0) & (v0 >= 0) & (u0 + 1 <= w - 1) & (v0 + 1 <= h - 1)
    u0c = np.clip(u0, 0, w - 2)
    v0c = np.clip(v0, 0, h - 2)
    d00 = depth[v0c, u0c]
    d01 = depth[v0c, u0c + 1]
    d10 = depth[v0c + 1, u0c]
    d11 = depth[v0c + 1, u0c + 1]
    valid = (
        inside
        & (d00 != MISSING_DEPTH)
        & (d01 != MISSING_DEPTH)
        & (d10 != MISSING_DEPTH)
        & (d11 != MISSING_DEPTH)
    )
    fu = u - u0
    fv = v - v0
    top = d00 * (1.0 - fu) + d01 * fu
    bot = d10 * (1.0 - fu) + d11 * fu
    values = np.where(valid, top * (1.0 - fv) + bot * fv, 0.0)
    return values, valid


def bilinear_depth_gradient(depth, u, v):
    """Bilinear depth sample plus its analytic (d/du, d/dv) at each location.

    Same validity rule as bilinear_depth. Gradients of invalid samples are 0.
    """
    depth = np.asarray(depth)
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    h, w = depth.shape
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    inside = (u0 >= 0) & (v0 >= 0) & (u0 + 1 <= w - 1) & (v0 + 1 <= h - 1)
    u0c = np.clip(u0, 0, w - 2)
    v0c = np.clip(v0, 0, h - 2)
    d00 = depth[v0c, u0c]
    d01 = depth[v0c, u0c + 1]
    d10 = depth[v0c + 1, u0c]
    d11 = depth[v0c + 1, u0c + 1]
    valid = (
        inside
        & (d00 != MISSING_DEPTH)
        & (d01 != MISSING_DEPTH)
        & (d10 != MISSING_DEPTH)
        & (d11 != MISSING_DEPTH)
    )
    fu = u - u0
    fv = v - v0
    top = d00 * (1.0 - fu) + d01 * fu
    bot = d10 * (1.0 - fu) + d11 * fu
    values = np.where(valid, top * (1.0 - fv) + bot * fv, 0.0)
    du = np.where(valid, (d01 - d00) * (1.0 - fv) + (d11 - d10) * fv, 0.0)
    dv = np.where(valid, bot - top, 0.0)
    return values, du, dv, valid


def surface_normals(frame, intrinsics, roi=None, window=5, min_valid=6):
    """Per-pixel surface normals by local plane fit over backprojected points.

    Fits the regression plane z = a x + b y + c to each ``window``-sized
    neighbourhood (valid pixels only) and takes the normal along (a, b, -1),
    oriented to point away from the camera. Windows with fewer than
    ``min_valid`` valid pixels yield no normal.

    Returns
    -------
    normals : (H, W, 3) array, zeros where invalid
    valid : (H, W) bool array
    """
    depth = frame.depth
    h, w = depth.shape
    if roi is None:
        roi = Rect(0, 0, w, h)
    roi = roi.clipped(w, h)
    if roi.area == 0:
        return np.zeros((h, w, 3)), np.zeros((h, w), dtype=bool)
    sl = (slice(roi.v, roi.v + roi.h), slice(roi.u, roi.u + roi.w))
    d = depth[sl]
    m = (d != MISSING_DEPTH).astype(np.float64)

    vv, uu = np.mgrid[roi.v : roi.v + roi.h, roi.u : roi.u + roi.w]
    x = (uu - intrinsics.u0) * d / intrinsics.f
    y = (vv - intrinsics.v0) * d / intrinsics.f
    z = d

    def box(a):
        # Window sums; constant padding treats out-of-roi pixels as invalid.
        return ndimage.uniform_filter(a, size=window, mode="constant") * window**2

    n = box(m)
    sx, sy, sz = box(m * x), box(m * y), box(m * z)
    sxx, syy, sxy = box(m * x * x), box(m * y * y), box(m * x * y)
    sxz, syz = box(m * x * z), box(m * y * z)

    A = np.empty(d.shape + (3, 3))
    A[..., 0, 0], A[..., 0, 1], A[..., 0, 2] = sxx, sxy, sx
    A[..., 1, 0], A[..., 1, 1], A[..., 1, 2] = sxy, syy, sy
    A[..., 2, 0], A[..., 2, 1], A[..., 2, 2] = sx, sy, n
    rhs = np.stack([sxz, syz, sz], axis=-1)

    count_ok = (n >= min_valid) & (m > 0.0)
    det = np.linalg.det(A)
    solvable = count_ok & (np.abs(det) > 1e-9)
    A[~solvable] = np.eye(3)
    coef = np.linalg.solve(A, rhs[..., None])[..., 0]

    nrm = np.stack(
        [coef[..., 0], coef[..., 1], -np.ones_like(coef[..., 0])], axis=-1
    )
    nrm /= np.linalg.norm(nrm, axis=-1, keepdims=True)
    # Orient away from the camera: positive component along the viewing ray.
    ray_dot = nrm[..., 0] * x + nrm[..., 1] * y + nrm[..., 2] * z
    nrm *= np.where(ray_dot < 0.0, -1.0, 1.0)[..., None]
    nrm[~solvable] = 0.0

    normals = np.zeros((h, w, 3))
    valid = np.zeros((h, w), dtype=bool)
    normals[sl] = nrm
    valid[sl] = solvable
    return normals, valid


@dataclass
class SurfaceField:
    """Depth frame plus its derived per-pixel normals over a region of interest."""

    frame: DepthFrame
    intrinsics: CameraIntrinsics
    roi: Rect
    normals: np.ndarray = field(repr=False)
    normal_valid: np.ndarray = field(repr=False)

    @staticmethod
    def compute(frame, intrinsics, roi=None, window=5, min_valid=6):
        if roi is None:
            roi = Rect(0, 0, frame.width, frame.height)
        roi = roi.clipped(frame.width, frame.height)
        normals, valid = surface_normals(frame, intrinsics, roi, window, min_valid)
        return SurfaceField(frame, intrinsics, roi, normals, valid)


@dataclass
class PointCloud:
    """Backprojected surface points with per-point normals and source pixels."""

    points: np.ndarray
    normals: np.ndarray
    pixels: np.ndarray

    def __len__(self):
        return self.points.shape[0]


def cloud_from_frame(frame, roi, intrinsics, window=5, min_valid=6):
    """Backproject every valid pixel of ``roi`` that also has a normal.

    Raises EmptyCloudError when the region yields no points.
    """
    field_ = SurfaceField.compute(frame, intrinsics, roi, window, min_valid)
    mask = field_.normal_valid & frame.valid_mask()
    vs, us = np.nonzero(mask)
    if vs.size == 0:
        raise EmptyCloudError("no valid surface points in the region")
    d = frame.depth[vs, us]
    pts = backproject(np.stack([us, vs], axis=-1).astype(np.float64), d, intrinsics)
    normals = field_.normals[vs, us]
    return PointCloud(pts, normals, np.stack([us, vs], axis=-1))
