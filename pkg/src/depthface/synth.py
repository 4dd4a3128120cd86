"""Synthetic depth scenes: parametric head corpus, z-buffer renderer, corruptions.

The renderer is the ground-truth oracle for the tracking tests, so it stays
deliberately simple: per-triangle edge-function rasterization with
perspective-correct 1/z interpolation and nearest-depth wins. A numba kernel
carries the hot loop with a pure-numpy fallback on import failure.

Model-space conventions for generated heads: x right, y down (chin at +y),
face looking along -z, so a head at pose (omega=0, t=(0,0,d)) faces the camera.
"""

from __future__ import annotations

import numpy as np

from .geometry import MISSING_DEPTH, DepthFrame, Pose, Rect, transform

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via the module flag in tests
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


USE_NUMBA = _HAVE_NUMBA

NEAR_CLIP_MM = 1.0


@njit(cache=True)
def _raster_kernel(pts, tris, f, cu, cv, height, width, out):
    for ti in range(tris.shape[0]):
        i0, i1, i2 = tris[ti, 0], tris[ti, 1], tris[ti, 2]
        x0, y0, z0 = pts[i0, 0], pts[i0, 1], pts[i0, 2]
        x1, y1, z1 = pts[i1, 0], pts[i1, 1], pts[i1, 2]
        x2, y2, z2 = pts[i2, 0], pts[i2, 1], pts[i2, 2]
        if z0 < NEAR_CLIP_MM or z1 < NEAR_CLIP_MM or z2 < NEAR_CLIP_MM:
            continue
        # Back-face cull: outward normal pointing away from the origin-centred
        # camera means the triangle shows its back.
        nx = (y1 - y0) * (z2 - z0) - (z1 - z0) * (y2 - y0)
        ny = (z1 - z0) * (x2 - x0) - (x1 - x0) * (z2 - z0)
        nz = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        cx = (x0 + x1 + x2) / 3.0
        cy = (y0 + y1 + y2) / 3.0
        cz = (z0 + z1 + z2) / 3.0
        if nx * cx + ny * cy + nz * cz >= 0.0:
            continue
        u0 = f * x0 / z0 + cu
        v0 = f * y0 / z0 + cv
        u1 = f * x1 / z1 + cu
        v1 = f * y1 / z1 + cv
        u2 = f * x2 / z2 + cu
        v2 = f * y2 / z2 + cv
        area = (u1 - u0) * (v2 - v0) - (u2 - u0) * (v1 - v0)
        if abs(area) < 1e-12:
            continue
        umin = int(np.floor(min(u0, min(u1, u2))))
        umax = int(np.ceil(max(u0, max(u1, u2))))
        vmin = int(np.floor(min(v0, min(v1, v2))))
        vmax = int(np.ceil(max(v0, max(v1, v2))))
        if umin < 0:
            umin = 0
        if vmin < 0:
            vmin = 0
        if umax > width - 1:
            umax = width - 1
        if vmax > height - 1:
            vmax = height - 1
        iz0, iz1, iz2 = 1.0 / z0, 1.0 / z1, 1.0 / z2
        for py in range(vmin, vmax + 1):
            for px in range(umin, umax + 1):
                w0 = ((u1 - px) * (v2 - py) - (u2 - px) * (v1 - py)) / area
                w1 = ((u2 - px) * (v0 - py) - (u0 - px) * (v2 - py)) / area
                w2 = 1.0 - w0 - w1
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                zval = 1.0 / (w0 * iz0 + w1 * iz1 + w2 * iz2)
                cur = out[py, px]
                if cur == 0.0 or zval < cur:
                    out[py, px] = zval


def _raster_numpy(pts, tris, f, cu, cv, height, width, out):
    """Vectorized-per-triangle fallback mirroring the kernel's arithmetic."""
    for ti in range(tris.shape[0]):
        p = pts[tris[ti]]
        if (p[:, 2] < NEAR_CLIP_MM).any():
            continue
        n = np.cross(p[1] - p[0], p[2] - p[0])
        if n @ p.mean(axis=0) >= 0.0:
            continue
        u = f * p[:, 0] / p[:, 2] + cu
        v = f * p[:, 1] / p[:, 2] + cv
        area = (u[1] - u[0]) * (v[2] - v[0]) - (u[2] - u[0]) * (v[1] - v[0])
        if abs(area) < 1e-12:
            continue
        umin = max(int(np.floor(u.min())), 0)
        umax = min(int(np.ceil(u.max())), width - 1)
        vmin = max(int(np.floor(v.min())), 0)
        vmax = min(int(np.ceil(v.max())), height - 1)
        if umin > umax or vmin > vmax:
            continue
        py, px = np.mgrid[vmin : vmax + 1, umin : umax + 1]
        w0 = ((u[1] - px) * (v[2] - py) - (u[2] - px) * (v[1] - py)) / area
        w1 = ((u[2] - px) * (v[0] - py) - (u[0] - px) * (v[2] - py)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0.0) & (w1 >= 0.0) & (w2 >= 0.0)
        if not inside.any():
            continue
        invz = w0 / p[0, 2] + w1 / p[1, 2] + w2 / p[2, 2]
        zval = np.where(inside, 1.0 / np.where(invz > 0, invz, 1.0), np.inf)
        tile = out[vmin : vmax + 1, umin : umax + 1]
        take = inside & ((tile == 0.0) | (zval < tile))
        tile[take] = zval[take]


def render_depth(vertices, triangles, pose, intrinsics, shape=(480, 640)):
    """Render a triangle mesh to a depth frame (float mm, 0 = background)."""
    pts = transform(pose, np.asarray(vertices, dtype=np.float64))
    tris = np.ascontiguousarray(np.asarray(triangles, dtype=np.int64))
    height, width = shape
    out = np.zeros((height, width), dtype=np.float64)
    raster = _raster_kernel if USE_NUMBA else _raster_numpy
    raster(
        np.ascontiguousarray(pts),
        tris,
        float(intrinsics.f),
        float(intrinsics.u0),
        float(intrinsics.v0),
        height,
        width,
        out,
    )
    return DepthFrame(out)


def add_noise(frame, sigma=0.0, quantization=1.0, rng=None):
    """Additive Gaussian depth noise followed by quantization, valid pixels only."""
    depth = frame.depth.copy()
    valid = depth != MISSING_DEPTH
    if sigma > 0.0:
        if rng is None:
            raise ValueError("sigma > 0 requires an rng")
        depth[valid] += rng.normal(0.0, sigma, size=int(valid.sum()))
    if quantization > 0.0:
        depth[valid] = np.round(depth[valid] / quantization) * quantization
    depth[valid] = np.clip(depth[valid], quantization if quantization > 0 else 0.01, 9999.0)
    return DepthFrame(depth)


def face_region(frame):
    """Bounding box of the valid pixels; the default occluder placement region."""
    vs, us = np.nonzero(frame.valid_mask())
    if vs.size == 0:
        raise ValueError("frame has no valid pixels")
    return Rect(int(us.min()), int(vs.min()), int(us.max() - us.min() + 1), int(vs.max() - vs.min() + 1))


def inject_occlusion(frame, coverage, rng, roi=None):
    """Paste a rectangular occluder 100 mm in front of the local surface.

    The rectangle covers ``coverage`` of the region's pixel area and sits
    strictly nearer than any surface it covers; covered pixels that had no
    reading take the region's median depth minus 100 mm so the occluder is a
    solid object, not a mask.
    """
    if not 0.0 <= coverage < 1.0:
        raise ValueError("coverage must lie in [0, 1)")
    if coverage == 0.0:
        return DepthFrame(frame.depth.copy())
    if roi is None:
        roi = face_region(frame)
    roi = roi.clipped(frame.width, frame.height)
    area = coverage * roi.area
    aspect = rng.uniform(0.6, 1.7)
    rw = min(int(round(np.sqrt(area * aspect))), roi.w)
    rh = min(int(round(area / max(rw, 1))), roi.h)
    rw, rh = max(rw, 1), max(rh, 1)
    ru = roi.u + int(rng.integers(0, roi.w - rw + 1))
    rv = roi.v + int(rng.integers(0, roi.h - rh + 1))
    depth = frame.depth.copy()
    tile = depth[rv : rv + rh, ru : ru + rw]
    valid = tile != MISSING_DEPTH
    roi_depths = frame.depth[roi.v : roi.v + roi.h, roi.u : roi.u + roi.w]
    fallback = float(np.median(roi_depths[roi_depths != MISSING_DEPTH]))
    tile[valid] = tile[valid] - 100.0
    tile[~valid] = fallback - 100.0
    return DepthFrame(depth)


def vertex_normals(vertices, triangles):
    """Area-weighted vertex normals with the mesh's winding orientation."""
    v = np.asarray(vertices, dtype=np.float64)
    t = np.asarray(triangles, dtype=np.int64)
    fn = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
    out = np.zeros_like(v)
    for k in range(3):
        np.add.at(out, t[:, k], fn)
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    return out / np.maximum(norms, 1e-12)


# ---------------------------------------------------------------------------
# Parametric head corpus


def _ellipsoid_grid(n_vertices, axes=(78.0, 108.0, 88.0)):
    """Open-pole lat/long ellipsoid grid with consistent outward winding."""
    base = max(int(round(np.sqrt(n_vertices * 0.8))), 3)
    n_lat = None
    for off in range(0, 8):
        for cand in (base + off, base - off):
            if cand >= 3 and n_vertices % cand == 0 and n_vertices // cand >= 3:
                n_lat = cand
                break
        if n_lat is not None:
            break
    if n_lat is None:  # awkward counts get the closest grid not exceeding n
        n_lat = base
    n_lon = max(n_vertices // n_lat, 3)
    a, b, c = axes
    theta = np.linspace(0.08 * np.pi, 0.96 * np.pi, n_lat)
    phi = np.linspace(0.0, 2.0 * np.pi, n_lon, endpoint=False)
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    pts = np.stack(
        [
            a * np.sin(tt) * np.cos(pp),
            b * np.cos(tt),
            c * np.sin(tt) * np.sin(pp),
        ],
        axis=-1,
    ).reshape(-1, 3)
    # chin at +y: flip so theta=0 (top of head) maps to -y
    pts[:, 1] *= -1.0

    tris = []
    for i in range(n_lat - 1):
        for j in range(n_lon):
            j1 = (j + 1) % n_lon
            v00 = i * n_lon + j
            v01 = i * n_lon + j1
            v10 = (i + 1) * n_lon + j
            v11 = (i + 1) * n_lon + j1
            tris.append([v00, v10, v01])
            tris.append([v01, v10, v11])
    tris = np.asarray(tris, dtype=np.int64)

    # Enforce outward winding against the analytic ellipsoid normal.
    gradient = pts / np.square(np.array([a, b, c]))
    fn = np.cross(pts[tris[:, 1]] - pts[tris[:, 0]], pts[tris[:, 2]] - pts[tris[:, 0]])
    centroid_grad = gradient[tris].mean(axis=1)
    flip = np.einsum("ij,ij->i", fn, centroid_grad) < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    return pts, tris, tt.reshape(-1), pp.reshape(-1)


def _angular_bump(theta, phi, theta0, phi0, width):
    """Smooth weight in [0, 1] around a point on the parameter grid."""
    dphi = np.angle(np.exp(1j * (phi - phi0)))
    d2 = (theta - theta0) ** 2 + (np.sin(theta) * dphi) ** 2
    return np.exp(-0.5 * d2 / width**2)


def _masked_bump(theta, phi, theta0, phi0, width, floor=0.05):
    """Bump clipped to exact zero outside its support region."""
    w = _angular_bump(theta, phi, theta0, phi0, width)
    return np.clip(w - floor, 0.0, None) / (1.0 - floor)


FACE_PHI = 1.5 * np.pi  # the -z meridian: where the face looks


def head_mesh(n_vertices=2000):
    """Base head: ellipsoid with nose, brow ridge, and chin features.

    Returns (vertices, triangles, outward_directions, theta, phi).
    """
    pts, tris, theta, phi = _ellipsoid_grid(n_vertices)
    a, b, c = 78.0, 108.0, 88.0
    outward = pts / np.square(np.array([a, b, c]))
    outward /= np.linalg.norm(outward, axis=1, keepdims=True)

    nose = _angular_bump(theta, phi, 0.56 * np.pi, FACE_PHI, 0.10)
    brow = _angular_bump(theta, phi, 0.42 * np.pi, FACE_PHI, 0.17)
    chin = _angular_bump(theta, phi, 0.80 * np.pi, FACE_PHI, 0.12)
    bump = 16.0 * nose + 4.5 * brow + 7.0 * chin
    pts = pts + outward * bump[:, None]
    return pts, tris, outward, theta, phi


def _identity_fields(pts, outward, theta, phi):
    cheek_l = _angular_bump(theta, phi, 0.60 * np.pi, FACE_PHI - 0.38 * np.pi, 0.16)
    cheek_r = _angular_bump(theta, phi, 0.60 * np.pi, FACE_PHI + 0.38 * np.pi, 0.16)
    nose = _angular_bump(theta, phi, 0.56 * np.pi, FACE_PHI, 0.10)
    jaw = _angular_bump(theta, phi, 0.80 * np.pi, FACE_PHI, 0.30)
    ex = np.array([1.0, 0.0, 0.0])
    fields = [
        np.stack([pts[:, 0] * 0.025, np.zeros_like(theta), np.zeros_like(theta)], -1),
        np.stack([np.zeros_like(theta), pts[:, 1] * 0.03, np.zeros_like(theta)], -1),
        np.stack([np.zeros_like(theta), np.zeros_like(theta), pts[:, 2] * 0.035], -1),
        outward * (5.0 * (cheek_l + cheek_r))[:, None],
        outward * (6.0 * nose)[:, None],
        (pts * ex) * (0.06 * jaw)[:, None],
    ]
    return np.stack(fields)  # (6, N, 3)


def _expression_fields(pts, outward, theta, phi):
    mouth = _masked_bump(theta, phi, 0.70 * np.pi, FACE_PHI, 0.13)
    brow = _masked_bump(theta, phi, 0.42 * np.pi, FACE_PHI, 0.14)
    down = np.array([0.0, 1.0, 0.0])
    fields = [
        down[None, :] * (8.0 * mouth)[:, None] - outward * (2.5 * mouth)[:, None],
        np.stack([pts[:, 0] * 0.10 * mouth, np.zeros_like(theta), np.zeros_like(theta)], -1),
        -down[None, :] * (5.0 * brow)[:, None] + outward * (1.5 * brow)[:, None],
    ]
    return np.stack(fields)  # (3, N, 3)


def generate_corpus(n_identities=20, n_expressions=6, n_vertices=2000, seed=0):
    """Fully crossed synthetic face corpus.

    Expression 0 of every identity is the neutral face. Expression fields are
    strictly zero outside the mouth/brow regions; identity fields are smooth
    and global. A mild per-identity rescaling of the expression fields makes
    the corpus genuinely multilinear rather than additive.

    Returns
    -------
    meshes : (n_identities, n_expressions, n_vertices, 3)
    triangles : (T, 3) int
    """
    rng = np.random.default_rng(seed)
    base, tris, outward, theta, phi = head_mesh(n_vertices)
    idf = _identity_fields(base, outward, theta, phi)
    exf = _expression_fields(base, outward, theta, phi)

    id_coef = np.clip(rng.normal(size=(n_identities, idf.shape[0])), -2.0, 2.0)
    ex_coef = np.clip(rng.normal(size=(n_expressions, exf.shape[0])), -2.0, 2.0)
    ex_coef[0] = 0.0  # neutral expression present for every identity
    ex_gain = 1.0 + 0.15 * np.tanh(id_coef[:, 3])

    id_part = np.einsum("if,fnc->inc", id_coef, idf)
    ex_part = np.einsum("jf,fnc->jnc", ex_coef, exf)
    meshes = (
        base[None, None]
        + id_part[:, None]
        + ex_gain[:, None, None, None] * ex_part[None, :]
    )
    return meshes, tris


def orbit_trajectory(
    n_frames,
    yaw_amp_deg=40.0,
    pitch_amp_deg=20.0,
    drift_mm=30.0,
    center=(0.0, 0.0, 900.0),
    z_amp_mm=12.0,
):
    """Smooth head-motion trajectory starting at the frontal pose.

    Yaw sweeps the full +/- amplitude over one period, pitch oscillates at
    twice the rate, and translation drifts laterally by ``drift_mm`` total
    with a gentle depth oscillation.
    """
    from .io import matrix_from_euler
    from .geometry import rotation_vector

    center = np.asarray(center, dtype=np.float64)
    poses = []
    for k in range(n_frames):
        s = k / max(n_frames - 1, 1)
        yaw = yaw_amp_deg * np.sin(2.0 * np.pi * s)
        pitch = pitch_amp_deg * np.sin(4.0 * np.pi * s)
        roll = 0.25 * yaw_amp_deg * np.sin(6.0 * np.pi * s)
        R = matrix_from_euler(np.radians(yaw), np.radians(pitch), np.radians(roll))
        t = center + np.array(
            [drift_mm * s - drift_mm / 2.0, 0.0, z_amp_mm * np.sin(2.0 * np.pi * s)]
        )
        poses.append(Pose(rotation_vector(R), t, 0.0))
    return poses
