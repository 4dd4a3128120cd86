"""Persistence and interchange: model/store binaries, depth PNGs, pose CSVs.

File formats
------------
Face model (``.mlfm``): magic ``MLFM1`` + u16 version, then tagged chunks of
``tag[4] | u64 payload_bytes | payload``. Arrays are float64 little-endian,
multi-dimensional payloads flattened in column-major (first index fastest)
order. Chunks: DIMS (u32 x6: n_vertices, rows_id, cols_id, rows_exp, cols_exp,
n_triangles), MEAN, CORE, UIDM, UEXP, MUID, SIID, MUEX, SIEX, TRIS (u32).
Unknown chunks are skipped, so the format is forward-extensible.

Identity store (``.idst``): magic ``IDST1`` + u16 version, then chunks HEAD
(u32 dim, u32 n_models, i32 present_index), GENM (one model record), and one
MODL per person. A model record is m[dim] | beta | psi[dim*dim, column-major]
| nu | alpha, all float64.

Depth frames: 16-bit grayscale PNGs storing round(depth / depth_scale); 0 is
missing. Sequence manifests are YAML.

Pose CSVs: fixed header, one row per frame, angles as intrinsic yaw(Y) ->
pitch(X) -> roll(Z) in degrees.
"""

from __future__ import annotations

import csv
import io as _stdio
import os
import struct
from dataclasses import dataclass, field

import numpy as np
import yaml
from PIL import Image

from .facemodel import MultilinearModel
from .geometry import CameraIntrinsics, DepthFrame, Pose, rotation_matrix, rotation_vector
from .identity import IdentityModel, IdentityStore

CSV_HEADER = [
    "frame",
    "yaw_deg",
    "pitch_deg",
    "roll_deg",
    "tx_mm",
    "ty_mm",
    "tz_mm",
    "alpha",
    "occ_frac",
    "failed",
]

MODEL_MAGIC = b"MLFM1"
STORE_MAGIC = b"IDST1"
FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# Euler angles: intrinsic yaw (Y), pitch (X), roll (Z)


def matrix_from_euler(yaw, pitch, roll):
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    rz = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
    return ry @ rx @ rz


def euler_from_matrix(R):
    """Inverse of matrix_from_euler; radians. Roll is zeroed at gimbal lock."""
    sp = -R[1, 2]
    if abs(sp) < 1.0 - 1e-12:
        pitch = np.arcsin(sp)
        yaw = np.arctan2(R[0, 2], R[2, 2])
        roll = np.arctan2(R[1, 0], R[1, 1])
    else:
        pitch = np.pi / 2.0 * np.sign(sp)
        yaw = np.arctan2(-R[2, 0], R[0, 0])
        roll = 0.0
    return yaw, pitch, roll


# ---------------------------------------------------------------------------
# Atomic writes


def atomic_write_bytes(path, data):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# Depth PNG + sequence manifests


def save_depth_png(path, frame, depth_scale=1.0):
    counts = np.round(frame.depth / depth_scale)
    if counts.max() > 65535:
        raise ValueError("depth exceeds the 16-bit range at this depth_scale")
    img = Image.fromarray(counts.astype(np.uint16))
    buf = _stdio.BytesIO()
    img.save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def load_depth_png(path, depth_scale=1.0):
    arr = np.asarray(Image.open(path), dtype=np.float64)
    return DepthFrame(arr * depth_scale)


@dataclass
class SequenceManifest:
    """YAML-backed description of an on-disk depth sequence."""

    directory: str
    pattern: str
    count: int
    intrinsics: CameraIntrinsics
    depth_scale: float = 1.0
    ground_truth: str | None = None

    def frame_path(self, index):
        return os.path.join(self.directory, self.pattern % index)

    def truth_path(self):
        if self.ground_truth is None:
            return None
        return os.path.join(self.directory, self.ground_truth)


def save_manifest(path, manifest):
    doc = {
        "pattern": manifest.pattern,
        "count": manifest.count,
        "depth_scale": manifest.depth_scale,
        "intrinsics": {
            "f": float(manifest.intrinsics.f),
            "u0": float(manifest.intrinsics.u0),
            "v0": float(manifest.intrinsics.v0),
        },
    }
    if manifest.ground_truth is not None:
        doc["ground_truth"] = manifest.ground_truth
    atomic_write_text(path, yaml.safe_dump(doc, sort_keys=True))


def load_manifest(path):
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    intr = doc["intrinsics"]
    return SequenceManifest(
        directory=os.path.dirname(os.path.abspath(path)),
        pattern=doc["pattern"],
        count=int(doc["count"]),
        intrinsics=CameraIntrinsics(
            float(intr["f"]), float(intr["u0"]), float(intr["v0"])
        ),
        depth_scale=float(doc.get("depth_scale", 1.0)),
        ground_truth=doc.get("ground_truth"),
    )


def load_sequence(manifest):
    """Yield (index, DepthFrame) lazily so long sequences stream."""
    for k in range(manifest.count):
        yield k, load_depth_png(manifest.frame_path(k), manifest.depth_scale)


# ---------------------------------------------------------------------------
# Pose CSV


@dataclass
class PoseRecord:
    frame: int
    yaw_deg: float
    pitch_deg: float
    roll_deg: float
    tx_mm: float
    ty_mm: float
    tz_mm: float
    alpha: float = 0.0
    occ_frac: float = 0.0
    failed: bool = False

    @staticmethod
    def from_pose(frame, pose, occ_frac=0.0, failed=False):
        yaw, pitch, roll = euler_from_matrix(rotation_matrix(pose.omega))
        return PoseRecord(
            frame=frame,
            yaw_deg=float(np.degrees(yaw)),
            pitch_deg=float(np.degrees(pitch)),
            roll_deg=float(np.degrees(roll)),
            tx_mm=float(pose.t[0]),
            ty_mm=float(pose.t[1]),
            tz_mm=float(pose.t[2]),
            alpha=float(pose.alpha),
            occ_frac=float(occ_frac),
            failed=bool(failed),
        )

    def pose(self):
        R = matrix_from_euler(
            np.radians(self.yaw_deg),
            np.radians(self.pitch_deg),
            np.radians(self.roll_deg),
        )
        return Pose(
            rotation_vector(R),
            np.array([self.tx_mm, self.ty_mm, self.tz_mm]),
            self.alpha,
        )


def save_pose_csv(path, records):
    out = _stdio.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in records:
        writer.writerow(
            [
                r.frame,
                f"{r.yaw_deg:.6f}",
                f"{r.pitch_deg:.6f}",
                f"{r.roll_deg:.6f}",
                f"{r.tx_mm:.6f}",
                f"{r.ty_mm:.6f}",
                f"{r.tz_mm:.6f}",
                f"{r.alpha:.9f}",
                f"{r.occ_frac:.6f}",
                int(r.failed),
            ]
        )
    atomic_write_text(path, out.getvalue())


def load_pose_csv(path):
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != CSV_HEADER:
            raise ValueError(f"unexpected CSV header: {header}")
        for row in reader:
            records.append(
                PoseRecord(
                    frame=int(row[0]),
                    yaw_deg=float(row[1]),
                    pitch_deg=float(row[2]),
                    roll_deg=float(row[3]),
                    tx_mm=float(row[4]),
                    ty_mm=float(row[5]),
                    tz_mm=float(row[6]),
                    alpha=float(row[7]),
                    occ_frac=float(row[8]),
                    failed=bool(int(row[9])),
                )
            )
    return records


# ---------------------------------------------------------------------------
# Chunked binaries


def _chunk(tag, payload):
    return tag + struct.pack("<Q", len(payload)) + payload


def _iter_chunks(data, offset):
    while offset < len(data):
        tag = data[offset : offset + 4]
        (length,) = struct.unpack_from("<Q", data, offset + 4)
        start = offset + 12
        yield tag, data[start : start + length]
        offset = start + length


def _f64(arr):
    return np.asarray(arr, dtype="<f8").flatten(order="F").tobytes()


def _read_f64(payload, shape):
    arr = np.frombuffer(payload, dtype="<f8")
    return arr.reshape(shape, order="F").copy()


def save_model(path, model):
    dims = np.array(
        [
            model.n_vertices,
            model.u_id.shape[0],
            model.u_id.shape[1],
            model.u_exp.shape[0],
            model.u_exp.shape[1],
            model.triangles.shape[0],
        ],
        dtype="<u4",
    )
    blob = MODEL_MAGIC + struct.pack("<H", FORMAT_VERSION)
    blob += _chunk(b"DIMS", dims.tobytes())
    blob += _chunk(b"MEAN", _f64(model.mean))
    blob += _chunk(b"CORE", _f64(model.core))
    blob += _chunk(b"UIDM", _f64(model.u_id))
    blob += _chunk(b"UEXP", _f64(model.u_exp))
    blob += _chunk(b"MUID", _f64(model.mu_id))
    blob += _chunk(b"SIID", _f64(model.sigma_id))
    blob += _chunk(b"MUEX", _f64(model.mu_exp))
    blob += _chunk(b"SIEX", _f64(model.sigma_exp))
    blob += _chunk(
        b"TRIS", np.asarray(model.triangles, dtype="<u4").flatten(order="F").tobytes()
    )
    atomic_write_bytes(path, blob)


def load_model(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:5] != MODEL_MAGIC:
        raise ValueError("not a face model file")
    chunks = dict(_iter_chunks(data, 7))
    if b"DIMS" not in chunks:
        raise ValueError("model file missing DIMS chunk")
    n_vert, rid, cid, rexp, cexp, n_tri = np.frombuffer(chunks[b"DIMS"], dtype="<u4")
    tris = (
        np.frombuffer(chunks[b"TRIS"], dtype="<u4")
        .reshape((n_tri, 3), order="F")
        .astype(np.int64)
    )
    return MultilinearModel(
        mean=_read_f64(chunks[b"MEAN"], (3 * n_vert,)),
        core=_read_f64(chunks[b"CORE"], (3 * n_vert, cid, cexp)),
        u_id=_read_f64(chunks[b"UIDM"], (rid, cid)),
        u_exp=_read_f64(chunks[b"UEXP"], (rexp, cexp)),
        mu_id=_read_f64(chunks[b"MUID"], (cid,)),
        sigma_id=_read_f64(chunks[b"SIID"], (cid, cid)),
        mu_exp=_read_f64(chunks[b"MUEX"], (cexp,)),
        sigma_exp=_read_f64(chunks[b"SIEX"], (cexp, cexp)),
        triangles=tris,
    )


def _pack_identity(model):
    return (
        _f64(model.m)
        + struct.pack("<d", model.beta)
        + _f64(model.psi)
        + struct.pack("<d", model.nu)
        + struct.pack("<d", model.alpha)
    )


def _unpack_identity(payload, dim):
    off = 0
    m = np.frombuffer(payload, dtype="<f8", count=dim, offset=off).copy()
    off += 8 * dim
    (beta,) = struct.unpack_from("<d", payload, off)
    off += 8
    psi = (
        np.frombuffer(payload, dtype="<f8", count=dim * dim, offset=off)
        .reshape((dim, dim), order="F")
        .copy()
    )
    off += 8 * dim * dim
    (nu,) = struct.unpack_from("<d", payload, off)
    (alpha,) = struct.unpack_from("<d", payload, off + 8)
    return IdentityModel(m, beta, psi, nu, alpha)


def save_store(path, store):
    dim = store.generic.dim
    head = struct.pack("<IIi", dim, len(store.models), store.present_index)
    blob = STORE_MAGIC + struct.pack("<H", FORMAT_VERSION)
    blob += _chunk(b"HEAD", head)
    blob += _chunk(b"GENM", _pack_identity(store.generic))
    for mod in store.models:
        blob += _chunk(b"MODL", _pack_identity(mod))
    atomic_write_bytes(path, blob)


def load_store(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:5] != STORE_MAGIC:
        raise ValueError("not an identity store file")
    dim = None
    present = 0
    generic = None
    models = []
    for tag, payload in _iter_chunks(data, 7):
        if tag == b"HEAD":
            dim, _count, present = struct.unpack("<IIi", payload)
        elif tag == b"GENM":
            generic = _unpack_identity(payload, dim)
        elif tag == b"MODL":
            models.append(_unpack_identity(payload, dim))
    if generic is None:
        raise ValueError("store file missing generic model")
    return IdentityStore(generic=generic, models=models, present_index=present)


# ---------------------------------------------------------------------------
# Evaluation


def evaluate(estimates, truth):
    """Per-axis mean absolute angle errors and mean translation error.

    Frames are matched by index; estimates for frames missing from the truth
    are ignored. Failed frames stay in the averages (a tracker that gives up
    still gets scored), but their count is reported separately.
    """
    truth_by_frame = {r.frame: r for r in truth}
    rows = []
    n_failed = 0
    for est in estimates:
        ref = truth_by_frame.get(est.frame)
        if ref is None:
            continue
        ang = [
            _wrap_deg(est.yaw_deg - ref.yaw_deg),
            _wrap_deg(est.pitch_deg - ref.pitch_deg),
            _wrap_deg(est.roll_deg - ref.roll_deg),
        ]
        terr = np.sqrt(
            (est.tx_mm - ref.tx_mm) ** 2
            + (est.ty_mm - ref.ty_mm) ** 2
            + (est.tz_mm - ref.tz_mm) ** 2
        )
        n_failed += int(est.failed)
        rows.append((est.frame, *np.abs(ang), terr))
    if not rows:
        raise ValueError("no overlapping frames to evaluate")
    table = np.array([r[1:] for r in rows])
    return {
        "n_frames": len(rows),
        "n_failed": n_failed,
        "mean_abs_yaw_deg": float(table[:, 0].mean()),
        "mean_abs_pitch_deg": float(table[:, 1].mean()),
        "mean_abs_roll_deg": float(table[:, 2].mean()),
        "mean_translation_err_mm": float(table[:, 3].mean()),
        "frames": [r[0] for r in rows],
        "per_frame": table,
    }


def _wrap_deg(d):
    return (d + 180.0) % 360.0 - 180.0


# ---------------------------------------------------------------------------
# Dataset adapter: RLE depth binaries + per-frame pose text files


BIWI_DEFAULT_INTRINSICS = CameraIntrinsics(f=575.816, u0=320.0, v0=240.0)


def read_rle_depth(path):
    """Depth frame from the run-length encoded binary layout.

    Layout: i32 width, i32 height, then alternating (i32 skip, i32 take)
    runs with ``take`` little-endian i16 depth values (mm) following each
    pair, row-major until width * height pixels are produced.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    w, h = struct.unpack_from("<ii", data, 0)
    out = np.zeros(w * h, dtype=np.float64)
    off = 8
    pos = 0
    total = w * h
    while pos < total:
        skip, take = struct.unpack_from("<ii", data, off)
        off += 8
        pos += skip
        if take:
            vals = np.frombuffer(data, dtype="<i2", count=take, offset=off)
            out[pos : pos + take] = vals
            off += 2 * take
            pos += take
    return DepthFrame(out.reshape(h, w))


def write_rle_depth(path, frame):
    """Writer for the same layout; used to exercise the reader."""
    depth = np.round(frame.depth).astype(np.int64).reshape(-1)
    h, w = frame.depth.shape
    blob = bytearray(struct.pack("<ii", w, h))
    pos = 0
    total = depth.size
    while pos < total:
        run = pos
        while run < total and depth[run] == 0:
            run += 1
        skip = run - pos
        take_start = run
        while run < total and depth[run] != 0:
            run += 1
        take = run - take_start
        blob += struct.pack("<ii", skip, take)
        if take:
            blob += depth[take_start:run].astype("<i2").tobytes()
        pos = run
    atomic_write_bytes(path, bytes(blob))


def read_pose_txt(path):
    """Ground-truth pose file: 3x3 rotation rows, blank line, center (mm)."""
    with open(path) as fh:
        tokens = [line.split() for line in fh if line.strip()]
    R = np.array([[float(x) for x in tokens[i]] for i in range(3)])
    center = np.array([float(x) for x in tokens[3]])
    return R, center


def load_biwi(directory, subject=None):
    """Iterate a dataset directory of RLE depth frames with pose ground truth.

    Yields (frame_index, DepthFrame, PoseRecord or None). Frames are the
    ``frame_*_depth.bin`` files in sorted order; ground truth comes from the
    matching ``frame_*_pose.txt`` when present. Intrinsics are read from a
    ``depth.cal`` (first three lines forming K) or fall back to the
    dataset's published calibration.
    """
    root = os.path.join(directory, subject) if subject else directory
    cal = os.path.join(root, "depth.cal")
    intrinsics = BIWI_DEFAULT_INTRINSICS
    if os.path.exists(cal):
        with open(cal) as fh:
            rows = [fh.readline().split() for _ in range(3)]
        K = np.array([[float(x) for x in row] for row in rows])
        intrinsics = CameraIntrinsics(f=float(K[0, 0]), u0=float(K[0, 2]), v0=float(K[1, 2]))

    names = sorted(
        f for f in os.listdir(root) if f.endswith("_depth.bin")
    )

    def frames():
        for k, name in enumerate(names):
            frame = read_rle_depth(os.path.join(root, name))
            pose_path = os.path.join(root, name.replace("_depth.bin", "_pose.txt"))
            record = None
            if os.path.exists(pose_path):
                R, center = read_pose_txt(pose_path)
                yaw, pitch, roll = euler_from_matrix(R)
                record = PoseRecord(
                    frame=k,
                    yaw_deg=float(np.degrees(yaw)),
                    pitch_deg=float(np.degrees(pitch)),
                    roll_deg=float(np.degrees(roll)),
                    tx_mm=float(center[0]),
                    ty_mm=float(center[1]),
                    tz_mm=float(center[2]),
                )
            yield k, frame, record

    return intrinsics, len(names), frames()
