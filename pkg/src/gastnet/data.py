"""Keypoint sequences: file I/O, normalisation, resampling, padding, mirroring
and a synthetic motion generator for desk-scale experiments."""
import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import DataError
from .model import pad_frames
from .skeleton import build_skeleton

FORMAT_VERSION = 1


@dataclass
class Pose2DSequence:
    skeleton: str
    fps: float
    frames: np.ndarray  # (T, N, 2)
    resolution: tuple = None  # (width, height) in pixels
    normalized: bool = False
    seq_id: str = ""

    @property
    def n_frames(self):
        return len(self.frames)


@dataclass
class Pose3DSequence:
    skeleton: str
    fps: float
    frames: np.ndarray  # (T, N, 3) millimetres, root-relative
    seq_id: str = ""

    @property
    def n_frames(self):
        return len(self.frames)


def _check_frames(frames, n_joints, dims, what):
    arr = np.asarray(frames, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != dims:
        raise DataError(f"{what}: expected (T, N, {dims}) coordinates, got shape {arr.shape}")
    if arr.shape[1] != n_joints:
        raise DataError(f"{what}: {arr.shape[1]} joints per frame, skeleton has {n_joints}")
    if len(arr) == 0:
        raise DataError(f"{what}: no frames")
    if not np.isfinite(arr).all():
        raise DataError(f"{what}: non-finite coordinates")
    return arr


def load_sequences(path):
    """Read a dataset file; returns a list of (Pose2DSequence, Pose3DSequence or None)."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed JSON ({exc})") from exc
    return sequences_from_dict(doc)


def sequences_from_dict(doc):
    try:
        version = doc["format_version"]
        skel = doc["skeleton"]
        fps = float(doc["fps"])
        seqs = doc["sequences"]
    except (KeyError, TypeError) as exc:
        raise DataError(f"dataset file missing field {exc}") from exc
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported dataset format_version {version}")
    n = build_skeleton(skel).n_joints
    res = tuple(doc["resolution"]) if doc.get("resolution") is not None else None
    normalized = bool(doc.get("normalized", False))
    if not normalized and res is None:
        raise DataError("pixel coordinates need a resolution")
    out = []
    for i, s in enumerate(seqs):
        sid = str(s.get("id", i))
        f2 = _check_frames(s["frames_2d"], n, 2, f"sequence {sid} 2D")
        p2 = Pose2DSequence(skel, fps, f2, res, normalized, sid)
        p3 = None
        if s.get("frames_3d") is not None:
            f3 = _check_frames(s["frames_3d"], n, 3, f"sequence {sid} 3D")
            if len(f3) != len(f2):
                raise DataError(f"sequence {sid}: {len(f2)} 2D frames but {len(f3)} 3D frames")
            p3 = Pose3DSequence(skel, fps, f3, sid)
        out.append((p2, p3))
    return out


def sequences_to_dict(pairs):
    if not pairs:
        raise DataError("nothing to save")
    first = pairs[0][0]
    for p2, _ in pairs:
        if (p2.skeleton, p2.fps, p2.normalized) != (first.skeleton, first.fps, first.normalized):
            raise DataError("all sequences in one file must share skeleton, fps and normalisation")
    doc = {"format_version": FORMAT_VERSION, "skeleton": first.skeleton, "fps": float(first.fps),
           "resolution": list(first.resolution) if first.resolution is not None else None,
           "normalized": first.normalized, "sequences": []}
    for p2, p3 in pairs:
        entry = {"id": p2.seq_id, "frames_2d": np.asarray(p2.frames).tolist()}
        if p3 is not None:
            entry["frames_3d"] = np.asarray(p3.frames).tolist()
        doc["sequences"].append(entry)
    return doc


def save_sequences(pairs, path):
    with open(path, "w") as fh:
        json.dump(sequences_to_dict(pairs), fh)


def save_predictions(seqs, path):
    """Write Pose3DSequence objects in the dataset schema (3D frames only)."""
    first = seqs[0]
    doc = {"format_version": FORMAT_VERSION, "skeleton": first.skeleton, "fps": float(first.fps),
           "sequences": [{"id": s.seq_id, "frames_3d": np.asarray(s.frames).tolist()}
                         for s in seqs]}
    with open(path, "w") as fh:
        json.dump(doc, fh)


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------

def normalize(seq):
    """Pixels to width-scaled centred coordinates: x in [-1, 1], aspect kept."""
    if seq.normalized:
        return seq
    if seq.resolution is None:
        raise DataError("cannot normalise without a resolution")
    w, h = seq.resolution
    if w == 0:
        raise DataError("zero image width")
    f = np.asarray(seq.frames, dtype=np.float64)
    out = np.empty_like(f)
    out[..., 0] = 2.0 * f[..., 0] / w - 1.0
    out[..., 1] = 2.0 * f[..., 1] / w - h / w
    return replace(seq, frames=out, normalized=True)


def downsample(seq, factor):
    if int(factor) != factor or factor < 1:
        raise DataError(f"downsampling factor must be a positive integer, got {factor}")
    factor = int(factor)
    return replace(seq, frames=seq.frames[::factor], fps=seq.fps / factor)


def pad_for_receptive_field(seq, rf, causal=False):
    return replace(seq, frames=pad_frames(np.asarray(seq.frames), rf, causal))


def mirror(frames, perm):
    """Negate x and swap left/right joints; works for (..., N, 2) and (..., N, 3)."""
    out = np.array(frames)[..., perm, :]
    out[..., 0] *= -1
    return out


def horizontal_flip(pair, flip_perm):
    """Mirror a (2D, 3D-or-None) pair; the 2D part must be normalised."""
    p2, p3 = pair
    if not p2.normalized:
        raise DataError("flip needs normalised 2D coordinates")
    f2 = replace(p2, frames=mirror(p2.frames, flip_perm))
    f3 = None if p3 is None else replace(p3, frames=mirror(p3.frames, flip_perm))
    return f2, f3


# ---------------------------------------------------------------------------
# synthetic motion
# ---------------------------------------------------------------------------

# rest-pose bone vectors (mm) from parent to child, body frame: x = subject's
# left, y = up, z = forward
_BONES = {
    "r_hip": (-130, 0, 0), "r_knee": (0, -450, 0), "r_ankle": (0, -440, 0),
    "l_hip": (130, 0, 0), "l_knee": (0, -450, 0), "l_ankle": (0, -440, 0),
    "spine": (0, 230, 0), "thorax": (0, 250, 0), "neck": (0, 110, 0), "head": (0, 115, 0),
    "l_shoulder": (150, 0, 0), "l_elbow": (0, -280, 0), "l_wrist": (0, -250, 0),
    "r_shoulder": (-150, 0, 0), "r_elbow": (0, -280, 0), "r_wrist": (0, -250, 0),
}


@dataclass(frozen=True)
class PinholeCamera:
    focal: float = 1000.0
    width: int = 1000
    height: int = 1000
    distance: float = 4500.0  # mm from camera to the subject's root

    @property
    def center(self):
        return np.array([self.width / 2.0, self.height / 2.0])

    def project(self, points):
        """Camera-frame points (..., 3) in mm (x right, y down, z forward) to pixels."""
        p = np.asarray(points, dtype=np.float64)
        return self.focal * p[..., :2] / p[..., 2:3] + self.center


def _rotation(axis_angles):
    """Rotation matrices from (..., 3) axis-angle vectors (Rodrigues)."""
    v = np.asarray(axis_angles, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1, keepdims=True)
    k = np.where(theta > 1e-12, v / np.maximum(theta, 1e-12), 0.0)
    K = np.zeros(v.shape[:-1] + (3, 3))
    K[..., 0, 1], K[..., 0, 2] = -k[..., 2], k[..., 1]
    K[..., 1, 0], K[..., 1, 2] = k[..., 2], -k[..., 0]
    K[..., 2, 0], K[..., 2, 1] = -k[..., 1], k[..., 0]
    s, c = np.sin(theta)[..., None], np.cos(theta)[..., None]
    return np.eye(3) + s * K + (1 - c) * (K @ K)


def forward_kinematics(skeleton, local_rot, root_rot):
    """Joint positions (T, N, 3) in the body frame from per-joint local rotations.

    ``local_rot[:, j]`` rotates the subtree hanging from joint j.
    """
    T, N = local_rot.shape[:2]
    glob = np.empty((T, N, 3, 3))
    pos = np.zeros((T, N, 3))
    for j, p in enumerate(skeleton.parents):
        if p < 0:
            glob[:, j] = root_rot @ local_rot[:, j]
            continue
        bone = np.array(_BONES[skeleton.joint_names[j]], dtype=np.float64)
        pos[:, j] = pos[:, p] + glob[:, p] @ bone
        glob[:, j] = glob[:, p] @ local_rot[:, j]
    return pos


def synth_dataset(seed=0, n_sequences=20, length=200, skeleton="h36m17", fps=50.0,
                  camera=None, max_angle=0.6):
    """Paired 2D/3D sequences from smooth joint-angle motion seen by a pinhole camera.

    Every joint angle is a sum of two sinusoids with random frequency and phase,
    bounded by ``max_angle`` radians; the subject yaws and sways slowly. 3D
    targets are camera-frame, root-relative millimetres; 2D is in pixels.
    """
    if skeleton != "h36m17":
        raise DataError("synthetic generator only models the h36m17 skeleton")
    g = build_skeleton(skeleton)
    cam = camera or PinholeCamera()
    rng = np.random.default_rng(seed)
    N = g.n_joints
    t = np.arange(length) / fps
    pairs = []
    for s in range(n_sequences):
        amp = rng.uniform(0.1, 1.0, size=(2, N, 3)) * max_angle / 2
        freq = rng.uniform(0.2, 1.2, size=(2, N, 3))
        phase = rng.uniform(0, 2 * np.pi, size=(2, N, 3))
        angles = (amp[:, None] * np.sin(2 * np.pi * freq[:, None] * t[None, :, None, None]
                                        + phase[:, None])).sum(axis=0)
        angles[:, g.root] = 0.0
        local = _rotation(angles)

        yaw0 = rng.uniform(-np.pi, np.pi)
        yaw_rate = rng.uniform(-0.5, 0.5)
        yaw = yaw0 + yaw_rate * t
        root_rot = _rotation(np.stack([np.zeros_like(yaw), yaw, np.zeros_like(yaw)], axis=-1))
        body = forward_kinematics(g, local, root_rot)

        # body frame (y up) to camera frame (y down), subject in front of camera
        cam_pts = body * np.array([1.0, -1.0, 1.0])
        sway = rng.uniform(-300, 300, size=3) * np.sin(2 * np.pi * rng.uniform(0.05, 0.2) * t)[:, None]
        root = np.array([0.0, 0.0, cam.distance]) + sway
        cam_pts = cam_pts + root[:, None, :]

        pix = cam.project(cam_pts)
        p3 = cam_pts - cam_pts[:, g.root:g.root + 1]
        sid = f"synth{s:03d}"
        pairs.append((Pose2DSequence(skeleton, fps, pix, (cam.width, cam.height), False, sid),
                      Pose3DSequence(skeleton, fps, p3, sid)))
    return pairs
