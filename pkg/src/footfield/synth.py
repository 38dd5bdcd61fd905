"""Procedural synthetic foot scans: shapes, poses, colours, keypoints, labels.

A foot is assembled from a deformed-ellipsoid sole, five ellipsoid toes, and
a vertical ankle stub capped by the slice plane. Identity parameters (length,
width, arch, toe lengths, skin tone) are drawn per identity; pose parameters
(pitch/roll/yaw about an ankle pivot, toe flexion and splay) per scan, mapped
onto the pose-description vocabulary so label vectors and geometry stay
consistent (e.g. a Plantarflex scan always has negative pitch).

Canonical scans follow the alignment convention: floor at z = 0, footprint
centroid at the XY origin, slice plane 10 cm above the heel with masked white
cap faces. Raw scans are cut higher and rigidly perturbed for exercising the
alignment pipeline. Everything is deterministic per seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .align import canonicalize_translation, slice_mesh_at_z
from .losses import encode_pose_label
from .mesh import TriMesh, load_mesh, save_mesh

KEYPOINT_NAMES = ("heel", "toe1", "toe5", "ankle", "arch", "ball")

RAW_CUT_ABOVE_HEEL = 0.13
CANONICAL_CUT_ABOVE_HEEL = 0.10


@dataclass
class FootShape:
    length: float
    width: float
    height: float
    arch: float
    toe_lengths: np.ndarray
    toe_radii: np.ndarray
    skin_tone: float
    tint: np.ndarray
    phase: float


@dataclass
class FootPose:
    pitch: float = 0.0      # negative = plantarflex (toes down)
    roll: float = 0.0       # negative = inversion
    yaw: float = 0.0        # negative = lateral rotation
    toe_flex: float = 0.0   # negative = flexion (toes curl down)
    toe_splay: float = 0.0  # positive = abduction (toes outward)

    def as_dict(self) -> dict:
        return {"pitch": self.pitch, "roll": self.roll, "yaw": self.yaw,
                "toe_flex": self.toe_flex, "toe_splay": self.toe_splay}


# pose-description name -> (attribute, nominal magnitude)
_POSE_EFFECTS = {
    "T-Pose": {},
    "Plantarflex": {"pitch": -0.16},
    "Dorsiflex": {"pitch": 0.13},
    "Inversion": {"roll": -0.13},
    "Eversion": {"roll": 0.11},
    "Lateral rotation": {"yaw": -0.13},
    "Medial rotation": {"yaw": 0.13},
    "Toe Flexion": {"toe_flex": -0.38},
    "Toe Extension": {"toe_flex": 0.30},
    "Toe Abduction": {"toe_splay": 0.22},
    "Toe Adduction": {"toe_splay": -0.15},
    "Standing on Floor": {},
    "Tiptoes": {"pitch": -0.20, "toe_flex": 0.18},
}

_ARTICULATED_POOL = (
    ["Plantarflex"], ["Dorsiflex"], ["Inversion"], ["Eversion"],
    ["Lateral rotation"], ["Medial rotation"], ["Toe Flexion"], ["Toe Extension"],
    ["Toe Abduction"], ["Toe Adduction"], ["Tiptoes"], ["Standing on Floor"],
    ["Dorsiflex", "Inversion"], ["Plantarflex", "Toe Flexion"],
    ["Dorsiflex", "Toe Extension"], ["Eversion", "Medial rotation"],
)

# validation feet exercise articulation. Whole-foot pitch/roll/yaw are
# nearly rigid (a registration can absorb them); the strong categories
# move the toes against the body so no rigid+scale fit gets close.
_STRONG_POOL = (
    ["Toe Flexion"], ["Toe Extension"], ["Tiptoes"],
    ["Plantarflex", "Toe Extension"], ["Dorsiflex", "Toe Flexion"],
    ["Toe Flexion", "Inversion"], ["Toe Extension", "Toe Abduction"],
)


def sample_shape(rng: np.random.Generator) -> FootShape:
    length = float(np.clip(rng.normal(0.245, 0.02), 0.20, 0.30))
    width = length * float(np.clip(rng.normal(0.38, 0.035), 0.30, 0.47))
    height = length * float(np.clip(rng.normal(0.30, 0.03), 0.23, 0.37))
    arch = float(rng.uniform(0.004, 0.015))
    toe_lengths = length * 0.155 * np.array([1.0, 0.93, 0.85, 0.74, 0.62]) \
        * (1.0 + rng.normal(0.0, 0.08, size=5))
    toe_radii = width * 0.085 * np.array([1.3, 0.95, 0.9, 0.85, 0.82]) \
        * (1.0 + rng.normal(0.0, 0.06, size=5))
    return FootShape(length, width, height, arch,
                     np.clip(toe_lengths, 0.015, None), np.clip(toe_radii, 0.005, None),
                     skin_tone=float(rng.uniform(0.35, 0.85)),
                     tint=rng.normal(0.0, 0.02, size=3),
                     phase=float(rng.uniform(0.0, 2.0 * np.pi)))


def mean_shape() -> FootShape:
    return FootShape(0.245, 0.245 * 0.38, 0.245 * 0.30, 0.009,
                     0.245 * 0.155 * np.array([1.0, 0.93, 0.85, 0.74, 0.62]),
                     0.245 * 0.38 * 0.085 * np.array([1.3, 0.95, 0.9, 0.85, 0.82]),
                     skin_tone=0.6, tint=np.zeros(3), phase=0.0)


def pose_from_names(names: list[str], rng: np.random.Generator | None = None,
                    scale: float = 1.0) -> FootPose:
    pose = FootPose()
    for name in names:
        if name not in _POSE_EFFECTS:
            raise ValueError(f"unknown pose description {name!r}")
        for attr, mag in _POSE_EFFECTS[name].items():
            jitter = 1.0 if rng is None else float(rng.uniform(0.85, 1.15))
            setattr(pose, attr, getattr(pose, attr) + mag * jitter * scale)
    return pose


# ---------------------------------------------------------------------------
# mesh construction
# ---------------------------------------------------------------------------

def _uv_sphere(nu: int, nv: int):
    """Unit sphere grid with poles at ±Z; returns (verts, faces)."""
    verts = [np.array([0.0, 0.0, 1.0])]
    for i in range(1, nu):
        theta = np.pi * i / nu
        for j in range(nv):
            phi = 2.0 * np.pi * j / nv
            verts.append(np.array([np.sin(theta) * np.cos(phi),
                                   np.sin(theta) * np.sin(phi),
                                   np.cos(theta)]))
    verts.append(np.array([0.0, 0.0, -1.0]))
    faces = []
    for j in range(nv):
        faces.append([0, 1 + j, 1 + (j + 1) % nv])
    for i in range(nu - 2):
        r0 = 1 + i * nv
        r1 = 1 + (i + 1) * nv
        for j in range(nv):
            a, b = r0 + j, r0 + (j + 1) % nv
            c, d = r1 + j, r1 + (j + 1) % nv
            faces.append([a, c, b])
            faces.append([b, c, d])
    last = len(verts) - 1
    r0 = 1 + (nu - 2) * nv
    for j in range(nv):
        faces.append([last, r0 + (j + 1) % nv, r0 + j])
    return np.asarray(verts), np.asarray(faces, dtype=np.int64)


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _sole(shape: FootShape, quality: float):
    nu = max(10, int(round(16 * quality)))
    nv = max(12, int(round(26 * quality)))
    s, faces = _uv_sphere(nu, nv)
    # poles along X: heel at x=0, toe front at x=L
    sx, sy, sz = s[:, 2], s[:, 1], s[:, 0]
    xh = (sx + 1.0) / 2.0
    wprof = 0.60 + 0.40 * np.exp(-((xh - 0.62) / 0.33) ** 2)
    hprof = shape.height * (0.52 + 0.48 * np.exp(-((xh - 0.32) / 0.25) ** 2)) \
        * (1.0 - 0.50 * _smoothstep((xh - 0.78) / 0.14))
    cz = (sz + 1.0) / 2.0
    z = hprof * cz ** 1.25
    # arch lifts the medial sole bottom in the midfoot
    medial = np.clip(sy, 0.0, None)
    z = z + shape.arch * np.exp(-((xh - 0.47) / 0.13) ** 2) * medial * (1.0 - cz)
    x = 0.82 * shape.length * xh  # sole ends at the ball; toes carry the rest
    y = 0.5 * shape.width * wprof * sy
    return np.stack([x, y, z], axis=1), faces


def _ellipsoid(center, axis_dir, semi_axis, semi_b, semi_c, nu, nv):
    s, faces = _uv_sphere(nu, nv)
    d = np.asarray(axis_dir, dtype=np.float64)
    d = d / np.linalg.norm(d)
    ref = np.array([0.0, 0.0, 1.0])
    if abs(d @ ref) > 0.95:
        ref = np.array([0.0, 1.0, 0.0])
    e1 = np.cross(ref, d)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(d, e1)
    # sphere poles (±Z) map onto the ellipsoid main axis
    pts = (center[None, :] + s[:, 2:3] * semi_axis * d[None, :]
           + s[:, 0:1] * semi_b * e1[None, :] + s[:, 1:2] * semi_c * e2[None, :])
    return pts, faces


def build_foot(shape: FootShape, pose: FootPose, quality: float = 1.0,
               cut_above_heel: float = CANONICAL_CUT_ABOVE_HEEL,
               noise: float = 0.0004, noise_seed: int = 0):
    """Assemble, articulate, colour, slice, and canonicalize one foot.

    ``noise`` is the scanner-style per-vertex jitter (meters); it also keeps
    the sole from being perfectly planar, which would shadow the cut plane in
    the alignment detector. Returns (TriMesh, keypoints dict name -> (3,)).
    """
    parts_v = []
    parts_f = []
    kinds = []  # 0 sole, 1 toe, 2 ankle

    sole_v, sole_f = _sole(shape, quality)
    parts_v.append(sole_v)
    parts_f.append(sole_f)
    kinds.append(np.zeros(len(sole_v), dtype=int))

    tip_points = {}
    half_w = shape.width / 2.0
    nu_t = max(5, int(round(7 * quality)))
    nv_t = max(6, int(round(9 * quality)))
    for i in range(5):
        yi = half_w * (0.55 - 0.275 * i)
        ri = shape.toe_radii[i]
        li = shape.toe_lengths[i]
        base = np.array([shape.length * (0.80 - 0.05 * (i / 4.0)) - 0.25 * li,
                         yi, ri * 1.05 + 0.001])
        alpha = pose.toe_flex
        beta = pose.toe_splay * (yi / half_w)
        d = np.array([np.cos(alpha) * np.cos(beta),
                      np.cos(alpha) * np.sin(beta),
                      np.sin(alpha)])
        a_ax = 0.5 * li + ri
        center = base + d * (0.5 * li)
        tv, tf = _ellipsoid(center, d, a_ax, ri, 0.9 * ri, nu_t, nv_t)
        parts_v.append(tv)
        parts_f.append(tf)
        kinds.append(np.full(len(tv), 1, dtype=int))
        tip_points[i] = center + d * a_ax

    # ankle stub above the static footprint centroid, offset in +Y only, so
    # the cut-plane-to-footprint line of a neutral foot points along -Y
    body = np.concatenate(parts_v)
    floor = body[:, 2].min()
    band = body[:, 2] <= floor + 0.005
    fc = body[band].mean(axis=0)
    ankle_y = fc[1] + 0.015
    r_a = 0.62 * half_w
    z_bot = 0.45 * shape.height
    z_top = 0.055 + RAW_CUT_ABOVE_HEEL + 0.035
    av, af = _ellipsoid(np.array([fc[0], ankle_y, 0.5 * (z_bot + z_top)]),
                        np.array([0.0, 0.0, 1.0]), 0.5 * (z_top - z_bot),
                        r_a, 0.9 * r_a, max(8, int(round(10 * quality))),
                        max(8, int(round(11 * quality))))
    parts_v.append(av)
    parts_f.append(af)
    kinds.append(np.full(len(av), 2, dtype=int))

    offsets = np.cumsum([0] + [len(v) for v in parts_v])
    verts = np.concatenate(parts_v)
    faces = np.concatenate([f + offsets[i] for i, f in enumerate(parts_f)])
    kind = np.concatenate(kinds)
    if noise > 0:
        nrng = np.random.default_rng(noise_seed)
        verts = verts + nrng.normal(0.0, noise, size=verts.shape)

    keypoints = {
        "heel": np.array([0.002, 0.0, 0.45 * shape.height * 0.5]),
        "toe1": tip_points[0],
        "toe5": tip_points[4],
        "ankle": np.array([fc[0] + r_a * 0.95, ankle_y, 0.088]),
        "arch": np.array([0.47 * shape.length, 0.25 * shape.width, shape.arch * 0.9]),
        "ball": np.array([0.72 * shape.length, 0.0, 0.004]),
    }

    colors = _colorize(verts, kind, shape, tip_points)

    # canonical frame from the *static* footprint: scans of one identity share
    # a frame and differ only by articulation
    shift = np.array([-fc[0], -fc[1], -floor])
    verts = verts + shift
    keypoints = {k: v + shift for k, v in keypoints.items()}

    # ankle-anchored articulation: full effect below z0, rigid above z1
    pivot = np.array([0.0, 0.0, 0.085])
    z0, z1 = 0.070, 0.095

    def articulate(pts):
        w = 1.0 - _smoothstep((pts[:, 2] - z0) / (z1 - z0))
        rel = pts - pivot
        out = rel.copy()
        # pitch rotates in the (x, z) plane with positive = toes up, so
        # Plantarflex scans always carry a negative pitch parameter
        for angle, (i, j) in ((pose.pitch, (0, 2)), (pose.roll, (1, 2)),
                              (pose.yaw, (0, 1))):
            if angle == 0.0:
                continue
            th = angle * w
            c, s = np.cos(th), np.sin(th)
            r = out.copy()
            out[:, i] = c * r[:, i] - s * r[:, j]
            out[:, j] = s * r[:, i] + c * r[:, j]
        return out + pivot

    verts = articulate(verts)
    keypoints = {k: articulate(v[None, :])[0] for k, v in keypoints.items()}

    mesh = TriMesh(verts, faces, colors)
    heel_z = _heel_z(mesh)
    mesh = slice_mesh_at_z(mesh, heel_z + cut_above_heel)
    return mesh, keypoints


def _heel_z(mesh: TriMesh) -> float:
    v = mesh.vertices
    low = v[:, 2] < v[:, 2].mean()
    cand = np.nonzero(low)[0]
    heel = cand[np.argmin(v[cand, 0])]
    return float(v[heel, 2])


def _colorize(verts, kind, shape: FootShape, tip_points) -> np.ndarray:
    t = shape.skin_tone
    base = np.array([0.45 + 0.50 * t, 0.33 + 0.42 * t, 0.25 + 0.34 * t]) + shape.tint
    c = np.tile(base, (len(verts), 1))
    sole_w = np.exp(-np.clip(verts[:, 2], 0.0, None) / 0.012)
    c *= (1.0 - 0.22 * sole_w)[:, None]
    toe_mask = kind == 1
    c[toe_mask] += np.array([0.05, -0.01, -0.02])
    # nail patches near the toe tips, top side
    for tip in tip_points.values():
        d = np.linalg.norm(verts - tip, axis=1)
        nail = (d < 0.011) & (verts[:, 2] > tip[2] - 0.004) & toe_mask
        c[nail] = 0.55 * c[nail] + 0.45 * np.array([0.93, 0.89, 0.82])
    ripple = 0.035 * np.sin(verts[:, 0] / max(shape.length, 1e-6) * 5.0 + shape.phase)
    c += ripple[:, None] * np.array([1.0, 0.8, 0.7])
    return np.clip(c, 0.0, 1.0)


# ---------------------------------------------------------------------------
# dataset bundle
# ---------------------------------------------------------------------------

@dataclass
class ScanRecord:
    scan_id: str
    identity: str
    split: str                      # train | val
    mesh: TriMesh
    pose_names: list[str]
    pose_vector: np.ndarray
    pose_params: dict
    keypoints: dict[str, np.ndarray]


@dataclass
class DatasetBundle:
    template: TriMesh
    template_keypoint_vertices: dict[str, int]
    scans: list[ScanRecord]
    seed: int

    def split(self, name: str) -> list[ScanRecord]:
        return [s for s in self.scans if s.split == name]

    def by_id(self, scan_id: str) -> ScanRecord:
        for s in self.scans:
            if s.scan_id == scan_id:
                return s
        raise KeyError(scan_id)


def generate_synthetic_dataset(n_identities: int = 10, poses_per_identity: int = 3,
                               seed: int = 0, n_val_identities: int = 4,
                               quality: float = 1.0) -> DatasetBundle:
    """Procedural dataset: ``n_identities`` training identities with
    ``poses_per_identity`` scans each (first is always T-Pose), plus
    ``n_val_identities`` validation identities with a T-Pose and one
    articulated scan each, plus a held-out template identity."""
    rng = np.random.default_rng(seed)

    template_mesh, template_kp = build_foot(mean_shape(), FootPose(), quality,
                                            noise_seed=seed + 7919)
    kp_vertices = {name: int(np.argmin(np.linalg.norm(
        template_mesh.vertices - p, axis=1))) for name, p in template_kp.items()}

    scans: list[ScanRecord] = []

    def make_scans(identity: str, split: str, n_poses: int, shape: FootShape,
                   pool=_ARTICULATED_POOL, pose_scale=(0.9, 1.8)):
        for k in range(n_poses):
            if k == 0:
                names = ["T-Pose"]
            else:
                names = list(pool[rng.integers(len(pool))])
            pose = pose_from_names(names, rng,
                                   scale=float(rng.uniform(*pose_scale)))
            mesh, kps = build_foot(shape, pose, quality,
                                   noise_seed=int(rng.integers(2 ** 31)))
            scans.append(ScanRecord(
                scan_id=f"{identity}-{k:02d}", identity=identity, split=split,
                mesh=mesh, pose_names=names, pose_vector=encode_pose_label(names),
                pose_params=pose.as_dict(), keypoints=kps))

    for i in range(n_identities):
        make_scans(f"id{i:03d}", "train", poses_per_identity, sample_shape(rng))
    for i in range(n_val_identities):
        # articulated validation feet are deliberately far from any rigid fit
        make_scans(f"val{i:03d}", "val", 2, sample_shape(rng), pool=_STRONG_POOL,
                   pose_scale=(1.4, 1.9))

    return DatasetBundle(template_mesh, kp_vertices, scans, seed)


def generate_raw_scan(seed: int, max_angle: float = 0.4,
                      max_shift: float = 0.15, quality: float = 1.0):
    """One unaligned scan: cut high on the shin and rigidly perturbed.

    Returns (unperturbed tall mesh, perturbed mesh, rotation, translation);
    alignment recovery is checked by aligning both and comparing, which is
    intrinsic to the geometry and independent of the perturbation.
    """
    rng = np.random.default_rng(seed)
    shape = sample_shape(rng)
    names = list(_ARTICULATED_POOL[rng.integers(len(_ARTICULATED_POOL))])
    pose = pose_from_names(names, rng)
    nseed = int(rng.integers(2 ** 31))
    tall, _ = build_foot(shape, pose, quality, cut_above_heel=RAW_CUT_ABOVE_HEEL,
                         noise_seed=nseed)
    angles = rng.uniform(-max_angle, max_angle, size=3)
    from .model import _euler_matrix
    rot = _euler_matrix(angles)
    shift = rng.uniform(-max_shift, max_shift, size=3)
    raw = tall.with_vertices(tall.vertices @ rot.T + shift)
    return tall, raw, rot, shift


# ---------------------------------------------------------------------------
# on-disk layout: scans/<scan_id>.ply (+ .mask.json) and meta.json
# ---------------------------------------------------------------------------

def save_dataset(bundle: DatasetBundle, out_dir) -> None:
    out = Path(out_dir)
    (out / "scans").mkdir(parents=True, exist_ok=True)
    save_mesh(bundle.template, out / "template.ply")
    meta = {
        "units": "meters",
        "seed": bundle.seed,
        "keypoint_names": list(KEYPOINT_NAMES),
        "template": {"file": "template.ply",
                     "keypoint_vertices": bundle.template_keypoint_vertices},
        "scans": [],
    }
    for s in bundle.scans:
        save_mesh(s.mesh, out / "scans" / f"{s.scan_id}.ply")
        meta["scans"].append({
            "scan_id": s.scan_id, "identity": s.identity, "split": s.split,
            "file": f"scans/{s.scan_id}.ply",
            "pose_names": s.pose_names,
            "pose_vector": [int(x) for x in s.pose_vector],
            "pose_params": s.pose_params,
            "keypoints": {k: [float(x) for x in v] for k, v in s.keypoints.items()},
        })
    (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_dataset(directory) -> DatasetBundle:
    root = Path(directory)
    meta = json.loads((root / "meta.json").read_text())
    template = load_mesh(root / meta["template"]["file"])
    scans = []
    for row in meta["scans"]:
        scans.append(ScanRecord(
            scan_id=row["scan_id"], identity=row["identity"], split=row["split"],
            mesh=load_mesh(root / row["file"]),
            pose_names=list(row["pose_names"]),
            pose_vector=np.asarray(row["pose_vector"], dtype=np.int64),
            pose_params=dict(row.get("pose_params", {})),
            keypoints={k: np.asarray(v) for k, v in row["keypoints"].items()}))
    return DatasetBundle(template, {k: int(v) for k, v in
                                    meta["template"]["keypoint_vertices"].items()},
                         scans, int(meta.get("seed", 0)))
