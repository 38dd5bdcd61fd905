"""Differentiable soft rasterizer, camera model, and image metrics.

The soft rasterizer follows the usual recipe: per pixel, up to K candidate
faces are selected by screen-space distance (a non-differentiable pass in
``kernels``); coverage is a sigmoid of signed squared distance to the
triangle boundary over ``sigma``; the silhouette aggregates coverage as
1 - prod(1 - D); attribute channels blend clipped-barycentric face values
with softmax-over-depth weights at temperature ``gamma`` plus a background
term. Everything downstream of selection is composed from autodiff
primitives, so gradients flow to vertices and attributes.

Faces marked in the mesh's slice mask are dropped before rasterization when
the job requests masking, so the artificial cut plane contributes nothing.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor
from .mesh import TriMesh

_COVERAGE_CUTOFF = 30.0  # sigmoid argument beyond which coverage is numerically 0/1


@dataclass
class Camera:
    """Perspective pinhole camera; right-handed, looks from position to look_at."""

    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    vertical_fov: float = np.deg2rad(30.0)
    height: int = 128
    width: int = 128

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.look_at = np.asarray(self.look_at, dtype=np.float64)
        self.up = np.asarray(self.up, dtype=np.float64)
        forward = self.look_at - self.position
        n = np.linalg.norm(forward)
        if n < 1e-12:
            raise ValueError("camera position and look_at coincide")
        cross = np.cross(forward / n, self.up)
        if np.linalg.norm(cross) < 1e-9:
            raise ValueError("camera up vector is parallel to the view direction")

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        forward = self.look_at - self.position
        forward = forward / np.linalg.norm(forward)
        right = np.cross(forward, self.up)
        right = right / np.linalg.norm(right)
        true_up = np.cross(right, forward)
        return right, true_up, forward


@dataclass
class RenderJob:
    """Rasterization parameters: soft-edge bandwidth sigma and depth-blend
    temperature gamma are in NDC units; channels selects the output."""

    camera: Camera
    sigma: float = 1e-4
    gamma: float = 1e-4
    channels: str = "silhouette"  # silhouette | rgb | attributes
    mask_slice_faces: bool = True
    faces_per_pixel: int = 8
    background: float = 0.0

    def __post_init__(self):
        if self.sigma <= 0 or self.gamma <= 0:
            raise ValueError("sigma and gamma must be positive")
        if self.channels not in ("silhouette", "rgb", "attributes"):
            raise ValueError(f"unknown channel selection {self.channels!r}")


@dataclass
class RenderResult:
    image: Tensor   # (H, W, C)
    alpha: Tensor   # (H, W)


def project_points(vertices, camera: Camera):
    """Project to NDC; returns (xy (V,2), view-depth z (V,1)) as Tensors."""
    v = ad._lift(vertices)
    right, true_up, forward = camera.basis()
    rot = np.stack([right, true_up, forward])        # world -> camera rows
    cam = ad.matmul(ad.sub(v, Tensor(camera.position.reshape(1, 3))),
                    Tensor(rot.T.copy()))
    x = cam[:, 0:1]
    y = cam[:, 1:2]
    z = cam[:, 2:3]
    tan_half = np.tan(camera.vertical_fov / 2.0)
    aspect = camera.width / camera.height
    zz = ad.concat([z, z], axis=1)
    xy = ad.concat([x, y], axis=1)
    scale = np.array([[1.0 / (tan_half * aspect), 1.0 / tan_half]])
    ndc = ad.mul(ad.div(xy, zz), Tensor(scale))
    return ndc, z


def pixel_grid_ndc(h: int, w: int) -> np.ndarray:
    """(H*W, 2) NDC coordinates of pixel centers, row-major, row 0 at top."""
    xs = 2.0 * (np.arange(w) + 0.5) / w - 1.0
    ys = 1.0 - 2.0 * (np.arange(h) + 0.5) / h
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def _cross2(ux, uy, vx, vy):
    return ad.sub(ad.mul(ux, vy), ad.mul(uy, vx))


def rasterize(vertices, faces: np.ndarray, job: RenderJob,
              attributes=None, slice_face_mask: np.ndarray | None = None) -> RenderResult:
    """Soft-rasterize a triangle mesh.

    ``vertices`` (V,3) and ``attributes`` (V,C) may be Tensors; the result is
    differentiable with respect to both. Raises when every face is masked out
    or the mesh is empty.
    """
    v = ad._lift(vertices)
    faces = np.asarray(faces, dtype=np.int64)
    h, w = job.camera.height, job.camera.width
    k = job.faces_per_pixel
    p = h * w

    if len(faces) == 0:  # empty scene renders as pure background
        c = {"silhouette": 1, "rgb": 3}.get(job.channels)
        if c is None:
            c = ad._lift(attributes).shape[1] if attributes is not None else 1
        return RenderResult(Tensor(np.full((h, w, c), job.background)),
                            Tensor(np.zeros((h, w))))
    valid = np.ones(len(faces), dtype=bool)
    if job.mask_slice_faces and slice_face_mask is not None:
        valid &= ~np.asarray(slice_face_mask, dtype=bool)
    if not valid.any():
        raise ValueError("nothing to rasterize: every face is masked out")

    ndc, zt = project_points(v, job.camera)
    z_np = zt.data[:, 0]
    valid &= (z_np[faces] > 1e-6).all(axis=1)
    if not valid.any():
        raise ValueError("nothing to rasterize: all faces behind the camera")

    # non-differentiable face selection
    face_xy = ndc.data[faces]
    z_lo, z_hi = z_np.min(), z_np.max()
    z_near = max(z_lo * 0.9, 1e-6)
    z_far = z_hi * 1.1 + 1e-6
    face_cz = z_np[faces].mean(axis=1)
    depth_rank = (face_cz - z_near) / (z_far - z_near)
    radius = max(np.sqrt(_COVERAGE_CUTOFF * job.sigma), 2.5 * 2.0 / max(h, w))
    sel = kernels.select_faces(face_xy, depth_rank, valid, h, w, k, radius)

    keep = sel >= 0
    sel_safe = np.where(keep, sel, 0)
    keep_f = keep.astype(np.float64)

    corner_ids = [faces[sel_safe, c].ravel() for c in range(3)]
    axy = [ad.reshape(ad.take_rows(ndc, ci), (p, k, 2)) for ci in corner_ids]
    az = [ad.reshape(ad.take_rows(zt, ci), (p, k)) for ci in corner_ids]

    pix = pixel_grid_ndc(h, w)                       # (P, 2)
    pix_pk = np.broadcast_to(pix[:, None, :], (p, k, 2)).copy()

    # squared distance to the triangle boundary: min over the three edges
    edge_d2 = []
    for c in range(3):
        a = axy[c]
        b = axy[(c + 1) % 3]
        e = ad.sub(b, a)
        q = ad.sub(Tensor(pix_pk), a)
        ee = ad.tensor_sum(ad.mul(e, e), axis=2)
        t_raw = ad.div(ad.tensor_sum(ad.mul(q, e), axis=2),
                       ad.add(ee, Tensor(np.full((p, k), 1e-12))))
        t01 = ad.clamp01(t_raw)
        t2 = ad.concat([ad.reshape(t01, (p, k, 1)), ad.reshape(t01, (p, k, 1))], axis=2)
        diff = ad.sub(q, ad.mul(t2, e))
        edge_d2.append(ad.reshape(ad.tensor_sum(ad.mul(diff, diff), axis=2), (p, k, 1)))
    d2 = ad.min_reduce(ad.concat(edge_d2, axis=2), axis=2)    # (P, K)

    # inside/outside sign, held constant (its derivative is zero a.e.)
    sgn = _inside_sign(face_xy[sel_safe], pix_pk)
    t_cov = ad.mul(d2, Tensor(sgn / job.sigma))

    # silhouette: alpha = 1 - prod_k (1 - D_k), stabilized in log space
    log_one_minus = ad.mul(ad.softplus(t_cov), Tensor(keep_f))
    alpha_flat = ad.sub(1.0, ad.exp(ad.neg(ad.tensor_sum(log_one_minus, axis=1))))
    alpha = ad.reshape(alpha_flat, (h, w))

    if job.channels == "silhouette":
        image = ad.reshape(alpha_flat, (h, w, 1))
        return RenderResult(image, alpha)

    if job.channels == "rgb":
        if attributes is None:
            raise ValueError("rgb rendering requires per-vertex colours as attributes")
    elif attributes is None:
        raise ValueError("attribute rendering requires per-vertex attributes")
    attrs = ad._lift(attributes)
    c_dim = attrs.shape[1]

    # clipped barycentric weights
    pax = ad.sub(Tensor(pix_pk[:, :, 0]), ad.reshape(axy[0][:, :, 0:1], (p, k)))
    pay = ad.sub(Tensor(pix_pk[:, :, 1]), ad.reshape(axy[0][:, :, 1:2], (p, k)))
    raw = []
    for c in range(3):
        u = axy[(c + 1) % 3]
        vv = axy[(c + 2) % 3]
        ux = ad.sub(ad.reshape(u[:, :, 0:1], (p, k)), Tensor(pix_pk[:, :, 0]))
        uy = ad.sub(ad.reshape(u[:, :, 1:2], (p, k)), Tensor(pix_pk[:, :, 1]))
        vx = ad.sub(ad.reshape(vv[:, :, 0:1], (p, k)), Tensor(pix_pk[:, :, 0]))
        vy = ad.sub(ad.reshape(vv[:, :, 1:2], (p, k)), Tensor(pix_pk[:, :, 1]))
        raw.append(_cross2(ux, uy, vx, vy))
    total = ad.add(ad.add(raw[0], raw[1]), raw[2])
    # keep the divisor away from zero while preserving its sign
    tot_sign = np.where(total.data >= 0.0, 1.0, -1.0)
    total_safe = ad.add(total, Tensor(tot_sign * 1e-12))
    bary = [ad.clamp01(ad.div(r, total_safe)) for r in raw]
    bsum = ad.add(ad.add(ad.add(bary[0], bary[1]), bary[2]), Tensor(np.full((p, k), 1e-12)))
    bary = [ad.div(b, bsum) for b in bary]

    # depth blending weights
    zbar = ad.add(ad.add(ad.mul(bary[0], az[0]), ad.mul(bary[1], az[1])),
                  ad.mul(bary[2], az[2]))
    zn = ad.mul(ad.sub(z_far, zbar), 1.0 / (z_far - z_near))
    logits = ad.add(ad.neg(ad.softplus(ad.neg(t_cov))), ad.mul(zn, 1.0 / job.gamma))
    pad_bias = np.where(keep, 0.0, -1e9)
    logits = ad.add(ad.mul(logits, Tensor(keep_f)), Tensor(pad_bias))
    full = ad.concat([logits, Tensor(np.zeros((p, 1)))], axis=1)   # background logit 0
    weights = ad.exp(ad.log_softmax(full, axis=1))                 # (P, K+1)

    # per-candidate interpolated attributes
    interp = None
    for c in range(3):
        ac = ad.take_rows(attrs, corner_ids[c])                    # (P*K, C)
        term = ad.scale_rows(ac, ad.reshape(bary[c], (p * k,)))
        interp = term if interp is None else ad.add(interp, term)

    wf = ad.reshape(weights[:, 0:k], (p * k,))
    blended = ad.reshape(ad.scale_rows(interp, wf), (p, k, c_dim))
    summed = ad.tensor_sum(blended, axis=1)                        # (P, C)
    bg = ad.scale_rows(Tensor(np.full((p, c_dim), job.background)),
                       ad.reshape(weights[:, k:k + 1], (p,)))
    image = ad.reshape(ad.add(summed, bg), (h, w, c_dim))
    return RenderResult(image, alpha)


def _inside_sign(tri_xy: np.ndarray, pix: np.ndarray) -> np.ndarray:
    a, b, c = tri_xy[:, :, 0], tri_xy[:, :, 1], tri_xy[:, :, 2]
    px, py = pix[:, :, 0], pix[:, :, 1]
    s0 = (b[..., 0] - a[..., 0]) * (py - a[..., 1]) - (b[..., 1] - a[..., 1]) * (px - a[..., 0])
    s1 = (c[..., 0] - b[..., 0]) * (py - b[..., 1]) - (c[..., 1] - b[..., 1]) * (px - b[..., 0])
    s2 = (a[..., 0] - c[..., 0]) * (py - c[..., 1]) - (a[..., 1] - c[..., 1]) * (px - c[..., 0])
    inside = ((s0 >= 0) & (s1 >= 0) & (s2 >= 0)) | ((s0 <= 0) & (s1 <= 0) & (s2 <= 0))
    return np.where(inside, 1.0, -1.0)


def render_part_probabilities(vertices, faces, part_scores, job: RenderJob,
                              slice_face_mask=None) -> RenderResult:
    """Rasterize per-vertex part score vectors into an (H, W, C) score map."""
    scores = ad._lift(part_scores)
    if scores.ndim != 2 or scores.shape[1] < 2:
        raise ValueError(f"part scores must be (V, C>=2), got {scores.shape}")
    job_attrs = RenderJob(job.camera, job.sigma, job.gamma, "attributes",
                          job.mask_slice_faces, job.faces_per_pixel, job.background)
    return rasterize(vertices, faces, job_attrs, attributes=scores,
                     slice_face_mask=slice_face_mask)


# ---------------------------------------------------------------------------
# hard rasterization (previews, feature maps, soft/hard comparisons)
# ---------------------------------------------------------------------------

def hard_rasterize(mesh: TriMesh, camera: Camera, mask_slice_faces: bool = True):
    """Z-buffer pass. Returns (face_id (H,W) int32 with -1 background,
    barycentric (H,W,3), depth (H,W))."""
    ndc, z = project_points(mesh.vertices, camera)
    face_xy = ndc.data[mesh.faces]
    face_z = z.data[:, 0][mesh.faces]
    valid = (face_z > 1e-6).all(axis=1)
    if mask_slice_faces:
        valid &= ~mesh.slice_face_mask
    return kernels.hard_raster(face_xy, face_z, valid, camera.height, camera.width)


def render_attributes_hard(mesh: TriMesh, attrs: np.ndarray, camera: Camera,
                           background: float = 0.0, mask_slice_faces: bool = True):
    """Interpolate per-vertex attributes through a hard z-buffer render.
    Returns (image (H,W,C), coverage (H,W) bool)."""
    face_id, bary, _ = hard_rasterize(mesh, camera, mask_slice_faces)
    covered = face_id >= 0
    fid = np.where(covered, face_id, 0)
    corners = attrs[mesh.faces[fid]]                    # (H, W, 3, C)
    img = (bary[:, :, :, None] * corners).sum(axis=2)
    img[~covered] = background
    return img, covered


# ---------------------------------------------------------------------------
# silhouette metrics
# ---------------------------------------------------------------------------

def silhouette_loss(pred_alpha, gt_mask) -> Tensor:
    """Mean squared difference between a soft silhouette and a binary mask."""
    pred = ad._lift(pred_alpha)
    gt = np.asarray(gt_mask, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ad.ShapeError(f"silhouette shapes differ: {pred.shape} vs {gt.shape}")
    diff = ad.sub(pred, Tensor(gt))
    return ad.mean(ad.mul(diff, diff))


def iou(pred_mask, gt_mask, threshold: float = 0.5) -> float:
    """Intersection over union of thresholded masks; 1.0 when both are empty."""
    p = np.asarray(pred_mask.data if isinstance(pred_mask, Tensor) else pred_mask)
    g = np.asarray(gt_mask.data if isinstance(gt_mask, Tensor) else gt_mask)
    if p.shape != g.shape:
        raise ValueError(f"iou shapes differ: {p.shape} vs {g.shape}")
    pb = p > threshold
    gb = g > threshold
    union = (pb | gb).sum()
    if union == 0:
        return 1.0
    return float((pb & gb).sum() / union)


def auto_frame_camera(points: np.ndarray, direction: np.ndarray,
                      fov: float = np.deg2rad(30.0), height: int = 128,
                      width: int = 128, margin: float = 1.2,
                      up: np.ndarray | None = None) -> Camera:
    """Place a camera along ``direction`` from the cloud's centroid so the
    bounding sphere fits the vertical FOV with a margin."""
    pts = np.asarray(points, dtype=np.float64)
    center = 0.5 * (pts.min(axis=0) + pts.max(axis=0))
    radius = np.linalg.norm(pts - center, axis=1).max()
    direction = np.asarray(direction, dtype=np.float64)
    direction = direction / np.linalg.norm(direction)
    dist = margin * radius / np.sin(fov / 2.0)
    if up is None:
        up = np.array([0.0, 0.0, 1.0])
        if abs(direction @ up) > 0.95:
            up = np.array([0.0, 1.0, 0.0])
    return Camera(center + direction * dist, center, up, fov, height, width)


# ---------------------------------------------------------------------------
# image and raw float map output
# ---------------------------------------------------------------------------

def write_png(path, image: np.ndarray) -> None:
    """Write an 8-bit RGB (H,W,3) or grayscale (H,W) PNG. Float input in [0,1]."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    h, w, _ = img.shape
    raw = b"".join(b"\x00" + img[i].tobytes() for i in range(h))

    def chunk(tag, payload):
        out = struct.pack(">I", len(payload)) + tag + payload
        return out + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF)

    header = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    png = (b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", header)
           + chunk(b"IDAT", zlib.compress(raw, 6)) + chunk(b"IEND", b""))
    Path(path).write_bytes(png)


def save_float_map(path, array: np.ndarray) -> None:
    """Raw float64 dump: one JSON header line {shape, dtype}, then row-major bytes."""
    arr = np.ascontiguousarray(array, dtype=np.float64)
    header = json.dumps({"shape": list(arr.shape), "dtype": "float64"}) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(arr.tobytes())


def load_float_map(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("ascii"))
        if header.get("dtype") != "float64":
            raise ValueError(f"{path}: unsupported dtype {header.get('dtype')!r}")
        data = np.frombuffer(fh.read(), dtype=np.float64)
    return data.reshape(header["shape"]).copy()
