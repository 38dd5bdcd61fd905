"""Hot numeric kernels with two interchangeable backends.

Every kernel exists twice: a loop formulation compiled with numba's @njit,
and a vectorized pure-numpy fallback. The backend is chosen once per process
from the FOOTFIELD_BACKEND environment variable:

    FOOTFIELD_BACKEND=numba   force numba (raises if numba is unavailable)
    FOOTFIELD_BACKEND=numpy   force the pure-numpy fallback
    unset / auto              numba when importable, numpy otherwise

Both backends produce identical results up to floating-point reassociation;
``benchmarks/bench_kernels.py`` times them against each other.
"""

from __future__ import annotations

import os

import numpy as np

_VALID_BACKENDS = ("auto", "numba", "numpy")


def _resolve_backend() -> str:
    choice = os.environ.get("FOOTFIELD_BACKEND", "auto").lower()
    if choice not in _VALID_BACKENDS:
        raise ValueError(
            f"FOOTFIELD_BACKEND must be one of {_VALID_BACKENDS}, got {choice!r}"
        )
    if choice == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
        return "numba"
    except ImportError:
        if choice == "numba":
            raise RuntimeError("FOOTFIELD_BACKEND=numba but numba is not importable")
        return "numpy"


BACKEND = _resolve_backend()

if BACKEND == "numba":
    from numba import njit
else:  # decorator that leaves the loop reference implementations callable
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(fn):
            return fn

        return wrap


# ---------------------------------------------------------------------------
# nearest neighbours between point sets (chamfer support)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _nn_brute_loops(a, b):
    n = a.shape[0]
    m = b.shape[0]
    idx = np.empty(n, np.int64)
    dist = np.empty(n, np.float64)
    for i in range(n):
        best = np.inf
        bj = 0
        for j in range(m):
            d = 0.0
            for k in range(3):
                t = a[i, k] - b[j, k]
                d += t * t
            if d < best:
                best = d
                bj = j
        idx[i] = bj
        dist[i] = np.sqrt(best)
    return idx, dist


def _nn_brute_numpy(a, b, chunk=512):
    n = a.shape[0]
    idx = np.empty(n, np.int64)
    dist = np.empty(n, np.float64)
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        d2 = ((a[s:e, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        j = np.argmin(d2, axis=1)
        idx[s:e] = j
        dist[s:e] = np.sqrt(d2[np.arange(e - s), j])
    return idx, dist


def nearest_neighbours(a: np.ndarray, b: np.ndarray):
    """For each row of ``a`` return (index, euclidean distance) of the nearest row of ``b``."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3 or b.ndim != 2 or b.shape[1] != 3:
        raise ValueError("nearest_neighbours expects (N,3) and (M,3) arrays")
    if len(a) == 0 or len(b) == 0:
        raise ValueError("nearest_neighbours: empty point set")
    if BACKEND == "numba":
        return _nn_brute_loops(a, b)
    return _nn_brute_numpy(a, b)


# ---------------------------------------------------------------------------
# k-means assignment step
# ---------------------------------------------------------------------------

@njit(cache=True)
def _kmeans_assign_loops(points, centroids):
    n, d = points.shape
    k = centroids.shape[0]
    labels = np.empty(n, np.int64)
    dists = np.empty(n, np.float64)
    for i in range(n):
        best = np.inf
        bj = 0
        for j in range(k):
            acc = 0.0
            for c in range(d):
                t = points[i, c] - centroids[j, c]
                acc += t * t
            if acc < best:
                best = acc
                bj = j
        labels[i] = bj
        dists[i] = best
    return labels, dists


def _kmeans_assign_numpy(points, centroids):
    # |p-c|^2 = |p|^2 - 2 p.c + |c|^2 ; constant |p|^2 dropped for argmin,
    # added back for the returned distance.
    p2 = (points ** 2).sum(axis=1)
    c2 = (centroids ** 2).sum(axis=1)
    cross = points @ centroids.T
    d2 = c2[None, :] - 2.0 * cross
    labels = np.argmin(d2, axis=1)
    dists = d2[np.arange(len(points)), labels] + p2
    np.maximum(dists, 0.0, out=dists)
    return labels, dists


def kmeans_assign(points: np.ndarray, centroids: np.ndarray):
    """Assign each point to its nearest centroid; returns (labels, squared dists)."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    centroids = np.ascontiguousarray(centroids, dtype=np.float64)
    if BACKEND == "numba":
        return _kmeans_assign_loops(points, centroids)
    return _kmeans_assign_numpy(points, centroids)


# ---------------------------------------------------------------------------
# closest point on a triangle mesh (PCA correspondence support)
# ---------------------------------------------------------------------------

@njit(cache=True, inline="always")
def _closest_on_triangle(p, a, b, c):
    # Eberly's region-based point/triangle projection in 3D.
    ab0 = b[0] - a[0]; ab1 = b[1] - a[1]; ab2 = b[2] - a[2]
    ac0 = c[0] - a[0]; ac1 = c[1] - a[1]; ac2 = c[2] - a[2]
    ap0 = p[0] - a[0]; ap1 = p[1] - a[1]; ap2 = p[2] - a[2]

    d1 = ab0 * ap0 + ab1 * ap1 + ab2 * ap2
    d2 = ac0 * ap0 + ac1 * ap1 + ac2 * ap2
    if d1 <= 0.0 and d2 <= 0.0:
        return a[0], a[1], a[2]

    bp0 = p[0] - b[0]; bp1 = p[1] - b[1]; bp2 = p[2] - b[2]
    d3 = ab0 * bp0 + ab1 * bp1 + ab2 * bp2
    d4 = ac0 * bp0 + ac1 * bp1 + ac2 * bp2
    if d3 >= 0.0 and d4 <= d3:
        return b[0], b[1], b[2]

    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        denom = d1 - d3
        v = d1 / denom if denom != 0.0 else 0.0
        return a[0] + v * ab0, a[1] + v * ab1, a[2] + v * ab2

    cp0 = p[0] - c[0]; cp1 = p[1] - c[1]; cp2 = p[2] - c[2]
    d5 = ab0 * cp0 + ab1 * cp1 + ab2 * cp2
    d6 = ac0 * cp0 + ac1 * cp1 + ac2 * cp2
    if d6 >= 0.0 and d5 <= d6:
        return c[0], c[1], c[2]

    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        denom = d2 - d6
        w = d2 / denom if denom != 0.0 else 0.0
        return a[0] + w * ac0, a[1] + w * ac1, a[2] + w * ac2

    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        denom = (d4 - d3) + (d5 - d6)
        w = (d4 - d3) / denom if denom != 0.0 else 0.0
        return (b[0] + w * (c[0] - b[0]), b[1] + w * (c[1] - b[1]),
                b[2] + w * (c[2] - b[2]))

    denom = va + vb + vc
    if denom == 0.0:
        return a[0], a[1], a[2]
    v = vb / denom
    w = vc / denom
    return (a[0] + ab0 * v + ac0 * w, a[1] + ab1 * v + ac1 * w,
            a[2] + ab2 * v + ac2 * w)


@njit(cache=True)
def _closest_on_mesh_loops(points, tri):
    n = points.shape[0]
    f = tri.shape[0]
    proj = np.empty((n, 3), np.float64)
    face = np.empty(n, np.int64)
    dist = np.empty(n, np.float64)
    for i in range(n):
        best = np.inf
        bx = 0.0; by = 0.0; bz = 0.0
        bf = 0
        for j in range(f):
            qx, qy, qz = _closest_on_triangle(points[i], tri[j, 0], tri[j, 1], tri[j, 2])
            dx = points[i, 0] - qx
            dy = points[i, 1] - qy
            dz = points[i, 2] - qz
            d = dx * dx + dy * dy + dz * dz
            if d < best:
                best = d
                bx, by, bz = qx, qy, qz
                bf = j
        proj[i, 0] = bx; proj[i, 1] = by; proj[i, 2] = bz
        face[i] = bf
        dist[i] = np.sqrt(best)
    return proj, face, dist


def _closest_on_triangles_numpy(p, a, b, c):
    # Vectorized over triangles for a single query point.
    ab = b - a
    ac = c - a
    ap = p[None, :] - a
    d1 = (ab * ap).sum(1)
    d2 = (ac * ap).sum(1)
    bp = p[None, :] - b
    d3 = (ab * bp).sum(1)
    d4 = (ac * bp).sum(1)
    cp = p[None, :] - c
    d5 = (ab * cp).sum(1)
    d6 = (ac * cp).sum(1)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    with np.errstate(divide="ignore", invalid="ignore"):
        v_edge_ab = np.where(d1 - d3 != 0, d1 / (d1 - d3), 0.0)
        w_edge_ac = np.where(d2 - d6 != 0, d2 / (d2 - d6), 0.0)
        den_bc = (d4 - d3) + (d5 - d6)
        w_edge_bc = np.where(den_bc != 0, (d4 - d3) / den_bc, 0.0)
        den = va + vb + vc
        v_in = np.where(den != 0, vb / den, 0.0)
        w_in = np.where(den != 0, vc / den, 0.0)

    q = a + v_in[:, None] * ab + w_in[:, None] * ac
    m = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    q[m] = b[m] + w_edge_bc[m, None] * (c[m] - b[m])
    m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    q[m] = a[m] + w_edge_ac[m, None] * ac[m]
    m = (d6 >= 0) & (d5 <= d6)
    q[m] = c[m]
    m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    q[m] = a[m] + v_edge_ab[m, None] * ab[m]
    m = (d3 >= 0) & (d4 <= d3)
    q[m] = b[m]
    m = (d1 <= 0) & (d2 <= 0)
    q[m] = a[m]
    return q


def _closest_on_mesh_numpy(points, tri):
    n = points.shape[0]
    proj = np.empty((n, 3), np.float64)
    face = np.empty(n, np.int64)
    dist = np.empty(n, np.float64)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    for i in range(n):
        q = _closest_on_triangles_numpy(points[i], a, b, c)
        d2 = ((points[i][None, :] - q) ** 2).sum(1)
        j = int(np.argmin(d2))
        proj[i] = q[j]
        face[i] = j
        dist[i] = np.sqrt(d2[j])
    return proj, face, dist


def closest_on_mesh(points: np.ndarray, vertices: np.ndarray, faces: np.ndarray):
    """Project points onto a triangle mesh; returns (projections, face index, distance)."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    tri = np.ascontiguousarray(vertices[faces], dtype=np.float64)
    if BACKEND == "numba":
        return _closest_on_mesh_loops(points, tri)
    return _closest_on_mesh_numpy(points, tri)


# ---------------------------------------------------------------------------
# soft-rasterizer face selection
# ---------------------------------------------------------------------------
#
# Both backends return, per pixel, the indices of up to K candidate faces
# ordered by a selection key: covering faces first (nearest centroid depth
# wins), then non-covering faces by squared 2D distance to the triangle,
# truncated at `radius` in NDC units. The differentiable coverage/blending
# math downstream recomputes exact distances; this pass is selection only.

@njit(cache=True, inline="always")
def _point_tri_d2_2d(px, py, ax, ay, bx, by, cx, cy):
    best = np.inf
    # edge (a,b), (b,c), (c,a)
    for e in range(3):
        if e == 0:
            x0, y0, x1, y1 = ax, ay, bx, by
        elif e == 1:
            x0, y0, x1, y1 = bx, by, cx, cy
        else:
            x0, y0, x1, y1 = cx, cy, ax, ay
        ex = x1 - x0
        ey = y1 - y0
        qx = px - x0
        qy = py - y0
        ee = ex * ex + ey * ey
        t = 0.0
        if ee > 0.0:
            t = (qx * ex + qy * ey) / ee
            if t < 0.0:
                t = 0.0
            elif t > 1.0:
                t = 1.0
        dx = qx - t * ex
        dy = qy - t * ey
        d = dx * dx + dy * dy
        if d < best:
            best = d
    return best


@njit(cache=True, inline="always")
def _inside_tri_2d(px, py, ax, ay, bx, by, cx, cy):
    s0 = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
    s1 = (cx - bx) * (py - by) - (cy - by) * (px - bx)
    s2 = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)
    return (s0 >= 0.0 and s1 >= 0.0 and s2 >= 0.0) or (
        s0 <= 0.0 and s1 <= 0.0 and s2 <= 0.0)


@njit(cache=True)
def _select_faces_loops(face_xy, face_depth, valid, h, w, k, radius):
    p = h * w
    sel = np.full((p, k), -1, np.int32)
    key = np.full((p, k), np.inf, np.float64)
    r2 = radius * radius
    sx = 2.0 / w
    sy = 2.0 / h
    for f in range(face_xy.shape[0]):
        if not valid[f]:
            continue
        ax = face_xy[f, 0, 0]; ay = face_xy[f, 0, 1]
        bx = face_xy[f, 1, 0]; by = face_xy[f, 1, 1]
        cx = face_xy[f, 2, 0]; cy = face_xy[f, 2, 1]
        xmin = min(ax, min(bx, cx)) - radius
        xmax = max(ax, max(bx, cx)) + radius
        ymin = min(ay, min(by, cy)) - radius
        ymax = max(ay, max(by, cy)) + radius
        j0 = max(0, int(np.floor((xmin + 1.0) / sx - 0.5)))
        j1 = min(w - 1, int(np.ceil((xmax + 1.0) / sx - 0.5)))
        i0 = max(0, int(np.floor((1.0 - ymax) / sy - 0.5)))
        i1 = min(h - 1, int(np.ceil((1.0 - ymin) / sy - 0.5)))
        for i in range(i0, i1 + 1):
            py = 1.0 - sy * (i + 0.5)
            for j in range(j0, j1 + 1):
                px = sx * (j + 0.5) - 1.0
                if _inside_tri_2d(px, py, ax, ay, bx, by, cx, cy):
                    kv = -2.0 + face_depth[f]  # covering: depth-ranked, always < 0
                else:
                    d2 = _point_tri_d2_2d(px, py, ax, ay, bx, by, cx, cy)
                    if d2 > r2:
                        continue
                    kv = d2
                pix = i * w + j
                # insertion sort into the per-pixel top-k
                if kv < key[pix, k - 1]:
                    pos = k - 1
                    while pos > 0 and key[pix, pos - 1] > kv:
                        key[pix, pos] = key[pix, pos - 1]
                        sel[pix, pos] = sel[pix, pos - 1]
                        pos -= 1
                    key[pix, pos] = kv
                    sel[pix, pos] = f
    return sel


def _select_faces_numpy(face_xy, face_depth, valid, h, w, k, radius):
    sx = 2.0 / w
    sy = 2.0 / h
    cand_pix = []
    cand_face = []
    cand_key = []
    r2 = radius * radius
    for f in np.nonzero(valid)[0]:
        tri = face_xy[f]
        xmin, ymin = tri.min(axis=0) - radius
        xmax, ymax = tri.max(axis=0) + radius
        j0 = max(0, int(np.floor((xmin + 1.0) / sx - 0.5)))
        j1 = min(w - 1, int(np.ceil((xmax + 1.0) / sx - 0.5)))
        i0 = max(0, int(np.floor((1.0 - ymax) / sy - 0.5)))
        i1 = min(h - 1, int(np.ceil((1.0 - ymin) / sy - 0.5)))
        if j1 < j0 or i1 < i0:
            continue
        jj, ii = np.meshgrid(np.arange(j0, j1 + 1), np.arange(i0, i1 + 1))
        px = sx * (jj.ravel() + 0.5) - 1.0
        py = 1.0 - sy * (ii.ravel() + 0.5)
        (ax, ay), (bx, by), (cx, cy) = tri
        s0 = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        s1 = (cx - bx) * (py - by) - (cy - by) * (px - bx)
        s2 = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)
        inside = ((s0 >= 0) & (s1 >= 0) & (s2 >= 0)) | ((s0 <= 0) & (s1 <= 0) & (s2 <= 0))
        d2 = np.full(px.shape, np.inf)
        for (x0, y0), (x1, y1) in (((ax, ay), (bx, by)), ((bx, by), (cx, cy)),
                                   ((cx, cy), (ax, ay))):
            ex, ey = x1 - x0, y1 - y0
            qx, qy = px - x0, py - y0
            ee = ex * ex + ey * ey
            t = np.clip((qx * ex + qy * ey) / ee, 0.0, 1.0) if ee > 0 else 0.0
            d2 = np.minimum(d2, (qx - t * ex) ** 2 + (qy - t * ey) ** 2)
        keep = inside | (d2 <= r2)
        if not keep.any():
            continue
        kv = np.where(inside, -2.0 + face_depth[f], d2)[keep]
        pix = (ii.ravel() * w + jj.ravel())[keep]
        cand_pix.append(pix)
        cand_face.append(np.full(len(pix), f, np.int32))
        cand_key.append(kv)

    sel = np.full((h * w, k), -1, np.int32)
    if not cand_pix:
        return sel
    pix = np.concatenate(cand_pix)
    fid = np.concatenate(cand_face)
    kv = np.concatenate(cand_key)
    order = np.lexsort((kv, pix))
    pix, fid = pix[order], fid[order]
    starts = np.searchsorted(pix, np.arange(h * w), side="left")
    ends = np.searchsorted(pix, np.arange(h * w), side="right")
    counts = np.minimum(ends - starts, k)
    for col in range(k):
        rows = counts > col
        sel[rows, col] = fid[starts[rows] + col]
    return sel


def select_faces(face_xy: np.ndarray, face_depth: np.ndarray, valid: np.ndarray,
                 h: int, w: int, k: int, radius: float) -> np.ndarray:
    """Per-pixel top-K candidate faces for soft rasterization. Returns (H*W, K) int32, -1 padded."""
    face_xy = np.ascontiguousarray(face_xy, dtype=np.float64)
    face_depth = np.ascontiguousarray(face_depth, dtype=np.float64)
    valid = np.ascontiguousarray(valid, dtype=np.bool_)
    if BACKEND == "numba":
        return _select_faces_loops(face_xy, face_depth, valid, h, w, k, radius)
    return _select_faces_numpy(face_xy, face_depth, valid, h, w, k, radius)


# ---------------------------------------------------------------------------
# hard z-buffer rasterization (evaluation renders, soft/hard comparisons)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _hard_raster_loops(face_xy, face_z, valid, h, w):
    face_id = np.full((h, w), -1, np.int32)
    zbuf = np.full((h, w), np.inf, np.float64)
    bary = np.zeros((h, w, 3), np.float64)
    sx = 2.0 / w
    sy = 2.0 / h
    for f in range(face_xy.shape[0]):
        if not valid[f]:
            continue
        ax = face_xy[f, 0, 0]; ay = face_xy[f, 0, 1]
        bx = face_xy[f, 1, 0]; by = face_xy[f, 1, 1]
        cx = face_xy[f, 2, 0]; cy = face_xy[f, 2, 1]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area == 0.0:
            continue
        xmin = min(ax, min(bx, cx)); xmax = max(ax, max(bx, cx))
        ymin = min(ay, min(by, cy)); ymax = max(ay, max(by, cy))
        j0 = max(0, int(np.floor((xmin + 1.0) / sx - 0.5)))
        j1 = min(w - 1, int(np.ceil((xmax + 1.0) / sx - 0.5)))
        i0 = max(0, int(np.floor((1.0 - ymax) / sy - 0.5)))
        i1 = min(h - 1, int(np.ceil((1.0 - ymin) / sy - 0.5)))
        for i in range(i0, i1 + 1):
            py = 1.0 - sy * (i + 0.5)
            for j in range(j0, j1 + 1):
                px = sx * (j + 0.5) - 1.0
                w0 = ((bx - px) * (cy - py) - (by - py) * (cx - px)) / area
                w1 = ((cx - px) * (ay - py) - (cy - py) * (ax - px)) / area
                w2 = 1.0 - w0 - w1
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                z = w0 * face_z[f, 0] + w1 * face_z[f, 1] + w2 * face_z[f, 2]
                if z > 0.0 and z < zbuf[i, j]:
                    zbuf[i, j] = z
                    face_id[i, j] = f
                    bary[i, j, 0] = w0
                    bary[i, j, 1] = w1
                    bary[i, j, 2] = w2
    return face_id, bary, zbuf


def _hard_raster_numpy(face_xy, face_z, valid, h, w):
    face_id = np.full((h, w), -1, np.int32)
    zbuf = np.full((h, w), np.inf, np.float64)
    bary = np.zeros((h, w, 3), np.float64)
    sx = 2.0 / w
    sy = 2.0 / h
    for f in np.nonzero(valid)[0]:
        (ax, ay), (bx, by), (cx, cy) = face_xy[f]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area == 0.0:
            continue
        xmin = min(ax, bx, cx); xmax = max(ax, bx, cx)
        ymin = min(ay, by, cy); ymax = max(ay, by, cy)
        j0 = max(0, int(np.floor((xmin + 1.0) / sx - 0.5)))
        j1 = min(w - 1, int(np.ceil((xmax + 1.0) / sx - 0.5)))
        i0 = max(0, int(np.floor((1.0 - ymax) / sy - 0.5)))
        i1 = min(h - 1, int(np.ceil((1.0 - ymin) / sy - 0.5)))
        if j1 < j0 or i1 < i0:
            continue
        jj, ii = np.meshgrid(np.arange(j0, j1 + 1), np.arange(i0, i1 + 1))
        px = sx * (jj + 0.5) - 1.0
        py = 1.0 - sy * (ii + 0.5)
        w0 = ((bx - px) * (cy - py) - (by - py) * (cx - px)) / area
        w1 = ((cx - px) * (ay - py) - (cy - py) * (ax - px)) / area
        w2 = 1.0 - w0 - w1
        z = w0 * face_z[f, 0] + w1 * face_z[f, 1] + w2 * face_z[f, 2]
        hit = (w0 >= 0) & (w1 >= 0) & (w2 >= 0) & (z > 0) & (z < zbuf[ii, jj])
        if not hit.any():
            continue
        ih, jh = ii[hit], jj[hit]
        zbuf[ih, jh] = z[hit]
        face_id[ih, jh] = f
        bary[ih, jh, 0] = w0[hit]
        bary[ih, jh, 1] = w1[hit]
        bary[ih, jh, 2] = w2[hit]
    return face_id, bary, zbuf


def hard_raster(face_xy: np.ndarray, face_z: np.ndarray, valid: np.ndarray,
                h: int, w: int):
    """Z-buffer rasterization. Returns (face_id (H,W), barycentric (H,W,3), depth (H,W))."""
    face_xy = np.ascontiguousarray(face_xy, dtype=np.float64)
    face_z = np.ascontiguousarray(face_z, dtype=np.float64)
    valid = np.ascontiguousarray(valid, dtype=np.bool_)
    if BACKEND == "numba":
        return _hard_raster_loops(face_xy, face_z, valid, h, w)
    return _hard_raster_numpy(face_xy, face_z, valid, h, w)
