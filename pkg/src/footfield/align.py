"""Loose alignment and plane slicing of raw foot scans.

A raw scan arrives with an approximately planar cut somewhere up the shin.
Alignment rotates the scan so that this cut plane faces +Z and the horizontal
line from the cut-plane centroid to the footprint centroid (all geometry
within 5 mm of the bottom) points along -Y; the heel is then the minimum-X
vertex below the centroid, the mesh is sliced by the horizontal plane 10 cm
above the heel, and the result is translated so the footprint centroid sits
at the XY origin with the floor at z = 0. Faces created on the new slice
plane are masked, coloured white, and (when the mesh carries UVs) assigned
UV (0, 0).
"""

from __future__ import annotations

import numpy as np

from .mesh import TriMesh


class AlignmentError(ValueError):
    pass


FOOTPRINT_BAND = 0.005
DEFAULT_SLICE_HEIGHT = 0.10


def rotation_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rotation matrix taking unit vector a to unit vector b (Rodrigues)."""
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    v = np.cross(a, b)
    c = float(a @ b)
    s = np.linalg.norm(v)
    if s < 1e-12:
        if c > 0:
            return np.eye(3)
        # opposite vectors: rotate pi about any axis orthogonal to a
        axis = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(axis) < 1e-6:
            axis = np.cross(a, [0.0, 1.0, 0.0])
        axis /= np.linalg.norm(axis)
        k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]],
                      [-axis[1], axis[0], 0]])
        return np.eye(3) + 2.0 * k @ k
    k = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    return np.eye(3) + k + k @ k * ((1.0 - c) / (s * s))


def detect_cut_plane(mesh: TriMesh, angle_tol_deg: float = 2.0,
                     offset_tol: float = 0.0015):
    """Largest coplanar face cluster: faces whose normals agree within the
    angle tolerance and whose plane offsets agree within ``offset_tol``.

    Returns (unit normal, offset, face indices); the normal is oriented away
    from the mesh centroid.
    """
    normals = mesh.face_normals()
    areas = mesh.face_areas()
    centroids = mesh.vertices[mesh.faces].mean(axis=1)
    offsets = (normals * centroids).sum(axis=1)
    cos_tol = np.cos(np.deg2rad(angle_tol_deg))

    # greedy: repeatedly seed with the largest unassigned face and absorb all
    # faces coplanar with it (vectorized over the remaining faces)
    unassigned = areas > 0
    best_ids: np.ndarray | None = None
    best_area = 0.0
    order = np.argsort(-areas)
    for fi in order:
        if not unassigned[fi]:
            continue
        match = unassigned & (normals @ normals[fi] >= cos_tol) \
            & (np.abs(offsets - offsets[fi]) <= offset_tol)
        cluster_area = float(areas[match].sum())
        if cluster_area > best_area:
            best_area = cluster_area
            best_ids = np.nonzero(match)[0]
        unassigned &= ~match
        if areas[unassigned].sum() <= best_area:
            break
    if best_ids is None:
        raise AlignmentError("no planar face cluster found")
    ids = np.asarray(best_ids, dtype=np.int64)
    w = areas[ids]
    n = (normals[ids] * w[:, None]).sum(axis=0)
    n /= np.linalg.norm(n)
    plane_centroid = (centroids[ids] * w[:, None]).sum(axis=0) / w.sum()
    if n @ (plane_centroid - mesh.centroid()) < 0:
        n = -n
    return n, float(n @ plane_centroid), ids


def slice_mesh_at_z(mesh: TriMesh, z_cut: float, eps: float = 1e-9) -> TriMesh:
    """Remove geometry above ``z_cut`` and cap the opening with masked white
    faces on the cut plane. Vertices exactly on the plane count as below, so
    re-slicing at the same height is the identity."""
    verts = mesh.vertices
    below = verts[:, 2] <= z_cut + eps
    if below.all():
        return mesh

    new_verts = list(verts)
    new_colors = list(mesh.vertex_colors) if mesh.vertex_colors is not None else None
    new_uv = list(mesh.uv) if mesh.uv is not None else None
    cut_cache: dict[tuple[int, int], int] = {}

    def cut_point(i, j):
        key = (i, j) if i < j else (j, i)
        if key in cut_cache:
            return cut_cache[key]
        zi, zj = verts[i, 2], verts[j, 2]
        t = (z_cut - zi) / (zj - zi)
        if t <= 1e-12:
            cut_cache[key] = i if zi <= z_cut + eps else j
            return cut_cache[key]
        if t >= 1.0 - 1e-12:
            cut_cache[key] = j if zj <= z_cut + eps else i
            return cut_cache[key]
        p = verts[i] + t * (verts[j] - verts[i])
        p = p.copy()
        p[2] = z_cut
        idx = len(new_verts)
        new_verts.append(p)
        if new_colors is not None:
            new_colors.append(mesh.vertex_colors[i] + t * (mesh.vertex_colors[j]
                                                           - mesh.vertex_colors[i]))
        if new_uv is not None:
            new_uv.append(mesh.uv[i] + t * (mesh.uv[j] - mesh.uv[i]))
        cut_cache[key] = idx
        return idx

    faces = []
    mask = []
    boundary: list[tuple[int, int]] = []

    def emit(tri, masked):
        if len({tri[0], tri[1], tri[2]}) == 3:
            faces.append(tri)
            mask.append(masked)

    for fi, (a, b, c) in enumerate(mesh.faces):
        flags = below[[a, b, c]]
        m = bool(mesh.slice_face_mask[fi])
        if flags.all():
            emit((a, b, c), m)
            continue
        if not flags.any():
            continue
        # rotate so the pattern starts at a below-vertex
        ids = [a, b, c]
        while not below[ids[0]] or (below[ids[0]] and below[ids[2]] and not below[ids[1]]):
            ids = ids[1:] + ids[:1]
        a2, b2, c2 = ids
        if below[b2]:  # two below (a2, b2), c2 above
            i_bc = cut_point(b2, c2)
            i_ca = cut_point(c2, a2)
            emit((a2, b2, i_bc), m)
            emit((a2, i_bc, i_ca), m)
            if i_bc != i_ca:
                boundary.append((i_bc, i_ca))
        else:          # one below (a2), b2 and c2 above
            i_ab = cut_point(a2, b2)
            i_ca = cut_point(c2, a2)
            emit((a2, i_ab, i_ca), m)
            if i_ab != i_ca:
                boundary.append((i_ab, i_ca))

    # chain boundary edges into loops and fan-cap each loop
    next_of: dict[int, int] = {}
    for u, v in boundary:
        next_of.setdefault(u, v)
    visited: set[int] = set()
    loops: list[list[int]] = []
    for start in list(next_of):
        if start in visited:
            continue
        loop = [start]
        visited.add(start)
        cur = next_of.get(start)
        while cur is not None and cur not in visited and cur in next_of:
            loop.append(cur)
            visited.add(cur)
            cur = next_of.get(cur)
        if len(loop) >= 3:
            loops.append(loop)

    for loop in loops:
        pts = np.asarray([new_verts[i] for i in loop])
        center = pts.mean(axis=0)
        center[2] = z_cut
        # the cap gets its own white ring vertices so side walls keep their colours
        ring = []
        for i in loop:
            ring.append(len(new_verts))
            new_verts.append(np.asarray(new_verts[i]))
            if new_colors is not None:
                new_colors.append(np.ones(3))
            if new_uv is not None:
                new_uv.append(np.zeros(2))
        ci = len(new_verts)
        new_verts.append(center)
        if new_colors is not None:
            new_colors.append(np.ones(3))
        if new_uv is not None:
            new_uv.append(np.zeros(2))
        for a, b in zip(ring, ring[1:] + ring[:1]):
            pa, pb = new_verts[a], new_verts[b]
            # wind so the cap faces +Z
            crossz = (pa[0] - center[0]) * (pb[1] - center[1]) \
                - (pa[1] - center[1]) * (pb[0] - center[0])
            tri = (ci, a, b) if crossz > 0 else (ci, b, a)
            emit(tri, True)

    va = np.asarray(new_verts)
    fa = np.asarray(faces, dtype=np.int64)
    used = np.zeros(len(va), dtype=bool)
    used[fa.ravel()] = True
    remap = -np.ones(len(va), dtype=np.int64)
    remap[used] = np.arange(used.sum())
    return TriMesh(va[used], remap[fa],
                   np.asarray(new_colors)[used] if new_colors is not None else None,
                   np.asarray(mask, dtype=bool),
                   np.asarray(new_uv)[used] if new_uv is not None else None)


def align_mesh(mesh: TriMesh, slice_height: float = DEFAULT_SLICE_HEIGHT):
    """Align a raw scan into the canonical frame and standardize the cut.

    Returns (aligned mesh, transform dict with 'rotation' (3,3) and
    'translation' (3,) such that aligned = R @ p + t for original points p).
    """
    n, _, _ = detect_cut_plane(mesh)
    r1 = rotation_between(n, np.array([0.0, 0.0, 1.0]))
    # provisional in-plane orientation from the scan's own (shin-height) cap
    rot = _inplane_rotation(mesh.with_vertices(mesh.vertices @ r1.T)) @ r1

    # Iterate until (a) the heel detected on the *sliced* mesh reproduces the
    # slice height and (b) the in-plane orientation derived from the
    # *standardized* cap is the identity. Both self-consistency conditions
    # make align_mesh an exact fixed point on its own output; heights are
    # invariant under the in-plane rotation, so the loop converges fast.
    sliced = None
    heel_z = z_cut = 0.0
    for _ in range(6):
        v2 = mesh.vertices @ rot.T
        m2 = mesh.with_vertices(v2)
        heel_z = _heel_z_of(v2)
        for _ in range(4):
            z_cut = heel_z + slice_height
            if z_cut > v2[:, 2].max() + 1e-9:
                raise AlignmentError(
                    f"slice height {slice_height} m lies above the mesh top")
            sliced = slice_mesh_at_z(m2, z_cut)
            hz2 = _heel_z_of(sliced.vertices)
            if abs(hz2 - heel_z) < 1e-12:
                break
            heel_z = hz2
        r2b = _inplane_rotation(sliced)
        corr = abs(float(np.arctan2(r2b[1, 0], r2b[0, 0])))
        if corr < 1e-12:
            break
        rot = r2b @ rot

    floor2 = sliced.vertices[:, 2].min()
    band2 = sliced.vertices[:, 2] <= floor2 + FOOTPRINT_BAND
    fc2 = sliced.vertices[band2].mean(axis=0)
    t = np.array([-fc2[0], -fc2[1], -floor2])
    aligned = sliced.with_vertices(sliced.vertices + t)
    return aligned, {"rotation": rot, "translation": t,
                     "z_cut": float(z_cut + t[2]),
                     "heel_z": float(heel_z + t[2])}


def _heel_z_of(verts: np.ndarray) -> float:
    """Height of the heel: minimum-X vertex among those below the centroid."""
    low = verts[:, 2] < verts[:, 2].mean()
    if not low.any():
        raise AlignmentError("no vertices below the centroid; heel undetectable")
    cand = np.nonzero(low)[0]
    return float(verts[cand[np.argmin(verts[cand, 0])], 2])


def _inplane_rotation(mesh: TriMesh) -> np.ndarray:
    """Rotation about Z putting the cut-plane-to-footprint line along -Y."""
    v = mesh.vertices
    floor = v[:, 2].min()
    band = v[:, 2] <= floor + FOOTPRINT_BAND
    fc = v[band].mean(axis=0)
    _, _, ids = detect_cut_plane(mesh)
    areas = mesh.face_areas()
    w = areas[ids]
    pc = ((v[mesh.faces[ids]].mean(axis=1)) * w[:, None]).sum(axis=0) / w.sum()
    u = (fc - pc)[:2]
    if np.linalg.norm(u) < 1e-9:
        raise AlignmentError("cut-plane centroid is directly above the footprint; "
                             "in-plane orientation is ambiguous")
    u = u / np.linalg.norm(u)
    ang = np.arctan2(u[0], -u[1])
    cz, sz = np.cos(ang), np.sin(ang)
    return np.array([[cz, sz, 0.0], [-sz, cz, 0.0], [0.0, 0.0, 1.0]])


def canonicalize_translation(mesh: TriMesh) -> tuple[TriMesh, np.ndarray]:
    """Shift so the floor sits at z = 0 and the footprint centroid at XY origin
    (the same convention align_mesh produces)."""
    floor = mesh.vertices[:, 2].min()
    band = mesh.vertices[:, 2] <= floor + FOOTPRINT_BAND
    fc = mesh.vertices[band].mean(axis=0)
    t = np.array([-fc[0], -fc[1], -floor])
    return mesh.with_vertices(mesh.vertices + t), t
