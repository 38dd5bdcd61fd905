"""Triangle-mesh data model, OBJ/PLY I/O, surface sampling, and geometry helpers.

All coordinates are in meters. Meshes are immutable after construction and
safe to share across threads; every operation here is a pure function.

The slice-plane annotation (faces lying on the artificial ankle cut) has no
home in OBJ/PLY, so it is persisted in a JSON sidecar ``<meshname>.mask.json``
of the form ``{"masked_faces": [int, ...]}`` next to the mesh file.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class MeshFormatError(ValueError):
    """Mesh file failed to parse; message carries file/line context."""


class IsolatedVertexError(ValueError):
    """A vertex without neighbours where a neighbourhood is required."""


@dataclass(frozen=True)
class TriMesh:
    """Immutable triangle mesh.

    Parameters
    ----------
    vertices : (V, 3) float array, meters.
    faces : (F, 3) int array of vertex indices; every face must have three
        distinct in-range indices (zero-area faces with distinct vertices
        are permitted, scans are messy).
    vertex_colors : optional (V, 3) float array, RGB in [0, 1].
    slice_face_mask : optional (F,) bool array; True marks faces on the
        artificial cut plane. Defaults to all-False.
    uv : optional (V, 2) float array in [0, 1]^2.
    """

    vertices: np.ndarray
    faces: np.ndarray
    vertex_colors: np.ndarray | None = None
    slice_face_mask: np.ndarray | None = None
    uv: np.ndarray | None = None

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError(f"face index out of range: vertex count {len(v)}, "
                             f"max index {f.max() if f.size else '-'}")
        if f.size:
            degen = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
            if degen.any():
                raise ValueError(f"degenerate face (repeated vertex index) at "
                                 f"face {int(np.nonzero(degen)[0][0])}")
        colors = self.vertex_colors
        if colors is not None:
            colors = np.ascontiguousarray(colors, dtype=np.float64).reshape(-1, 3)
            if len(colors) != len(v):
                raise ValueError("vertex_colors length must equal vertex count")
            if colors.size and (colors.min() < -1e-12 or colors.max() > 1 + 1e-12):
                raise ValueError("vertex_colors must be within [0, 1]")
            colors = np.clip(colors, 0.0, 1.0)
            colors.setflags(write=False)
        mask = self.slice_face_mask
        if mask is None:
            mask = np.zeros(len(f), dtype=bool)
        else:
            mask = np.ascontiguousarray(mask, dtype=bool).reshape(-1)
            if len(mask) != len(f):
                raise ValueError("slice_face_mask length must equal face count")
        uv = self.uv
        if uv is not None:
            uv = np.ascontiguousarray(uv, dtype=np.float64).reshape(-1, 2)
            if len(uv) != len(v):
                raise ValueError("uv length must equal vertex count")
            uv.setflags(write=False)
        v.setflags(write=False)
        f.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "vertex_colors", colors)
        object.__setattr__(self, "slice_face_mask", mask)
        object.__setattr__(self, "uv", uv)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices: np.ndarray) -> "TriMesh":
        """Same topology/attributes with replaced vertex positions."""
        return TriMesh(vertices, self.faces, self.vertex_colors,
                       self.slice_face_mask, self.uv)

    def face_areas(self) -> np.ndarray:
        tri = self.vertices[self.faces]
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        return 0.5 * np.linalg.norm(cross, axis=1)

    def face_normals(self) -> np.ndarray:
        tri = self.vertices[self.faces]
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        norm = np.linalg.norm(cross, axis=1, keepdims=True)
        norm[norm == 0.0] = 1.0
        return cross / norm

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted average of incident face normals, unit length."""
        tri = self.vertices[self.faces]
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        vn = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(vn, self.faces[:, k], cross)
        norm = np.linalg.norm(vn, axis=1, keepdims=True)
        norm[norm == 0.0] = 1.0
        return vn / norm

    def unique_edges(self) -> np.ndarray:
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]],
                            self.faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)


@dataclass(frozen=True)
class SampledPoints:
    """Points sampled on a mesh surface with their provenance."""

    points: np.ndarray              # (N, 3)
    colors: np.ndarray | None       # (N, 3) when the mesh has vertex colors
    source_face: np.ndarray         # (N,) face index per point
    barycentric: np.ndarray         # (N, 3) non-negative, rows sum to 1


# ---------------------------------------------------------------------------
# sampling and differential quantities
# ---------------------------------------------------------------------------

def sample_surface(mesh: TriMesh, n: int, seed: int,
                   exclude_masked: bool = False) -> SampledPoints:
    """Draw ``n`` points uniformly by area: area-weighted face choice, then a
    uniform barycentric point inside the chosen face. Deterministic per seed.
    """
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")
    areas = mesh.face_areas()
    eligible = np.arange(mesh.n_faces)
    if exclude_masked:
        eligible = eligible[~mesh.slice_face_mask]
        areas = areas[~mesh.slice_face_mask]
    if len(eligible) == 0 or areas.sum() <= 0.0:
        raise ValueError("no eligible faces to sample from")
    rng = np.random.default_rng(seed)
    probs = areas / areas.sum()
    choice = rng.choice(len(eligible), size=n, p=probs)
    faces = eligible[choice]
    # square-root warp gives the uniform density over each triangle
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    tri = mesh.vertices[mesh.faces[faces]]
    points = (bary[:, :, None] * tri).sum(axis=1)
    colors = None
    if mesh.vertex_colors is not None:
        col = mesh.vertex_colors[mesh.faces[faces]]
        colors = (bary[:, :, None] * col).sum(axis=1)
    return SampledPoints(points, colors, faces, bary)


def vertex_neighbours(mesh: TriMesh) -> tuple[np.ndarray, np.ndarray]:
    """CSR-style neighbour lists (offsets, flat neighbour indices) from unique edges."""
    edges = mesh.unique_edges()
    both = np.concatenate([edges, edges[:, ::-1]])
    order = np.argsort(both[:, 0], kind="stable")
    src = both[order, 0]
    dst = both[order, 1]
    counts = np.bincount(src, minlength=mesh.n_vertices)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    return offsets, dst


def uniform_laplacian(mesh: TriMesh) -> np.ndarray:
    """Umbrella-operator Laplacian: mean of neighbours minus the vertex.

    Raises IsolatedVertexError naming the first vertex with no neighbours.
    """
    offsets, dst = vertex_neighbours(mesh)
    counts = np.diff(offsets)
    if (counts == 0).any():
        bad = int(np.nonzero(counts == 0)[0][0])
        raise IsolatedVertexError(f"vertex {bad} has no neighbours")
    sums = np.zeros_like(mesh.vertices)
    src = np.repeat(np.arange(mesh.n_vertices), counts)
    np.add.at(sums, src, mesh.vertices[dst])
    return sums / counts[:, None] - mesh.vertices


def mean_edge_length(mesh: TriMesh) -> float:
    edges = mesh.unique_edges()
    if len(edges) == 0:
        raise ValueError("mesh has no edges")
    d = np.linalg.norm(mesh.vertices[edges[:, 0]] - mesh.vertices[edges[:, 1]], axis=1)
    return float(d.mean())


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".mask.json")


def _load_sidecar(path: Path, n_faces: int) -> np.ndarray:
    sidecar = _sidecar_path(path)
    mask = np.zeros(n_faces, dtype=bool)
    if sidecar.exists():
        masked = json.loads(sidecar.read_text())["masked_faces"]
        idx = np.asarray(masked, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= n_faces):
            raise MeshFormatError(f"{sidecar}: masked face index out of range")
        mask[idx] = True
    return mask


def load_mesh(path, format: str | None = None) -> TriMesh:
    """Load an OBJ or ASCII/binary PLY mesh; non-triangular faces are an error.

    The slice mask comes from the ``.mask.json`` sidecar when present,
    otherwise it defaults to all-False. Vertex order is preserved.
    """
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt == "obj":
        mesh = _parse_obj(path)
    elif fmt == "ply":
        mesh = _parse_ply(path)
    else:
        raise MeshFormatError(f"{path}: unsupported mesh format {fmt!r}")
    mask = _load_sidecar(path, mesh.n_faces)
    if mask.any():
        mesh = TriMesh(mesh.vertices, mesh.faces, mesh.vertex_colors, mask, mesh.uv)
    return mesh


def save_mesh(mesh: TriMesh, path, format: str | None = None,
              binary: bool = True) -> None:
    """Write OBJ or PLY plus the mask sidecar (written only when any face is masked)."""
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt == "obj":
        _write_obj(mesh, path)
    elif fmt == "ply":
        _write_ply(mesh, path, binary=binary)
    else:
        raise MeshFormatError(f"{path}: unsupported mesh format {fmt!r}")
    sidecar = _sidecar_path(path)
    if mesh.slice_face_mask.any():
        masked = np.nonzero(mesh.slice_face_mask)[0].tolist()
        sidecar.write_text(json.dumps({"masked_faces": masked}))
    elif sidecar.exists():
        sidecar.unlink()


def _parse_obj(path: Path) -> TriMesh:
    vertices: list = []
    faces: list = []
    uvs: list = []
    uv_of_vertex: dict[int, int] = {}
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise MeshFormatError(f"{path}: {e}") from e
    for ln, line in enumerate(lines, start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        tag = parts[0]
        if tag == "v":
            if len(parts) < 4:
                raise MeshFormatError(f"{path}:{ln}: vertex needs 3 coordinates")
            try:
                vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
            except ValueError as e:
                raise MeshFormatError(f"{path}:{ln}: bad vertex coordinate: {e}") from e
        elif tag == "vt":
            uvs.append([float(parts[1]), float(parts[2])])
        elif tag == "f":
            idxs = parts[1:]
            if len(idxs) != 3:
                raise MeshFormatError(
                    f"{path}:{ln}: face has {len(idxs)} vertices; only triangles "
                    f"are supported (no silent triangulation)")
            face = []
            for token in idxs:
                fields = token.split("/")
                try:
                    vi = int(fields[0])
                except ValueError as e:
                    raise MeshFormatError(f"{path}:{ln}: bad face index {token!r}") from e
                if vi == 0:
                    raise MeshFormatError(f"{path}:{ln}: face index 0 (OBJ indices are 1-based)")
                vi = vi - 1 if vi > 0 else len(vertices) + vi
                if vi < 0 or vi >= len(vertices):
                    raise MeshFormatError(f"{path}:{ln}: face index out of range")
                if len(fields) > 1 and fields[1]:
                    uv_of_vertex[vi] = int(fields[1]) - 1
                face.append(vi)
            faces.append(face)
    uv = None
    if uvs and uv_of_vertex:
        uv = np.zeros((len(vertices), 2))
        for vi, ti in uv_of_vertex.items():
            if ti < 0 or ti >= len(uvs):
                raise MeshFormatError(f"{path}: uv index out of range for vertex {vi}")
            uv[vi] = uvs[ti]
    try:
        return TriMesh(np.asarray(vertices, dtype=np.float64).reshape(-1, 3),
                       np.asarray(faces, dtype=np.int64).reshape(-1, 3), uv=uv)
    except ValueError as e:
        raise MeshFormatError(f"{path}: {e}") from e


def _write_obj(mesh: TriMesh, path: Path) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        if mesh.uv is not None:
            for t in mesh.uv:
                fh.write(f"vt {t[0]:.17g} {t[1]:.17g}\n")
            for f in mesh.faces:
                fh.write(f"f {f[0]+1}/{f[0]+1} {f[1]+1}/{f[1]+1} {f[2]+1}/{f[2]+1}\n")
        else:
            for f in mesh.faces:
                fh.write(f"f {f[0]+1} {f[1]+1} {f[2]+1}\n")


_PLY_TYPES = {
    "char": "b", "uchar": "B", "int8": "b", "uint8": "B",
    "short": "h", "ushort": "H", "int16": "h", "uint16": "H",
    "int": "i", "uint": "I", "int32": "i", "uint32": "I",
    "float": "f", "float32": "f", "double": "d", "float64": "d",
}


def _parse_ply(path: Path) -> TriMesh:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise MeshFormatError(f"{path}: missing 'ply' magic")
        fmt = None
        elements: list[tuple[str, int, list]] = []
        while True:
            line = fh.readline()
            if not line:
                raise MeshFormatError(f"{path}: unexpected EOF in header")
            tokens = line.decode("ascii", "replace").split()
            if not tokens:
                continue
            if tokens[0] == "comment":
                continue
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "element":
                elements.append((tokens[1], int(tokens[2]), []))
            elif tokens[0] == "property":
                if not elements:
                    raise MeshFormatError(f"{path}: property before element")
                if tokens[1] == "list":
                    elements[-1][2].append(("list", tokens[2], tokens[3], tokens[4]))
                else:
                    elements[-1][2].append(("scalar", tokens[1], tokens[2]))
            elif tokens[0] == "end_header":
                break
        if fmt not in ("ascii", "binary_little_endian"):
            raise MeshFormatError(f"{path}: unsupported PLY format {fmt!r}")
        vertices = colors = uv = None
        faces = None
        for name, count, props in elements:
            if fmt == "ascii":
                rows = [fh.readline().decode("ascii").split() for _ in range(count)]
                parsed = _ply_rows_ascii(path, rows, props)
            else:
                parsed = _ply_rows_binary(path, fh, count, props)
            if name == "vertex":
                cols = {p[-1]: i for i, p in enumerate(props) if p[0] == "scalar"}
                for axis in ("x", "y", "z"):
                    if axis not in cols:
                        raise MeshFormatError(f"{path}: vertex element missing {axis}")
                vertices = np.stack([parsed[cols["x"]], parsed[cols["y"]],
                                     parsed[cols["z"]]], axis=1)
                if all(c in cols for c in ("red", "green", "blue")):
                    colors = np.stack([parsed[cols["red"]], parsed[cols["green"]],
                                       parsed[cols["blue"]]], axis=1) / 255.0
                if all(c in cols for c in ("s", "t")):
                    uv = np.stack([parsed[cols["s"]], parsed[cols["t"]]], axis=1)
            elif name == "face":
                li = next((i for i, p in enumerate(props) if p[0] == "list"), None)
                if li is None:
                    raise MeshFormatError(f"{path}: face element has no index list")
                lists = parsed[li]
                for row in lists:
                    if len(row) != 3:
                        raise MeshFormatError(
                            f"{path}: non-triangular face with {len(row)} vertices")
                faces = np.asarray(lists, dtype=np.int64)
        if vertices is None:
            raise MeshFormatError(f"{path}: no vertex element")
        if faces is None:
            faces = np.zeros((0, 3), dtype=np.int64)
        try:
            return TriMesh(vertices, faces, colors, uv=uv)
        except ValueError as e:
            raise MeshFormatError(f"{path}: {e}") from e


def _ply_rows_ascii(path, rows, props):
    columns: list = [[] for _ in props]
    for row in rows:
        pos = 0
        for ci, p in enumerate(props):
            if p[0] == "scalar":
                columns[ci].append(float(row[pos]))
                pos += 1
            else:
                n = int(row[pos])
                columns[ci].append([int(float(x)) for x in row[pos + 1:pos + 1 + n]])
                pos += 1 + n
    return [np.asarray(c) if props[i][0] == "scalar" else c
            for i, c in enumerate(columns)]


def _ply_rows_binary(path, fh, count, props):
    columns: list = [[] for _ in props]
    for _ in range(count):
        for ci, p in enumerate(props):
            if p[0] == "scalar":
                code = _PLY_TYPES[p[1]]
                size = struct.calcsize(code)
                (val,) = struct.unpack("<" + code, fh.read(size))
                columns[ci].append(float(val))
            else:
                ccode = _PLY_TYPES[p[1]]
                icode = _PLY_TYPES[p[2]]
                (n,) = struct.unpack("<" + ccode, fh.read(struct.calcsize(ccode)))
                vals = struct.unpack("<" + icode * n, fh.read(struct.calcsize(icode) * n))
                columns[ci].append(list(vals))
    return [np.asarray(c) if props[i][0] == "scalar" else c
            for i, c in enumerate(columns)]


def _write_ply(mesh: TriMesh, path: Path, binary: bool = True) -> None:
    has_color = mesh.vertex_colors is not None
    has_uv = mesh.uv is not None
    header = ["ply",
              f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {mesh.n_vertices}",
              "property double x", "property double y", "property double z"]
    if has_color:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    if has_uv:
        header += ["property double s", "property double t"]
    header += [f"element face {mesh.n_faces}",
               "property list uchar int vertex_indices", "end_header"]
    colors8 = None
    if has_color:
        colors8 = np.clip(np.rint(mesh.vertex_colors * 255.0), 0, 255).astype(np.uint8)
    if binary:
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            for i in range(mesh.n_vertices):
                fh.write(struct.pack("<3d", *mesh.vertices[i]))
                if has_color:
                    fh.write(struct.pack("<3B", *colors8[i]))
                if has_uv:
                    fh.write(struct.pack("<2d", *mesh.uv[i]))
            for f in mesh.faces:
                fh.write(struct.pack("<B3i", 3, int(f[0]), int(f[1]), int(f[2])))
    else:
        with open(path, "w") as fh:
            fh.write("\n".join(header) + "\n")
            for i in range(mesh.n_vertices):
                row = [f"{c:.17g}" for c in mesh.vertices[i]]
                if has_color:
                    row += [str(int(c)) for c in colors8[i]]
                if has_uv:
                    row += [f"{c:.17g}" for c in mesh.uv[i]]
                fh.write(" ".join(row) + "\n")
            for f in mesh.faces:
                fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")


# ---------------------------------------------------------------------------
# procedural primitives
# ---------------------------------------------------------------------------

def icosphere(subdivisions: int = 2, radius: float = 1.0) -> TriMesh:
    """Icosahedron subdivided ``subdivisions`` times, vertices on the sphere."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    for _ in range(subdivisions):
        verts_list = list(verts)
        midpoint: dict[tuple[int, int], int] = {}

        def mid(i, j):
            key = (i, j) if i < j else (j, i)
            if key not in midpoint:
                m = verts_list[i] + verts_list[j]
                m = m / np.linalg.norm(m)
                midpoint[key] = len(verts_list)
                verts_list.append(m)
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.asarray(verts_list)
        faces = np.asarray(new_faces, dtype=np.int64)
    return TriMesh(verts * radius, faces)
