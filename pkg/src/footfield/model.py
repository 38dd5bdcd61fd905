"""Implicit surface-deformation-field model over a template foot mesh.

The field is a coordinate MLP: template-surface points are normalized into
the template's bounding box, lifted by a sinusoidal positional encoding,
pushed through a 4-layer trunk into a feature vector, and decoded by two
heads. The displacement head consumes (feature, shape code, pose code) and
emits offsets in [-0.1, 0.1] via 0.1*tanh; the colour head consumes
(feature, texture code) and emits RGB in [0, 1] via (tanh+1)/2.

Each scan carries a registration (per-axis scale, then intrinsic-XYZ Euler
rotation, then translation) mapping template frame to scan frame. Scans of
the same identity alias the same shape/texture code tensors; that aliasing
is the disentanglement mechanism.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .mesh import TriMesh

LATENT_DIM = 100
HIDDEN = 256
DEFAULT_ENCODING_ORDER = 10


def encoding_length(order: int) -> int:
    return 3 * (2 * order + 1)


def positional_encode(x, order: int = DEFAULT_ENCODING_ORDER):
    """Per coordinate emit {x, sin(2*pi*k*x), cos(2*pi*k*x)} for k = 1..order.

    Output is coordinate-major: 3 blocks of length 2*order+1. Works on plain
    arrays and on autodiff tensors (recorded as one primitive).
    """
    is_tensor = isinstance(x, Tensor)
    data = x.data if is_tensor else np.asarray(x, dtype=np.float64)
    squeeze = data.ndim == 1
    pts = data.reshape(1, 3) if squeeze else data
    n = pts.shape[0]
    block = 2 * order + 1
    out = np.empty((n, 3 * block), dtype=np.float64)
    ks = 2.0 * np.pi * np.arange(1, order + 1)
    for c in range(3):
        col = pts[:, c]
        out[:, c * block] = col
        ang = col[:, None] * ks[None, :]
        out[:, c * block + 1:(c + 1) * block:2] = np.sin(ang)
        out[:, c * block + 2:(c + 1) * block:2] = np.cos(ang)
    if squeeze:
        out = out[0]
    if not is_tensor:
        return out
    result = Tensor(out)

    def pull(g):
        gm = g.reshape(1, -1) if squeeze else g
        grad = np.empty_like(pts)
        for c in range(3):
            col = pts[:, c]
            ang = col[:, None] * ks[None, :]
            acc = gm[:, c * block].copy()
            acc += (gm[:, c * block + 1:(c + 1) * block:2] * np.cos(ang) * ks).sum(axis=1)
            acc -= (gm[:, c * block + 2:(c + 1) * block:2] * np.sin(ang) * ks).sum(axis=1)
            grad[:, c] = acc
        return grad[0] if squeeze else grad

    return ad._record(result, [(x, pull)])


def transpose2d(a) -> Tensor:
    a = ad._lift(a)
    if a.ndim != 2:
        raise ad.ShapeError(f"transpose2d expects 2-D, got {a.shape}")
    return ad._record(Tensor(a.data.T.copy()), [(a, lambda g: g.T.copy())])


# ---------------------------------------------------------------------------
# registration
# ---------------------------------------------------------------------------

@dataclass
class Registration:
    """Template-to-scan transform: scale, then rotate (intrinsic XYZ), then translate."""

    rotation: Tensor      # (3,) Euler radians
    translation: Tensor   # (3,) meters
    scale: Tensor         # (3,) per-axis factors

    @staticmethod
    def identity() -> "Registration":
        return Registration(ad.parameter(np.zeros(3)), ad.parameter(np.zeros(3)),
                            ad.parameter(np.ones(3)))

    def params(self) -> list[Tensor]:
        return [self.rotation, self.translation, self.scale]

    def apply(self, points) -> Tensor:
        """points (n,3) Tensor/array -> transformed Tensor, differentiable throughout."""
        points = ad._lift(points)
        scaled = ad.mul(points, ad.reshape(self.scale, (1, 3)))
        rot = ad.euler_rotation(self.rotation)
        rotated = ad.matmul(scaled, transpose2d(rot))
        return ad.add(rotated, ad.reshape(self.translation, (1, 3)))

    def apply_np(self, points: np.ndarray) -> np.ndarray:
        r = _euler_matrix(self.rotation.data)
        return (points * self.scale.data) @ r.T + self.translation.data

    def invert_np(self, points: np.ndarray) -> np.ndarray:
        """Pull scan-frame points back into the template frame."""
        r = _euler_matrix(self.rotation.data)
        return ((points - self.translation.data) @ r) / self.scale.data

    def state(self) -> dict:
        return {"r": self.rotation.data.tolist(), "t": self.translation.data.tolist(),
                "s": self.scale.data.tolist()}


def _euler_matrix(r: np.ndarray) -> np.ndarray:
    x, y, z = r
    cx, sx = np.cos(x), np.sin(x)
    cy, sy = np.cos(y), np.sin(y)
    cz, sz = np.cos(z), np.sin(z)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rx @ ry @ rz


# ---------------------------------------------------------------------------
# instances
# ---------------------------------------------------------------------------

@dataclass
class FootInstance:
    """One scan's codes and registration. ``z_shape``/``z_texture`` are shared
    (the same Tensor objects) across scans of an identity at supervision
    levels that use identity labels."""

    identity: str
    scan_id: str
    z_shape: Tensor
    z_pose: Tensor
    z_texture: Tensor
    registration: Registration
    pose_label: np.ndarray | None = None

    def latents(self) -> list[Tensor]:
        return [self.z_shape, self.z_pose, self.z_texture]


class InstanceSet:
    """Instance table with identity-aliased shape/texture codes."""

    def __init__(self, share_identity_codes: bool = True):
        self.share_identity_codes = share_identity_codes
        self.instances: list[FootInstance] = []
        self._identity_codes: dict[str, tuple[Tensor, Tensor]] = {}
        self.registered = False

    def add(self, identity: str, scan_id: str,
            pose_label: np.ndarray | None = None) -> FootInstance:
        if self.share_identity_codes:
            if identity not in self._identity_codes:
                self._identity_codes[identity] = (
                    ad.parameter(np.zeros(LATENT_DIM)), ad.parameter(np.zeros(LATENT_DIM)))
            z_s, z_t = self._identity_codes[identity]
        else:
            z_s, z_t = ad.parameter(np.zeros(LATENT_DIM)), ad.parameter(np.zeros(LATENT_DIM))
        inst = FootInstance(identity, scan_id, z_s, ad.parameter(np.zeros(LATENT_DIM)),
                            z_t, Registration.identity(), pose_label)
        self.instances.append(inst)
        return inst

    def __iter__(self):
        return iter(self.instances)

    def __len__(self):
        return len(self.instances)

    def by_scan(self, scan_id: str) -> FootInstance:
        for inst in self.instances:
            if inst.scan_id == scan_id:
                return inst
        raise KeyError(scan_id)

    def latent_params(self, include_texture: bool = True) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        for inst in self.instances:
            zs = [inst.z_shape, inst.z_pose] + ([inst.z_texture] if include_texture else [])
            for z in zs:
                seen[z.tid] = z
        return list(seen.values())

    def registration_params(self) -> list[Tensor]:
        out: list[Tensor] = []
        for inst in self.instances:
            out.extend(inst.registration.params())
        return out


# ---------------------------------------------------------------------------
# the field network
# ---------------------------------------------------------------------------

def _init_linear(rng, fan_in: int, fan_out: int, zero: bool = False):
    if zero:
        w = np.zeros((fan_in, fan_out))
        b = np.zeros(fan_out)
    else:
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = rng.uniform(-bound, bound, size=fan_out)
    return ad.parameter(w), ad.parameter(b)


def _linear(x, layer) -> Tensor:
    w, b = layer
    return ad.add(ad.matmul(x, w), b)


class FieldModel:
    """Trunk + heads + template (with resolution variants) + normalization."""

    def __init__(self, template: TriMesh, seed: int = 0,
                 encoding_order: int = DEFAULT_ENCODING_ORDER,
                 keypoint_vertices: dict[str, int] | None = None):
        self.template = template
        self.encoding_order = encoding_order
        self.keypoint_vertices = dict(keypoint_vertices or {})
        lo, hi = template.bounds()
        extent = np.where(hi - lo > 0, hi - lo, 1.0)
        self.norm_origin = lo
        self.norm_scale = 1.0 / extent
        rng = np.random.default_rng(seed)
        enc = encoding_length(encoding_order)
        self.trunk = [_init_linear(rng, enc, HIDDEN)]
        self.trunk += [_init_linear(rng, HIDDEN, HIDDEN) for _ in range(3)]
        self.disp_head = [_init_linear(rng, HIDDEN + 2 * LATENT_DIM, HIDDEN),
                          _init_linear(rng, HIDDEN, HIDDEN),
                          _init_linear(rng, HIDDEN, 3, zero=True)]
        self.color_head = [_init_linear(rng, HIDDEN + LATENT_DIM, HIDDEN),
                           _init_linear(rng, HIDDEN, HIDDEN),
                           _init_linear(rng, HIDDEN, 3, zero=True)]
        self._variants: dict[str, TriMesh] = {"template": template}

    # --- parameters -------------------------------------------------------
    def params(self, include_color: bool = True) -> list[Tensor]:
        layers = self.trunk + self.disp_head + (self.color_head if include_color else [])
        out: list[Tensor] = []
        for w, b in layers:
            out += [w, b]
        return out

    def named_params(self) -> dict[str, Tensor]:
        names: dict[str, Tensor] = {}
        for group, layers in (("trunk", self.trunk), ("disp", self.disp_head),
                              ("color", self.color_head)):
            for i, (w, b) in enumerate(layers):
                names[f"{group}.{i}.w"] = w
                names[f"{group}.{i}.b"] = b
        return names

    # --- evaluation -------------------------------------------------------
    def normalize_points(self, points):
        points = ad._lift(points)
        shifted = ad.sub(points, Tensor(self.norm_origin.reshape(1, 3)))
        return ad.mul(shifted, Tensor(self.norm_scale.reshape(1, 3)))

    def trunk_features(self, points) -> Tensor:
        h = positional_encode(self.normalize_points(points), self.encoding_order)
        for layer in self.trunk:
            h = ad.tanh(_linear(h, layer))
        return h

    def _tile_code(self, z: Tensor, n: int) -> Tensor:
        return ad.broadcast_to(ad.reshape(z, (1, LATENT_DIM)), (n, LATENT_DIM))

    def displacement(self, feats: Tensor, z_shape, z_pose) -> Tensor:
        n = feats.shape[0]
        h = ad.concat([feats, self._tile_code(z_shape, n), self._tile_code(z_pose, n)], axis=1)
        h = ad.tanh(_linear(h, self.disp_head[0]))
        h = ad.tanh(_linear(h, self.disp_head[1]))
        return ad.mul(ad.tanh(_linear(h, self.disp_head[2])), 0.1)

    def color(self, feats: Tensor, z_texture) -> Tensor:
        n = feats.shape[0]
        h = ad.concat([feats, self._tile_code(z_texture, n)], axis=1)
        h = ad.tanh(_linear(h, self.color_head[0]))
        h = ad.tanh(_linear(h, self.color_head[1]))
        return ad.mul(ad.add(ad.tanh(_linear(h, self.color_head[2])), 1.0), 0.5)

    def evaluate(self, points, z_shape, z_pose, z_texture) -> tuple[Tensor, Tensor]:
        """Field at template-frame points -> (displacements, colours)."""
        for z in (z_shape, z_pose, z_texture):
            if ad._lift(z).shape != (LATENT_DIM,):
                raise ad.ShapeError(
                    f"latent code must have length {LATENT_DIM}, got {ad._lift(z).shape}")
        feats = self.trunk_features(points)
        return (self.displacement(feats, z_shape, z_pose),
                self.color(feats, z_texture))

    # --- template variants --------------------------------------------------
    def variant(self, resolution: str) -> TriMesh:
        if resolution not in self._variants:
            if resolution.startswith("simplified-"):
                target = int(resolution.split("-", 1)[1])
                self._variants[resolution] = simplify_mesh(self.template, target)
            elif resolution.startswith("subdivided-"):
                rounds = int(resolution.split("-", 1)[1])
                m = self.template
                for _ in range(rounds):
                    m = subdivide_midpoint(m)
                self._variants[resolution] = m
            else:
                raise KeyError(f"unknown resolution {resolution!r}; expected 'template', "
                               f"'simplified-<verts>' or 'subdivided-<rounds>'")
        return self._variants[resolution]

    def synthesize_tensors(self, instance: FootInstance, resolution: str = "template"):
        """Differentiable synthesis: (world vertices, colours, variant mesh)."""
        var = self.variant(resolution)
        pts = Tensor(var.vertices)
        feats = self.trunk_features(pts)
        dx = self.displacement(feats, instance.z_shape, instance.z_pose)
        col = self.color(feats, instance.z_texture)
        world = instance.registration.apply(ad.add(pts, dx))
        return world, col, var

    def synthesize_mesh(self, instance: FootInstance,
                        resolution: str = "template") -> TriMesh:
        world, col, var = self.synthesize_tensors(instance, resolution)
        return TriMesh(world.data, var.faces, np.clip(col.data, 0.0, 1.0),
                       var.slice_face_mask)

    def keypoints_np(self, instance: FootInstance,
                     resolution: str = "template") -> dict[str, np.ndarray]:
        """Template keypoint vertices carried through deformation + registration."""
        mesh = self.synthesize_mesh(instance, resolution)
        return {name: mesh.vertices[vid] for name, vid in self.keypoint_vertices.items()}


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def save_model(path, model: FieldModel, instances: InstanceSet | None = None) -> None:
    tensors: dict[str, np.ndarray] = {k: v.data for k, v in model.named_params().items()}
    tensors["template.vertices"] = model.template.vertices
    tensors["template.faces"] = model.template.faces.astype(np.int64)
    if model.template.vertex_colors is not None:
        tensors["template.colors"] = model.template.vertex_colors
    tensors["template.mask"] = model.template.slice_face_mask.astype(np.int64)
    table = []
    if instances is not None:
        for i, inst in enumerate(instances):
            tensors[f"z_shape.{inst.identity}"] = inst.z_shape.data
            tensors[f"z_texture.{inst.identity}"] = inst.z_texture.data
            tensors[f"z_pose.{inst.scan_id}"] = inst.z_pose.data
            tensors[f"reg.{inst.scan_id}.r"] = inst.registration.rotation.data
            tensors[f"reg.{inst.scan_id}.t"] = inst.registration.translation.data
            tensors[f"reg.{inst.scan_id}.s"] = inst.registration.scale.data
            table.append({"identity": inst.identity, "scan_id": inst.scan_id,
                          "pose_label": None if inst.pose_label is None
                          else [int(x) for x in inst.pose_label]})
    extra = {
        "encoding_order": model.encoding_order,
        "keypoint_vertices": model.keypoint_vertices,
        "instances": table,
        "share_identity_codes": instances.share_identity_codes if instances else True,
        "registered": instances.registered if instances else False,
    }
    save_checkpoint(path, tensors, extra)


def load_model(path) -> tuple[FieldModel, InstanceSet]:
    tensors, extra = load_checkpoint(path)
    template = TriMesh(tensors["template.vertices"], tensors["template.faces"],
                       tensors.get("template.colors"),
                       tensors["template.mask"].astype(bool))
    model = FieldModel(template, encoding_order=int(extra["encoding_order"]),
                       keypoint_vertices={k: int(v) for k, v in
                                          extra.get("keypoint_vertices", {}).items()})
    for name, t in model.named_params().items():
        t.data = tensors[name]
    instances = InstanceSet(share_identity_codes=bool(extra.get("share_identity_codes", True)))
    for row in extra.get("instances", []):
        label = row.get("pose_label")
        inst = instances.add(row["identity"], row["scan_id"],
                             None if label is None else np.asarray(label, dtype=np.int64))
        inst.z_shape.data = tensors[f"z_shape.{inst.identity}"]
        inst.z_texture.data = tensors[f"z_texture.{inst.identity}"]
        inst.z_pose.data = tensors[f"z_pose.{inst.scan_id}"]
        inst.registration.rotation.data = tensors[f"reg.{inst.scan_id}.r"]
        inst.registration.translation.data = tensors[f"reg.{inst.scan_id}.t"]
        inst.registration.scale.data = tensors[f"reg.{inst.scan_id}.s"]
    instances.registered = bool(extra.get("registered", False))
    return model, instances


# ---------------------------------------------------------------------------
# template resolution tools
# ---------------------------------------------------------------------------

def subdivide_midpoint(mesh: TriMesh) -> TriMesh:
    """Split every triangle into 4 at edge midpoints. A child face is masked
    iff its (single) parent face is masked; colors/uv average at midpoints."""
    verts = list(mesh.vertices)
    colors = list(mesh.vertex_colors) if mesh.vertex_colors is not None else None
    uv = list(mesh.uv) if mesh.uv is not None else None
    cache: dict[tuple[int, int], int] = {}

    def mid(i, j):
        key = (i, j) if i < j else (j, i)
        if key not in cache:
            cache[key] = len(verts)
            verts.append(0.5 * (mesh.vertices[i] + mesh.vertices[j]))
            if colors is not None:
                colors.append(0.5 * (mesh.vertex_colors[i] + mesh.vertex_colors[j]))
            if uv is not None:
                uv.append(0.5 * (mesh.uv[i] + mesh.uv[j]))
        return cache[key]

    faces = []
    mask = []
    for fi, (a, b, c) in enumerate(mesh.faces):
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        mask += [mesh.slice_face_mask[fi]] * 4
    return TriMesh(np.asarray(verts), np.asarray(faces, dtype=np.int64),
                   np.asarray(colors) if colors is not None else None,
                   np.asarray(mask, dtype=bool),
                   np.asarray(uv) if uv is not None else None)


def _face_quadric(p0, p1, p2) -> np.ndarray:
    n = np.cross(p1 - p0, p2 - p0)
    norm = np.linalg.norm(n)
    if norm == 0.0:
        return np.zeros((4, 4))
    n = n / norm
    plane = np.append(n, -n @ p0)
    return norm * 0.5 * np.outer(plane, plane)  # area-weighted


def simplify_mesh(mesh: TriMesh, target_vertices: int) -> TriMesh:
    """Quadric-error edge collapse down to ``target_vertices`` vertices.

    Candidate positions per collapse are the two endpoints and the midpoint;
    collapses that flip a surviving face normal are rejected. Surviving faces
    keep their own slice mask. Raises ValueError when the target cannot be
    reached.
    """
    if target_vertices < 4:
        raise ValueError(f"simplification target must be >= 4, got {target_vertices}")
    if target_vertices >= mesh.n_vertices:
        return mesh

    verts = mesh.vertices.copy()
    colors = None if mesh.vertex_colors is None else mesh.vertex_colors.copy()
    faces = {i: tuple(f) for i, f in enumerate(mesh.faces)}
    mask = {i: bool(m) for i, m in enumerate(mesh.slice_face_mask)}
    vert_faces: dict[int, set[int]] = {i: set() for i in range(len(verts))}
    for fi, f in faces.items():
        for v in f:
            vert_faces[v].add(fi)
    quadrics = np.zeros((len(verts), 4, 4))
    for fi, (a, b, c) in faces.items():
        q = _face_quadric(verts[a], verts[b], verts[c])
        quadrics[a] += q
        quadrics[b] += q
        quadrics[c] += q

    alive = np.ones(len(verts), dtype=bool)
    version = np.zeros(len(verts), dtype=np.int64)

    def edge_cost(u, v):
        q = quadrics[u] + quadrics[v]
        best_cost, best_pos = np.inf, None
        for pos in (verts[u], verts[v], 0.5 * (verts[u] + verts[v])):
            h = np.append(pos, 1.0)
            c = float(h @ q @ h)
            if c < best_cost:
                best_cost, best_pos = c, pos
        return best_cost, best_pos

    def current_edges():
        es = set()
        for f in faces.values():
            es.add(tuple(sorted((f[0], f[1]))))
            es.add(tuple(sorted((f[1], f[2]))))
            es.add(tuple(sorted((f[2], f[0]))))
        return es

    heap: list = []
    for u, v in current_edges():
        c, _ = edge_cost(u, v)
        heapq.heappush(heap, (c, u, v, version[u], version[v]))

    n_alive = len(verts)
    while n_alive > target_vertices:
        if not heap:
            raise ValueError(f"cannot reach simplification target {target_vertices}: "
                             f"no collapsible edges left at {n_alive} vertices")
        c, u, v, vu, vv = heapq.heappop(heap)
        if not (alive[u] and alive[v]) or vu != version[u] or vv != version[v]:
            continue
        _, pos = edge_cost(u, v)
        # reject collapses that flip surviving faces
        affected = (vert_faces[u] | vert_faces[v])
        flip = False
        for fi in affected:
            f = faces.get(fi)
            if f is None or u in f and v in f:
                continue
            tri_old = [verts[x] for x in f]
            tri_new = [pos if x in (u, v) else verts[x] for x in f]
            n_old = np.cross(tri_old[1] - tri_old[0], tri_old[2] - tri_old[0])
            n_new = np.cross(tri_new[1] - tri_new[0], tri_new[2] - tri_new[0])
            if n_old @ n_new < 0.0:
                flip = True
                break
        if flip:
            continue

        verts[u] = pos
        if colors is not None:
            colors[u] = 0.5 * (colors[u] + colors[v])
        quadrics[u] = quadrics[u] + quadrics[v]
        alive[v] = False
        n_alive -= 1
        touched = set()
        for fi in list(vert_faces[v]):
            f = faces.get(fi)
            if f is None:
                continue
            if u in f:  # face spanned the collapsed edge: drop it
                for x in f:
                    vert_faces[x].discard(fi)
                    touched.add(x)
                del faces[fi]
                del mask[fi]
            else:
                faces[fi] = tuple(u if x == v else x for x in f)
                vert_faces[u].add(fi)
                vert_faces[v].discard(fi)
        for x in touched:  # vertices stranded without faces no longer count
            if x != v and alive[x] and not vert_faces[x]:
                alive[x] = False
                n_alive -= 1
        version[u] += 1
        neigh = set()
        for fi in vert_faces[u]:
            neigh.update(faces[fi])
        neigh.discard(u)
        for w in neigh:
            cst, _ = edge_cost(u, w)
            a, b = (u, w) if u < w else (w, u)
            heapq.heappush(heap, (cst, a, b, version[a], version[b]))

    used = np.zeros(len(verts), dtype=bool)
    for f in faces.values():
        for x in f:
            used[x] = True
    remap = -np.ones(len(verts), dtype=np.int64)
    remap[used] = np.arange(used.sum())
    new_faces = []
    new_mask = []
    for fi, f in faces.items():
        nf = tuple(remap[x] for x in f)
        if len(set(nf)) == 3:
            new_faces.append(nf)
            new_mask.append(mask[fi])
    return TriMesh(verts[used], np.asarray(new_faces, dtype=np.int64),
                   colors[used] if colors is not None else None,
                   np.asarray(new_mask, dtype=bool))
