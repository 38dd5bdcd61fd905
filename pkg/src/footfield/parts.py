"""Unsupervised part machinery: feature providers, k-means clustering, a
linear pixel classifier, and lifting of part labels onto template vertices.

The feature provider abstracts away the source of per-pixel feature maps.
The synthetic provider renders geometry-derived features (bounding-box
normalized surface position plus surface normal, 6 channels) for views it
has been told about; the file provider replays precomputed maps from disk.
Clustering those features across views yields part labels, a linear
classifier reproduces the labels from features alone, and the lifting step
optimizes per-vertex class scores so that rendered score maps match the
classifier's labels from every view.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor
from .losses import part_ce_loss
from .mesh import TriMesh
from .render import Camera, RenderJob, load_float_map, render_attributes_hard, \
    render_part_probabilities, save_float_map


@dataclass
class ViewSpec:
    """A renderable view: key names it, mesh+camera define it."""
    key: str
    mesh: TriMesh
    camera: Camera


class SyntheticGeometryProvider:
    """Feature maps rendered from the view's own geometry: per pixel the
    surface point normalized into the mesh bounding box plus the surface
    normal; background pixels are zero. Deterministic per view."""

    FEATURE_DIM = 6

    def __init__(self, views: list[ViewSpec] | None = None):
        self._views: dict[str, ViewSpec] = {}
        for v in views or []:
            self.add_view(v)

    def add_view(self, view: ViewSpec) -> None:
        self._views[view.key] = view

    def keys(self) -> list[str]:
        return sorted(self._views)

    def feature_map(self, key: str) -> np.ndarray:
        view = self._views[key]
        mesh = view.mesh
        lo, hi = mesh.bounds()
        extent = np.where(hi - lo > 0, hi - lo, 1.0)
        norm_pos = (mesh.vertices - lo) / extent
        attrs = np.concatenate([norm_pos, mesh.vertex_normals()], axis=1)
        img, covered = render_attributes_hard(mesh, attrs, view.camera)
        img[~covered] = 0.0
        return img

    def coverage(self, key: str) -> np.ndarray:
        view = self._views[key]
        _, covered = render_attributes_hard(
            view.mesh, np.zeros((view.mesh.n_vertices, 1)), view.camera)
        return covered


class FileFeatureProvider:
    """Replays precomputed per-pixel feature maps ``<key>.npyraw`` from a directory."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def keys(self) -> list[str]:
        return sorted(p.stem for p in self.directory.glob("*.npyraw"))

    def feature_map(self, key: str) -> np.ndarray:
        return load_float_map(self.directory / f"{key}.npyraw")

    def coverage(self, key: str) -> np.ndarray:
        return np.abs(self.feature_map(key)).sum(axis=2) > 0

    def store(self, key: str, feature_map: np.ndarray) -> None:
        self.directory.mkdir(parents=True, exist_ok=True)
        save_float_map(self.directory / f"{key}.npyraw", feature_map)


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

def kmeans_cluster(features: np.ndarray, k: int, seed: int,
                   max_iter: int = 100, tol: float = 1e-6):
    """Lloyd's algorithm with k-means++ seeding; deterministic per seed.

    Returns (centroids (k, D), labels (N,)). Raises when there are fewer
    distinct points than clusters.
    """
    pts = np.asarray(features, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError(f"features must be (N, D), got {pts.shape}")
    distinct = np.unique(pts, axis=0)
    if len(distinct) < k:
        raise ValueError(f"k-means needs at least {k} distinct points, "
                         f"got {len(distinct)}")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, pts.shape[1]))
    centroids[0] = pts[rng.integers(len(pts))]
    d2 = ((pts - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        probs = d2 / d2.sum() if d2.sum() > 0 else np.full(len(pts), 1.0 / len(pts))
        centroids[j] = pts[rng.choice(len(pts), p=probs)]
        d2 = np.minimum(d2, ((pts - centroids[j]) ** 2).sum(axis=1))

    labels = np.zeros(len(pts), dtype=np.int64)
    for _ in range(max_iter):
        labels, dist = kernels.kmeans_assign(pts, centroids)
        new_centroids = centroids.copy()
        for j in range(k):
            mask = labels == j
            if mask.any():
                new_centroids[j] = pts[mask].mean(axis=0)
            else:  # dead cluster: respawn at the farthest point
                new_centroids[j] = pts[np.argmax(dist)]
        move = np.linalg.norm(new_centroids - centroids, axis=1).max()
        centroids = new_centroids
        if move < tol:
            break
    labels, _ = kernels.kmeans_assign(pts, centroids)
    return centroids, labels


def save_centroids(path, centroids: np.ndarray) -> None:
    Path(path).write_text(json.dumps({"centroids": centroids.tolist()}))


def load_centroids(path) -> np.ndarray:
    return np.asarray(json.loads(Path(path).read_text())["centroids"])


# ---------------------------------------------------------------------------
# linear pixel classifier
# ---------------------------------------------------------------------------

class PartClassifier:
    """Linear map features (D) -> class scores (C)."""

    def __init__(self, weights: np.ndarray, bias: np.ndarray):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ValueError("classifier needs weights (D, C) and bias (C,)")
        if self.n_classes < 2:
            raise ValueError("classifier needs at least 2 classes")

    @property
    def n_classes(self) -> int:
        return self.weights.shape[1]

    def scores(self, features: np.ndarray) -> np.ndarray:
        feats = np.asarray(features, dtype=np.float64)
        return feats @ self.weights + self.bias

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.argmax(self.scores(features), axis=-1)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(
            {"weights": self.weights.tolist(), "bias": self.bias.tolist()}))

    @staticmethod
    def load(path) -> "PartClassifier":
        blob = json.loads(Path(path).read_text())
        return PartClassifier(np.asarray(blob["weights"]), np.asarray(blob["bias"]))


def train_part_classifier(features: np.ndarray, labels: np.ndarray, n_classes: int,
                          epochs: int = 300, lr: float = 0.05,
                          seed: int = 0) -> PartClassifier:
    """Softmax regression on (features, cluster labels) with Adam."""
    feats = np.asarray(features, dtype=np.float64)
    labs = np.asarray(labels, dtype=np.int64)
    if labs.min() < 0 or labs.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")
    if len(np.unique(labs)) < 2:
        raise ValueError("degenerate single-class training set")
    rng = np.random.default_rng(seed)
    w = ad.parameter(rng.normal(0.0, 0.01, size=(feats.shape[1], n_classes)))
    b = ad.parameter(np.zeros(n_classes))
    opt = ad.Adam([w, b], lr=lr)
    x = Tensor(feats)
    for _ in range(epochs):
        with ad.Tape() as tape:
            logits = ad.add(ad.matmul(x, w), b)
            logp = ad.log_softmax(logits, axis=1)
            loss = ad.neg(ad.mean(ad.gather_cols(logp, labs)))
            grads = tape.backward(loss)
        opt.step(grads)
    return PartClassifier(w.data, b.data)


# ---------------------------------------------------------------------------
# the full 2D part pipeline and the 3D lift
# ---------------------------------------------------------------------------

def build_part_pipeline(provider, keys: list[str], n_classes: int, seed: int = 0,
                        classifier_epochs: int = 300):
    """Cluster provider features across views, then train the classifier.

    Returns (classifier, centroids). Features are collected from covered
    pixels only.
    """
    feats = []
    for key in keys:
        fm = provider.feature_map(key)
        cov = provider.coverage(key)
        feats.append(fm[cov])
    stacked = np.concatenate(feats, axis=0)
    centroids, labels = kmeans_cluster(stacked, n_classes, seed)
    classifier = train_part_classifier(stacked, labels, n_classes,
                                       epochs=classifier_epochs, seed=seed)
    return classifier, centroids


def label_image(provider, classifier: PartClassifier, key: str):
    """Per-pixel labels + validity for one view."""
    fm = provider.feature_map(key)
    cov = provider.coverage(key)
    labels = classifier.predict(fm.reshape(-1, fm.shape[2])).reshape(cov.shape)
    return labels, cov


def lift_parts_to_template(template: TriMesh, classifier: PartClassifier,
                           provider, views: list[ViewSpec], steps: int = 500,
                           lr: float = 0.05, sigma: float = 1e-4,
                           seed: int = 0):
    """Optimize per-vertex part scores so rendered score maps match the
    classifier's labels across the given views.

    Returns (scores (V, C) pre-softmax, covered (V,) bool). Vertices visible
    in no view receive no gradient and keep uniform scores; they are flagged
    False in ``covered``.
    """
    if len(views) < 2:
        raise ValueError("lifting part labels needs at least 2 views")
    c = classifier.n_classes
    targets = []
    covered_verts = np.zeros(template.n_vertices, dtype=bool)
    from . import kernels
    from .render import project_points
    for view in views:
        labels, valid = label_image(provider, classifier, view.key)
        targets.append((view, labels, valid))
        # coverage = vertices of faces the soft rasterizer can select, i.e.
        # exactly the vertices whose scores can receive gradient
        ndc, z = project_points(template.vertices, view.camera)
        face_xy = ndc.data[template.faces]
        zc = z.data[:, 0][template.faces].mean(axis=1)
        depth = (zc - zc.min()) / max(zc.max() - zc.min(), 1e-9)
        ok = ~template.slice_face_mask & (z.data[:, 0][template.faces] > 1e-6).all(axis=1)
        radius = max(np.sqrt(30.0 * sigma), 2.5 * 2.0 / max(view.camera.height,
                                                            view.camera.width))
        sel = kernels.select_faces(face_xy, depth, ok, view.camera.height,
                                   view.camera.width, 8, radius)
        seen = np.unique(sel[sel >= 0])
        covered_verts[template.faces[seen].ravel()] = True

    scores = ad.parameter(np.zeros((template.n_vertices, c)))
    opt = ad.Adam([scores], lr=lr)
    for _ in range(steps):
        with ad.Tape() as tape:
            total = None
            for view, labels, valid in targets:
                job = RenderJob(view.camera, sigma=sigma, channels="attributes")
                out = render_part_probabilities(template.vertices, template.faces,
                                                scores, job,
                                                slice_face_mask=template.slice_face_mask)
                term = part_ce_loss(out.image, labels, valid)
                total = term if total is None else ad.add(total, term)
            grads = tape.backward(ad.mul(total, 1.0 / len(targets)))
        opt.step(grads)
    return scores.data, covered_verts


def part_probabilities(scores: np.ndarray) -> np.ndarray:
    """Softmax over classes; rows sum to 1."""
    s = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def save_part_scores(path, scores: np.ndarray) -> None:
    save_float_map(path, scores)


def load_part_scores(path) -> np.ndarray:
    return load_float_map(path)
