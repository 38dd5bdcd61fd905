"""Training and inference objectives.

Chamfer uses per-direction means (not raw sums) so its weight is independent
of sample count; the evaluation metric reports the same mean form. The
contrastive similarity y = l1.l2 is normalized by max(|l1||l2|, 1) and
clamped to [0, 1] so multi-hot pose labels stay in the standard form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor
from .mesh import SampledPoints

CONTRASTIVE_MARGIN = 0.5


@dataclass
class LossWeights:
    chamfer: float = 1e4
    smooth: float = 1e3
    texture: float = 1.0
    contrastive: float = 1.0
    silhouette: float = 1.0
    part_ce: float = 1.0

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"loss weight {name} must be non-negative, got {v}")


# ---------------------------------------------------------------------------
# pose label vectors
# ---------------------------------------------------------------------------

POSE_LABEL_LENGTH = 8

# (index, value) per pose name; two-extreme poses map extreme1 -> -1, extreme2 -> +1
_POSE_TABLE = {
    "t-pose": (0, 1),
    "plantarflex": (1, -1),
    "dorsiflex": (1, 1),
    "inversion": (2, -1),
    "eversion": (2, 1),
    "lateral rotation": (3, -1),
    "medial rotation": (3, 1),
    "toe flexion": (4, -1),
    "toe extension": (4, 1),
    "toe abduction": (5, -1),
    "toe adduction": (5, 1),
    "standing on floor": (6, 1),
    "tiptoes": (7, 1),
}

_CANONICAL = {
    "t-pose": "T-Pose", "plantarflex": "Plantarflex", "dorsiflex": "Dorsiflex",
    "inversion": "Inversion", "eversion": "Eversion",
    "lateral rotation": "Lateral rotation", "medial rotation": "Medial rotation",
    "toe flexion": "Toe Flexion", "toe extension": "Toe Extension",
    "toe abduction": "Toe Abduction", "toe adduction": "Toe Adduction",
    "standing on floor": "Standing on Floor", "tiptoes": "Tiptoes",
}

_ALIASES = {
    "tpose": "t-pose",
    "plantarflexion": "plantarflex",
    "dorsiflexion": "dorsiflex",
}


def _normalize_pose_name(name: str) -> str:
    key = " ".join(name.strip().lower().replace("_", " ").replace("-", " ").split())
    key = _ALIASES.get(key.replace(" ", ""), key)
    if key == "t pose":
        key = "t-pose"
    return key


def encode_pose_label(descriptions: list[str]) -> np.ndarray:
    """8-long label vector from pose-description names.

    Single-extreme poses contribute 1 at their index; two-extreme poses
    contribute -1 or +1. Conflicting extremes for one index are an error.
    """
    v = np.zeros(POSE_LABEL_LENGTH, dtype=np.int64)
    for name in descriptions:
        key = _normalize_pose_name(name)
        if key not in _POSE_TABLE:
            raise ValueError(f"unknown pose description {name!r}")
        idx, val = _POSE_TABLE[key]
        if v[idx] != 0 and v[idx] != val:
            raise ValueError(f"conflicting pose extremes for index {idx}: "
                             f"{name!r} contradicts an earlier description")
        v[idx] = val
    return v


def decode_pose_label(vector: np.ndarray) -> list[str]:
    v = np.asarray(vector, dtype=np.int64)
    if v.shape != (POSE_LABEL_LENGTH,):
        raise ValueError(f"pose label must have length {POSE_LABEL_LENGTH}")
    names = []
    for key, (idx, val) in _POSE_TABLE.items():
        if v[idx] == val:
            names.append(_CANONICAL[key])
    return names


def pose_similarity(l1: np.ndarray, l2: np.ndarray) -> float:
    """y in [0,1]: normalized, clamped dot product of two label vectors."""
    l1 = np.asarray(l1, dtype=np.float64)
    l2 = np.asarray(l2, dtype=np.float64)
    denom = max(np.linalg.norm(l1) * np.linalg.norm(l2), 1.0)
    return float(np.clip((l1 @ l2) / denom, 0.0, 1.0))


# ---------------------------------------------------------------------------
# chamfer
# ---------------------------------------------------------------------------

def _points_of(x) -> np.ndarray:
    if isinstance(x, SampledPoints):
        return x.points
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def chamfer(a, b) -> Tensor:
    """Mean-form chamfer: mean_a min_b |a-b| + mean_b min_a |a-b|.

    Accepts arrays, SampledPoints, or autodiff Tensors; differentiable with
    respect to any Tensor argument (the nearest-neighbour pairing is held
    fixed in the pullback, the standard subgradient).
    """
    pa = _points_of(a)
    pb = _points_of(b)
    if len(pa) == 0 or len(pb) == 0:
        raise ValueError("chamfer: empty point set")
    idx_ab, d_ab = kernels.nearest_neighbours(pa, pb)
    idx_ba, d_ba = kernels.nearest_neighbours(pb, pa)
    value = Tensor(d_ab.mean() + d_ba.mean())

    def unit(diff, dist):
        safe = np.where(dist == 0.0, 1.0, dist)
        return np.where(dist[:, None] == 0.0, 0.0, diff / safe[:, None])

    parents = []
    if isinstance(a, Tensor):
        def pull_a(g):
            grad = unit(pa - pb[idx_ab], d_ab) / len(pa)
            back = np.zeros_like(pa)
            np.add.at(back, idx_ba, unit(pb - pa[idx_ba], d_ba))
            return (grad - back / len(pb)) * g

        parents.append((a, pull_a))
    if isinstance(b, Tensor):
        def pull_b(g):
            grad = unit(pb - pa[idx_ba], d_ba) / len(pb)
            back = np.zeros_like(pb)
            np.add.at(back, idx_ab, unit(pa - pb[idx_ab], d_ab))
            return (grad - back / len(pa)) * g

        parents.append((b, pull_b))
    return ad._record(value, parents)


# ---------------------------------------------------------------------------
# smoothness
# ---------------------------------------------------------------------------

def _edge_arrays(faces: np.ndarray) -> np.ndarray:
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def smoothness_loss(vertices, faces: np.ndarray) -> Tensor:
    """Mean squared umbrella-Laplacian magnitude plus mean squared edge length,
    equally weighted; differentiable w.r.t. vertices."""
    v = ad._lift(vertices)
    n = v.shape[0]
    edges = _edge_arrays(np.asarray(faces, dtype=np.int64))
    both_src = np.concatenate([edges[:, 0], edges[:, 1]])
    both_dst = np.concatenate([edges[:, 1], edges[:, 0]])
    counts = np.bincount(both_src, minlength=n).astype(np.float64)
    if (counts == 0).any():
        bad = int(np.nonzero(counts == 0)[0][0])
        raise ValueError(f"vertex {bad} has no neighbours")
    neigh_sum = ad.index_add(n, both_src, ad.take_rows(v, both_dst))
    inv_counts = np.repeat((1.0 / counts)[:, None], 3, axis=1)
    lap = ad.sub(ad.mul(neigh_sum, Tensor(inv_counts)), v)
    lap_term = ad.mean(ad.tensor_sum(ad.mul(lap, lap), axis=1))
    diff = ad.sub(ad.take_rows(v, edges[:, 0]), ad.take_rows(v, edges[:, 1]))
    edge_term = ad.mean(ad.tensor_sum(ad.mul(diff, diff), axis=1))
    return ad.add(lap_term, edge_term)


# ---------------------------------------------------------------------------
# texture
# ---------------------------------------------------------------------------

def texture_loss(model, instance, gt_points: np.ndarray, gt_colors: np.ndarray) -> Tensor:
    """Mean L2 colour error at ground-truth surface samples.

    The samples live in the scan frame; they are pulled back into the
    template frame through the instance's current registration (held
    constant) before querying the colour head.
    """
    if gt_colors is None:
        raise ValueError("texture loss requires ground-truth colours")
    template_pts = instance.registration.invert_np(np.asarray(gt_points, dtype=np.float64))
    feats = model.trunk_features(Tensor(template_pts))
    pred = model.color(feats, instance.z_texture)
    err = ad.norm2(ad.sub(pred, Tensor(gt_colors)), axis=1)
    return ad.mean(err)


# ---------------------------------------------------------------------------
# contrastive
# ---------------------------------------------------------------------------

def contrastive_loss(z1, z2, l1, l2, margin: float = CONTRASTIVE_MARGIN) -> Tensor:
    """y*d^2 + (1-y)*max(margin - d, 0)^2 with d = |z1 - z2|_2."""
    if l1 is None or l2 is None:
        raise ValueError("contrastive loss requires pose labels for both scans")
    y = pose_similarity(l1, l2)
    d = ad.norm2(ad.sub(ad._lift(z1), ad._lift(z2)))
    pull = ad.mul(ad.mul(d, d), y)
    hinge = ad.relu(ad.sub(margin, d))
    push = ad.mul(ad.mul(hinge, hinge), 1.0 - y)
    return ad.add(pull, push)


# ---------------------------------------------------------------------------
# part-based cross entropy
# ---------------------------------------------------------------------------

def part_ce_loss(scores, labels: np.ndarray, valid_mask: np.ndarray) -> Tensor:
    """Mean over valid pixels of -log softmax at the label class.

    ``scores`` is an (H, W, C) pre-softmax map (Tensor or array); ``labels``
    (H, W) integer classes; ``valid_mask`` (H, W) boolean.
    """
    s = ad._lift(scores)
    if s.ndim != 3:
        raise ad.ShapeError(f"part_ce_loss expects (H, W, C) scores, got {s.shape}")
    h, w, c = s.shape
    labels = np.asarray(labels)
    valid = np.asarray(valid_mask, dtype=bool)
    if labels.shape != (h, w) or valid.shape != (h, w):
        raise ad.ShapeError(f"labels/valid_mask must be ({h}, {w}), got "
                            f"{labels.shape} and {valid.shape}")
    idx = np.nonzero(valid.reshape(-1))[0]
    if len(idx) == 0:
        raise ValueError("part_ce_loss: empty valid mask")
    lab = labels.reshape(-1)[idx]
    if lab.min() < 0 or lab.max() >= c:
        raise ValueError(f"labels must lie in [0, {c}), got range "
                         f"[{lab.min()}, {lab.max()}]")
    flat = ad.reshape(s, (h * w, c))
    picked = ad.take_rows(flat, idx)
    logp = ad.log_softmax(picked, axis=1)
    return ad.neg(ad.mean(ad.gather_cols(logp, lab)))
