"""Orchestration: staged training, 3D/2D fitting, PCA baseline, evaluation.

Training follows three stages: (1) per-scan registration of the raw template
(only rotation/translation/scale optimized, chamfer energy); (2) network
training (weights + latent codes, chamfer + smoothness + texture, plus the
contrastive pose term when pose labels are supervised); (3) latent
refinement with frozen weights, which doubles as the mechanism for fitting
unseen scans. Evaluation is model-agnostic: anything that can produce a
predicted mesh and keypoints per scan is scored by the same code path.
"""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor
from .losses import LossWeights, chamfer, contrastive_loss, part_ce_loss, \
    smoothness_loss, texture_loss
from .mesh import TriMesh, sample_surface
from .model import FieldModel, FootInstance, InstanceSet, Registration
from .render import Camera, RenderJob, auto_frame_camera, iou, rasterize, \
    render_part_probabilities, silhouette_loss
from .synth import DatasetBundle, ScanRecord


class NumericalError(RuntimeError):
    """Loss went non-finite during optimization."""


class StageOrderError(RuntimeError):
    """A stage ran before its prerequisite stage."""


@dataclass
class TrainConfig:
    supervision: str = "identity"   # unsupervised | identity | identity+pose
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 5e-5                # network/latent learning rate
    # stage 1: registration
    registration_steps: int = 200
    registration_lr: float = 1e-2
    registration_lr_final: float = 1e-4
    registration_samples: int = 600
    registration_init_centroid: bool = True
    # stage 2: network training
    epochs: int = 1000
    batch_size: int | None = None   # None = full batch
    chamfer_samples: int = 5000
    texture_samples: int = 1000
    train_resolution: str = "template"
    # True freezes the chamfer/texture sample sets for the whole run: the
    # objective becomes deterministic, so the tiny Adam steps stay coherent
    # instead of random-walking in resampling noise
    fixed_samples: bool = False
    # stage 3: latent refinement
    refine_steps: int = 500
    log_every: int = 25

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.supervision not in ("unsupervised", "identity", "identity+pose"):
            raise ValueError(f"unknown supervision level {self.supervision!r}")


@dataclass
class FitImagesConfig:
    steps: int = 300
    registration_lr: float = 1e-2
    latent_lr: float = 2e-3
    use_part_loss: bool = False
    resolution: str = "template"
    sigma: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    log_every: int = 50


class TrainingLog:
    """Per-epoch loss terms; the logged total is the exact weighted sum."""

    def __init__(self, columns: list[str]):
        self.columns = columns
        self.rows: list[dict] = []

    def add(self, epoch: int, terms: dict[str, float], total: float) -> None:
        row = {"epoch": epoch, "total": total}
        row.update(terms)
        self.rows.append(row)

    def last(self, key: str) -> float:
        return self.rows[-1][key]

    def first(self, key: str) -> float:
        return self.rows[0][key]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch"] + self.columns + ["total"])
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row)


def build_instances(dataset: DatasetBundle, supervision: str,
                    scans: list[ScanRecord] | None = None) -> InstanceSet:
    """Instance table for the given scans (default: the train split). Shape
    and texture codes alias per identity unless fully unsupervised."""
    instances = InstanceSet(share_identity_codes=supervision != "unsupervised")
    for scan in scans if scans is not None else dataset.split("train"):
        label = scan.pose_vector if supervision == "identity+pose" else None
        instances.add(scan.identity, scan.scan_id, label)
    return instances


def _check_finite(value: float, where: str) -> None:
    if not np.isfinite(value):
        raise NumericalError(f"non-finite loss during {where}: {value}")


# ---------------------------------------------------------------------------
# stage 1: registration
# ---------------------------------------------------------------------------

def train_registration(template: TriMesh, dataset: DatasetBundle,
                       instances: InstanceSet, config: TrainConfig,
                       log: TrainingLog | None = None) -> TrainingLog:
    """Optimize per-scan rotation/translation/scale of the undeformed template
    against each scan by the chamfer energy; everything else stays fixed."""
    scans = {s.scan_id: s for s in dataset.scans}
    pairs = [(inst, scans[inst.scan_id]) for inst in instances]
    if config.registration_init_centroid:
        t_centroid = template.vertices.mean(axis=0)
        for inst, scan in pairs:
            inst.registration.translation.data = scan.mesh.centroid() - t_centroid
    params = []
    for inst, _ in pairs:
        params.extend(inst.registration.params())
    opt = ad.Adam(params, lr=config.registration_lr)
    log = log or TrainingLog(["chamfer"])
    n = config.registration_steps
    for step in range(n):
        # cosine decay toward registration_lr_final for sub-mm convergence
        frac = 0.5 * (1.0 + np.cos(np.pi * step / max(n - 1, 1)))
        opt.lr = config.registration_lr_final + \
            (config.registration_lr - config.registration_lr_final) * frac
        # template and scans share the per-step seed: when a scan is a rigid
        # transform of the template the samples correspond exactly and the
        # chamfer can reach zero rather than the sampling-noise floor
        step_seed = config.seed + 31 * step
        tpl_pts = sample_surface(template, config.registration_samples,
                                 seed=step_seed).points
        with ad.Tape() as tape:
            total = None
            for inst, scan in pairs:
                moved = inst.registration.apply(Tensor(tpl_pts))
                gt = sample_surface(scan.mesh, config.registration_samples,
                                    seed=step_seed).points
                term = chamfer(moved, gt)
                total = term if total is None else ad.add(total, term)
            loss = ad.mul(total, config.weights.chamfer / len(pairs))
            grads = tape.backward(loss)
        opt.step(grads)
        _check_finite(loss.item(), "registration")
        if step % config.log_every == 0 or step == n - 1:
            mean_chamf = loss.item() / config.weights.chamfer
            log.add(step, {"chamfer": mean_chamf}, loss.item())
    instances.registered = True
    return log


# ---------------------------------------------------------------------------
# stages 2 and 3
# ---------------------------------------------------------------------------

def _draw_face_points(areas: np.ndarray, n: int, rng):
    """Area-weighted (face index, barycentric) draws."""
    total = areas.sum()
    probs = areas / total if total > 0 else np.full(len(areas), 1.0 / len(areas))
    choice = rng.choice(len(areas), size=n, p=probs)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    return choice, bary


def _interp_on_mesh(world: Tensor, faces: np.ndarray, choice, bary) -> Tensor:
    out = None
    for c in range(3):
        corner = ad.take_rows(world, faces[choice, c])
        term = ad.scale_rows(corner, bary[:, c])
        out = term if out is None else ad.add(out, term)
    return out


def _sample_on_deformed(world: Tensor, faces: np.ndarray, n: int, rng) -> Tensor:
    """Area-weighted point samples on the deformed mesh, differentiable
    through the vertex positions (face choice and barycentrics held fixed)."""
    tri = world.data[faces]
    areas = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0],
                                          tri[:, 2] - tri[:, 0]), axis=1)
    choice, bary = _draw_face_points(areas, n, rng)
    return _interp_on_mesh(world, faces, choice, bary)


class _SampleBank:
    """Frozen per-scan sample sets for deterministic training objectives."""

    def __init__(self, pairs, var: TriMesh, config: TrainConfig):
        rng = np.random.default_rng(config.seed + 977)
        areas = var.face_areas()
        self.pred = {}
        self.gt = {}
        self.tex = {}
        for inst, scan in pairs:
            self.pred[inst.scan_id] = _draw_face_points(
                areas, config.chamfer_samples, rng)
            self.gt[inst.scan_id] = sample_surface(
                scan.mesh, config.chamfer_samples, seed=int(rng.integers(2 ** 31)))
            if config.texture_samples > 0:
                self.tex[inst.scan_id] = sample_surface(
                    scan.mesh, config.texture_samples, seed=int(rng.integers(2 ** 31)))


def _epoch_loss(model: FieldModel, batch, var: TriMesh, config: TrainConfig,
                rng, contrastive: bool, feats_cache: Tensor | None = None,
                bank: "_SampleBank | None" = None):
    """One full forward pass; returns (loss tensor, raw term means)."""
    w = config.weights
    feats = feats_cache if feats_cache is not None \
        else model.trunk_features(Tensor(var.vertices))
    chamf_terms = []
    smooth_terms = []
    tex_terms = []
    for inst, scan in batch:
        dx = model.displacement(feats, inst.z_shape, inst.z_pose)
        world = inst.registration.apply(ad.add(Tensor(var.vertices), dx))
        if bank is not None:
            choice, bary = bank.pred[inst.scan_id]
            pred_pts = _interp_on_mesh(world, var.faces, choice, bary)
            gt = bank.gt[inst.scan_id]
        else:
            pred_pts = _sample_on_deformed(world, var.faces,
                                           config.chamfer_samples, rng)
            gt = sample_surface(scan.mesh, config.chamfer_samples,
                                seed=int(rng.integers(2 ** 31)))
        chamf_terms.append(chamfer(pred_pts, gt.points))
        smooth_terms.append(smoothness_loss(world, var.faces))
        if w.texture > 0:
            if bank is not None:
                gt_tex = bank.tex[inst.scan_id]
            else:
                gt_tex = sample_surface(scan.mesh, config.texture_samples,
                                        seed=int(rng.integers(2 ** 31)))
            tex_terms.append(texture_loss(model, inst, gt_tex.points, gt_tex.colors))

    def mean_of(terms):
        if not terms:
            return None
        total = terms[0]
        for t in terms[1:]:
            total = ad.add(total, t)
        return ad.mul(total, 1.0 / len(terms))

    chamf = mean_of(chamf_terms)
    smooth = mean_of(smooth_terms)
    tex = mean_of(tex_terms)
    loss = ad.add(ad.mul(chamf, w.chamfer), ad.mul(smooth, w.smooth))
    if tex is not None:
        loss = ad.add(loss, ad.mul(tex, w.texture))
    contr = None
    if contrastive:
        insts = [inst for inst, _ in batch]
        pairs = [(a, b) for a, b in itertools.combinations(insts, 2)
                 if a.pose_label is not None and b.pose_label is not None]
        if pairs:
            terms = [contrastive_loss(a.z_pose, b.z_pose, a.pose_label, b.pose_label)
                     for a, b in pairs]
            contr = mean_of(terms)
            loss = ad.add(loss, ad.mul(contr, w.contrastive))
    terms = {
        "chamfer": chamf.item(),
        "smooth": smooth.item(),
        "texture": tex.item() if tex is not None else 0.0,
        "contrastive": contr.item() if contr is not None else 0.0,
    }
    return loss, terms


LOSS_COLUMNS = ["chamfer", "smooth", "texture", "contrastive"]


_STAGE_SEEDS = {"network": 101, "refine": 211}


def _run_epochs(model: FieldModel, dataset: DatasetBundle, instances: InstanceSet,
                config: TrainConfig, params: list[Tensor], epochs: int,
                contrastive: bool, stage: str) -> TrainingLog:
    scan_map = {s.scan_id: s for s in dataset.scans}
    pairs = [(inst, scan_map[inst.scan_id]) for inst in instances]
    var = model.variant(config.train_resolution)
    opt = ad.Adam(params, lr=config.lr)
    log = TrainingLog(LOSS_COLUMNS)
    rng = np.random.default_rng(config.seed + _STAGE_SEEDS[stage])
    # frozen weights + fixed query points: the trunk features are constant
    feats_cache = None
    if stage == "refine":
        feats_cache = Tensor(model.trunk_features(Tensor(var.vertices)).data)
    bank = _SampleBank(pairs, var, config) if config.fixed_samples else None
    for epoch in range(epochs):
        batch = pairs
        if config.batch_size is not None and config.batch_size < len(pairs):
            idx = rng.choice(len(pairs), size=config.batch_size, replace=False)
            batch = [pairs[i] for i in idx]
        with ad.Tape() as tape:
            loss, terms = _epoch_loss(model, batch, var, config, rng,
                                      contrastive, feats_cache, bank)
            grads = tape.backward(loss)
        opt.step(grads)
        total = loss.item()
        _check_finite(total, stage)
        if epoch % config.log_every == 0 or epoch == epochs - 1:
            log.add(epoch, terms, total)
    return log


def train_network(model: FieldModel, dataset: DatasetBundle,
                  instances: InstanceSet, config: TrainConfig) -> TrainingLog:
    """Stage 2: optimize network weights and all latent codes."""
    if not instances.registered:
        raise StageOrderError("network training requires stage-1 registrations; "
                              "run train_registration first")
    contrastive = config.supervision == "identity+pose"
    if contrastive and all(i.pose_label is None for i in instances):
        raise ValueError("supervision level identity+pose requires pose labels")
    with_tex = config.weights.texture > 0
    params = model.params(include_color=with_tex) \
        + instances.latent_params(include_texture=with_tex)
    return _run_epochs(model, dataset, instances, config, params,
                       config.epochs, contrastive, "network")


def refine_latents(model: FieldModel, dataset: DatasetBundle,
                   instances: InstanceSet, config: TrainConfig,
                   steps: int | None = None) -> TrainingLog:
    """Stage 3: freeze weights, fully optimize the latent codes. Also the
    mechanism for fitting scans unseen in training."""
    if not instances.registered:
        raise StageOrderError("latent refinement requires stage-1 registrations")
    weights = model.params()
    flags = [w.requires_grad for w in weights]
    for w in weights:
        w.requires_grad = False
    try:
        return _run_epochs(model, dataset, instances, config,
                           instances.latent_params(
                               include_texture=config.weights.texture > 0),
                           steps if steps is not None else config.refine_steps,
                           False, "refine")
    finally:
        for w, f in zip(weights, flags):
            w.requires_grad = f


def fit_scans_3d(model: FieldModel, dataset: DatasetBundle,
                 scan_ids: list[str], config: TrainConfig):
    """Fit unseen scans: stage-1 registration, then latent refinement with
    frozen weights. Registration aligns the model's zero-code synthesis (the
    trained mean foot), which is the surface refinement actually starts
    from. Returns (instances, registration log, refinement log)."""
    scans = [dataset.by_id(sid) for sid in scan_ids]
    instances = build_instances(dataset, config.supervision, scans)
    neutral = FootInstance("_mean", "_mean", Tensor(np.zeros(100)),
                           Tensor(np.zeros(100)), Tensor(np.zeros(100)),
                           Registration.identity())
    mean_mesh = model.synthesize_mesh(neutral)
    reg_log = train_registration(mean_mesh, dataset, instances, config)
    ref_log = refine_latents(model, dataset, instances, config)
    return instances, reg_log, ref_log


# ---------------------------------------------------------------------------
# prediction + evaluation
# ---------------------------------------------------------------------------

@dataclass
class PredictedFoot:
    mesh: TriMesh
    keypoints: dict[str, np.ndarray]


def predict_meshes(model: FieldModel, instances: InstanceSet,
                   resolution: str = "template") -> dict[str, PredictedFoot]:
    out = {}
    for inst in instances:
        mesh = model.synthesize_mesh(inst, resolution)
        kps = {name: mesh.vertices[vid] for name, vid in model.keypoint_vertices.items()}
        out[inst.scan_id] = PredictedFoot(mesh, kps)
    return out


def camera_arc(mesh: TriMesh, n_views: int, height: int = 128, width: int = 128,
               fov: float = np.deg2rad(30.0), margin: float = 1.2) -> list[Camera]:
    """Semicircular arc in the XZ plane (through the foot's long axis),
    elevation sweeping 0 -> 180 degrees, distance auto-framed."""
    lo, hi = mesh.bounds()
    center = 0.5 * (lo + hi)
    radius = np.linalg.norm(mesh.vertices - center, axis=1).max()
    dist = margin * radius / np.sin(fov / 2.0)
    cams = []
    for phi in np.linspace(0.0, np.pi, n_views):
        pos = center + dist * np.array([np.cos(phi), 0.0, np.sin(phi)])
        cams.append(Camera(pos, center, up=np.array([0.0, 1.0, 0.0]),
                           vertical_fov=fov, height=height, width=width))
    return cams


@dataclass
class EvalReport:
    rows: list[dict]

    def mean(self, key: str) -> float:
        vals = [r[key] for r in self.rows if r[key] is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def to_json(self) -> dict:
        return {"per_scan": self.rows,
                "mean": {k: self.mean(k) for k in ("chamfer_um", "keypoint_mm", "iou")
                         if any(r.get(k) is not None for r in self.rows)}}

    def to_markdown(self) -> str:
        lines = ["| scan | chamfer (um) | keypoint (mm) | IoU |",
                 "|---|---|---|---|"]
        for r in self.rows:
            iou_s = f"{r['iou']:.4f}" if r.get("iou") is not None else "-"
            lines.append(f"| {r['scan_id']} | {r['chamfer_um']:.2f} | "
                         f"{r['keypoint_mm']:.2f} | {iou_s} |")
        iou_m = f"{self.mean('iou'):.4f}" if any(
            r.get("iou") is not None for r in self.rows) else "-"
        lines.append(f"| **mean** | {self.mean('chamfer_um'):.2f} | "
                     f"{self.mean('keypoint_mm'):.2f} | {iou_m} |")
        return "\n".join(lines)


def silhouette_mask(mesh: TriMesh, camera: Camera, sigma: float = 1e-4) -> np.ndarray:
    job = RenderJob(camera, sigma=sigma, channels="silhouette")
    res = rasterize(mesh.vertices, mesh.faces, job,
                    slice_face_mask=mesh.slice_face_mask)
    return res.alpha.data


def evaluate(predictions: dict[str, PredictedFoot], dataset: DatasetBundle,
             scan_ids: list[str], chamfer_samples: int = 5000,
             n_views: int = 50, image_size: int = 128, with_iou: bool = True,
             seed: int = 0) -> EvalReport:
    """Chamfer (micrometers, mean form), keypoint distance (millimeters), and
    IoU over the camera arc. The same code path scores every model type."""
    rows = []
    for sid in scan_ids:
        scan = dataset.by_id(sid)
        pred = predictions[sid]
        # identical seeds: evaluating a mesh against itself scores exactly 0
        gt_pts = sample_surface(scan.mesh, chamfer_samples, seed=seed).points
        pr_pts = sample_surface(pred.mesh, chamfer_samples, seed=seed).points
        chamf_um = chamfer(pr_pts, gt_pts).item() * 1e6
        missing = [k for k in scan.keypoints if k not in pred.keypoints]
        if missing:
            raise ValueError(f"prediction for {sid} lacks keypoints {missing}")
        kp_mm = float(np.mean([np.linalg.norm(pred.keypoints[k] - scan.keypoints[k])
                               for k in scan.keypoints])) * 1e3
        iou_mean = None
        if with_iou:
            cams = camera_arc(scan.mesh, n_views, image_size, image_size)
            vals = []
            for cam in cams:
                gt_mask = silhouette_mask(scan.mesh, cam)
                pr_mask = silhouette_mask(pred.mesh, cam)
                vals.append(iou(pr_mask, gt_mask))
            iou_mean = float(np.mean(vals))
        rows.append({"scan_id": sid, "chamfer_um": float(chamf_um),
                     "keypoint_mm": kp_mm, "iou": iou_mean})
    return EvalReport(rows)


# ---------------------------------------------------------------------------
# PCA baseline
# ---------------------------------------------------------------------------

@dataclass
class PcaModel:
    mean_cloud: np.ndarray          # (3N,)
    components: np.ndarray          # (k, 3N) orthonormal rows
    coefficients: dict[str, np.ndarray]
    faces: np.ndarray               # connectivity of the corresponded cloud
    slice_face_mask: np.ndarray
    keypoint_vertices: dict[str, int]
    n_points: int
    correspondence: str = "template-registration-projection"

    def reconstruct(self, coeffs: np.ndarray) -> np.ndarray:
        return (self.mean_cloud + coeffs @ self.components).reshape(-1, 3)

    def project(self, cloud: np.ndarray) -> np.ndarray:
        return self.components @ (cloud.reshape(-1) - self.mean_cloud)

    def explained_variance(self) -> np.ndarray:
        coeffs = np.stack(list(self.coefficients.values()))
        var = (coeffs ** 2).mean(axis=0)
        return var / var.sum() if var.sum() > 0 else var


def _correspond_cloud(template_small: TriMesh, registration: Registration,
                      scan_mesh: TriMesh) -> np.ndarray:
    moved = registration.apply_np(template_small.vertices)
    proj, _, _ = kernels.closest_on_mesh(moved, scan_mesh.vertices, scan_mesh.faces)
    return proj


def build_pca(model_template: TriMesh, dataset: DatasetBundle, config: TrainConfig,
              k: int | None = None, n_points: int = 1600,
              keypoint_vertices: dict[str, int] | None = None) -> PcaModel:
    """Corresponded point clouds via template registration + nearest-surface
    projection, then PCA by SVD on the centered stack."""
    from .model import simplify_mesh
    train = dataset.split("train")
    if len(train) < 2:
        raise ValueError("PCA needs at least 2 training scans")
    max_k = len(train) - 1
    if k is None:
        k = min(10, max_k)
    if k > max_k:
        raise ValueError(f"k={k} too large: at most {max_k} components "
                         f"for {len(train)} scans")
    small = simplify_mesh(model_template, min(n_points, model_template.n_vertices))
    instances = build_instances(dataset, "unsupervised", train)
    train_registration(model_template, dataset, instances, config)

    # registration was run on the full template; reuse it for the small one
    clouds = {}
    for inst in instances:
        scan = dataset.by_id(inst.scan_id)
        clouds[inst.scan_id] = _correspond_cloud(small, inst.registration, scan.mesh)
    x = np.stack([clouds[s.scan_id].reshape(-1) for s in train])
    mean_cloud = x.mean(axis=0)
    centered = x - mean_cloud
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:k]
    coeffs = {sid: components @ (clouds[sid].reshape(-1) - mean_cloud)
              for sid in clouds}

    kp_vertices = {}
    for name, vid in (keypoint_vertices or {}).items():
        p = model_template.vertices[vid]
        kp_vertices[name] = int(np.argmin(np.linalg.norm(small.vertices - p, axis=1)))
    return PcaModel(mean_cloud, components, coeffs, small.faces,
                    small.slice_face_mask, kp_vertices, small.n_vertices)


def pca_fit_scans(pca: PcaModel, model_template: TriMesh, dataset: DatasetBundle,
                  scan_ids: list[str], config: TrainConfig) -> dict[str, PredictedFoot]:
    """Fit held-out scans: fresh registration, correspondence, projection."""
    from .model import simplify_mesh
    small = simplify_mesh(model_template, pca.n_points)
    scans = [dataset.by_id(sid) for sid in scan_ids]
    instances = build_instances(dataset, "unsupervised", scans)
    train_registration(model_template, dataset, instances, config)
    out = {}
    for inst in instances:
        scan = dataset.by_id(inst.scan_id)
        cloud = _correspond_cloud(small, inst.registration, scan.mesh)
        recon = pca.reconstruct(pca.project(cloud))
        mesh = TriMesh(recon, pca.faces, slice_face_mask=pca.slice_face_mask)
        kps = {name: mesh.vertices[vid] for name, vid in pca.keypoint_vertices.items()}
        out[inst.scan_id] = PredictedFoot(mesh, kps)
    return out


# ---------------------------------------------------------------------------
# image-based fitting (2D inference)
# ---------------------------------------------------------------------------

@dataclass
class GroundTruthView:
    key: str
    camera: Camera
    rgb: np.ndarray            # (H, W, 3)
    mask: np.ndarray           # (H, W) binary silhouette
    part_labels: np.ndarray | None = None
    part_valid: np.ndarray | None = None


def render_ground_truth_views(mesh: TriMesh, cameras: list[Camera],
                              sigma: float = 1e-4, prefix: str = "gt") -> list[GroundTruthView]:
    """Flat per-vertex-colour renders of a scan: the image targets for 2D fits."""
    views = []
    for i, cam in enumerate(cameras):
        job = RenderJob(cam, sigma=sigma, channels="rgb")
        res = rasterize(mesh.vertices, mesh.faces, job,
                        attributes=mesh.vertex_colors if mesh.vertex_colors is not None
                        else np.full((mesh.n_vertices, 3), 0.5),
                        slice_face_mask=mesh.slice_face_mask)
        views.append(GroundTruthView(f"{prefix}{i}", cam, res.image.data,
                                     (res.alpha.data > 0.5).astype(np.float64)))
    return views


def fit_images(model: FieldModel, views: list[GroundTruthView],
               config: FitImagesConfig,
               part_scores: np.ndarray | None = None) -> tuple[FootInstance, TrainingLog]:
    """Fit registration and shape/pose codes to images with 2D losses only
    (silhouette MSE, optionally the part-based cross entropy)."""
    if config.use_part_loss:
        if part_scores is None:
            raise ValueError("part-based fitting requires lifted per-vertex part scores")
        for v in views:
            if v.part_labels is None or v.part_valid is None:
                raise ValueError(f"view {v.key} lacks part labels/validity")

    var = model.variant(config.resolution)
    feats = Tensor(model.trunk_features(Tensor(var.vertices)).data)  # weights frozen
    inst = FootInstance("fit2d", "fit2d",
                        ad.parameter(np.zeros(100)), ad.parameter(np.zeros(100)),
                        ad.parameter(np.zeros(100)), Registration.identity())
    scores_var = None
    if config.use_part_loss:
        # carry template-resolution part scores onto the fitting resolution
        idx, _ = kernels.nearest_neighbours(var.vertices, model.template.vertices)
        scores_var = np.asarray(part_scores)[idx]

    # initial overlap check: a fit cannot start from a disjoint silhouette
    mesh0 = model.synthesize_mesh(inst, config.resolution)
    first = views[0]
    alpha0 = silhouette_mask(mesh0, first.camera, config.sigma)
    if iou(alpha0, first.mask) == 0.0:
        raise ValueError("no silhouette overlap at initialization; "
                         "check camera framing")

    reg_opt = ad.Adam(inst.registration.params(), lr=config.registration_lr)
    lat_opt = ad.Adam([inst.z_shape, inst.z_pose], lr=config.latent_lr)
    log = TrainingLog(["silhouette", "part_ce"])
    for step in range(config.steps):
        with ad.Tape() as tape:
            dx = model.displacement(feats, inst.z_shape, inst.z_pose)
            world = inst.registration.apply(ad.add(Tensor(var.vertices), dx))
            sil_total = None
            ce_total = None
            for view in views:
                job = RenderJob(view.camera, sigma=config.sigma, channels="silhouette")
                res = rasterize(world, var.faces, job,
                                slice_face_mask=var.slice_face_mask)
                term = silhouette_loss(res.alpha, view.mask)
                sil_total = term if sil_total is None else ad.add(sil_total, term)
                if config.use_part_loss:
                    jobp = RenderJob(view.camera, sigma=config.sigma,
                                     channels="attributes")
                    scores_img = render_part_probabilities(
                        world, var.faces, scores_var, jobp,
                        slice_face_mask=var.slice_face_mask)
                    ce = part_ce_loss(scores_img.image, view.part_labels,
                                      view.part_valid)
                    ce_total = ce if ce_total is None else ad.add(ce_total, ce)
            loss = ad.mul(sil_total, config.weights.silhouette / len(views))
            ce_val = 0.0
            if ce_total is not None:
                loss = ad.add(loss, ad.mul(ce_total,
                                           config.weights.part_ce / len(views)))
                ce_val = ce_total.item() / len(views)
            grads = tape.backward(loss)
        reg_opt.step({k: v for k, v in grads.items()
                      if k in {p.tid for p in reg_opt.params}})
        lat_opt.step({k: v for k, v in grads.items()
                      if k in {p.tid for p in lat_opt.params}})
        _check_finite(loss.item(), "image fitting")
        if step % config.log_every == 0 or step == config.steps - 1:
            log.add(step, {"silhouette": sil_total.item() / len(views),
                           "part_ce": ce_val}, loss.item())
    return inst, log
