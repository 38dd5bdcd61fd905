"""Command-line entry point.

One binary with subcommands; every run writes a manifest (argv, seed, input
hashes, effective config) into --out-dir for provenance. Exit codes: 0 on
success, 1 on validation errors (bad inputs, missing files), 2 on numerical
failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .align import AlignmentError, align_mesh
from .losses import LossWeights
from .mesh import MeshFormatError, load_mesh, save_mesh
from .model import FieldModel, load_model, save_model
from .parts import PartClassifier, SyntheticGeometryProvider, ViewSpec, \
    build_part_pipeline, lift_parts_to_template, load_part_scores, \
    save_centroids, save_part_scores
from .render import RenderJob, rasterize, write_png
from .synth import generate_raw_scan, generate_synthetic_dataset, load_dataset, \
    save_dataset


def _hash_file(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()[:16]


def _write_manifest(out_dir: Path, args, config: dict, inputs: list[Path]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "argv": sys.argv[1:],
        "seed": getattr(args, "seed", None),
        "input_hashes": {str(p): _hash_file(p) for p in inputs if p and p.is_file()},
        "effective_config": config,
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=1,
                                                          sort_keys=True))
    (out_dir / "effective_config.json").write_text(json.dumps(config, indent=1,
                                                              sort_keys=True))


def _load_config(args) -> tuple[pl.TrainConfig, pl.FitImagesConfig]:
    """Config file values, overridden by explicit CLI flags."""
    blob: dict = {}
    if getattr(args, "config", None):
        blob = json.loads(Path(args.config).read_text())
    weights = LossWeights(**blob.get("weights", {}))
    train_kwargs = dict(blob.get("train", {}))
    train_kwargs["weights"] = weights
    if getattr(args, "seed", None) is not None:
        train_kwargs["seed"] = args.seed
    for key in ("supervision", "epochs", "registration_steps", "refine_steps",
                "chamfer_samples", "texture_samples", "train_resolution",
                "batch_size"):
        val = getattr(args, key.replace("-", "_"), None)
        if val is not None:
            train_kwargs[key] = val
    train = pl.TrainConfig(**train_kwargs)
    fit_kwargs = dict(blob.get("fit2d", {}))
    fit_kwargs["weights"] = weights
    if getattr(args, "seed", None) is not None:
        fit_kwargs["seed"] = args.seed
    for key in ("steps", "resolution"):
        val = getattr(args, f"fit_{key}", None)
        if val is not None:
            fit_kwargs[key] = val
    fit2d = pl.FitImagesConfig(**fit_kwargs)
    return train, fit2d


def _config_dict(train: pl.TrainConfig, fit2d: pl.FitImagesConfig) -> dict:
    tr = dataclasses.asdict(train)
    weights = tr.pop("weights")
    f2 = dataclasses.asdict(fit2d)
    f2.pop("weights")
    return {"train": tr, "fit2d": f2, "weights": weights}


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = Path(args.out_dir)
    if args.unaligned:
        out.mkdir(parents=True, exist_ok=True)
        (out / "scans").mkdir(exist_ok=True)
        rows = []
        for i in range(args.identities):
            tall, raw, rot, shift = generate_raw_scan(args.seed + i,
                                                      quality=args.quality)
            save_mesh(raw, out / "scans" / f"raw{i:03d}.ply")
            rows.append({"scan_id": f"raw{i:03d}", "file": f"scans/raw{i:03d}.ply"})
        (out / "meta.json").write_text(json.dumps(
            {"unaligned": True, "scans": rows}, indent=1, sort_keys=True))
    else:
        bundle = generate_synthetic_dataset(
            n_identities=args.identities, poses_per_identity=args.poses,
            seed=args.seed, n_val_identities=args.val_identities,
            quality=args.quality)
        save_dataset(bundle, out)
    train, fit2d = _load_config(args)
    _write_manifest(out, args, _config_dict(train, fit2d), [])
    print(f"dataset written to {out}")
    return 0


def cmd_align(args) -> int:
    src = Path(args.input)
    out = Path(args.out_dir)
    (out / "scans").mkdir(parents=True, exist_ok=True)
    meshes = sorted(list(src.glob("*.ply")) + list(src.glob("*.obj"))
                    + list(src.glob("scans/*.ply")) + list(src.glob("scans/*.obj")))
    if not meshes:
        print(f"error: no meshes found under {src}", file=sys.stderr)
        return 1
    transforms = {}
    for path in meshes:
        mesh = load_mesh(path)
        aligned, info = align_mesh(mesh, slice_height=args.slice_height)
        save_mesh(aligned, out / "scans" / path.name)
        transforms[path.stem] = {
            "rotation": info["rotation"].tolist(),
            "translation": info["translation"].tolist(),
            "heel_z": info["heel_z"], "z_cut": info["z_cut"],
        }
        print(f"aligned {path.name}: heel z {info['heel_z']:.4f}, "
              f"cut {info['z_cut']:.4f}")
    (out / "alignment.json").write_text(json.dumps(transforms, indent=1,
                                                   sort_keys=True))
    train, fit2d = _load_config(args)
    _write_manifest(out, args, _config_dict(train, fit2d), meshes)
    return 0


def cmd_train(args) -> int:
    train_cfg, fit2d = _load_config(args)
    dataset = load_dataset(args.data)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = FieldModel(dataset.template, seed=train_cfg.seed,
                       keypoint_vertices=dataset.template_keypoint_vertices)
    instances = pl.build_instances(dataset, train_cfg.supervision)
    reg_log = pl.train_registration(dataset.template, dataset, instances, train_cfg)
    reg_log.write_csv(out / "registration_log.csv")
    net_log = pl.train_network(model, dataset, instances, train_cfg)
    net_log.write_csv(out / "training_log.csv")
    save_model(out / "model.ckpt", model, instances)
    _write_manifest(out, args, _config_dict(train_cfg, fit2d),
                    [Path(args.data) / "meta.json"])
    print(f"trained model saved to {out / 'model.ckpt'}; final chamfer "
          f"{net_log.last('chamfer'):.6f}")
    return 0


def cmd_refine(args) -> int:
    train_cfg, fit2d = _load_config(args)
    dataset = load_dataset(args.data)
    model, instances = load_model(args.model)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log = pl.refine_latents(model, dataset, instances, train_cfg)
    log.write_csv(out / "refine_log.csv")
    save_model(out / "model.ckpt", model, instances)
    _write_manifest(out, args, _config_dict(train_cfg, fit2d),
                    [Path(args.data) / "meta.json", Path(args.model)])
    print(f"refined checkpoint saved; final chamfer {log.last('chamfer'):.6f}")
    return 0


def _select_scan_ids(args, dataset) -> list[str]:
    if getattr(args, "scans", None):
        return args.scans.split(",")
    split = getattr(args, "split", None) or "val"
    return [s.scan_id for s in dataset.split(split)]


def cmd_fit3d(args) -> int:
    train_cfg, fit2d = _load_config(args)
    dataset = load_dataset(args.data)
    model, _ = load_model(args.model)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scan_ids = _select_scan_ids(args, dataset)
    instances, reg_log, ref_log = pl.fit_scans_3d(model, dataset, scan_ids, train_cfg)
    ref_log.write_csv(out / "fit3d_log.csv")
    preds = pl.predict_meshes(model, instances)
    for sid, pred in preds.items():
        save_mesh(pred.mesh, out / f"{sid}_fit.ply")
    report = pl.evaluate(preds, dataset, scan_ids, with_iou=args.iou,
                         n_views=args.views, image_size=args.image_size)
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=1,
                                                sort_keys=True))
    (out / "report.md").write_text(report.to_markdown())
    print(report.to_markdown())
    _write_manifest(out, args, _config_dict(train_cfg, fit2d),
                    [Path(args.data) / "meta.json", Path(args.model)])
    return 0


def cmd_pca(args) -> int:
    train_cfg, fit2d = _load_config(args)
    dataset = load_dataset(args.data)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pca = pl.build_pca(dataset.template, dataset, train_cfg, k=args.components,
                       n_points=args.points,
                       keypoint_vertices=dataset.template_keypoint_vertices)
    from .checkpoint import save_checkpoint
    save_checkpoint(out / "pca.ckpt",
                    {"mean": pca.mean_cloud, "components": pca.components,
                     "faces": pca.faces.astype(np.int64),
                     "mask": pca.slice_face_mask.astype(np.int64)},
                    extra={"n_points": pca.n_points,
                           "keypoint_vertices": pca.keypoint_vertices,
                           "correspondence": pca.correspondence})
    val_ids = [s.scan_id for s in dataset.split("val")]
    preds = pl.pca_fit_scans(pca, dataset.template, dataset, val_ids, train_cfg)
    report = pl.evaluate(preds, dataset, val_ids, with_iou=args.iou,
                         n_views=args.views, image_size=args.image_size)
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=1,
                                                sort_keys=True))
    (out / "report.md").write_text(report.to_markdown())
    print(report.to_markdown())
    _write_manifest(out, args, _config_dict(train_cfg, fit2d),
                    [Path(args.data) / "meta.json"])
    return 0


def cmd_eval(args) -> int:
    train_cfg, fit2d = _load_config(args)
    dataset = load_dataset(args.data)
    model, instances = load_model(args.model)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    have = {inst.scan_id for inst in instances}
    scan_ids = [sid for sid in _select_scan_ids(args, dataset) if sid in have]
    if not scan_ids:
        print("error: checkpoint has no fitted instances for the requested scans; "
              "run fit3d first", file=sys.stderr)
        return 1
    sub = pl.InstanceSet(instances.share_identity_codes)
    sub.instances = [instances.by_scan(sid) for sid in scan_ids]
    preds = pl.predict_meshes(model, sub)
    report = pl.evaluate(preds, dataset, scan_ids, with_iou=args.iou,
                         n_views=args.views, image_size=args.image_size)
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=1,
                                                sort_keys=True))
    (out / "report.md").write_text(report.to_markdown())
    print(report.to_markdown())
    _write_manifest(out, args, _config_dict(train_cfg, fit2d),
                    [Path(args.data) / "meta.json", Path(args.model)])
    return 0


def cmd_render(args) -> int:
    train_cfg, fit2d = _load_config(args)
    model, instances = load_model(args.model)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    inst = instances.by_scan(args.scan)
    mesh = model.synthesize_mesh(inst, args.resolution)
    from .render import auto_frame_camera
    ang = np.deg2rad(args.angle)
    cam = auto_frame_camera(mesh.vertices,
                            np.array([np.cos(ang), 0.4, np.sin(ang) + 0.3]),
                            height=args.image_size, width=args.image_size)
    job = RenderJob(cam, channels="rgb" if args.channels == "rgb" else "silhouette")
    attrs = mesh.vertex_colors if job.channels == "rgb" else None
    res = rasterize(mesh.vertices, mesh.faces, job, attributes=attrs,
                    slice_face_mask=mesh.slice_face_mask)
    img = res.image.data if job.channels == "rgb" else res.alpha.data
    path = out / f"{args.scan}_{args.channels}.png"
    write_png(path, img)
    print(f"wrote {path}")
    _write_manifest(out, args, _config_dict(train_cfg, fit2d), [Path(args.model)])
    return 0


def cmd_parts(args) -> int:
    train_cfg, fit2d = _load_config(args)
    dataset = load_dataset(args.data)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    template = dataset.template
    views = []
    for i, phi in enumerate(np.linspace(0.15, np.pi - 0.15, args.views)):
        from .render import auto_frame_camera
        d = np.array([np.cos(phi), 0.35, np.sin(phi) + 0.25])
        cam = auto_frame_camera(template.vertices, d, height=args.image_size,
                                width=args.image_size)
        views.append(ViewSpec(f"tpl{i}", template, cam))
    provider = SyntheticGeometryProvider(views)
    classifier, centroids = build_part_pipeline(provider, [v.key for v in views],
                                                n_classes=args.classes,
                                                seed=train_cfg.seed)
    scores, covered = lift_parts_to_template(template, classifier, provider,
                                             views, steps=args.steps,
                                             seed=train_cfg.seed)
    classifier.save(out / "classifier.json")
    save_centroids(out / "centroids.json", centroids)
    save_part_scores(out / "template.parts.npyraw", scores)
    (out / "coverage.json").write_text(json.dumps(
        {"covered_vertices": int(covered.sum()),
         "total_vertices": int(len(covered))}))
    print(f"parts pipeline saved to {out} "
          f"({covered.sum()}/{len(covered)} vertices covered)")
    _write_manifest(out, args, _config_dict(train_cfg, fit2d),
                    [Path(args.data) / "meta.json"])
    return 0


def cmd_fit2d(args) -> int:
    train_cfg, fit2d_cfg = _load_config(args)
    fit2d_cfg.use_part_loss = args.loss == "sil+ce"
    dataset = load_dataset(args.data)
    model, _ = load_model(args.model)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scan = dataset.by_id(args.scan)
    cams = pl.camera_arc(scan.mesh, args.views + 2,
                         height=args.image_size, width=args.image_size)[1:-1]
    gt_views = pl.render_ground_truth_views(scan.mesh, cams, sigma=fit2d_cfg.sigma)

    part_scores = None
    if fit2d_cfg.use_part_loss:
        if not args.parts:
            print("error: --loss sil+ce requires --parts <dir from the parts "
                  "subcommand>", file=sys.stderr)
            return 1
        part_scores = load_part_scores(Path(args.parts) / "template.parts.npyraw")
        classifier = PartClassifier.load(Path(args.parts) / "classifier.json")
        provider = SyntheticGeometryProvider(
            [ViewSpec(v.key, scan.mesh, v.camera) for v in gt_views])
        for v in gt_views:
            fm = provider.feature_map(v.key)
            labels = classifier.predict(fm.reshape(-1, fm.shape[2]))
            v.part_labels = labels.reshape(v.mask.shape)
            v.part_valid = v.mask > 0.5

    inst, log = pl.fit_images(model, gt_views, fit2d_cfg, part_scores)
    pred_mesh = model.synthesize_mesh(inst, "template")
    save_mesh(pred_mesh, out / f"{args.scan}_fit2d.ply")
    kps = {name: pred_mesh.vertices[vid]
           for name, vid in model.keypoint_vertices.items()}
    preds = {args.scan: pl.PredictedFoot(pred_mesh, kps)}
    report = pl.evaluate(preds, dataset, [args.scan], with_iou=args.iou,
                         n_views=args.arc_views, image_size=args.image_size)
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=1,
                                                sort_keys=True))
    print(report.to_markdown())
    log.write_csv(out / "fit2d_log.csv")
    _write_manifest(out, args, _config_dict(train_cfg, fit2d_cfg),
                    [Path(args.data) / "meta.json", Path(args.model)])
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="footfield",
        description="Implicit deformation-field foot model: data generation, "
                    "training, fitting, and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out-dir", required=True)
        p.add_argument("--config", default=None,
                       help="JSON file overriding TrainConfig/LossWeights")
        p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--identities", type=int, default=10)
    p.add_argument("--poses", type=int, default=3)
    p.add_argument("--val-identities", type=int, default=4)
    p.add_argument("--quality", type=float, default=1.0)
    p.add_argument("--unaligned", action="store_true",
                   help="emit rigidly perturbed raw scans instead")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("align", help="align and slice raw scans")
    common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--slice-height", type=float, default=0.10)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("train", help="stage 1 + 2 training")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--supervision",
                   choices=["unsupervised", "identity", "identity+pose"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--registration-steps", type=int)
    p.add_argument("--chamfer-samples", type=int)
    p.add_argument("--texture-samples", type=int)
    p.add_argument("--train-resolution")
    p.add_argument("--batch-size", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("refine", help="stage 3 latent refinement")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--refine-steps", type=int)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("fit3d", help="fit unseen scans in 3D")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--scans", help="comma-separated scan ids (default: val split)")
    p.add_argument("--split", default="val")
    p.add_argument("--iou", action="store_true")
    p.add_argument("--views", type=int, default=50)
    p.add_argument("--image-size", type=int, default=128)
    p.set_defaults(func=cmd_fit3d)

    p = sub.add_parser("fit2d", help="fit a scan from rendered images (2D losses)")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--scan", required=True)
    p.add_argument("--views", type=int, default=5)
    p.add_argument("--loss", choices=["sil", "sil+ce"], default="sil")
    p.add_argument("--parts", help="directory produced by the parts subcommand")
    p.add_argument("--fit-steps", type=int, dest="fit_steps")
    p.add_argument("--fit-resolution", dest="fit_resolution")
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--iou", action="store_true")
    p.add_argument("--arc-views", type=int, default=50)
    p.set_defaults(func=cmd_fit2d)

    p = sub.add_parser("pca", help="build and evaluate the PCA baseline")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--components", type=int, default=None)
    p.add_argument("--points", type=int, default=1600)
    p.add_argument("--iou", action="store_true")
    p.add_argument("--views", type=int, default=50)
    p.add_argument("--image-size", type=int, default=128)
    p.set_defaults(func=cmd_pca)

    p = sub.add_parser("eval", help="evaluate a checkpoint's fitted instances")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--scans")
    p.add_argument("--split", default="val")
    p.add_argument("--iou", action="store_true")
    p.add_argument("--views", type=int, default=50)
    p.add_argument("--image-size", type=int, default=128)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="render a fitted instance to PNG")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--scan", required=True)
    p.add_argument("--channels", choices=["rgb", "silhouette"], default="rgb")
    p.add_argument("--angle", type=float, default=45.0)
    p.add_argument("--resolution", default="template")
    p.add_argument("--image-size", type=int, default=256)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("parts", help="cluster features, train the classifier, "
                                     "lift part scores onto the template")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--classes", type=int, default=20)
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--image-size", type=int, default=64)
    p.set_defaults(func=cmd_parts)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (MeshFormatError, AlignmentError, FileNotFoundError, KeyError,
            ValueError, pl.StageOrderError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except pl.NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
