"""Command-line entry point: one binary, subcommands over shared config.

Exit codes: 0 success, 1 usage error, 2 data/validation error. Every
randomness source flows from an explicit --seed, and every artifact
directory receives the fully resolved config, so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import latent as lt
from . import synthgen
from . import trainer as tr
from .extraction import extract_cloud, read_volume
from .model import ClassifierConfig, DecoderConfig, EncoderConfig, ModelConfig
from .pointcloud import ClassLabel, central_slice, parse_layers, read_onhpc, write_onhpc
from .trainer import DataError, TrainConfig

CONFIG_SCHEMA_NAME = "onhcfg/1"

DEFAULT_CONFIG = {
    "schema": CONFIG_SCHEMA_NAME,
    "tool_version": __version__,
    "synth": {"per_class": 25, "points": 4096, "noise": 5.0},
    "extract": {"layers": "rnfl,orl,sclera,lc", "points": 4096, "method": "morph"},
    "model": {
        "n_points": 4096,
        "latent_dim": 512,
        "encoder_widths": [64, 64, 128, 256],
        "feature_transform": True,
        "n_patches": 32,
        "decoder_widths": [256, 128],
        "classifier_widths": [128, 64],
    },
    "train": {
        "lr": 0.001,
        "batch": 16,
        "epochs": 1000,
        "w_rec": 1.0,
        "w_cls": 0.25,
        "ratios": [0.70, 0.15, 0.15],
        "augmentation": {"jitter_sigma": 0.005, "max_rot_deg": 10.0,
                         "max_shift": 0.05},
    },
    "latent": {"smoothing": 0.001, "steps": 20},
    "seeds": {"synth": 0, "extract": 0, "train": 0, "latent": 0},
}


def _check_keys(doc, schema, path="") -> None:
    for key, value in doc.items():
        if key not in schema:
            raise DataError(f"unknown config key {path}{key!r}")
        if isinstance(schema[key], dict) and isinstance(value, dict):
            _check_keys(value, schema[key], f"{path}{key}.")


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(config_path=None, overrides: dict | None = None) -> dict:
    doc = copy.deepcopy(DEFAULT_CONFIG)
    if config_path is not None:
        loaded = json.loads(Path(config_path).read_text(encoding="ascii"))
        if loaded.get("schema", CONFIG_SCHEMA_NAME) != CONFIG_SCHEMA_NAME:
            raise DataError(f"unsupported config schema {loaded.get('schema')!r}")
        _check_keys(loaded, DEFAULT_CONFIG)
        doc = _merge(doc, loaded)
    if overrides:
        doc = _merge(doc, overrides)
    doc["tool_version"] = __version__
    return doc


def write_resolved_config(doc: dict, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run-config.json").write_text(
        json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="ascii")


def _write_sidecar_config(doc: dict, out_file: Path) -> None:
    """Resolved-config sidecar for commands whose output is a single file."""
    (out_file.parent / f"{out_file.stem}.run-config.json").write_text(
        json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="ascii")


def model_config_from_doc(doc: dict) -> ModelConfig:
    m = doc["model"]
    n_points, n_patches = int(m["n_points"]), int(m["n_patches"])
    if n_points % n_patches:
        raise DataError(f"n_points {n_points} not divisible by n_patches {n_patches}")
    return ModelConfig(
        n_points=n_points,
        encoder=EncoderConfig(latent_dim=int(m["latent_dim"]),
                              widths=tuple(m["encoder_widths"]),
                              feature_transform=bool(m["feature_transform"])),
        decoder=DecoderConfig(n_patches=n_patches,
                              points_per_patch=n_points // n_patches,
                              widths=tuple(m["decoder_widths"])),
        classifier=ClassifierConfig(widths=tuple(m["classifier_widths"])),
    )


def train_config_from_doc(doc: dict, seed: int) -> TrainConfig:
    t = doc["train"]
    aug = t["augmentation"]
    return TrainConfig(
        model=model_config_from_doc(doc),
        w_rec=float(t["w_rec"]), w_cls=float(t["w_cls"]),
        learning_rate=float(t["lr"]), batch_size=int(t["batch"]),
        max_epochs=int(t["epochs"]),
        jitter_sigma=float(aug["jitter_sigma"]),
        max_rot_deg=float(aug["max_rot_deg"]),
        max_shift=float(aug["max_shift"]),
        seed=int(seed), ratios=tuple(t["ratios"]),
    )


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _seed_for(args, doc: dict, section: str) -> int:
    return int(doc["seeds"][section] if args.seed is None else args.seed)


# --- subcommand implementations ------------------------------------------------


def cmd_synth(args) -> int:
    doc = resolve_config(args.config)
    if args.per_class is not None:
        doc["synth"]["per_class"] = args.per_class
    if args.points is not None:
        doc["synth"]["points"] = args.points
    if args.noise is not None:
        doc["synth"]["noise"] = args.noise
    seed = _seed_for(args, doc, "synth")
    doc["seeds"]["synth"] = seed
    manifest = synthgen.generate_dataset(
        int(doc["synth"]["per_class"]), synthgen.default_priors(),
        int(doc["synth"]["points"]), float(doc["synth"]["noise"]), seed,
        args.out_dir)
    write_resolved_config(doc, args.out_dir)
    print(f"wrote {manifest}")
    return 0


def cmd_extract(args) -> int:
    doc = resolve_config(args.config)
    if args.layers is not None:
        doc["extract"]["layers"] = args.layers
    if args.points is not None:
        doc["extract"]["points"] = args.points
    if args.method is not None:
        doc["extract"]["method"] = args.method
    seed = _seed_for(args, doc, "extract")
    doc["seeds"]["extract"] = seed
    volume = read_volume(args.volume)
    cloud = extract_cloud(volume, parse_layers(doc["extract"]["layers"]),
                          int(doc["extract"]["points"]), seed,
                          method=doc["extract"]["method"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_onhpc(cloud, out)
    _write_sidecar_config(doc, out)
    print(f"wrote {out} ({len(cloud)} points)")
    return 0


def _print_metrics(metrics: tr.EvalMetrics) -> None:
    for name, auc in metrics.auc_per_class.items():
        print(f"auc[{name}] = {'n/a' if auc is None else f'{auc:.4f}'}")
    print(f"micro_auc = {metrics.micro_auc:.4f}")
    print(f"mean_chamfer = {metrics.mean_chamfer:.6f}")
    print("confusion (rows=truth, cols=predicted):")
    for row in metrics.confusion:
        print("  " + " ".join(f"{v:4d}" for v in row))


def cmd_train(args) -> int:
    doc = resolve_config(args.config)
    if args.epochs is not None:
        doc["train"]["epochs"] = args.epochs
    if args.latent_dim is not None:
        doc["model"]["latent_dim"] = args.latent_dim
    seed = _seed_for(args, doc, "train")
    doc["seeds"]["train"] = seed
    config = train_config_from_doc(doc, seed)
    rows = tr.load_manifest(args.manifest)
    ckpt = tr.train(config, rows, out_dir=args.out_dir)
    _, _, test_rows = tr.split(rows, config.ratios, config.seed)
    metrics = tr.evaluate(ckpt, test_rows)
    out_dir = Path(args.out_dir)
    (out_dir / "metrics.json").write_text(
        json.dumps(metrics.to_dict(), indent=1, sort_keys=True) + "\n",
        encoding="ascii")
    write_resolved_config(doc, out_dir)
    print(f"best epoch {ckpt.epoch} (val loss {ckpt.val_loss!r})")
    _print_metrics(metrics)
    return 0


def cmd_eval(args) -> int:
    ckpt = tr.load_checkpoint(args.checkpoint)
    rows = tr.load_manifest(args.manifest)
    if args.split == "all":
        part = rows
    else:
        train_rows, val_rows, test_rows = tr.split(
            rows, ckpt.train_config.ratios, ckpt.train_config.seed)
        part = {"train": train_rows, "val": val_rows, "test": test_rows}[args.split]
    metrics = tr.evaluate(ckpt, part)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(
            json.dumps(metrics.to_dict(), indent=1, sort_keys=True) + "\n",
            encoding="ascii")
    _print_metrics(metrics)
    return 0


def cmd_crossval(args) -> int:
    doc = resolve_config(args.config)
    seed = _seed_for(args, doc, "train")
    doc["seeds"]["train"] = seed
    config = train_config_from_doc(doc, seed)
    rows = tr.load_manifest(args.manifest)
    summary = tr.crossval(config, rows, folds=args.folds)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "crossval.json").write_text(
        json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="ascii")
    write_resolved_config(doc, out_dir)
    print(f"micro_auc = {summary['micro_auc_mean']:.4f} +- {summary['micro_auc_sd']:.4f}")
    print(f"chamfer   = {summary['chamfer_mean']:.6f} +- {summary['chamfer_sd']:.6f}")
    return 0


def cmd_ablate_layers(args) -> int:
    doc = resolve_config(args.config)
    seed = _seed_for(args, doc, "train")
    doc["seeds"]["train"] = seed
    config = train_config_from_doc(doc, seed)
    rows = tr.load_manifest(args.manifest)
    results = tr.ablate_layers(config, rows,
                               phenotypes=tr.load_phenotypes(args.manifest))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["grouping,micro_auc,mean_chamfer,reference_auc"]
    for r in results:
        ref = "" if r["reference_auc"] is None else repr(r["reference_auc"])
        lines.append(f"{r['grouping']},{r['micro_auc']!r},{r['mean_chamfer']!r},{ref}")
    (out_dir / "ablation.csv").write_text("\n".join(lines) + "\n", encoding="ascii")
    write_resolved_config(doc, out_dir)
    print("grouping       micro_auc   clinical_reference(read-only)")
    for r in results:
        ref = "-" if r["reference_auc"] is None else f"{r['reference_auc']:.2f}"
        print(f"{r['grouping']:<14} {r['micro_auc']:.4f}      {ref}")
    return 0


def cmd_latent_sweep(args) -> int:
    doc = resolve_config(args.config)
    seed = _seed_for(args, doc, "train")
    doc["seeds"]["train"] = seed
    config = train_config_from_doc(doc, seed)
    rows = tr.load_manifest(args.manifest)
    out_dir = Path(args.out_dir)
    results = tr.latent_sweep(config, rows, out_dir=out_dir)
    lines = ["k,mean_chamfer,micro_auc,reference_chamfer"]
    for r in results:
        lines.append(f"{r['k']},{r['mean_chamfer']!r},{r['micro_auc']!r},"
                     f"{r['reference_chamfer']!r}")
    (out_dir / "latent-sweep.csv").write_text("\n".join(lines) + "\n", encoding="ascii")
    write_resolved_config(doc, out_dir)
    print("k     chamfer     micro_auc   clinical_reference(read-only)")
    for r in results:
        print(f"{r['k']:<5} {r['mean_chamfer']:.6f}   {r['micro_auc']:.4f}      "
              f"{r['reference_chamfer']}")
    return 0


def _latents_for_rows(ckpt: tr.Checkpoint, rows) -> np.ndarray:
    net = ckpt.build_model()
    examples = tr.rows_to_examples(rows, ckpt.train_config.model.n_points)
    from . import diffkernel as dk
    out = np.empty((len(examples), ckpt.train_config.model.encoder.latent_dim))
    for chunk in tr._batch_iter(range(len(examples)), 32):
        xyz = np.stack([examples[i].xyz for i in chunk])
        out[list(chunk)] = net.encode_t(dk.constant(xyz)).data
    return out


def cmd_embed(args) -> int:
    ckpt = tr.load_checkpoint(args.checkpoint)
    rows = tr.load_manifest(args.manifest)
    train_rows, _, _ = tr.split(rows, ckpt.train_config.ratios,
                                ckpt.train_config.seed)
    pca = lt.pca_fit(_latents_for_rows(ckpt, train_rows))
    all_latents = _latents_for_rows(ckpt, rows)
    points = []
    for row, latv in zip(rows, all_latents):
        pd1, pd2 = lt.pca_forward(pca, latv)
        points.append(lt.EmbeddingPoint(pd1, pd2, row.class_label, row.subject_id))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lt.export_embedding(points, out)
    (out.parent / f"{out.stem}.pca.json").write_text(
        json.dumps(pca.to_dict(), sort_keys=True) + "\n", encoding="ascii")
    _write_sidecar_config(resolve_config(None), out)
    print(f"wrote {out} ({len(points)} rows)")
    return 0


def cmd_cluster(args) -> int:
    points = lt.read_embedding(args.embedding)
    coords = np.array([[p.pd1, p.pd2] for p in points])
    model = lt.kmeans_fit(coords, k=args.k, seed=args.seed or 0)
    ids = lt.assign(model.centroids, coords)
    for p, cid in zip(points, ids):
        p.cluster_id = int(cid)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lt.export_embedding(points, out)
    payload = model.to_dict()
    classes = [p.class_label for p in points]
    if all(c is not None for c in classes):
        from scipy.optimize import linear_sum_assignment
        table = np.zeros((4, args.k), dtype=np.int64)
        np.add.at(table, ([int(c) for c in classes], ids), 1)
        rows_idx, cols_idx = linear_sum_assignment(-table)
        payload["class_to_cluster"] = {
            ClassLabel(int(r)).name: int(c) for r, c in zip(rows_idx, cols_idx)}
    (out.parent / f"{out.stem}.clusters.json").write_text(
        json.dumps(payload, sort_keys=True) + "\n", encoding="ascii")
    doc = resolve_config(None)
    doc["seeds"]["latent"] = int(args.seed or 0)
    _write_sidecar_config(doc, out)
    print(f"wrote {out}")
    return 0


def cmd_morph(args) -> int:
    doc = resolve_config(args.config)
    ckpt = tr.load_checkpoint(args.checkpoint)
    pca = lt.PcaModel.from_dict(json.loads(Path(args.pca).read_text()))
    cluster_doc = json.loads(Path(args.clusters).read_text())
    centroids = np.array(cluster_doc["centroids"], dtype=np.float64)
    class_to_cluster = cluster_doc.get("class_to_cluster")

    def centroid_for(name: str) -> np.ndarray:
        if class_to_cluster is None:
            raise DataError("clusters file lacks class_to_cluster mapping")
        if name not in class_to_cluster:
            raise DataError(f"no cluster mapped to class {name!r}")
        return centroids[int(class_to_cluster[name])]

    rows = tr.load_manifest(args.manifest)
    if args.from_subject:
        match = [r for r in rows if r.subject_id == args.from_subject]
        if not match:
            raise DataError(f"subject {args.from_subject!r} not in manifest")
        lat = _latents_for_rows(ckpt, match[:1])[0]
        start = np.array(lt.pca_forward(pca, lat))
    elif args.from_centroid:
        start = centroid_for(args.from_centroid.upper())
    else:
        raise DataError("need --from-subject or --from-centroid")
    target = centroid_for(args.to_centroid.upper())

    net = ckpt.build_model()
    steps = args.steps if args.steps is not None else int(doc["latent"]["steps"])
    trajectory = lt.morph(pca, net.decode, start, target, steps=steps)
    train_rows, _, _ = tr.split(rows, ckpt.train_config.ratios,
                                ckpt.train_config.seed)
    calib = [tr.load_cloud(r) for r in train_rows]
    from .model import calibrate_patch_layers
    patch_map = calibrate_patch_layers(net, calib)
    out_dir = Path(args.out_dir)
    smoothing = (args.smoothing if args.smoothing is not None
                 else float(doc["latent"]["smoothing"]))
    # quarter-point stages; for the default 20 steps this is 0,5,10,15,20
    stages = tuple(sorted({round(steps * f) for f in (0.0, 0.25, 0.5, 0.75, 1.0)}))
    lt.render_morph(trajectory, patch_map, out_dir, stages=stages,
                    smoothing=smoothing, tol=args.slice_tol)
    traj_lines = ["stage,pd1,pd2"]
    for i, (pd1, pd2) in enumerate(trajectory.embeddings):
        traj_lines.append(f"{i},{float(pd1)!r},{float(pd2)!r}")
    (out_dir / "trajectory.csv").write_text("\n".join(traj_lines) + "\n",
                                            encoding="ascii")
    write_resolved_config(doc, out_dir)
    print(f"wrote {len(stages)} rendered stages to {out_dir}")
    return 0


def cmd_render_slice(args) -> int:
    cloud = read_onhpc(args.cloud)
    y = cloud.xyz[:, 1]
    y_center = args.y_center if args.y_center is not None else float(
        0.5 * (y.min() + y.max()))
    tol = args.tol if args.tol is not None else float(
        max((y.max() - y.min()) / 194.0, 1e-9))
    table = central_slice(cloud, y_center, tol)
    curves = lt.fit_boundary_splines(table, args.smoothing)
    if not curves:
        raise DataError("central slice produced no fittable boundary groups")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.cloud).stem
    lt.write_curves_csv(curves, out_dir / f"{stem}-slice.csv")
    lt.write_curves_svg(curves, out_dir / f"{stem}-slice.svg")
    doc = resolve_config(None)
    doc["latent"]["smoothing"] = float(args.smoothing)
    _write_sidecar_config(doc, out_dir / f"{stem}-slice.svg")
    print(f"wrote {out_dir / (stem + '-slice.svg')} ({len(curves)} curves)")
    return 0


# --- parser -------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="onhpc", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    p.add_argument("--per-class", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--points", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--config")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="extract a boundary cloud from a volume")
    p.add_argument("--volume", required=True)
    p.add_argument("--layers")
    p.add_argument("--points", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--method", choices=["morph", "canny"])
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train the ensemble network")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=["train", "val", "test", "all"],
                   default="test")
    p.add_argument("--out")
    # accepted for interface uniformity; evaluation itself is deterministic
    # from the checkpoint's embedded config
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("crossval", help="subject-disjoint cross validation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("ablate-layers", help="per-layer diagnostic ablation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_ablate_layers)

    p = sub.add_parser("latent-sweep", help="train per latent size")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_latent_sweep)

    p = sub.add_parser("embed", help="project latents to 2D")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("cluster", help="k-means on an embedding CSV")
    p.add_argument("--embedding", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("morph", help="decode a trajectory between clusters")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pca", required=True)
    p.add_argument("--clusters", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--from-subject")
    p.add_argument("--from-centroid")
    p.add_argument("--to-centroid", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--smoothing", type=float)
    p.add_argument("--slice-tol", type=float, default=0.05)
    p.add_argument("--config")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_morph)

    p = sub.add_parser("render-slice", help="spline render of a central slice")
    p.add_argument("--cloud", required=True)
    p.add_argument("--smoothing", type=float, default=0.001)
    p.add_argument("--y-center", type=float)
    p.add_argument("--tol", type=float)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_render_slice)

    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except (DataError, ValueError, OSError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


def main() -> None:
    raise SystemExit(dispatch(sys.argv[1:]))
