"""Dataset handling, the training loop, checkpoints, metrics and sweeps.

Splits are subject-disjoint and class-stratified. Training minimizes
w_rec * chamfer + w_cls * cross-entropy with ADAM and keeps the epoch with
the lowest validation loss. Checkpoints store parameters as f32 (the
published format), so a trained checkpoint's metrics are computed from the
quantized parameters and reproduce exactly after save/load.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import diffkernel as dk
from . import model as md
from . import synthgen
from .pointcloud import ClassLabel, LayerLabel, PointCloud, augment, read_onhpc
from .synthgen import derive_seed

# Published micro-AUC per layer grouping (5-fold CV, clinical cohort); shown
# next to synthetic results for orientation only, never asserted against.
CLINICAL_REFERENCE_AUC = {
    "all": 0.92, "rnfl": 0.89, "gcl_ipl_orl": 0.87, "choroid": 0.78,
    "sclera_lc": 0.85,
}
CLINICAL_REFERENCE_CHAMFER = {128: 0.024, 256: 0.019, 512: 0.013, 1024: 0.014}

DEFAULT_ABLATION_GROUPINGS = (
    ("all", None),
    ("rnfl", frozenset({LayerLabel.RNFL})),
    ("gcl_ipl_orl", frozenset({LayerLabel.GCL_IPL, LayerLabel.ORL})),
    ("choroid", frozenset({LayerLabel.CHOROID})),
    ("sclera_lc", frozenset({LayerLabel.SCLERA, LayerLabel.LC})),
)


class DataError(ValueError):
    """Manifest or dataset contents violate a contract."""


@dataclass(frozen=True)
class ManifestRow:
    path: Path
    subject_id: str
    class_label: ClassLabel
    cohort: str


def load_manifest(path) -> list[ManifestRow]:
    path = Path(path)
    lines = path.read_text(encoding="ascii").splitlines()
    if not lines or lines[0] != "path,subject_id,class,cohort":
        raise DataError(f"{path}: expected header 'path,subject_id,class,cohort'")
    rows = []
    for ln, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 4:
            raise DataError(f"{path}:{ln}: expected 4 columns")
        rel, subject, cls, cohort = parts
        if not subject:
            raise DataError(f"{path}:{ln}: empty subject_id")
        cloud_path = (path.parent / rel).resolve()
        if not cloud_path.exists():
            raise DataError(f"{path}:{ln}: missing cloud file {cloud_path}")
        rows.append(ManifestRow(cloud_path, subject, ClassLabel(int(cls)), cohort))
    if not rows:
        raise DataError(f"{path}: empty manifest")
    return rows


def load_cloud(row: ManifestRow) -> PointCloud:
    cloud = read_onhpc(row.path)
    if cloud.class_label is not None and cloud.class_label != row.class_label:
        raise DataError(f"{row.path}: class {cloud.class_label.name} disagrees "
                        f"with manifest {row.class_label.name}")
    return replace(cloud, class_label=row.class_label, subject_id=row.subject_id)


@dataclass(frozen=True)
class TrainConfig:
    model: md.ModelConfig = field(default_factory=md.ModelConfig)
    w_rec: float = 1.0
    w_cls: float = 0.25
    learning_rate: float = 0.001
    batch_size: int = 16
    max_epochs: int = 1000
    jitter_sigma: float = 0.005
    max_rot_deg: float = 10.0
    max_shift: float = 0.05
    seed: int = 0
    ratios: tuple = (0.70, 0.15, 0.15)

    def __post_init__(self):
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError(f"split ratios must sum to 1, got {self.ratios}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if self.w_rec < 0 or self.w_cls < 0 or (self.w_rec == 0 and self.w_cls == 0):
            raise ValueError("loss weights must be >= 0 and not both zero")

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "w_rec": self.w_rec, "w_cls": self.w_cls,
            "learning_rate": self.learning_rate, "batch_size": self.batch_size,
            "max_epochs": self.max_epochs, "jitter_sigma": self.jitter_sigma,
            "max_rot_deg": self.max_rot_deg, "max_shift": self.max_shift,
            "seed": self.seed, "ratios": list(self.ratios),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = md.ModelConfig.from_dict(d["model"])
        d["ratios"] = tuple(d["ratios"])
        return cls(**d)


# --- splitting and balancing ---------------------------------------------------

def _subjects_by_class(rows) -> dict[ClassLabel, list[str]]:
    by_class: dict[ClassLabel, dict[str, None]] = {}
    subject_class: dict[str, ClassLabel] = {}
    for row in rows:
        if row.subject_id in subject_class:
            if subject_class[row.subject_id] != row.class_label:
                raise DataError(f"subject {row.subject_id} appears with two classes")
            continue
        subject_class[row.subject_id] = row.class_label
        by_class.setdefault(row.class_label, {})[row.subject_id] = None
    return {c: list(subs.keys()) for c, subs in by_class.items()}


def _allocate(count: int, ratios) -> list[int]:
    """Largest-remainder allocation of `count` items to len(ratios) buckets."""
    raw = [count * r for r in ratios]
    floors = [int(np.floor(v)) for v in raw]
    rem = count - sum(floors)
    order = sorted(range(len(ratios)), key=lambda i: (-(raw[i] - floors[i]), i))
    for i in order[:rem]:
        floors[i] += 1
    return floors


def split(rows, ratios=(0.70, 0.15, 0.15), seed: int = 0):
    """Subject-disjoint stratified (train, val, test) row lists."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {ratios}")
    by_class = _subjects_by_class(rows)
    for cls, subjects in sorted(by_class.items()):
        if len(subjects) < 3:
            raise DataError(f"class {cls.name} has only {len(subjects)} subjects; "
                            "need >= 3 to stratify")
    rng = np.random.default_rng(int(seed))
    assignment: dict[str, int] = {}
    for cls in sorted(by_class):
        subjects = sorted(by_class[cls])
        perm = rng.permutation(len(subjects))
        counts = _allocate(len(subjects), ratios)
        cursor = 0
        for bucket, cnt in enumerate(counts):
            for i in perm[cursor:cursor + cnt]:
                assignment[subjects[i]] = bucket
            cursor += cnt
    parts: tuple[list, list, list] = ([], [], [])
    for row in rows:
        parts[assignment[row.subject_id]].append(row)
    return parts


def balance(train_rows) -> list:
    """Oversample so every (class, cohort) cell reaches the max cell count.

    The original list is preserved; repeats are appended per cell in sorted
    cell order, cycling the cell's rows.
    """
    if not train_rows:
        raise DataError("cannot balance an empty training set")
    cells: dict[tuple, list] = {}
    for row in train_rows:
        cells.setdefault((int(row.class_label), row.cohort), []).append(row)
    target = max(len(v) for v in cells.values())
    out = list(train_rows)
    for key in sorted(cells):
        members = cells[key]
        for i in range(target - len(members)):
            out.append(members[i % len(members)])
    return out


# --- checkpoints -------------------------------------------------------------------

_CKPT_MAGIC = b"ONHCKPT1"


@dataclass
class Checkpoint:
    train_config: TrainConfig
    epoch: int
    val_loss: float
    params: dict[str, np.ndarray]   # f32, registration order
    format_version: int = 1

    def build_model(self) -> md.EnsembleModel:
        store = dk.ParamStore(self.train_config.seed)
        for name, values in self.params.items():
            store.register(name, values.astype(np.float64))
        return md.EnsembleModel(self.train_config.model, params=store)


def quantized_checkpoint(config: TrainConfig, params: dict[str, np.ndarray],
                         epoch: int, val_loss: float) -> Checkpoint:
    return Checkpoint(config, epoch, float(val_loss),
                      {n: v.astype(np.float32) for n, v in params.items()})


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    meta = json.dumps({
        "format_version": ckpt.format_version,
        "train_config": ckpt.train_config.to_dict(),
        "epoch": ckpt.epoch,
        "val_loss": ckpt.val_loss,
    }, sort_keys=True).encode("ascii")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)
        f.write(struct.pack("<I", len(ckpt.params)))
        for name, values in ckpt.params.items():
            encoded = name.encode("ascii")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", values.ndim))
            f.write(struct.pack(f"<{values.ndim}I", *values.shape))
            f.write(values.astype("<f4").tobytes(order="C"))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        if f.read(8) != _CKPT_MAGIC:
            raise DataError(f"{path}: not a checkpoint file")
        meta = json.loads(f.read(struct.unpack("<I", f.read(4))[0]))
        n_params = struct.unpack("<I", f.read(4))[0]
        params = {}
        for _ in range(n_params):
            name_len = struct.unpack("<H", f.read(2))[0]
            name = f.read(name_len).decode("ascii")
            ndim = struct.unpack("<B", f.read(1))[0]
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            count = int(np.prod(shape)) if shape else 1
            values = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(shape)
            params[name] = values.copy()
    return Checkpoint(TrainConfig.from_dict(meta["train_config"]),
                      int(meta["epoch"]), float(meta["val_loss"]), params,
                      format_version=int(meta["format_version"]))


# --- examples (in-memory dataset) -----------------------------------------------------


@dataclass
class Example:
    xyz: np.ndarray
    class_code: int
    subject_id: str


def rows_to_examples(rows, n_points: int) -> list[Example]:
    out = []
    for row in rows:
        cloud = load_cloud(row)
        if len(cloud) != n_points:
            raise DataError(f"{row.path}: cloud has {len(cloud)} points, "
                            f"model expects {n_points}")
        out.append(Example(cloud.xyz, int(row.class_label), row.subject_id))
    return out


def _batch_iter(indices, batch_size):
    for start in range(0, len(indices), batch_size):
        yield indices[start:start + batch_size]


def _eval_losses(net: md.EnsembleModel, examples, w_rec, w_cls, batch_size):
    """(total, chamfer, ce) means over a set, without augmentation."""
    total_cd, total_ce = 0.0, 0.0
    for chunk in _batch_iter(range(len(examples)), batch_size):
        xyz = np.stack([examples[i].xyz for i in chunk])
        truth = np.array([examples[i].class_code for i in chunk])
        lat = net.encode_t(dk.constant(xyz))
        recon = net.decode_t(lat)
        probs = net.classify_t(lat)
        cd = float(md.chamfer_batch(recon, xyz).data)
        ce = float(md.cross_entropy_batch(probs, truth).data)
        total_cd += cd * len(chunk)
        total_ce += ce * len(chunk)
    n = len(examples)
    mean_cd, mean_ce = total_cd / n, total_ce / n
    return w_rec * mean_cd + w_cls * mean_ce, mean_cd, mean_ce


def train_on_examples(config: TrainConfig, train_examples, val_examples,
                      log_rows: list | None = None) -> Checkpoint:
    """Core loop over in-memory examples; returns the best-epoch checkpoint."""
    if not train_examples or not val_examples:
        raise DataError("training and validation sets must be nonempty")
    net = md.EnsembleModel(config.model, seed=config.seed)
    state = dk.adam_init(net.params, lr=config.learning_rate)
    n_train = len(train_examples)

    def snapshot():
        return {n: t.data.copy() for n, t in net.params.items()}

    train_loss0, _, _ = _eval_losses(net, train_examples, config.w_rec,
                                     config.w_cls, config.batch_size)
    val_loss, val_cd, val_ce = _eval_losses(net, val_examples, config.w_rec,
                                            config.w_cls, config.batch_size)
    if log_rows is not None:
        log_rows.append((0, train_loss0, val_loss, val_cd, val_ce))
    best = (val_loss, 0, snapshot())

    for epoch in range(1, config.max_epochs + 1):
        order = np.random.default_rng(
            derive_seed(config.seed, 1, epoch)).permutation(n_train)
        epoch_loss = 0.0
        for batch_no, chunk in enumerate(_batch_iter(order, config.batch_size)):
            xyz_list = []
            for i in chunk:
                ex = train_examples[i]
                cloud = PointCloud(ex.xyz, np.zeros(len(ex.xyz), dtype=np.uint8))
                aug = augment(cloud, derive_seed(config.seed, 2, epoch, int(i)),
                              jitter_sigma=config.jitter_sigma,
                              max_rot_deg=config.max_rot_deg,
                              max_shift=config.max_shift)
                xyz_list.append(aug.xyz)
            xyz = np.stack(xyz_list)
            truth = np.array([train_examples[i].class_code for i in chunk])
            try:
                lat = net.encode_t(dk.constant(xyz))
                recon = net.decode_t(lat)
                probs = net.classify_t(lat)
                loss = dk.add(dk.scale(md.chamfer_batch(recon, xyz), config.w_rec),
                              dk.scale(md.cross_entropy_batch(probs, truth), config.w_cls))
                net.params.zero_grad()
                dk.backward(loss)
                dk.adam_step(net.params, net.params.gradients(), state)
            except dk.NonFiniteError as err:
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch}, batch {batch_no}") from err
            epoch_loss += float(loss.data) * len(chunk)
        epoch_loss /= n_train
        val_loss, val_cd, val_ce = _eval_losses(net, val_examples, config.w_rec,
                                                config.w_cls, config.batch_size)
        if log_rows is not None:
            log_rows.append((epoch, epoch_loss, val_loss, val_cd, val_ce))
        if val_loss < best[0]:
            best = (val_loss, epoch, snapshot())

    return quantized_checkpoint(config, best[2], best[1], best[0])


def write_log(log_rows, path) -> None:
    lines = ["epoch,train_loss,val_loss,val_chamfer,val_ce"]
    for epoch, tr, vl, cd, ce in log_rows:
        lines.append(f"{epoch},{float(tr)!r},{float(vl)!r},{float(cd)!r},{float(ce)!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def train(config: TrainConfig, manifest_rows, out_dir=None) -> Checkpoint:
    """Split, balance, train; persists the log and checkpoint when out_dir set."""
    train_rows, val_rows, _ = split(manifest_rows, config.ratios, config.seed)
    train_rows = balance(train_rows)
    n_points = config.model.n_points
    log_rows: list = []
    ckpt = train_on_examples(config, rows_to_examples(train_rows, n_points),
                             rows_to_examples(val_rows, n_points), log_rows)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_log(log_rows, out_dir / "train-log.csv")
        save_checkpoint(ckpt, out_dir / "checkpoint.ckpt")
    return ckpt


# --- metrics ----------------------------------------------------------------------------

def binary_auc(labels, scores) -> float | None:
    """Rank-based AUC; tied scores contribute one half (trapezoidal rule)."""
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores, method="average")
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class EvalMetrics:
    auc_per_class: dict[str, float | None]
    micro_auc: float
    confusion: np.ndarray           # (4, 4), rows = truth, cols = argmax
    mean_chamfer: float

    def to_dict(self) -> dict:
        return {
            "auc_per_class": self.auc_per_class,
            "micro_auc": self.micro_auc,
            "confusion": self.confusion.tolist(),
            "mean_chamfer": self.mean_chamfer,
        }


def evaluate_examples(checkpoint: Checkpoint, examples,
                      batch_size: int = 32) -> EvalMetrics:
    if not examples:
        raise DataError("evaluation set is empty")
    net = checkpoint.build_model()
    probs = np.empty((len(examples), 4))
    chamfers = np.empty(len(examples))
    truth = np.array([ex.class_code for ex in examples])
    for chunk in _batch_iter(range(len(examples)), batch_size):
        xyz = np.stack([examples[i].xyz for i in chunk])
        lat = net.encode_t(dk.constant(xyz))
        recon = net.decode_t(lat).data
        probs[list(chunk)] = net.classify_t(lat).data
        for j, i in enumerate(chunk):
            chamfers[i] = md.chamfer(recon[j], examples[i].xyz)
    auc_per_class = {}
    pooled_labels, pooled_scores = [], []
    for cls in ClassLabel:
        labels = truth == int(cls)
        scores = probs[:, int(cls)]
        auc_per_class[cls.name] = binary_auc(labels, scores)
        pooled_labels.append(labels)
        pooled_scores.append(scores)
    micro = binary_auc(np.concatenate(pooled_labels), np.concatenate(pooled_scores))
    confusion = np.zeros((4, 4), dtype=np.int64)
    np.add.at(confusion, (truth, probs.argmax(axis=1)), 1)
    return EvalMetrics(auc_per_class, float(micro), confusion,
                       float(chamfers.mean()))


def evaluate(checkpoint: Checkpoint, rows, batch_size: int = 32) -> EvalMetrics:
    examples = rows_to_examples(rows, checkpoint.train_config.model.n_points)
    return evaluate_examples(checkpoint, examples, batch_size)


# --- cross validation ----------------------------------------------------------------------

def make_folds(rows, folds: int, seed: int) -> list[list]:
    """Subject-disjoint stratified folds (round-robin after a seeded shuffle)."""
    by_class = _subjects_by_class(rows)
    for cls, subjects in sorted(by_class.items()):
        if len(subjects) < folds:
            raise DataError(f"class {cls.name} has {len(subjects)} subjects; "
                            f"need >= {folds} for {folds}-fold CV")
    rng = np.random.default_rng(int(seed))
    fold_of: dict[str, int] = {}
    for cls in sorted(by_class):
        subjects = sorted(by_class[cls])
        perm = rng.permutation(len(subjects))
        for pos, i in enumerate(perm):
            fold_of[subjects[i]] = pos % folds
    out: list[list] = [[] for _ in range(folds)]
    for row in rows:
        out[fold_of[row.subject_id]].append(row)
    return out


def crossval(config: TrainConfig, manifest_rows, folds: int = 5) -> dict:
    """Mean +- sd of the evaluation metrics over subject-disjoint folds."""
    fold_rows = make_folds(manifest_rows, folds, config.seed)
    n_points = config.model.n_points
    r_train, r_val = config.ratios[0], config.ratios[1]
    val_share = r_val / (r_train + r_val)
    per_fold = []
    for f in range(folds):
        test_rows = fold_rows[f]
        pool = [row for g, rows in enumerate(fold_rows) if g != f for row in rows]
        tr_rows, va_rows = _split_two_way(pool, 1.0 - val_share,
                                          derive_seed(config.seed, 3, f))
        tr_rows = balance(tr_rows)
        fold_config = replace(config, seed=derive_seed(config.seed, 4, f) % (1 << 31))
        ckpt = train_on_examples(fold_config, rows_to_examples(tr_rows, n_points),
                                 rows_to_examples(va_rows, n_points))
        per_fold.append(evaluate(ckpt, test_rows))
    summary: dict = {"folds": folds, "per_fold": [m.to_dict() for m in per_fold]}
    micro = np.array([m.micro_auc for m in per_fold])
    cham = np.array([m.mean_chamfer for m in per_fold])
    summary["micro_auc_mean"] = float(micro.mean())
    summary["micro_auc_sd"] = float(micro.std(ddof=1)) if folds > 1 else 0.0
    summary["chamfer_mean"] = float(cham.mean())
    summary["chamfer_sd"] = float(cham.std(ddof=1)) if folds > 1 else 0.0
    for cls in ClassLabel:
        vals = [m.auc_per_class[cls.name] for m in per_fold
                if m.auc_per_class[cls.name] is not None]
        if vals:
            arr = np.array(vals)
            summary[f"auc_{cls.name}_mean"] = float(arr.mean())
            summary[f"auc_{cls.name}_sd"] = float(arr.std(ddof=1)) if len(vals) > 1 else 0.0
    return summary


def _split_two_way(rows, first_ratio: float, seed: int):
    by_class = _subjects_by_class(rows)
    rng = np.random.default_rng(int(seed))
    assignment: dict[str, int] = {}
    for cls in sorted(by_class):
        subjects = sorted(by_class[cls])
        perm = rng.permutation(len(subjects))
        counts = _allocate(len(subjects), (first_ratio, 1.0 - first_ratio))
        if counts[1] == 0 and len(subjects) >= 2:
            counts = [counts[0] - 1, 1]  # keep validation nonempty per class
        cursor = 0
        for bucket, cnt in enumerate(counts):
            for i in perm[cursor:cursor + cnt]:
                assignment[subjects[i]] = bucket
            cursor += cnt
    first = [r for r in rows if assignment[r.subject_id] == 0]
    second = [r for r in rows if assignment[r.subject_id] == 1]
    return first, second


# --- layer ablation ---------------------------------------------------------------------------

def _resample_to(xyz: np.ndarray, layers: np.ndarray, keep: frozenset,
                 n_points: int, seed: int) -> np.ndarray:
    mask = np.isin(layers, [int(l) for l in keep])
    sub = xyz[mask]
    if sub.shape[0] == 0:
        raise DataError("layer grouping leaves no points")
    if sub.shape[0] >= n_points:
        from .pointcloud import fps_indices
        return sub[fps_indices(sub, n_points, seed)]
    reps = np.arange(n_points) % sub.shape[0]   # pad by cycling (resampling)
    return sub[reps]


def _grouping_examples(rows, grouping: frozenset | None, n_points: int,
                       seed: int, phenotypes: dict | None) -> list[Example]:
    if grouping is None:
        return rows_to_examples(rows, n_points)
    out = []
    for row in rows:
        if phenotypes is not None and row.subject_id in phenotypes:
            cloud = synthgen.regenerate_for_layers(
                phenotypes[row.subject_id], grouping, subject_id=row.subject_id)
            out.append(Example(cloud.xyz, int(row.class_label), row.subject_id))
        else:
            cloud = load_cloud(row)
            xyz = _resample_to(cloud.xyz, cloud.layers, grouping, n_points,
                               derive_seed(seed, 5, zlib.crc32(row.subject_id.encode())))
            out.append(Example(xyz, int(row.class_label), row.subject_id))
    return out


def load_phenotypes(manifest_path) -> dict | None:
    sidecar = Path(manifest_path).parent / "phenotypes.json"
    if sidecar.exists():
        return json.loads(sidecar.read_text(encoding="ascii"))
    return None


def ablate_layers(config: TrainConfig, manifest_rows, groupings=None,
                  phenotypes: dict | None = None) -> list[dict]:
    """Train and evaluate once per layer grouping; one result row each.

    Synthetic datasets regenerate layer-filtered clouds from the phenotype
    sidecar; otherwise clouds are filtered and resampled back to the model
    point count. The subject split is shared across groupings.
    """
    groupings = list(DEFAULT_ABLATION_GROUPINGS if groupings is None else groupings)
    train_rows, val_rows, test_rows = split(manifest_rows, config.ratios, config.seed)
    train_rows = balance(train_rows)
    n_points = config.model.n_points
    results = []
    for name, grouping in groupings:
        try:
            tr = _grouping_examples(train_rows, grouping, n_points, config.seed, phenotypes)
            va = _grouping_examples(val_rows, grouping, n_points, config.seed, phenotypes)
            te = _grouping_examples(test_rows, grouping, n_points, config.seed, phenotypes)
        except DataError as err:
            raise DataError(f"grouping {name!r}: {err}") from err
        ckpt = train_on_examples(config, tr, va)
        metrics = evaluate_examples(ckpt, te)
        results.append({
            "grouping": name,
            "micro_auc": metrics.micro_auc,
            "mean_chamfer": metrics.mean_chamfer,
            "reference_auc": CLINICAL_REFERENCE_AUC.get(name),
        })
    return results


# --- latent sweep ---------------------------------------------------------------------------

def latent_sweep(config: TrainConfig, manifest_rows, ks=(128, 256, 512, 1024),
                 out_dir=None) -> list[dict]:
    """Train once per latent size with a shared seed; one result row per k."""
    results = []
    for k in ks:
        model_cfg = replace(config.model,
                            encoder=replace(config.model.encoder, latent_dim=k))
        k_config = replace(config, model=model_cfg)
        ckpt = train(k_config, manifest_rows)
        _, _, test_rows = split(manifest_rows, config.ratios, config.seed)
        metrics = evaluate(ckpt, test_rows)
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(ckpt, out_dir / f"checkpoint-k{k}.ckpt")
        results.append({
            "k": k,
            "mean_chamfer": metrics.mean_chamfer,
            "micro_auc": metrics.micro_auc,
            "reference_chamfer": CLINICAL_REFERENCE_CHAMFER.get(k),
        })
    return results
