"""Latent-space analytics: 2D embedding, clustering, morphing, slice renders.

The two principal directions come from an eigendecomposition of the sample
covariance of training-set latents; evaluation latents are projected with the
frozen model. Morphing decodes a straight line in embedding space back into
point clouds; central-slice boundary curves are natural cubic smoothing
splines.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pointcloud import ANTERIOR, ClassLabel, LayerLabel, PointCloud, central_slice

LAYER_COLORS = {
    LayerLabel.RNFL: "#d62728",
    LayerLabel.GCL_IPL: "#2ca02c",
    LayerLabel.ORL: "#1f77b4",
    LayerLabel.RPE: "#bcbd22",
    LayerLabel.CHOROID: "#e377c2",
    LayerLabel.SCLERA: "#17becf",
    LayerLabel.LC: "#ff7f0e",
    LayerLabel.PRELAMINA: "#9467bd",
}

SPLINE_SAMPLES = 256


# --- PCA -----------------------------------------------------------------------

@dataclass
class PcaModel:
    mean: np.ndarray                 # (k,)
    components: np.ndarray           # (2, k), orthonormal rows
    explained_variance: np.ndarray   # (2,), nonincreasing

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(),
                "components": self.components.tolist(),
                "explained_variance": self.explained_variance.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "PcaModel":
        return cls(np.array(d["mean"], dtype=np.float64),
                   np.array(d["components"], dtype=np.float64),
                   np.array(d["explained_variance"], dtype=np.float64))


def _fix_sign(v: np.ndarray) -> np.ndarray:
    i = int(np.argmax(np.abs(v)))   # first max = lowest index on ties
    return -v if v[i] < 0 else v


def pca_fit(latents: np.ndarray) -> PcaModel:
    """Top-2 eigenvectors of the sample covariance (divisor n-1).

    Sign convention: each component's largest-magnitude entry is positive.
    Degenerate input (fewer than 3 latents, k < 2, or zero total variance)
    is rejected; a one-directional set is allowed and simply reports a
    second explained variance near zero.
    """
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 2 or latents.shape[0] < 3:
        raise ValueError("pca_fit needs at least 3 latent vectors")
    if latents.shape[1] < 2:
        raise ValueError("pca_fit needs latent dimension >= 2")
    mean = latents.mean(axis=0)
    centered = latents - mean
    cov = centered.T @ centered / (latents.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    if eigvals[-1] <= 0.0:
        raise ValueError("latents carry no variance; covariance rank < 2")
    comps = np.stack([_fix_sign(eigvecs[:, -1]), _fix_sign(eigvecs[:, -2])])
    variance = np.maximum(eigvals[[-1, -2]], 0.0)
    return PcaModel(mean, comps, variance)


def pca_forward(model: PcaModel, latent: np.ndarray) -> tuple[float, float]:
    latent = np.asarray(latent, dtype=np.float64)
    if latent.shape != model.mean.shape:
        raise ValueError(f"latent length {latent.shape} != model {model.mean.shape}")
    centered = latent - model.mean
    return float(centered @ model.components[0]), float(centered @ model.components[1])


def pca_inverse(model: PcaModel, embedding) -> np.ndarray:
    pd1, pd2 = float(embedding[0]), float(embedding[1])
    return model.mean + pd1 * model.components[0] + pd2 * model.components[1]


# --- k-means ---------------------------------------------------------------------

@dataclass
class ClusterModel:
    centroids: np.ndarray            # (k, 2)
    objective_path: list             # within-cluster sum of squares per iteration

    def to_dict(self) -> dict:
        return {"centroids": self.centroids.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterModel":
        return cls(np.array(d["centroids"], dtype=np.float64), [])


def assign(centroids: np.ndarray, points: np.ndarray) -> np.ndarray:
    d2 = np.sum((points[:, None, :] - centroids[None, :, :]) ** 2, axis=-1)
    return d2.argmin(axis=1)        # ties go to the lowest centroid index


def kmeans_fit(points: np.ndarray, k: int = 4, seed: int = 0,
               tol: float = 1e-8, max_iter: int = 500) -> ClusterModel:
    """Seeded k-means++ then Lloyd iterations until centroids settle.

    An emptied cluster is re-seeded at the point farthest from its assigned
    centroid before the next iteration.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if len(np.unique(points, axis=0)) < k:
        raise ValueError(f"k-means needs at least {k} distinct points")
    rng = np.random.default_rng(int(seed))
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[int(rng.integers(n))]
    for j in range(1, k):
        d2 = np.min(np.sum((points[:, None] - centroids[None, :j]) ** 2, axis=-1), axis=1)
        total = d2.sum()
        if total == 0.0:
            centroids[j] = points[int(rng.integers(n))]
        else:
            centroids[j] = points[int(rng.choice(n, p=d2 / total))]
    objective_path = []
    for _ in range(max_iter):
        ids = assign(centroids, points)
        d2 = np.sum((points - centroids[ids]) ** 2, axis=-1)
        objective_path.append(float(d2.sum()))
        new_centroids = centroids.copy()
        for j in range(k):
            members = points[ids == j]
            if members.shape[0]:
                new_centroids[j] = members.mean(axis=0)
            else:
                far = int(np.argmax(d2))
                new_centroids[j] = points[far]
                d2[far] = 0.0
        move = float(np.max(np.abs(new_centroids - centroids)))
        centroids = new_centroids
        if move < tol:
            break
    ids = assign(centroids, points)
    objective_path.append(float(np.sum((points - centroids[ids]) ** 2)))
    return ClusterModel(centroids, objective_path)


# --- morphing ------------------------------------------------------------------------

@dataclass
class MorphTrajectory:
    embeddings: np.ndarray           # (steps + 1, 2)
    latents: np.ndarray              # (steps + 1, k)
    clouds: list                     # decoded (n, 3) arrays
    patch_index: np.ndarray          # (n,)


def morph(model: PcaModel, decoder, start, target, steps: int = 20) -> MorphTrajectory:
    """Decode the straight line from start to target in embedding space.

    `steps` counts increments: the trajectory has steps + 1 states with the
    endpoints included exactly. `decoder` maps a latent vector to
    ((n, 3) cloud, patch_index).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    start = np.asarray(start, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    embeddings = np.empty((steps + 1, 2))
    latents = []
    clouds = []
    patch_index = None
    for i in range(steps + 1):
        e = start + (i / steps) * (target - start)
        embeddings[i] = e
        lat = pca_inverse(model, e)
        latents.append(lat)
        cloud, patch_index = decoder(lat)
        clouds.append(cloud)
    return MorphTrajectory(embeddings, np.stack(latents), clouds, patch_index)


# --- smoothing splines -----------------------------------------------------------------

def _natural_smoothing_spline(x: np.ndarray, z: np.ndarray, lam: float):
    """Fitted knot values and second derivatives (natural boundary).

    Minimizes sum (z - f)^2 + lam * integral f''^2 via the banded interior
    system (R + lam Q^T Q) gamma = Q^T z, f = z - lam Q gamma; lam = 0 gives
    the interpolating natural spline, lam -> inf the least-squares line.
    """
    n = x.size
    h = np.diff(x)
    q = np.zeros((n, n - 2))
    r = np.zeros((n - 2, n - 2))
    for j in range(1, n - 1):
        c = j - 1
        q[j - 1, c] = 1.0 / h[j - 1]
        q[j, c] = -1.0 / h[j - 1] - 1.0 / h[j]
        q[j + 1, c] = 1.0 / h[j]
        r[c, c] = (h[j - 1] + h[j]) / 3.0
        if j < n - 2:
            r[c, c + 1] = r[c + 1, c] = h[j] / 6.0
    qt_z = q.T @ z
    gamma = np.linalg.solve(r + lam * (q.T @ q), qt_z)
    f = z - lam * (q @ gamma)
    second = np.zeros(n)
    second[1:-1] = gamma
    return f, second


def _eval_natural_spline(x, f, second, xs):
    idx = np.clip(np.searchsorted(x, xs, side="right") - 1, 0, x.size - 2)
    x0, x1 = x[idx], x[idx + 1]
    h = x1 - x0
    a = (x1 - xs) / h
    b = (xs - x0) / h
    return (a * f[idx] + b * f[idx + 1]
            + ((a ** 3 - a) * second[idx] + (b ** 3 - b) * second[idx + 1]) * h ** 2 / 6.0)


def fit_boundary_splines(slice_table: dict, smoothing: float) -> dict:
    """Per-(layer, side) smoothing-spline curves sampled at 256 x positions.

    Duplicate x positions are averaged before fitting; groups with fewer
    than 4 distinct x values are skipped with a warning.
    """
    curves = {}
    for key in sorted(slice_table, key=lambda k: (int(k[0]), k[1])):
        pts = slice_table[key]
        order = np.argsort(pts[:, 0], kind="stable")
        xs, zs = pts[order, 0], pts[order, 2]
        ux, inverse = np.unique(xs, return_inverse=True)
        if ux.size < 4:
            layer, side = key
            warnings.warn(f"{layer.name}/{'ant' if side == ANTERIOR else 'post'}: "
                          f"only {ux.size} distinct x positions; group skipped")
            continue
        uz = np.bincount(inverse, weights=zs) / np.bincount(inverse)
        f, second = _natural_smoothing_spline(ux, uz, float(smoothing))
        sample_x = np.linspace(ux[0], ux[-1], SPLINE_SAMPLES)
        sample_z = _eval_natural_spline(ux, f, second, sample_x)
        curves[key] = np.column_stack([sample_x, sample_z])
    return curves


def anterior_cup_depth(curves: dict) -> float:
    """Cup depth read off the fitted anterior-side curves.

    Each anterior curve is compared against the chord through its own
    endpoints (which removes any tilt); the depth is the largest posterior
    excursion (z grows posteriorly) any anterior curve shows. Decoded
    clouds may hand the cup funnel to a deeper layer's patches, so the
    maximum runs over all anterior curves rather than just the topmost one.
    """
    anterior = {k: v for k, v in curves.items() if k[1] == ANTERIOR}
    if not anterior:
        raise ValueError("no anterior curves in slice")
    depth = 0.0
    for curve in anterior.values():
        x, z = curve[:, 0], curve[:, 1]
        chord = z[0] + (z[-1] - z[0]) * (x - x[0]) / (x[-1] - x[0])
        depth = max(depth, float(np.max(z - chord)))
    return depth


# --- embedding points and exports -------------------------------------------------------

@dataclass
class EmbeddingPoint:
    pd1: float
    pd2: float
    class_label: ClassLabel | None = None
    subject_id: str | None = None
    cluster_id: int | None = None


def export_embedding(points, path) -> None:
    lines = ["id,pd1,pd2,class,cluster"]
    for p in points:
        cls = "" if p.class_label is None else str(int(p.class_label))
        cluster = "" if p.cluster_id is None else str(int(p.cluster_id))
        sid = p.subject_id or ""
        lines.append(f"{sid},{float(p.pd1)!r},{float(p.pd2)!r},{cls},{cluster}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_embedding(path) -> list[EmbeddingPoint]:
    lines = Path(path).read_text(encoding="ascii").splitlines()
    if not lines or lines[0] != "id,pd1,pd2,class,cluster":
        raise ValueError(f"{path}: not an embedding CSV")
    out = []
    for line in lines[1:]:
        sid, pd1, pd2, cls, cluster = line.split(",")
        out.append(EmbeddingPoint(
            float(pd1), float(pd2),
            None if cls == "" else ClassLabel(int(cls)),
            sid or None,
            None if cluster == "" else int(cluster)))
    return out


def write_curves_csv(curves: dict, path) -> None:
    lines = ["layer,side,x,z"]
    for (layer, side), samples in curves.items():
        for x, z in samples:
            lines.append(f"{layer.name},{side},{float(x)!r},{float(z)!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def write_curves_svg(curves: dict, path, width: int = 640, height: int = 480) -> None:
    """Standalone SVG of the boundary curves, one polyline per group."""
    if curves:
        all_pts = np.concatenate(list(curves.values()))
        x0, x1 = float(all_pts[:, 0].min()), float(all_pts[:, 0].max())
        z0, z1 = float(all_pts[:, 1].min()), float(all_pts[:, 1].max())
    else:
        x0, x1, z0, z1 = 0.0, 1.0, 0.0, 1.0
    span_x = (x1 - x0) or 1.0
    span_z = (z1 - z0) or 1.0
    margin = 20.0

    def sx(x):
        return margin + (x - x0) / span_x * (width - 2 * margin)

    def sz(z):
        return margin + (z - z0) / span_z * (height - 2 * margin)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    for (layer, side), samples in curves.items():
        color = LAYER_COLORS[layer]
        dash = "" if side == ANTERIOR else ' stroke-dasharray="6 3"'
        coords = " ".join(f"{sx(x):.2f},{sz(z):.2f}" for x, z in samples)
        parts.append(f'<polyline fill="none" stroke="{color}" '
                     f'stroke-width="1.5"{dash} points="{coords}"/>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="ascii")


DEFAULT_MORPH_STAGES = (0, 5, 10, 15, 20)


def render_morph(trajectory: MorphTrajectory, patch_layer_map: dict, out_dir,
                 stages=DEFAULT_MORPH_STAGES, smoothing: float = 1e-4,
                 y_center: float = 0.0, tol: float = 0.02) -> list[Path]:
    """Write a curve CSV and SVG per morph stage; returns the SVG paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    layer_codes = np.array([int(patch_layer_map[p])
                            for p in range(len(patch_layer_map))], dtype=np.uint8)
    written = []
    for stage in stages:
        if not 0 <= stage < len(trajectory.clouds):
            raise ValueError(f"stage {stage} outside trajectory")
        xyz = trajectory.clouds[stage]
        cloud = PointCloud(xyz, layer_codes[trajectory.patch_index])
        table = central_slice(cloud, y_center, tol)
        curves = fit_boundary_splines(table, smoothing)
        write_curves_csv(curves, out_dir / f"stage-{stage:02d}.csv")
        svg = out_dir / f"stage-{stage:02d}.svg"
        write_curves_svg(curves, svg)
        written.append(svg)
    return written


def class_cluster_agreement(class_codes, cluster_ids, n_classes: int = 4) -> float:
    """Best one-to-one class/cluster matching coverage, via the assignment
    problem on the contingency matrix."""
    from scipy.optimize import linear_sum_assignment

    class_codes = np.asarray(class_codes, dtype=np.int64)
    cluster_ids = np.asarray(cluster_ids, dtype=np.int64)
    table = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(table, (class_codes, cluster_ids), 1)
    rows, cols = linear_sum_assignment(-table)
    return float(table[rows, cols].sum() / class_codes.size)
