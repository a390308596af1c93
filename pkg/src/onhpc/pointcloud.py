"""Core labeled point-cloud types and geometry operations.

A cloud is n points of (x, y, z) in mm plus a per-point tissue-layer code.
Model-ready clouds carry exactly MODEL_POINTS points. Coordinates after
`normalize` are in normalized units (mm / GLOBAL_SCALE_MM).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

# Fixed normalization scale. Per-cloud rescaling is deliberately NOT done:
# disc size and elongation are class signals and must survive normalization.
GLOBAL_SCALE_MM = 2.0
MODEL_POINTS = 4096

ANTERIOR = 0
POSTERIOR = 1


class LayerLabel(enum.IntEnum):
    RNFL = 0
    GCL_IPL = 1
    ORL = 2
    RPE = 3
    CHOROID = 4
    SCLERA = 5
    LC = 6
    PRELAMINA = 7


class ClassLabel(enum.IntEnum):
    H = 0
    HM = 1
    G = 2
    HMG = 3


def parse_layers(text: str) -> frozenset[LayerLabel]:
    """Parse a comma-separated layer list like 'rnfl,orl,sclera,lc'."""
    out = set()
    for token in text.split(","):
        token = token.strip().upper()
        if not token:
            continue
        try:
            out.add(LayerLabel[token])
        except KeyError:
            raise ValueError(f"unknown layer name {token!r}") from None
    if not out:
        raise ValueError("empty layer list")
    return frozenset(out)


@dataclass
class PointCloud:
    """n labeled 3D points; the universal currency of the pipeline."""

    xyz: np.ndarray                      # (n, 3) float64, mm or normalized units
    layers: np.ndarray                   # (n,) uint8 LayerLabel codes
    class_label: ClassLabel | None = None
    subject_id: str | None = None
    sides: np.ndarray | None = None      # (n,) uint8, 0=anterior 1=posterior

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64)
        self.layers = np.asarray(self.layers, dtype=np.uint8)
        if self.xyz.ndim != 2 or self.xyz.shape[1] != 3:
            raise ValueError(f"xyz must be (n, 3), got {self.xyz.shape}")
        if self.layers.shape != (self.xyz.shape[0],):
            raise ValueError("layers must align with points")
        bad = ~np.isfinite(self.xyz)
        if bad.any():
            raise ValueError(f"non-finite coordinate at point {int(np.argwhere(bad)[0][0])}")
        if self.layers.size and int(self.layers.max()) > 7:
            raise ValueError(f"invalid layer code {int(self.layers.max())}")
        if self.sides is not None:
            self.sides = np.asarray(self.sides, dtype=np.uint8)
            if self.sides.shape != (self.xyz.shape[0],):
                raise ValueError("sides must align with points")

    def __len__(self) -> int:
        return self.xyz.shape[0]

    def take(self, idx: np.ndarray) -> "PointCloud":
        return replace(self, xyz=self.xyz[idx], layers=self.layers[idx],
                       sides=None if self.sides is None else self.sides[idx])


def normalize(cloud: PointCloud, reference_center) -> PointCloud:
    """Shift by the reference center and divide by the fixed global scale."""
    center = np.asarray(reference_center, dtype=np.float64)
    if center.shape != (3,) or not np.all(np.isfinite(center)):
        raise ValueError(f"reference_center must be a finite 3-vector, got {center!r}")
    return replace(cloud, xyz=(cloud.xyz - center) / GLOBAL_SCALE_MM)


def fps_indices(xyz: np.ndarray, m: int, seed: int) -> np.ndarray:
    """Farthest-point sampling order over xyz, deterministic given seed.

    The first point comes from the seeded RNG; each next point maximizes its
    minimum squared distance to the selected set, ties broken by lowest index.
    """
    n = xyz.shape[0]
    if n == 0:
        raise ValueError("cannot sample from an empty cloud")
    m = min(int(m), n)
    rng = np.random.default_rng(int(seed))
    sel = np.empty(m, dtype=np.int64)
    sel[0] = int(rng.integers(n))
    d2 = np.einsum("ij,ij->i", xyz - xyz[sel[0]], xyz - xyz[sel[0]])
    for i in range(1, m):
        j = int(np.argmax(d2))  # argmax returns the first max = lowest index
        sel[i] = j
        diff = xyz - xyz[j]
        np.minimum(d2, np.einsum("ij,ij->i", diff, diff), out=d2)
    return sel


def downsample_fps(cloud: PointCloud, m: int, seed: int) -> PointCloud:
    if m < 1:
        raise ValueError("m must be >= 1")
    if len(cloud) == 0:
        raise ValueError("cannot downsample an empty cloud")
    return cloud.take(fps_indices(cloud.xyz, m, seed))


def augment(cloud: PointCloud, rng_seed: int, jitter_sigma: float = 0.005,
            max_rot_deg: float = 10.0, max_shift: float = 0.05) -> PointCloud:
    """Jitter, rotate about the anterior-posterior (z) axis, then translate.

    Jitter is per-coordinate Gaussian clipped to +-4 sigma; rotation angle is
    uniform in +-max_rot_deg (counterclockwise viewed from +z); translation
    components are uniform in +-max_shift. Deterministic given rng_seed.
    """
    if jitter_sigma < 0 or max_rot_deg < 0 or max_shift < 0:
        raise ValueError("augmentation magnitudes must be >= 0")
    rng = np.random.default_rng(int(rng_seed))
    xyz = cloud.xyz.copy()
    if jitter_sigma > 0:
        noise = rng.normal(0.0, jitter_sigma, size=xyz.shape)
        np.clip(noise, -4.0 * jitter_sigma, 4.0 * jitter_sigma, out=noise)
        xyz += noise
    if max_rot_deg > 0:
        theta = np.deg2rad(rng.uniform(-max_rot_deg, max_rot_deg))
        c, s = np.cos(theta), np.sin(theta)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        xyz = xyz @ rot.T
    if max_shift > 0:
        xyz += rng.uniform(-max_shift, max_shift, size=3)
    return replace(cloud, xyz=xyz)


def rotate_about_z(cloud: PointCloud, angle_deg: float) -> PointCloud:
    """Fixed-angle counterclockwise rotation (viewed from +z); test hook."""
    theta = np.deg2rad(angle_deg)
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return replace(cloud, xyz=cloud.xyz @ rot.T)


def split_by_layers(cloud: PointCloud, layers) -> PointCloud:
    layers = frozenset(LayerLabel(l) for l in layers)
    if not layers:
        raise ValueError("layer set must be nonempty")
    mask = np.isin(cloud.layers, [int(l) for l in layers])
    if not mask.any():
        raise ValueError(f"no points in layers {sorted(l.name for l in layers)}")
    return cloud.take(np.flatnonzero(mask))


def _sides_by_window_kmeans(xs: np.ndarray, zs: np.ndarray) -> np.ndarray:
    """Recover anterior/posterior tags for one layer's slice points.

    Sweeps x in overlapping 9-point windows and 2-means the z values; the
    cluster with the smaller mean z is anterior. Votes accumulate per point.
    """
    n = xs.size
    order = np.argsort(xs, kind="stable")
    votes_ant = np.zeros(n)
    votes_post = np.zeros(n)
    win = 9
    if n <= win // 2:
        return np.zeros(n, dtype=np.uint8)
    win = min(win, n)
    starts = list(range(0, n - win + 1, max(win // 2, 1)))
    if starts[-1] != n - win:
        starts.append(n - win)  # cover the tail so every point gets a vote
    for s in starts:
        w = order[s:s + win]
        z = zs[w]
        lo, hi = z.min(), z.max()
        if hi - lo < 1e-12:
            votes_ant[w] += 1.0
            continue
        # 2-means on a line: threshold iteration from the midpoint
        thr = 0.5 * (lo + hi)
        for _ in range(20):
            low = z <= thr
            if low.all() or (~low).all():
                break
            new = 0.5 * (z[low].mean() + z[~low].mean())
            if abs(new - thr) < 1e-12:
                break
            thr = new
        low = z <= thr
        votes_ant[w[low]] += 1.0
        votes_post[w[~low]] += 1.0
    return (votes_post > votes_ant).astype(np.uint8)


def central_slice(cloud: PointCloud, y_center: float, tol: float) -> dict:
    """Points with |y - y_center| <= tol, grouped by (LayerLabel, side).

    When side metadata is absent the windowed 2-means heuristic assigns it.
    Returns {(LayerLabel, side): (m, 3) array}; empty dict for an empty slice.
    """
    if tol <= 0:
        raise ValueError("tol must be > 0")
    mask = np.abs(cloud.xyz[:, 1] - y_center) <= tol
    out: dict = {}
    for code in np.unique(cloud.layers[mask]):
        layer = LayerLabel(int(code))
        idx = np.flatnonzero(mask & (cloud.layers == code))
        pts = cloud.xyz[idx]
        if cloud.sides is not None:
            sides = cloud.sides[idx]
        else:
            sides = _sides_by_window_kmeans(pts[:, 0], pts[:, 2])
        for side in (ANTERIOR, POSTERIOR):
            sub = pts[sides == side]
            if sub.shape[0]:
                out[(layer, side)] = sub
    return out


# --- ONHPC v1 text format ---------------------------------------------------

def write_onhpc(cloud: PointCloud, path) -> None:
    """Write the ONHPC v1 text format (shortest round-trip decimals)."""
    cls = "-" if cloud.class_label is None else str(int(cloud.class_label))
    sid = cloud.subject_id if cloud.subject_id else "-"
    lines = [f"ONHPC 1 {len(cloud)} {cls} {sid}"]
    has_sides = cloud.sides is not None
    for i in range(len(cloud)):
        x, y, z = (float(v) for v in cloud.xyz[i])
        row = f"{x!r} {y!r} {z!r} {int(cloud.layers[i])}"
        if has_sides:
            row += f" {int(cloud.sides[i])}"
        lines.append(row)
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def read_onhpc(path) -> PointCloud:
    with open(path, "r", encoding="ascii") as f:
        header = f.readline().split()
        if len(header) != 5 or header[0] != "ONHPC" or header[1] != "1":
            raise ValueError(f"{path}: not an ONHPC v1 file")
        n = int(header[2])
        cls = None if header[3] == "-" else ClassLabel(int(header[3]))
        sid = None if header[4] == "-" else header[4]
        xyz = np.empty((n, 3))
        layers = np.empty(n, dtype=np.uint8)
        sides = np.empty(n, dtype=np.uint8)
        have_sides = None
        for i in range(n):
            parts = f.readline().split()
            if len(parts) not in (4, 5):
                raise ValueError(f"{path}: malformed point line {i + 2}")
            xyz[i] = [float(parts[0]), float(parts[1]), float(parts[2])]
            layers[i] = int(parts[3])
            row_has_side = len(parts) == 5
            if have_sides is None:
                have_sides = row_has_side
            elif have_sides != row_has_side:
                raise ValueError(f"{path}: inconsistent side columns at line {i + 2}")
            if row_has_side:
                sides[i] = int(parts[4])
        if f.readline().strip():
            raise ValueError(f"{path}: more points than declared count {n}")
    return PointCloud(xyz, layers, class_label=cls, subject_id=sid,
                      sides=sides if have_sides else None)
