"""Synthetic optic-nerve-head point clouds with controllable phenotypes.

Each subject is one parameter vector; boundary surfaces are analytic fields
(base plane + nasal-temporal tilt + elliptical-Gaussian cup + thickness
stack, with an extra windowed canal tilt on sclera/LC). All boundaries share
the same base shape, so consecutive same-layer boundaries are separated by
exactly the layer thickness everywhere.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pointcloud import (ANTERIOR, POSTERIOR, ClassLabel, LayerLabel,
                         PointCloud, downsample_fps, normalize, write_onhpc)

# Scan raster matching the imaging protocol (mm per step).
RASTER_BSCANS = 97
RASTER_ASCANS = 384
STEP_X_MM = 11.5e-3
STEP_Y_MM = 35.1e-3

# Fixed stack plumbing (um): unparameterized bands and separation gaps.
BASE_DEPTH_UM = 900.0
GCL_IPL_BAND_UM = 70.0
RPE_BAND_UM = 30.0
CANAL_GAP_UM = 300.0   # headroom for the canal tilt term below the choroid
SCLERA_LC_GAP_UM = 10.0

DEFAULT_LAYER_SET = frozenset(
    {LayerLabel.RNFL, LayerLabel.ORL, LayerLabel.SCLERA, LayerLabel.LC})

_PARAM_FIELDS = (
    "rnfl_thickness", "prelamina_thickness", "orl_thickness",
    "choroid_thickness", "scleral_thickness", "lc_thickness",
    "cup_depth", "cup_diameter", "disc_diameter",
    "disc_tilt_deg", "sco_tilt_deg", "elongation_ratio",
)


@dataclass(frozen=True)
class PhenotypeParams:
    """One synthetic ONH: thicknesses and cup depth in um, diameters in mm."""

    rnfl_thickness: float
    prelamina_thickness: float
    orl_thickness: float
    choroid_thickness: float
    scleral_thickness: float
    lc_thickness: float
    cup_depth: float
    cup_diameter: float
    disc_diameter: float
    disc_tilt_deg: float
    sco_tilt_deg: float
    elongation_ratio: float

    def __post_init__(self):
        for name in ("rnfl_thickness", "prelamina_thickness", "orl_thickness",
                     "choroid_thickness", "scleral_thickness", "lc_thickness",
                     "cup_depth", "cup_diameter", "disc_diameter"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.cup_diameter >= self.disc_diameter + 1.0:
            raise ValueError("cup_diameter must be < disc_diameter + 1 mm")
        if abs(self.disc_tilt_deg) > 30 or abs(self.sco_tilt_deg) > 30:
            raise ValueError("tilts must be within +-30 degrees")
        if not 1.0 <= self.elongation_ratio <= 1.6:
            raise ValueError("elongation_ratio must be in [1.0, 1.6]")

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in _PARAM_FIELDS}

    @classmethod
    def from_dict(cls, d: dict) -> "PhenotypeParams":
        return cls(**{f: float(d[f]) for f in _PARAM_FIELDS})


# Per-class uniform parameter boxes. These encode qualitative contrasts only
# (H: thick RNFL/prelamina, small shallow cup; G: thin RNFL/prelamina/LC with
# a deep wide cup; HM: tilted elongated disc, thin sclera/LC, shallow cup,
# thick prelamina; HMG: HM plus deep cup and thin RNFL/prelamina) and make no
# clinical claims.
def default_priors() -> dict:
    return {
        ClassLabel.H: {
            "rnfl_thickness": (90, 110), "prelamina_thickness": (180, 260),
            "orl_thickness": (150, 200), "choroid_thickness": (120, 180),
            "scleral_thickness": (350, 450), "lc_thickness": (250, 300),
            "cup_depth": (150, 250), "cup_diameter": (0.6, 0.9),
            "disc_diameter": (1.4, 1.7), "disc_tilt_deg": (0, 3),
            "sco_tilt_deg": (0, 2), "elongation_ratio": (1.0, 1.1),
        },
        ClassLabel.HM: {
            "rnfl_thickness": (75, 95), "prelamina_thickness": (220, 300),
            "orl_thickness": (150, 200), "choroid_thickness": (90, 150),
            "scleral_thickness": (200, 300), "lc_thickness": (180, 230),
            "cup_depth": (100, 200), "cup_diameter": (1.1, 1.5),
            "disc_diameter": (1.7, 2.1), "disc_tilt_deg": (8, 15),
            "sco_tilt_deg": (6, 12), "elongation_ratio": (1.2, 1.5),
        },
        ClassLabel.G: {
            "rnfl_thickness": (40, 60), "prelamina_thickness": (80, 140),
            "orl_thickness": (150, 200), "choroid_thickness": (120, 180),
            "scleral_thickness": (350, 450), "lc_thickness": (180, 230),
            "cup_depth": (500, 750), "cup_diameter": (1.2, 1.6),
            "disc_diameter": (1.4, 1.7), "disc_tilt_deg": (0, 3),
            "sco_tilt_deg": (0, 2), "elongation_ratio": (1.0, 1.1),
        },
        ClassLabel.HMG: {
            "rnfl_thickness": (35, 55), "prelamina_thickness": (70, 130),
            "orl_thickness": (150, 200), "choroid_thickness": (90, 150),
            "scleral_thickness": (200, 300), "lc_thickness": (150, 200),
            "cup_depth": (550, 800), "cup_diameter": (1.3, 1.7),
            "disc_diameter": (1.7, 2.1), "disc_tilt_deg": (10, 18),
            "sco_tilt_deg": (8, 15), "elongation_ratio": (1.2, 1.5),
        },
    }


def validate_priors(priors: dict) -> None:
    for cls, box in priors.items():
        missing = set(_PARAM_FIELDS) - set(box)
        if missing:
            raise ValueError(f"{ClassLabel(cls).name}: missing priors {sorted(missing)}")
        for f, (lo, hi) in box.items():
            if lo > hi:
                raise ValueError(f"{ClassLabel(cls).name}.{f}: empty range")
        PhenotypeParams(**{f: 0.5 * (box[f][0] + box[f][1]) for f in _PARAM_FIELDS})
    classes = sorted(priors)
    for i, a in enumerate(classes):
        for b in classes[i + 1:]:
            differing = sum(tuple(priors[a][f]) != tuple(priors[b][f])
                            for f in _PARAM_FIELDS)
            if differing < 2:
                raise ValueError(
                    f"classes {ClassLabel(a).name}/{ClassLabel(b).name} differ in "
                    f"fewer than two fields")


def sample_params(class_label: ClassLabel, priors: dict, seed: int) -> PhenotypeParams:
    """Uniform draw per field from the class box; fields in declared order."""
    box = priors[ClassLabel(class_label)]
    rng = np.random.default_rng(int(seed))
    values = {}
    for f in _PARAM_FIELDS:
        lo, hi = box[f]
        values[f] = float(lo) if lo == hi else float(rng.uniform(lo, hi))
    return PhenotypeParams(**values)


class SurfaceStack:
    """Ordered boundary fields z(x, y) in mm for one parameter vector."""

    # Stack order, anterior to posterior, with the thickness (or fixed band)
    # separating each boundary from the previous one.
    def __init__(self, params: PhenotypeParams):
        self.params = params
        p = params
        order = [
            (LayerLabel.RNFL, ANTERIOR, 0.0, False),
            (LayerLabel.RNFL, POSTERIOR, p.rnfl_thickness, False),
            (LayerLabel.GCL_IPL, ANTERIOR, 0.0, False),
            (LayerLabel.GCL_IPL, POSTERIOR, GCL_IPL_BAND_UM, False),
            (LayerLabel.ORL, ANTERIOR, 0.0, False),
            (LayerLabel.ORL, POSTERIOR, p.orl_thickness, False),
            (LayerLabel.PRELAMINA, ANTERIOR, 0.0, False),
            (LayerLabel.PRELAMINA, POSTERIOR, p.prelamina_thickness, False),
            (LayerLabel.RPE, ANTERIOR, 0.0, False),
            (LayerLabel.RPE, POSTERIOR, RPE_BAND_UM, False),
            (LayerLabel.CHOROID, ANTERIOR, 0.0, False),
            (LayerLabel.CHOROID, POSTERIOR, p.choroid_thickness, False),
            (LayerLabel.SCLERA, ANTERIOR, CANAL_GAP_UM, True),
            (LayerLabel.SCLERA, POSTERIOR, p.scleral_thickness, True),
            (LayerLabel.LC, ANTERIOR, SCLERA_LC_GAP_UM, True),
            (LayerLabel.LC, POSTERIOR, p.lc_thickness, True),
        ]
        self.offsets_um: dict[tuple[LayerLabel, int], float] = {}
        self.canal_tilted: dict[tuple[LayerLabel, int], bool] = {}
        z = 0.0
        for layer, side, gap, tilted in order:
            z += gap
            self.offsets_um[(layer, side)] = z
            self.canal_tilted[(layer, side)] = tilted
        self.center_mm = (STEP_X_MM * (RASTER_ASCANS - 1) / 2.0,
                          STEP_Y_MM * (RASTER_BSCANS - 1) / 2.0)
        self._validate()

    def boundaries(self) -> list[tuple[LayerLabel, int]]:
        return list(self.offsets_um.keys())

    def _base_shape_mm(self, x, y):
        p = self.params
        cx, cy = self.center_mm
        u = np.asarray(x, dtype=np.float64) - cx
        v = np.asarray(y, dtype=np.float64) - cy
        sigma_is = p.cup_diameter / 4.0
        sigma_nt = sigma_is * p.elongation_ratio
        cup = (p.cup_depth / 1000.0) * np.exp(
            -(u ** 2 / (2 * sigma_nt ** 2) + v ** 2 / (2 * sigma_is ** 2)))
        tilt = np.tan(np.deg2rad(p.disc_tilt_deg)) * u
        return BASE_DEPTH_UM / 1000.0 + tilt + cup

    def _canal_term_mm(self, x, y):
        p = self.params
        cx, cy = self.center_mm
        u = np.asarray(x, dtype=np.float64) - cx
        v = np.asarray(y, dtype=np.float64) - cy
        sigma_c = p.disc_diameter / 4.0
        window = np.exp(-((u / p.elongation_ratio) ** 2 + v ** 2) / (2 * sigma_c ** 2))
        return np.tan(np.deg2rad(p.sco_tilt_deg)) * u * window

    def boundary_z(self, layer: LayerLabel, side: int, x, y) -> np.ndarray:
        """z(x, y) in mm for one boundary; x, y in mm (arrays broadcast)."""
        key = (LayerLabel(layer), int(side))
        z = self._base_shape_mm(x, y) + self.offsets_um[key] / 1000.0
        if self.canal_tilted[key]:
            z = z + self._canal_term_mm(x, y)
        return z

    def _validate(self, grid: int = 101) -> None:
        xs = np.linspace(0.0, STEP_X_MM * (RASTER_ASCANS - 1), grid)
        ys = np.linspace(0.0, STEP_Y_MM * (RASTER_BSCANS - 1), grid)
        gx, gy = np.meshgrid(xs, ys)
        keys = self.boundaries()
        prev_key, prev_z = None, None
        for key in keys:
            z = self.boundary_z(key[0], key[1], gx, gy)
            if prev_z is not None and (z - prev_z).min() < -1e-12:
                a = f"{prev_key[0].name}.{'ant' if prev_key[1] == ANTERIOR else 'post'}"
                b = f"{key[0].name}.{'ant' if key[1] == ANTERIOR else 'post'}"
                raise ValueError(f"surfaces cross: {b} rises above {a}")
            prev_key, prev_z = key, z


def build_surfaces(params: PhenotypeParams) -> SurfaceStack:
    return SurfaceStack(params)


def generate_cloud(params: PhenotypeParams, n_points: int, noise_sigma: float,
                   seed: int, layer_set=None, class_label: ClassLabel | None = None,
                   subject_id: str | None = None, pool_factor: int = 8) -> PointCloud:
    """Sample the boundary stack on the scan raster and FPS-downsample.

    noise_sigma is axial Gaussian noise in um. Raster nodes are a seeded
    subset per boundary (about pool_factor * n_points total) when the full
    97x384 grid would be needlessly large. Output is normalized about the
    disc center and carries layer, side and class tags.
    """
    if n_points < 64:
        raise ValueError("n_points must be >= 64")
    layer_set = DEFAULT_LAYER_SET if layer_set is None else frozenset(
        LayerLabel(l) for l in layer_set)
    stack = build_surfaces(params)
    keys = [k for k in stack.boundaries() if k[0] in layer_set]
    if not keys:
        raise ValueError("layer set matches no boundary surfaces")
    rng = np.random.default_rng(int(seed))
    n_grid = RASTER_BSCANS * RASTER_ASCANS
    per_boundary = min(n_grid, max(64, int(np.ceil(pool_factor * n_points / len(keys)))))
    if per_boundary * len(keys) < n_points:
        raise ValueError("raster too small for requested point count")
    xs_all = np.arange(RASTER_ASCANS) * STEP_X_MM
    ys_all = np.arange(RASTER_BSCANS) * STEP_Y_MM
    pts, labels, sides = [], [], []
    for layer, side in keys:
        if per_boundary == n_grid:
            nodes = np.arange(n_grid)
        else:
            nodes = rng.choice(n_grid, size=per_boundary, replace=False)
            nodes.sort()
        bx = xs_all[nodes % RASTER_ASCANS]
        by = ys_all[nodes // RASTER_ASCANS]
        bz = stack.boundary_z(layer, side, bx, by)
        if noise_sigma > 0:
            bz = bz + rng.normal(0.0, noise_sigma / 1000.0, size=bz.shape)
        pts.append(np.column_stack([bx, by, bz]))
        labels.append(np.full(bx.shape, int(layer), dtype=np.uint8))
        sides.append(np.full(bx.shape, side, dtype=np.uint8))
    cloud = PointCloud(np.concatenate(pts), np.concatenate(labels),
                       class_label=class_label, subject_id=subject_id,
                       sides=np.concatenate(sides))
    cx, cy = stack.center_mm
    cloud = normalize(cloud, (cx, cy, BASE_DEPTH_UM / 1000.0))
    return downsample_fps(cloud, n_points, seed)


def derive_seed(*keys: int) -> int:
    """Stable 63-bit seed from a tuple of integer keys."""
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(2)
    return int((int(state[0]) << 31) ^ int(state[1]))


def generate_dataset(per_class_count: int, priors: dict, n_points: int,
                     noise_sigma: float, seed: int, out_dir,
                     layer_set=None) -> Path:
    """Write ONHPC files, a manifest CSV and a phenotype sidecar; returns the
    manifest path. One cloud per synthetic subject; byte-deterministic."""
    if per_class_count < 1:
        raise ValueError("per_class_count must be >= 1")
    validate_priors(priors)
    out_dir = Path(out_dir)
    cloud_dir = out_dir / "clouds"
    cloud_dir.mkdir(parents=True, exist_ok=True)
    rows = ["path,subject_id,class,cohort"]
    phenotypes = {}
    for class_label in ClassLabel:
        for j in range(per_class_count):
            subject = f"SYN-{class_label.name}-{j:04d}"
            p_seed = derive_seed(seed, int(class_label), j, 0)
            c_seed = derive_seed(seed, int(class_label), j, 1)
            params = sample_params(class_label, priors, p_seed)
            cloud = generate_cloud(params, n_points, noise_sigma, c_seed,
                                   layer_set=layer_set, class_label=class_label,
                                   subject_id=subject)
            rel = f"clouds/{subject}.onhpc"
            write_onhpc(cloud, out_dir / rel)
            rows.append(f"{rel},{subject},{int(class_label)},synthetic")
            phenotypes[subject] = {
                "class": int(class_label),
                "params": params.to_dict(),
                "n_points": n_points,
                "noise_sigma": noise_sigma,
                "cloud_seed": c_seed,
            }
    manifest = out_dir / "manifest.csv"
    manifest.write_text("\n".join(rows) + "\n", encoding="ascii")
    (out_dir / "phenotypes.json").write_text(
        json.dumps(phenotypes, indent=1, sort_keys=True) + "\n", encoding="ascii")
    return manifest


def regenerate_for_layers(phenotype_entry: dict, layer_set,
                          subject_id: str | None = None) -> PointCloud:
    """Rebuild one subject's cloud restricted to a layer set (ablation path)."""
    params = PhenotypeParams.from_dict(phenotype_entry["params"])
    return generate_cloud(
        params, int(phenotype_entry["n_points"]),
        float(phenotype_entry["noise_sigma"]), int(phenotype_entry["cloud_seed"]),
        layer_set=layer_set, class_label=ClassLabel(int(phenotype_entry["class"])),
        subject_id=subject_id)
