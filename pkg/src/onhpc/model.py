"""Ensemble network: set-invariant encoder, patch decoder, classifier.

The encoder applies a shared per-point MLP (with an optional learned feature
transform) and max-pools over points, so the latent code is exactly
permutation invariant. The decoder maps a fixed 2D parameter grid plus the
latent code through one small MLP per patch and concatenates patch outputs.
Only xyz coordinates are fed to the network; the layer channel stays with
the cloud metadata.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import diffkernel as dk
from .pointcloud import LayerLabel
from .diffkernel import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    latent_dim: int = 512           # swept values: 128, 256, 512, 1024
    widths: tuple = (64, 64, 128, 256)
    feature_transform: bool = True

    def __post_init__(self):
        if not self.widths:
            raise ValueError("encoder widths must be nonempty")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")


@dataclass(frozen=True)
class DecoderConfig:
    n_patches: int = 32
    points_per_patch: int = 128
    widths: tuple = (256, 128)

    def __post_init__(self):
        if self.n_patches < 1 or self.points_per_patch < 1:
            raise ValueError("patch counts must be >= 1")
        if not self.widths:
            raise ValueError("decoder widths must be nonempty")


@dataclass(frozen=True)
class ClassifierConfig:
    widths: tuple = (128, 64)       # hidden widths; output is always 4 classes

    def __post_init__(self):
        if not self.widths:
            raise ValueError("classifier widths must be nonempty")


@dataclass(frozen=True)
class ModelConfig:
    n_points: int = 4096
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)

    def __post_init__(self):
        if self.decoder.n_patches * self.decoder.points_per_patch != self.n_points:
            raise ValueError(
                f"decoder covers {self.decoder.n_patches} x "
                f"{self.decoder.points_per_patch} points, model expects {self.n_points}")

    def to_dict(self) -> dict:
        return {
            "n_points": self.n_points,
            "encoder": {"latent_dim": self.encoder.latent_dim,
                        "widths": list(self.encoder.widths),
                        "feature_transform": self.encoder.feature_transform},
            "decoder": {"n_patches": self.decoder.n_patches,
                        "points_per_patch": self.decoder.points_per_patch,
                        "widths": list(self.decoder.widths)},
            "classifier": {"widths": list(self.classifier.widths)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            n_points=int(d["n_points"]),
            encoder=EncoderConfig(latent_dim=int(d["encoder"]["latent_dim"]),
                                  widths=tuple(d["encoder"]["widths"]),
                                  feature_transform=bool(d["encoder"]["feature_transform"])),
            decoder=DecoderConfig(n_patches=int(d["decoder"]["n_patches"]),
                                  points_per_patch=int(d["decoder"]["points_per_patch"]),
                                  widths=tuple(d["decoder"]["widths"])),
            classifier=ClassifierConfig(widths=tuple(d["classifier"]["widths"])),
        )


def patch_grid(points_per_patch: int) -> np.ndarray:
    """Fixed lattice of parameter points in [0,1]^2 (8x16 for 128 points)."""
    r = int(np.sqrt(points_per_patch))
    while points_per_patch % r:
        r -= 1
    c = points_per_patch // r
    u, v = np.meshgrid(np.linspace(0.0, 1.0, c), np.linspace(0.0, 1.0, r))
    return np.column_stack([u.ravel(), v.ravel()])


class EnsembleModel:
    """Parameter container plus forward graphs for all three branches."""

    def __init__(self, config: ModelConfig, seed: int = 0,
                 params: dk.ParamStore | None = None):
        self.config = config
        self.params = params if params is not None else self._init_params(config, seed)
        self.grid = patch_grid(config.decoder.points_per_patch)
        self.patch_index = np.repeat(np.arange(config.decoder.n_patches),
                                     config.decoder.points_per_patch)

    @staticmethod
    def _init_params(config: ModelConfig, seed: int) -> dk.ParamStore:
        # biases draw from the same +-sqrt(6/(fan_in+fan_out)) range as their
        # layer: nonzero biases keep relu pre-activations off the exact kink,
        # which per-coordinate finite-difference checks require
        store = dk.ParamStore(seed)

        def layer(prefix, fan_in, fan_out):
            store.glorot(f"{prefix}.w", fan_in, fan_out)
            store.glorot(f"{prefix}.b", fan_in, fan_out, shape=(fan_out,))
            return fan_out

        k = config.encoder.latent_dim
        widths = config.encoder.widths
        fan = 3
        for i, w in enumerate(widths):
            fan = layer(f"enc.mlp{i}", fan, w)
        if config.encoder.feature_transform:
            ft = widths[min(1, len(widths) - 1)]
            layer("enc.tnet.h", ft, 64)
            layer("enc.tnet.fc", 64, 32)
            layer("enc.tnet.out", 32, ft * ft)
        layer("enc.head", fan, k)
        for p in range(config.decoder.n_patches):
            fan = 2 + k
            for i, w in enumerate(config.decoder.widths):
                fan = layer(f"dec.p{p}.l{i}", fan, w)
            layer(f"dec.p{p}.out", fan, 3)
        fan = k
        for i, w in enumerate(config.classifier.widths):
            fan = layer(f"cls.l{i}", fan, w)
        layer("cls.out", fan, 4)
        return store

    # --- graph-building forward passes (batch leading axis) ---

    def encode_t(self, x: Tensor) -> Tensor:
        if x.data.ndim != 3 or x.data.shape[2] != 3:
            raise dk.GraphError(f"encoder input must be (B, n, 3), got {x.data.shape}")
        if x.data.shape[1] != self.config.n_points:
            raise dk.GraphError(
                f"encoder expects exactly {self.config.n_points} points, "
                f"got {x.data.shape[1]}")
        p = self.params
        widths = self.config.encoder.widths
        ft_after = min(1, len(widths) - 1) if self.config.encoder.feature_transform else -1
        h = x
        for i in range(len(widths)):
            h = dk.relu(dk.dense(h, p[f"enc.mlp{i}.w"], p[f"enc.mlp{i}.b"]))
            if i == ft_after:
                h = self._feature_transform(h)
        pooled = dk.max_over_set(h)
        return dk.dense(pooled, p["enc.head.w"], p["enc.head.b"])

    def _feature_transform(self, h: Tensor) -> Tensor:
        p = self.params
        ft = h.data.shape[-1]
        t = dk.relu(dk.dense(h, p["enc.tnet.h.w"], p["enc.tnet.h.b"]))
        t = dk.max_over_set(t)
        t = dk.relu(dk.dense(t, p["enc.tnet.fc.w"], p["enc.tnet.fc.b"]))
        t = dk.dense(t, p["enc.tnet.out.w"], p["enc.tnet.out.b"])
        t = dk.reshape(t, (-1, ft, ft))
        t = dk.add(t, dk.constant(np.eye(ft)))
        return dk.matmul(h, t)

    def decode_t(self, code: Tensor) -> Tensor:
        """All patch MLPs share the (grid + code) input, so they run as one
        batched matrix product per layer with the patch axis leading."""
        k = self.config.encoder.latent_dim
        if code.data.ndim != 2 or code.data.shape[1] != k:
            raise dk.GraphError(f"decoder expects (B, {k}) codes, got {code.data.shape}")
        p = self.params
        batch = code.data.shape[0]
        n_patches = self.config.decoder.n_patches
        ppp = self.config.decoder.points_per_patch
        grid = dk.constant(np.broadcast_to(self.grid, (batch, ppp, 2)).copy())
        code_rep = dk.expand_rows(code, ppp)
        h = dk.reshape(dk.concat([grid, code_rep], axis=-1), (1, batch * ppp, 2 + k))
        layer_names = [f"l{j}" for j in range(len(self.config.decoder.widths))] + ["out"]
        for j, layer in enumerate(layer_names):
            w = dk.stack([p[f"dec.p{i}.{layer}.w"] for i in range(n_patches)])
            b = dk.stack([dk.reshape(p[f"dec.p{i}.{layer}.b"], (1, -1))
                          for i in range(n_patches)])
            h = dk.add(dk.matmul(h, w), b)
            if j < len(layer_names) - 1:
                h = dk.relu(h)
        h = dk.reshape(h, (n_patches, batch, ppp, 3))
        h = dk.transpose(h, (1, 0, 2, 3))
        return dk.reshape(h, (batch, n_patches * ppp, 3))

    def classify_t(self, code: Tensor) -> Tensor:
        k = self.config.encoder.latent_dim
        if code.data.ndim != 2 or code.data.shape[1] != k:
            raise dk.GraphError(f"classifier expects (B, {k}) codes, got {code.data.shape}")
        p = self.params
        h = code
        for i in range(len(self.config.classifier.widths)):
            h = dk.relu(dk.dense(h, p[f"cls.l{i}.w"], p[f"cls.l{i}.b"]))
        return dk.softmax(dk.dense(h, p["cls.out.w"], p["cls.out.b"]))

    # --- ndarray conveniences (single cloud / code) ---

    def encode(self, xyz: np.ndarray) -> np.ndarray:
        return self.encode_t(dk.constant(np.asarray(xyz)[None])).data[0]

    def decode(self, code: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        out = self.decode_t(dk.constant(np.asarray(code)[None])).data[0]
        return out, self.patch_index.copy()

    def classify(self, code: np.ndarray) -> np.ndarray:
        return self.classify_t(dk.constant(np.asarray(code)[None])).data[0]


# --- Chamfer distance ---------------------------------------------------------

def chamfer_pairing(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbor index of each a-point in b and each b-point in a."""
    ia = cKDTree(b).query(a)[1]
    ib = cKDTree(a).query(b)[1]
    return ia, ib


def chamfer_at_pairing(a, b, ia, ib) -> float:
    """Chamfer value with the nearest-neighbor pairing held fixed."""
    da = a - b[ia]
    db = b - a[ib]
    return float(np.einsum("ij,ij->i", da, da).mean()
                 + np.einsum("ij,ij->i", db, db).mean())


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean of squared nearest-neighbor distances.

    CD(A,B) = mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2, via a spatial
    index; matches the O(n*m) scan exactly.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("chamfer requires nonempty clouds")
    da = cKDTree(b).query(a)[0]
    db = cKDTree(a).query(b)[0]
    return float(np.mean(da * da) + np.mean(db * db))


def chamfer_loss(a: Tensor, b: Tensor) -> Tensor:
    """Graph Chamfer between two clouds (n,3)/(m,3); gradients flow through
    the squared distances at the current pairing (piecewise-constant argmin)."""
    ia, ib = chamfer_pairing(a.data, b.data)
    value = chamfer_at_pairing(a.data, b.data, ia, ib)
    n, m = a.data.shape[0], b.data.shape[0]

    def backward(g, out):
        s = 2.0 * float(g)
        da = (a.data - b.data[ia]) * (s / n)
        db = (b.data - a.data[ib]) * (s / m)
        ga = da.copy()
        np.add.at(ga, ib, -db)
        gb = db.copy()
        np.add.at(gb, ia, -da)
        a.accumulate_owned(ga)
        b.accumulate_owned(gb)

    return dk.custom_op(value, (a, b), backward, "chamfer")


def chamfer_batch(recon: Tensor, target: np.ndarray) -> Tensor:
    """Mean Chamfer over a batch; gradients flow into the reconstruction only."""
    target = np.asarray(target, dtype=np.float64)
    batch = recon.data.shape[0]
    pairings = [chamfer_pairing(recon.data[i], target[i]) for i in range(batch)]
    value = float(np.mean([chamfer_at_pairing(recon.data[i], target[i], *pairings[i])
                           for i in range(batch)]))
    n = recon.data.shape[1]
    m = target.shape[1]

    def backward(g, out):
        s = 2.0 * float(g) / batch
        grad = np.zeros_like(recon.data)
        for i, (ia, ib) in enumerate(pairings):
            da = (recon.data[i] - target[i][ia]) * (s / n)
            db = (target[i] - recon.data[i][ib]) * (s / m)
            grad[i] = da
            np.add.at(grad[i], ib, -db)
        recon.accumulate_owned(grad)

    return dk.custom_op(value, (recon,), backward, "chamfer_batch")


# --- Classification loss -------------------------------------------------------

CE_CLAMP = 1e-12


def _check_distribution(p: np.ndarray) -> None:
    if float(np.min(p)) < -1e-12 or float(np.max(np.abs(np.sum(p, axis=-1) - 1.0))) > 1e-9:
        raise ValueError("probabilities must be nonnegative and sum to 1")


def cross_entropy(probs: np.ndarray, truth: int) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    _check_distribution(probs)
    return float(-np.log(max(float(probs[int(truth)]), CE_CLAMP)))


def cross_entropy_loss(probs: Tensor, truth: int) -> Tensor:
    truth = int(truth)
    value = cross_entropy(probs.data, truth)

    def backward(g, out):
        gp = np.zeros_like(probs.data)
        pt = float(probs.data[truth])
        if pt > CE_CLAMP:
            gp[truth] = -float(g) / pt
        probs.accumulate_owned(gp)

    return dk.custom_op(value, (probs,), backward, "cross_entropy")


def cross_entropy_batch(probs: Tensor, truth: np.ndarray) -> Tensor:
    truth = np.asarray(truth, dtype=np.int64)
    _check_distribution(probs.data)
    batch = probs.data.shape[0]
    pt = probs.data[np.arange(batch), truth]
    value = float(np.mean(-np.log(np.maximum(pt, CE_CLAMP))))

    def backward(g, out):
        gp = np.zeros_like(probs.data)
        live = pt > CE_CLAMP
        rows = np.arange(batch)[live]
        gp[rows, truth[live]] = -float(g) / (batch * pt[live])
        probs.accumulate_owned(gp)

    return dk.custom_op(value, (probs,), backward, "cross_entropy_batch")


def total_loss(recon: Tensor, input_xyz, probs: Tensor, truth: int,
               w_rec: float, w_cls: float) -> Tensor:
    """w_rec * chamfer(recon, input) + w_cls * cross_entropy(probs, truth)."""
    if w_rec < 0 or w_cls < 0 or (w_rec == 0 and w_cls == 0):
        raise ValueError("loss weights must be >= 0 and not both zero")
    target = input_xyz if isinstance(input_xyz, Tensor) else dk.constant(input_xyz)
    return dk.add(dk.scale(chamfer_loss(recon, target), w_rec),
                  dk.scale(cross_entropy_loss(probs, truth), w_cls))


def calibrate_patch_layers(model: EnsembleModel, clouds) -> dict[int, LayerLabel]:
    """Majority tissue layer of each decoder patch over a calibration set.

    For every cloud, each reconstructed point votes for the layer of its
    nearest input point; ties resolve to the lowest layer code.
    """
    clouds = list(clouds)
    if not clouds:
        raise ValueError("calibration set is empty")
    n_patches = model.config.decoder.n_patches
    votes = np.zeros((n_patches, 8), dtype=np.int64)
    for cloud in clouds:
        recon, patch_idx = model.decode(model.encode(cloud.xyz))
        nearest = cKDTree(cloud.xyz).query(recon)[1]
        layers = cloud.layers[nearest]
        np.add.at(votes, (patch_idx, layers.astype(np.int64)), 1)
    return {p: LayerLabel(int(np.argmax(votes[p]))) for p in range(n_patches)}
