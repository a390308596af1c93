import numpy as np
import pytest

from onhpc import latent as lt
from onhpc.pointcloud import ANTERIOR, POSTERIOR, ClassLabel, LayerLabel


def jacobi_eigh(matrix, sweeps=100, tol=1e-14):
    """Cyclic Jacobi eigendecomposition oracle for symmetric matrices."""
    a = np.array(matrix, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < 1e-300:
                    continue
                theta = 0.5 * (a[q, q] - a[p, p]) / a[p, q]
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                v = v @ rot
    order = np.argsort(np.diag(a))[::-1]
    return np.diag(a)[order], v[:, order]


def subspace_angle(u, w):
    """Largest principal angle between the spans of the row sets u and w."""
    qu, _ = np.linalg.qr(u.T)
    qw, _ = np.linalg.qr(w.T)
    s = np.linalg.svd(qu.T @ qw, compute_uv=False)
    return float(np.arccos(np.clip(s.min(), -1.0, 1.0)))


def blobs(seed=0, k=6, n_per=30, spread=0.05):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(4, k)) * 3.0
    latents, labels = [], []
    for c in range(4):
        latents.append(centers[c] + rng.normal(size=(n_per, k)) * spread)
        labels += [c] * n_per
    return np.concatenate(latents), np.array(labels), centers


# --- PCA ----------------------------------------------------------------------

def test_pca_line_case_recovers_direction():
    rng = np.random.default_rng(1)
    d = np.zeros(8)
    d[0], d[1] = 1.0, 2.0
    d /= np.sqrt(5.0)
    latents = np.outer(rng.normal(size=50), d)
    model = lt.pca_fit(latents)
    assert min(np.linalg.norm(model.components[0] - d),
               np.linalg.norm(model.components[0] + d)) < 1e-10
    assert model.explained_variance[1] < 1e-12 * model.explained_variance[0] + 1e-15


def test_pca_matches_jacobi_oracle():
    latents, _, _ = blobs(seed=2, k=10, spread=0.8)
    model = lt.pca_fit(latents)
    cov = np.cov(latents, rowvar=False, ddof=1)
    eigvals, eigvecs = jacobi_eigh(cov)
    assert np.max(np.abs(model.explained_variance - eigvals[:2])) < 1e-9
    oracle_comps = eigvecs[:, :2].T
    assert subspace_angle(model.components, oracle_comps) < 1e-6


def test_pca_sign_convention_and_orthonormality():
    latents, _, _ = blobs(seed=3)
    model = lt.pca_fit(latents)
    gram = model.components @ model.components.T
    assert np.max(np.abs(gram - np.eye(2))) < 1e-10
    for comp in model.components:
        assert comp[np.argmax(np.abs(comp))] > 0
    assert model.explained_variance[0] >= model.explained_variance[1]


def test_pca_mean_maps_to_origin():
    latents, _, _ = blobs(seed=4)
    model = lt.pca_fit(latents)
    assert np.allclose(lt.pca_forward(model, model.mean), (0.0, 0.0), atol=1e-12)


def test_pca_forward_of_shifted_component():
    latents, _, _ = blobs(seed=5)
    model = lt.pca_fit(latents)
    pd = lt.pca_forward(model, model.mean + 3.0 * model.components[0])
    assert abs(pd[0] - 3.0) < 1e-12 and abs(pd[1]) < 1e-12


def test_pca_round_trip_and_idempotence():
    latents, _, _ = blobs(seed=6)
    model = lt.pca_fit(latents)
    rng = np.random.default_rng(7)
    for _ in range(10):
        a, b = rng.normal(size=2)
        back = lt.pca_forward(model, lt.pca_inverse(model, (a, b)))
        assert abs(back[0] - a) < 1e-10 and abs(back[1] - b) < 1e-10
    x = rng.normal(size=model.mean.size)
    once = lt.pca_inverse(model, lt.pca_forward(model, x))
    twice = lt.pca_inverse(model, lt.pca_forward(model, once))
    assert np.max(np.abs(once - twice)) < 1e-10


def test_pca_inverse_linearity():
    latents, _, _ = blobs(seed=8)
    model = lt.pca_fit(latents)
    e = np.array([0.7, -1.3])
    y1 = lt.pca_inverse(model, e) - model.mean
    y3 = lt.pca_inverse(model, 3.0 * e) - model.mean
    assert np.max(np.abs(y3 - 3.0 * y1)) < 1e-12


def test_pca_rejects_degenerate_inputs():
    with pytest.raises(ValueError, match="at least 3"):
        lt.pca_fit(np.zeros((2, 5)))
    with pytest.raises(ValueError, match="dimension"):
        lt.pca_fit(np.zeros((5, 1)))
    with pytest.raises(ValueError, match="variance"):
        lt.pca_fit(np.ones((5, 4)))


def test_pca_serialization_round_trip():
    latents, _, _ = blobs(seed=9)
    model = lt.pca_fit(latents)
    back = lt.PcaModel.from_dict(model.to_dict())
    assert np.array_equal(back.mean, model.mean)
    assert np.array_equal(back.components, model.components)


# --- k-means ----------------------------------------------------------------------

def test_kmeans_recovers_separated_blobs():
    rng = np.random.default_rng(10)
    centers = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0], [5.0, 5.0]])
    pts = np.concatenate([c + rng.normal(0, 0.1, size=(40, 2)) for c in centers])
    model = lt.kmeans_fit(pts, k=4, seed=0)
    for c in centers:
        assert np.min(np.linalg.norm(model.centroids - c, axis=1)) < 0.2


def test_kmeans_exact_on_four_distinct_points():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    model = lt.kmeans_fit(pts, k=4, seed=3)
    assert sorted(map(tuple, model.centroids)) == sorted(map(tuple, pts))


def test_kmeans_objective_nonincreasing():
    rng = np.random.default_rng(11)
    pts = rng.normal(size=(200, 2))
    model = lt.kmeans_fit(pts, k=4, seed=1)
    path = model.objective_path
    assert all(b <= a + 1e-9 for a, b in zip(path[:-1], path[1:]))


def test_kmeans_assignments_are_nearest_and_centroids_are_means():
    rng = np.random.default_rng(12)
    pts = rng.normal(size=(150, 2))
    model = lt.kmeans_fit(pts, k=4, seed=2)
    ids = lt.assign(model.centroids, pts)
    for j in range(4):
        members = pts[ids == j]
        if members.shape[0]:
            assert np.max(np.abs(model.centroids[j] - members.mean(axis=0))) < 1e-10
    d2 = np.sum((pts[:, None] - model.centroids[None]) ** 2, axis=-1)
    assert np.array_equal(ids, d2.argmin(axis=1))


def test_kmeans_requires_k_distinct_points():
    pts = np.array([[0.0, 0.0]] * 10 + [[1.0, 1.0]] * 10)
    with pytest.raises(ValueError, match="distinct"):
        lt.kmeans_fit(pts, k=4, seed=0)


def test_kmeans_deterministic():
    rng = np.random.default_rng(13)
    pts = rng.normal(size=(100, 2))
    a = lt.kmeans_fit(pts, k=4, seed=5)
    b = lt.kmeans_fit(pts, k=4, seed=5)
    assert np.array_equal(a.centroids, b.centroids)


# --- morph -------------------------------------------------------------------------

def fake_decoder(lat):
    # deterministic "decoder": 8 points spread by the first two latent values
    base = np.linspace(0, 1, 8)[:, None] * np.ones(3)
    return base + lat[:2].sum(), np.repeat(np.arange(2), 4)


def test_morph_endpoints_and_spacing():
    latents, _, _ = blobs(seed=14)
    model = lt.pca_fit(latents)
    start, target = np.array([0.0, 1.0]), np.array([2.0, -1.0])
    traj = lt.morph(model, fake_decoder, start, target, steps=20)
    assert traj.embeddings.shape == (21, 2)
    assert np.array_equal(traj.embeddings[0], start)
    assert np.array_equal(traj.embeddings[-1], target)
    deltas = np.diff(traj.embeddings, axis=0)
    assert np.max(np.abs(deltas - deltas[0])) < 1e-12


def test_morph_stage0_cloud_equals_direct_decode():
    latents, _, _ = blobs(seed=15)
    model = lt.pca_fit(latents)
    start = np.array([0.3, -0.4])
    traj = lt.morph(model, fake_decoder, start, np.array([1.0, 1.0]), steps=5)
    direct, _ = fake_decoder(lt.pca_inverse(model, start))
    assert np.array_equal(traj.clouds[0], direct)


def test_morph_embeddings_collinear():
    latents, _, _ = blobs(seed=16)
    model = lt.pca_fit(latents)
    traj = lt.morph(model, fake_decoder, np.array([0.0, 0.0]),
                    np.array([3.0, 4.0]), steps=7)
    deltas = np.diff(traj.embeddings, axis=0)
    cross = deltas[:-1, 0] * deltas[1:, 1] - deltas[:-1, 1] * deltas[1:, 0]
    assert np.max(np.abs(cross)) < 1e-12


def test_morph_rejects_zero_steps():
    latents, _, _ = blobs(seed=17)
    model = lt.pca_fit(latents)
    with pytest.raises(ValueError, match="steps"):
        lt.morph(model, fake_decoder, np.zeros(2), np.ones(2), steps=0)


# --- splines --------------------------------------------------------------------------

def slice_group(xs, zs, layer=LayerLabel.RNFL, side=ANTERIOR):
    pts = np.column_stack([xs, np.zeros_like(xs), zs])
    return {(layer, side): pts}


def test_spline_reproduces_line_exactly():
    xs = np.linspace(0, 1, 10)
    zs = 2.0 * xs + 0.5
    curves = lt.fit_boundary_splines(slice_group(xs, zs), smoothing=0.0)
    samples = curves[(LayerLabel.RNFL, ANTERIOR)]
    assert np.max(np.abs(samples[:, 1] - (2.0 * samples[:, 0] + 0.5))) < 1e-9


def test_spline_interpolates_quadratic_at_knots():
    xs = np.linspace(-1, 1, 12)
    zs = xs ** 2
    curves = lt.fit_boundary_splines(slice_group(xs, zs), smoothing=0.0)
    samples = curves[(LayerLabel.RNFL, ANTERIOR)]
    for x, z in zip(xs, zs):
        j = int(np.argmin(np.abs(samples[:, 0] - x)))
        # re-evaluate exactly at the knot by local linear search on samples
        assert abs(lt._eval_natural_spline(xs, *(lt._natural_smoothing_spline(xs, zs, 0.0)),
                                           np.array([x]))[0] - z) < 1e-6


def test_spline_large_lambda_tends_to_regression_line():
    rng = np.random.default_rng(18)
    xs = np.sort(rng.uniform(0, 2, 30))
    zs = 1.5 * xs - 0.3 + rng.normal(0, 0.1, 30)
    curves = lt.fit_boundary_splines(slice_group(xs, zs), smoothing=1e9)
    samples = curves[(LayerLabel.RNFL, ANTERIOR)]
    # closed-form least-squares line oracle
    A = np.column_stack([xs, np.ones_like(xs)])
    coef, *_ = np.linalg.lstsq(A, zs, rcond=None)
    fit_slope = ((samples[-1, 1] - samples[0, 1])
                 / (samples[-1, 0] - samples[0, 0]))
    assert abs(fit_slope - coef[0]) < 1e-6
    assert np.max(np.abs(samples[:, 1] - (coef[0] * samples[:, 0] + coef[1]))) < 1e-6


def test_spline_returns_256_samples_spanning_range():
    xs = np.linspace(3, 7, 25)
    zs = np.sin(xs)
    curves = lt.fit_boundary_splines(slice_group(xs, zs), smoothing=1e-3)
    samples = curves[(LayerLabel.RNFL, ANTERIOR)]
    assert samples.shape == (256, 2)
    assert samples[0, 0] == 3.0 and samples[-1, 0] == 7.0


def test_spline_skips_small_groups_with_warning():
    xs = np.array([0.0, 0.0, 1.0, 2.0])   # only 3 distinct x
    zs = np.array([1.0, 1.0, 2.0, 3.0])
    with pytest.warns(UserWarning, match="skipped"):
        curves = lt.fit_boundary_splines(slice_group(xs, zs), smoothing=0.0)
    assert curves == {}


def test_anterior_cup_depth_measures_dip():
    xs = np.linspace(-1, 1, 40)
    dip = 0.6 * np.exp(-xs ** 2 / 0.05)
    curves = {
        (LayerLabel.RNFL, ANTERIOR): np.column_stack([xs, 1.0 + dip]),
        (LayerLabel.RNFL, POSTERIOR): np.column_stack([xs, 2.0 + dip]),
    }
    depth = lt.anterior_cup_depth(curves)
    assert abs(depth - 0.6) < 0.01


# --- exports ------------------------------------------------------------------------------

def test_embedding_csv_round_trip(tmp_path):
    points = [lt.EmbeddingPoint(0.1, -0.2, ClassLabel.G, "s1", 2),
              lt.EmbeddingPoint(1.5, 2.5, None, None, None)]
    path = tmp_path / "emb.csv"
    lt.export_embedding(points, path)
    back = lt.read_embedding(path)
    assert len(back) == 2
    assert back[0].class_label == ClassLabel.G and back[0].cluster_id == 2
    assert back[1].class_label is None and back[1].subject_id is None


def test_render_morph_emits_five_stage_files(tmp_path):
    latents, _, _ = blobs(seed=19, k=6)
    model = lt.pca_fit(latents)

    def decoder(lat):
        rng = np.random.default_rng(0)
        n = 64
        xs = np.tile(np.linspace(0, 1, 16), 4)
        ys = rng.normal(0, 0.001, n)
        zs = np.concatenate([np.full(16, 0.1), np.full(16, 0.2),
                             np.full(16, 0.3), np.full(16, 0.4)])
        zs = zs + 0.01 * lat[0]
        return np.column_stack([xs, ys, zs]), np.repeat(np.arange(4), 16)

    traj = lt.morph(model, decoder, np.zeros(2), np.array([1.0, 0.0]), steps=20)
    mapping = {0: LayerLabel.RNFL, 1: LayerLabel.ORL, 2: LayerLabel.SCLERA,
               3: LayerLabel.LC}
    svgs = lt.render_morph(traj, mapping, tmp_path, tol=0.05)
    assert len(svgs) == 5
    assert sorted(p.name for p in tmp_path.glob("*.svg")) == \
           ["stage-00.svg", "stage-05.svg", "stage-10.svg", "stage-15.svg",
            "stage-20.svg"]
    assert len(list(tmp_path.glob("*.csv"))) == 5
    svg_text = svgs[0].read_text()
    assert svg_text.count("<polyline") == 4
    first_line = svg_text.split('points="')[1].split('"')[0]
    assert len(first_line.split()) == 256


def test_class_cluster_agreement_perfect_and_shuffled():
    classes = np.repeat(np.arange(4), 25)
    clusters = (classes + 1) % 4   # a relabeling: still a perfect matching
    assert lt.class_cluster_agreement(classes, clusters) == 1.0
    rng = np.random.default_rng(20)
    noisy = clusters.copy()
    flip = rng.choice(100, size=10, replace=False)
    noisy[flip] = rng.integers(0, 4, size=10)
    assert lt.class_cluster_agreement(classes, noisy) >= 0.85
