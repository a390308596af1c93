import numpy as np
import pytest

from onhpc import extraction as ex
from onhpc.extraction import BACKGROUND, SegmentedVolume
from onhpc.pointcloud import ANTERIOR, POSTERIOR, LayerLabel


def boundary_oracle(mask):
    """Mask minus 4-connected erosion, computed by explicit neighbor shifts.

    Out-of-image neighbors count as inside, matching the production rule that
    the image border alone never creates a boundary.
    """
    h, w = mask.shape
    out = np.zeros_like(mask)
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ni, nj = i + di, j + dj
                if 0 <= ni < h and 0 <= nj < w and not mask[ni, nj]:
                    out[i, j] = True
                    break
    return out


def band_volume(rows=(100, 110), layer=LayerLabel.RNFL, shape=(5, 20, 200)):
    labels = np.full(shape, BACKGROUND, dtype=np.uint8)
    labels[:, :, rows[0]:rows[1] + 1] = int(layer)
    return SegmentedVolume(labels)


# --- detect_boundaries -------------------------------------------------------

def test_band_boundaries_at_exact_rows_with_sides():
    vol = band_volume()
    px = ex.detect_boundaries(vol.bscan(0), LayerLabel.RNFL)
    depths = sorted(set(d for d, a, s in px))
    assert depths == [100, 110]
    for d, a, s in px:
        assert s == (ANTERIOR if d == 100 else POSTERIOR)
    # one anterior + one posterior pixel per A-scan column
    assert len(px) == 2 * vol.n_ascans


def test_empty_mask_gives_empty_set():
    grid = np.full((30, 30), BACKGROUND, dtype=np.uint8)
    assert ex.detect_boundaries(grid, LayerLabel.LC) == []


def test_random_blob_matches_morphological_oracle():
    rng = np.random.default_rng(0)
    for trial in range(5):
        grid = np.full((40, 50), BACKGROUND, dtype=np.uint8)
        # blobby mask: union of random rectangles
        for _ in range(4):
            r0, c0 = rng.integers(0, 30), rng.integers(0, 40)
            grid[r0:r0 + rng.integers(3, 10), c0:c0 + rng.integers(3, 10)] = 0
        px = ex.detect_boundaries(grid, LayerLabel.RNFL)
        got = {(d, a) for d, a, s in px}
        want = {(int(i), int(j)) for i, j in np.argwhere(boundary_oracle(grid == 0))}
        assert got == want


def test_canny_is_a_subset_of_morph_on_bands_and_finds_both_edges():
    # the edge-filter path is approximate (non-maximum suppression ties); it
    # must never flag interior pixels and must still land on both band edges
    vol = band_volume()
    morph = {(d, x) for d, x, s in ex.detect_boundaries(vol.bscan(0), LayerLabel.RNFL)}
    canny = ex.detect_boundaries(vol.bscan(0), LayerLabel.RNFL, method="canny")
    assert canny, "canny found nothing on a clean band"
    assert {(d, x) for d, x, s in canny} <= morph
    assert {d for d, x, s in canny} == {100, 110}


def test_detect_boundaries_rejects_tiny_grids():
    with pytest.raises(ValueError, match="3x3"):
        ex.detect_boundaries(np.zeros((2, 5), dtype=np.uint8), LayerLabel.RNFL)


# --- derive_layer_boundaries ----------------------------------------------------

def test_adjacent_bands_share_a_boundary_row():
    labels = np.full((3, 10, 100), BACKGROUND, dtype=np.uint8)
    labels[:, :, 40:50] = int(LayerLabel.RPE)       # rows 40..49
    labels[:, :, 50:70] = int(LayerLabel.CHOROID)   # rows 50..69
    vol = SegmentedVolume(labels)
    rpe = ex.derive_layer_boundaries(vol, LayerLabel.RPE)
    cho = ex.derive_layer_boundaries(vol, LayerLabel.CHOROID)
    rpe_post = {(a,) for d, a, s in rpe[0] if s == POSTERIOR and d == 49}
    cho_ant = {(a,) for d, a, s in cho[0] if s == ANTERIOR and d == 50}
    assert len(rpe_post) == 10 and len(cho_ant) == 10


def test_absent_layer_errors():
    vol = band_volume()
    with pytest.raises(ValueError, match="absent"):
        ex.derive_layer_boundaries(vol, LayerLabel.LC)


def test_layered_volume_matches_column_scan_oracle():
    rng = np.random.default_rng(1)
    labels = np.full((2, 15, 80), BACKGROUND, dtype=np.uint8)
    # per-column contiguous band with jittered edges
    top = 20 + rng.integers(0, 6, size=(2, 15))
    bot = 50 + rng.integers(0, 6, size=(2, 15))
    for b in range(2):
        for a in range(15):
            labels[b, a, top[b, a]:bot[b, a] + 1] = int(LayerLabel.SCLERA)
    vol = SegmentedVolume(labels)
    per_bscan = ex.derive_layer_boundaries(vol, LayerLabel.SCLERA)
    for b in range(2):
        for a in range(15):
            col = labels[b, a] == int(LayerLabel.SCLERA)
            first, last = int(np.argmax(col)), int(len(col) - 1 - np.argmax(col[::-1]))
            depths = sorted(d for d, aa, s in per_bscan[b] if aa == a)
            # interior columns of a smooth band expose exactly first/last rows
            assert depths[0] == first and depths[-1] == last


# --- extract_cloud ------------------------------------------------------------------

def test_flat_slab_z_values_are_exact_conversions():
    vol = band_volume(rows=(100, 110))
    cloud = ex.extract_cloud(vol, {LayerLabel.RNFL}, target_points=64, seed=0)
    allowed = {100 * 3.87e-3, 110 * 3.87e-3}
    assert all(min(abs(z - v) for v in allowed) < 1e-15 for z in cloud.xyz[:, 2])


def test_default_layer_set_excludes_inferable_layers():
    labels = np.full((4, 30, 120), BACKGROUND, dtype=np.uint8)
    bands = [(LayerLabel.RNFL, 10, 20), (LayerLabel.GCL_IPL, 21, 30),
             (LayerLabel.ORL, 31, 45), (LayerLabel.RPE, 46, 50),
             (LayerLabel.CHOROID, 51, 65), (LayerLabel.SCLERA, 66, 80),
             (LayerLabel.LC, 81, 95)]
    for layer, lo, hi in bands:
        labels[:, :, lo:hi + 1] = int(layer)
    vol = SegmentedVolume(labels)
    cloud = ex.extract_cloud(vol, target_points=256, seed=1)
    assert set(np.unique(cloud.layers)) <= {0, 2, 5, 6}


def test_downsampled_to_exact_target():
    vol = band_volume(shape=(10, 40, 200))
    cloud = ex.extract_cloud(vol, {LayerLabel.RNFL}, target_points=128, seed=2)
    assert len(cloud) == 128


def test_keeps_all_and_warns_when_pool_too_small():
    vol = band_volume(rows=(10, 20), shape=(3, 5, 50))
    with pytest.warns(UserWarning, match="keeping all"):
        cloud = ex.extract_cloud(vol, {LayerLabel.RNFL}, target_points=4096, seed=0)
    assert len(cloud) == 2 * 3 * 5


def test_no_boundaries_is_an_error():
    labels = np.full((3, 5, 50), BACKGROUND, dtype=np.uint8)
    vol = SegmentedVolume(labels)
    with pytest.raises(ValueError, match="no boundary points"):
        ex.extract_cloud(vol, {LayerLabel.RNFL}, target_points=10, seed=0)


def test_unit_conversion_round_trips_to_indices():
    vol = band_volume(shape=(7, 11, 150))
    cloud = ex.extract_cloud(vol, {LayerLabel.RNFL}, target_points=64, seed=3)
    dy, dx, dz = (s / 1000.0 for s in vol.spacing_um)
    for x, y, z in cloud.xyz:
        assert abs(round(x / dx) * dx - x) < 1e-12
        assert abs(round(y / dy) * dy - y) < 1e-12
        assert abs(round(z / dz) * dz - z) < 1e-12


def test_every_point_sits_on_a_true_boundary():
    rng = np.random.default_rng(2)
    labels = np.full((3, 20, 100), BACKGROUND, dtype=np.uint8)
    top = 30 + rng.integers(0, 8, size=(3, 20))
    for b in range(3):
        for a in range(20):
            labels[b, a, top[b, a]:top[b, a] + 15] = int(LayerLabel.ORL)
    vol = SegmentedVolume(labels)
    cloud = ex.extract_cloud(vol, {LayerLabel.ORL}, target_points=100, seed=4)
    dy, dx, dz = (s / 1000.0 for s in vol.spacing_um)
    for (x, y, z), layer in zip(cloud.xyz, cloud.layers):
        b, a, d = round(y / dy), round(x / dx), round(z / dz)
        assert labels[b, a, d] == layer
        # some in-plane 4-neighbor must carry a different label
        neighbors = []
        for da, dd in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            na, nd = a + da, d + dd
            if 0 <= na < labels.shape[1] and 0 <= nd < labels.shape[2]:
                neighbors.append(labels[b, na, nd])
        assert any(v != layer for v in neighbors)


def test_extraction_deterministic():
    vol = band_volume(shape=(6, 25, 150))
    a = ex.extract_cloud(vol, {LayerLabel.RNFL}, target_points=80, seed=9)
    b = ex.extract_cloud(vol, {LayerLabel.RNFL}, target_points=80, seed=9)
    assert np.array_equal(a.xyz, b.xyz) and np.array_equal(a.layers, b.layers)


# --- SegmentedVolume + SEGV1 ---------------------------------------------------------

def test_volume_rejects_bad_labels_and_spacing():
    with pytest.raises(ValueError, match="label"):
        SegmentedVolume(np.full((2, 2, 2), 99, dtype=np.uint8))
    with pytest.raises(ValueError, match="spacing"):
        SegmentedVolume(np.zeros((2, 2, 2), dtype=np.uint8), (0.0, 1.0, 1.0))


def test_segv_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    labels = rng.choice([0, 2, 5, BACKGROUND], size=(4, 6, 8)).astype(np.uint8)
    vol = SegmentedVolume(labels, (35.1, 11.5, 3.87))
    path = tmp_path / "v.segv"
    ex.write_volume(vol, path)
    back = ex.read_volume(path)
    assert np.array_equal(back.labels, vol.labels)
    assert back.spacing_um == vol.spacing_um


def test_segv_rejects_truncated_file(tmp_path):
    vol = band_volume(shape=(3, 4, 10))
    path = tmp_path / "v.segv"
    ex.write_volume(vol, path)
    data = path.read_bytes()
    path.write_bytes(data[:-5])
    with pytest.raises(ValueError, match="voxels"):
        ex.read_volume(path)
