import json

import numpy as np
import pytest

from onhpc.cli import dispatch


SMALL_CONFIG = {
    "schema": "onhcfg/1",
    "model": {
        "n_points": 64,
        "latent_dim": 8,
        "encoder_widths": [8, 16],
        "feature_transform": False,
        "n_patches": 4,
        "decoder_widths": [16],
        "classifier_widths": [8],
    },
    "train": {"batch": 4, "epochs": 2, "lr": 0.005},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.json"
    cfg.write_text(json.dumps(SMALL_CONFIG))
    data = root / "data"
    rc = dispatch(["synth", "--per-class", "6", "--seed", "3",
                   "--out-dir", str(data), "--points", "64", "--noise", "2"])
    assert rc == 0
    run = root / "run"
    rc = dispatch(["train", "--manifest", str(data / "manifest.csv"),
                   "--seed", "1", "--config", str(cfg), "--out-dir", str(run)])
    assert rc == 0
    return root, cfg, data, run


def test_no_arguments_is_usage_error(capsys):
    assert dispatch([]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand_exits_one(capsys):
    assert dispatch(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_exits_one(capsys):
    assert dispatch(["synth", "--nope", "1", "--out-dir", "x"]) == 1


def test_missing_manifest_is_data_error(tmp_path, capsys):
    rc = dispatch(["train", "--manifest", str(tmp_path / "none.csv"),
                   "--out-dir", str(tmp_path / "o")])
    assert rc == 2


def test_unknown_config_key_rejected(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"schema": "onhcfg/1", "bogus": {}}))
    rc = dispatch(["synth", "--per-class", "1", "--config", str(bad),
                   "--out-dir", str(tmp_path / "d")])
    assert rc == 2


def test_synth_writes_dataset_and_resolved_config(workspace):
    root, cfg, data, run = workspace
    assert (data / "manifest.csv").exists()
    assert (data / "phenotypes.json").exists()
    resolved = json.loads((data / "run-config.json").read_text())
    assert resolved["schema"] == "onhcfg/1"
    assert resolved["synth"]["per_class"] == 6
    assert resolved["seeds"]["synth"] == 3
    assert "tool_version" in resolved


def test_synth_rerun_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        rc = dispatch(["synth", "--per-class", "2", "--seed", "7",
                       "--out-dir", str(d), "--points", "64", "--noise", "5"])
        assert rc == 0
    fa = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    fb = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert fa == fb
    for rel in fa:
        assert (a / rel).read_bytes() == (b / rel).read_bytes()


def test_train_outputs_and_eval_cross_check(workspace, capsys):
    root, cfg, data, run = workspace
    assert (run / "checkpoint.ckpt").exists()
    assert (run / "train-log.csv").exists()
    metrics = json.loads((run / "metrics.json").read_text())
    out = root / "eval-metrics.json"
    rc = dispatch(["eval", "--checkpoint", str(run / "checkpoint.ckpt"),
                   "--manifest", str(data / "manifest.csv"),
                   "--out", str(out)])
    assert rc == 0
    again = json.loads(out.read_text())
    assert again == metrics


def test_embed_cluster_morph_render_pipeline(workspace):
    root, cfg, data, run = workspace
    emb = root / "embedding.csv"
    rc = dispatch(["embed", "--checkpoint", str(run / "checkpoint.ckpt"),
                   "--manifest", str(data / "manifest.csv"), "--out", str(emb)])
    assert rc == 0
    assert emb.exists() and (root / "embedding.pca.json").exists()
    rows = emb.read_text().splitlines()
    assert rows[0] == "id,pd1,pd2,class,cluster"
    assert len(rows) == 1 + 24

    clustered = root / "clustered.csv"
    rc = dispatch(["cluster", "--embedding", str(emb), "--seed", "2",
                   "--out", str(clustered)])
    assert rc == 0
    cl_doc = json.loads((root / "clustered.clusters.json").read_text())
    assert len(cl_doc["centroids"]) == 4
    assert set(cl_doc["class_to_cluster"]) == {"H", "HM", "G", "HMG"}

    morph_dir = root / "morph"
    rc = dispatch(["morph", "--checkpoint", str(run / "checkpoint.ckpt"),
                   "--pca", str(root / "embedding.pca.json"),
                   "--clusters", str(root / "clustered.clusters.json"),
                   "--manifest", str(data / "manifest.csv"),
                   "--from-centroid", "H", "--to-centroid", "G",
                   "--steps", "20", "--out-dir", str(morph_dir)])
    assert rc == 0
    svgs = sorted(p.name for p in morph_dir.glob("*.svg"))
    assert svgs == ["stage-00.svg", "stage-05.svg", "stage-10.svg",
                    "stage-15.svg", "stage-20.svg"]
    traj = (morph_dir / "trajectory.csv").read_text().splitlines()
    assert len(traj) == 22


def test_render_slice_on_synthetic_cloud(workspace):
    root, cfg, data, run = workspace
    manifest = (data / "manifest.csv").read_text().splitlines()[1]
    cloud_rel = manifest.split(",")[0]
    out_dir = root / "slices"
    # 64-point clouds are sparse; widen the slice so each group can be fitted
    rc = dispatch(["render-slice", "--cloud", str(data / cloud_rel),
                   "--smoothing", "0.0001", "--tol", "0.5",
                   "--out-dir", str(out_dir)])
    assert rc == 0
    assert list(out_dir.glob("*-slice.svg"))
    assert list(out_dir.glob("*-slice.csv"))


def test_morph_from_subject(workspace):
    root, cfg, data, run = workspace
    out_dir = root / "morph-subject"
    rc = dispatch(["morph", "--checkpoint", str(run / "checkpoint.ckpt"),
                   "--pca", str(root / "embedding.pca.json"),
                   "--clusters", str(root / "clustered.clusters.json"),
                   "--manifest", str(data / "manifest.csv"),
                   "--from-subject", "SYN-H-0000", "--to-centroid", "HMG",
                   "--steps", "4", "--out-dir", str(out_dir)])
    assert rc == 0
    assert sorted(p.name for p in out_dir.glob("*.svg")) == \
           ["stage-00.svg", "stage-01.svg", "stage-02.svg", "stage-03.svg",
            "stage-04.svg"]


def test_extract_command(tmp_path):
    import numpy as np
    from onhpc import extraction as ex
    from onhpc.extraction import BACKGROUND, SegmentedVolume

    labels = np.full((5, 30, 120), BACKGROUND, dtype=np.uint8)
    labels[:, :, 20:40] = 0
    labels[:, :, 45:70] = 2
    labels[:, :, 75:90] = 5
    labels[:, :, 95:110] = 6
    vol = SegmentedVolume(labels)
    vol_path = tmp_path / "v.segv"
    ex.write_volume(vol, vol_path)
    out = tmp_path / "cloud.onhpc"
    rc = dispatch(["extract", "--volume", str(vol_path),
                   "--layers", "rnfl,orl,sclera,lc", "--points", "128",
                   "--seed", "4", "--out", str(out)])
    assert rc == 0
    from onhpc.pointcloud import read_onhpc
    cloud = read_onhpc(out)
    assert len(cloud) == 128
    assert (tmp_path / "cloud.run-config.json").exists()


def test_crossval_command(workspace):
    root, cfg, data, run = workspace
    out_dir = root / "cv"
    rc = dispatch(["crossval", "--manifest", str(data / "manifest.csv"),
                   "--seed", "1", "--config", str(cfg), "--folds", "3",
                   "--out-dir", str(out_dir)])
    assert rc == 0
    summary = json.loads((out_dir / "crossval.json").read_text())
    assert summary["folds"] == 3
    assert len(summary["per_fold"]) == 3


def test_ablate_layers_command(workspace):
    root, cfg, data, run = workspace
    out_dir = root / "ablate"
    rc = dispatch(["ablate-layers", "--manifest", str(data / "manifest.csv"),
                   "--seed", "1", "--config", str(cfg),
                   "--out-dir", str(out_dir)])
    assert rc == 0
    lines = (out_dir / "ablation.csv").read_text().splitlines()
    assert lines[0] == "grouping,micro_auc,mean_chamfer,reference_auc"
    assert len(lines) == 6
    assert lines[1].startswith("all,")


def test_latent_sweep_command_small(workspace, tmp_path):
    root, cfg, data, run = workspace
    # sweep with the small model; k values still the four swept sizes
    out_dir = root / "sweep"
    rc = dispatch(["latent-sweep", "--manifest", str(data / "manifest.csv"),
                   "--seed", "1", "--config", str(cfg),
                   "--out-dir", str(out_dir)])
    assert rc == 0
    lines = (out_dir / "latent-sweep.csv").read_text().splitlines()
    assert len(lines) == 5
    assert [l.split(",")[0] for l in lines[1:]] == ["128", "256", "512", "1024"]
    for k in (128, 256, 512, 1024):
        assert (out_dir / f"checkpoint-k{k}.ckpt").exists()


def test_train_rerun_fully_reproducible(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(SMALL_CONFIG))
    data = tmp_path / "d"
    # 5 subjects per class: stratification leaves val and test nonempty
    dispatch(["synth", "--per-class", "5", "--seed", "5", "--out-dir", str(data),
              "--points", "64", "--noise", "2"])
    outs = []
    for name in ("r1", "r2"):
        rd = tmp_path / name
        rc = dispatch(["train", "--manifest", str(data / "manifest.csv"),
                       "--seed", "9", "--config", str(cfg), "--out-dir", str(rd)])
        assert rc == 0
        outs.append(rd)
    for fname in ("checkpoint.ckpt", "train-log.csv", "metrics.json",
                  "run-config.json"):
        assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes()
