import subprocess
import sys

import numpy as np
import pytest

from ctrscan import cli, dataio, pipeline
from ctrscan.metrics import ScoreReport

SYNTH = {
    "n_datasets": 3,
    "spots_per_dataset": 36,
    "grid_side": 6,
    "d_img": 8,
    "n_genes": 16,
    "seed": 11,
}
RUN = {
    "epochs_align": 3,
    "epochs_fuse": 3,
    "epochs_cls": 3,
    "batch_size": 16,
    "lr": 3e-4,
    "heads": 2,
    "d_model": 16,
    "latent_dim": 4,
    "cls_hidden": 8,
    "k": 3,
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    dataio.write_kv(root / "synth.txt", SYNTH)
    dataio.write_kv(root / "run.txt", RUN)
    assert cli.main(["synth", "--config", str(root / "synth.txt"), "--out", str(root / "cohort")]) == 0
    sources = [str(root / "cohort" / f"synth{i:02d}") for i in range(2)]
    args = ["train", "--config", str(root / "run.txt"), "--sources", *sources, "--out", str(root / "model")]
    assert cli.main(args + ["--deterministic"]) == 0
    return root


def test_synth_layout_and_refusal(workspace, capsys):
    cohort = workspace / "cohort"
    manifest = dataio.read_kv(cohort / "manifest.txt")
    assert manifest["datasets"] == "synth00,synth01,synth02"
    assert sorted(p.name for p in cohort.iterdir() if p.is_dir()) == ["synth00", "synth01", "synth02"]
    code = cli.main(["synth", "--config", str(workspace / "synth.txt"), "--out", str(cohort)])
    assert code == cli.EXIT_USAGE
    assert "not empty" in capsys.readouterr().err


def test_synth_is_byte_reproducible(workspace, tmp_path):
    assert cli.main(["synth", "--config", str(workspace / "synth.txt"), "--out", str(tmp_path / "again")]) == 0
    for name in ("image_features.mat", "gene_counts.mat", "labels.mat", "meta.txt"):
        a = (workspace / "cohort" / "synth01" / name).read_bytes()
        b = (tmp_path / "again" / "synth01" / name).read_bytes()
        assert a == b, name


def test_synth_rejects_unknown_key(tmp_path, capsys):
    (tmp_path / "bad.txt").write_text("spots=10\n")
    assert cli.main(["synth", "--config", str(tmp_path / "bad.txt"), "--out", str(tmp_path / "o")]) == 2
    assert "spots" in capsys.readouterr().err


def test_train_outputs(workspace):
    meta, arrays = dataio_checkpoint(workspace / "model")
    prefixes = {name.split("/")[0] for name in arrays}
    assert prefixes == {"align", "vrbca", "cls"}
    assert meta["stages"] == "align,fuse,cls"
    rows = (workspace / "model" / "training_log.tsv").read_text().splitlines()
    assert rows[0] == "stage\tepoch\tloss"
    stages = [r.split("\t")[0] for r in rows[1:]]
    assert stages == ["align"] * 3 + ["fuse"] * 3 + ["cls"] * 3


def dataio_checkpoint(model_dir):
    from ctrscan.diffcore import read_checkpoint

    return read_checkpoint(model_dir / "model.ckpt")


def test_train_is_deterministic(workspace, tmp_path):
    sources = [str(workspace / "cohort" / f"synth{i:02d}") for i in range(2)]
    args = ["train", "--config", str(workspace / "run.txt"), "--sources", *sources, "--deterministic"]
    assert cli.main(args + ["--out", str(tmp_path / "m2")]) == 0
    a = (workspace / "model" / "model.ckpt").read_bytes()
    b = (tmp_path / "m2" / "model.ckpt").read_bytes()
    assert a == b


def test_train_stage_resume_and_missing_prerequisite(workspace, tmp_path, capsys):
    sources = [str(workspace / "cohort" / "synth00")]
    base = ["train", "--config", str(workspace / "run.txt"), "--sources", *sources]
    assert cli.main(base + ["--stage", "fuse", "--out", str(tmp_path / "empty")]) == cli.EXIT_NUMERIC
    assert "checkpoint" in capsys.readouterr().err
    assert cli.main(base + ["--stage", "align", "--out", str(tmp_path / "m")]) == 0
    assert pipeline.load_model(tmp_path / "m").stages == ("align",)
    assert cli.main(base + ["--stage", "cls", "--out", str(tmp_path / "m")]) == cli.EXIT_NUMERIC
    assert cli.main(base + ["--stage", "fuse", "--out", str(tmp_path / "m")]) == 0
    assert cli.main(base + ["--stage", "cls", "--out", str(tmp_path / "m")]) == 0
    assert pipeline.load_model(tmp_path / "m").stages == ("align", "fuse", "cls")


def test_dump_config_shows_defaults(capsys, tmp_path):
    assert cli.main(["train", "--out", str(tmp_path / "m"), "--dump-config"]) == 0
    lines = dict(line.split("=", 1) for line in capsys.readouterr().out.splitlines())
    assert lines["alpha"] == "0.5" and lines["beta"] == "0.5" and lines["gamma"] == "0.1"
    assert lines["k"] == "6" and lines["lr"] == "1e-05"
    assert (lines["epochs_align"], lines["epochs_fuse"], lines["epochs_cls"]) == ("100", "50", "50")
    assert cli.main(["train", "--out", str(tmp_path / "m"), "--ablate", "bca", "--seed", "9", "--dump-config"]) == 0
    lines = dict(line.split("=", 1) for line in capsys.readouterr().out.splitlines())
    assert lines["ablate"] == "bca" and lines["seed"] == "9"


def test_infer_unlabelled_target(workspace, tmp_path, capsys):
    target = dataio.load_dataset(workspace / "cohort" / "synth02")
    unlabeled = dataio.SpotDataset(
        target.image_features, target.gene_counts, target.coords, None, gene_names=target.gene_names
    )
    dataio.save_dataset(unlabeled, tmp_path / "u")
    out = tmp_path / "scores.tsv"
    assert cli.main(["infer", "--model", str(workspace / "model"), "--data", str(tmp_path / "u"), "--out", str(out)]) == 0
    table = pipeline.read_scores(out)
    assert table["score"].size == target.n_spots
    side = dataio.read_kv(cli.threshold_path(out))
    theta = float(side["theta"])
    assert np.array_equal(table["call"], (table["score"] >= theta).astype(int))
    assert "theta=" in capsys.readouterr().out


def test_infer_gene_mismatch_is_validation_error(workspace, tmp_path, capsys):
    target = dataio.load_dataset(workspace / "cohort" / "synth02")
    renamed = dataio.SpotDataset(
        target.image_features, target.gene_counts, target.coords, target.labels,
        gene_names=tuple(f"other{i}" for i in range(target.n_genes)),
    )
    dataio.save_dataset(renamed, tmp_path / "r")
    code = cli.main(["infer", "--model", str(workspace / "model"), "--data", str(tmp_path / "r"), "--out", str(tmp_path / "s.tsv")])
    assert code == cli.EXIT_VALIDATION
    assert "missing" in capsys.readouterr().err


def test_infer_then_eval(workspace, tmp_path):
    data = str(workspace / "cohort" / "synth02")
    scores = tmp_path / "scores.tsv"
    assert cli.main(["infer", "--model", str(workspace / "model"), "--data", data, "--out", str(scores)]) == 0
    assert cli.main(["eval", "--scores", str(scores), "--data", data, "--out", str(tmp_path / "report.txt")]) == 0
    report = ScoreReport.load(tmp_path / "report.txt")
    assert report.n_spots == 36 and report.dataset_id == "synth02"
    assert all(0.0 <= getattr(report, m) <= 1.0 for m in ("auc", "ap", "f1", "ks"))
    assert report.theta is not None and report.gmm_means is not None
    # rerunning the whole chain gives a byte-identical report
    scores2 = tmp_path / "again.tsv"
    cli.main(["infer", "--model", str(workspace / "model"), "--data", data, "--out", str(scores2)])
    cli.main(["eval", "--scores", str(scores2), "--data", data, "--out", str(tmp_path / "report2.txt")])
    strip = lambda p: [l for l in p.read_text().splitlines() if not l.startswith("scores_path=")]
    assert strip(tmp_path / "report.txt") == strip(tmp_path / "report2.txt")


def write_scores_fixture(path, scores, coords):
    lines = ["spot_index\tx\ty\tscore\tcall\tthreshold_method"]
    for i, s in enumerate(scores):
        lines.append(f"{i}\t{float(coords[i][0])}\t{float(coords[i][1])}\t{float(s)!r}\t{int(s >= 0.5)}\tmidpoint-fallback")
    path.write_text("\n".join(lines) + "\n")


def labelled_fixture(tmp_path, n=1000, seed=0):
    rng = np.random.default_rng(seed)
    labels = (rng.random(n) < 0.4).astype(int)
    ds = dataio.SpotDataset(rng.normal(size=(n, 2)), np.ones((n, 3)), rng.normal(size=(n, 2)), labels)
    dataio.save_dataset(ds, tmp_path / "lab")
    return ds


def test_eval_perfect_and_shuffled(tmp_path):
    ds = labelled_fixture(tmp_path)
    write_scores_fixture(tmp_path / "perfect.tsv", ds.labels * 0.8 + 0.1, ds.coords)
    assert cli.main(["eval", "--scores", str(tmp_path / "perfect.tsv"), "--data", str(tmp_path / "lab"), "--out", str(tmp_path / "p.txt")]) == 0
    rep = ScoreReport.load(tmp_path / "p.txt")
    assert (rep.auc, rep.ap, rep.f1, rep.ks) == (1.0, 1.0, 1.0, 1.0)
    shuffled = np.random.default_rng(5).random(ds.n_spots)
    write_scores_fixture(tmp_path / "shuf.tsv", shuffled, ds.coords)
    assert cli.main(["eval", "--scores", str(tmp_path / "shuf.tsv"), "--data", str(tmp_path / "lab"), "--out", str(tmp_path / "s.txt")]) == 0
    assert abs(ScoreReport.load(tmp_path / "s.txt").auc - 0.5) < 0.05


def test_eval_missing_labels_and_single_class(tmp_path):
    rng = np.random.default_rng(1)
    ds = dataio.SpotDataset(rng.normal(size=(5, 2)), np.ones((5, 3)), rng.normal(size=(5, 2)), None)
    dataio.save_dataset(ds, tmp_path / "nolab")
    write_scores_fixture(tmp_path / "s.tsv", rng.random(5), ds.coords)
    assert cli.main(["eval", "--scores", str(tmp_path / "s.tsv"), "--data", str(tmp_path / "nolab"), "--out", str(tmp_path / "r.txt")]) == cli.EXIT_VALIDATION
    one = dataio.SpotDataset(ds.image_features, ds.gene_counts, ds.coords, np.zeros(5, dtype=int))
    dataio.save_dataset(one, tmp_path / "one")
    code = cli.main(["eval", "--scores", str(tmp_path / "s.tsv"), "--data", str(tmp_path / "one"), "--out", str(tmp_path / "r.txt")])
    assert code == cli.EXIT_VALIDATION
    rep = ScoreReport.load(tmp_path / "r.txt")
    assert rep.auc is None and "auc" in rep.reasons


def test_usage_errors_exit_2():
    proc = subprocess.run([sys.executable, "-m", "ctrscan", "train", "--stage", "bogus", "--out", "x"], capture_output=True)
    assert proc.returncode == 2
    proc = subprocess.run([sys.executable, "-m", "ctrscan"], capture_output=True)
    assert proc.returncode == 2
