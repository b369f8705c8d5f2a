from pathlib import Path

import numpy as np
import pytest

from dsin import plotting
from dsin.cli import main
from dsin.data import load_manifest
from dsin.model import DSINModel, model_config_for
from dsin.training import load_checkpoint

SYNTH = [
    "--set", "n_labels=4",
    "--set", "correlations=0-1:0.7",
    "--set", "positive_ratio=0.35",
    "--set", "subjects=4",
    "--set", "samples_per_subject=24",
    "--set", "face_size=32",
    "--set", "patch_size=8",
    "--set", "channels=1",
    "--set", "include_face=false",
]  # fmt: skip

TRAIN = [
    "--set", "conv_channels=2,3",
    "--set", "extra_channels=2",
    "--set", "fc_hidden=6",
    "--set", "fusion_hidden=4",
    "--set", "max_epochs=2",
    "--set", "patience=2",
    "--set", "batch_size=16",
    "--set", "lr=0.01",
    "--set", "folds=2",
    "--set", "fold_only=0",
    "--T", "2",
]  # fmt: skip


def tree(root: Path, skip=("config.txt",)) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file() and p.name not in skip}


def read_rows(path: Path) -> list:
    return [line.split("\t") for line in path.read_text().splitlines()]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "ds"
    assert main(["synth", "--out", str(out), *SYNTH]) == 0
    return out


@pytest.fixture(scope="module")
def run_dir(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "run"
    assert main(["train", "--data", str(data_dir), "--out", str(out), *TRAIN]) == 0
    return out


# synth ------------------------------------------------------------------------------
def test_synth_deterministic_under_output_root(tmp_path, monkeypatch):
    for root in ("a", "b"):
        monkeypatch.setenv("DSIN_OUTPUT_ROOT", str(tmp_path / root))
        assert main(["synth", "--out", "ds", *SYNTH]) == 0
    a, b = tree(tmp_path / "a" / "ds", skip=()), tree(tmp_path / "b" / "ds", skip=())
    assert a and a == b


def test_synth_missing_key(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "x"), "--set", "subjects=3"]) == 2
    assert "n_labels" in capsys.readouterr().err


def test_synth_unknown_key(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "x"), *SYNTH, "--set", "colour=red"]) == 2
    assert "colour" in capsys.readouterr().err


def test_synth_invalid_spec(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "x"), *SYNTH, "--set", "correlations=0-1:1.5"]) == 2


def test_synth_perfect_correlation(tmp_path):
    out = tmp_path / "pc"
    args = ["--set", "n_labels=2", "--set", "correlations=0-1:1.0", "--set", "positive_ratio=0.4"]
    assert main(["synth", "--out", str(out), *SYNTH, *args]) == 0
    ds = load_manifest(out)
    assert ds.n_labels == 2 and (ds.labels[:, 0] == ds.labels[:, 1]).all()


def test_synth_config_file(tmp_path):
    cfg = tmp_path / "synth.cfg"
    cfg.write_text("# tiny\nn_labels = 3\nsubjects = 3\nsamples_per_subject = 5\nface_size = 32\npatch_size = 8\n")
    out = tmp_path / "fromfile"
    assert main(["synth", "--config", str(cfg), "--out", str(out), "--set", "subjects=4"]) == 0
    ds = load_manifest(out)
    assert len(set(ds.subjects)) == 4 and ds.n_labels == 3
    assert "subjects = 4" in (out / "config.txt").read_text()


# train ------------------------------------------------------------------------------
def test_train_outputs(run_dir):
    assert (run_dir / "config.txt").exists() and (run_dir / "folds.tsv").exists()
    fold = run_dir / "fold0"
    assert (fold / "checkpoint.bin").exists()
    labels = [r[0] for r in read_rows(fold / "history_summary.tsv")[1:]]
    assert labels == [f"stage1_stream{i}" for i in range(5)] + ["stage2", "stage3", "stage4", "stage5"]
    assert not (run_dir / "fold1").exists()
    ck = load_checkpoint(fold / "checkpoint.bin")
    assert ck.header["meta"]["fold"] == 0 and ck.header["stage"] == 5


def test_train_missing_manifest(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "r"), *TRAIN]) == 3


def test_train_stage_inconsistency(data_dir, tmp_path, capsys):
    assert main(["train", "--data", str(data_dir), "--out", str(tmp_path / "r"), *TRAIN, "--stages", "4,5"]) == 2
    assert "stage 4" in capsys.readouterr().err


def test_train_bad_stage_list(data_dir, tmp_path):
    assert main(["train", "--data", str(data_dir), "--out", str(tmp_path / "r"), *TRAIN, "--stages", "3,1"]) == 2


def test_train_stage1_only_keeps_init(data_dir, tmp_path):
    out = tmp_path / "s1"
    assert main(["train", "--data", str(data_dir), "--out", str(out), *TRAIN, "--stages", "1", "--seed", "4"]) == 0
    ck = load_checkpoint(out / "fold0" / "checkpoint.bin")
    ds = load_manifest(data_dir)
    init = DSINModel(
        model_config_for(ds, channels=(2, 3), extra_channels=(2,), hidden=6, fusion_hidden=4, T=2, seed=4)
    )
    for block in ("phi", "omega"):
        a, b = ck.model.block_tensors(block), init.block_tensors(block)
        assert all(np.array_equal(a[k].data, b[k].data) for k in b)
    assert not all(np.array_equal(ck.model.block_tensors("pi")[k].data, t.data) for k, t in init.block_tensors("pi").items())


# eval -------------------------------------------------------------------------------
@pytest.fixture(scope="module")
def eval_dir(run_dir, data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("eval") / "ev"
    argv = ["eval", "--data", str(data_dir), "--run", str(run_dir), "--out", str(out), "--tune-thresholds", "--trace"]
    assert main(argv) == 0
    return out


def test_eval_report_rows(eval_dir):
    fold = eval_dir / "fold0"
    heads = [f"patch{i}" for i in range(5)] + ["fusion", "si"]
    for head in heads:
        rows = read_rows(fold / f"report_{head}.tsv")
        assert len(rows) == 1 + 4 + 1 and rows[-1][0] == "macro"
        assert (fold / f"report_{head}.json").exists() and (fold / f"sweep_{head}.tsv").exists()
    summary = read_rows(eval_dir / "summary.tsv")
    assert summary[0] == ["head", "fold0", "mean"]
    assert [r[0] for r in summary[1:]] == heads + ["fusion_tuned", "si_tuned"]


def test_eval_tuning_never_hurts_validation(eval_dir):
    for head, base, tuned in read_rows(eval_dir / "fold0" / "validation_tuning.tsv")[1:]:
        assert float(tuned) >= float(base)


def test_eval_deterministic(run_dir, data_dir, eval_dir, tmp_path):
    out = tmp_path / "again"
    argv = ["eval", "--data", str(data_dir), "--run", str(run_dir), "--out", str(out), "--tune-thresholds", "--trace"]
    assert main(argv) == 0
    assert tree(out) == tree(eval_dir)


def test_eval_run_xor_checkpoint(data_dir, tmp_path):
    assert main(["eval", "--data", str(data_dir), "--out", str(tmp_path / "e")]) == 2


def test_eval_n_mismatch(run_dir, tmp_path, capsys):
    other = tmp_path / "n3"
    assert main(["synth", "--out", str(other), *SYNTH, "--set", "n_labels=3"]) == 0
    ck = run_dir / "fold0" / "checkpoint.bin"
    assert main(["eval", "--data", str(other), "--checkpoint", str(ck), "--out", str(tmp_path / "e")]) == 2
    assert "expected N=3" in capsys.readouterr().err


def test_eval_corrupt_checkpoint(data_dir, tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"DSINCKPT" + b"\0" * 64)
    assert main(["eval", "--data", str(data_dir), "--checkpoint", str(bad), "--out", str(tmp_path / "e")]) == 3


def test_T0_si_equals_fusion(run_dir, data_dir, tmp_path):
    ck = run_dir / "fold0" / "checkpoint.bin"
    out = tmp_path / "t0"
    assert main(["eval", "--data", str(data_dir), "--checkpoint", str(ck), "--out", str(out), "--T", "0"]) == 0
    assert (out / "report_si.tsv").read_text() == (out / "report_fusion.tsv").read_text()
    assert main(["predict", "--data", str(data_dir), "--checkpoint", str(ck), "--out", str(out), "--T", "0"]) == 0
    rows = read_rows(out / "predictions.tsv")
    header, body = rows[0], np.array([r[2:] for r in rows[1:]], dtype=float)
    assert header[2:6] == [f"f_AU{j}" for j in range(4)]
    np.testing.assert_array_equal(body[:, :4], body[:, 4:])


def test_no_correction_factors_trace(data_dir, tmp_path):
    out = tmp_path / "ncf"
    argv = ["train", "--data", str(data_dir), "--out", str(out), *TRAIN, "--no-correction-factors", "--stages", "1,2,4"]
    assert main(argv) == 0
    ck = out / "fold0" / "checkpoint.bin"
    assert main(["predict", "--data", str(data_dir), "--checkpoint", str(ck), "--out", str(out / "p"), "--trace"]) == 0
    rows = read_rows(out / "p" / "trace.tsv")
    col = {name: k for k, name in enumerate(rows[0])}
    data = np.array(rows[1:], dtype=float)
    assert len(data) == 2
    for j in range(4):
        np.testing.assert_array_equal(data[:, col[f"m_bar_AU{j}"]], data[:, col[f"m_AU{j}"]])


def test_trace_with_correction_differs(eval_dir):
    rows = read_rows(eval_dir / "fold0" / "trace.tsv")
    col = {name: k for k, name in enumerate(rows[0])}
    data = np.array(rows[1:], dtype=float)
    assert (data[:, col["m_bar_AU0"]] < data[:, col["m_AU0"]]).all()


# report -----------------------------------------------------------------------------
def test_report_renders(run_dir, eval_dir):
    assert main(["report", "--run", str(eval_dir / "fold0")]) == 0
    figs = eval_dir / "fold0" / "figures"
    index = read_rows(figs / "figures.tsv")
    kinds = {r[0] for r in index[1:]}
    assert {"sweep", "correlation", "trace"} <= kinds
    if plotting.available():
        for _, _, name in index[1:]:
            assert (figs / name).stat().st_size > 0
    assert main(["report", "--run", str(run_dir / "fold0"), "--out", str(run_dir / "figs")]) == 0
    assert "history" in {r[0] for r in read_rows(run_dir / "figs" / "figures.tsv")[1:]}


def test_report_missing_run(tmp_path):
    assert main(["report", "--run", str(tmp_path / "nope")]) == 3
