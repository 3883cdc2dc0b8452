import csv
import hashlib

import pytest

from octpad import cli
from octpad.errors import ConfigError

SMALL = ["--height", "32", "--width", "64", "--bscans", "4"]


def _common(root, *extra):
    return ["--data-dir", str(root / "data"), "--model-path", str(root / "model.ckpt"),
            "--calibration-path", str(root / "cal.txt"), "--report-dir", str(root / "reports"),
            "--target-height", "32", "--target-width", "64", "--epochs", "2", "--base-channels", "4",
            *extra]


def _synth(root, model=3, score=3, bona=2, pai=2):
    return cli.main(["synth", *_common(root), "--model", str(model), "--score", str(score),
                     "--test-bona", str(bona), "--test-pai", str(pai), *SMALL])


def _tree_digest(root):
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(path.relative_to(root).as_posix().encode())
        h.update(path.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert _synth(root) == 0
    for cmd in ("train", "calibrate", "score"):
        assert cli.main([cmd, *_common(root)]) == 0
    return root


def test_synth_writes_manifest(run):
    assert (run / "data" / "manifest.tsv").is_file()


def test_synth_repeatable(tmp_path):
    assert _synth(tmp_path / "a") == 0
    assert _synth(tmp_path / "b") == 0
    assert _tree_digest(tmp_path / "a" / "data") == _tree_digest(tmp_path / "b" / "data")


def test_train_output_and_checkpoint(tmp_path, capsys):
    _synth(tmp_path, model=2, score=2, bona=1, pai=1)
    capsys.readouterr()
    assert cli.main(["train", *_common(tmp_path)]) == 0
    rows = list(csv.reader(capsys.readouterr().out.splitlines()))
    assert rows[0] == ["epoch", "loss"]
    assert [int(r[0]) for r in rows[1:]] == [0, 1]
    assert all(float(r[1]) > 0 for r in rows[1:])
    assert (tmp_path / "model.ckpt").is_file()


def test_train_empty_model_set(tmp_path, capsys):
    _synth(tmp_path, model=0)
    code = cli.main(["train", *_common(tmp_path)])
    assert code == cli.EXIT_DATASET
    assert "empty model set" in capsys.readouterr().err


def test_train_rejects_pa_in_model_split(tmp_path):
    _synth(tmp_path, model=2, score=2, bona=1, pai=1)
    manifest = tmp_path / "data" / "manifest.tsv"
    manifest.write_text(manifest.read_text().replace("\tBonafide\tmodel\t", "\tPA\tmodel\t", 1))
    assert cli.main(["train", *_common(tmp_path)]) == cli.EXIT_ZERO_PA


def test_missing_checkpoint_and_calibration(tmp_path, run):
    assert cli.main(["calibrate", *_common(run, "--model-path", str(tmp_path / "none.ckpt"))]) == cli.EXIT_MISSING
    assert cli.main(["score", *_common(run, "--calibration-path", str(tmp_path / "none.txt"))]) == cli.EXIT_MISSING


def test_degenerate_calibration(tmp_path, run):
    _synth(tmp_path, score=1)
    code = cli.main(["calibrate", *_common(tmp_path, "--model-path", str(run / "model.ckpt"))])
    assert code == cli.EXIT_DEGENERATE


def test_missing_manifest(tmp_path):
    assert cli.main(["train", *_common(tmp_path)]) == cli.EXIT_IO


def test_score_csv_contract(run):
    with open(run / "reports" / "scores.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["scan_id", "truth", "s_score", "m_score", "sm_score", "ms_decision",
                       "pd_postp", "pd_prep", "kl_pre", "kl_post", "iou_score"]
    assert len(rows) - 1 == 4
    assert {r[1] for r in rows[1:]} == {"Bonafide", "PA"}
    assert {r[5] for r in rows[1:]} <= {"Bonafide", "PA"}


def test_score_rerun_identical(run, tmp_path):
    out = tmp_path / "again.csv"
    assert cli.main(["score", *_common(run), "--out", str(out)]) == 0
    assert out.read_bytes() == (run / "reports" / "scores.csv").read_bytes()


def test_eval_outputs(run, tmp_path):
    report_dir = tmp_path / "rep"
    args = ["eval", *_common(run, "--report-dir", str(report_dir)), "--scores", str(run / "reports" / "scores.csv")]
    assert cli.main(args) == 0
    summary = (report_dir / "summary.csv").read_text().splitlines()
    assert summary[0] == "score,err,tpr@0.10,tpr@0.05,threshold"
    assert [ln.split(",")[0] for ln in summary[1:]] == list(cli.EVAL_FAMILIES)
    scatter = list(csv.reader((report_dir / "scatter.csv").open()))
    assert scatter[0] == ["s_score", "m_score", "truth"] and len(scatter) - 1 == 4
    for fam in cli.EVAL_FAMILIES:
        assert (report_dir / f"eval_{fam}.csv").is_file()


def test_eval_single_family(run, tmp_path):
    report_dir = tmp_path / "one"
    args = ["eval", *_common(run, "--report-dir", str(report_dir)),
            "--scores", str(run / "reports" / "scores.csv"), "--score", "pd_postp"]
    assert cli.main(args) == 0
    assert len((report_dir / "summary.csv").read_text().splitlines()) == 2
    assert sorted(p.name for p in report_dir.glob("eval_*.csv")) == ["eval_pd_postp.csv"]


def test_eval_single_class(run, tmp_path):
    rows = (run / "reports" / "scores.csv").read_text().splitlines()
    only_bona = tmp_path / "bona.csv"
    only_bona.write_text("\n".join([rows[0]] + [r for r in rows[1:] if r.split(",")[1] == "Bonafide"]) + "\n")
    args = ["eval", *_common(run, "--report-dir", str(tmp_path / "r")), "--scores", str(only_bona)]
    assert cli.main(args) == cli.EXIT_SINGLE_CLASS


def test_unknown_config_key(run):
    assert cli.main(["train", *_common(run), "--set", "ae.depth=3"]) == cli.EXIT_USAGE


def test_config_precedence(tmp_path):
    cfg_file = tmp_path / "octpad.cfg"
    cfg_file.write_text("ae.epochs = 3\nae.batch_size = 4\npreprocess.denoise_enabled = false\nseed = 11\n")
    cfg = cli.resolve_config(str(cfg_file), {}, environ={})
    assert (cfg.ae.epochs, cfg.ae.batch_size, cfg.preprocess.denoise_enabled, cfg.seed) == (3, 4, False, 11)
    cfg = cli.resolve_config(str(cfg_file), {}, environ={"OCTPAD_AE_EPOCHS": "5", "OTHER": "x"})
    assert (cfg.ae.epochs, cfg.ae.batch_size) == (5, 4)
    cfg = cli.resolve_config(str(cfg_file), {"ae.epochs": 9}, environ={"OCTPAD_AE_EPOCHS": "5"})
    assert cfg.ae.epochs == 9
    assert cli.resolve_config(None, {}, environ={}).ae.epochs == 20


def test_config_rejects_bad_values(tmp_path):
    with pytest.raises(ConfigError):
        cli.resolve_config(None, {"ae.epochs": "many"}, environ={})
    with pytest.raises(ConfigError):
        cli.resolve_config(None, {"ae.seed": "3"}, environ={})
    with pytest.raises(ConfigError):
        cli.resolve_config(None, {"preprocess.target_height": 50}, environ={})


def test_ae_config_follows_preprocess_and_seed():
    cfg = cli.resolve_config(None, {"preprocess.target_height": 32, "preprocess.target_width": 64, "seed": 3},
                             environ={})
    a = cfg.ae_config
    assert (a.input_height, a.input_width) == (32, 64)
    assert a.seed == cli.stage_seed(3, "train") != cli.stage_seed(3, "synth")
