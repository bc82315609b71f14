"""Command-line verbs, output files and exit codes."""

import subprocess
import sys

import numpy as np
import pytest

from clic.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, run
from clic.imageio import save_image

TINY_CONFIG = """\
channels = 8,16
embed_dim = 16
resolution = 32
batch_size = 8
queue_capacity = 32
epochs = 2
seed = 3
checkpoint_every = 1
"""


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    assert run(["synth", "--kind", "noise", "-n", "16", "--size", "32", "--seed", "1", "-o", str(d)]) == EXIT_OK
    return d


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = out / "tiny.cfg"
    cfg.write_text(TINY_CONFIG)
    assert run(["train", "--config", str(cfg), "--corpus", str(corpus), "--output", str(out)]) == EXIT_OK
    return out


def lines_of(capsys):
    return capsys.readouterr().out.splitlines()


class TestMetrics:
    def test_constant_image_ge_zero(self, tmp_path, capsys):
        save_image(tmp_path / "c.png", np.full((16, 16), 128, np.uint8))
        assert run(["metrics", "--metric", "ge", str(tmp_path / "c.png")]) == EXIT_OK
        out = lines_of(capsys)
        assert out[0] == "path,metric,value"
        assert out[1].endswith(",ge,0.000000")

    def test_uae_uses_random_encoder(self, corpus, capsys):
        assert run(["metrics", "--metric", "uae", str(corpus / "noise_00.png")]) == EXIT_OK
        assert float(lines_of(capsys)[1].split(",")[2]) > 0

    def test_missing_file_is_data_error(self, tmp_path):
        assert run(["metrics", "--metric", "ge", str(tmp_path / "absent.png")]) == EXIT_DATA

    def test_unknown_metric_is_usage_error(self, tmp_path):
        assert run(["metrics", "--metric", "lbp", "x.png"]) == EXIT_USAGE

    def test_writes_out_file(self, corpus, tmp_path):
        out = tmp_path / "m.csv"
        assert run(["metrics", "--metric", "cr", str(corpus / "noise_01.png"), "-o", str(out)]) == EXIT_OK
        assert out.read_text().startswith("path,metric,value\n")


class TestCorpusVerbs:
    def test_synth_layout(self, corpus):
        labels = (corpus / "labels.csv").read_text().splitlines()
        assert labels[0] == "path,score" and len(labels) == 17
        assert labels[1].startswith("noise_00.png,")
        assert len(list(corpus.glob("*.png"))) == 16

    def test_synth_needs_output(self):
        assert run(["synth", "-n", "2"]) == EXIT_USAGE

    def test_icd_masses_sum_to_one(self, corpus, capsys):
        assert run(["icd", str(corpus), "--bins", "5"]) == EXIT_OK
        rows = lines_of(capsys)[1:]
        assert len(rows) == 5
        assert sum(float(r.split(",")[2]) for r in rows) == pytest.approx(1.0, abs=1e-5)

    def test_sample(self, corpus, capsys):
        assert run(["sample", str(corpus), "-n", "6", "--bins", "3"]) == EXIT_OK
        out = lines_of(capsys)
        assert out[0] == "path,ge" and len(out) == 7

    def test_cropstudy(self, corpus, capsys):
        assert run(["cropstudy", "--dir", str(corpus), "--sides", "32,16", "--strategies", "oc"]) == EXIT_OK
        out = lines_of(capsys)
        assert out[0] == "side,strategy,pcc_ge_views_vs_source" and len(out) == 3

    def test_empty_folder(self, tmp_path):
        assert run(["icd", str(tmp_path)]) == EXIT_DATA


class TestTraining:
    def test_outputs(self, trained):
        log = (trained / "train_log.csv").read_text().splitlines()
        assert log[0] == "step,loss_total,loss_infonce,loss_cal,lr"
        assert len(log) == 1 + 2 * 2
        assert (trained / "final.ckpt").exists()
        assert (trained / "epoch_0001.ckpt").exists()

    def test_reproducible_bytes(self, corpus, trained, tmp_path):
        cfg = tmp_path / "tiny.cfg"
        cfg.write_text(TINY_CONFIG)
        assert run(["train", "--config", str(cfg), "--corpus", str(corpus), "--output", str(tmp_path)]) == EXIT_OK
        assert (tmp_path / "final.ckpt").read_bytes() == (trained / "final.ckpt").read_bytes()
        assert (tmp_path / "train_log.csv").read_text() == (trained / "train_log.csv").read_text()

    def test_resume_from_epoch(self, corpus, trained, tmp_path):
        cfg = tmp_path / "tiny.cfg"
        cfg.write_text(TINY_CONFIG)
        args = ["train", "--config", str(cfg), "--corpus", str(corpus), "--output", str(tmp_path)]
        assert run(args + ["--resume", str(trained / "epoch_0001.ckpt")]) == EXIT_OK
        assert (tmp_path / "final.ckpt").read_bytes() == (trained / "final.ckpt").read_bytes()

    def test_divergence_exit_code(self, corpus, tmp_path):
        cfg = tmp_path / "hot.cfg"
        cfg.write_text(TINY_CONFIG + "lr = 1e30\n")
        with np.errstate(all="ignore"):
            code = run(["train", "--config", str(cfg), "--corpus", str(corpus), "--output", str(tmp_path)])
        assert code == EXIT_NUMERIC

    def test_bad_config(self, corpus, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("lamda = 1\n")
        assert run(["train", "--config", str(cfg), "--corpus", str(corpus)]) == EXIT_DATA

    def test_probe_then_eval(self, corpus, trained, tmp_path, capsys):
        saved = tmp_path / "head.ckpt"
        code = run(["probe", "--ckpt", str(trained / "final.ckpt"), "--labels", str(corpus / "labels.csv"),
                    "--n-labels", "10", "--epochs", "20", "--save", str(saved)])
        assert code == EXIT_OK
        out = lines_of(capsys)
        assert out[0] == "n_labels,pcc,srcc,n_eval" and out[1].startswith("10,") and out[1].endswith(",6")
        assert run(["eval", "--ckpt", str(saved), "--corpus", str(corpus)]) == EXIT_OK
        out = lines_of(capsys)
        assert out[0] == "predictor,pcc,srcc,n" and out[1].startswith("head,") and out[1].endswith(",16")

    def test_eval_without_head_uses_energy(self, corpus, trained, capsys):
        assert run(["eval", "--ckpt", str(trained / "final.ckpt"), "--corpus", str(corpus)]) == EXIT_OK
        assert lines_of(capsys)[1].startswith("fae,")

    def test_probe_needs_held_out(self, corpus, trained):
        code = run(["probe", "--ckpt", str(trained / "final.ckpt"), "--labels", str(corpus / "labels.csv"),
                    "--n-labels", "15"])
        assert code == EXIT_DATA

    def test_export_features(self, corpus, trained, capsys):
        assert run(["export-features", "--ckpt", str(trained / "final.ckpt"), "--dir", str(corpus)]) == EXIT_OK
        out = lines_of(capsys)
        assert out[0].startswith("path,ge,pred_score,f1,") and len(out) == 17


class TestStudyAndAudit:
    def test_lambda_sweep_rows(self, tmp_path, capsys):
        cfg = tmp_path / "tiny.cfg"
        cfg.write_text(TINY_CONFIG)
        code = run(["study", "--name", "lambda_sweep", "--config", str(cfg), "--n-images", "16",
                    "--epochs", "1", "--probe-epochs", "5"])
        assert code == EXIT_OK
        out = lines_of(capsys)
        assert out[0] == "study,cell_params,pcc,srcc,steps,final_loss"
        assert len(out) == 6

    def test_gradcheck(self, capsys):
        assert run(["gradcheck"]) == EXIT_OK
        out = lines_of(capsys)
        assert out[0] == "check,max_rel_error,ok"
        assert all(r.endswith(",1") for r in out[1:])

    def test_no_verb(self):
        assert run([]) == EXIT_USAGE

    def test_threads_must_be_positive(self):
        assert run(["--threads", "0", "gradcheck"]) == EXIT_USAGE


def test_module_entry_point(tmp_path):
    save_image(tmp_path / "z.pgm", np.zeros((8, 8), np.uint8))
    proc = subprocess.run(
        [sys.executable, "-m", "clic.cli", "--threads", "1", "metrics", "--metric", "ge", str(tmp_path / "z.pgm")],
        capture_output=True, text=True, check=False,
    )
    assert proc.returncode == 0
    assert proc.stdout.splitlines()[1].endswith(",0.000000")
