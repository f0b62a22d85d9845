import json

import pytest

from sstg import __version__
from sstg.cli import main
from sstg.preprocess import RawRecording, read_vtxf, write_vtrx
from sstg.synthdata import load_dataset

SYNTH = ["--nodes", "5", "--samples", "40",
         "--set", "synth.n_bands=4", "--set", "synth.n_steps=8", "--set", "synth.carrier_bands=0,1,2,3"]
MODEL = ["--set", "model.n_nodes=5", "--set", "model.n_bands=4", "--set", "model.n_steps=8",
         "--set", "model.decoder_channels=8", "--set", "model.classifier_hidden=16",
         "--set", "train.batch_size=8"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "d.vtxf"
    assert main(["synth", *SYNTH, "--out", str(data)]) == 0
    assert main(["train", "--data", str(data), "--out", str(root / "run"), "--epochs", "2", *MODEL]) == 0
    return root, data


class TestUsage:
    def test_help(self, capsys):
        assert main(["--help"]) == 0
        assert "selftest" in capsys.readouterr().out

    def test_version(self, capsys):
        assert main(["--version"]) == 0
        assert __version__ in capsys.readouterr().out

    def test_no_command(self):
        assert main([]) == 1

    def test_unknown_flag(self):
        assert main(["synth", "--out", "x", "--bogus"]) == 1

    def test_unknown_ablation(self, tmp_path):
        assert main(["train", "--data", "x", "--out", str(tmp_path), "--ablate", "no_magic"]) == 1

    def test_missing_files(self, tmp_path):
        assert main(["eval", "--model", str(tmp_path / "none.ckpt"), "--data", "x",
                     "--report", str(tmp_path / "r.json")]) == 1
        assert main(["preprocess", "--input", str(tmp_path / "none.vtrx"), "--out", "y"]) == 1

    def test_bad_override(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path / "d"), "--set", "train.epochs=1"]) == 1
        assert main(["synth", "--out", str(tmp_path / "d"), "--set", "synth.threshold=abc"]) == 1

    def test_threads_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv("SSTG_THREADS", "zero")
        assert main(["synth", *SYNTH, "--out", str(tmp_path / "d")]) == 1


class TestCommands:
    def test_synth(self, trained):
        root, data = trained
        ds = load_dataset(data)
        assert ds.x.shape == (40, 5, 4, 8)
        man = json.loads((root / "d.vtxf.manifest.json").read_text())
        assert man["command"] == "synth" and man["seeds"] == {"synth": 7}
        assert str(data) in man["outputs"] and man["tool_version"] == __version__

    def test_synth_deterministic(self, trained, tmp_path):
        _, data = trained
        assert main(["synth", *SYNTH, "--out", str(tmp_path / "e.vtxf")]) == 0
        assert (tmp_path / "e.vtxf").read_bytes() == data.read_bytes()

    def test_train_outputs(self, trained):
        root, _ = trained
        run = root / "run"
        for name in ("config.txt", "history.csv", "final.ckpt", "best.ckpt", "test_report.json", "manifest.json"):
            assert (run / name).exists(), name
        man = json.loads((run / "manifest.json").read_text())
        assert "train.epochs = 2" in man["config"]
        assert any(k.endswith("final.ckpt") for k in man["outputs"])

    def test_eval(self, trained, capsys):
        root, data = trained
        report = root / "eval" / "report.json"
        assert main(["eval", "--model", str(root / "run" / "best.ckpt"), "--data", str(data),
                     "--report", str(report)]) == 0
        r = json.loads(report.read_text())
        assert 0 <= r["accuracy"] <= 1 and sum(map(sum, r["confusion"])) == 40 * 5
        assert (root / "eval" / "report_roc.csv").exists()
        assert (root / "eval" / "report_confusion.csv").exists()
        assert (root / "eval" / "report.json.manifest.json").exists()
        assert "accuracy" in capsys.readouterr().out

    def test_export_embeddings(self, trained):
        root, data = trained
        outs = []
        for name in ("e1.csv", "e2.csv"):
            assert main(["export-embeddings", "--model", str(root / "run" / "final.ckpt"),
                         "--data", str(data), "--out", str(root / name)]) == 0
            outs.append((root / name).read_text())
        assert outs[0] == outs[1] and len(outs[0].splitlines()) == 1 + 40 * 5

    def test_eval_shape_mismatch(self, trained, tmp_path):
        root, _ = trained
        other = tmp_path / "o.vtxf"
        assert main(["synth", "--nodes", "6", "--samples", "5", "--set", "synth.n_bands=4",
                     "--set", "synth.n_steps=8", "--set", "synth.carrier_bands=0,1",
                     "--out", str(other)]) == 0
        assert main(["eval", "--model", str(root / "run" / "best.ckpt"), "--data", str(other),
                     "--report", str(tmp_path / "r.json")]) == 1

    def test_preprocess(self, tmp_path, rng):
        rec = RawRecording(rng.standard_normal((3, 3, 1100)))
        write_vtrx(tmp_path / "r.vtrx", rec)
        out = tmp_path / "r.vtxf"
        assert main(["preprocess", "--input", str(tmp_path / "r.vtrx"), "--out", str(out)]) == 0
        coeffs, labels, meta = read_vtxf(out)
        assert coeffs.shape == (2, 3, 16, 32) and labels is None
        assert len(meta["normalization_scales"]) == 2
        assert (tmp_path / "r.vtxf.manifest.json").exists()

    def test_preprocess_bad_wavelet(self, tmp_path, rng):
        write_vtrx(tmp_path / "r.vtrx", RawRecording(rng.standard_normal((2, 3, 600))))
        assert main(["preprocess", "--input", str(tmp_path / "r.vtrx"), "--out", str(tmp_path / "o"),
                     "--wavelet", "nope"]) == 1

    def test_selftest(self, capsys):
        assert main(["selftest"]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out and out.count("PASS") >= 8
