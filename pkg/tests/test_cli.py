"""End-to-end CLI tests: every subcommand through main() on tiny inputs."""

import json
import os

import numpy as np
import pytest

from scenefactor.cli import build_parser, main
from scenefactor.configs import save_train_config, TrainConfig, ModelConfig, \
    LossConfig, DecodeConfig, OptimizerConfig
from scenefactor.seqio import read_dataset


def tiny_config(data, out):
    model = ModelConfig(num_slots=4, latent_dim=8, frames=4, height=32,
                        width=32, cnn_channels=8, cnn_layers=2, tr_layers=1,
                        tr_heads=2, tr_value_size=8, tr_mlp_hidden=16,
                        agg_mlp_hidden=16, decoder_layers=2,
                        decoder_channels=16)
    return TrainConfig(model=model, loss=LossConfig(beta_o=1e-4, beta_f=1e-4),
                       decode=DecodeConfig(frames_decoded=2, height_decoded=8,
                                           width_decoded=8),
                       optimizer=OptimizerConfig(), batch_size=2, steps=2,
                       seed=0, data_path=str(data), out_dir=str(out))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Dataset + config + trained checkpoint shared by the command tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data.bin"
    rc = main(["generate", "--scenes", "5", "--frames", "4", "--size", "32",
               "--sprites", "2", "--moving", "1", "--pan-limit", "0.15",
               "--seed", "3", "--out", str(data)])
    assert rc == 0
    cfg_path = root / "train.ini"
    save_train_config(tiny_config(data, root / "run"), str(cfg_path))
    rc = main(["train", "--config", str(cfg_path), "--data", str(data),
               "--out", str(root / "run"), "--quiet"])
    assert rc == 0
    ckpt = root / "run" / "checkpoint_final.bin"
    assert ckpt.exists()
    return {"root": root, "data": str(data), "ckpt": str(ckpt),
            "cfg": str(cfg_path)}


class TestParser:
    def test_all_subcommands_registered(self):
        parser = build_parser()
        text = parser.format_help()
        for name in ("generate", "train", "eval", "traverse", "crossover",
                     "compose", "sweep", "gradcheck"):
            assert name in text

    def test_eval_requires_kind(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["eval"])

    def test_generate_rejects_bad_size(self, capsys):
        rc = main(["generate", "--scenes", "1", "--size", "48",
                   "--out", "/tmp/x.bin"])
        assert rc == 1
        assert "frame_size" in capsys.readouterr().err


class TestGenerate:
    def test_dataset_readable_and_shaped(self, workspace):
        sequences = read_dataset(workspace["data"])
        assert len(sequences) == 5
        assert sequences[0].frames.shape == (4, 32, 32, 3)
        assert sequences[0].masks is not None
        assert sequences[0].camera.shape == (4, 2)

    def test_deterministic_in_seed(self, tmp_path):
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        main(["generate", "--scenes", "2", "--frames", "4", "--size", "32",
              "--seed", "9", "--out", str(a)])
        main(["generate", "--scenes", "2", "--frames", "4", "--size", "32",
              "--seed", "9", "--out", str(b)])
        assert a.read_bytes() == b.read_bytes()


class TestTrain:
    def test_resume_and_step_override(self, workspace, tmp_path):
        out = tmp_path / "resume_run"
        rc = main(["train", "--config", workspace["cfg"], "--data",
                   workspace["data"], "--out", str(out), "--steps", "1",
                   "--quiet"])
        assert rc == 0
        ckpt = out / "checkpoint_final.bin"
        rc = main(["train", "--config", workspace["cfg"], "--data",
                   workspace["data"], "--out", str(out), "--steps", "2",
                   "--resume", str(ckpt), "--quiet"])
        assert rc == 0
        log = (out / "train_log.jsonl").read_text().strip().splitlines()
        assert [json.loads(l)["step"] for l in log] == [1, 2]


class TestEval:
    def test_ari_both_modes(self, workspace, capsys, tmp_path):
        for mode in ("static", "video"):
            out_json = tmp_path / f"ari_{mode}.json"
            rc = main(["eval", "ari", "--ckpt", workspace["ckpt"], "--data",
                       workspace["data"], "--mode", mode, "--out",
                       str(out_json)])
            assert rc == 0
            record = json.loads(out_json.read_text())
            assert record["kind"] == "ari" and record["mode"] == mode
            assert -0.5 <= record["mean"] <= 1.0
            assert record["num_scenes"] == 5
        text = capsys.readouterr().out
        assert "RESULT" in text

    def test_probe_camera_frame_linear(self, workspace, tmp_path):
        out_json = tmp_path / "probe.json"
        rc = main(["eval", "probe", "--ckpt", workspace["ckpt"], "--data",
                   workspace["data"], "--target", "camera", "--input", "frame",
                   "--regressor", "linear", "--out", str(out_json)])
        assert rc == 0
        record = json.loads(out_json.read_text())
        assert record["kind"] == "probe"
        assert record["target"] == "camera" and record["input"] == "frame"
        assert "r2_train" in record and "r2_eval" in record

    def test_probe_object_inputs(self, workspace, tmp_path):
        for inp in ("object+t", "object+frame+t", "complement"):
            rc = main(["eval", "probe", "--ckpt", workspace["ckpt"], "--data",
                       workspace["data"], "--target", "object", "--input", inp,
                       "--regressor", "linear",
                       "--out", str(tmp_path / f"p_{inp.replace('+', '_')}.json")])
            assert rc == 0


class TestAnalysisCommands:
    def test_traverse_writes_png(self, workspace, tmp_path):
        out = tmp_path / "tr"
        rc = main(["traverse", "--ckpt", workspace["ckpt"], "--data",
                   workspace["data"], "--scene", "0", "--slot", "1",
                   "--dim", "2", "--offsets=-1,0,1", "--out", str(out)])
        assert rc == 0
        pngs = [n for n in os.listdir(out) if n.endswith(".png")]
        assert len(pngs) == 1 and "dim2" in pngs[0]

    def test_traverse_auto_dim(self, workspace, tmp_path):
        out = tmp_path / "tr_auto"
        rc = main(["traverse", "--ckpt", workspace["ckpt"], "--data",
                   workspace["data"], "--dim", "-1", "--out", str(out)])
        assert rc == 0
        assert any(n.endswith(".png") for n in os.listdir(out))

    def test_crossover_writes_png(self, workspace, tmp_path):
        out = tmp_path / "co"
        rc = main(["crossover", "--ckpt", workspace["ckpt"], "--data",
                   workspace["data"], "--scene-a", "0", "--scene-b", "1",
                   "--out", str(out)])
        assert rc == 0
        assert any("crossover_0_x_1" in n for n in os.listdir(out))

    def test_compose_selection_syntax(self, workspace, tmp_path):
        out = tmp_path / "cmp"
        rc = main(["compose", "--ckpt", workspace["ckpt"], "--data",
                   workspace["data"], "--select", "0:0,1;1:2",
                   "--frames-from", "2", "--out", str(out)])
        assert rc == 0
        assert any(n.endswith(".png") for n in os.listdir(out))

    def test_sweep_requires_vs_checkpoint(self, workspace, tmp_path):
        rc = main(["sweep", "--ckpt", workspace["ckpt"], "--data",
                   workspace["data"], "--out", str(tmp_path / "sw")])
        assert rc != 0


class TestGradcheckCommand:
    def test_gradcheck_passes(self, capsys):
        rc = main(["gradcheck", "--seed", "0", "--max-coords", "2"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "pass" in out.lower()
