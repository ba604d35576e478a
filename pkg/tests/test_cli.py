"""CLI surface: subcommand contracts, file outputs, exit codes."""

import json

import numpy as np

from lightavseg.cli import main, read_tensor_file, write_tensor_file
from lightavseg.tensor import RngState


def toy_train_args(out, extra=()):
    return ["train", "--out", str(out), "--steps", "3", "--scenes", "4",
            "--hw", "32", "--log-every", "1", *extra]


class TestTrainCli:
    def test_train_writes_run_outputs(self, tmp_path, capsys):
        assert main(toy_train_args(tmp_path / "run")) == 0
        run = tmp_path / "run"
        assert (run / "config.txt").exists()
        assert (run / "log.jsonl").exists()
        assert (run / "ckpt_final.bin").exists()
        lines = (run / "log.jsonl").read_text().splitlines()
        assert len(lines) == 3
        json.loads(lines[0])

    def test_zero_steps_still_writes_checkpoint(self, tmp_path):
        assert main(["train", "--out", str(tmp_path / "r0"), "--steps", "0",
                     "--scenes", "2", "--hw", "32"]) == 0
        assert (tmp_path / "r0" / "ckpt_final.bin").exists()

    def test_config_file_plus_flag_override(self, tmp_path, capsys):
        cfg = tmp_path / "c.txt"
        cfg.write_text("steps=99\nn_scenes=4\nhw=32\nlog_every=1\n")
        assert main(["train", "--out", str(tmp_path / "r"), "--config", str(cfg),
                     "--steps", "2"]) == 0
        out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert out["steps"] == 2

    def test_env_seed_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("LIGHTAVSEG_SEED", "41")
        assert main(toy_train_args(tmp_path / "r")) == 0
        text = (tmp_path / "r" / "config.txt").read_text()
        assert "seed=41" in text


class TestEvalCli:
    def test_eval_and_mute_audio(self, tmp_path, capsys):
        assert main(toy_train_args(tmp_path / "run")) == 0
        ckpt = tmp_path / "run" / "ckpt_final.bin"
        assert main(["eval", "--ckpt", str(ckpt)]) == 0
        plain = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert main(["eval", "--ckpt", str(ckpt), "--mute-audio"]) == 0
        muted = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert plain["mute_audio"] is False and muted["mute_audio"] is True

    def test_eval_missing_checkpoint_fails_cleanly(self, tmp_path, capsys):
        assert main(["eval", "--ckpt", str(tmp_path / "nope.bin")]) == 1
        assert "error" in capsys.readouterr().err

    def test_eval_dump_alignment_writes_per_scene_maps(self, tmp_path):
        assert main(toy_train_args(tmp_path / "run")) == 0
        ckpt = tmp_path / "run" / "ckpt_final.bin"
        dump = tmp_path / "align"
        assert main(["eval", "--ckpt", str(ckpt), "--dump-alignment",
                     str(dump)]) == 0
        files = sorted(dump.glob("scene0000_scale*.tnsr"))
        assert len(files) == 3
        arr = read_tensor_file(files[0])
        assert arr.shape == (1, 1, 32, 32)
        assert np.all(arr > 0.0) and np.all(arr < 1.0)


class TestBenchCli:
    def test_bench_emits_csv_and_json(self, tmp_path):
        assert main(["bench", "--module", "fusion", "--grids", "28,56",
                     "--out", str(tmp_path)]) == 0
        csv = (tmp_path / "bench.csv").read_text().splitlines()
        assert csv[0] == "module,N,flops,wall_ms"
        report = json.loads((tmp_path / "bench.json").read_text())
        assert abs(report["slope"] - 1.0) <= 0.01

    def test_bench_xattn(self, tmp_path):
        assert main(["bench", "--module", "xattn", "--grids", "14,28",
                     "--out", str(tmp_path)]) == 0
        report = json.loads((tmp_path / "bench.json").read_text())
        assert abs(report["slope"] - 2.0) <= 0.01

    def test_bench_model_components(self, tmp_path):
        assert main(["bench", "--module", "model", "--grids", "64",
                     "--out", str(tmp_path)]) == 0
        report = json.loads((tmp_path / "bench.json").read_text())
        names = {c["name"] for c in report["components"]}
        assert names == {"visual_backbone", "audio_embed", "encoder_fusion",
                         "decoder_fusion", "seg_head"}


class TestOtherCommands:
    def test_gradcheck_quick_exits_zero(self, capsys):
        assert main(["gradcheck", "--quick"]) == 0
        out = capsys.readouterr().out
        assert "all checks passed" in out
        assert out.count("PASS") >= 20

    def test_unknown_flag_exits_2(self):
        assert main(["train", "--bogus-flag", "x"]) == 2

    def test_unknown_command_exits_2(self):
        assert main(["undefined-command"]) == 2

    def test_synth_data_then_train_on_layout(self, tmp_path, capsys):
        assert main(["synth-data", "--out", str(tmp_path / "d"), "--scenes", "2",
                     "--hw", "32"]) == 0
        assert main(["train", "--out", str(tmp_path / "run"), "--steps", "1",
                     "--scenes", "2", "--hw", "32", "--data",
                     str(tmp_path / "d")]) == 0

    def test_inspect_dumps(self, tmp_path):
        assert main(toy_train_args(tmp_path / "run")) == 0
        ckpt = tmp_path / "run" / "ckpt_final.bin"
        assert main(["inspect", "--ckpt", str(ckpt), "--index", "1",
                     "--out", str(tmp_path / "ins")]) == 0
        dumped = read_tensor_file(tmp_path / "ins" / "logits.tnsr")
        assert dumped.shape == (1, 1, 32, 32)
        assert (tmp_path / "ins" / "pred_mask.png").exists()
        assert (tmp_path / "ins" / "alignment_scale0.tnsr").exists()

    def test_tensor_file_round_trip(self, tmp_path):
        arr = RngState(1).uniform((2, 3, 4), -5, 5)
        p = tmp_path / "t.tnsr"
        write_tensor_file(p, arr)
        np.testing.assert_array_equal(read_tensor_file(p), arr)
