import json

import pytest

from dehazekit.cli import main
from dehazekit.config import DEFAULTS, parse_config_file, resolve_config, write_manifest
from dehazekit.data import load_image, save_image
from dehazekit.errors import InputError

from conftest import rand_image


class TestConfig:
    def test_parse_and_resolve(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text(
            "# comment line\n"
            "seed = 7\n"
            "moc.n_steps = 12   # inline comment\n"
            "bia.alpha = 0.5\n"
            "moc.augment = false\n"
        )
        cfg = resolve_config(path)
        assert cfg["seed"] == 7
        assert cfg["moc.n_steps"] == 12
        assert cfg["bia.alpha"] == 0.5
        assert cfg["moc.augment"] is False
        assert cfg["bia.t_steps"] == DEFAULTS["bia.t_steps"]

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("moc.warp_speed = 9\n")
        with pytest.raises(InputError):
            parse_config_file(path)

    def test_bad_value_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("moc.n_steps = soon\n")
        with pytest.raises(InputError):
            parse_config_file(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputError):
            parse_config_file(tmp_path / "absent.cfg")

    def test_overrides_win(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("seed = 7\n")
        cfg = resolve_config(path, overrides={"seed": 9})
        assert cfg["seed"] == 9

    def test_manifest_echoes_config(self, tmp_path):
        cfg = resolve_config()
        write_manifest(tmp_path, "unit-test", cfg, {"note": "x"})
        data = json.loads((tmp_path / "run_manifest.json").read_text())
        assert data["verb"] == "unit-test"
        assert data["config"]["moc.n_steps"] == DEFAULTS["moc.n_steps"]
        assert data["note"] == "x"


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    """Run the full CLI pipeline once at miniature scale."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.cfg"
    cfg.write_text(
        "data.size = 32\n"
        "teacher.steps = 2\n"
        "moc.n_steps = 2\n"
        "moc.batch_size = 2\n"
        "bia.t_steps = 2\n"
        "bia.batch_size = 2\n"
        "prompts.steps = 5\n"
    )
    c = ["--config", str(cfg)]
    assert main(["synth-data", *c, "--out", str(root / "syn"), "--n", "6"]) == 0
    assert main(["synth-data", *c, "--out", str(root / "real"), "--kind", "real",
                 "--n", "6"]) == 0
    assert main(["train-teacher", *c, "--data", str(root / "syn"),
                 "--out", str(root / "teacher_run")]) == 0
    assert main(["moc", *c, "--teacher", str(root / "teacher_run" / "teacher"),
                 "--data", str(root / "syn"), "--out", str(root / "moc_run")]) == 0
    assert main(["train-prompts", *c, "--hazy", str(root / "real"), str(root / "syn"),
                 "--clear", str(root / "syn"), "--out", str(root / "prompt_run")]) == 0
    assert main(["bia", *c, "--student", str(root / "moc_run" / "student_moc"),
                 "--real", str(root / "real"),
                 "--prompts", str(root / "prompt_run" / "prompts.json"),
                 "--backend", str(root / "prompt_run" / "backend"),
                 "--out", str(root / "bia_run")]) == 0
    return root


class TestCli:
    def test_pipeline_outputs_exist(self, cli_workspace):
        root = cli_workspace
        assert (root / "syn" / "manifest.json").is_file()
        assert (root / "teacher_run" / "teacher" / "manifest.json").is_file()
        assert (root / "moc_run" / "student_moc" / "manifest.json").is_file()
        assert (root / "moc_run" / "moc_log.csv").is_file()
        assert (root / "prompt_run" / "prompts.json").is_file()
        assert (root / "bia_run" / "student_bia" / "manifest.json").is_file()
        assert (root / "bia_run" / "bia_log.csv").is_file()

    def test_run_manifest_echoes_resolved_config(self, cli_workspace):
        data = json.loads((cli_workspace / "moc_run" / "run_manifest.json").read_text())
        assert data["verb"] == "moc"
        assert data["config"]["moc.n_steps"] == 2

    def test_eval_verb(self, cli_workspace):
        root = cli_workspace
        code = main(["eval", "--model", str(root / "bia_run" / "student_bia"),
                     "--data", str(root / "real"), "--no-ground-truth",
                     "--out", str(root / "eval_run")])
        assert code == 0
        report = json.loads((root / "eval_run" / "report.json").read_text())
        assert "haze_density" in report["aggregate"]

    def test_eval_with_gt(self, cli_workspace):
        root = cli_workspace
        code = main(["eval", "--model", str(root / "moc_run" / "student_moc"),
                     "--data", str(root / "syn"), "--out", str(root / "eval_gt")])
        assert code == 0
        report = json.loads((root / "eval_gt" / "report.json").read_text())
        assert "psnr" in report["aggregate"]

    def test_bench_verb(self, cli_workspace):
        root = cli_workspace
        code = main(["bench", "--model", str(root / "moc_run" / "student_moc"),
                     "--sizes", "32", "--out", str(root / "bench_run")])
        assert code == 0
        data = json.loads((root / "bench_run" / "efficiency_model.json").read_text())
        assert data["params"] > 0 and data["flops"] > 0

    def test_dehaze_verb(self, cli_workspace, tmp_path):
        root = cli_workspace
        src = tmp_path / "hazy.png"
        save_image(rand_image(0, (3, 38, 45)) * 0.5 + 0.4, src)  # odd size: pad path
        out = tmp_path / "dehazed.png"
        code = main(["dehaze", "--model", str(root / "bia_run" / "student_bia"),
                     "--input", str(src), "--output", str(out)])
        assert code == 0
        img = load_image(out)
        assert img.shape == (3, 38, 45)

    def test_missing_dataset_exits_2(self, tmp_path):
        code = main(["eval", "--model", str(tmp_path / "nope"),
                     "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "o")])
        assert code == 2

    def test_unknown_config_key_exits_2(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("not.a.key = 1\n")
        code = main(["synth-data", "--config", str(cfg), "--out", str(tmp_path / "d")])
        assert code == 2

    def test_synth_data_determinism(self, tmp_path):
        for name in ("a", "b"):
            assert main(["synth-data", "--seed", "5", "--n", "3",
                         "--out", str(tmp_path / name)]) == 0
        for png in (tmp_path / "a").glob("*.png"):
            assert png.read_bytes() == (tmp_path / "b" / png.name).read_bytes()
