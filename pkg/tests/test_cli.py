import csv

import pytest

from ensa import cli

SMALL = [
    "--set", "model.m=16", "--set", "model.c=8", "--set", "model.k=2", "--set", "model.depth=1",
    "--set", "model.hidden=8", "--set", "model.heads=2", "--set", "model.knn_k=3",
    "--set", "data.n=24", "--set", "data.train_count=3", "--set", "data.val_count=2",
]


def run(capsys, *argv):
    code = cli.run([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def report_without_timing(path):
    with open(path) as fh:
        return [(r["step"], r["loss"]) for r in csv.DictReader(fh)]


class TestExitCodes:
    def test_help(self, capsys):
        assert run(capsys, "--help")[0] == 0
        assert run(capsys, "train", "--help")[0] == 0

    def test_unknown_flag(self, capsys):
        code, _, err = run(capsys, "train", "--bogus")
        assert code == 2 and "usage error" in err

    def test_missing_command(self, capsys):
        assert run(capsys)[0] == 2

    def test_unknown_key(self, capsys, tmp_path):
        code, _, err = run(capsys, "train", "--out", tmp_path, "--set", "model.wings=2")
        assert code == 2 and "unknown key" in err

    def test_bad_threads(self, capsys, tmp_path, monkeypatch):
        monkeypatch.delenv(cli.DETERMINISTIC_ENV, raising=False)
        assert run(capsys, "gen", "--out", tmp_path, "--threads", "0")[0] == 2

    def test_missing_params_is_runtime_error(self, capsys, tmp_path):
        code, _, err = run(capsys, "eval", "--out", tmp_path, "--params", tmp_path / "none.ensa", *SMALL)
        assert code == 1 and err.startswith("error:")

    def test_every_flag_is_documented(self, capsys):
        flags = {"--config", "--out", "--seed", "--set", "--threads"}
        extra = {"eval": {"--params", "--data"}, "influence": {"--params", "--data"}, "selftest": {"--full"}}
        for cmd in cli.COMMANDS:
            _, out, _ = run(capsys, cmd, "--help")
            for flag in flags | extra.get(cmd, set()):
                assert flag in out, (cmd, flag)


class TestWorkflow:
    def test_gen_train_eval(self, capsys, tmp_path):
        assert run(capsys, "gen", "--out", tmp_path, *SMALL)[0] == 0
        assert len(list((tmp_path / "train").iterdir())) == 3
        cfg = ["--set", f"data.path={tmp_path}", "--set", "train.steps=3", *SMALL]
        code, out, _ = run(capsys, "train", "--out", tmp_path / "run", *cfg)
        assert code == 0 and "val_mse_final=" in out
        for name in ("report.csv", "params.ensa", "config.txt", "summary.txt"):
            assert (tmp_path / "run" / name).exists()
        code, out, _ = run(capsys, "eval", "--out", tmp_path / "run", "--data", tmp_path / "val", *SMALL)
        assert code == 0 and out.startswith("test_mse=")
        summary = dict(line.split("=") for line in (tmp_path / "run" / "summary.txt").read_text().split())
        assert float(out.split("=")[1]) == pytest.approx(float(summary["val_mse_final"]), rel=1e-12)

    def test_zero_lr_eval_equals_initial(self, capsys, tmp_path):
        code, _, _ = run(capsys, "train", "--out", tmp_path, "--set", "train.lr=0", "--set", "train.steps=2", *SMALL)
        assert code == 0
        summary = dict(line.split("=") for line in (tmp_path / "summary.txt").read_text().split())
        _, out, _ = run(capsys, "eval", "--out", tmp_path, *SMALL)
        assert float(out.split("=")[1]) == float(summary["val_mse_init"])

    def test_same_seed_same_report(self, capsys, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.DETERMINISTIC_ENV, "1")
        for d in ("a", "b"):
            assert run(capsys, "train", "--out", tmp_path / d, "--seed", 5, "--set", "train.steps=4", *SMALL)[0] == 0
        assert report_without_timing(tmp_path / "a" / "report.csv") == report_without_timing(tmp_path / "b" / "report.csv")

    def test_config_file_and_preset(self, capsys, tmp_path):
        (tmp_path / "md.cfg").write_text("model.preset = md\nmodel.hidden = 16\nmodel.heads = 2\ntrain.steps = 1\n")
        code, _, _ = run(capsys, "train", "--out", tmp_path, "--config", tmp_path / "md.cfg", "--set", "data.n=40", "--set", "data.train_count=1", "--set", "data.val_count=1")
        assert code == 0
        assert "model.m = 32" in (tmp_path / "config.txt").read_text()

    def test_influence(self, capsys, tmp_path):
        code, out, _ = run(capsys, "influence", "--out", tmp_path, "--set", "bench.target_node=2", *SMALL)
        assert code == 0 and out.startswith("target=2")
        lines = (tmp_path / "influence.csv").read_text().splitlines()
        assert lines[0] == "node,x,y,z,influence" and len(lines) == 25

    def test_bench(self, capsys, tmp_path):
        code, out, _ = run(capsys, "bench", "--out", tmp_path, "--set", "bench.sizes=64,128,256,512", "--set", "bench.repeats=1", *SMALL)
        assert code == 0 and "time_slope" in out
        for name in ("scaling.csv", "dense_scaling.csv", "throughput.csv", "access_pattern.csv"):
            assert (tmp_path / name).exists()

    def test_selftest(self, capsys, tmp_path):
        code, out, _ = run(capsys, "selftest", "--out", tmp_path)
        assert code == 0 and "selftest: ok" in out
