"""Command-line interface: artifacts, determinism, exit codes."""

import subprocess
import sys

import pytest

from tsaseg import checks
from tsaseg.cli import EVAL_HEADER, SAMPLE_EVAL_HEADER, STEP_LOG_HEADER, main
from tsaseg.config import RunConfig, render_config

TINY_CFG = (
    "height = 32\n"
    "width = 32\n"
    "n_source = 4\n"
    "n_target = 4\n"
    "labeled_fraction = 0.5\n"
    "n_classes = 2\n"
    "feature_dim = 8\n"
    "iterations = 8\n"
    "eval_interval = 4\n"
    "mc_samples = 3000\n"
)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """One tiny dataset + one training run shared by the read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.cfg"
    cfg.write_text(TINY_CFG)
    data = root / "data"
    assert main(["gen-data", "--config", str(cfg), "--out", str(data)]) == 0
    run = root / "run1"
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(run)]) == 0
    return {"root": root, "cfg": cfg, "data": data, "run": run}


def read_lines(path):
    return path.read_text().splitlines()


class TestGenData:
    def test_writes_manifest_and_files(self, workdir):
        data = workdir["data"]
        lines = read_lines(data / "manifest.txt")
        assert len(lines) == 8
        labeled = [ln for ln in lines if ln.endswith("1")]
        assert len(labeled) == 2  # ceil(0.5 * 4) source samples

    def test_regeneration_is_byte_identical(self, workdir, tmp_path):
        other = tmp_path / "data2"
        assert main(["gen-data", "--config", str(workdir["cfg"]), "--out", str(other)]) == 0
        for p in sorted(workdir["data"].iterdir()):
            q = other / p.name
            assert q.read_bytes() == p.read_bytes(), p.name

    def test_seed_flag_changes_content(self, workdir, tmp_path):
        other = tmp_path / "data3"
        assert main(
            ["gen-data", "--config", str(workdir["cfg"]), "--seed", "9", "--out", str(other)]
        ) == 0
        base = [p for p in sorted(workdir["data"].iterdir()) if p.suffix == ".img"]
        assert any(
            (other / p.name).read_bytes() != p.read_bytes() for p in base
        )

    def test_requires_out(self, workdir, capsys):
        assert main(["gen-data", "--config", str(workdir["cfg"])]) == 2
        assert "requires --out" in capsys.readouterr().err


class TestTrain:
    def test_artifacts_exist(self, workdir):
        run = workdir["run"]
        for name in ("step_log.csv", "eval_log.csv", "checkpoint.bin", "resolved_config.txt"):
            assert (run / name).is_file(), name

    def test_step_log_schema(self, workdir):
        lines = read_lines(workdir["run"] / "step_log.csv")
        assert lines[0] == STEP_LOG_HEADER
        assert len(lines) == 1 + 8
        first = lines[1].split(",")
        assert first[0] == "1"
        assert len(first) == len(STEP_LOG_HEADER.split(","))

    def test_eval_log_schema(self, workdir):
        lines = read_lines(workdir["run"] / "eval_log.csv")
        assert lines[0] == EVAL_HEADER
        # evals at iteration 4 and 8; 2 splits x (1 fg class + mean)
        assert len(lines) == 1 + 2 * 2 * 2
        iters = {ln.split(",")[0] for ln in lines[1:]}
        assert iters == {"4", "8"}
        splits = {ln.split(",")[1] for ln in lines[1:]}
        assert splits == {"source", "target"}
        classes = {ln.split(",")[2] for ln in lines[1:]}
        assert classes == {"1", "mean"}

    def test_resolved_config_echo(self, workdir):
        text = (workdir["run"] / "resolved_config.txt").read_text()
        assert "iterations = 8" in text
        assert "ramp_steps = 4" in text  # -1 sentinel resolved to iterations//2

    def test_rerun_is_byte_identical(self, workdir, tmp_path):
        run2 = tmp_path / "run2"
        assert main(
            ["train", "--config", str(workdir["cfg"]), "--data", str(workdir["data"]), "--out", str(run2)]
        ) == 0
        for name in ("step_log.csv", "eval_log.csv", "checkpoint.bin"):
            assert (run2 / name).read_bytes() == (workdir["run"] / name).read_bytes(), name

    def test_resume_matches_straight_run(self, workdir, tmp_path):
        cfg_half = tmp_path / "half.cfg"
        cfg_half.write_text(TINY_CFG.replace("iterations = 8", "iterations = 4"))
        half = tmp_path / "half"
        assert main(
            ["train", "--config", str(cfg_half), "--data", str(workdir["data"]), "--out", str(half)]
        ) == 0
        full = tmp_path / "resumed"
        assert main(
            [
                "train", "--config", str(workdir["cfg"]), "--data", str(workdir["data"]),
                "--out", str(full), "--resume", str(half / "checkpoint.bin"),
            ]
        ) == 0
        assert (full / "checkpoint.bin").read_bytes() == (
            workdir["run"] / "checkpoint.bin"
        ).read_bytes()
        # the resumed step log covers iterations 5..8: the straight run's tail
        tail = read_lines(workdir["run"] / "step_log.csv")[5:]
        assert read_lines(full / "step_log.csv")[1:] == tail

    def test_missing_dataset_is_io_error(self, workdir, tmp_path, capsys):
        rc = main(
            ["train", "--config", str(workdir["cfg"]), "--data", str(tmp_path / "nope"),
             "--out", str(tmp_path / "r")]
        )
        assert rc == 3
        assert "i/o error" in capsys.readouterr().err


class TestEval:
    def test_eval_writes_both_csvs(self, workdir, tmp_path, capsys):
        out = tmp_path / "ev"
        rc = main(
            ["eval", "--config", str(workdir["cfg"]), "--data", str(workdir["data"]),
             "--checkpoint", str(workdir["run"] / "checkpoint.bin"), "--out", str(out)]
        )
        assert rc == 0
        agg = read_lines(out / "eval_aggregate.csv")
        assert agg[0] == EVAL_HEADER
        assert len(agg) == 1 + 2  # class 1 + mean
        assert all(ln.split(",")[1] == "target" for ln in agg[1:])
        per = read_lines(out / "eval_samples.csv")
        assert per[0] == SAMPLE_EVAL_HEADER
        assert len(per) == 1 + 4  # 4 target samples x 1 fg class
        assert "split=target" in capsys.readouterr().out

    def test_split_source(self, workdir, tmp_path):
        out = tmp_path / "ev_src"
        rc = main(
            ["eval", "--config", str(workdir["cfg"]), "--data", str(workdir["data"]),
             "--checkpoint", str(workdir["run"] / "checkpoint.bin"),
             "--split", "source", "--out", str(out)]
        )
        assert rc == 0
        assert all(
            ln.split(",")[1] == "source" for ln in read_lines(out / "eval_aggregate.csv")[1:]
        )

    def test_missing_checkpoint_flag_is_config_error(self, workdir, tmp_path, capsys):
        rc = main(
            ["eval", "--config", str(workdir["cfg"]), "--data", str(workdir["data"]),
             "--out", str(tmp_path / "x")]
        )
        assert rc == 2
        assert "no checkpoint" in capsys.readouterr().err

    def test_corrupt_checkpoint_is_io_error(self, workdir, tmp_path):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"XXXX" + bytes(40))
        rc = main(
            ["eval", "--config", str(workdir["cfg"]), "--data", str(workdir["data"]),
             "--checkpoint", str(bad), "--out", str(tmp_path / "y")]
        )
        assert rc == 3


class TestExportFeatures:
    def test_feature_csv_shape_and_determinism(self, workdir, tmp_path):
        cfg = tmp_path / "exp.cfg"
        cfg.write_text(TINY_CFG + "export_samples = 40\n")
        outs = []
        for name in ("f1", "f2"):
            out = tmp_path / name
            rc = main(
                ["export-features", "--config", str(cfg), "--data", str(workdir["data"]),
                 "--checkpoint", str(workdir["run"] / "checkpoint.bin"), "--out", str(out)]
            )
            assert rc == 0
            outs.append((out / "features.csv").read_bytes())
        assert outs[0] == outs[1]
        lines = outs[0].decode().splitlines()
        assert lines[0] == "domain,class," + ",".join(f"f{i}" for i in range(8))
        assert len(lines) == 1 + 40
        domains = [ln.split(",")[0] for ln in lines[1:]]
        assert domains.count("source") == 20
        assert domains.count("target") == 20


class TestCheck:
    def test_check_passes_and_writes_report(self, workdir, tmp_path, capsys):
        out = tmp_path / "chk"
        rc = main(["check", "--config", str(workdir["cfg"]), "--out", str(out)])
        captured = capsys.readouterr().out
        assert rc == 0
        assert "9/9 checks passed" in captured
        report = (out / "check_report.txt").read_text()
        assert report.count("PASS") == 9

    def test_any_failure_gives_exit_1(self, monkeypatch, capsys):
        fake = [
            checks.CheckResult("alpha_gate", True, "fine", 0.01),
            checks.CheckResult("beta_gate", False, "broken", 0.02),
        ]
        monkeypatch.setattr(checks, "run_all", lambda **kw: fake)
        assert main(["check"]) == 1
        out = capsys.readouterr().out
        assert "FAIL beta_gate" in out
        assert "1/2 checks passed" in out


class TestErrorPaths:
    def test_unknown_config_key(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("betta = 1\n")
        assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
        assert "config error" in capsys.readouterr().err

    def test_negative_seed_flag(self, tmp_path, capsys):
        rc = main(["gen-data", "--seed", "-3", "--out", str(tmp_path / "o")])
        assert rc == 2
        assert "--seed" in capsys.readouterr().err

    def test_corrupt_manifest_is_io_error(self, workdir, tmp_path, capsys):
        data = tmp_path / "corrupt"
        data.mkdir()
        (data / "manifest.txt").write_text("only two fields\n")
        rc = main(
            ["train", "--config", str(workdir["cfg"]), "--data", str(data),
             "--out", str(tmp_path / "r")]
        )
        assert rc == 3


class TestEntryPoint:
    def test_module_smoke(self, tmp_path):
        """The installed console entry parses argv and runs end to end."""
        cfg = tmp_path / "run.cfg"
        cfg.write_text(TINY_CFG)
        proc = subprocess.run(
            [sys.executable, "-m", "tsaseg.cli", "gen-data", "--config", str(cfg),
             "--out", str(tmp_path / "d")],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0, proc.stderr
        assert "wrote 8 samples (2 labeled)" in proc.stdout
