"""Command-line interface tests.

Every subcommand is exercised through main(argv) with a micro-scale
config file, checking exit codes, output files, and the documented
configuration precedence (flag > ablation cell > config file > preset).
"""

import numpy as np
import pytest

import fscil.cli as cli
from fscil.cli import main
from fscil.errors import StreamValidationError
from fscil.protocol import inspect_dataset
from fscil.report import read_csv_summary, read_run_report

MICRO_CONFIG = """\
# micro experiment, small enough for fast tests
num_classes = 10
samples_per_class = 8
image_size = 8
base_classes = 3
way = 2
shot = 2
num_incremental = 2
eval_per_class = 2
pretext_classes = 3
patch_size = 4
embed_dim = 8
num_heads = 2
depth = 2
tuned_layers = 1
epochs_pretrain = 1
epochs_base = 1
epochs_incremental = 1
batch_size = 8
fisher_samples = 0
lr_pretrain = 0.001
alpha = 0.25
"""


@pytest.fixture()
def micro_cfg(tmp_path):
    path = tmp_path / "micro.cfg"
    path.write_text(MICRO_CONFIG, encoding="utf-8")
    return str(path)


def usage_error(argv) -> int:
    with pytest.raises(SystemExit) as exc:
        main(argv)
    return exc.value.code


class TestGenData:
    def test_micro_generation(self, micro_cfg, tmp_path, capsys):
        out = str(tmp_path / "d.pvds")
        assert main(["gen-data", "--config", micro_cfg, "--seed", "5", "-o", out]) == 0
        header = inspect_dataset(out)
        assert header.num_classes == 10
        lines = capsys.readouterr().out.splitlines()
        assert "class_000 8" in lines
        assert any(line.startswith("wrote ") for line in lines)
        # embedding table lands next to the dataset by default
        assert (tmp_path / "d.embeddings.txt").exists()

    def test_same_flags_are_byte_identical(self, micro_cfg, tmp_path):
        a, b = str(tmp_path / "a.pvds"), str(tmp_path / "b.pvds")
        main(["gen-data", "--config", micro_cfg, "--seed", "5", "-o", a])
        main(["gen-data", "--config", micro_cfg, "--seed", "5", "-o", b])
        assert (tmp_path / "a.pvds").read_bytes() == (tmp_path / "b.pvds").read_bytes()
        assert (tmp_path / "a.embeddings.txt").read_text() == (
            tmp_path / "b.embeddings.txt"
        ).read_text()

    def test_preset_class_arithmetic(self, tmp_path):
        out = str(tmp_path / "preset.pvds")
        assert main(["gen-data", "--preset", "cifar-mini", "--seed", "7", "-o", out]) == 0
        assert inspect_dataset(out).num_classes == 56

    def test_negative_noise_is_usage_error(self, micro_cfg, tmp_path):
        code = usage_error(
            ["gen-data", "--config", micro_cfg, "-o", str(tmp_path / "x.pvds"),
             "--noise-sigma", "-1"]
        )
        assert code == 2

    def test_unknown_preset_is_usage_error(self, tmp_path):
        code = usage_error(
            ["gen-data", "--preset", "imagenet", "-o", str(tmp_path / "x.pvds")]
        )
        assert code == 2

    def test_seed_env_fallback(self, micro_cfg, tmp_path, monkeypatch):
        flagged = str(tmp_path / "flagged.pvds")
        main(["gen-data", "--config", micro_cfg, "--seed", "5", "-o", flagged])
        monkeypatch.setenv(cli.SEED_ENV, "5")
        env_based = str(tmp_path / "env.pvds")
        main(["gen-data", "--config", micro_cfg, "-o", env_based])
        assert (tmp_path / "flagged.pvds").read_bytes() == (
            tmp_path / "env.pvds"
        ).read_bytes()

    def test_bad_seed_env_is_usage_error(self, micro_cfg, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.SEED_ENV, "not-a-seed")
        code = usage_error(
            ["gen-data", "--config", micro_cfg, "-o", str(tmp_path / "x.pvds")]
        )
        assert code == 2


class TestConfigFile:
    def test_unknown_key(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("warp_factor = 9\n")
        assert usage_error(["run", "--config", str(bad)]) == 2

    def test_bad_value(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("epochs_base = soon\n")
        assert usage_error(["run", "--config", str(bad)]) == 2

    def test_missing_equals(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("epochs_base\n")
        assert usage_error(["run", "--config", str(bad)]) == 2

    def test_unreadable_file(self, tmp_path):
        assert usage_error(["run", "--config", str(tmp_path / "absent.cfg")]) == 2


class TestRun:
    def test_micro_run_writes_report(self, micro_cfg, tmp_path, capsys):
        report_path = str(tmp_path / "r.txt")
        code = main(
            ["run", "--config", micro_cfg, "--seed", "2", "--report", report_path]
        )
        assert code == 0
        report = read_run_report(report_path)
        assert len(report.sessions) == 3
        assert [s.seen_classes for s in report.sessions] == [3, 5, 7]
        out = capsys.readouterr().out
        assert "a_base=" in out and "sessions=3" in out
        # config file override shows up in the snapshot
        assert dict(report.config)["alpha"] == "0.25"

    def test_flag_beats_config_file(self, micro_cfg, tmp_path):
        report_path = str(tmp_path / "r.txt")
        main(
            ["run", "--config", micro_cfg, "--seed", "2", "--alpha", "0.125",
             "--report", report_path]
        )
        assert dict(read_run_report(report_path).config)["alpha"] == "0.125"

    def test_run_from_dataset_and_embeddings(self, micro_cfg, tmp_path):
        data = str(tmp_path / "d.pvds")
        main(["gen-data", "--config", micro_cfg, "--seed", "3", "-o", data])
        report_path = str(tmp_path / "r.txt")
        csv_path = str(tmp_path / "r.csv")
        code = main(
            ["run", "--config", micro_cfg, "--seed", "3", "--data", data,
             "--embeddings", str(tmp_path / "d.embeddings.txt"),
             "--report", report_path, "--csv", csv_path]
        )
        assert code == 0
        summary = read_csv_summary(csv_path)
        assert len(summary.sessions) == 3

    def test_reports_are_byte_identical(self, micro_cfg, tmp_path):
        a, b = str(tmp_path / "a.txt"), str(tmp_path / "b.txt")
        main(["run", "--config", micro_cfg, "--seed", "4", "--report", a])
        main(["run", "--config", micro_cfg, "--seed", "4", "--report", b])
        assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()

    def test_ablation_cell_flags_apply(self, micro_cfg, tmp_path):
        report_path = str(tmp_path / "r.txt")
        code = main(
            ["run", "--config", micro_cfg, "--seed", "2",
             "--ablation", "baseline-finetune", "--report", report_path]
        )
        assert code == 0
        table = dict(read_run_report(report_path).config)
        assert table["finetune_all"] == "true"
        assert table["use_prefix_prompt"] == "false"

    def test_flag_beats_ablation_cell(self, micro_cfg, tmp_path):
        report_path = str(tmp_path / "r.txt")
        code = main(
            ["run", "--config", micro_cfg, "--seed", "2", "--ablation", "prompted",
             "--use-divergence", "--report", report_path]
        )
        assert code == 0
        assert dict(read_run_report(report_path).config)["use_divergence"] == "true"

    def test_unknown_ablation_cell(self, micro_cfg):
        assert usage_error(["run", "--config", micro_cfg, "--ablation", "bogus"]) == 2

    def test_corrupt_dataset_file(self, micro_cfg, tmp_path, capsys):
        bad = tmp_path / "bad.pvds"
        bad.write_bytes(b"not a dataset")
        code = main(["run", "--config", micro_cfg, "--data", str(bad)])
        assert code == 3
        assert "cannot load dataset" in capsys.readouterr().err

    def test_dataset_too_small_for_split(self, micro_cfg, tmp_path, capsys):
        data = str(tmp_path / "d.pvds")
        main(["gen-data", "--config", micro_cfg, "--seed", "3", "-o", data])
        code = main(
            ["run", "--config", micro_cfg, "--data", data, "--eval-per-class", "10"]
        )
        assert code == 3
        assert capsys.readouterr().err.startswith("error:")

    def test_embedding_dimension_mismatch(self, micro_cfg, tmp_path, capsys):
        data = str(tmp_path / "d.pvds")
        main(["gen-data", "--config", micro_cfg, "--seed", "3", "-o", data])
        code = main(
            ["run", "--config", micro_cfg, "--data", data, "--embed-dim", "16",
             "--embeddings", str(tmp_path / "d.embeddings.txt")]
        )
        assert code == 3
        assert "cannot load embeddings" in capsys.readouterr().err

    def test_stream_validation_failure_lists_violations(
        self, micro_cfg, tmp_path, capsys, monkeypatch
    ):
        def boom(*args, **kwargs):
            raise StreamValidationError(["class 3 appears in sessions 0 and 1"])

        monkeypatch.setattr(cli, "prepare_assets", boom)
        code = main(["run", "--config", micro_cfg, "--report", str(tmp_path / "r.txt")])
        assert code == 3
        err = capsys.readouterr().err
        assert "validation failed" in err
        assert "class 3 appears in sessions 0 and 1" in err


class TestAblate:
    def test_micro_grid(self, micro_cfg, tmp_path, capsys):
        out = str(tmp_path / "table.txt")
        csv_path = str(tmp_path / "table.csv")
        code = main(
            ["ablate", "--config", micro_cfg, "--seeds", "2",
             "--cells", "baseline-finetune,full", "--sweep", "layers", "0",
             "--out", out, "--csv", csv_path, "--quiet"]
        )
        assert code == 0
        lines = (tmp_path / "table.txt").read_text().splitlines()
        assert lines[0] == "cell\ta_base\ta_last\ta_avg\tfgt"
        cells = [line.split("\t")[0] for line in lines[1:]]
        assert cells == ["baseline-finetune", "full", "layers-0"]
        rows = (tmp_path / "table.csv").read_text().splitlines()
        assert rows[0] == "cell,a_base,a_last,a_avg,fgt"
        value = float(rows[1].split(",")[1])
        assert 0.0 <= value <= 1.0
        assert "table.txt" not in capsys.readouterr().err

    @pytest.mark.parametrize(
        "argv_tail",
        [
            ["--seeds", "0"],
            ["--cells", "bogus"],
            ["--sweep", "widths", "0,2"],
            ["--sweep", "layers", "a,b"],
            ["--sweep", "layers", ""],
        ],
    )
    def test_usage_errors(self, micro_cfg, argv_tail):
        assert usage_error(["ablate", "--config", micro_cfg] + argv_tail) == 2

    def test_assert_order_failure_exits_4(self, micro_cfg, tmp_path, capsys, monkeypatch):
        monkeypatch.setattr(cli, "check_ablation_order", lambda rows: ["forced problem"])
        code = main(
            ["ablate", "--config", micro_cfg, "--seeds", "1", "--cells", "full",
             "--assert-order", "--out", str(tmp_path / "t.txt"), "--quiet"]
        )
        assert code == 4
        assert "assertion failed: forced problem" in capsys.readouterr().err

    def test_assert_order_clean_exit_0(self, micro_cfg, tmp_path, capsys):
        # a single cell triggers none of the ordering comparisons
        code = main(
            ["ablate", "--config", micro_cfg, "--seeds", "1", "--cells", "full",
             "--assert-order", "--out", str(tmp_path / "t.txt"), "--quiet"]
        )
        assert code == 0
        assert "ordering assertions hold" in capsys.readouterr().out


class TestGradCheck:
    def test_suite_passes(self, capsys):
        assert main(["grad-check"]) == 0
        assert "gradient checks passed" in capsys.readouterr().out

    def test_injected_fault_fails(self, capsys):
        assert main(["grad-check", "--fault", "matmul"]) == 1
        out = capsys.readouterr().out
        assert "FAILED: worst offender matmul" in out

    def test_unmatched_fault_is_usage_error(self):
        assert usage_error(["grad-check", "--fault", "bogus"]) == 2


class TestReport:
    def make_reports(self, micro_cfg, tmp_path, seeds=(1, 2, 3)):
        paths = []
        for seed in seeds:
            path = str(tmp_path / f"r{seed}.txt")
            main(["run", "--config", micro_cfg, "--seed", str(seed),
                  "--report", path])
            paths.append(path)
        return paths

    def test_merge_medians(self, micro_cfg, tmp_path, capsys):
        paths = self.make_reports(micro_cfg, tmp_path)
        csv_path = str(tmp_path / "merged.csv")
        code = main(["report", *paths, "--csv", csv_path])
        assert code == 0
        out = capsys.readouterr().out
        assert "merged 3 report(s)" in out
        reports = [read_run_report(p) for p in paths]
        expected = float(np.median([r.a_avg for r in reports]))
        assert f"a_avg\t{expected:.6f}" in out
        rows = (tmp_path / "merged.csv").read_text().splitlines()
        assert len(rows) == 4  # header + one row per session

    def test_missing_file(self, tmp_path, capsys):
        assert main(["report", str(tmp_path / "absent.txt")]) == 3
        assert "error" in capsys.readouterr().err

    def test_malformed_file(self, tmp_path, capsys):
        bad = tmp_path / "bad.txt"
        bad.write_text("definitely not a report\n")
        assert main(["report", str(bad)]) == 3
        assert "error" in capsys.readouterr().err
