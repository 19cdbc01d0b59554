import csv

import numpy as np
import pytest
from click.testing import CliRunner

from pphomog.cli import cli
from pphomog.config import parse_config
from pphomog.csvio import Table, write_csv
from pphomog.errors import (ConfigFileError, ConfigSemanticsError,
                            ConfigSyntaxError)

from conftest import CONFIG_DIR

MINIMAL = """
[problem]
d = 1
N = 1

[coefficients.E]
family = "trig"
mean = 2.0
amp = 1.0
k = [1]
"""


class TestParseConfig:
    def test_minimal_config_gets_documented_defaults(self, tmp_path):
        p = tmp_path / "run.toml"
        p.write_text(MINIMAL)
        cfg = parse_config(p)
        assert cfg.dt == 0.01 and cfg.T == 0.5
        assert cfg.scheme == "implicit-euler"
        assert cfg.corrector_mode == "stepped"
        assert cfg.macro_n == 33 and cfg.cell_n == 64
        assert cfg.eps == [0.25]
        cs = cfg.build_set()
        assert cs.e.depends_y and not cs.m.depends_y

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigFileError):
            parse_config(tmp_path / "nope.toml")

    def test_syntax_error(self, tmp_path):
        p = tmp_path / "bad.toml"
        p.write_text("[problem\nd = 1")
        with pytest.raises(ConfigSyntaxError):
            parse_config(p)

    def test_non_reciprocal_eps_rejected(self, tmp_path):
        p = tmp_path / "run.toml"
        p.write_text("[problem]\neps = [0.3]\n")
        with pytest.raises(ConfigSemanticsError, match="1/k"):
            parse_config(p)

    def test_negative_dt_rejected(self, tmp_path):
        p = tmp_path / "run.toml"
        p.write_text("[problem]\ndt = -0.1\n")
        with pytest.raises(ConfigSemanticsError, match="dt"):
            parse_config(p)

    def test_all_violations_reported_at_once(self, tmp_path):
        p = tmp_path / "run.toml"
        p.write_text("[problem]\nd = 3\ndt = -0.1\neps = [0.3]\n"
                     "[grids]\nmacro_n = 2\n")
        with pytest.raises(ConfigSemanticsError) as err:
            parse_config(p)
        text = str(err.value)
        for frag in ("problem.d", "problem.dt", "problem.eps", "grids.macro_n"):
            assert frag in text

    def test_unknown_family_listed(self, tmp_path):
        p = tmp_path / "run.toml"
        p.write_text(MINIMAL + '\n[coefficients.K]\nfamily = "mystery"\n')
        with pytest.raises(ConfigSemanticsError, match="mystery"):
            parse_config(p)

    def test_shipped_configs_parse(self):
        for name in ("constant_sanity", "harmonic_1d", "separable_2d",
                     "a3_violating", "converge_sweep", "nonlocal_memory"):
            cfg = parse_config(CONFIG_DIR / f"{name}.toml")
            cfg.build_set()


class TestWriteCsv:
    def test_empty_table_header_only(self, tmp_path):
        path = tmp_path / "t.csv"
        write_csv(Table(["a", "b"]), path)
        assert path.read_bytes() == b"a,b\r\n"

    def test_roundtrip_one_row(self, tmp_path):
        path = tmp_path / "t.csv"
        tab = Table(["x", "y"])
        tab.append(0.1, 1.0 / 3.0)
        write_csv(tab, path)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["x", "y"]
        assert float(rows[1][0]) == 0.1
        assert float(rows[1][1]) == 1.0 / 3.0

    def test_bytewise_reproducible(self, tmp_path):
        tab = Table(["v"])
        tab.append(np.pi)
        write_csv(tab, tmp_path / "a.csv")
        write_csv(tab, tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


class TestCliCommands:
    def run(self, *args):
        return CliRunner().invoke(cli, list(args))

    def test_check_passes_on_harmonic_config(self, tmp_path):
        res = self.run("check", "--config", str(CONFIG_DIR / "harmonic_1d.toml"),
                       "--out", str(tmp_path))
        assert res.exit_code == 0
        assert (tmp_path / "assumption_report.csv").exists()

    def test_check_rejects_a3_violation_with_margin_printed(self, tmp_path):
        res = self.run("check", "--config", str(CONFIG_DIR / "a3_violating.toml"),
                       "--out", str(tmp_path))
        assert res.exit_code == 1
        assert "a3_margin=-5" in res.output

    def test_check_missing_file_exit_code(self):
        res = self.run("check", "--config", "/no/such/file.toml")
        assert res.exit_code == 3

    def test_check_syntax_error_exit_code(self, tmp_path):
        p = tmp_path / "bad.toml"
        p.write_text("[problem\n")
        res = self.run("check", "--config", str(p))
        assert res.exit_code == 4

    def test_check_semantic_error_exit_code(self, tmp_path):
        p = tmp_path / "bad.toml"
        p.write_text("[problem]\neps = [0.3]\n")
        res = self.run("check", "--config", str(p))
        assert res.exit_code == 5

    def test_cell_constant_config_reproduces_plain_tensors(self, tmp_path):
        res = self.run("cell", "--config", str(CONFIG_DIR / "constant_sanity.toml"),
                       "--out", str(tmp_path))
        assert res.exit_code == 0
        with open(tmp_path / "effective_tensors.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        for row in rows:
            assert float(row["Estar_11"]) == pytest.approx(1.0, abs=1e-12)
            assert float(row["Dstar_1_11"]) == pytest.approx(0.2, abs=1e-12)

    def test_micro_writes_trajectory_and_energy(self, tmp_path):
        res = self.run("micro", "--config", str(CONFIG_DIR / "constant_sanity.toml"),
                       "--out", str(tmp_path))
        assert res.exit_code == 0
        assert (tmp_path / "micro_eps1_4.csv").exists()
        assert (tmp_path / "energy_eps1_4.csv").exists()
        assert "PASS" in res.output

    def test_macro_writes_trajectory_and_memory(self, tmp_path):
        res = self.run("macro", "--config", str(CONFIG_DIR / "nonlocal_memory.toml"),
                       "--out", str(tmp_path))
        assert res.exit_code == 0
        assert (tmp_path / "macro.csv").exists()
        assert (tmp_path / "macro_memory.csv").exists()

    def test_residual_command(self, tmp_path):
        res = self.run("residual", "--config", str(CONFIG_DIR / "constant_sanity.toml"),
                       "--out", str(tmp_path))
        assert res.exit_code == 0
        assert (tmp_path / "residual.csv").exists()

    def test_converge_refuses_under_resolved(self, tmp_path):
        p = tmp_path / "run.toml"
        p.write_text(MINIMAL + "\n[converge]\nmicro_intervals = [16]\n"
                     "[grids]\nmacro_n = 17\n")
        res = self.run("converge", "--config", str(p), "--out", str(tmp_path))
        assert res.exit_code == 5
        assert "under-resolved" in res.output

    def test_rerun_produces_byte_identical_outputs(self, tmp_path):
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        cfgp = str(CONFIG_DIR / "constant_sanity.toml")
        assert self.run("micro", "--config", cfgp, "--out", str(out1)).exit_code == 0
        assert self.run("micro", "--config", cfgp, "--out", str(out2)).exit_code == 0
        a = (out1 / "micro_eps1_4.csv").read_bytes()
        b = (out2 / "micro_eps1_4.csv").read_bytes()
        assert a == b
