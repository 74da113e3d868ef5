"""Command-line behavior: output formats, exit codes, CSV schema."""

import csv
import io
import os

import pytest

from polypack.cli import BUILTIN_KERNELS, CSV_COLUMNS, main

PRISM = """A(i, j) := B(i, j, l) * C(j, l)
B_U(i, j, l) := (0 <= i < M) * (i <= j < N) * (0 <= l < Q)
"""


def run_cli(*argv):
    return main(list(argv))


class TestCompile:
    def test_spmv_d_prints_rank_and_size(self, capsys):
        assert run_cli("compile", "--kernel", "SpMV_D") == 0
        out = capsys.readouterr().out
        assert "size=n_i rank=i" in out
        assert "j = i" in out  # degenerate level shown as an assignment

    def test_ttm_ut_prints_the_linearization_polynomial(self, capsys):
        assert run_cli("compile", "--kernel", "TTM_UT") == 0
        out = capsys.readouterr().out
        assert "n_l*j + l" in out
        assert "n_j*n_l*i" in out

    def test_loop_nest_pseudocode(self, capsys):
        assert run_cli("compile", "--kernel", "SpMV_UT") == 0
        out = capsys.readouterr().out
        # i <= j < n_j implies i < n_j; the projected bound keeps it
        assert "for i = 0 .. min(n_i - 1, n_j - 1):" in out
        assert "for j = i .. n_j - 1:" in out
        assert "A[i] += B[i, j] * C[j]" in out

    def test_emit_c_writes_one_file_per_summand(self, tmp_path, capsys):
        target = os.path.join(tmp_path, "cdir")
        assert run_cli("compile", "--kernel", "SpMV_L",
                       "--emit-c", target) == 0
        names = sorted(os.listdir(target))
        assert names == ["A_0.c", "A_1.c"]
        text = open(os.path.join(target, "A_1.c")).read()
        assert text.startswith("/* generated kernel code */")
        assert "void a_s1(" in text

    def test_malformed_stur_exits_2(self, tmp_path, capsys):
        bad = os.path.join(tmp_path, "bad.stur")
        with open(bad, "w") as f:
            f.write("A(i) := B(i, j\n")
        assert run_cli("compile", "--stur", bad) == 2
        assert "error:" in capsys.readouterr().err

    def test_missing_file_exits_2(self, capsys):
        assert run_cli("compile", "--stur", "/nonexistent/x.stur") == 2

    def test_unknown_kernel_rejected_by_parser(self):
        with pytest.raises(SystemExit) as e:
            run_cli("compile", "--kernel", "NOPE")
        assert e.value.code == 2


class TestRun:
    def test_spmv_d_passes(self, capsys):
        assert run_cli("run", "--kernel", "SpMV_D", "--seed", "1") == 0
        assert "VERIFY: PASS maxrel=" in capsys.readouterr().out

    @pytest.mark.parametrize("kernel", ["TTM_J", "THP_I", "MTT_JUT", "SpMV_L"])
    def test_one_kernel_per_family(self, kernel, capsys):
        assert run_cli("run", "--kernel", kernel, "--dtype", "i64",
                       "--seed", "3") == 0
        assert "VERIFY: PASS maxrel=0.000e+00" in capsys.readouterr().out

    def test_workers_flag(self, capsys):
        assert run_cli("run", "--kernel", "THP_DP", "--dtype", "i64",
                       "--workers", "2") == 0
        assert "PASS" in capsys.readouterr().out

    def test_corrupt_index_fails_with_exit_1(self, capsys):
        assert run_cli("run", "--kernel", "SpMV_UT", "--dtype", "i64",
                       "--seed", "3", "--corrupt-index") == 1
        assert "VERIFY: FAIL" in capsys.readouterr().out

    def test_corrupt_index_needs_compressed_inputs(self, capsys):
        assert run_cli("run", "--kernel", "SpMV_UT", "--compression", "none",
                       "--corrupt-index") == 2
        assert "error:" in capsys.readouterr().err

    def test_stur_file(self, tmp_path, capsys):
        path = os.path.join(tmp_path, "prism.stur")
        with open(path, "w") as f:
            f.write(PRISM)
        assert run_cli("run", "--stur", path, "--bind", "M=5", "--bind", "N=6",
                       "--bind", "Q=3", "--dtype", "i64") == 0
        assert "PASS" in capsys.readouterr().out

    def test_missing_binding_exits_2(self, tmp_path, capsys):
        path = os.path.join(tmp_path, "prism.stur")
        with open(path, "w") as f:
            f.write(PRISM)
        assert run_cli("run", "--stur", path) == 2

    def test_bad_bind_syntax_rejected(self):
        with pytest.raises(SystemExit) as e:
            run_cli("run", "--kernel", "SpMV_D", "--bind", "n_i")
        assert e.value.code == 2


class TestBench:
    def test_csv_schema_and_rows(self, capsys):
        assert run_cli("bench", "--kernel", "SpMV_D", "--kernel", "SpMV_UT",
                       "--compression", "none",
                       "--compression", "input+output",
                       "--dtype", "i64") == 0
        out = capsys.readouterr().out
        rows = list(csv.DictReader(io.StringIO(out)))
        assert list(rows[0]) == CSV_COLUMNS
        assert len(rows) == 4  # 2 kernels x 2 levels, input order preserved
        assert [r["kernel"] for r in rows] == \
            ["SpMV_D", "SpMV_D", "SpMV_UT", "SpMV_UT"]
        assert all(r["verify"] == "PASS" for r in rows)

    def test_rate_column_exact_rational(self, capsys):
        assert run_cli("bench", "--kernel", "SpMV_D", "--dtype", "i64") == 0
        out = capsys.readouterr().out
        row = next(csv.DictReader(io.StringIO(out)))
        # n=8: dense 64+8+8, stored 8+8+8
        assert row["elements_dense"] == "80"
        assert row["elements_compressed"] == "24"
        assert row["rate"] == "10/3"
        assert row["binding"] == "n_i=8;n_j=8"

    def test_csv_file_output(self, tmp_path, capsys):
        target = os.path.join(tmp_path, "out.csv")
        assert run_cli("bench", "--kernel", "THP_DP", "--dtype", "i64",
                       "--csv", target) == 0
        rows = list(csv.DictReader(open(target)))
        assert len(rows) == 1
        assert int(rows[0]["runtime_ns"]) > 0

    def test_diagonal_rate_beats_triangular(self, capsys):
        # the same qualitative ordering the footprint study reports
        assert run_cli("bench", "--kernel", "SpMV_D", "--kernel", "SpMV_UT",
                       "--bind", "n_i=100", "--bind", "n_j=100",
                       "--dtype", "i64") == 0
        rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
        from fractions import Fraction
        rates = {r["kernel"]: Fraction(r["rate"]) for r in rows}
        assert rates["SpMV_D"] > rates["SpMV_UT"]


class TestBuiltins:
    def test_twelve_kernels_defined(self):
        assert sorted(BUILTIN_KERNELS) == sorted([
            "TTM_DP", "TTM_J", "TTM_UT", "THP_DP", "THP_I", "THP_J",
            "MTT_D", "MTT_JUT", "MTT_J", "SpMV_L", "SpMV_UT", "SpMV_D"])

    def test_defaults_cover_their_shapes(self):
        for k in BUILTIN_KERNELS.values():
            for syms in k.shapes.values():
                for s in syms:
                    assert s in k.defaults, (k.name, s)
