import json

import numpy as np
import pytest

from donprec.cli import main
from donprec.containers import read_tensorpack


def write_config(tmp_path, payload, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return path


@pytest.fixture
def diff_config(tmp_path):
    return write_config(tmp_path, {
        "problem": {"variant": "diff", "dim": 1, "cells": 64,
                    "coef_sigma": 0.0, "coef_mean": 1.0},
        "solver": {"type": "pcg"},
        "preconditioner": "mult(jacobi(nu=3), tb_coarse(k=8, model='sine'), jacobi(nu=3))",
        "seeds": [0, 1],
        "stop": {"rel_res": 1e-9, "max_iters": 500},
    })


class TestSolveCommand:
    def test_exit_zero_and_csv(self, diff_config, tmp_path, capsys):
        out = tmp_path / "solve.csv"
        code = main(["solve", "--config", str(diff_config), "--output", str(out)])
        assert code == 0
        text = out.read_text()
        assert text.startswith("seed,problem,preconditioner,iterations")
        assert "aggregate" in text

    def test_repeat_runs_byte_identical(self, diff_config, tmp_path):
        out1 = tmp_path / "a.csv"
        out2 = tmp_path / "b.csv"
        main(["solve", "--config", str(diff_config), "--output", str(out1)])
        main(["solve", "--config", str(diff_config), "--output", str(out2)])
        assert out1.read_bytes() == out2.read_bytes()

    def test_figures_flag_renders_png(self, diff_config, tmp_path):
        out = tmp_path / "solve.csv"
        code = main(["solve", "--config", str(diff_config), "--output", str(out),
                     "--figures"])
        assert code == 0
        assert out.with_suffix(".png").exists()

    def test_nonconverged_run_exits_nonzero(self, tmp_path):
        cfg = write_config(tmp_path, {
            "problem": {"variant": "diff", "dim": 1, "cells": 64,
                        "coef_sigma": 0.0, "coef_mean": 1.0},
            "solver": {"type": "pcg"},
            "seeds": [0],
            "stop": {"rel_res": 1e-12, "abs_res": 1e-300, "max_iters": 3},
        })
        out = tmp_path / "x.csv"
        assert main(["solve", "--config", str(cfg), "--output", str(out)]) == 1

    def test_bad_config_reports_error(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"problem": {"variant": "nope"}})
        code = main(["solve", "--config", str(cfg)])
        assert code == 2
        assert "error:" in capsys.readouterr().err


class TestStudyCommands:
    def test_eigen_study_csv_and_png(self, tmp_path):
        cfg = write_config(tmp_path, {
            "problem": {"variant": "helm1d", "k_h": 60.0},
            "seeds": [0],
            "eigen": {"panels": [{"k_h": 0.0, "cells": 24}], "gammas": [1.0, "auto"],
                      "tb_ks": [3]},
        })
        out = tmp_path / "eigen.csv"
        code = main(["eigen-study", "--config", str(cfg), "--output", str(out),
                     "--figures"])
        assert code == 0
        header = out.read_text().splitlines()[0]
        assert header.startswith("panel,k_h,cells,mode,a_eigenvalue")
        assert out.with_suffix(".png").exists()

    def test_mg_study(self, tmp_path):
        cfg = write_config(tmp_path, {
            "problem": {"variant": "diff", "dim": 1, "cells": 32,
                        "coef_sigma": 0.0, "coef_mean": 1.0},
            "solver": {"type": "fgmres"},
            "seeds": [0],
            "stop": {"rel_res": 1e-9, "max_iters": 100},
            "mg": {"schedules": ["J,D"]},
        })
        out = tmp_path / "mg.csv"
        assert main(["mg-study", "--config", str(cfg), "--output", str(out)]) == 0
        assert "J,D" in out.read_text().replace('"', "")

    def test_asm_study(self, tmp_path):
        cfg = write_config(tmp_path, {
            "problem": {"variant": "diff", "dim": 2, "cells": 12,
                        "coef_sigma": 0.0, "coef_mean": 1.0},
            "solver": {"type": "pcg"},
            "seeds": [0],
            "stop": {"rel_res": 1e-9, "max_iters": 2000},
            "asm": {"s": [4], "overlap": 0, "coarse": [{"k": 0}]},
        })
        out = tmp_path / "asm.csv"
        assert main(["asm-study", "--config", str(cfg), "--output", str(out),
                     "--figures"]) == 0
        assert out.with_suffix(".png").exists()


class TestDatasetCommands:
    def test_gen_verify_dump_roundtrip(self, tmp_path):
        cfg = write_config(tmp_path, {
            "problem": {"variant": "diff", "dim": 1, "cells": 8},
        })
        data = tmp_path / "data.tpk"
        code = main(["gen-dataset", "--config", str(cfg), "--out", str(data),
                     "--samples", "2", "--seed", "0"])
        assert code == 0
        tensors, meta = read_tensorpack(data)
        assert tensors["targets"].shape == (2, 9)
        assert meta["n_samples"] == 2

        assert main(["verify-dataset", str(data)]) == 0

        basis = tmp_path / "basis.tpk"
        code = main(["dump-basis", "--config", str(cfg), "--out", str(basis),
                     "--model", "sine", "--k", "4"])
        assert code == 0
        tensors, _ = read_tensorpack(basis)
        assert tensors["orthonormal"].shape[0] == 9

    def test_verify_rejects_tampered_dataset(self, tmp_path):
        cfg = write_config(tmp_path, {"problem": {"variant": "diff", "dim": 1, "cells": 8}})
        data = tmp_path / "data.tpk"
        main(["gen-dataset", "--config", str(cfg), "--out", str(data),
              "--samples", "1", "--seed", "0"])
        tensors, meta = read_tensorpack(data)
        tensors["targets"][0, 4] += 1.0
        from donprec.containers import write_tensorpack

        write_tensorpack(data, tensors, meta)
        assert main(["verify-dataset", str(data)]) == 1
