import json
import subprocess
import sys

import pytest

from lorelab.cli import main
from lorelab.harness.records import read_csv

FAST = ["--epochs", "1", "--attack-steps", "2"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    code = main(["train", "--method", "lore", "--rho", "0.1", "--k", "5", "--eps", "2", *FAST, "--out", str(out)])
    assert code == 0
    return out


class TestTrain:
    def test_outputs(self, trained):
        names = {p.name for p in trained.iterdir()}
        assert {"metrics.csv", "final.csv", "model.ckpt", "manifest.json"} <= names

    def test_manifest_resolves_defaults(self, trained):
        m = json.loads((trained / "manifest.json").read_text())
        cfg = m["config"]
        assert cfg["attack"]["epsilon"] == pytest.approx(2 / 255)
        assert cfg["K"] == 5 and cfg["eta_omega"] == 5e-4 and cfg["rho"] == 0.1
        assert cfg["log_every"] == 10
        assert m["primal_per_dual"] == [5]

    def test_attack_stamp(self, trained):
        first = (trained / "final.csv").read_text().splitlines()[0]
        assert first.startswith("# train attack: pgd2-zero-eps2/255") and "pgd40-uniform" in first

    def test_sweep_of_one_matches_train(self, trained, tmp_path):
        code = main(["sweep", "--method", "lore", "--rho-list", "0.1", "--k", "5", "--eps", "2", *FAST,
                     "--out", str(tmp_path)])
        assert code == 0
        assert read_csv(tmp_path / "final.csv") == read_csv(trained / "final.csv")
        header, rows = read_csv(tmp_path / "pareto.csv")
        assert header == ["rho", "clean_acc", "robust_acc"] and len(rows) == 1


class TestEval:
    def test_zero_radius(self, trained, tmp_path):
        assert main(["eval", "--ckpt", str(trained / "model.ckpt"), "--eps", "0", "--out", str(tmp_path)]) == 0
        header, rows = read_csv(tmp_path / "eval.csv")
        assert header == ["clean_acc", "robust_acc", "attack"]
        assert rows[0][0] == rows[0][1]

    def test_noise_curve(self, trained, tmp_path):
        code = main(["noise-curve", "--ckpt", str(trained / "model.ckpt"), "--sigma-list", "0,0.5",
                     "--out", str(tmp_path)])
        assert code == 0
        _, rows = read_csv(tmp_path / "noise.csv")
        assert [r[0] for r in rows] == ["0.0", "0.5"]

    def test_missing_checkpoint(self, tmp_path):
        assert main(["eval", "--ckpt", str(tmp_path / "none.ckpt"), "--out", str(tmp_path)]) == 1


class TestTools:
    def test_audit(self, tmp_path):
        assert main(["audit-cosine", "--samples", "2000", "--out", str(tmp_path)]) == 0
        header, rows = read_csv(tmp_path / "audit.csv")
        assert header == ["rho", "samples", "violations", "max_deviation", "bound"]
        assert len(rows) == 5 and all(r[2] == "0" for r in rows)

    def test_duality(self, tmp_path):
        spec = tmp_path / "toy.json"
        spec.write_text(json.dumps(dict(a0=1.0, data=[0.2, 0.8], epsilon=0.1, rho_list=[0.0, 0.05],
                                        grid={"a": [0, 2, 201]})))
        assert main(["duality-check", "--toy-spec", str(spec), "--out", str(tmp_path / "o")]) == 0
        header, rows = read_csv(tmp_path / "o" / "duality.csv")
        assert header == ["rho", "R", "R_rho", "feasible_points"] and len(rows) == 2

    def test_bad_toy_spec(self, tmp_path):
        spec = tmp_path / "toy.json"
        spec.write_text("{}")
        assert main(["duality-check", "--toy-spec", str(spec), "--out", str(tmp_path)]) == 2


class TestUsage:
    @pytest.mark.parametrize("argv", [
        ["train", "--bogus"],
        ["train", "--method", "sgd"],
        ["train", "--method", "fare", "--naive-lambda", "1"],
        ["train", "--method", "fare", "--dual", "scalar"],
        ["train", "--k", "0"],
        ["train", "--rho", "-1"],
        ["train", "--data", "mnist"],
        ["train", "--data", "idx:onlyone"],
        ["sweep", "--rho-list", "0.3,0.1"],
        ["sweep", "--rho-list", "x"],
        ["audit-cosine", "--rho-list", "-0.1"],
        [],
    ])
    def test_exit_two(self, argv, tmp_path):
        assert main(argv + ["--out", str(tmp_path)] if argv else argv) == 2

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "lorelab", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0 and "duality-check" in proc.stdout
