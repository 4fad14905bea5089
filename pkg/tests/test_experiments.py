import dataclasses
import json

import numpy as np
import pytest

from lorelab.attacks import AttackConfig
from lorelab.harness.experiments import (
    DESK_TRAIN,
    SweepResult,
    ToySpec,
    cosine_audit,
    desk_config,
    k_ablation,
    paired_runs,
    run,
    sweep_rho,
    toy_adv_loss,
    weak_duality_check,
)
from lorelab.harness.records import csv_text
from lorelab.optimize import TrainConfig

from helpers import DUALITY_TOYS as TOYS, blobs_lab


@pytest.fixture(scope="module")
def lab():
    return blobs_lab()


def quick(**kw):
    return TrainConfig(epochs=1, attack=AttackConfig.from_255(8), log_every=2, **kw)


def sampled_duality(spec: ToySpec, shifts=201):
    """Brute force: inner max over sampled perturbations, feasibility checked per datum."""
    a_axis, b_axis = spec.axis("a"), spec.axis("b")
    A, B = (g.ravel() for g in np.meshgrid(a_axis, b_axis, indexing="ij"))
    x = np.asarray(spec.data)
    xs = x[:, None] + np.linspace(-spec.epsilon, spec.epsilon, shifts)[None]
    z0 = spec.a0 * x + spec.b0
    loss = ((A[:, None, None] * xs[None] + B[:, None, None] - z0[None, :, None]) ** 2).max(axis=2).mean(axis=1)
    d = (A[:, None] * x + B[:, None] - z0) ** 2
    best = []
    for rho in spec.rho_list:
        ok = np.all(d <= rho * z0**2 + 1e-15, axis=1)
        best.append(float(loss[ok].min()) if ok.any() else None)
    return float(loss.min()), best


class TestWeakDuality:
    @pytest.mark.parametrize("toy", TOYS)
    def test_matches_sampled_oracle(self, toy):
        spec = ToySpec.from_dict(toy)
        out = weak_duality_check(spec)
        R, best = sampled_duality(spec)
        assert out["R"] == pytest.approx(R, abs=1e-12)
        for row, b in zip(out["rows"], best):
            assert row["R_rho"] == pytest.approx(b, abs=1e-9)
        assert out["holds"] and out["monotone"] and not out["empty"]

    def test_small_radius_instance(self):
        # the anchor is already optimal here, so every constraint level costs nothing
        out = weak_duality_check(TOYS[0])
        assert out["R"] == pytest.approx(0.01, abs=1e-12)
        assert [r["R_rho"] for r in out["rows"]] == pytest.approx([0.01] * 3, abs=1e-12)

    def test_limits(self):
        spec = ToySpec.from_dict(TOYS[1])
        rows = weak_duality_check(spec)["rows"]
        at_anchor = toy_adv_loss(np.array([spec.a0]), np.array([spec.b0]), spec)[0]
        assert rows[0]["R_rho"] == pytest.approx(at_anchor) == pytest.approx(0.25)
        assert rows[-1]["R_rho"] == pytest.approx(weak_duality_check(spec)["R"])
        assert rows[1]["R_rho"] > rows[-1]["R_rho"]  # the constraint binds at this radius

    def test_dense_grids(self):
        for toy in TOYS[1:]:
            toy = dict(toy, grid={k: [lo, hi, 1000] for k, (lo, hi, _) in toy["grid"].items()})
            out = weak_duality_check(toy)
            assert out["grid_points"] >= 1000
            assert out["holds"] and out["monotone"]

    def test_loads_from_file(self, tmp_path):
        path = tmp_path / "toy.json"
        path.write_text(json.dumps(TOYS[0]))
        assert ToySpec.load(path).epsilon == 0.1

    @pytest.mark.parametrize("bad", [dict(epsilon=-1), dict(rho_list=[]), dict(grid={"c": [0, 1, 3]}), dict(data=[])])
    def test_invalid_spec(self, bad):
        with pytest.raises(ValueError):
            ToySpec.from_dict(TOYS[0] | bad)

    def test_missing_field(self):
        with pytest.raises(ValueError, match="missing"):
            ToySpec.from_dict({"a0": 1.0})


class TestCosineAudit:
    def test_no_violations(self):
        rows = cosine_audit([0.01, 0.25, 1.0], samples=20_000)
        for row in rows:
            assert row["violations"] == 0
            assert row["max_deviation"] <= row["bound"] == pytest.approx(2 * np.sqrt(row["rho"]))
            assert row["samples"] == 20_000

    def test_boundary_samples_come_close(self):
        # the angle between u and u_hat is at most asin(sqrt(rho)), so sqrt(rho) (half
        # the bound) is the realistic ceiling; interior-only sampling stays well below it
        (row,) = cosine_audit([0.01], samples=20_000)
        assert row["max_deviation"] > 0.25 * row["bound"]

    def test_seeded(self):
        assert cosine_audit([0.1], samples=1000, seed=3) == cosine_audit([0.1], samples=1000, seed=3)


class TestSweep:
    def test_single_value_equals_single_run(self, lab):
        cfg = quick()
        swept = sweep_rho(cfg, [0.1], lab).records[0]
        single = run(lab, dataclasses.replace(cfg, rho=0.1)).final
        assert swept.as_row() == single.as_row()

    def test_repeatable_csv(self, lab):
        cfg = quick()
        texts = []
        for _ in range(2):
            res = sweep_rho(cfg, [0.05, 0.5], lab)
            texts.append(csv_text(["rho", "clean_acc", "robust_acc"], res.pareto_rows()))
        assert texts[0] == texts[1]

    def test_order_enforced(self, lab):
        with pytest.raises(ValueError):
            sweep_rho(quick(), [0.5, 0.1], lab)
        with pytest.raises(ValueError):
            sweep_rho(quick(), [], lab)
        with pytest.raises(ValueError):
            SweepResult([0.1, 0.1], [None, None])

    def test_k_ablation_keys(self, lab):
        out = k_ablation(quick(), [1, 2], lab)
        assert sorted(out) == [1, 2]

    def test_paired_runs_share_seed(self, lab):
        with pytest.raises(ValueError):
            paired_runs(lab, [quick(seed=0), quick(seed=1)])


class TestRun:
    def test_final_record(self, lab):
        r = run(lab, quick())
        f = r.final
        assert 0 <= f.robust_acc <= f.clean_acc <= 1
        assert f.attack.startswith("pgd40-uniform")
        assert 0 <= f.constraint_frac <= 1 and f.mean_lambda >= 0
        assert r.min_clean <= f.clean_acc

    def test_desk_config(self):
        cfg = desk_config("lore", eps=16)
        assert cfg.attack.epsilon == pytest.approx(16 / 255)
        assert cfg.eta_omega == DESK_TRAIN["eta_omega"] and cfg.epochs == DESK_TRAIN["epochs"]
        assert desk_config("fare", eps=4, K=1).K == 1
