import csv
import json

import numpy as np
import pytest

from ptmda.data import SyntheticSpec, gen_synthetic
from ptmda.evaluation import VARIANTS, AblationRun, AblationTable, accuracy, proxy_a_distance, run_ablation
from ptmda.trainer import TrainConfig, run_ptmda

FAST = TrainConfig(
    epochs_stage1=2, epochs_stage2=1, batch_size=16, steps_per_epoch=2, hidden_dims=(6,),
    feature_dim=4, disc_hidden=4, precision="float64", lr=0.01, kappa=0.6,
)


def toy(seed=0):
    doms = gen_synthetic(SyntheticSpec(params=(0.0, 45.0, 90.0), n_per_domain=40, seed=seed))
    return doms[:-1], doms[-1]


class TestAccuracy:
    def test_examples(self):
        assert accuracy([1, 0, 1], [1, 0, 1]) == 1.0
        assert accuracy([1, 0, 1], [0, 1, 0]) == 0.0
        assert accuracy([0, 1, 1, 0], [0, 1, 0, 0]) == 0.75

    @pytest.mark.parametrize("a,b", [([0, 1], [0]), ([], [])])
    def test_invalid(self, a, b):
        with pytest.raises(ValueError):
            accuracy(a, b)


class TestProxyADistance:
    def test_same_distribution_near_zero(self):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            X = rng.normal(size=(400, 3))
            assert abs(proxy_a_distance(X[:200], X[200:], rng=np.random.default_rng(seed))) <= 0.3

    def test_separable_is_two(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(50, 2))
        assert proxy_a_distance(a, a + 20.0) == 2.0

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(60, 2)), rng.normal(0.7, 1.0, size=(80, 2))
        assert proxy_a_distance(a, b, rng=np.random.default_rng(3)) == proxy_a_distance(b, a, rng=np.random.default_rng(3))

    def test_too_few(self):
        with pytest.raises(ValueError):
            proxy_a_distance(np.zeros((9, 2)), np.zeros((20, 2)))


class TestAblation:
    def test_single_run_degenerate(self):
        sources, target = toy()
        table = run_ablation(sources, target, FAST, ["PT+BN"], [3])
        _, rep = run_ptmda(sources, target, FAST.replace(seed=3, **VARIANTS["PT+BN"]))
        s = table.summary()["PT+BN"]
        assert s["mean"] == rep.final["target_accuracy"] and s["std"] == 0.0 and s["n"] == 1

    def test_rows_reproducible(self):
        sources, target = toy()
        a = run_ablation(sources, target, FAST, ["PTMDA", "source-only"], [0, 1])
        b = run_ablation(sources, target, FAST, {"PTMDA": VARIANTS["PTMDA"]}, [1])
        assert a.runs[1].accuracy == b.runs[0].accuracy

    def test_parallel_matches_serial(self):
        sources, target = toy()
        a = run_ablation(sources, target, FAST, ["PT+MN", "PT+MC"], [0, 1])
        b = run_ablation(sources, target, FAST, ["PT+MN", "PT+MC"], [0, 1], jobs=2)
        assert [r.accuracy for r in a.runs] == [r.accuracy for r in b.runs]

    def test_unsupported_flag(self):
        with pytest.raises(ValueError):
            run_ablation(*toy(), FAST, {"odd": {"lr": 0.1}}, [0])

    def test_outputs(self, tmp_path):
        table = run_ablation(*toy(), FAST, ["source-only"], [0, 1], data_for_seed=toy)
        table.write_csv(tmp_path / "a.csv")
        table.write_json(tmp_path / "a.json")
        rows = list(csv.DictReader(open(tmp_path / "a.csv")))
        assert [r["variant"] for r in rows] == ["source-only"] * 2
        assert set(rows[0]) == {"variant", "seed", "accuracy", "wall_time"}
        summary = json.loads((tmp_path / "a.json").read_text())["summary"]["source-only"]
        assert summary["mean"] == pytest.approx(np.mean([float(r["accuracy"]) for r in rows]))

    def test_summary_statistics(self):
        t = AblationTable([AblationRun("v", 0, 0.5, 0.0), AblationRun("v", 1, 0.7, 0.0)])
        assert t.mean("v") == pytest.approx(0.6) and t.summary()["v"]["std"] == pytest.approx(0.1)
