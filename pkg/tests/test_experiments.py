import numpy as np
import pytest

from sepsense import cohort as ch
from sepsense import experiments as exp
from sepsense import imputer as imp
from sepsense import predictor as pred
from sepsense.metrics import auroc
from sepsense.uncertainty import CorrelationMatrix


@pytest.fixture(scope="module")
def tiny_config():
    return exp.ExperimentConfig(
        cohort=ch.GeneratorConfig(seed=40, n_patients=60, noise_frac=0.4),
        imputer=imp.ImputerConfig(d=8, hidden=16, epochs_mean=6,
                                  epochs_sigma=6, batch_size=32),
        predictor=pred.PredictorConfig(
            d=8, hidden=16, epochs=8, batch_size=32,
            adv=pred.AdversarialConfig(alpha=0.9, lr=3e-3, s_adv=0.2, n_adv=3)),
        policies=("random", "ras"),
        budgets=(0.02, 0.08),
        seeds=(0,),
        mc_samples=20,
        score_masks=2,
        uw_samples=3,
    )


@pytest.fixture(scope="module")
def tiny_stack(tiny_config):
    return exp.train_stack(tiny_config, seed=0, modes=("ras_n", "ras"))


class TestStack:
    def test_small_stack(self, tiny_stack):
        assert tiny_stack.imputer.mean_trained and tiny_stack.imputer.sigma_trained
        assert set(tiny_stack.predictors) == {"ras_n", "ras"}
        assert tiny_stack.rho.rho.shape == (27, 27)


class TestExperimentConfig:
    def test_requires_seed(self):
        with pytest.raises(ValueError, match="seed"):
            exp.ExperimentConfig(seeds=())

    def test_budgets_sorted(self):
        with pytest.raises(ValueError, match="sorted"):
            exp.ExperimentConfig(budgets=(0.08, 0.02))

    def test_unknown_policy(self):
        with pytest.raises(ValueError, match="policy"):
            exp.ExperimentConfig(policies=("oracle",))


class TestBinsExperiment:
    def test_single_bin_equals_global_auroc(self, tiny_stack):
        rows = exp.uncertainty_bins_experiment(tiny_stack, tiny_stack.test,
                                               n_bins=1)
        episodes = exp.trajectory_scan(tiny_stack, tiny_stack.test)
        scores, labels = [], []
        for ep in episodes:
            scores.extend(h.risk_pre for h in ep.hours)
            labels.extend(ep.labels.astype(bool))
        assert rows[0]["auroc"] == pytest.approx(auroc(scores, labels))
        assert rows[0]["count"] == len(scores)

    def test_deterministic(self, tiny_stack):
        a = exp.uncertainty_bins_experiment(tiny_stack, tiny_stack.test, n_bins=4)
        b = exp.uncertainty_bins_experiment(tiny_stack, tiny_stack.test, n_bins=4)
        assert a == b

    def test_single_class_bin_marked_absent(self, tiny_stack):
        rows = exp.uncertainty_bins_experiment(tiny_stack, tiny_stack.test,
                                               n_bins=12)
        assert any(r["auroc"] is None for r in rows)  # narrow bins go single-class
        assert sum(r["count"] for r in rows) > 0

    def test_csv_emitted(self, tiny_stack, tmp_path):
        out = tmp_path / "bins.csv"
        exp.uncertainty_bins_experiment(tiny_stack, tiny_stack.test, n_bins=3,
                                        out_csv=out)
        header = out.read_text().splitlines()[0]
        assert header == "bin,u_lo,u_hi,count,mean_u,auroc"


class TestOverTimeExperiment:
    def test_rows_cover_hours(self, tiny_stack):
        rows = exp.uncertainty_over_time_experiment(tiny_stack, tiny_stack.test)
        max_n = max(r.n for r in tiny_stack.test)
        assert [r["hour"] for r in rows] == list(range(max_n))
        counts = [r["count"] for r in rows]
        assert counts == sorted(counts, reverse=True)

    def test_fully_observed_cohort_has_no_propagated_uncertainty(self, tiny_config):
        from dataclasses import replace
        cfg = replace(tiny_config,
                      cohort=replace(tiny_config.cohort, missing_scale=0.0))
        stack = exp.train_stack(cfg, seed=0, modes=("ras_n",))
        rows = exp.uncertainty_over_time_experiment(stack, stack.test[:10])
        assert all(r["mean_ux"] <= 1e-8 for r in rows)

    def test_epistemic_present_when_dropout_on(self, tiny_stack):
        rows = exp.uncertainty_over_time_experiment(tiny_stack, tiny_stack.test)
        assert all(r["mean_uw"] > 0 for r in rows)


class TestSweep:
    def test_grid_complete_and_resumable(self, tiny_config, tmp_path):
        out = tmp_path / "sweep.csv"
        rows = exp.sensing_sweep(tiny_config, out)
        assert len(rows) == 2 * 2 * 1
        first = out.read_bytes()

        # rerun: nothing recomputed, identical bytes
        rows2 = exp.sensing_sweep(tiny_config, out)
        assert out.read_bytes() == first
        assert len(rows2) == len(rows)

        # drop one row; only it is recomputed (deterministic metrics return;
        # the wall-clock latency column is the one permitted difference)
        lines = first.decode().splitlines()
        out.write_text("\n".join(lines[:-1]) + "\n")
        exp.sensing_sweep(tiny_config, out)
        redone = out.read_text().splitlines()
        assert len(redone) == len(lines)
        for a, b in zip(redone, lines):
            assert a.rsplit(",", 1)[0] == b.rsplit(",", 1)[0]

    def test_header_format(self, tiny_config, tmp_path):
        out = tmp_path / "sweep.csv"
        exp.sensing_sweep(tiny_config, out)
        assert out.read_text().splitlines()[0] == \
            "policy,budget,seed,auroc,mean_ux,mean_uw,latency_ms"

    def test_checks_pass_on_tiny_grid(self, tiny_config, tmp_path):
        out = tmp_path / "sweep.csv"
        rows = exp.sensing_sweep(tiny_config, out)
        problems = exp.sweep_checks(rows, tiny_config)
        assert isinstance(problems, list)


class TestLatencyBenchmark:
    def test_gradient_scoring_faster_than_sampling(self, tiny_stack):
        record = max(tiny_stack.test, key=lambda r: r.n)
        res = exp.decision_latency_benchmark(tiny_stack, record,
                                             mc_samples=100, score_masks=3,
                                             repeats=5)
        assert res["gradient_ms"] > 0
        assert res["mc_sampling_ms"] > res["gradient_ms"]
