import numpy as np
import pytest

from conftest import constant_classifier
from tsguard import evaluation as ev
from tsguard.assembly import assemble
from tsguard.attack import AttackConfig
from tsguard.data import WindowedDataset
from tsguard.networks import EVAL, forecaster_forward


def synthetic_test(n_rows, stations=4, seed=0):
    rng = np.random.default_rng(seed)
    ids = np.array([f"s{i % stations}" for i in range(n_rows)], dtype=object)
    return WindowedDataset(ids, rng.random((n_rows, 3)), rng.random(n_rows), np.arange(n_rows))


@pytest.fixture(scope="module")
def components(tiny_components):
    return {(0.3, 0.3): tiny_components}


class TestPerturb:
    def test_count(self, tiny_components):
        test = synthetic_test(1000)
        _, flags = ev.perturb_test_set(tiny_components["f1"], test, 0.3, 2, 20, seed=1)
        assert flags.sum() == 200

    def test_full_perturbation(self, tiny_components):
        test = synthetic_test(300)
        ds, flags = ev.perturb_test_set(tiny_components["f1"], test, 0.3, 3, 100, seed=2)
        assert flags.all()
        d = np.abs(ds.X - test.X)
        assert d.max() <= 0.3 + 1e-12 and np.all((d > 0).sum(axis=1) >= 2)

    @pytest.mark.parametrize("k", [1, 2])
    def test_exactly_k_positions(self, tiny_components, k):
        test = synthetic_test(400)
        ds, flags = ev.perturb_test_set(tiny_components["f1"], test, 0.3, k, 50, seed=3)
        changed = (ds.X != test.X).sum(axis=1)
        assert np.all(changed[flags == 1] == k) and np.all(changed[flags == 0] == 0)
        ev.audit_bounds(test, ds, flags, 0.3)

    def test_clean_conditions_coincide(self, tiny_components):
        test = synthetic_test(50)
        a, fa = ev.perturb_test_set(tiny_components["f1"], test, 0.3, 0, 100, seed=4)
        b, fb = ev.perturb_test_set(tiny_components["f1"], test, 0.3, 3, 0, seed=4)
        assert np.array_equal(a.X, test.X) and np.array_equal(b.X, test.X)
        assert not fa.any() and not fb.any()

    @pytest.mark.parametrize("k,pseq", [(4, 50), (-1, 50), (1, 101), (1, -5)])
    def test_invalid(self, tiny_components, k, pseq):
        with pytest.raises(ev.EvaluationError):
            ev.perturb_test_set(tiny_components["f1"], synthetic_test(10), 0.3, k, pseq)

    def test_audit_catches_violations(self):
        test = synthetic_test(5)
        flags = np.array([1, 0, 0, 0, 0])
        bad = test.with_inputs(test.X + np.array([[0.5, 0, 0]] + [[0, 0, 0]] * 4))
        with pytest.raises(ev.EvaluationError):
            ev.audit_bounds(test, bad, flags, 0.3)
        moved = test.with_inputs(test.X + np.array([[0, 0, 0], [0.1, 0, 0]] + [[0, 0, 0]] * 3))
        with pytest.raises(ev.EvaluationError):
            ev.audit_bounds(test, moved, flags, 0.3)


class TestScoring:
    def test_perfect_predictor(self):
        test = synthetic_test(40)
        assert ev.evaluate_mse(lambda X: test.Y.copy(), test) == 0.0

    def test_constant_half(self):
        test = synthetic_test(40)
        test = WindowedDataset(test.station_ids, test.X, (np.arange(40) // 4 % 2).astype(float), test.hours)
        assert ev.evaluate_mse(lambda X: np.full(len(X), 0.5), test) == 0.25

    def test_station_mean_not_window_mean(self):
        ids = np.array(["a", "a", "a", "b"], dtype=object)
        ds = WindowedDataset(ids, np.zeros((4, 3)), np.array([0.0, 0.0, 0.0, 1.0]), np.arange(4))
        assert ev.station_mse(np.zeros(4), ds) == 0.5  # window mean would be 0.25

    def test_m1_matches_raw_f1(self, tiny_components, tiny_splits):
        test = tiny_splits[1]
        raw = ev.station_mse(forecaster_forward(tiny_components["f1"], test.X, EVAL).data, test)
        assert ev.evaluate_mse(assemble("M1", **tiny_components), test) == raw

    def test_empty(self):
        with pytest.raises(ev.EvaluationError):
            ev.evaluate_mse(lambda X: X[:, 0], synthetic_test(0))

    def test_accuracy_stubs(self):
        X = np.random.default_rng(0).random((10, 3))
        flags = np.array([0, 1] * 5)
        assert ev.evaluate_classifier_accuracy(lambda Z: flags, X, flags) == 1.0
        assert ev.evaluate_classifier_accuracy(constant_classifier(0), X, np.zeros(10)) == 1.0
        assert ev.evaluate_classifier_accuracy(constant_classifier(0), X, np.ones(10)) == 0.0
        with pytest.raises(ev.EvaluationError):
            ev.evaluate_classifier_accuracy(constant_classifier(0), X, flags[:4])


class TestGrid:
    def test_grid_arithmetic(self, components, tiny_splits):
        spec = ev.GridSpec(triplets=((0.3, 0.3, 0.3),))
        results = ev.run_grid(spec, components, tiny_splits[1])
        assert len(results) == 10
        assert sum(r.clean for r in results) == 1
        n = len(tiny_splits[1])
        for r in results:
            assert r.n_perturbed == (0 if r.clean else r.pseq * n // 100)
            assert r.n_perturbed + r.n_clean == n
            assert set(r.mse) == {"M1", "M2", "M3", "M4"}
            assert all(np.isfinite(v) and v >= 0 for v in r.mse.values())
            assert 0 <= r.classifier_accuracy <= 1

    def test_clean_rows_shared_across_eps_t(self, components, tiny_splits):
        spec = ev.GridSpec(triplets=((0.3, 0.3, 0.1), (0.3, 0.3, 0.3)), ks=(1,), pseqs=(50,))
        results = ev.run_grid(spec, components, tiny_splits[1])
        clean = [r for r in results if r.clean]
        assert len(clean) == 2 and clean[0].mse == clean[1].mse

    def test_zero_k_and_zero_pseq_deduplicated(self, components, tiny_splits):
        spec = ev.GridSpec(triplets=((0.3, 0.3, 0.3),), ks=(0, 1), pseqs=(0, 20))
        results = ev.run_grid(spec, components, tiny_splits[1])
        assert [(r.k, r.pseq) for r in results] == [(0, 0), (1, 20)]

    def test_rerun_identical(self, components, tiny_splits):
        spec = ev.GridSpec(triplets=((0.3, 0.3, 0.2),), ks=(2,), pseqs=(50,), seed=7)
        a = ev.render_csv(ev.run_grid(spec, components, tiny_splits[1]))
        b = ev.render_csv(ev.run_grid(spec, components, tiny_splits[1]))
        assert a == b

    def test_missing_components(self, components, tiny_splits):
        with pytest.raises(ev.EvaluationError, match="no trained components"):
            ev.run_grid(ev.GridSpec(triplets=((0.2, 0.3, 0.3),)), components, tiny_splits[1])

    @pytest.mark.parametrize("kw", [{"triplets": ((0.4, 0.3, 0.3),)}, {"ks": (4,)},
                                    {"pseqs": (120,)}, {"models": ("M9",)}])
    def test_invalid_spec(self, kw):
        with pytest.raises(ev.EvaluationError):
            ev.GridSpec(**{"triplets": ((0.3, 0.3, 0.3),), **kw})

    def test_cell_seed_is_order_free_and_distinct(self):
        assert ev.cell_seed(0, 0.3, 0.3, 0.1, 1, 20) == ev.cell_seed(0, 0.3, 0.3, 0.1, 1, 20)
        assert ev.cell_seed(0, 0.3, 0.3, 0.1, 1, 20) != ev.cell_seed(0, 0.3, 0.3, 0.1, 1, 50)

    def test_monotonic_exposure(self, components, tiny_splits):
        curves = []
        for seed in range(3):
            spec = ev.GridSpec(triplets=((0.3, 0.3, 0.3),), ks=(3,), pseqs=(20, 50, 100),
                               seed=seed, models=("M1",))
            curves.append([r.mse["M1"] for r in ev.run_grid(spec, components, tiny_splits[1])])
        mean = np.mean(curves, axis=0)
        assert np.all(np.diff(mean) >= 0)


class TestReport:
    @pytest.fixture
    def result(self):
        return ev.GridResult(0.3, 0.3, 0.3, 3, 100, {"M1": 0.017349, "M2": 0.05},
                             classifier_accuracy=0.60934, n_perturbed=10, n_clean=0, seed=5)

    def test_formatting(self):
        assert ev.format_mse(0.017349) == "0.0173"
        assert ev.format_accuracy(0.60934) == "60.93"

    def test_csv_one_result(self, result):
        text = ev.render_report([result], "csv")
        lines = text.splitlines()
        assert lines[0] == ",".join(ev.CSV_COLUMNS)
        assert len(lines) == 1 + len(result.mse)
        assert lines[1].split(",")[5:7] == ["M1", "0.017349"]

    def test_csv_round_trip(self, result):
        back = ev.read_csv(ev.render_csv([result]))
        assert len(back) == 1 and back[0] == result

    def test_markdown(self, result):
        clean = ev.GridResult(0.3, 0.3, 0.3, 0, 0, {"M1": 0.0123, "M2": 0.02}, 0.9, 0, 10, 0)
        md = ev.render_report([clean, result])
        assert "## M1 MSE" in md and "0.0173" in md and "60.93" in md and "0.0123" in md
        assert "| 100 |" in md and "| 0 |" in md

    def test_errors(self, result):
        with pytest.raises(ev.EvaluationError):
            ev.render_report([])
        with pytest.raises(ev.EvaluationError):
            ev.render_report([result], "html")
        with pytest.raises(ev.EvaluationError):
            ev.read_csv("a,b\n1,2\n")
