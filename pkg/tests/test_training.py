import json
import math

import numpy as np
import pytest

from tripledml.autograd import Tensor
from tripledml.data import stratified_kfold, subsample
from tripledml.errors import ConfigError, ContractError, NumericError
from tripledml.fixtures import FIXTURES, generate_fixture
from tripledml.training import (
    DESK_GRID,
    FULL_GRID,
    ExperimentPlan,
    HyperGrid,
    LossConfig,
    OptimizerState,
    Schedule,
    TrainSettings,
    lr_at,
    optimizer_step,
    run_grid,
    train_one,
)

FAST = TrainSettings(dim=16, epochs=2, batch_size=32)


@pytest.fixture(scope="module")
def small_ds():
    return subsample(generate_fixture(FIXTURES["sentiment2"]), 100, seed=1)


@pytest.fixture(scope="module")
def separable_ds():
    return subsample(generate_fixture(FIXTURES["sentiment2"], separable=True), 400, seed=1)


def _adamw_reference(p, grad_fn, steps, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    out = []
    for t in range(1, steps + 1):
        g = grad_fn(p)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p = p - lr * wd * p
        p = p - lr * m_hat / (math.sqrt(v_hat) + eps)
        out.append(p)
    return out


class TestOptimizer:
    def test_zero_gradient_no_decay_is_noop(self):
        p = Tensor(np.array([1.0, -2.0]))
        state = OptimizerState(weight_decay=0.0)
        optimizer_step({"p": p}, {"p": np.zeros(2)}, state, lr=0.1)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_descent_direction(self):
        p = Tensor(np.array(1.0))
        optimizer_step({"p": p}, {"p": np.array(1.0)}, OptimizerState(), lr=1e-3)
        assert p.data < 1.0

    def test_quadratic_matches_reference(self):
        lr, wd = 0.05, 0.01
        p = Tensor(np.array(1.5))
        state = OptimizerState(weight_decay=wd)
        got = []
        for _ in range(3):
            optimizer_step({"p": p}, {"p": 2.0 * p.data}, state, lr=lr)
            got.append(float(p.data))
        expected = _adamw_reference(1.5, lambda x: 2.0 * x, 3, lr, wd)
        for a, b in zip(got, expected):
            assert abs(a - b) <= 1e-12

    def test_non_finite_gradient(self):
        p = Tensor(np.array([1.0]))
        with pytest.raises(NumericError, match="'p'"):
            optimizer_step({"p": p}, {"p": np.array([np.nan])}, OptimizerState(), lr=0.1)

    def test_negative_lr(self):
        with pytest.raises(ContractError):
            optimizer_step({}, {}, OptimizerState(), lr=-1.0)


class TestSchedule:
    def test_endpoints(self):
        s = Schedule(total_steps=1000)
        assert lr_at(0, s) == 0.0
        assert lr_at(s.warmup_steps, s) == 1e-5
        assert s.warmup_steps == math.ceil(0.06 * 1000)
        assert lr_at(1000, s) == 0.0

    @pytest.mark.parametrize("total", [1, 7, 17, 50, 333, 1001, 4096])
    def test_peak_exact_and_piecewise_linear(self, total):
        s = Schedule(total_steps=total)
        warm = math.ceil(0.06 * total)
        values = [lr_at(i, s) for i in range(total + 1)]
        assert values[warm] == 1e-5
        assert max(values) == 1e-5
        assert all(v >= 0 for v in values)
        # linear on each piece: constant first differences
        up = np.diff(values[: warm + 1])
        down = np.diff(values[warm:])
        if up.size:
            np.testing.assert_allclose(up, up[0], rtol=1e-9)
        if down.size:
            np.testing.assert_allclose(down, down[0], rtol=1e-9)

    def test_out_of_range(self):
        with pytest.raises(ContractError):
            lr_at(11, Schedule(total_steps=10))
        with pytest.raises(ContractError):
            lr_at(-1, Schedule(total_steps=10))


class TestGrid:
    def test_full_grid_size(self):
        product = math.prod(len(getattr(FULL_GRID, n)) for n in ("k", "gamma", "lam", "delta", "beta"))
        assert product == 3 * 5 * 7 * 7 * 5 == 3675
        configs = FULL_GRID.configs()
        assert FULL_GRID.size == len(configs) == len(set(configs)) == product

    def test_full_grid_values(self):
        assert FULL_GRID.k == (10, 100, 1000)
        assert FULL_GRID.gamma == (0.01, 0.03, 0.05, 0.07, 0.1)
        assert FULL_GRID.lam == (1, 3, 3.3, 4, 6, 8, 10)
        assert FULL_GRID.delta == (0.01, 0.1, 0.3, 0.5, 0.7, 0.9, 1)
        assert FULL_GRID.beta == (0.1, 0.3, 0.5, 0.7, 0.9)

    def test_lexicographic_order(self):
        keys = [(c.k, c.gamma, c.lam, c.delta, c.beta) for c in HyperGrid(k=(100, 10), beta=(0.9, 0.1)).configs()]
        assert keys == sorted(keys)

    def test_desk_grid_draws_from_full_grid(self):
        for name in ("k", "gamma", "lam", "delta", "beta"):
            assert set(getattr(DESK_GRID, name)) <= set(getattr(FULL_GRID, name))

    def test_plan_jobs(self):
        plan = ExperimentPlan(configs=(LossConfig("ce"),))
        jobs = plan.jobs()
        assert len(jobs) == 20
        assert len(set(jobs)) == 20


class TestLossConfig:
    def test_defaults_filled(self):
        cfg = LossConfig("tripleentropy")
        assert cfg.k == 10 and cfg.beta == 0.5

    def test_foreign_parameter_rejected(self):
        with pytest.raises(ConfigError, match="beta"):
            LossConfig("ce", beta=0.5)
        with pytest.raises(ConfigError, match="margin"):
            LossConfig("triplet", margin=1.0)

    def test_unknown_loss(self):
        with pytest.raises(ConfigError):
            LossConfig("hinge")

    def test_roundtrip(self):
        cfg = LossConfig("softtriple", k=3, gamma=0.05)
        assert LossConfig.from_dict(json.loads(json.dumps(cfg.as_dict()))) == cfg


class TestTrainOne:
    def test_deterministic(self, small_ds):
        tr, va = stratified_kfold(small_ds, 5, 2)[0]
        cfg = LossConfig("tripleentropy", k=3, beta=0.5)
        a = train_one(cfg, 2, tr, va, small_ds, settings=FAST)
        b = train_one(cfg, 2, tr, va, small_ds, settings=FAST)
        assert a.val_accuracy == b.val_accuracy
        assert a.losses == b.losses
        for name, p in a.model.params.items():
            assert np.array_equal(p.data, b.model.params[name].data)

    def test_beta_one_matches_cross_entropy(self, small_ds):
        tr, va = stratified_kfold(small_ds, 5, 16)[1]
        ce = train_one(LossConfig("ce"), 16, tr, va, small_ds, settings=FAST)
        te = train_one(LossConfig("tripleentropy", k=3, beta=1.0), 16, tr, va, small_ds, settings=FAST)
        assert len(ce.losses) == len(te.losses)
        assert max(abs(a - b) for a, b in zip(ce.losses, te.losses)) <= 1e-12
        assert ce.val_history == te.val_history

    def test_beta_one_leaves_proxies_alone(self, small_ds):
        tr, va = stratified_kfold(small_ds, 5, 2)[0]
        settings = TrainSettings(dim=16, epochs=2, batch_size=32, weight_decay=0.0)
        cfg = LossConfig("tripleentropy", k=3, beta=1.0)
        from tripledml.losses import SoftTripleParams
        from tripledml.training import _rng

        initial = SoftTripleParams.init(2, 3, 16, _rng(2, 1)).weights.data
        result = train_one(cfg, 2, tr, va, small_ds, settings=settings)
        assert np.array_equal(result.loss_params["proxies"].data, initial)

    def test_overlapping_splits_rejected(self, small_ds):
        with pytest.raises(ContractError):
            train_one(LossConfig("ce"), 2, [0, 1, 2], [2, 3], small_ds, settings=FAST)

    def test_nan_loss_aborts_with_config(self, small_ds, monkeypatch):
        import tripledml.training as training

        monkeypatch.setattr(training, "multinomial_cross_entropy", lambda p, t: Tensor(np.array(np.nan), requires_grad=True))
        tr, va = stratified_kfold(small_ds, 5, 2)[0]
        with pytest.raises(NumericError, match="ce"):
            train_one(LossConfig("ce"), 2, tr, va, small_ds, settings=FAST)

    @pytest.mark.parametrize(
        "cfg",
        [LossConfig("contrastive"), LossConfig("triplet"), LossConfig("proxynca"), LossConfig("softtriple", k=2)],
        ids=lambda c: c.loss,
    )
    def test_metric_losses_train(self, separable_ds, cfg):
        tr, va = stratified_kfold(separable_ds, 5, 2)[0]
        result = train_one(cfg, 2, tr, va, separable_ds, settings=TrainSettings(dim=16, epochs=4, batch_size=32))
        assert all(math.isfinite(v) for v in result.losses)
        assert result.val_accuracy > 0.6


def _linear_probe_separates(ds) -> bool:
    """Perceptron on bag-of-words counts; converging to zero errors proves separability."""
    words = sorted({w for r in ds.records for w in r.text.split()})
    col = {w: i for i, w in enumerate(words)}
    x = np.zeros((len(ds), len(words) + 1))
    for i, r in enumerate(ds.records):
        for w in r.text.split():
            x[i, col[w]] += 1
    x[:, -1] = 1.0
    y = np.where(ds.labels == 1, 1.0, -1.0)
    w = np.zeros(x.shape[1])
    for _ in range(200):
        errors = 0
        for i in range(len(ds)):
            if y[i] * (x[i] @ w) <= 0:
                w += y[i] * x[i]
                errors += 1
        if errors == 0:
            return True
    return False


def test_separable_fixture_is_learned(separable_ds):
    assert _linear_probe_separates(separable_ds)
    tr, va = stratified_kfold(separable_ds, 5, 2)[0]
    result = train_one(LossConfig("tripleentropy", beta=0.5), 2, tr, va, separable_ds, epochs=10)
    assert result.epochs_trained <= 10
    assert result.val_accuracy >= 0.95


class TestRunGrid:
    def test_single_config_gives_twenty_records(self, small_ds):
        plan = ExperimentPlan(configs=(LossConfig("ce"),), settings=TrainSettings(dim=8, epochs=1, batch_size=32))
        report = run_grid(plan, small_ds)
        assert len(report.records) == 20
        assert {(r.seed, r.fold) for r in report.records} == {(s, f) for s in (2, 16, 128, 2048) for f in range(5)}
        (agg,) = report.aggregates()
        assert agg.n == 20
        assert abs(agg.mean - sum(r.val_accuracy for r in report.records) / 20) <= 1e-12

    def test_resume_reproduces_report(self, small_ds, tmp_path):
        settings = TrainSettings(dim=8, epochs=1, batch_size=32)
        plan = ExperimentPlan(configs=(LossConfig("ce"), LossConfig("tripleentropy", k=2, beta=0.5)),
                              seeds=(2, 16), fold_count=2, settings=settings)
        full = run_grid(plan, small_ds, results_path=tmp_path / "a.jsonl")
        path = tmp_path / "b.jsonl"
        partial = run_grid(plan, small_ds, results_path=path, max_new_jobs=3)
        assert len(partial.records) == 3
        resumed = run_grid(plan, small_ds, results_path=path, resume=True)
        strip = lambda rep: [(r.config_key, r.seed, r.fold, r.val_accuracy, r.epochs_trained) for r in rep.records]
        assert strip(resumed) == strip(full)
        assert [a.as_dict() for a in resumed.aggregates()] == [a.as_dict() for a in full.aggregates()]
        assert len(path.read_text().splitlines()) == 8

    def test_parallel_matches_serial(self, small_ds):
        settings = TrainSettings(dim=8, epochs=1, batch_size=32)
        plan = ExperimentPlan(configs=(LossConfig("tripleentropy", k=2, beta=0.3),), seeds=(2, 16), fold_count=2,
                              settings=settings)
        serial = run_grid(plan, small_ds, jobs=1)
        parallel = run_grid(plan, small_ds, jobs=2)
        assert [r.val_accuracy for r in serial.records] == [r.val_accuracy for r in parallel.records]

    def test_best_config_tie_break(self, small_ds):
        from tripledml.reporting import RunRecord, RunReport

        a = LossConfig("tripleentropy", k=100, beta=0.1).as_dict()
        b = LossConfig("tripleentropy", k=10, beta=0.9).as_dict()
        recs = [RunRecord("d", a, 2, 0, 0.8), RunRecord("d", b, 2, 0, 0.8)]
        assert RunReport(recs).best("d").config == b
