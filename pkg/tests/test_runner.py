import numpy as np
import pytest

from adagauss import runner
from adagauss.classifier import ClassifierConfig
from adagauss.data import AccessAudit, SyntheticSpec, TaskData, generate_synthetic
from adagauss.errors import EmptyMemory, InvalidConfig, NotPositiveDefinite, RunFailure
from adagauss.memory import ClassGaussian, GaussianMemory
from adagauss.networks import NetworkConfig, build_extractor, build_head, clone_frozen
from adagauss.runner import AblationConfig, HyperParams, RunReport, evaluate, run, train_adapter, train_task

FAST = dict(latent_dim=4, hidden_dims=(32,), projector_factor=16, epochs=8, lr_milestones=(6,), batch_size=32,
            lr=0.01, adapter_epochs=10, adapter_lr=0.05, adapter_milestones=(8,), n_samples=1000, lam=1.0)


def easy_stream(num_tasks=3, seed=0, **kw):
    spec = dict(input_dim=8, classes_per_task=2, num_tasks=num_tasks, samples_per_class=60,
                cluster_separation=8.0, cluster_spread=0.5, seed=seed)
    return generate_synthetic(SyntheticSpec(**{**spec, **kw}))


def fast_hp(**kw):
    return HyperParams(**{**FAST, **kw})


def compact_stream():
    # Many classes per task keep old features inside the region the adapter is fit on.
    return generate_synthetic(SyntheticSpec(input_dim=16, classes_per_task=16, num_tasks=3, samples_per_class=100,
                                            cluster_separation=1.0, cluster_spread=0.2, anisotropy=1.0, seed=0))


def compact_hp(**kw):
    base = dict(latent_dim=8, hidden_dims=(64, 64), projector_factor=32, epochs=20, lr_milestones=(10, 15),
                batch_size=64, lr=0.01, adapter_epochs=30, adapter_lr=0.05, adapter_milestones=(20,),
                n_samples=2000, lam=10.0)
    return HyperParams(**{**base, **kw})


class TestReport:
    def test_a_inc_averaging(self):
        rep = RunReport(acc_matrix=[[0.8], [0.6, 0.6]])
        assert rep.a_inc == pytest.approx(0.7)
        assert rep.a_last == pytest.approx(0.6)

    def test_hyperparam_defaults(self):
        hp = HyperParams()
        assert (hp.lam, hp.n_samples, hp.projector_factor, hp.epochs, hp.weight_decay) == (10.0, 10_000, 32, 200, 5e-4)
        assert (hp.lr, hp.lr_milestones, hp.lr_decay) == (0.1, (60, 120, 180), 0.1)
        assert (hp.adapter_epochs, hp.adapter_lr, hp.adapter_milestones) == (100, 0.01, (45, 90))

    @pytest.mark.parametrize("kw", [dict(batch_size=1), dict(epochs=-1), dict(n_samples=1), dict(beta=0.0),
                                    dict(lam=-1.0), dict(grad_clip=-1.0)])
    def test_invalid_hyperparams(self, kw):
        with pytest.raises(InvalidConfig):
            HyperParams(**kw)

    @pytest.mark.parametrize("kw", [dict(classifier="svm"), dict(adapt_mode="half"), dict(distillation="x"),
                                    dict(shrink=-0.5)])
    def test_invalid_ablation(self, kw):
        with pytest.raises(InvalidConfig):
            AblationConfig(**kw)

    def test_lr_schedule(self):
        assert [runner.lr_at(e, 0.1, (2, 4), 0.1) for e in range(5)] == pytest.approx([0.1, 0.1, 0.01, 0.01, 0.001])

    def test_short_final_batch_merged(self):
        batches = runner.make_batches(9, 4, np.random.default_rng(0))
        assert [b.size for b in batches] == [4, 5]
        assert sorted(np.concatenate(batches)) == list(range(9))


class TestRun:
    def test_single_task(self, monkeypatch):
        def forbidden(*a, **k):
            raise AssertionError("no adapter for a single task")

        monkeypatch.setattr(runner, "train_adapter", forbidden)
        rep = run(easy_stream(num_tasks=1), fast_hp())
        assert len(rep.acc_matrix) == 1
        assert rep.a_last == rep.a_inc == rep.acc_matrix[0][0]

    def test_separable_stream(self):
        stream, hp = compact_stream(), compact_hp()
        rep = run(stream, hp)
        assert rep.a_last >= 0.9
        assert [len(r) for r in rep.acc_matrix] == [1, 2, 3]

    def test_adapt_all_once_per_later_task(self, monkeypatch):
        calls = []
        original = runner.adapt_all

        def counting(memory, adapter, n, seed, current_task, *a, **k):
            calls.append(current_task)
            return original(memory, adapter, n, seed, current_task, *a, **k)

        monkeypatch.setattr(runner, "adapt_all", counting)
        run(easy_stream(num_tasks=4), fast_hp())
        assert calls == [2, 3, 4]

    def test_stage_order(self):
        stages = []
        run(easy_stream(num_tasks=2), fast_hp(), observer=lambda stage, t, state: stages.append((t, stage)))
        assert stages == [(1, "memorized"), (1, "evaluated"), (2, "memorized"), (2, "evaluated")]

    def test_efcil_audit(self):
        audit = AccessAudit()
        run(easy_stream(num_tasks=3), fast_hp(), audit=audit)
        assert audit.reads and audit.violations() == []
        assert {cur for cur, _ in audit.reads} == {1, 2, 3}

    def test_reproducible(self):
        a = run(easy_stream(), fast_hp(seed=3))
        b = run(easy_stream(), fast_hp(seed=3))
        assert a.metrics == b.metrics
        assert a.acc_matrix == b.acc_matrix

    def test_seed_changes_result(self):
        a = run(easy_stream(), fast_hp(seed=1))
        b = run(easy_stream(), fast_hp(seed=2))
        assert a.metrics != b.metrics

    def test_no_shrink_with_anticollapse(self, monkeypatch):
        gammas = []
        original = runner.memorize_task

        def spy(memory, extractor, task, shrink=0.0):
            gammas.append(shrink)
            return original(memory, extractor, task, shrink)

        monkeypatch.setattr(runner, "memorize_task", spy)
        run(easy_stream(num_tasks=2), fast_hp())
        assert gammas == [0.0, 0.0]

    def test_zero_adapter_epochs_flagged(self):
        rep = run(easy_stream(num_tasks=2), fast_hp(adapter_epochs=0))
        assert any("zero epochs" in f for f in rep.flags)

    def test_failure_names_task_and_phase(self):
        def bad_memorize(*a, **k):
            raise NotPositiveDefinite("pivot 0 = 0")

        with pytest.MonkeyPatch.context() as mp:
            mp.setattr(runner, "memorize_task", bad_memorize)
            with pytest.raises(RunFailure, match="task 1, phase memorize") as info:
                run(easy_stream(num_tasks=2), fast_hp())
        assert isinstance(info.value.cause, NotPositiveDefinite)

    @pytest.mark.parametrize("mode", ["none", "feature", "logit", "projected"])
    def test_distillation_modes_run(self, mode):
        rep = run(easy_stream(num_tasks=2), fast_hp(), AblationConfig(distillation=mode))
        kd = [v for t, ph, m, v in rep.metrics if m == "train_kd" and t == 2][0]
        assert (kd == 0.0) == (mode == "none")

    def test_linear_head_classifier(self):
        rep = run(compact_stream(), compact_hp(head_samples=100, head_epochs=20),
                  AblationConfig(classifier="linear_head"))
        assert rep.a_last >= 0.9

    def test_checkpoints_written(self, tmp_path):
        run(easy_stream(num_tasks=2), fast_hp(), checkpoint_dir=tmp_path)
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == ["extractor_task001.agnet", "extractor_task002.agnet",
                         "memory_task001.agmem", "memory_task001_pre.agmem",
                         "memory_task002.agmem", "memory_task002_pre.agmem"]


def single_task(seed=0, n=200):
    stream = easy_stream(num_tasks=1, seed=seed, samples_per_class=n)
    return stream.tasks[0]


class TestTrainTask:
    def test_loss_decreases(self):
        task = single_task()
        hp = fast_hp(epochs=12, lr_milestones=(), lr=0.003)
        cfg = hp.network_config(task.test_x.shape[1])
        rng = np.random.default_rng(0)
        ext, head = build_extractor(cfg, rng), build_head(cfg, 2, rng)
        hist = train_task(ext, None, None, head, task, hp, AblationConfig())
        smooth = np.convolve(hist["loss"], np.ones(3) / 3, mode="valid")[:10]
        assert np.all(np.diff(smooth) < 0)
        assert all(np.isfinite(hist["loss"]))

    def test_distillation_none_drops_kd(self):
        task = single_task()
        hp = fast_hp(epochs=2)
        cfg = hp.network_config(task.test_x.shape[1])
        rng = np.random.default_rng(1)
        ext = build_extractor(cfg, rng)
        prev = clone_frozen(build_extractor(cfg, rng))
        hist = train_task(ext, prev, None, build_head(cfg, 2, rng), task, hp, AblationConfig(distillation="none"))
        assert hist["kd"] == [0.0, 0.0]
        np.testing.assert_allclose(hist["loss"], np.add(hist["ce"], hist["ac"]))

    def test_frozen_extractor_unchanged(self):
        task = single_task()
        hp = fast_hp(epochs=2)
        cfg = hp.network_config(task.test_x.shape[1])
        rng = np.random.default_rng(2)
        ext = build_extractor(cfg, rng)
        prev = clone_frozen(build_extractor(cfg, rng))
        x, _ = task.train()
        before = prev.predict(x).copy()
        from adagauss.networks import build_projector
        train_task(ext, prev, build_projector(cfg, rng), build_head(cfg, 2, rng), task, hp, AblationConfig())
        np.testing.assert_array_equal(prev.predict(x), before)


class TestTrainAdapter:
    def _frozen(self, seed=0, s=4):
        cfg = NetworkConfig(input_dim=8, hidden_dims=(32,), latent_dim=s)
        return clone_frozen(build_extractor(cfg, np.random.default_rng(seed)))

    def test_self_map(self):
        task = single_task()
        ext = self._frozen()
        hp = fast_hp(adapter_epochs=300, adapter_milestones=(225,), adapter_lr=0.01)
        adapter, hist = train_adapter(ext, ext, task, hp, anticollapse=False)
        assert hist["mse"][-1] <= 1e-3

    def test_affine_drift(self):
        task = single_task()
        ext = self._frozen()
        rng = np.random.default_rng(5)
        a = np.eye(4) + 0.3 * rng.standard_normal((4, 4))
        b = rng.standard_normal(4)

        class Drifted:
            output_dim = 4

            def predict(self, x):
                return ext.predict(x) @ a.T + b

        hp = fast_hp(adapter_epochs=300, adapter_milestones=(225,), adapter_lr=0.01)
        adapter, _ = train_adapter(ext, Drifted(), task, hp, anticollapse=False)
        held = task.test_x
        target = Drifted().predict(held)
        mse = np.mean(np.sum((adapter.predict(ext.predict(held)) - target) ** 2, axis=1))
        assert mse <= 1e-2 * np.sum(target.var(axis=0))


class TestEvaluate:
    def _ground_truth_memory(self, stream):
        memory = GaussianMemory(stream.input_dim)
        for c, (mean, cov) in stream.true_gaussians.items():
            memory.add(ClassGaussian(c, mean, cov, 1))
        return memory

    def test_plug_in_is_bayes_optimal(self):
        spec = SyntheticSpec(input_dim=4, classes_per_task=3, num_tasks=1, samples_per_class=2000,
                             cluster_separation=1.5, anisotropy=3.0, seed=1)
        stream = generate_synthetic(spec)
        memory = self._ground_truth_memory(stream)
        identity = type("Identity", (), {"predict": staticmethod(lambda x: x)})()
        acc = evaluate(identity, memory, stream.tasks, ClassifierConfig())[0]
        # Bayes-optimal accuracy estimated on a large fresh sample from the true mixture.
        rng = np.random.default_rng(9)
        xs, ys = [], []
        for c, (mean, cov) in stream.true_gaussians.items():
            xs.append(rng.multivariate_normal(mean, cov, 20_000))
            ys.append(np.full(20_000, c))
        task = TaskData(1, stream.tasks[0].classes, xs[0][:1], ys[0][:1], np.concatenate(xs), np.concatenate(ys))
        optimal = evaluate(identity, memory, [task], ClassifierConfig())[0]
        assert abs(acc - optimal) <= 0.02

    def test_single_class(self):
        stream = easy_stream(num_tasks=1, classes_per_task=1)
        memory = self._ground_truth_memory(stream)
        identity = type("Identity", (), {"predict": staticmethod(lambda x: x)})()
        assert evaluate(identity, memory, stream.tasks, ClassifierConfig()) == [1.0]

    def test_order_independent(self):
        stream = easy_stream(num_tasks=3)
        memory = self._ground_truth_memory(stream)
        identity = type("Identity", (), {"predict": staticmethod(lambda x: x)})()
        row = evaluate(identity, memory, stream.tasks, ClassifierConfig())
        rev = evaluate(identity, memory, stream.tasks[::-1], ClassifierConfig())
        assert row == rev[::-1]

    def test_empty_memory(self):
        with pytest.raises(EmptyMemory):
            evaluate(None, GaussianMemory(2), [], ClassifierConfig())
