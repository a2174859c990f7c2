import numpy as np
import pytest
from hypothesis import given, strategies as st

from sepkit import engine, training
from sepkit.budget import PerturbationBudget, is_feasible
from sepkit.data import LabeledDataset, SyntheticSpec, gen_synthetic
from sepkit.training import CheckpointSet, TrainConfig


@pytest.fixture(scope="module")
def tiny():
    spec = SyntheticSpec(classes=3, image_size=6, channels=1, per_class=8, test_per_class=4)
    return gen_synthetic(spec, 0), gen_synthetic(spec, 0, "test")


@pytest.fixture(scope="module")
def tiny_arch():
    return engine.mlp_small((1, 6, 6), 3, hidden=(8, 6))


def fake_set(arch, epochs):
    base = engine.init_params(arch, 0)
    return CheckpointSet(tuple(base.with_epoch(e) for e in epochs))


class TestSchedule:
    def test_decay_points(self):
        cfg = TrainConfig(epochs=120, lr=0.1)
        assert cfg.decay_epochs() == [75, 90]
        assert cfg.lr_at(74) == 0.1
        assert cfg.lr_at(75) == pytest.approx(0.01)
        assert cfg.lr_at(90) == pytest.approx(0.001)

    @pytest.mark.parametrize("kwargs", [{"epochs": 0}, {"lr": -1}, {"momentum": 1.0},
                                        {"decay_fractions": (1.2,)}, {"snapshot_period": 0}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)


class TestSgdStep:
    @given(st.floats(0.01, 1.0), st.floats(0.01, 0.5), st.integers(1, 30))
    def test_plain_quadratic(self, a, lr, k):
        # f(p) = a p^2 / 2 without momentum: p_k = (1 - lr a)^k p_0
        p, v = np.array([1.0]), np.zeros(1)
        for _ in range(k):
            p, v = training.sgd_step(p, v, a * p, lr, 0.0, 0.0)
        assert p[0] == pytest.approx((1 - lr * a) ** k, rel=1e-9, abs=1e-12)

    def test_momentum_matches_linear_recurrence(self):
        a, lr, mu, wd = 0.7, 0.1, 0.9, 0.01
        # state (p, v): v' = mu v + (a + wd) p, p' = p - lr v'
        h = a + wd
        T = np.array([[1 - lr * h, -lr * mu], [h, mu]])
        expected = np.linalg.matrix_power(T, 25) @ np.array([2.0, 0.0])
        p, v = np.array([2.0]), np.zeros(1)
        for _ in range(25):
            p, v = training.sgd_step(p, v, a * p, lr, mu, wd)
        np.testing.assert_allclose([p[0], v[0]], expected, rtol=1e-10)


class TestTrain:
    def test_zero_lr_keeps_parameters(self, tiny, tiny_arch):
        cks, _ = training.train(tiny_arch, tiny[0], TrainConfig(epochs=2, lr=0.0, snapshot_period=1))
        init = engine.init_params(tiny_arch, 0).rounded()
        for ck in cks:
            assert np.array_equal(ck.params, init.params)

    def test_deterministic(self, tiny, tiny_arch):
        cfg = TrainConfig(epochs=3, lr=0.05, snapshot_period=1, augment=True)
        a, ra = training.train(tiny_arch, tiny[0], cfg, test=tiny[1])
        b, rb = training.train(tiny_arch, tiny[0], cfg, test=tiny[1])
        assert all(np.array_equal(x.params, y.params) for x, y in zip(a, b))
        assert ra.train_loss == rb.train_loss and ra.test_acc == rb.test_acc

    def test_snapshot_grid_and_report(self, tiny, tiny_arch):
        cfg = TrainConfig(epochs=6, lr=0.05, snapshot_period=2)
        cks, rep = training.train(tiny_arch, tiny[0], cfg, tracked=tiny[0], test=tiny[1])
        assert cks.epochs == [2, 4, 6]
        assert rep.epochs == 6 and rep.recognition.shape == (6, len(tiny[0]))
        # recognition of the training set is the training accuracy
        np.testing.assert_allclose(rep.recognition.mean(axis=1), rep.train_acc)
        assert rep.test_acc[-1] == training.evaluate(cks.final, tiny[1]).accuracy

    def test_learns_separable_data(self, tiny, tiny_arch):
        cks, rep = training.train(tiny_arch, tiny[0], TrainConfig(epochs=15, lr=0.05, snapshot_period=15))
        assert rep.train_loss[-1] < rep.train_loss[0]

    def test_shape_mismatch_rejected(self, tiny):
        with pytest.raises(ValueError):
            training.train(engine.mlp_small((1, 5, 5), 3), tiny[0], TrainConfig(epochs=1))

    def test_checkpoint_set_save_load(self, tiny, tiny_arch, tmp_path):
        cks, _ = training.train(tiny_arch, tiny[0], TrainConfig(epochs=2, snapshot_period=1))
        cks.save(tmp_path)
        back = CheckpointSet.load(tmp_path, tiny_arch)
        assert back.epochs == cks.epochs
        assert all(np.array_equal(x.params, y.params) for x, y in zip(back, cks))


class TestSelection:
    @pytest.mark.parametrize("n, first", [(15, 8), (5, 24), (1, 120)])
    def test_equidistant(self, tiny_arch, n, first):
        cks = fake_set(tiny_arch, range(1, 121))
        sel = training.select_checkpoints(cks, n)
        assert sel.epochs == list(range(first, 121, first))

    def test_coarse_grid(self, tiny_arch):
        cks = fake_set(tiny_arch, range(5, 41, 5))
        assert training.select_checkpoints(cks, 4).epochs == [10, 20, 30, 40]
        with pytest.raises(ValueError, match="lacks"):
            training.select_checkpoints(cks, 5)

    def test_non_divisor_rejected(self, tiny_arch):
        with pytest.raises(ValueError):
            training.select_checkpoints(fake_set(tiny_arch, range(1, 121)), 7)

    def test_unordered_rejected(self, tiny_arch):
        with pytest.raises(ValueError):
            fake_set(tiny_arch, [2, 1])


class TestEvaluate:
    @given(st.integers(0, 2 ** 32 - 1))
    def test_confusion_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(2, 5))
        y, p = rng.integers(0, k, 30), rng.integers(0, k, 30)
        conf, undefined = training.confusion_matrix(y, p, k)
        for i in range(k):
            rows = [j for j in range(30) if y[j] == i]
            if not rows:
                assert i in undefined and np.isnan(conf[i]).all()
                continue
            for c in range(k):
                assert conf[i, c] == sum(1 for j in rows if p[j] == c) / len(rows)

    def test_constant_and_oracle_models(self):
        ds = LabeledDataset(np.zeros((6, 1, 1, 1)), [0, 0, 1, 1, 1, 2], 3)
        const = training.evaluate(lambda x: np.zeros(len(x), dtype=int), ds)
        assert const.accuracy == pytest.approx(2 / 6)
        np.testing.assert_array_equal(const.confusion[:, 0], 1.0)
        oracle = training.evaluate(lambda x: ds.labels, ds)
        assert oracle.accuracy == 1.0
        np.testing.assert_array_equal(oracle.confusion, np.eye(3))

    def test_class_count_mismatch(self, small_mlp):
        ds = LabeledDataset(np.zeros((1, 2, 4, 4)), [0], 4)
        with pytest.raises(ValueError):
            training.evaluate(small_mlp, ds)


class TestAdversarial:
    def test_zero_radius_matches_plain_training(self, tiny, tiny_arch):
        cfg = TrainConfig(epochs=2, lr=0.05, snapshot_period=2)
        cks, _ = training.train(tiny_arch, tiny[0], cfg)
        final, _ = training.adversarial_train(tiny_arch, tiny[0], cfg, PerturbationBudget(eps_linf=0.0))
        assert np.array_equal(final.params, cks.final.params)

    @pytest.mark.parametrize("budget", [PerturbationBudget(eps_linf=0.05),
                                        PerturbationBudget(norms={"l2"}, eps_l2=0.3)])
    def test_pgd_stays_in_ball(self, small_mlp, rng, budget):
        x0 = rng.random((5, 2, 4, 4))
        y = rng.integers(0, 3, 5)
        seen = []
        x = training.pgd_attack(small_mlp, x0, y, budget, steps=5, rng=rng,
                                observer=lambda xi, _: seen.append(xi))
        assert len(seen) == 5 and all(is_feasible(s, x0, budget) for s in seen)
        # ascent raises the loss on average
        assert engine.ce_loss(engine.forward(small_mlp, x), y).mean() >= engine.ce_loss(engine.forward(small_mlp, x0), y).mean()

    def test_warmup_ramps_the_bound(self, tiny, tiny_arch):
        cfg = TrainConfig(epochs=4, lr=0.05, batch_size=len(tiny[0]), snapshot_period=4)
        eps = 0.08
        seen = []
        training.adversarial_train(tiny_arch, tiny[0], cfg, PerturbationBudget(eps_linf=eps), steps=2,
                                   warmup_epochs=4, observer=lambda x, x0: seen.append(np.abs(x - x0).max()))
        # one batch per epoch, two PGD iterates each
        per_epoch = np.array(seen).reshape(4, 2).max(axis=1)
        bounds = eps * np.arange(1, 5) / 4
        assert np.all(per_epoch <= bounds + 1e-12) and np.all(per_epoch > bounds - eps / 4 - 1e-12)

    def test_negative_warmup_rejected(self, tiny, tiny_arch):
        with pytest.raises(ValueError):
            training.adversarial_train(tiny_arch, tiny[0], TrainConfig(epochs=1), PerturbationBudget(eps_linf=0.1),
                                       warmup_epochs=-1)

    def test_mixed_bound_rejected(self, tiny, tiny_arch):
        with pytest.raises(ValueError):
            training.adversarial_train(tiny_arch, tiny[0], TrainConfig(epochs=1),
                                       PerturbationBudget(norms={"linf", "l2"}, eps_linf=0.1, eps_l2=0.1))
