import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sepkit import crafting, engine
from sepkit.budget import PerturbationBudget, budget_violations
from sepkit.crafting import TargetPermutation
from sepkit.data import LabeledDataset

SHAPE = (2, 6, 6)
C = 3


@pytest.fixture(scope="module")
def members():
    arch = engine.cnn_small(SHAPE, C, channels=(3, 4), hidden=6)
    return [engine.init_params(arch, s).with_epoch(e) for s, e in zip((11, 12, 13), (2, 4, 6))]


@pytest.fixture(scope="module")
def fixture_set():
    rng = np.random.default_rng(5)
    return LabeledDataset(rng.random((12,) + SHAPE), np.arange(12) % C, C)


PERM = TargetPermutation(C, 1)


def budget(**kw):
    kw.setdefault("eps_linf", 0.1)
    kw.setdefault("steps", 4)
    return PerturbationBudget(**kw)


class TestPermutation:
    def test_derangement(self):
        for classes in range(2, 7):
            for off in range(1, classes):
                g = TargetPermutation(classes, off)(np.arange(classes))
                assert sorted(g.tolist()) == list(range(classes))
                assert np.all(g != np.arange(classes))

    def test_identity_offset_rejected(self):
        with pytest.raises(ValueError):
            TargetPermutation(4, 8)

    def test_out_of_range_label(self):
        with pytest.raises(ValueError):
            crafting.target_class(4, TargetPermutation(4, 2))
        assert crafting.target_class(3, TargetPermutation(4, 2)) == 1


class TestEnsemble:
    def test_sum_of_members(self, members, fixture_set):
        x, t = fixture_set.images[:4], PERM(fixture_set.labels[:4])
        g = crafting.ensemble_gradient(members, x, t)
        expected = sum(engine.input_gradient_ce(m, x, t) for m in members)
        np.testing.assert_allclose(g, expected, rtol=1e-12, atol=1e-15)

    def test_centers_are_class_means(self, members, fixture_set):
        cen = crafting.class_centers(members, fixture_set)
        f = engine.features(members[1], fixture_set.images)
        for c in range(C):
            np.testing.assert_allclose(cen.centers[1, c], f[fixture_set.labels == c].mean(axis=0), rtol=1e-12)
        assert cen.epochs == (2, 4, 6)

    def test_empty_class_rejected(self, members, fixture_set):
        ds = fixture_set.subset(np.flatnonzero(fixture_set.labels != 2))
        with pytest.raises(ValueError, match="class 2"):
            crafting.class_centers(members, ds)

    def test_fa_descent_lowers_loss(self, members, fixture_set):
        out, _ = crafting.craft_sep(fixture_set, members, budget(steps=6), PERM, loss="fa")
        cen = crafting.class_centers(members, fixture_set)
        t = PERM(fixture_set.labels)
        before = crafting.ensemble_loss(members, fixture_set.images, t, "fa", cen).mean()
        after = crafting.ensemble_loss(members, out.images, t, "fa", cen).mean()
        assert after < before


class TestReductions:
    @pytest.mark.parametrize("b", [budget(), budget(norms={"l2"}, eps_l2=0.5), budget(norms={"l0"}, eps_l0=3)])
    def test_one_member_is_single_model(self, members, fixture_set, b):
        a, _ = crafting.craft_sep(fixture_set, members[-1:], b, PERM)
        s, _ = crafting.craft_single_model(fixture_set, members[-1], b, PERM)
        assert a.images.tobytes() == s.images.tobytes()

    def test_one_inner_step_is_sep_fa(self, members, fixture_set):
        b = budget(inner_steps=1)
        vr, _ = crafting.craft_sep_fa_vr(fixture_set, members, b, PERM)
        fa, _ = crafting.craft_sep(fixture_set, members, b, PERM, loss="fa")
        assert vr.images.tobytes() == fa.images.tobytes()

    def test_first_inner_gradient_is_ensemble_mean(self, members, fixture_set):
        seen = []

        def trace(state):
            if state.m == 0:
                seen.append(state.t)
                assert np.array_equal(state.g_upd, state.g_ens)

        crafting.craft_sep_fa_vr(fixture_set, members, budget(inner_steps=3), PERM, trace=trace)
        assert seen == [0, 1, 2, 3]

    def test_vr_picks_deterministic_and_in_range(self):
        a = crafting.vr_picks(3, [0, 1, 2], 5, 4, 6)
        assert np.array_equal(a, crafting.vr_picks(3, [0, 1, 2], 5, 4, 6))
        assert a.shape == (3, 4, 6) and a.min() >= 0 and a.max() < 5
        # a sample's stream depends only on its own id
        assert np.array_equal(crafting.vr_picks(3, [2], 5, 4, 6)[0], a[2])

    def test_zero_inner_steps_rejected(self, members, fixture_set):
        with pytest.raises(ValueError, match="inner_steps"):
            crafting.craft_sep_fa_vr(fixture_set, members, budget(inner_steps=0), PERM)


class TestL0:
    @settings(max_examples=50)
    @given(st.integers(0, 2 ** 32 - 1), st.integers(1, 4))
    def test_selection_maximizes_score(self, seed, k):
        rng = np.random.default_rng(seed)
        x0 = rng.random((2, 2, 3))
        g = rng.normal(size=x0.shape)
        out = crafting.apply_l0(x0, x0, g, k)
        changed = np.flatnonzero(np.any(out != x0, axis=0).reshape(-1))
        score = np.abs(g).sum(axis=0).reshape(-1)
        best = max(score[list(s)].sum() for s in itertools.combinations(range(6), k))
        chosen = np.flatnonzero(np.all(out == np.where(g > 0, 0.0, 1.0), axis=0).reshape(-1))
        assert len(changed) <= k
        assert score[chosen].sum() == pytest.approx(best) if len(chosen) == k else True
        assert set(changed) <= set(chosen)

    def test_saturation_direction(self):
        x0 = np.full((1, 1, 2), 0.5)
        g = np.array([[[2.0, -1.0]]])
        np.testing.assert_array_equal(crafting.apply_l0(x0, x0, g, 2), [[[0.0, 1.0]]])
        np.testing.assert_array_equal(crafting.apply_l0(x0, x0, g, 1), [[[0.0, 0.5]]])

    def test_ties_take_lower_index(self):
        x0 = np.zeros((1, 1, 3))
        out = crafting.apply_l0(x0, x0, -np.ones_like(x0), 1)
        np.testing.assert_array_equal(out, [[[1.0, 0.0, 0.0]]])

    def test_too_many_pixels(self):
        x0 = np.zeros((1, 2, 2))
        with pytest.raises(ValueError):
            crafting.apply_l0(x0, x0, x0, 5)


FAMILIES = [
    dict(eps_linf=0.08),
    dict(norms={"l2"}, eps_l2=0.4),
    dict(norms={"l0"}, eps_l0=2),
    dict(norms={"linf", "l2"}, eps_linf=0.05, eps_l2=0.3),
    dict(norms={"linf", "l0"}, eps_linf=0.05, eps_l0=2),
]


class TestFeasibility:
    @pytest.mark.parametrize("method", ["sep", "sep-fa", "sep-fa-vr", "single-model"])
    @pytest.mark.parametrize("family", FAMILIES, ids=lambda f: "+".join(sorted(f.get("norms", {"linf"}))))
    def test_every_iterate_in_budget(self, members, fixture_set, method, family):
        b = PerturbationBudget(steps=3, inner_steps=2, **family)
        calls = []

        def observer(t, norm, x, x0):
            crafting.check_iterate(b, norm, x, x0)
            calls.append(norm)

        out, manifest = crafting.craft(method, fixture_set, members, b, PERM, observer=observer)
        assert calls
        assert set(calls) == set(b.norms)
        assert not budget_violations(out.images, fixture_set.images, b)
        assert manifest.method == method

    def test_random_noise_bounds(self, fixture_set):
        eps = 8 / 255
        out, m = crafting.craft_random(fixture_set, eps, seed=3)
        d = out.images.astype(np.float64) - fixture_set.images
        assert np.abs(d).max() <= eps + 1e-6
        assert out.images.min() >= 0 and out.images.max() <= 1
        again, _ = crafting.craft_random(fixture_set, eps, seed=3)
        assert again.images.tobytes() == out.images.tobytes()
        assert m.method == "random" and m.budget["eps_linf"] == eps

    def test_zero_steps_is_identity(self, members, fixture_set):
        out, _ = crafting.craft_sep(fixture_set, members, budget(steps=0), PERM)
        assert out.images.tobytes() == fixture_set.images.tobytes()


class TestExecution:
    def test_thread_and_chunk_invariance(self, members, fixture_set):
        b = budget(inner_steps=2, steps=2)
        ref, _ = crafting.craft_sep_fa_vr(fixture_set, members, b, PERM, chunk=512, threads=1)
        for chunk, threads in [(1, 1), (5, 3), (4, 4)]:
            out, _ = crafting.craft_sep_fa_vr(fixture_set, members, b, PERM, chunk=chunk, threads=threads)
            assert out.images.tobytes() == ref.images.tobytes()

    def test_class_mask_leaves_other_classes(self, members, fixture_set):
        out, m = crafting.craft_sep(fixture_set, members, budget(), PERM, class_mask=[1])
        keep = fixture_set.labels != 1
        assert np.array_equal(out.images[keep], fixture_set.images[keep].astype(np.float32))
        assert not np.array_equal(out.images[~keep], fixture_set.images[~keep].astype(np.float32))
        assert m.extra["class_mask"] == [1]

    def test_log_records_each_step(self, members, fixture_set):
        log = crafting.CraftLog()
        crafting.craft_sep(fixture_set, members, budget(steps=3), PERM, log=log, chunk=5)
        rows = log.rows()
        assert [r["step"] for r in rows] == [0, 1, 2, 3]
        assert rows[0]["mean_linf"] == 0.0 and rows[-1]["mean_linf"] > 0

    def test_log_csv_is_plain_numbers(self, members, fixture_set, tmp_path):
        log = crafting.CraftLog()
        crafting.craft_sep(fixture_set, members, budget(steps=2), PERM, log=log)
        log.write_csv(tmp_path / "log.csv")
        lines = (tmp_path / "log.csv").read_text().splitlines()
        back = [float(line.split(",")[2]) for line in lines[1:]]
        assert back == [r["mean_loss"] for r in log.rows()]

    def test_unknown_method(self, members, fixture_set):
        with pytest.raises(ValueError):
            crafting.craft("sepx", fixture_set, members, budget(), PERM)

    def test_mixed_components_sum(self, members, fixture_set):
        b = PerturbationBudget(norms={"linf", "l2"}, eps_linf=0.05, eps_l2=0.3, steps=2)
        mixed, _ = crafting.craft_sep(fixture_set, members, b, PERM)
        a, _ = crafting.craft_sep(fixture_set, members, b.single("linf"), PERM)
        c, _ = crafting.craft_sep(fixture_set, members, b.single("l2"), PERM)
        x0 = fixture_set.images.astype(np.float64)
        expected = np.clip(x0 + (a.images.astype(np.float64) - x0) + (c.images.astype(np.float64) - x0), 0, 1)
        np.testing.assert_allclose(mixed.images, expected, atol=1e-6)
        assert not budget_violations(mixed.images, x0, b)
