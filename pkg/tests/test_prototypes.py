import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from thingseg.errors import NotReadyError
from thingseg.featnet import NetConfig, backward, forward, init_params
from thingseg.prototypes import (PrototypeBank, class_means, fb_loss, fb_loss_arrays, fb_targets,
                                 superclass_prototype, update_bank, update_bank_arrays)

from conftest import random_cloud
from gradcheck import numeric_grad, rel_error


def full_bank(rng, k, p, momentum=0.9):
    return PrototypeBank(rng.normal(size=(k, p)), np.ones(k, dtype=bool), momentum)


class TestEMA:
    def test_first_sighting_copies_mean(self):
        bank = PrototypeBank.empty(3, 2)
        proj = np.array([[1.0, 2.0], [3.0, 4.0], [9.0, 9.0]])
        out = update_bank_arrays(bank, proj, np.array([0, 0, -1]))
        np.testing.assert_allclose(out.prototypes[0], [2.0, 3.0])
        assert out.seen.tolist() == [True, False, False]
        assert not out.prototypes[1:].any()

    def test_blend(self):
        bank = PrototypeBank(np.array([[1.0], [5.0]]), np.array([True, True]), 0.75)
        out = update_bank_arrays(bank, np.array([[3.0]]), np.array([1]))
        np.testing.assert_allclose(out.prototypes, [[1.0], [0.75 * 5 + 0.25 * 3]])

    @pytest.mark.parametrize("m", [0.0, 0.5, 0.9, 1.0])
    def test_geometric_contraction(self, m):
        rng = np.random.default_rng(0)
        mu = rng.normal(size=4)
        bank = PrototypeBank(rng.normal(size=(1, 4)), np.array([True]), m)
        start = np.linalg.norm(bank.prototypes[0] - mu)
        for t in range(1, 30):
            bank = update_bank_arrays(bank, mu[None, :], np.array([0]))
            got = np.linalg.norm(bank.prototypes[0] - mu)
            assert abs(got - m ** t * start) <= 1e-9

    def test_input_not_mutated(self):
        bank = PrototypeBank.empty(2, 2)
        update_bank_arrays(bank, np.ones((1, 2)), np.array([1]))
        assert not bank.seen.any()

    def test_update_bank_from_trace(self, toy_tax):
        rng = np.random.default_rng(0)
        cloud = random_cloud(rng, 30)
        p = init_params(NetConfig(n_classes=7, proj_dim=3, n_beams=4), 0)
        trace = forward(p, cloud)
        bank = update_bank(PrototypeBank.empty(7, 3), trace, cloud, toy_tax)
        idx = toy_tax.train_index(cloud.label)
        for k in range(7):
            if np.any(idx == k):
                np.testing.assert_allclose(bank.prototypes[k], trace.proj[idx == k].mean(0))

    def test_dict_round_trip(self):
        bank = full_bank(np.random.default_rng(0), 3, 2)
        back = PrototypeBank.from_dict(bank.to_dict())
        assert np.array_equal(back.prototypes, bank.prototypes)
        assert back.momentum == bank.momentum


class TestTargets:
    def test_superclass_prototype_is_member_mean(self, toy_tax):
        bank = full_bank(np.random.default_rng(1), 7, 3)
        vehicle = superclass_prototype(bank, toy_tax, 0)
        np.testing.assert_allclose(vehicle, bank.prototypes[[0, 1]].mean(0))

    def test_not_ready(self, toy_tax):
        bank = full_bank(np.random.default_rng(1), 7, 3)
        bank.seen[1] = False
        with pytest.raises(NotReadyError):
            superclass_prototype(bank, toy_tax, 0)
        targets, ready = fb_targets(bank, toy_tax, "superclass")
        assert ready.tolist() == [False, False, True, True, True, True, True]

    def test_coarse_targets(self, toy_tax):
        bank = full_bank(np.random.default_rng(2), 7, 3)
        targets, ready = fb_targets(bank, toy_tax, "coarse")
        assert ready.all()
        np.testing.assert_allclose(targets[0], bank.prototypes[:4].mean(0))
        np.testing.assert_allclose(targets[6], bank.prototypes[4:].mean(0))

    def test_literal_form_is_one_shared_target(self, toy_tax):
        bank = full_bank(np.random.default_rng(3), 7, 3)
        targets, ready = fb_targets(bank, toy_tax, "literal-eq3")
        supers = [superclass_prototype(bank, toy_tax, s) for s in range(4)]
        np.testing.assert_allclose(targets, np.tile(np.mean(supers, axis=0), (7, 1)))

    def test_unknown_variant(self, toy_tax):
        with pytest.raises(ValueError):
            fb_targets(PrototypeBank.empty(7, 2), toy_tax, "instance")


class TestLoss:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(0, 25))
    def test_matches_double_loop(self, seed, n):
        rng = np.random.default_rng(seed)
        k, p = 5, 3
        proj = rng.normal(size=(n, p))
        idx = rng.integers(-1, k, size=n)
        targets = rng.normal(size=(k, p))
        ready = rng.random(k) < 0.7
        loss, d = fb_loss_arrays(proj, idx, targets, ready)
        expect = 0.0
        for c in range(k):
            rows = [i for i in range(n) if idx[i] == c]
            if rows and ready[c]:
                mean = sum(proj[i] for i in rows) / len(rows)
                expect += float(np.sum((mean - targets[c]) ** 2))
        assert loss == pytest.approx(expect, rel=1e-12, abs=1e-12)
        # gradient by finite differences on the projections
        eps = 1e-6
        for i in range(min(n, 5)):
            for j in range(p):
                bumped = proj.copy()
                bumped[i, j] += eps
                up = fb_loss_arrays(bumped, idx, targets, ready)[0]
                bumped[i, j] -= 2 * eps
                down = fb_loss_arrays(bumped, idx, targets, ready)[0]
                assert d[i, j] == pytest.approx((up - down) / (2 * eps), abs=1e-6)

    def test_zero_when_means_equal_targets(self, toy_tax):
        rng = np.random.default_rng(0)
        bank = full_bank(rng, 7, 3)
        for variant in ("superclass", "classwise", "coarse", "literal-eq3"):
            targets, _ = fb_targets(bank, toy_tax, variant)
            idx = np.arange(7)
            loss, d = fb_loss_arrays(targets.copy(), idx, targets, np.ones(7, bool))
            assert loss == 0.0 and not d.any()

    def test_gradients_through_network(self, toy_tax):
        rng = np.random.default_rng(4)
        cloud = random_cloud(rng, 24)
        p = init_params(NetConfig(n_classes=7, hidden=5, feat_dim=4, proj_dim=3, proj_hidden=4,
                                  n_beams=4), 3)
        bank = full_bank(rng, 7, 3)

        def loss(q):
            return fb_loss(bank, toy_tax, forward(q, cloud), cloud, "superclass")[0]

        trace = forward(p, cloud)
        _, d = fb_loss(bank, toy_tax, trace, cloud, "superclass")
        assert rel_error(backward(p, trace, d_proj=d), numeric_grad(loss, p), p.names()) < 1e-6

    def test_class_means_skip_ignored(self):
        means, counts = class_means(np.array([[1.0], [3.0], [7.0]]), np.array([0, 0, -1]), 2)
        assert means.tolist() == [[2.0], [0.0]] and counts.tolist() == [2, 0]
