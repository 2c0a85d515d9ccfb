import math
from collections import deque
from fractions import Fraction

import numpy as np
import pytest

from avssl import autodiff as ad
from avssl import contrastive as C
from avssl.autodiff import Tensor
from avssl.contrastive import LossConfig, MemoryBank, PairSets


# ---------------------------------------------------------------------------
# independent scalar oracle: plain Python lists and math, no numpy


def _cos(x, y):
    dot = sum(a * b for a, b in zip(x, y))
    return dot / (math.sqrt(sum(a * a for a in x)) * math.sqrt(sum(b * b for b in y)))


def _d(x, y, lam):
    return math.exp(_cos(x, y) / lam)


START_PERCENTILE = {"hard_neg": "0.9", "easy_neg": "0.2"}


def oracle_loss(variant, i, pred, anchors, partners, bank, k, m, lam, cross):
    """Loss for anchor ``i`` recomputed from raw lists.

    bank: list of entries oldest first. Ranks sort by descending cosine to the
    partner, ties broken by age.
    """
    query = partners[i]
    ranked = sorted(range(len(bank)), key=lambda j: (-_cos(query, bank[j]), j))
    positives = [(partners[i], 1.0)]
    if variant == "nnclr" and bank:
        positives = [(bank[ranked[0]], 1.0)]
    if variant in ("ours", "no_bank_neg", "hard_neg", "easy_neg", "uniform_w") and bank:
        top = ranked[:k]
        if variant == "uniform_w":
            positives += [(bank[j], 1.0) for j in top]
        else:
            total = sum(_d(query, bank[j], lam) for j in top)
            positives += [(bank[j], _d(query, bank[j], lam) / total) for j in top]
    negatives = []
    if variant != "simsiam":
        others = [j for j in range(len(anchors)) if j != i]
        negatives += [anchors[j] for j in others]
        if cross:
            negatives += [partners[j] for j in others]
    if variant in ("ours", "no_bank_pos", "hard_neg", "easy_neg", "uniform_w") and bank and m:
        pct = Fraction(START_PERCENTILE.get(variant, "0.5"))
        first = min(max(1, math.ceil((1 - pct) * len(bank))), len(bank))
        negatives += [bank[j] for j in ranked[first - 1 : first - 1 + m]]
    a = pred[i]
    if variant == "simsiam":
        return sum(w * (1.0 - _cos(a, p)) / lam for p, w in positives)
    neg = sum(_d(a, n, lam) for n in negatives)
    return sum(-w * math.log(_d(a, p, lam) / (_d(a, p, lam) + neg)) for p, w in positives)


def _random_instance(rng, variant):
    B = int(rng.integers(2, 4))
    n_bank = int(rng.integers(0, 9 - 2 * B))  # at most 8 embeddings in total
    D = 4
    anchors = rng.normal(size=(B, D))
    partners = rng.normal(size=(B, D))
    pred = anchors.copy() if variant == "simclr" else rng.normal(size=(B, D))
    bank = MemoryBank(8, D)
    if n_bank:
        bank.push_values(rng.normal(size=(n_bank, D)))
    return pred, anchors, partners, bank


def _cfg(variant, **kw):
    return LossConfig(variant=variant, k=2, m=2, **kw)


# ---------------------------------------------------------------------------


class TestSimilarity:
    def test_self(self):
        x = np.array([0.3, -1.2, 2.0])
        assert C.similarity(x, x, 0.2).item() == pytest.approx(math.exp(5), abs=1e-9)

    def test_opposite(self):
        x = np.array([1.0, 2.0])
        assert C.similarity(x, -x, 0.2).item() == pytest.approx(0.00673795, abs=1e-8)

    def test_orthogonal(self):
        assert C.similarity([1.0, 0.0], [0.0, 3.0], 0.2).item() == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("c", [0.1, 10.0])
    def test_scale_invariance(self, c):
        rng = np.random.default_rng(0)
        x, y = rng.normal(size=5), rng.normal(size=5)
        base = C.similarity(x, y, 0.2).item()
        assert C.similarity(c * x, y, 0.2).item() == pytest.approx(base, rel=1e-12)
        assert C.similarity(x, c * y, 0.2).item() == pytest.approx(base, rel=1e-12)

    def test_zero_norm(self):
        with pytest.raises(ValueError):
            C.similarity([0.0, 0.0], [1.0, 0.0])

    def test_no_gradient_into_second_argument(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        y = Tensor(np.array([0.5, -1.0]), requires_grad=True)
        ad.backward(C.similarity(x, y), [x, y])
        assert np.all(y.grad == 0.0)
        assert np.any(x.grad != 0.0)


class TestMemoryBank:
    def test_push_mean(self):
        bank = MemoryBank(4, 2)
        bank.push([1.0, 0.0], [0.0, 1.0])
        np.testing.assert_array_equal(bank.entries(), [[0.5, 0.5]])

    def test_fifo_capacity_two(self):
        bank = MemoryBank(2, 1)
        for v in (1.0, 2.0, 3.0):
            bank.push([v], [v + 1])
        np.testing.assert_array_equal(bank.entries(), [[2.5], [3.5]])

    def test_width_mismatch(self):
        with pytest.raises(ValueError):
            MemoryBank(2, 3).push([1.0, 2.0], [1.0, 2.0])

    def test_stored_values_are_detached(self):
        nu = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        bank = MemoryBank(2, 2)
        bank.push(nu, nu)
        nu.data[0] = 100.0
        assert bank.entries()[0, 0] == 1.0

    def test_matches_reference_ring_buffer(self):
        rng = np.random.default_rng(1)
        capacity, dim = 37, 3
        bank, ref = MemoryBank(capacity, dim), deque(maxlen=capacity)
        for t in range(10_000):
            nu, nu_hat = rng.normal(size=dim), rng.normal(size=dim)
            bank.push(nu, nu_hat)
            ref.append([(a + b) / 2 for a, b in zip(nu, nu_hat)])
            if t % 997 == 0 or t == 9_999:
                np.testing.assert_array_equal(bank.entries(), np.array(ref))
        assert len(bank) == capacity

    def test_state_round_trip(self):
        bank = MemoryBank(3, 2)
        bank.push_values(np.arange(10.0).reshape(5, 2))
        again = MemoryBank.from_state(3, 2, bank.state()["entries"])
        np.testing.assert_array_equal(again.entries(), bank.entries())


class TestNearestNeighbors:
    def test_example(self):
        query = np.array([1.0, 0.0])
        entries = np.array([[0.9, math.sqrt(1 - 0.81)], [0.1, math.sqrt(1 - 0.01)], [0.5, math.sqrt(0.75)]])
        bank = MemoryBank(3, 2)
        bank.push_values(entries)
        np.testing.assert_array_equal(C.nearest_neighbors(bank, query, 1, 2), entries[[0, 2]])

    def test_single_entry(self):
        bank = MemoryBank(3, 2)
        bank.push_values([[1.0, 2.0]])
        np.testing.assert_array_equal(C.nearest_neighbors(bank, [1.0, 0.0], 1, 1), [[1.0, 2.0]])

    def test_ties_prefer_older(self):
        bank = MemoryBank(3, 2)
        bank.push_values([[0.0, 1.0], [2.0, 0.0], [1.0, 0.0]])
        np.testing.assert_array_equal(C.nearest_neighbors(bank, [1.0, 0.0], 1, 2), [[2.0, 0.0], [1.0, 0.0]])

    def test_empty_bank(self):
        with pytest.raises(ValueError):
            C.nearest_neighbors(MemoryBank(3, 2), [1.0, 0.0], 1, 1)

    def test_matches_brute_force_sort(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            capacity = int(rng.integers(1, 30))
            bank = MemoryBank(capacity, 4)
            bank.push_values(rng.normal(size=(int(rng.integers(1, 60)), 4)))
            query = rng.normal(size=4)
            stored = bank.entries().tolist()
            brute = sorted(range(len(stored)), key=lambda j: (-_cos(query, stored[j]), j))
            j = int(rng.integers(1, len(stored) + 1))
            k = int(rng.integers(j, len(stored) + 1))
            np.testing.assert_array_equal(C.nearest_neighbors(bank, query, j, k), np.array(stored)[brute[j - 1 : k]])
            full = C.nearest_neighbors(bank, query, 1, len(stored))
            assert sorted(map(tuple, full)) == sorted(map(tuple, stored))


class TestNNWeights:
    def test_single(self):
        np.testing.assert_array_equal(C.nn_weights([1.0, 0.0], [[0.3, 0.4]]), [1.0])

    def test_equal_similarities(self):
        w = C.nn_weights([1.0, 0.0], [[1.0, 1.0], [1.0, -1.0], [2.0, 2.0]])
        np.testing.assert_allclose(w, [1 / 3] * 3, atol=1e-15)

    def test_example(self):
        w = C.nn_weights([1.0, 0.0], [[1.0, 0.0], [0.0, 1.0]], 0.2)
        e5 = math.exp(5)
        np.testing.assert_allclose(w, [e5 / (e5 + 1), 1 / (e5 + 1)], atol=1e-12)

    def test_sum_to_one(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            w = C.nn_weights(rng.normal(size=6), rng.normal(size=(int(rng.integers(1, 9)), 6)))
            assert abs(w.sum() - 1.0) <= 1e-12
            assert np.all(w > 0)


class TestNegativeWindow:
    def test_median_start(self):
        assert C.negative_window(10, 0.5, 3) == (4, 7)

    def test_hard_and_easy_starts(self):
        # ranks are 1-based by descending similarity; returned window is 0-based
        assert C.negative_window(10, 0.9, 4)[0] + 1 == 1
        assert C.negative_window(10, 0.2, 4)[0] + 1 == 8

    def test_clamped_to_count(self):
        assert C.negative_window(10, 0.5, 256) == (4, 10)
        assert C.negative_window(1, 0.5, 256) == (0, 1)
        assert C.negative_window(0, 0.5, 256) == (0, 0)


class TestPairs:
    def setup_method(self):
        rng = np.random.default_rng(4)
        self.anchors = Tensor(rng.normal(size=(5, 4)))
        self.partners = Tensor(rng.normal(size=(5, 4)))
        self.bank = MemoryBank(32, 4)
        self.bank.push_values(rng.normal(size=(12, 4)))

    def test_vv_batch_negatives(self):
        cfg = LossConfig(variant="no_bank_neg")
        pairs = C.build_pairs_vv(1, self.anchors, self.partners, self.bank, cfg)
        assert len(pairs.negatives) == 4
        assert all(not np.array_equal(n.data, self.anchors.data[1]) for n in pairs.negatives)

    def test_cross_batch_negatives(self):
        cfg = LossConfig(variant="no_bank_neg")
        pairs = C.build_pairs_cross(2, self.anchors, self.partners, self.bank, cfg)
        assert len(pairs.negatives) == 8
        own = (self.anchors.data[2], self.partners.data[2])
        assert not any(np.array_equal(n.data, o) for n in pairs.negatives for o in own)

    def test_cold_start(self):
        pairs = C.build_pairs_vv(0, self.anchors, self.partners, MemoryBank(8, 4), LossConfig())
        assert len(pairs.positives) == 1 and pairs.positives[0][1] == 1.0
        assert len(pairs.negatives) == 4

    def test_bank_positive_weights(self):
        cfg = LossConfig(k=5, m=3)
        pairs = C.build_pairs_vv(3, self.anchors, self.partners, self.bank, cfg)
        assert pairs.positives[0][0].data is not None and pairs.positives[0][1] == 1.0
        weights = [w for _, w in pairs.positives[1:]]
        assert len(weights) == 5
        assert abs(sum(weights) - 1.0) <= 1e-12
        # oracle: recompute from bank contents
        stored = self.bank.entries().tolist()
        q = self.partners.data[3].tolist()
        top = sorted(range(len(stored)), key=lambda j: (-_cos(q, stored[j]), j))[:5]
        total = sum(_d(q, stored[j], 0.2) for j in top)
        np.testing.assert_allclose(weights, [_d(q, stored[j], 0.2) / total for j in top], atol=1e-12)
        assert len(pairs.negatives) == 4 + 3

    def test_partial_bank_uses_all_entries_as_positives(self):
        bank = MemoryBank(8, 4)
        bank.push_values(np.random.default_rng(0).normal(size=(3, 4)))
        pairs = C.build_pairs_vv(0, self.anchors, self.partners, bank, LossConfig(k=5))
        assert len(pairs.positives) == 4

    def test_uniform_weights(self):
        pairs = C.build_pairs_vv(0, self.anchors, self.partners, self.bank, LossConfig(variant="uniform_w", k=5))
        assert [w for _, w in pairs.positives] == [1.0] * 6

    def test_nnclr_swaps_exact_positive(self):
        pairs = C.build_pairs_vv(0, self.anchors, self.partners, self.bank, LossConfig(variant="nnclr"))
        assert len(pairs.positives) == 1
        np.testing.assert_array_equal(pairs.positives[0][0].data, C.nearest_neighbors(self.bank, self.partners.data[0], 1, 1)[0])

    def test_hard_negatives_start_near_query(self):
        bank = MemoryBank(10, 4)
        bank.push_values(np.random.default_rng(5).normal(size=(10, 4)))
        ranked = C.nearest_neighbors(bank, self.partners.data[0], 1, 10)
        hard = C.build_pairs_vv(0, self.anchors, self.partners, bank, LossConfig(variant="hard_neg", m=2))
        easy = C.build_pairs_vv(0, self.anchors, self.partners, bank, LossConfig(variant="easy_neg", m=2))
        np.testing.assert_array_equal(np.array([n.data for n in hard.negatives[4:]]), ranked[0:2])
        np.testing.assert_array_equal(np.array([n.data for n in easy.negatives[4:]]), ranked[7:9])


class TestContrastiveLoss:
    def test_single_positive_no_negatives(self):
        a = Tensor(np.array([1.0, 2.0]))
        loss = C.contrastive_loss(a, PairSets([(Tensor(np.array([3.0, -1.0])), 1.0)], []), LossConfig())
        assert loss.item() == pytest.approx(0.0, abs=1e-15)

    def test_one_positive_one_negative(self):
        a = Tensor(np.array([1.0, 0.0]))
        pairs = PairSets([(Tensor(np.array([2.0, 0.0])), 1.0)], [Tensor(np.array([0.0, 1.0]))])
        assert C.contrastive_loss(a, pairs, LossConfig()).item() == pytest.approx(math.log1p(math.exp(-5)), abs=1e-12)

    def test_linear_in_positives(self):
        a = Tensor(np.array([1.0, 0.5]))
        p = Tensor(np.array([0.3, 0.9]))
        n = [Tensor(np.array([-1.0, 0.2]))]
        one = C.contrastive_loss(a, PairSets([(p, 1.0)], n), LossConfig()).item()
        two = C.contrastive_loss(a, PairSets([(p, 1.0), (p, 1.0)], n), LossConfig()).item()
        assert two == 2 * one

    def test_empty_positives(self):
        with pytest.raises(ValueError):
            C.contrastive_loss(Tensor(np.ones(2)), PairSets([], []), LossConfig())

    def test_simsiam_coinciding_views(self):
        a = Tensor(np.array([0.4, -0.2, 1.0]))
        loss = C.contrastive_loss(a, PairSets([(Tensor(a.data * 3), 1.0)], []), LossConfig(variant="simsiam"))
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_scale_invariance(self):
        rng = np.random.default_rng(6)
        pred, anchors, partners, bank = (rng.normal(size=(3, 4)), Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4))), MemoryBank(8, 4))
        bank.push_values(rng.normal(size=(4, 4)))
        cfg = _cfg("ours")
        base = C.contrastive_loss(Tensor(pred[0]), C.build_pairs_cross(0, anchors, partners, bank, cfg), cfg).item()
        scaled = C.contrastive_loss(Tensor(7.0 * pred[0]), C.build_pairs_cross(0, anchors, partners, bank, cfg), cfg).item()
        assert scaled == pytest.approx(base, rel=1e-12)


@pytest.mark.parametrize("variant", C.VARIANTS)
def test_loss_matches_scalar_oracle(variant):
    rng = np.random.default_rng(100 + C.VARIANTS.index(variant))
    for _ in range(100):
        pred, anchors, partners, bank = _random_instance(rng, variant)
        cross = bool(rng.integers(0, 2))
        cfg = _cfg(variant)
        build = C.build_pairs_cross if cross else C.build_pairs_vv
        A, P = Tensor(anchors), Tensor(partners)
        batched = C.batched_term(Tensor(pred), A, P, bank, cfg, cross).data
        for i in range(len(anchors)):
            want = oracle_loss(variant, i, pred.tolist(), anchors.tolist(), partners.tolist(), bank.entries().tolist(), 2, 2, 0.2, cross)
            got = C.contrastive_loss(Tensor(pred[i]), build(i, A, P, bank, cfg), cfg).item()
            assert abs(got - want) <= 1e-9
            assert abs(batched[i] - want) <= 1e-9


class TestGradientIsolation:
    @pytest.mark.parametrize("variant", ["ours", "uniform_w", "nnclr", "hard_neg"])
    def test_per_anchor_targets_get_zero_gradient(self, variant):
        rng = np.random.default_rng(7)
        pred = Tensor(rng.normal(size=4), requires_grad=True)
        anchors = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        partners = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        bank = MemoryBank(16, 4)
        bank.push_values(rng.normal(size=(10, 4)))
        cfg = LossConfig(variant=variant, k=3, m=4)
        pairs = C.build_pairs_cross(0, anchors, partners, bank, cfg)
        targets = [p for p, _ in pairs.positives] + list(pairs.negatives)
        for t in targets:
            t.requires_grad = True
        loss = C.contrastive_loss(pred, pairs, cfg)
        ad.backward(loss, [pred, anchors, partners] + targets)
        assert np.any(pred.grad != 0)
        assert np.all(anchors.grad == 0) and np.all(partners.grad == 0)
        for t in targets:
            assert np.all(t.grad == 0)

    def test_batched_targets_get_zero_gradient(self):
        rng = np.random.default_rng(8)
        pred = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        anchors = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        partners = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        bank = MemoryBank(16, 4)
        bank.push_values(rng.normal(size=(10, 4)))
        loss = C.batched_term(pred, anchors, partners, bank, LossConfig(k=3, m=4), True).sum()
        ad.backward(loss, [pred, anchors, partners])
        assert np.any(pred.grad != 0)
        assert np.all(anchors.grad == 0) and np.all(partners.grad == 0)

    def test_bank_entries_affect_value_only(self):
        rng = np.random.default_rng(9)
        pred, anchors, partners = (Tensor(rng.normal(size=(3, 4))) for _ in range(3))
        entries = rng.normal(size=(6, 4))
        cfg = LossConfig(k=2, m=3)

        def value(e):
            bank = MemoryBank(8, 4)
            bank.push_values(e)
            return C.batched_term(pred, anchors, partners, bank, cfg, False).sum().item()

        bumped = entries.copy()
        bumped[0] += 0.5
        assert value(bumped) != value(entries)

    def test_simclr_backpropagates_through_both(self):
        rng = np.random.default_rng(10)
        anchors = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        partners = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        loss = C.batched_term(anchors, anchors, partners, None, LossConfig(variant="simclr"), True).sum()
        ad.backward(loss, [anchors, partners])
        assert np.any(partners.grad != 0)


class TestObjective:
    def _emb(self, rng, B=4, D=6):
        emb = {m: [Tensor(rng.normal(size=(B, D)), requires_grad=True) for _ in range(2)] for m in "va"}
        return emb, {m: [Tensor(rng.normal(size=(B, D)), requires_grad=True) for _ in range(2)] for m in "va"}

    def test_terms_follow_toggles(self):
        rng = np.random.default_rng(11)
        emb, pred = self._emb(rng)
        banks = C.make_banks(LossConfig(), 6)
        assert set(C.crl_objective(emb, pred, banks, LossConfig())[1]) == {"vv", "va", "av"}
        assert set(C.crl_objective(emb, pred, banks, LossConfig(use_vv=False))[1]) == {"va", "av"}
        assert set(C.crl_objective(emb, pred, banks, LossConfig(use_av_va=False))[1]) == {"vv"}
        assert set(C.crl_objective(emb, pred, banks, LossConfig(use_aa=True))[1]) == {"vv", "va", "av", "aa"}

    def test_total_is_sum_of_batch_means(self):
        rng = np.random.default_rng(12)
        emb, pred = self._emb(rng)
        cfg = LossConfig(symmetrize=False)
        banks = C.make_banks(cfg, 6)
        total, terms = C.crl_objective(emb, pred, banks, cfg)
        vv = np.mean([C.contrastive_loss(pred["v"][0][i], C.build_pairs_vv(i, emb["v"][0], emb["v"][1], banks["v"], cfg), cfg).item() for i in range(4)])
        va = np.mean([C.contrastive_loss(pred["v"][0][i], C.build_pairs_cross(i, emb["v"][0], emb["a"][0], banks["a"], cfg), cfg).item() for i in range(4)])
        av = np.mean([C.contrastive_loss(pred["a"][0][i], C.build_pairs_cross(i, emb["a"][0], emb["v"][0], banks["v"], cfg), cfg).item() for i in range(4)])
        assert total.item() == pytest.approx(vv + va + av, rel=1e-12)
        assert terms["vv"].item() == pytest.approx(vv, rel=1e-12)

    def test_unaligned_uses_other_view_partner(self):
        rng = np.random.default_rng(13)
        emb, pred = self._emb(rng)
        cfg = LossConfig(symmetrize=False, aligned_cross_modal=False, use_vv=False)
        _, terms = C.crl_objective(emb, pred, C.make_banks(cfg, 6), cfg)
        want = C.batched_term(pred["v"][0], emb["v"][0], emb["a"][1], None, cfg, True).mean().item()
        assert terms["va"].item() == pytest.approx(want, rel=1e-12)

    def test_bank_updates(self):
        rng = np.random.default_rng(14)
        emb, _ = self._emb(rng)
        banks = C.make_banks(LossConfig(), 6)
        C.update_banks(banks, emb, LossConfig())
        assert len(banks["v"]) == 4 and len(banks["a"]) == 4
        np.testing.assert_allclose(banks["v"].entries(), (emb["v"][0].data + emb["v"][1].data) / 2)
        shared_cfg = LossConfig(shared_bank=True)
        shared = C.make_banks(shared_cfg, 6)
        assert shared["v"] is shared["a"]
        C.update_banks(shared, emb, shared_cfg)
        mean = (emb["v"][0].data + emb["v"][1].data + emb["a"][0].data + emb["a"][1].data) / 4
        np.testing.assert_allclose(shared["v"].entries(), mean)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(15)
        emb, pred = self._emb(rng, B=3, D=4)
        cfg = LossConfig(k=2, m=2, use_aa=True)
        banks = C.make_banks(cfg, 4)
        banks["v"].push_values(rng.normal(size=(5, 4)))
        banks["a"].push_values(rng.normal(size=(5, 4)))
        params = pred["v"] + pred["a"]
        err = ad.finite_diff_check(lambda: C.crl_objective(emb, pred, banks, cfg)[0], params)
        assert err <= 1e-6
