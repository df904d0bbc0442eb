import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
import synth
from ldpo.core import PatchImage, ValidationError
from ldpo.patchmine import (Element, ElementVocabulary, LdaDetector, MiningConfig,
                            Transaction, build_transactions, cross_score,
                            encode_bag_of_elements, encode_patch_images, merge_groups,
                            merge_patterns_global, mine_frequent_patterns, mine_vocabulary,
                            random_groups, score_matrix, select_top_patterns,
                            train_lda_detector)


def _img(act, image_id="im"):
    return PatchImage.from_activations(image_id, act)


def _transactions(item_lists):
    return [Transaction("im", i, tuple(sorted(t))) for i, t in enumerate(item_lists)]


class TestTransactions:
    def test_direct(self):
        (t,) = build_transactions(_img([[0.1, 0.9, 0.0, 0.7]]), 2)
        assert t.items == (1, 3)

    def test_wide_activation_example(self):
        a = np.zeros(4096)
        a[[3, 24, 1023, 4095]] = [5.0, 4.0, 6.0, 3.0]
        (t,) = build_transactions(_img(a), 4)
        assert t.items == (3, 24, 1023, 4095)

    def test_ties(self):
        (t,) = build_transactions(_img(np.ones(6)), 3)
        assert t.items == (0, 1, 2)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10 ** 6), st.integers(1, 12))
    def test_invariant(self, seed, k):
        rng = np.random.default_rng(seed)
        act = rng.integers(0, 4, size=(5, 12)).astype(float)
        for t in build_transactions(_img(act), k):
            assert len(t.items) == k
            assert all(a < b for a, b in zip(t.items, t.items[1:]))
            assert t.items[-1] < 12
            row = act[t.patch_index]
            assert row[list(t.items)].min() >= np.delete(row, t.items).max(initial=-np.inf)

    def test_bad_k(self):
        with pytest.raises(ValidationError):
            build_transactions(_img(np.ones(3)), 4)


class TestMining:
    def test_planted(self):
        rng = np.random.default_rng(0)
        tr = _transactions([{3, 7} | set(rng.choice(20, 2).tolist()) for _ in range(10)])
        found = {p.itemset: p.support_count for p in mine_frequent_patterns(tr, 0.5)}
        assert found[(3, 7)] == 10

    def test_no_common_item(self):
        tr = _transactions([{0, 1}, {2, 3}, {4, 5}])
        assert mine_frequent_patterns(tr, 1.0, min_len=1) == []

    def test_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            items = [set(rng.choice(10, rng.integers(1, 6), replace=False).tolist())
                     for _ in range(100)]
            tr = _transactions(items)
            got = mine_frequent_patterns(tr, 0.2, max_len=4, min_len=1)
            ref = oracles.frequent_itemsets(items, 0.2, 1, 4, 10)
            assert {p.itemset: p.support_count for p in got} == ref
            for p in got:
                assert p.covered_patches == {("im", i) for i, s in enumerate(items)
                                             if s.issuperset(p.itemset)}

    def test_order(self):
        tr = _transactions([{1, 2, 3}] * 3 + [{1, 2}] * 2)
        got = mine_frequent_patterns(tr, 0.1)
        keys = [(-p.support_count, p.itemset) for p in got]
        assert keys == sorted(keys)


class TestSelect:
    def test_greedy_first_pick(self):
        a = synth.pattern((0, 1), range(30))
        b = synth.pattern((2, 3), range(30, 50))
        assert select_top_patterns([b, a], 1) == [a]

    def test_nested_same_coverage(self):
        a = synth.pattern((0, 1, 2), range(10))
        b = synth.pattern((0, 1), range(10))
        c = synth.pattern((5, 6), range(10, 14))
        assert select_top_patterns([b, c, a], 3) == [a, c, b]

    def test_greedy_bound(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            pats = [synth.pattern((i, i + 1), rng.choice(40, rng.integers(2, 15), replace=False))
                    for i in range(12)]
            chosen = select_top_patterns(pats, 5)
            got = len(set().union(*(p.covered_patches for p in chosen)))
            best = oracles.best_cover([p.covered_patches for p in pats], 5)
            assert got >= (1 - 1 / np.e) * best


class TestDetectors:
    def test_isotropic(self):
        mu = np.array([1.0, -2.0, 0.5])
        pos = mu + np.array([[0.1, 0, 0], [-0.1, 0, 0]])
        d = train_lda_detector(pos, np.zeros(3), np.eye(3))
        np.testing.assert_allclose(d.weight / np.linalg.norm(d.weight), mu / np.linalg.norm(mu))
        assert d.score(mu) == pytest.approx(1.0)

    def test_positives_at_background_mean(self):
        bg = np.array([0.3, 0.4])
        d = train_lda_detector(np.stack([bg, bg]), bg, np.diag([1.0, 2.0]))
        np.testing.assert_array_equal(d.weight, 0.0)

    def test_solve_oracle(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(2, 2))
        cov = a @ a.T + 0.1 * np.eye(2)
        pos = rng.normal(size=(6, 2)) + 2
        bg = rng.normal(size=2)
        d = train_lda_detector(pos, bg, cov, ridge=1e-3)
        eps = 1e-3 * np.trace(cov) / 2
        # explicit 2x2 inverse
        m = cov + eps * np.eye(2)
        det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
        inv = np.array([[m[1, 1], -m[0, 1]], [-m[1, 0], m[0, 0]]]) / det
        np.testing.assert_allclose(d.weight, inv @ (pos.mean(axis=0) - bg), rtol=0, atol=1e-8)

    def test_cross_score(self):
        d = LdaDetector(np.array([1.0, 0.0]), 5.0)
        assert cross_score(d, [[1, 0], [3, 0]]) == 2.0
        zero = LdaDetector(np.zeros(3), 1.0)
        assert cross_score(zero, np.random.default_rng(4).normal(size=(5, 3))) == 0.0

    def test_cross_score_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            w, p = rng.normal(size=6), rng.normal(size=(7, 6))
            got = cross_score(LdaDetector(w, 0.3), p)
            assert got == pytest.approx(oracles.cross_score(w.tolist(), p.tolist()), abs=1e-12)


class TestMerge:
    def test_planted_duplicate(self):
        rng = np.random.default_rng(6)
        shared = (rng.normal(size=(6, 4)) + [4, 0, 0, 0]).tolist()
        other = (rng.normal(size=(6, 4)) + [0, 0, -4, 0]).tolist()
        els, ps = synth.patch_elements([shared, other])
        dup = Element(els[0].pattern, els[0].detector, frozenset([7]))
        vocab = merge_patterns_global([els[0], els[1], dup], ps)
        assert len(vocab) == 2
        assert {0, 7} in [set(e.provenance) for e in vocab.elements]

    def test_orthogonal_no_merge(self):
        a = [[1.0, 0.0], [2.0, 0.0]]
        b = [[0.0, 1.0], [0.0, 2.0]]
        els, ps = synth.patch_elements([a, b], weights=[[1, 0], [0, 1]])
        assert len(merge_patterns_global(els, ps, threshold=0.1)) == 2

    def test_transitive_chain(self):
        ang = np.radians([0, 45, 90])
        units = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        groups = [[u * 0.9, u * 1.1] for u in units]
        els, ps = synth.patch_elements(groups, weights=units)
        s = score_matrix(els, ps.by_id())
        assert s[0, 1] > 0.5 and s[1, 2] > 0.5 and s[0, 2] < 0.5
        assert merge_groups(els, ps.by_id(), threshold=0.5) == [[0, 1, 2]]
        assert len(merge_patterns_global(els, ps, threshold=0.5)) == 1

    def test_components_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            n = 7
            groups = [rng.normal(size=(3, 3)).tolist() for _ in range(n)]
            ws = rng.normal(size=(n, 3))
            els, ps = synth.patch_elements(groups, weights=ws)
            s = [[oracles.cross_score(ws[i].tolist(), groups[j]) for j in range(n)]
                 for i in range(n)]
            thr = 0.2
            edges = [(i, j) for i, j in itertools.combinations(range(n), 2)
                     if s[i][j] > thr and s[j][i] > thr]
            assert merge_groups(els, ps.by_id(), threshold=thr) == oracles.components(n, edges)

    def test_idempotent_and_bounded(self):
        ps, groups = synth.mining_fixture(8)
        cfg = MiningConfig(k_top=3, min_support=0.2, per_cluster=5)
        vocab = mine_vocabulary(ps, groups, cfg)
        again = merge_patterns_global(vocab.elements, ps)
        assert len(again) == len(vocab)
        for a, b in zip(vocab.elements, again.elements):
            assert a.pattern == b.pattern
            np.testing.assert_array_equal(a.detector.weight, b.detector.weight)
        assert len(vocab) <= groups.k * cfg.per_cluster


class TestBagOfElements:
    def test_calibration(self):
        rng = np.random.default_rng(9)
        pos = rng.normal(size=(5, 3)) + 2
        d = train_lda_detector(pos, np.zeros(3), np.eye(3))
        vocab = ElementVocabulary([Element(synth.pattern((0, 1), [0]), d)])
        v = encode_bag_of_elements(np.vstack([pos.mean(axis=0), -10 * pos.mean(axis=0)]), vocab)
        assert v.shape == (1,) and v[0] == pytest.approx(1.0)

    def test_oracle_and_permutation(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            w, b = rng.normal(size=(4, 5)), rng.normal(size=4)
            vocab = ElementVocabulary([Element(synth.pattern((i, 9), [0]), LdaDetector(w[i], b[i]))
                                       for i in range(4)])
            patches = rng.normal(size=(6, 5))
            got = encode_bag_of_elements(patches, vocab)
            ref = oracles.bag_of_elements(patches.tolist(), w.tolist(), b.tolist())
            np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)
            np.testing.assert_allclose(encode_bag_of_elements(patches[::-1], vocab), got,
                                       rtol=0, atol=1e-12)

    def test_per_scale(self):
        det = LdaDetector(np.ones(2), 0.0)
        vocab = ElementVocabulary([Element(synth.pattern((0, 1), [0]), det)])
        im = PatchImage("a", [1.0, 2.0, 2.0], [0, 1, 2], [0, 0, 0], [[1, 1], [2, 0], [0, 5]])
        got = encode_bag_of_elements(im, vocab, per_scale_pool=True, scales=[1.0, 2.0, 4.0])
        np.testing.assert_array_equal(got, [2.0, 5.0, 0.0])


def test_vocabulary_roundtrip(tmp_path):
    ps, groups = synth.mining_fixture(11)
    vocab = mine_vocabulary(ps, groups, MiningConfig(k_top=3, min_support=0.2, per_cluster=4))
    vocab.save(tmp_path / "v.ldpm", tmp_path / "v.json")
    back = ElementVocabulary.load(tmp_path / "v.ldpm")
    assert back.summary() == vocab.summary()
    np.testing.assert_array_equal(back.weights, vocab.weights)
    assert encode_patch_images(ps, back) == encode_patch_images(ps, vocab)


def test_random_groups():
    g = random_groups([f"i{j}" for j in range(10)], 3, seed=4)
    assert np.bincount(g.labels).tolist() == [4, 3, 3]
    assert g == random_groups([f"i{j}" for j in range(10)], 3, seed=4)
    with pytest.raises(ValidationError):
        random_groups(["a"], 2, 0)
