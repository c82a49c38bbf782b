"""Ranking tests, including the sort-based oracle for average-tie ranks."""

import hashlib

import numpy as np
import pytest

import kbct.autodiff as ad
from kbct.data import load_kb
from kbct.encoders import TableEncoderPair, build_gru_encoders
from kbct.evaluation import (
    RankingReport,
    TSV_HEADER,
    entity_matrix,
    evaluate,
    rank_query,
    zero_shot_evaluate,
)
from kbct.data import vocabulary_from_kb
from kbct.models import TuckerModel


def oracle_rank(scores, gold, filter_out=(), clusters=None):
    """Independent reimplementation: explicit sort positions with tie
    groups averaged, cluster handling by enumeration."""
    scores = list(scores)

    def rank_of(member, excluded):
        pool = [i for i in range(len(scores))
                if i == member or i not in excluded]
        order = sorted(pool, key=lambda i: -scores[i])
        i = 0
        while i < len(order):
            j = i
            while j < len(order) and scores[order[j]] == scores[order[i]]:
                j += 1
            if any(order[k] == member for k in range(i, j)):
                return ((i + 1) + j) / 2.0
            i = j
        raise AssertionError("member fell out of its own pool")

    if clusters is None:
        return rank_of(gold, set(filter_out))
    members = [i for i in range(len(scores)) if clusters[i] == clusters[gold]]
    return min(rank_of(m, (set(filter_out) | set(members)) - {m})
               for m in members)


class TestRankQuery:
    def test_plain_rank(self):
        assert rank_query(np.array([9.0, 5.0, 7.0]), 2) == 2.0

    def test_all_tied(self):
        assert rank_query(np.array([5.0, 5.0, 5.0]), 0) == 2.0

    def test_cluster_best_member_counts(self):
        scores = np.array([9.0, 8.0, 10.0])
        clusters = np.array([0, 1, 0])
        assert rank_query(scores, 0, clusters=clusters) == 1.0

    def test_filtering_removes_competitors(self):
        scores = np.array([10.0, 9.0, 8.0, 7.0])
        assert rank_query(scores, 3, filter_out=np.array([0, 1])) == 2.0

    def test_gold_in_filter_rejected(self):
        with pytest.raises(ValueError, match="filter_out"):
            rank_query(np.array([1.0, 2.0]), 0, filter_out=np.array([0]))

    def test_gold_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            rank_query(np.array([1.0, 2.0]), 5)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(123)
        for _ in range(300):
            n = int(rng.integers(3, 12))
            scores = rng.integers(0, 4, size=n).astype(float)  # force ties
            gold = int(rng.integers(n))
            others = [i for i in range(n) if i != gold]
            rng.shuffle(others)
            filt = others[:int(rng.integers(0, len(others) + 1))]
            clusters = rng.integers(0, 3, size=n) if rng.random() < 0.5 else None
            got = rank_query(scores, gold, np.array(filt, dtype=np.int64),
                             clusters)
            want = oracle_rank(scores, gold, filt, clusters)
            assert got == want, (scores, gold, filt, clusters)


class TestRankingReport:
    def test_aggregates(self):
        rep = RankingReport(np.array([1.0, 2.0, 4.0]))
        assert rep.mr == pytest.approx(7 / 3)
        assert rep.mrr == pytest.approx((1 + 0.5 + 0.25) / 3)
        assert rep.hits(1) == pytest.approx(1 / 3)
        assert rep.hits(10) == 1.0
        assert rep.n_queries == 3

    def test_tsv_row_shape(self):
        rep = RankingReport(np.array([1.0, 2.0]))
        row = rep.tsv_row("test")
        assert len(row.split("\t")) == len(TSV_HEADER.split("\t"))
        assert row.startswith("test\t")


def write_kb(tmp_path, train, valid, test):
    paths = []
    for name, rows in (("train", train), ("valid", valid), ("test", test)):
        p = tmp_path / f"{name}.tsv"
        p.write_text("".join(f"{h}\t{r}\t{t}\n" for h, r, t in rows))
        paths.append(p)
    return load_kb(*paths)


class DotModel:
    """Test double: score = <head, tail>, relation ignored."""

    kind = "dot"

    def __init__(self):
        self.seen_bias_flags = []

    def leaves(self, tape):
        return {}

    def score_all(self, leaves, vh, vr, tails, training=False, rng=None,
                  bias_ids=None, use_bias=True):
        self.seen_bias_flags.append(use_bias)
        return ad.matmul(vh, tails, transpose_b=True)


class TestEvaluate:
    def test_filtering_and_both_directions(self, tmp_path):
        # entities a,b,c (ids 0,1,2); train a->b, test a->c
        kb = write_kb(tmp_path, [("a", "likes", "b")], [],
                      [("a", "likes", "c")])
        enc = TableEncoderPair(
            np.array([[1.0, 0.0], [3.0, 1.0], [2.0, 2.0]]),
            np.zeros((kb.num_relations, 2)))
        rep = evaluate(DotModel(), enc, kb, "test")
        # forward: scores a->(1,3,2); b filtered as a known answer -> rank 1
        # reciprocal: scores c->(2,8,8); nothing filtered -> rank 3
        assert rep.ranks.tolist() == [1.0, 3.0]

    def test_matches_per_query_recomputation(self, tmp_path):
        rng = np.random.default_rng(5)
        rows = [(f"e{rng.integers(6)}", f"r{rng.integers(2)}",
                 f"e{rng.integers(6)}") for _ in range(25)]
        kb = write_kb(tmp_path, rows[:15], rows[15:20], rows[20:])
        model = TuckerModel(4, dropout=0.0, rng=rng, dtype=np.float64)
        enc = TableEncoderPair(rng.standard_normal((kb.num_entities, 4)),
                               rng.standard_normal((kb.num_relations, 4)))
        rep = evaluate(model, enc, kb, "test", batch_size=3)

        from kbct.data import filter_sets, tail_query_view
        heads, rels, golds = tail_query_view(kb, "test")
        fsets = filter_sets(kb)
        leaves = model.leaves(None)
        tails = ad.constant(enc.entity_table)
        want = []
        for h, r, g in zip(heads, rels, golds):
            s = model.score_all(leaves, ad.constant(enc.entity_table[[h]]),
                                ad.constant(enc.relation_table[[r]]),
                                tails).value[0]
            known = fsets[(int(h), int(r))]
            want.append(rank_query(s, int(g), known[known != g], kb.clusters))
        assert rep.ranks.tolist() == want

    def test_empty_split(self, tmp_path):
        kb = write_kb(tmp_path, [("a", "r", "b")], [], [])
        rep = evaluate(DotModel(), TableEncoderPair(np.eye(2), np.zeros((2, 2))),
                       kb, "test")
        assert rep.n_queries == 0

    def test_does_not_mutate_model(self, tmp_path):
        rng = np.random.default_rng(6)
        kb = write_kb(tmp_path, [("a", "r", "b"), ("b", "r", "c")], [],
                      [("a", "r", "c")])
        model = TuckerModel(3, dropout=0.4, rng=rng)
        enc = TableEncoderPair(
            rng.standard_normal((kb.num_entities, 3)).astype(np.float32),
            rng.standard_normal((kb.num_relations, 3)).astype(np.float32))

        def state_hash():
            h = hashlib.sha256()
            for k in sorted(model.arrays()):
                h.update(model.arrays()[k].tobytes())
            return h.hexdigest()

        before = state_hash()
        evaluate(model, enc, kb, "test")
        assert state_hash() == before

    def test_table_size_mismatch_points_to_zero_shot(self, tmp_path):
        kb = write_kb(tmp_path, [("a", "r", "b"), ("c", "r", "d")], [],
                      [("a", "r", "d")])
        enc = TableEncoderPair(np.eye(2), np.zeros((kb.num_relations, 2)))
        with pytest.raises(ValueError, match="zero-shot"):
            entity_matrix(enc, kb)


class TestZeroShot:
    def test_requires_name_encoders(self, tmp_path):
        kb = write_kb(tmp_path, [("a", "r", "b")], [], [("a", "r", "b")])
        enc = TableEncoderPair(np.eye(2), np.zeros((2, 2)))
        with pytest.raises(ValueError, match="name encoders"):
            zero_shot_evaluate(DotModel(), enc, kb, "test")

    def test_drops_scoring_bias(self, tmp_path):
        kb = write_kb(tmp_path, [("red fox", "eats", "hen")], [],
                      [("red fox", "eats", "hen")])
        rng = np.random.default_rng(0)
        enc = build_gru_encoders(vocabulary_from_kb(kb), 4, 4, rng, word_dim=3)
        model = DotModel()
        zero_shot_evaluate(model, enc, kb, "test")
        assert model.seen_bias_flags and not any(model.seen_bias_flags)
