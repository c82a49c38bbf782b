"""Filtered, cluster-aware ranking over tail queries.

Every test triple yields two queries through ``tail_query_view``: the
original tail prediction and the head prediction rewritten through the
reciprocal relation.  Scores are ranked with average-tie resolution and
known true answers from all three splits filtered out.  When the KB
carries entity clusters, each member of the gold answer's cluster counts
as correct: the query's rank is the best rank any member attains with
its co-members removed from the candidate pool.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import KnowledgeBase, filter_sets, tail_query_view


@dataclass
class RankingReport:
    ranks: np.ndarray
    hits_at: tuple = (1, 10)

    @property
    def n_queries(self):
        return int(self.ranks.size)

    @property
    def mr(self):
        return float(self.ranks.mean())

    @property
    def mrr(self):
        return float((1.0 / self.ranks).mean())

    def hits(self, n):
        return float((self.ranks <= n).mean())

    def as_dict(self):
        out = {"MR": self.mr, "MRR": self.mrr}
        for n in self.hits_at:
            out[f"H@{n}"] = self.hits(n)
        out["n_queries"] = self.n_queries
        return out

    def tsv_row(self, label):
        cells = [label, f"{self.mr:.4f}", f"{self.mrr:.6f}"]
        cells += [f"{self.hits(n):.6f}" for n in self.hits_at]
        cells.append(str(self.n_queries))
        return "\t".join(cells)


TSV_HEADER = "split\tMR\tMRR\tH@1\tH@10\tn_queries"


def _tie_rank(scores, idx, allowed):
    s = scores[idx]
    pool = scores[allowed]
    better = int(np.count_nonzero(pool > s))
    ties = int(np.count_nonzero(pool == s))  # the candidate itself included
    return better + (ties + 1) / 2.0


def rank_query(scores, gold, filter_out=None, clusters=None):
    """Average-tie rank of ``gold`` among non-filtered candidates.

    With ``clusters`` (an entity -> cluster-id array), any member of the
    gold cluster counts: members are ranked one at a time with the other
    members masked out, and the smallest rank wins.
    """
    scores = np.asarray(scores)
    n = scores.shape[0]
    if not 0 <= gold < n:
        raise ValueError(f"gold index {gold} out of range for {n} candidates")
    allowed = np.ones(n, dtype=bool)
    if filter_out is not None:
        fo = np.asarray(filter_out, dtype=np.int64)
        if fo.size and (gold == fo).any():
            raise ValueError("gold answer listed in filter_out")
        allowed[fo] = False
    allowed[gold] = True
    if clusters is None:
        return _tie_rank(scores, gold, allowed)
    members = np.flatnonzero(np.asarray(clusters) == clusters[gold])
    best = np.inf
    for m in members:
        a = allowed.copy()
        a[members] = False
        a[m] = True
        best = min(best, _tie_rank(scores, m, a))
    return best


def entity_matrix(encoder, kb: KnowledgeBase):
    """All entity embeddings as a plain array (encoder inference)."""
    if encoder.kind == "table":
        if encoder.entity_table.shape[0] != kb.num_entities:
            raise ValueError(
                "entity table size does not match this KB; embedding-table "
                "models cannot score unseen entities, use the GRU zero-shot path")
        return encoder.entity_table
    return encoder.embed_kb(kb, "entity")


def relation_matrix(encoder, kb: KnowledgeBase):
    if encoder.kind == "table":
        if encoder.relation_table.shape[0] != kb.num_relations:
            raise ValueError(
                "relation table size does not match this KB; embedding-table "
                "models cannot score unseen relations, use the GRU zero-shot path")
        return encoder.relation_table
    return encoder.embed_kb(kb, "relation")


def score_queries(model, ent_emb, rel_emb, heads, rels, use_bias=True,
                  batch_size=256):
    """Score every entity as tail for each ⟨head, relation⟩ query."""
    tails = ad.constant(ent_emb)
    leaves = model.leaves(None)
    out = np.empty((len(heads), ent_emb.shape[0]), dtype=ent_emb.dtype)
    for lo in range(0, len(heads), batch_size):
        hi = min(lo + batch_size, len(heads))
        vh = ad.constant(ent_emb[heads[lo:hi]])
        vr = ad.constant(rel_emb[rels[lo:hi]])
        out[lo:hi] = model.score_all(leaves, vh, vr, tails,
                                     use_bias=use_bias).value
    return out


def evaluate(model, encoder, kb: KnowledgeBase, split, use_clusters=True,
             use_bias=True, batch_size=256, hits_at=(1, 10)) -> RankingReport:
    """Filtered ranking of both query directions of ``split``."""
    heads, rels, golds = tail_query_view(kb, split)
    if heads.size == 0:
        return RankingReport(np.empty(0), hits_at)
    ent_emb = entity_matrix(encoder, kb)
    rel_emb = relation_matrix(encoder, kb)
    fsets = filter_sets(kb)
    clusters = kb.clusters if use_clusters else None
    scores = score_queries(model, ent_emb, rel_emb, heads, rels,
                           use_bias=use_bias, batch_size=batch_size)
    ranks = np.empty(heads.size, dtype=np.float64)
    for i in range(heads.size):
        known = fsets.get((int(heads[i]), int(rels[i])))
        gold = int(golds[i])
        filt = known[known != gold] if known is not None else None
        ranks[i] = rank_query(scores[i], gold, filt, clusters)
    return RankingReport(ranks, hits_at)


def zero_shot_evaluate(model, encoder, kb: KnowledgeBase, split,
                       use_clusters=True, batch_size=256,
                       hits_at=(1, 10)) -> RankingReport:
    """Evaluate on a KB the model never trained on.

    Names are encoded on the fly, which requires the GRU encoders; the
    ConvE per-entity bias is dropped since the entities are foreign.
    """
    if encoder.kind != "gru":
        raise ValueError("zero-shot evaluation needs name encoders, not tables")
    return evaluate(model, encoder, kb, split, use_clusters=use_clusters,
                    use_bias=False, batch_size=batch_size, hits_at=hits_at)
