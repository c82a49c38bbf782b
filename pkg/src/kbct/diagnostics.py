"""Multiple-choice diagnostics over trained models.

Instances are JSON-lines records: an incomplete triple with "?" in the
head or tail slot, a fixed candidate list with exactly one gold answer,
and optional twin links tying a rephrased instance to its original.
Candidates are scored independently (no filtering) and the gold's
average-tie rank is reported.

Three suites build on this: paired consistency statistics over twins,
the deductive three-condition protocol (background knowledge / probes
without added facts / probes after fine-tuning on added facts), and the
gender-stereotype group report with Wilcoxon significance over
name-swap pairs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint
from .data import INVERSE_PREFIX, KnowledgeBase, load_kb, normalize_name
from .evaluation import RankingReport, rank_query
from .stats import DegenerateSample, wilcoxon_signed_rank
from .training import TrainConfig, build_run, train

KINDS = ("general", "entity-synonym-twin", "relation-synonym-twin",
         "inverse-twin", "deductive", "stereotype")
GROUPS = ("st-masc", "st-fem", "anti-masc", "anti-fem")
MISSING = "?"


@dataclass
class DiagnosticInstance:
    id: str
    head: str
    relation: str
    tail: str
    candidates: list
    gold: int
    category: str = ""
    subcategory: str = ""
    kind: str = "general"
    twin_of: str | None = None
    group: str | None = None

    def validate(self):
        if (self.head == MISSING) == (self.tail == MISSING):
            raise ValueError(
                f"{self.id}: exactly one of head/tail must be {MISSING!r}")
        if not self.candidates:
            raise ValueError(f"{self.id}: empty candidate list")
        if len(set(self.candidates)) != len(self.candidates):
            raise ValueError(f"{self.id}: duplicate candidates")
        if not 0 <= self.gold < len(self.candidates):
            raise ValueError(f"{self.id}: gold index {self.gold} out of range")
        if self.kind not in KINDS:
            raise ValueError(f"{self.id}: unknown kind {self.kind!r}")
        if self.group is not None and self.group not in GROUPS:
            raise ValueError(f"{self.id}: unknown group {self.group!r}")
        return self

    @property
    def missing_slot(self):
        return "head" if self.head == MISSING else "tail"

    @property
    def gold_name(self):
        return self.candidates[self.gold]


def save_doge(instances, path):
    with open(path, "w", encoding="utf-8") as f:
        for inst in instances:
            f.write(json.dumps(asdict(inst), sort_keys=True) + "\n")
    return path


def load_doge(path):
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                inst = DiagnosticInstance(**json.loads(line)).validate()
            except (TypeError, ValueError, json.JSONDecodeError) as e:
                raise ValueError(f"{path}:{lineno}: {e}") from e
            out.append(inst)
    return out


def _name_index(names):
    return {name: i for i, name in enumerate(names)}


def rank_candidates(model, encoder, instance: DiagnosticInstance,
                    kb: KnowledgeBase | None = None) -> float:
    """Average-tie rank of the gold among the instance's candidates.

    Each candidate is scored independently in the missing slot.  A
    head-side gap is flipped into tail form through the reciprocal
    relation.  GRU encoders embed raw names directly; table encoders
    need ``kb`` (the KB the model was trained on) to look the names up.
    """
    instance.validate()
    if instance.missing_slot == "head":
        head_name = instance.tail
        rel_name = INVERSE_PREFIX + normalize_name(instance.relation)
    else:
        head_name = instance.head
        rel_name = instance.relation
    leaves = model.leaves(None)
    if encoder.kind == "gru":
        vh = ad.constant(encoder.embed_names([head_name], "entity"))
        vr = ad.constant(encoder.embed_names([rel_name], "relation"))
        cands = ad.constant(encoder.embed_names(instance.candidates, "entity"))
        scores = model.score_all(leaves, vh, vr, cands, use_bias=False)
    else:
        if kb is None:
            raise ValueError("table encoders need kb= to resolve names; "
                             "use GRU encoders for unseen vocabulary")
        ent_idx = _name_index(kb.entity_names)
        rel_idx = _name_index(kb.relation_names)

        def ent_id(raw):
            name = normalize_name(raw)
            if name not in ent_idx:
                raise ValueError(f"entity {raw!r} unknown to this KB; "
                                 "use the GRU zero-shot path")
            return ent_idx[name]

        rname = normalize_name(rel_name)
        if rname not in rel_idx:
            raise ValueError(f"relation {rel_name!r} unknown to this KB; "
                             "use the GRU zero-shot path")
        h = np.array([ent_id(head_name)])
        r = np.array([rel_idx[rname]])
        cand_ids = np.array([ent_id(c) for c in instance.candidates])
        enc_leaves = encoder.leaves(None)
        vh = encoder.encode_entities(enc_leaves, h)
        vr = encoder.encode_relations(enc_leaves, r)
        cands = encoder.encode_entities(enc_leaves, cand_ids)
        scores = model.score_all(leaves, vh, vr, cands, bias_ids=cand_ids)
    return rank_query(scores.value[0], instance.gold)


def rank_instances(model, encoder, instances, kb=None) -> np.ndarray:
    return np.array([rank_candidates(model, encoder, inst, kb=kb)
                     for inst in instances], dtype=np.float64)


# -- twin pairing and consistency -------------------------------------------


def pair_twins(instances):
    """(original, twin) pairs from twin_of links; broken links error."""
    by_id = {}
    for inst in instances:
        if inst.id in by_id:
            raise ValueError(f"duplicate instance id {inst.id!r}")
        by_id[inst.id] = inst
    pairs = []
    claimed = set()
    for inst in instances:
        if inst.twin_of is None:
            continue
        if inst.twin_of not in by_id:
            raise ValueError(f"{inst.id}: twin_of {inst.twin_of!r} not found")
        orig = by_id[inst.twin_of]
        if orig.twin_of is not None:
            raise ValueError(f"{inst.id}: twin chains are not allowed")
        if orig.id in claimed:
            raise ValueError(f"{orig.id}: linked by more than one twin")
        claimed.add(orig.id)
        if inst.candidates != orig.candidates or inst.gold != orig.gold:
            raise ValueError(
                f"{inst.id}: twins must share candidates and gold answer")
        pairs.append((orig, inst))
    return pairs


@dataclass
class ConsistencyStats:
    mean: float
    stdev: float
    n_pairs: int

    def tsv_row(self, label):
        return f"{label}\t{self.mean:.6f}\t{self.stdev:.6f}\t{self.n_pairs}"


CONSISTENCY_HEADER = "pair_kind\tmean_rank_diff\tstdev_rank_diff\tn_pairs"


def consistency_report(model, encoder, pairs, kb=None) -> ConsistencyStats:
    """Mean and population stdev of rank(original) - rank(twin)."""
    if not pairs:
        raise ValueError("no twin pairs to compare")
    diffs = np.array([rank_candidates(model, encoder, a, kb=kb)
                      - rank_candidates(model, encoder, b, kb=kb)
                      for a, b in pairs])
    return ConsistencyStats(mean=float(diffs.mean()),
                            stdev=float(diffs.std()),
                            n_pairs=len(pairs))


# -- deductive protocol ------------------------------------------------------


@dataclass
class DeductiveCase:
    background: DiagnosticInstance
    probe: DiagnosticInstance


def pair_deductive(instances):
    """Probe instances link their background fact through twin_of."""
    ded = [i for i in instances if i.kind == "deductive"]
    by_id = {i.id: i for i in ded}
    cases = []
    for inst in ded:
        if inst.subcategory != "probe":
            continue
        if inst.twin_of is None or inst.twin_of not in by_id:
            raise ValueError(f"{inst.id}: probe lacks its background link")
        bg = by_id[inst.twin_of]
        if bg.subcategory != "background":
            raise ValueError(f"{inst.id}: twin_of must name a background fact")
        cases.append(DeductiveCase(background=bg, probe=inst))
    if not cases:
        raise ValueError("no deductive probe instances found")
    return cases


def _finetune_on_added_facts(init: Checkpoint, added_train, added_valid,
                             config: TrainConfig):
    kb = load_kb(added_train, added_valid, added_valid)
    model, encoder = build_run(config, kb)
    result = train(config, kb, model, encoder, init=init)
    return result.model, result.encoder, kb


def deductive_protocol(init: Checkpoint, instances, added_train, added_valid,
                       config: TrainConfig):
    """Three reports: background / no-added-facts / with-added-facts.

    Conditions 1 and 2 are zero-shot on the starting checkpoint; only
    condition 3 sees the added facts, through fine-tuning.
    """
    model = init.make_model()
    encoder = init.make_encoder()
    if encoder.kind != "gru":
        raise ValueError("the zero-shot conditions need a GRU checkpoint")
    cases = pair_deductive(instances)
    bg = rank_instances(model, encoder, [c.background for c in cases])
    no_added = rank_instances(model, encoder, [c.probe for c in cases])
    ft_model, ft_encoder, kb = _finetune_on_added_facts(
        init, added_train, added_valid, config)
    with_added = rank_instances(ft_model, ft_encoder,
                                [c.probe for c in cases], kb=kb)
    return {"background": RankingReport(bg),
            "no_added": RankingReport(no_added),
            "with_added": RankingReport(with_added)}


DEDUCTIVE_ROW_ORDER = ("background", "no_added", "with_added")


# -- stereotype report -------------------------------------------------------


@dataclass
class StereotypeReport:
    rows: list = field(default_factory=list)   # (condition, group, metrics)
    tests: dict = field(default_factory=dict)  # condition -> result dict

    def tsv(self):
        lines = ["condition\tgroup\tMR\tMRR\tH@1\tn"]
        for cond, group, m in self.rows:
            lines.append(f"{cond}\t{group}\t{m['MR']:.4f}\t{m['MRR']:.6f}"
                         f"\t{m['H@1']:.6f}\t{m['n_queries']}")
        return "\n".join(lines) + "\n"

    def summary(self):
        return {"rows": [{"condition": c, "group": g, **m}
                         for c, g, m in self.rows],
                "wilcoxon": self.tests}


def _group_rows(condition, instances, ranks):
    rows = []
    by_group = {}
    for inst, r in zip(instances, ranks):
        by_group.setdefault(inst.group, []).append(r)
    for group in GROUPS:
        if group in by_group:
            rep = RankingReport(np.array(by_group[group]), hits_at=(1,))
            m = rep.as_dict()
            rows.append((condition, group,
                         {"MR": m["MR"], "MRR": m["MRR"], "H@1": m["H@1"],
                          "n_queries": m["n_queries"]}))
    return rows


def _swap_test(pairs, rank_of):
    diffs = [rank_of[a.id] - rank_of[b.id] for a, b in pairs]
    try:
        w, p = wilcoxon_signed_rank(diffs)
        return {"W": w, "p": p, "n_pairs": len(diffs)}
    except DegenerateSample:
        return {"note": "no detectable effect", "n_pairs": len(diffs)}


def stereotype_report(init: Checkpoint, instances, added_train, added_valid,
                      config: TrainConfig) -> StereotypeReport:
    """Group metrics and name-swap Wilcoxon tests across conditions.

    Probes carry one of the four group labels; ungrouped stereotype
    instances with subcategory "background" form the single
    background-knowledge section.
    """
    probes = [i for i in instances if i.kind == "stereotype"
              and i.group is not None]
    background = [i for i in instances if i.kind == "stereotype"
                  and i.subcategory == "background"]
    if not probes:
        raise ValueError("no grouped stereotype instances found")
    pairs = pair_twins(probes)
    if not pairs:
        raise ValueError("stereotype probes carry no name-swap twin links")

    model = init.make_model()
    encoder = init.make_encoder()
    if encoder.kind != "gru":
        raise ValueError("the zero-shot conditions need a GRU checkpoint")
    report = StereotypeReport()

    ranks = rank_instances(model, encoder, probes)
    report.rows += _group_rows("no-added", probes, ranks)
    rank_of = {i.id: r for i, r in zip(probes, ranks)}
    report.tests["no-added"] = _swap_test(pairs, rank_of)

    if background:
        rep = RankingReport(rank_instances(model, encoder, background),
                            hits_at=(1,))
        m = rep.as_dict()
        report.rows.append(("background", "all",
                            {"MR": m["MR"], "MRR": m["MRR"], "H@1": m["H@1"],
                             "n_queries": m["n_queries"]}))

    ft_model, ft_encoder, kb = _finetune_on_added_facts(
        init, added_train, added_valid, config)
    ranks2 = rank_instances(ft_model, ft_encoder, probes, kb=kb)
    report.rows += _group_rows("with-added", probes, ranks2)
    rank_of2 = {i.id: r for i, r in zip(probes, ranks2)}
    report.tests["with-added"] = _swap_test(pairs, rank_of2)
    return report
