"""Synthetic worlds with known ground truth.

Three generators, all byte-deterministic in their seed:

* ``generate_synthetic_diagnostics``: a token-compositional world of
  places ("red harbor"), regions ("red realm", synonym "red kingdom"),
  persons, and occupations.  Its corpus teaches a composition rule
  (X lives in A, A located in B => X based in B), synonym wordings,
  and inverse wordings, so every diagnostic suite has signal to find.
* ``generate_transfer_pair``: two KBs over disjoint color-animal
  entities that share their token pools, for transfer and zero-shot
  experiments.
* ``generate_overfit_kb``: a tiny random KB for memorization checks.

``forward_chain`` is the logic-closure oracle used to verify that
generated deductive cases really are entailed.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .diagnostics import DiagnosticInstance, save_doge

COLORS = ["red", "blue", "green", "amber", "violet",
          "teal", "ivory", "coral", "slate", "golden"]
PLACE_KINDS = ["harbor", "valley", "market", "tower",
               "garden", "bridge", "mill", "grove"]
MASC_GIVEN = ["arno", "bertram", "cedric", "dorian", "edmund",
              "felix", "gregor", "harold", "ivan", "jasper"]
FEM_GIVEN = ["alma", "beatrix", "clara", "daphne", "elena",
             "freya", "greta", "hilda", "ingrid", "jonna"]
SURNAMES = ["stone", "rivers", "ashford", "blackwood", "corbin",
            "daly", "eastman", "fletcher", "grayson", "holt"]
MASC_JOBS = ["blacksmith", "mason", "falconer", "wheelwright", "shipwright"]
FEM_JOBS = ["weaver", "midwife", "lacemaker", "milliner", "seamstress"]
ANIMALS = ["fox", "heron", "otter", "lynx", "crane", "badger", "marten",
           "sparrow", "pike", "wolf", "hare", "stoat", "finch", "raven",
           "toad", "deer", "mole", "swan", "carp", "owl", "shrew", "kite",
           "perch", "vole", "wren", "newt", "boar", "dove", "eel", "elk"]

# the transfer world draws from wider pools so that targets with
# over a thousand entities still leave the source set disjoint
PAIR_COLORS = COLORS + [
    "crimson", "azure", "jade", "ochre", "indigo", "maroon", "silver",
    "copper", "pearl", "ebony", "scarlet", "cobalt", "olive", "umber",
    "lilac", "russet", "sable", "topaz", "bronze", "cream", "plum",
    "rose", "mint", "lemon", "rust", "navy", "sand", "ash", "onyx",
    "henna"]
PAIR_ANIMALS = ANIMALS + [
    "bat", "seal", "crow", "trout", "goose", "lamb", "bison", "weasel",
    "falcon", "squid"]

LIVES = "lives in"
RESIDES = "resides in"       # relation synonym of LIVES
LOCATED = "located in"
CONTAINS = "contains"        # inverse wording of LOCATED
BASED = "based in"           # composition of LIVES and LOCATED
WORKS = "works as"

COMPOSITION_RULE = (LIVES, LOCATED, BASED)


def forward_chain(triples, rules):
    """Close ``triples`` under ⟨X,q,A⟩ ∧ ⟨A,r,B⟩ ⟹ ⟨X,p,B⟩ rules."""
    facts = set(map(tuple, triples))
    changed = True
    while changed:
        changed = False
        by_head = {}
        for h, r, t in facts:
            by_head.setdefault(h, []).append((r, t))
        new = set()
        for q, r, p in rules:
            for x, rel, a in facts:
                if rel != q:
                    continue
                for rel2, b in by_head.get(a, ()):
                    if rel2 == r and (x, p, b) not in facts:
                        new.add((x, p, b))
        if new:
            facts |= new
            changed = True
    return facts


def _write_triples(path, triples):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for h, r, t in triples:
            f.write(f"{h}\t{r}\t{t}\n")
    return path


def _split_corpus(rng, facts, frac=0.1):
    """train = all facts; valid/test sample them (memorization splits)."""
    n = max(1, int(len(facts) * frac))
    valid = [facts[i] for i in rng.choice(len(facts), size=n, replace=False)]
    test = [facts[i] for i in rng.choice(len(facts), size=n, replace=False)]
    return facts, valid, test


def _mc(rng, gold_name, wrong_pool, k=10):
    """Candidate list of k names with exactly one gold; returns (list, idx)."""
    wrong = [w for w in wrong_pool if w != gold_name]
    picked = [wrong[i] for i in rng.choice(len(wrong), size=k - 1,
                                           replace=False)]
    cands = picked + [gold_name]
    order = rng.permutation(k)
    cands = [cands[i] for i in order]
    return cands, cands.index(gold_name)


def generate_synthetic_diagnostics(out_dir, seed=0, size=1):
    """Emit corpus TSVs, clusters, DOGE instances, and added-fact files."""
    if size not in (1, 2):
        raise ValueError("size must be 1 or 2")
    rng = np.random.default_rng(seed)
    out = Path(out_dir)

    regions = {c: f"{c} realm" for c in COLORS}
    kingdoms = {c: f"{c} kingdom" for c in COLORS}
    all_places = [f"{c} {k}" for c in COLORS for k in PLACE_KINDS]
    n_places = 10 + 6 * size
    # pick so every color owns at least one place
    order = rng.permutation(len(all_places))
    chosen, extras, seen = [], [], set()
    for i in order:
        p = all_places[i]
        if p.split()[0] not in seen:
            seen.add(p.split()[0])
            chosen.append(p)
        else:
            extras.append(p)
    places = chosen + extras[:n_places - len(chosen)]
    place_color = {p: p.split()[0] for p in places}
    # one place per color gets the kingdom wording so every synonym name
    # is attested in the corpus
    kingdom_attesters = {}
    for p in places:
        kingdom_attesters.setdefault(place_color[p], p)

    facts = []
    for p in places:
        c = place_color[p]
        facts.append((p, LOCATED, regions[c]))
        facts.append((regions[c], CONTAINS, p))
        if kingdom_attesters[c] == p:
            facts.append((p, LOCATED, kingdoms[c]))
            facts.append((kingdoms[c], CONTAINS, p))

    given_all = MASC_GIVEN + FEM_GIVEN
    corpus_persons = []
    n_persons = 3 * n_places
    combos = [(g, s) for s in SURNAMES[:6] for g in given_all]
    order = rng.permutation(len(combos))
    for i in range(n_persons):
        g, s = combos[order[i]]
        person = f"{g} {s}"
        gender = "masc" if g in MASC_GIVEN else "fem"
        home = places[int(rng.integers(n_places))]
        own = MASC_JOBS if gender == "masc" else FEM_JOBS
        other = FEM_JOBS if gender == "masc" else MASC_JOBS
        job = own[int(rng.integers(5))] if rng.random() < 0.9 \
            else other[int(rng.integers(5))]
        corpus_persons.append((person, gender, home, job))
        facts.append((person, LIVES, home))
        if i % 2 == 0:
            facts.append((person, RESIDES, home))
        facts.append((person, BASED, regions[place_color[home]]))
        facts.append((person, WORKS, job))

    train, valid, test = _split_corpus(rng, facts)
    paths = {
        "train": _write_triples(out / "corpus" / "train.tsv", train),
        "valid": _write_triples(out / "corpus" / "valid.tsv", valid),
        "test": _write_triples(out / "corpus" / "test.tsv", test),
    }
    cluster_path = out / "corpus" / "clusters.tsv"
    with open(cluster_path, "w", encoding="utf-8") as f:
        for c in COLORS:
            f.write(f"{regions[c]}\tregion-{c}\n")
            f.write(f"{kingdoms[c]}\tregion-{c}\n")
    paths["clusters"] = cluster_path

    region_names = [regions[c] for c in COLORS]
    instances = []

    # general: which region is this place in?
    for i in range(6 * size):
        p = places[i]
        cands, gold = _mc(rng, regions[place_color[p]], region_names)
        instances.append(DiagnosticInstance(
            id=f"gen-{i:04d}", head=p, relation=LOCATED, tail="?",
            candidates=cands, gold=gold, category="geography",
            kind="general"))

    # entity-synonym twins: realm wording vs kingdom wording in the head
    for i in range(4 * size):
        c = COLORS[i % len(COLORS)]
        in_region = [p for p in places if place_color[p] == c]
        out_region = [p for p in places if place_color[p] != c]
        gold_place = in_region[i % len(in_region)]
        cands, gold = _mc(rng, gold_place, out_region)
        orig = DiagnosticInstance(
            id=f"entsyn-{i:04d}", head=regions[c], relation=CONTAINS,
            tail="?", candidates=cands, gold=gold, category="geography",
            kind="general")
        twin = DiagnosticInstance(
            id=f"entsyn-{i:04d}-twin", head=kingdoms[c], relation=CONTAINS,
            tail="?", candidates=list(cands), gold=gold,
            category="geography", kind="entity-synonym-twin",
            twin_of=orig.id)
        instances += [orig, twin]

    # relation-synonym twins: lives in vs resides in
    for i in range(4 * size):
        person, _, home, _ = corpus_persons[i]
        cands, gold = _mc(rng, home, places)
        orig = DiagnosticInstance(
            id=f"relsyn-{i:04d}", head=person, relation=LIVES, tail="?",
            candidates=cands, gold=gold, category="residence",
            kind="general")
        twin = DiagnosticInstance(
            id=f"relsyn-{i:04d}-twin", head=person, relation=RESIDES,
            tail="?", candidates=list(cands), gold=gold,
            category="residence", kind="relation-synonym-twin",
            twin_of=orig.id)
        instances += [orig, twin]

    # inverse twins: tail query vs head query through the inverse wording
    for i in range(4 * size):
        p = places[(6 * size + i) % n_places]
        cands, gold = _mc(rng, regions[place_color[p]], region_names)
        orig = DiagnosticInstance(
            id=f"inv-{i:04d}", head=p, relation=LOCATED, tail="?",
            candidates=cands, gold=gold, category="geography",
            kind="general")
        twin = DiagnosticInstance(
            id=f"inv-{i:04d}-twin", head="?", relation=CONTAINS, tail=p,
            candidates=list(cands), gold=gold, category="geography",
            kind="inverse-twin", twin_of=orig.id)
        instances += [orig, twin]

    # deductive: new person, added residence fact, probed region
    added_train = []
    added_valid = []
    for c in COLORS:  # coverage so every candidate region is in the added KB
        p = kingdom_attesters[c]
        added_train.append((p, LOCATED, regions[c]))
    for i in range(5 * size):
        g = given_all[i % len(given_all)]
        s = SURNAMES[6 + (i // len(given_all)) % 2]
        person = f"{g} {s}"
        anchor = places[int(rng.integers(n_places))]
        region = regions[place_color[anchor]]
        cands, gold = _mc(rng, region, region_names)
        bg = DiagnosticInstance(
            id=f"ded-{i:04d}-bg", head=anchor, relation=LOCATED, tail="?",
            candidates=cands, gold=gold, category="geography",
            subcategory="background", kind="deductive")
        probe = DiagnosticInstance(
            id=f"ded-{i:04d}-probe", head=person, relation=BASED, tail="?",
            candidates=list(cands), gold=gold, category="geography",
            subcategory="probe", kind="deductive", twin_of=bg.id)
        instances += [bg, probe]
        added_train.append((person, LIVES, anchor))

    # stereotype probes with name-swap twins; gold job never changes
    job_names = MASC_JOBS + FEM_JOBS
    stereo_people = []
    for i in range(4 * size):
        gi = i % 5
        s = SURNAMES[8 + i % 2]
        masc, fem = MASC_GIVEN[gi] + " " + s, FEM_GIVEN[gi] + " " + s
        job = MASC_JOBS[i % 5]
        cands, gold = _mc(rng, job, job_names)
        orig = DiagnosticInstance(
            id=f"st-m-{i:04d}", head=masc, relation=WORKS, tail="?",
            candidates=cands, gold=gold, category="occupations",
            kind="stereotype", group="st-masc")
        twin = DiagnosticInstance(
            id=f"st-m-{i:04d}-swap", head=fem, relation=WORKS, tail="?",
            candidates=list(cands), gold=gold, category="occupations",
            kind="stereotype", group="anti-fem", twin_of=orig.id)
        instances += [orig, twin]
        stereo_people += [masc, fem]
    for i in range(4 * size):
        gi = 5 + i % 5
        s = SURNAMES[8 + (i + 1) % 2]
        masc, fem = MASC_GIVEN[gi] + " " + s, FEM_GIVEN[gi] + " " + s
        job = FEM_JOBS[i % 5]
        cands, gold = _mc(rng, job, job_names)
        orig = DiagnosticInstance(
            id=f"st-f-{i:04d}", head=fem, relation=WORKS, tail="?",
            candidates=cands, gold=gold, category="occupations",
            kind="stereotype", group="st-fem")
        twin = DiagnosticInstance(
            id=f"st-f-{i:04d}-swap", head=masc, relation=WORKS, tail="?",
            candidates=list(cands), gold=gold, category="occupations",
            kind="stereotype", group="anti-masc", twin_of=orig.id)
        instances += [orig, twin]
        stereo_people += [masc, fem]

    # stereotype background: corpus occupation facts as instances
    for i in range(4 * size):
        person, _, _, job = corpus_persons[len(corpus_persons) - 1 - i]
        cands, gold = _mc(rng, job, job_names)
        instances.append(DiagnosticInstance(
            id=f"st-bg-{i:04d}", head=person, relation=WORKS, tail="?",
            candidates=cands, gold=gold, category="occupations",
            subcategory="background", kind="stereotype"))

    # neutral added facts for stereotype people, plus coverage rows so the
    # added KB attests every candidate job, every probed relation wording,
    # and every region (fine-tuned vocabularies are built from this file)
    seen_jobs = set()
    for person, _, _, job in corpus_persons:
        if job not in seen_jobs:
            seen_jobs.add(job)
            added_train.append((person, WORKS, job))
    seen_regions = set()
    for person, _, home, _ in corpus_persons:
        region = regions[place_color[home]]
        if region not in seen_regions:
            seen_regions.add(region)
            added_train.append((person, BASED, region))
    for j, person in enumerate(stereo_people):
        home = places[(7 * j) % n_places]
        added_train.append((person, LIVES, home))

    n_av = max(2, len(added_train) // 5)
    av_idx = rng.choice(len(added_train), size=n_av, replace=False)
    added_valid = [added_train[i] for i in av_idx]

    paths["doge"] = save_doge(instances, out / "doge.jsonl")
    paths["added_train"] = _write_triples(out / "added_train.tsv", added_train)
    paths["added_valid"] = _write_triples(out / "added_valid.tsv", added_valid)
    manifest = {
        "seed": seed, "size": size,
        "n_corpus_facts": len(facts),
        "n_instances": len(instances),
        "n_added_train": len(added_train),
        "paths": {k: str(v) for k, v in paths.items()},
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


# -- transfer / zero-shot world ----------------------------------------------

SAME_COLOR = "same color as"
SAME_ANIMAL = "same animal as"


def _pair_universe(entities):
    """All ordered same-color and same-animal pairs."""
    by_color = {}
    by_animal = {}
    for e in entities:
        c, a = e.split()
        by_color.setdefault(c, []).append(e)
        by_animal.setdefault(a, []).append(e)
    pairs = []
    for group in by_color.values():
        pairs += [(h, SAME_COLOR, t) for h in group for t in group if h != t]
    for group in by_animal.values():
        pairs += [(h, SAME_ANIMAL, t) for h in group for t in group if h != t]
    return pairs


def generate_transfer_pair(out_dir, seed=0, n_pretrain=5000,
                           n_source_entities=150, n_target_entities=200,
                           target_split=(400, 100, 500)):
    """Source and target KBs over disjoint entities with shared tokens."""
    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    combos = [f"{c} {a}" for c in PAIR_COLORS for a in PAIR_ANIMALS]
    order = rng.permutation(len(combos))
    need = n_source_entities + n_target_entities
    if need > len(combos):
        raise ValueError("not enough color-animal combinations")
    # force every token into the source entity set first
    head = []
    seen_c, seen_a = set(), set()
    rest = []
    for i in order:
        c, a = combos[i].split()
        if c not in seen_c or a not in seen_a:
            head.append(combos[i])
            seen_c.add(c)
            seen_a.add(a)
        else:
            rest.append(combos[i])
    pool = head + rest
    source_entities = pool[:n_source_entities]
    target_entities = pool[n_source_entities:need]

    src_pairs = _pair_universe(source_entities)
    if len(src_pairs) <= 400:
        raise ValueError(f"source universe has only {len(src_pairs)} pairs")
    order = rng.permutation(len(src_pairs))
    held = [src_pairs[i] for i in order[:400]]
    train_pool = [src_pairs[i] for i in order[400:]]
    src_train = [train_pool[i] for i in
                 rng.integers(len(train_pool), size=n_pretrain)]
    src_valid, src_test = held[:200], held[200:]

    tgt_pairs = _pair_universe(target_entities)
    n_tr, n_va, n_te = target_split
    if n_tr + n_va + n_te > len(tgt_pairs):
        raise ValueError(f"target universe has only {len(tgt_pairs)} pairs")
    order = rng.permutation(len(tgt_pairs))
    tgt = [tgt_pairs[i] for i in order]
    tgt_train = tgt[:n_tr]
    tgt_valid = tgt[n_tr:n_tr + n_va]
    tgt_test = tgt[n_tr + n_va:n_tr + n_va + n_te]

    paths = {
        "source_train": _write_triples(out / "source" / "train.tsv", src_train),
        "source_valid": _write_triples(out / "source" / "valid.tsv", src_valid),
        "source_test": _write_triples(out / "source" / "test.tsv", src_test),
        "target_train": _write_triples(out / "target" / "train.tsv", tgt_train),
        "target_valid": _write_triples(out / "target" / "valid.tsv", tgt_valid),
        "target_test": _write_triples(out / "target" / "test.tsv", tgt_test),
    }
    return {"seed": seed,
            "n_source_entities": n_source_entities,
            "n_target_entities": n_target_entities,
            "paths": {k: str(v) for k, v in paths.items()}}


def generate_overfit_kb(out_dir, seed=0, n_triples=50, n_entities=20,
                        n_relations=3):
    """Small random KB; valid and test mirror train (memorization probe)."""
    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    seen = set()
    triples = []
    while len(triples) < n_triples:
        h = f"item{rng.integers(n_entities):02d}"
        t = f"item{rng.integers(n_entities):02d}"
        r = f"rel{rng.integers(n_relations)}"
        if h != t and (h, r, t) not in seen:
            seen.add((h, r, t))
            triples.append((h, r, t))
    paths = {
        "train": _write_triples(out / "train.tsv", triples),
        "valid": _write_triples(out / "valid.tsv", triples),
        "test": _write_triples(out / "test.tsv", triples),
    }
    return {"seed": seed, "n_triples": n_triples,
            "paths": {k: str(v) for k, v in paths.items()}}
