"""Knowledge-base ingestion, normalisation, indexing, and views.

File formats
------------
triple-tsv      one ``head<TAB>relation<TAB>tail`` per line, exactly 3 columns
olpbench-tsv    same first three columns; anything after column 3 is ignored
clusters        ``entity_name<TAB>cluster_id``; names are matched after
                normalisation; entities missing from the file get fresh
                singleton cluster ids

Entities and relations are identified by their normalised surface form:
two raw strings that normalise identically are the same item.  Ids are
dense and assigned by first appearance, walking train, then valid, then
test.  Every relation gets a reciprocal partner named ``"inverse of "`` +
its own name, with id ``raw_id + num_raw_relations``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

INVERSE_PREFIX = "inverse of "


def normalize_name(raw: str) -> str:
    """Lowercase, replace every non-alphanumeric with a space, collapse
    whitespace runs, trim.  Idempotent."""
    cleaned = "".join(c if c.isalnum() else " " for c in raw.lower())
    return " ".join(cleaned.split())


@dataclass
class Vocabulary:
    """Token -> word-id map. Unknown tokens are omitted at encode time."""

    tokens: list = field(default_factory=list)
    _index: dict = field(default_factory=dict)
    unknown_policy: str = "omit"

    def add(self, token: str) -> int:
        wid = self._index.get(token)
        if wid is None:
            wid = len(self.tokens)
            self.tokens.append(token)
            self._index[token] = wid
        return wid

    def index(self, token: str):
        return self._index.get(token)

    def __contains__(self, token):
        return token in self._index

    def __len__(self):
        return len(self.tokens)

    @classmethod
    def from_tokens(cls, tokens):
        v = cls()
        for t in tokens:
            v.add(t)
        return v


@dataclass
class KnowledgeBase:
    entity_names: list
    relation_names: list           # augmented: raw relations then reciprocals
    num_raw_relations: int
    train: np.ndarray              # [n, 3] int64 (head, raw relation, tail)
    valid: np.ndarray
    test: np.ndarray
    clusters: np.ndarray | None = None      # [num_entities] int64
    unnamed_entities: frozenset = frozenset()
    unnamed_relations: frozenset = frozenset()

    @property
    def num_entities(self):
        return len(self.entity_names)

    @property
    def num_relations(self):
        """Relation count including reciprocals."""
        return len(self.relation_names)

    def split(self, name: str) -> np.ndarray:
        try:
            return {"train": self.train, "valid": self.valid, "test": self.test}[name]
        except KeyError:
            raise ValueError(f"unknown split {name!r}") from None

    def reciprocal(self, rel_id: int) -> int:
        r = self.num_raw_relations
        return rel_id + r if rel_id < r else rel_id - r


class _Indexer:
    def __init__(self, kind):
        self.kind = kind
        self.names = []
        self.index = {}
        self.unnamed = set()

    def lookup(self, raw: str) -> int:
        name = normalize_name(raw)
        if not name:
            iid = len(self.names)
            # underscore keeps synthetic names out of the normalised namespace
            self.names.append(f"{self.kind}_{iid}")
            self.unnamed.add(iid)
            return iid
        iid = self.index.get(name)
        if iid is None:
            iid = len(self.names)
            self.names.append(name)
            self.index[name] = iid
        return iid


def _parse_triple_file(path, fmt):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if fmt == "triple-tsv":
                if len(cols) != 3:
                    raise ValueError(
                        f"{path}:{lineno}: expected 3 tab-separated columns, got {len(cols)}")
            elif fmt == "olpbench-tsv":
                if len(cols) < 3:
                    raise ValueError(
                        f"{path}:{lineno}: expected at least 3 columns, got {len(cols)}")
                cols = cols[:3]
            else:
                raise ValueError(f"unknown format {fmt!r}")
            rows.append(cols)
    return rows


def load_kb(train_path, valid_path=None, test_path=None, cluster_path=None,
            fmt="triple-tsv") -> KnowledgeBase:
    """Read up to three split files and assemble one KnowledgeBase.

    Duplicate triples are kept as given.  Raises on malformed lines (with
    line number) and on relation names that would collide with a generated
    reciprocal name.
    """
    ents = _Indexer("entity")
    rels = _Indexer("relation")
    splits = {}
    for split, path in (("train", train_path), ("valid", valid_path), ("test", test_path)):
        if path is None:
            splits[split] = np.zeros((0, 3), dtype=np.int64)
            continue
        rows = _parse_triple_file(path, fmt)
        arr = np.zeros((len(rows), 3), dtype=np.int64)
        for i, (h, r, t) in enumerate(rows):
            arr[i, 0] = ents.lookup(h)
            arr[i, 1] = rels.lookup(r)
            arr[i, 2] = ents.lookup(t)
        splits[split] = arr

    raw_names = list(rels.names)
    existing = set(raw_names)
    relation_names = list(raw_names)
    for name in raw_names:
        inv = INVERSE_PREFIX + name
        if inv in existing:
            raise ValueError(
                f"relation name {inv!r} collides with the reciprocal of {name!r}")
        relation_names.append(inv)

    kb = KnowledgeBase(
        entity_names=ents.names,
        relation_names=relation_names,
        num_raw_relations=len(raw_names),
        train=splits["train"],
        valid=splits["valid"],
        test=splits["test"],
        unnamed_entities=frozenset(ents.unnamed),
        unnamed_relations=frozenset(rels.unnamed),
    )
    if cluster_path is not None:
        kb.clusters = load_clusters(cluster_path, kb)
    else:
        kb.clusters = None
    return kb


def load_clusters(path, kb: KnowledgeBase) -> np.ndarray:
    """Read ``entity_name<TAB>cluster_id`` lines into a per-entity array.

    Entities absent from the file get fresh singleton cluster ids so the
    map always covers every entity.
    """
    name_to_id = {n: i for i, n in enumerate(kb.entity_names)}
    clusters = np.full(kb.num_entities, -1, dtype=np.int64)
    raw_cluster_ids = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 2:
                raise ValueError(f"{path}:{lineno}: expected 2 columns, got {len(cols)}")
            name = normalize_name(cols[0])
            eid = name_to_id.get(name)
            if eid is None:
                raise ValueError(f"{path}:{lineno}: unknown entity {cols[0]!r}")
            cid = raw_cluster_ids.setdefault(cols[1], len(raw_cluster_ids))
            clusters[eid] = cid
    next_cid = len(raw_cluster_ids)
    for eid in range(kb.num_entities):
        if clusters[eid] < 0:
            clusters[eid] = next_cid
            next_cid += 1
    return clusters


def save_kb(kb: KnowledgeBase, out_dir):
    """Write the three splits as triple-tsv. Reloading reproduces the id
    assignment and splits."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for split in ("train", "valid", "test"):
        path = os.path.join(out_dir, f"{split}.tsv")
        arr = kb.split(split)
        with open(path, "w", encoding="utf-8") as fh:
            for h, r, t in arr:
                fh.write(f"{kb.entity_names[h]}\t{kb.relation_names[r]}\t"
                         f"{kb.entity_names[t]}\n")
        paths[split] = path
    return paths


def tail_query_view(kb: KnowledgeBase, split: str):
    """Both prediction directions of a split as tail queries.

    Each triple (h, r, t) contributes (h, r) -> t and, through the
    reciprocal relation, (t, r + R) -> h.  Returns (heads, relations,
    golds) arrays of length 2n.
    """
    arr = kb.split(split)
    r = kb.num_raw_relations
    heads = np.concatenate([arr[:, 0], arr[:, 2]])
    rels = np.concatenate([arr[:, 1], arr[:, 1] + r])
    golds = np.concatenate([arr[:, 2], arr[:, 0]])
    return heads, rels, golds


def filter_sets(kb: KnowledgeBase) -> dict:
    """Known-true answers per (head, relation) query over all three splits,
    both directions.  Values are sorted unique id arrays."""
    acc = {}
    r = kb.num_raw_relations
    for split in ("train", "valid", "test"):
        for h, rel, t in kb.split(split):
            acc.setdefault((int(h), int(rel)), set()).add(int(t))
            acc.setdefault((int(t), int(rel) + r), set()).add(int(h))
    return {k: np.array(sorted(v), dtype=np.int64) for k, v in acc.items()}


def tokenize_name(kb: KnowledgeBase, which: str, item_id: int):
    """Token list for an entity or relation name; None if the item is a
    synthetic placeholder that must use a random embedding instead."""
    if which == "entity":
        if item_id in kb.unnamed_entities:
            return None
        return kb.entity_names[item_id].split()
    if which == "relation":
        raw = item_id if item_id < kb.num_raw_relations else item_id - kb.num_raw_relations
        if raw in kb.unnamed_relations:
            return None
        return kb.relation_names[item_id].split()
    raise ValueError(f"unknown item kind {which!r}")


def vocabulary_from_kb(kb: KnowledgeBase) -> Vocabulary:
    """All tokens appearing in entity and (augmented) relation names, in
    first-appearance order."""
    vocab = Vocabulary()
    for eid in range(kb.num_entities):
        toks = tokenize_name(kb, "entity", eid)
        if toks:
            for t in toks:
                vocab.add(t)
    for rid in range(kb.num_relations):
        toks = tokenize_name(kb, "relation", rid)
        if toks:
            for t in toks:
                vocab.add(t)
    return vocab


def kb_digest(kb: KnowledgeBase) -> str:
    """Stable digest of the name tables; used to detect id mismatches when
    a table-encoder checkpoint meets a different KB."""
    import hashlib

    h = hashlib.sha256()
    for name in kb.entity_names:
        h.update(name.encode("utf-8"))
        h.update(b"\x00")
    h.update(b"\x01")
    for name in kb.relation_names:
        h.update(name.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()
