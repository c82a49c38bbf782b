"""Entity and relation encoders.

Two kinds are supported.  Table encoders hold one embedding row per item
of a fixed KB.  Recurrent encoders run a GRU over the tokens of an item's
name and take the final hidden state as its embedding, so they can embed
names never seen in training.  The entity and relation encoder of a
recurrent pair share one word-embedding matrix but keep separate GRU
parameters.

Both kinds expose the same training-facing surface: ``parameters()``
returns the trainable arrays, ``leaves(tape)`` registers them on a tape
(or wraps them as constants when ``tape`` is None, giving the inference
path), and the ``encode*`` methods build the embedding computation from
those leaves.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import KnowledgeBase, Vocabulary, normalize_name, tokenize_name

log = logging.getLogger(__name__)

MAX_NAME_TOKENS = 32
EMBEDDING_STD = 0.05

_GRU_KEYS = ("w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h")


def embedding_init(rng, shape, dtype):
    return rng.normal(0.0, EMBEDDING_STD, size=shape).astype(dtype)


def dense_init(rng, fan_in, shape, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class WordEmbeddings:
    """A token vocabulary with one embedding row per token."""

    vocab: Vocabulary
    matrix: np.ndarray

    @property
    def dim(self):
        return self.matrix.shape[1]


def load_word_vectors(path, vocab_limit=None, randomize=False, rng=None,
                      dtype=np.float32) -> WordEmbeddings:
    """Read a text word-vector file: ``token f1 f2 ... fD`` per line.

    The dimensionality is fixed by the first line; later mismatches raise
    with the line number.  Tokens that are not lowercase alphanumeric can
    never be produced by name normalisation and are skipped.  Duplicate
    tokens keep their first row (a warning is emitted).  ``randomize``
    replaces every vector with a fresh N(0, 0.05^2) draw, keeping the
    vocabulary; this is the word-embedding ablation switch.
    """
    vocab = Vocabulary()
    rows = []
    dim = None
    skipped = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2:
                raise ValueError(f"{path}:{lineno}: malformed line")
            token, values = parts[0], parts[1:]
            if dim is None:
                dim = len(values)
            elif len(values) != dim:
                raise ValueError(
                    f"{path}:{lineno}: expected {dim} values, got {len(values)}")
            if not (token.isalnum() and token == token.lower()):
                skipped += 1
                continue
            if token in vocab:
                log.warning("duplicate token %r at %s:%d, keeping first", token, path, lineno)
                continue
            vocab.add(token)
            rows.append(np.array([float(v) for v in values], dtype=dtype))
            if vocab_limit is not None and len(vocab) >= vocab_limit:
                break
    if dim is None:
        raise ValueError(f"{path}: empty word-vector file")
    if skipped:
        log.debug("skipped %d non-normalisable tokens in %s", skipped, path)
    matrix = np.stack(rows) if rows else np.zeros((0, dim), dtype=dtype)
    if randomize:
        if rng is None:
            rng = np.random.default_rng(0)
        matrix = embedding_init(rng, matrix.shape, dtype)
    return WordEmbeddings(vocab, matrix)


@dataclass
class TokenizedNames:
    """Padded token-id view of a list of names, ready for batch encoding."""

    token_ids: np.ndarray    # [N, T] int64, 0-padded
    mask: np.ndarray         # [N, T] float, 1 where a real token sits
    unknown: np.ndarray      # [N] bool, True when no usable token survived

    def __len__(self):
        return self.token_ids.shape[0]

    def take(self, indices):
        idx = np.asarray(indices)
        return TokenizedNames(self.token_ids[idx], self.mask[idx], self.unknown[idx])


def tokenize(token_lists, vocab: Vocabulary, dtype=np.float32) -> TokenizedNames:
    """Map token lists (or None for unencodable items) to padded id form.

    Unknown tokens are omitted; names longer than MAX_NAME_TOKENS are
    truncated.  Items whose list is None or ends up empty are flagged
    unknown.
    """
    ids = []
    truncated = 0
    for toks in token_lists:
        if toks is None:
            ids.append([])
            continue
        wids = [vocab.index(t) for t in toks]
        wids = [w for w in wids if w is not None]
        if len(wids) > MAX_NAME_TOKENS:
            truncated += 1
            wids = wids[:MAX_NAME_TOKENS]
        ids.append(wids)
    if truncated:
        log.warning("truncated %d names to %d tokens", truncated, MAX_NAME_TOKENS)
    n = len(ids)
    t = max((len(w) for w in ids), default=0)
    token_ids = np.zeros((n, t), dtype=np.int64)
    mask = np.zeros((n, t), dtype=dtype)
    for i, wids in enumerate(ids):
        token_ids[i, :len(wids)] = wids
        mask[i, :len(wids)] = 1.0
    unknown = np.array([len(w) == 0 for w in ids], dtype=bool)
    return TokenizedNames(token_ids, mask, unknown)


def _wrap(arrays, tape):
    if tape is None:
        return {k: ad.constant(v) for k, v in arrays.items()}
    return {k: tape.leaf(v) for k, v in arrays.items()}


class TableEncoderPair:
    """One embedding row per entity and per (augmented) relation."""

    kind = "table"

    def __init__(self, entity_table, relation_table):
        self.entity_table = entity_table
        self.relation_table = relation_table

    @classmethod
    def create(cls, num_entities, num_relations, entity_width, relation_width,
               rng, dtype=np.float32):
        return cls(embedding_init(rng, (num_entities, entity_width), dtype),
                   embedding_init(rng, (num_relations, relation_width), dtype))

    def parameters(self):
        return {"entity_table": self.entity_table,
                "relation_table": self.relation_table}

    def leaves(self, tape):
        return _wrap(self.parameters(), tape)

    def encode_entities(self, leaves, ids):
        return ad.gather(leaves["entity_table"], ids)

    def encode_relations(self, leaves, ids):
        return ad.gather(leaves["relation_table"], ids)

    def all_entities(self, leaves):
        return leaves["entity_table"]


class GruEncoderPair:
    """Recurrent name encoders sharing one word-embedding matrix."""

    kind = "gru"

    def __init__(self, words: WordEmbeddings, entity_gru: dict, relation_gru: dict,
                 entity_unknown, relation_unknown):
        self.words = words
        self.entity_gru = entity_gru
        self.relation_gru = relation_gru
        self.entity_unknown = entity_unknown
        self.relation_unknown = relation_unknown

    @classmethod
    def create(cls, words: WordEmbeddings, entity_width, relation_width, rng,
               dtype=np.float32):
        def make_gru(width):
            d_w = words.dim
            gru = {}
            for k in ("w_z", "w_r", "w_h"):
                gru[k] = dense_init(rng, d_w, (d_w, width), dtype)
            for k in ("u_z", "u_r", "u_h"):
                gru[k] = dense_init(rng, width, (width, width), dtype)
            for k in ("b_z", "b_r", "b_h"):
                gru[k] = np.zeros(width, dtype=dtype)
            return gru

        return cls(words, make_gru(entity_width), make_gru(relation_width),
                   embedding_init(rng, (entity_width,), dtype),
                   embedding_init(rng, (relation_width,), dtype))

    @property
    def entity_width(self):
        return self.entity_gru["u_z"].shape[0]

    @property
    def relation_width(self):
        return self.relation_gru["u_z"].shape[0]

    def parameters(self):
        out = {"words": self.words.matrix,
               "entity_unknown": self.entity_unknown,
               "relation_unknown": self.relation_unknown}
        for k in _GRU_KEYS:
            out[f"entity.{k}"] = self.entity_gru[k]
            out[f"relation.{k}"] = self.relation_gru[k]
        return out

    def leaves(self, tape):
        return _wrap(self.parameters(), tape)

    # -- tokenisation -----------------------------------------------------

    def tokenize_kb(self, kb: KnowledgeBase, which: str) -> TokenizedNames:
        n = kb.num_entities if which == "entity" else kb.num_relations
        lists = [tokenize_name(kb, which, i) for i in range(n)]
        return tokenize(lists, self.words.vocab, dtype=self.words.matrix.dtype)

    def tokenize_names(self, raw_names) -> TokenizedNames:
        lists = []
        for raw in raw_names:
            toks = normalize_name(raw).split()
            lists.append(toks if toks else None)
        return tokenize(lists, self.words.vocab, dtype=self.words.matrix.dtype)

    # -- encoding ----------------------------------------------------------

    def _run(self, leaves, tok: TokenizedNames, role: str, substitute_unknown=True):
        width = self.entity_width if role == "entity" else self.relation_width
        params = ad.GruParams(**{k: leaves[f"{role}.{k}"] for k in _GRU_KEYS})
        n, t = tok.token_ids.shape
        dtype = self.words.matrix.dtype
        h = ad.constant(np.zeros((n, width), dtype=dtype))
        for step in range(t):
            x = ad.gather(leaves["words"], tok.token_ids[:, step])
            h_new = ad.gru_cell(x, h, params)
            m = tok.mask[:, step:step + 1]
            h = ad.add(ad.mul(h_new, m), ad.mul(h, 1.0 - m))
        if substitute_unknown and tok.unknown.any():
            ind = tok.unknown.astype(dtype).reshape(n, 1)
            u = ad.reshape(leaves[f"{role}_unknown"], (1, width))
            h = ad.add(h, ad.matmul(ind, u))
        return h

    def encode_entity_tokens(self, leaves, tok: TokenizedNames):
        return self._run(leaves, tok, "entity")

    def encode_relation_tokens(self, leaves, tok: TokenizedNames):
        return self._run(leaves, tok, "relation")

    # inference conveniences (no tape, plain arrays out)

    def embed_names(self, raw_names, role="entity") -> np.ndarray:
        tok = self.tokenize_names(raw_names)
        return self._run(self.leaves(None), tok, role).value

    def embed_kb(self, kb: KnowledgeBase, which: str) -> np.ndarray:
        tok = self.tokenize_kb(kb, which)
        return self._run(self.leaves(None), tok, which).value


# ---------------------------------------------------------------------------
# construction and transfer


def build_table_encoders(kb: KnowledgeBase, entity_width, relation_width, rng,
                         dtype=np.float32) -> TableEncoderPair:
    return TableEncoderPair.create(kb.num_entities, kb.num_relations,
                                   entity_width, relation_width, rng, dtype)


def build_gru_encoders(vocab: Vocabulary, entity_width, relation_width, rng,
                       word_dim=300, word_vectors: WordEmbeddings | None = None,
                       dtype=np.float32) -> GruEncoderPair:
    """Fresh recurrent pair over ``vocab``.

    Rows for tokens present in ``word_vectors`` are copied from there;
    everything else is drawn from N(0, 0.05^2).
    """
    if word_vectors is not None:
        word_dim = word_vectors.dim
    matrix = embedding_init(rng, (len(vocab), word_dim), dtype)
    if word_vectors is not None:
        for i, token in enumerate(vocab.tokens):
            j = word_vectors.vocab.index(token)
            if j is not None:
                matrix[i] = word_vectors.matrix[j]
    words = WordEmbeddings(vocab, matrix)
    return GruEncoderPair.create(words, entity_width, relation_width, rng, dtype)


def transfer_gru_to_gru(pretrained: GruEncoderPair, target_vocab: Vocabulary,
                        rng) -> GruEncoderPair:
    """Re-vocabulary a recurrent pair.

    GRU parameters and unknown-name vectors are copied verbatim.  Word
    rows are copied for tokens the pretrained vocabulary knows; new tokens
    get N(0, 0.05^2) rows.
    """
    dtype = pretrained.words.matrix.dtype
    matrix = embedding_init(rng, (len(target_vocab), pretrained.words.dim), dtype)
    for i, token in enumerate(target_vocab.tokens):
        j = pretrained.words.vocab.index(token)
        if j is not None:
            matrix[i] = pretrained.words.matrix[j]
    return GruEncoderPair(
        WordEmbeddings(target_vocab, matrix),
        {k: v.copy() for k, v in pretrained.entity_gru.items()},
        {k: v.copy() for k, v in pretrained.relation_gru.items()},
        pretrained.entity_unknown.copy(),
        pretrained.relation_unknown.copy(),
    )


def transfer_gru_to_table(pretrained: GruEncoderPair, kb: KnowledgeBase,
                          rng) -> TableEncoderPair:
    """Materialise embedding tables for ``kb`` by encoding every name with
    the pretrained pair.  Names with no known tokens get a random
    N(0, 0.05^2) row.  The recurrent encoder itself is not carried over.
    """
    dtype = pretrained.words.matrix.dtype
    leaves = pretrained.leaves(None)
    tables = {}
    for which, width in (("entity", pretrained.entity_width),
                         ("relation", pretrained.relation_width)):
        tok = pretrained.tokenize_kb(kb, which)
        encoded = pretrained._run(leaves, tok, which, substitute_unknown=False).value
        table = np.array(encoded, dtype=dtype)
        for i in np.flatnonzero(tok.unknown):
            table[i] = embedding_init(rng, (width,), dtype)
        tables[which] = table
    return TableEncoderPair(tables["entity"], tables["relation"])
