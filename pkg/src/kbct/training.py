"""1-N training with Adam, periodic validation, and grid search.

Each training query is a ⟨head, relation⟩ pair whose gold tail must win
a softmax over a candidate set: every entity when fine-tuning, the
unique gold tails of the batch when pre-training (in-batch negatives).
The model with the best validation MRR across the run is returned as a
checkpoint.

Determinism contract: one ``numpy`` generator seeded from the config
drives parameter initialization, another drives epoch shuffling and
dropout, so identical configs produce bit-identical checkpoints.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, backward
from .checkpoint import Checkpoint
from .data import KnowledgeBase, kb_digest, tail_query_view, vocabulary_from_kb
from .encoders import (
    build_gru_encoders,
    build_table_encoders,
    transfer_gru_to_gru,
    transfer_gru_to_table,
)
from .evaluation import evaluate
from .models import TransferError, build_model, transfer_shared

log = logging.getLogger(__name__)

MODE_DEFAULTS = {
    "pretrain": {"batch_size": 4096, "epochs": 100, "validate_every": 20},
    "finetune": {"batch_size": 512, "epochs": 500, "validate_every": 25},
}


@dataclass
class TrainConfig:
    model: str = "tucker"
    encoder: str = "table"
    mode: str = "finetune"
    dim: int = 300
    learning_rate: float = 3e-4
    batch_size: int = 0          # 0 picks the mode default
    epochs: int = 0
    validate_every: int = 0
    dropout: float = 0.3
    n3_weight: float = 0.0
    word_dim: int = 300
    train_word_embeddings: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODE_DEFAULTS:
            raise ValueError(f"mode must be pretrain or finetune, got {self.mode!r}")
        for key, val in MODE_DEFAULTS[self.mode].items():
            if getattr(self, key) == 0:
                setattr(self, key, val)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params):
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})

    def apply(self, params, grads, lr):
        """One in-place update of every parameter from its gradient."""
        self.step += 1
        c1 = 1.0 - self.beta1 ** self.step
        c2 = 1.0 - self.beta2 ** self.step
        for k, p in params.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, dump):
        super().__init__(message)
        self.dump = dump


class _Embedder:
    """Uniform batch-embedding view over either encoder kind."""

    def __init__(self, encoder, kb: KnowledgeBase):
        self.encoder = encoder
        if encoder.kind == "gru":
            self.tok_e = encoder.tokenize_kb(kb, "entity")
            self.tok_r = encoder.tokenize_kb(kb, "relation")

    def entities(self, leaves, ids=None):
        if self.encoder.kind == "table":
            if ids is None:
                return self.encoder.all_entities(leaves)
            return self.encoder.encode_entities(leaves, ids)
        tok = self.tok_e if ids is None else self.tok_e.take(ids)
        return self.encoder.encode_entity_tokens(leaves, tok)

    def relations(self, leaves, ids):
        if self.encoder.kind == "table":
            return self.encoder.encode_relations(leaves, ids)
        return self.encoder.encode_relation_tokens(leaves, self.tok_r.take(ids))


def loss_1n(model, model_leaves, vh, vr, cand_tails, gold_positions,
            cand_ids=None, use_bias=True, training=False, rng=None):
    """Mean softmax cross-entropy of the gold tail over the candidates.

    Models with an embedding regularizer (5*E's weighted N3) add its
    batch total divided by the batch size.
    """
    b = vh.value.shape[0]
    n = cand_tails.value.shape[0]
    gold_positions = np.asarray(gold_positions, dtype=np.int64)
    if gold_positions.size and not ((gold_positions >= 0).all()
                                    and (gold_positions < n).all()):
        raise AssertionError("gold tail missing from the candidate set")
    scores = model.score_all(model_leaves, vh, vr, cand_tails,
                             training=training, rng=rng,
                             bias_ids=cand_ids, use_bias=use_bias)
    ce = ad.softmax_cross_entropy(scores, gold_positions)
    loss = ad.mul(ad.reduce_sum(ce), 1.0 / b)
    if getattr(model, "n3_weight", 0.0):
        reg = model.regularization(model_leaves, vh, vr,
                                   ad.gather(cand_tails, gold_positions))
        if reg is not None:
            loss = ad.add(loss, ad.mul(reg, 1.0 / b))
    return loss


def build_run(config: TrainConfig, kb: KnowledgeBase, word_vectors=None,
              dtype=np.float32):
    """Construct the model and encoder pair a config describes."""
    rng = np.random.default_rng([config.seed, 0])
    model = build_model(config.model, config.dim, kb.num_entities,
                        dropout=config.dropout, n3_weight=config.n3_weight,
                        rng=rng, dtype=dtype)
    if config.encoder == "table":
        encoder = build_table_encoders(kb, model.entity_width,
                                       model.relation_width, rng, dtype)
    elif config.encoder == "gru":
        vocab = vocabulary_from_kb(kb)
        encoder = build_gru_encoders(vocab, model.entity_width,
                                     model.relation_width, rng,
                                     word_dim=config.word_dim,
                                     word_vectors=word_vectors, dtype=dtype)
    else:
        raise ValueError(f"unknown encoder kind {config.encoder!r}")
    return model, encoder


def apply_init(init: Checkpoint, model, encoder, kb: KnowledgeBase, rng):
    """Seed a fresh model/encoder pair from a pre-trained checkpoint.

    Shared model parameters move by kind-specific rules; encoders move by
    name: a GRU source re-encodes or re-keys by vocabulary, a table
    source can only be reused on a KB with identical name lists.
    Returns the (possibly replaced) encoder.
    """
    transfer_shared(init.make_model(), model, rng=rng)
    src = init.make_encoder()
    if src.kind == "gru":
        if encoder.kind == "table":
            return transfer_gru_to_table(src, kb, rng)
        return transfer_gru_to_gru(src, encoder.words.vocab, rng)
    if encoder.kind != "table":
        raise TransferError(
            "a table-encoder checkpoint cannot initialize name encoders")
    if src.entity_table.shape != encoder.entity_table.shape or \
            src.relation_table.shape != encoder.relation_table.shape:
        raise TransferError(
            "embedding tables do not line up with this KB; table encoders "
            "only transfer onto the same entity set, use the GRU path")
    encoder.entity_table = src.entity_table.copy()
    encoder.relation_table = src.relation_table.copy()
    return encoder


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list = field(default_factory=list)  # (epoch, metrics dict)
    best_epoch: int = 0
    best_valid: dict = field(default_factory=dict)
    model: object = None
    encoder: object = None


def _named_parameters(model, encoder):
    params = {}
    for k, v in model.parameters().items():
        params["model." + k] = v
    for k, v in encoder.parameters().items():
        params["encoder." + k] = v
    return params


def train(config: TrainConfig, kb: KnowledgeBase, model, encoder,
          init: Checkpoint | None = None, word_vectors=None,
          epoch_hook=None) -> TrainResult:
    rng = np.random.default_rng([config.seed, 1])
    if init is not None:
        encoder = apply_init(init, model, encoder, kb, rng)

    params = _named_parameters(model, encoder)
    frozen = set()
    if not config.train_word_embeddings and "encoder.words" in params:
        frozen.add("encoder.words")
    trainable = {k: v for k, v in params.items() if k not in frozen}
    adam = AdamState.create(trainable)

    heads, rels, golds = tail_query_view(kb, "train")
    n_queries = heads.size
    if n_queries == 0:
        raise ValueError("training split is empty")
    emb = _Embedder(encoder, kb)
    digest = kb_digest(kb)

    def snapshot(mrr):
        return Checkpoint.from_state(model, encoder, config.to_dict(),
                                     best_valid_mrr=mrr, kb_digest=digest)

    best_ckpt = None
    best_mrr = -np.inf
    best_epoch = 0
    best_valid = {}
    history = []
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(n_queries)
        for lo in range(0, n_queries, config.batch_size):
            idx = perm[lo:lo + config.batch_size]
            bh, br, bg = heads[idx], rels[idx], golds[idx]
            tape = Tape(dtype=model.dtype if hasattr(model, "dtype") else np.float32)
            nodes = {k: (tape.leaf(v) if k in trainable else ad.constant(v))
                     for k, v in params.items()}
            model_leaves = {k[len("model."):]: n for k, n in nodes.items()
                            if k.startswith("model.")}
            enc_leaves = {k[len("encoder."):]: n for k, n in nodes.items()
                          if k.startswith("encoder.")}
            if config.mode == "pretrain":
                cand_ids = np.unique(bg)
                gold_pos = np.searchsorted(cand_ids, bg)
            else:
                cand_ids = None
                gold_pos = bg
            vh = emb.entities(enc_leaves, bh)
            vr = emb.relations(enc_leaves, br)
            cand = emb.entities(enc_leaves, cand_ids)
            loss = loss_1n(model, model_leaves, vh, vr, cand, gold_pos,
                           cand_ids=cand_ids, training=True, rng=rng)
            lv = float(loss.value)
            if not np.isfinite(lv):
                dump = {"epoch": epoch, "batch_start": int(lo),
                        "loss": lv,
                        "batch_heads": bh[:16].tolist(),
                        "batch_relations": br[:16].tolist(),
                        "max_abs_param": {k: float(np.abs(v).max())
                                          for k, v in trainable.items()}}
                raise TrainingDiverged(
                    f"non-finite loss {lv} at epoch {epoch}, batch offset {lo}",
                    dump)
            grads = backward(tape, loss)
            grad_arrays = {k: grads[nodes[k].uid] for k in trainable}
            adam.apply(trainable, grad_arrays, config.learning_rate)

        if epoch % config.validate_every == 0 or epoch == config.epochs:
            if kb.valid.shape[0] > 0:
                report = evaluate(model, encoder, kb, "valid")
                metrics = report.as_dict()
            else:
                metrics = {"MR": float("nan"), "MRR": float("nan"),
                           "H@1": float("nan"), "H@10": float("nan"),
                           "n_queries": 0}
            history.append((epoch, metrics))
            log.info("epoch %d valid MRR %.4f", epoch, metrics["MRR"])
            if epoch_hook is not None:
                epoch_hook(epoch, metrics)
            mrr = metrics["MRR"]
            if np.isnan(mrr):
                # no validation data: keep the final state
                best_ckpt, best_epoch, best_valid = snapshot(mrr), epoch, metrics
            elif mrr > best_mrr:
                best_mrr = mrr
                best_ckpt, best_epoch, best_valid = snapshot(mrr), epoch, metrics

    return TrainResult(checkpoint=best_ckpt, history=history,
                       best_epoch=best_epoch, best_valid=best_valid,
                       model=model, encoder=encoder)


def grid_rows(grid: dict):
    """Expand {field: [values]} into config-override dicts, sorted keys."""
    keys = sorted(grid)
    for combo in itertools.product(*(grid[k] for k in keys)):
        yield dict(zip(keys, combo))


@dataclass
class GridResult:
    best: TrainResult
    best_config: TrainConfig
    table: list  # TSV rows

    def table_text(self):
        return "\n".join(self.table) + "\n"


def grid_search(base: TrainConfig, grid: dict, kb: KnowledgeBase,
                word_vectors=None) -> GridResult:
    """Train every cell of the lattice; pick the best validation MRR."""
    best = None
    best_cfg = None
    best_mrr = -np.inf
    rows = []
    for i, overrides in enumerate(grid_rows(grid)):
        cfg = replace(base, **overrides)
        model, encoder = build_run(cfg, kb, word_vectors=word_vectors)
        result = train(cfg, kb, model, encoder, word_vectors=word_vectors)
        m = result.best_valid
        rows.append("cell-%03d\t%s\t%.6g\t%.6f\t%.6f" % (
            i, json.dumps(cfg.to_dict(), sort_keys=True),
            m["MR"], m["MRR"], m["H@10"]))
        log.info("grid %s", rows[-1])
        score = -np.inf if np.isnan(m["MRR"]) else m["MRR"]
        if best is None or score > best_mrr:
            best, best_cfg, best_mrr = result, cfg, score
    return GridResult(best=best, best_config=best_cfg, table=rows)
