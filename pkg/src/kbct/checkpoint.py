"""Self-describing binary checkpoints.

Layout: 8-byte magic, little-endian u32 format version, u64 length of a
UTF-8 JSON metadata document, then the raw array payloads in the order
the metadata declares, each prefixed with its u64 byte length.  Arrays
are stored little-endian, so a save -> load -> save cycle is
byte-identical on any host.

The metadata carries everything needed to rebuild the model and encoder
without the original config file: model kind and dims, encoder kind,
the word vocabulary for GRU encoders, the training config snapshot, the
best validation MRR, and a digest of the KB's name lists (used to catch
an embedding-table checkpoint being pointed at a different KB).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .data import Vocabulary
from .encoders import _GRU_KEYS, GruEncoderPair, TableEncoderPair, WordEmbeddings
from .models import MODEL_KINDS

MAGIC = b"KBCTCKPT"
VERSION = 1


def encoder_state(encoder):
    """(meta, arrays) pair describing an encoder pair."""
    if encoder.kind == "table":
        meta = {"kind": "table"}
    else:
        meta = {"kind": "gru", "vocab": list(encoder.words.vocab.tokens),
                "word_dim": encoder.words.dim}
    return meta, dict(encoder.parameters())


def restore_encoder(meta, arrays):
    if meta["kind"] == "table":
        return TableEncoderPair(arrays["entity_table"], arrays["relation_table"])
    vocab = Vocabulary.from_tokens(meta["vocab"])
    words = WordEmbeddings(vocab, arrays["words"])
    e_gru = {k: arrays[f"entity.{k}"] for k in _GRU_KEYS}
    r_gru = {k: arrays[f"relation.{k}"] for k in _GRU_KEYS}
    return GruEncoderPair(words, e_gru, r_gru,
                          arrays["entity_unknown"], arrays["relation_unknown"])


@dataclass
class Checkpoint:
    model_meta: dict
    model_arrays: dict
    encoder_meta: dict
    encoder_arrays: dict
    config: dict = field(default_factory=dict)
    best_valid_mrr: float = float("nan")
    kb_digest: str = ""
    version: int = VERSION

    @classmethod
    def from_state(cls, model, encoder, config=None, best_valid_mrr=float("nan"),
                   kb_digest=""):
        """Snapshot live model/encoder state (arrays are copied)."""
        enc_meta, enc_arrays = encoder_state(encoder)
        return cls(model_meta=dict(model.meta()),
                   model_arrays={k: v.copy() for k, v in model.arrays().items()},
                   encoder_meta=enc_meta,
                   encoder_arrays={k: v.copy() for k, v in enc_arrays.items()},
                   config=dict(config) if config else {},
                   best_valid_mrr=float(best_valid_mrr),
                   kb_digest=kb_digest)

    @property
    def model_kind(self):
        return self.model_meta["kind"]

    @property
    def encoder_kind(self):
        return self.encoder_meta["kind"]

    def make_model(self, dtype=np.float32):
        cls = MODEL_KINDS[self.model_meta["kind"]]
        arrays = {k: v.copy() for k, v in self.model_arrays.items()}
        return cls.from_arrays(self.model_meta, arrays, dtype=dtype)

    def make_encoder(self):
        arrays = {k: v.copy() for k, v in self.encoder_arrays.items()}
        return restore_encoder(self.encoder_meta, arrays)

    # -- container I/O -----------------------------------------------------

    def _ordered_arrays(self):
        out = [("model." + k, v) for k, v in self.model_arrays.items()]
        out += [("encoder." + k, v) for k, v in self.encoder_arrays.items()]
        return out

    def save(self, path):
        named = self._ordered_arrays()
        decl = [{"name": name,
                 "shape": list(arr.shape),
                 "dtype": arr.dtype.newbyteorder("<").str}
                for name, arr in named]
        meta = {"format_version": self.version,
                "model": self.model_meta,
                "encoder": self.encoder_meta,
                "config": self.config,
                "best_valid_mrr": self.best_valid_mrr,
                "kb_digest": self.kb_digest,
                "arrays": decl}
        blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", self.version))
            f.write(struct.pack("<Q", len(blob)))
            f.write(blob)
            for (_, arr), d in zip(named, decl):
                data = np.ascontiguousarray(arr).astype(d["dtype"], copy=False)
                raw = data.tobytes()
                f.write(struct.pack("<Q", len(raw)))
                f.write(raw)
        return path

    @classmethod
    def load(cls, path, expect_kind=None):
        with open(path, "rb") as f:
            buf = f.read()
        if buf[:8] != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack_from("<I", buf, 8)
        if version != VERSION:
            raise ValueError(
                f"{path}: unsupported checkpoint format version {version}, "
                f"this build reads version {VERSION}")
        (meta_len,) = struct.unpack_from("<Q", buf, 12)
        off = 20
        meta = json.loads(buf[off:off + meta_len].decode())
        off += meta_len
        arrays = {}
        for i, d in enumerate(meta["arrays"]):
            if off + 8 > len(buf):
                raise ValueError(f"{path}: truncated at array {i} ({d['name']})")
            (nbytes,) = struct.unpack_from("<Q", buf, off)
            off += 8
            if off + nbytes > len(buf):
                raise ValueError(f"{path}: truncated at array {i} ({d['name']})")
            count = nbytes // np.dtype(d["dtype"]).itemsize
            arr = np.frombuffer(buf, dtype=d["dtype"], count=count, offset=off)
            arrays[d["name"]] = arr.reshape(d["shape"]).copy()
            off += nbytes
        model_arrays = {k[len("model."):]: v for k, v in arrays.items()
                        if k.startswith("model.")}
        encoder_arrays = {k[len("encoder."):]: v for k, v in arrays.items()
                          if k.startswith("encoder.")}
        ckpt = cls(model_meta=meta["model"], model_arrays=model_arrays,
                   encoder_meta=meta["encoder"], encoder_arrays=encoder_arrays,
                   config=meta["config"], best_valid_mrr=meta["best_valid_mrr"],
                   kb_digest=meta["kb_digest"], version=version)
        if expect_kind is not None and ckpt.model_kind != expect_kind:
            raise ValueError(
                f"{path}: model kind mismatch, checkpoint holds "
                f"{ckpt.model_kind!r} but {expect_kind!r} was requested")
        return ckpt


def save_checkpoint(ckpt: Checkpoint, path):
    return ckpt.save(path)


def load_checkpoint(path, expect_kind=None) -> Checkpoint:
    return Checkpoint.load(path, expect_kind=expect_kind)
