"""Scoring models: TuckER, ConvE, and the Moebius-transform model 5*E.

All three share one calling convention.  ``leaves(tape)`` registers the
model's trainable arrays (constants when ``tape`` is None, which is the
inference path), and ``score_all(leaves, vh, vr, tails, ...)`` maps a
batch of query embeddings against a candidate-tail matrix to a [B, N]
score grid.  Embedding widths are declared by the model: encoders must
produce entity vectors of ``entity_width`` reals and relation vectors of
``relation_width`` reals.

5*E works on complex embeddings carried as real arrays: an entity vector
of width 2d is the concatenation re || im, and a relation vector of width
8d packs the four Moebius coefficient vectors as a_re || a_im || b_re ||
b_im || c_re || c_im || d_re || d_im.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, ComplexPair
from .encoders import dense_init, embedding_init

CONV_CHANNELS = 32
CONV_KERNEL = 3
MOEBIUS_EPS = 1e-6


class TransferError(ValueError):
    """Parameter transfer between incompatible models."""


def _wrap(arrays, tape):
    if tape is None:
        return {k: ad.constant(v) for k, v in arrays.items()}
    return {k: tape.leaf(v) for k, v in arrays.items()}


def _split_rows(x, parts: int, width: int):
    """View [B, parts*width] as ``parts`` tensors [B, width].

    Built from reshape + gather so it stays inside the primitive set:
    reshaping to [B*parts, width] puts component k of batch row b at row
    b*parts + k.
    """
    b = x.value.shape[0]
    flat = ad.reshape(x, (b * parts, width))
    base = np.arange(b, dtype=np.int64) * parts
    return [ad.gather(flat, base + k) for k in range(parts)]


class TuckerModel:
    """Trilinear scorer: score(h, r, t) = sum_ijk W[i,j,k] h_i r_j t_k.

    The core is stored in (relation, head, tail) index order so the
    relation contraction is one flat matmul; the public ``core`` property
    presents the conventional (head, relation, tail) order.
    """

    kind = "tucker"

    def __init__(self, dim, dropout=0.3, rng=None, dtype=np.float32):
        self.dim = dim
        self.dropout = dropout
        self.dtype = np.dtype(dtype)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.core_rht = rng.uniform(-1.0, 1.0, size=(dim, dim, dim)).astype(self.dtype)
        self.bn0_gamma = np.ones(dim, dtype=self.dtype)
        self.bn0_beta = np.zeros(dim, dtype=self.dtype)
        self.bn1_gamma = np.ones(dim, dtype=self.dtype)
        self.bn1_beta = np.zeros(dim, dtype=self.dtype)
        self.bn0_state = BatchNormState.create(dim, dtype=self.dtype)
        self.bn1_state = BatchNormState.create(dim, dtype=self.dtype)

    @property
    def entity_width(self):
        return self.dim

    @property
    def relation_width(self):
        return self.dim

    @property
    def core(self):
        """Core tensor in (head, relation, tail) index order."""
        return self.core_rht.transpose(1, 0, 2)

    def parameters(self):
        return {"core": self.core_rht,
                "bn0_gamma": self.bn0_gamma, "bn0_beta": self.bn0_beta,
                "bn1_gamma": self.bn1_gamma, "bn1_beta": self.bn1_beta}

    def leaves(self, tape):
        return _wrap(self.parameters(), tape)

    def score_all(self, leaves, vh, vr, tails, training=False, rng=None,
                  bias_ids=None, use_bias=True):
        d = self.dim
        b = vh.value.shape[0]
        x = ad.batchnorm(vh, leaves["bn0_gamma"], leaves["bn0_beta"],
                         self.bn0_state, training)
        x = ad.dropout(x, self.dropout, rng, training)
        w_r = ad.matmul(vr, ad.reshape(leaves["core"], (d, d * d)))
        w_r = ad.reshape(w_r, (b, d, d))
        w_r = ad.dropout(w_r, self.dropout, rng, training)
        x = ad.matmul(ad.reshape(x, (b, 1, d)), w_r)
        x = ad.reshape(x, (b, d))
        x = ad.batchnorm(x, leaves["bn1_gamma"], leaves["bn1_beta"],
                         self.bn1_state, training)
        x = ad.dropout(x, self.dropout, rng, training)
        return ad.matmul(x, tails, transpose_b=True)

    def contract_all(self, vh, vr, tails):
        """Pure trilinear contraction, no normalisation: the oracle path."""
        return np.einsum("rht,br,bh,nt->bn", self.core_rht, vr, vh, tails,
                         optimize=True)

    def meta(self):
        return {"kind": self.kind, "dim": self.dim, "dropout": self.dropout}

    def arrays(self):
        out = dict(self.parameters())
        out["bn0_mean"] = self.bn0_state.running_mean
        out["bn0_var"] = self.bn0_state.running_var
        out["bn1_mean"] = self.bn1_state.running_mean
        out["bn1_var"] = self.bn1_state.running_var
        return out

    @classmethod
    def from_arrays(cls, meta, arrays, dtype=np.float32):
        model = cls(meta["dim"], meta["dropout"], dtype=dtype)
        model.core_rht = arrays["core"]
        model.bn0_gamma, model.bn0_beta = arrays["bn0_gamma"], arrays["bn0_beta"]
        model.bn1_gamma, model.bn1_beta = arrays["bn1_gamma"], arrays["bn1_beta"]
        model.bn0_state.running_mean = arrays["bn0_mean"]
        model.bn0_state.running_var = arrays["bn0_var"]
        model.bn1_state.running_mean = arrays["bn1_mean"]
        model.bn1_state.running_var = arrays["bn1_var"]
        return model

    def regularization(self, leaves, vh, vr, vt):
        return None


def factor_reshape(dim):
    """Rows x cols for the ConvE input grid: the most balanced divisor
    pair, rows <= cols."""
    rows = 1
    for r in range(1, int(np.sqrt(dim)) + 1):
        if dim % r == 0:
            rows = r
    return rows, dim // rows


class ConvEModel:
    """Convolution over the stacked head/relation grids.

    Pipeline: stack reshape(vh) over reshape(vr), batchnorm, 3x3
    convolution with 32 channels, relu, dropout, flatten, linear back to
    the embedding width, batchnorm, relu; score against each tail by dot
    product plus a per-entity bias.
    """

    kind = "conve"

    def __init__(self, dim, num_entities, dropout=0.3, reshape_dims=None,
                 rng=None, dtype=np.float32):
        self.dim = dim
        self.num_entities = num_entities
        self.dropout = dropout
        self.dtype = np.dtype(dtype)
        rows, cols = reshape_dims if reshape_dims is not None else factor_reshape(dim)
        if rows * cols != dim:
            raise ValueError(f"reshape {rows}x{cols} does not tile dim {dim}")
        if 2 * rows < CONV_KERNEL or cols < CONV_KERNEL:
            raise ValueError(
                f"dim {dim} gives a {2 * rows}x{cols} stack, too small for a "
                f"{CONV_KERNEL}x{CONV_KERNEL} kernel")
        self.rows, self.cols = rows, cols
        self.conv_h = 2 * rows - CONV_KERNEL + 1
        self.conv_w = cols - CONV_KERNEL + 1
        self.flat = CONV_CHANNELS * self.conv_h * self.conv_w
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = CONV_KERNEL * CONV_KERNEL
        self.kernel = dense_init(rng, fan_in,
                                 (CONV_CHANNELS, 1, CONV_KERNEL, CONV_KERNEL),
                                 self.dtype)
        self.fc = dense_init(rng, self.flat, (self.flat, dim), self.dtype)
        self.tail_bias = np.zeros(num_entities, dtype=self.dtype)
        self.bn_in_gamma = np.ones(1, dtype=self.dtype)
        self.bn_in_beta = np.zeros(1, dtype=self.dtype)
        self.bn_out_gamma = np.ones(dim, dtype=self.dtype)
        self.bn_out_beta = np.zeros(dim, dtype=self.dtype)
        self.bn_in_state = BatchNormState.create(1, dtype=self.dtype)
        self.bn_out_state = BatchNormState.create(dim, dtype=self.dtype)

    @property
    def entity_width(self):
        return self.dim

    @property
    def relation_width(self):
        return self.dim

    def parameters(self):
        return {"kernel": self.kernel, "fc": self.fc, "tail_bias": self.tail_bias,
                "bn_in_gamma": self.bn_in_gamma, "bn_in_beta": self.bn_in_beta,
                "bn_out_gamma": self.bn_out_gamma, "bn_out_beta": self.bn_out_beta}

    def leaves(self, tape):
        return _wrap(self.parameters(), tape)

    def score_all(self, leaves, vh, vr, tails, training=False, rng=None,
                  bias_ids=None, use_bias=True):
        b = vh.value.shape[0]
        grid_h = ad.reshape(vh, (b, 1, self.rows, self.cols))
        grid_r = ad.reshape(vr, (b, 1, self.rows, self.cols))
        x = ad.concat([grid_h, grid_r], axis=2)
        x = ad.batchnorm(x, leaves["bn_in_gamma"], leaves["bn_in_beta"],
                         self.bn_in_state, training)
        x = ad.conv2d(x, leaves["kernel"])
        x = ad.relu(x)
        x = ad.dropout(x, self.dropout, rng, training)
        x = ad.reshape(x, (b, self.flat))
        x = ad.matmul(x, leaves["fc"])
        x = ad.batchnorm(x, leaves["bn_out_gamma"], leaves["bn_out_beta"],
                         self.bn_out_state, training)
        x = ad.relu(x)
        scores = ad.matmul(x, tails, transpose_b=True)
        if use_bias:
            bias = leaves["tail_bias"]
            if bias_ids is not None:
                bias = ad.gather(bias, bias_ids)
            scores = ad.add(scores, bias)
        return scores

    def meta(self):
        return {"kind": self.kind, "dim": self.dim, "dropout": self.dropout,
                "num_entities": self.num_entities,
                "reshape_dims": [self.rows, self.cols]}

    def arrays(self):
        out = dict(self.parameters())
        out["bn_in_mean"] = self.bn_in_state.running_mean
        out["bn_in_var"] = self.bn_in_state.running_var
        out["bn_out_mean"] = self.bn_out_state.running_mean
        out["bn_out_var"] = self.bn_out_state.running_var
        return out

    @classmethod
    def from_arrays(cls, meta, arrays, dtype=np.float32):
        model = cls(meta["dim"], meta["num_entities"], meta["dropout"],
                    reshape_dims=tuple(meta["reshape_dims"]), dtype=dtype)
        model.kernel, model.fc = arrays["kernel"], arrays["fc"]
        model.tail_bias = arrays["tail_bias"]
        model.bn_in_gamma, model.bn_in_beta = arrays["bn_in_gamma"], arrays["bn_in_beta"]
        model.bn_out_gamma, model.bn_out_beta = (arrays["bn_out_gamma"],
                                                 arrays["bn_out_beta"])
        model.bn_in_state.running_mean = arrays["bn_in_mean"]
        model.bn_in_state.running_var = arrays["bn_in_var"]
        model.bn_out_state.running_mean = arrays["bn_out_mean"]
        model.bn_out_state.running_var = arrays["bn_out_var"]
        return model

    def regularization(self, leaves, vh, vr, vt):
        return None


class FiveStarModel:
    """Per-dimension Moebius transform of the head against the tail.

        theta_i(z) = (a_i z + b_i) / (c_i z + d_i)
        score(h, r, t) = sum_i Re(theta_i(h_i) * conj(t_i))

    Denominators with modulus under 1e-6 are clamped (phase preserved) so
    adversarial relations cannot blow the score up to infinity.  Trained
    with a weighted N3 penalty instead of dropout.
    """

    kind = "fivestar"

    def __init__(self, dim, n3_weight=0.0, rng=None, dtype=np.float32):
        self.dim = dim
        self.n3_weight = n3_weight
        self.dtype = np.dtype(dtype)

    @property
    def entity_width(self):
        return 2 * self.dim

    @property
    def relation_width(self):
        return 8 * self.dim

    def parameters(self):
        return {}

    def leaves(self, tape):
        return {}

    def _split_entity(self, v):
        re, im = _split_rows(v, 2, self.dim)
        return ComplexPair(re, im)

    def _split_relation(self, v):
        parts = _split_rows(v, 8, self.dim)
        return [ComplexPair(parts[i], parts[i + 1]) for i in range(0, 8, 2)]

    def transform_head(self, vh, vr):
        """theta(h) for a batch: ComplexPair of [B, d] nodes."""
        h = self._split_entity(vh)
        a, b, c, d = self._split_relation(vr)
        num = ad.complex_mul(a, h)
        num = ComplexPair(ad.add(num.re, b.re), ad.add(num.im, b.im))
        den = ad.complex_mul(c, h)
        den = ComplexPair(ad.add(den.re, d.re), ad.add(den.im, d.im))
        return ad.complex_div(num, den, eps=MOEBIUS_EPS)

    def score_all(self, leaves, vh, vr, tails, training=False, rng=None,
                  bias_ids=None, use_bias=True):
        theta = self.transform_head(vh, vr)
        t_re, t_im = _split_rows(tails, 2, self.dim)
        re_part = ad.matmul(theta.re, t_re, transpose_b=True)
        im_part = ad.matmul(theta.im, t_im, transpose_b=True)
        return ad.add(re_part, im_part)

    def meta(self):
        return {"kind": self.kind, "dim": self.dim, "n3_weight": self.n3_weight}

    def arrays(self):
        return {}

    @classmethod
    def from_arrays(cls, meta, arrays, dtype=np.float32):
        return cls(meta["dim"], meta.get("n3_weight", 0.0), dtype=dtype)

    def regularization(self, leaves, vh, vr, vt):
        if self.n3_weight == 0.0:
            return None
        pairs = [self._split_entity(vh), self._split_entity(vt)]
        pairs.extend(self._split_relation(vr))
        return n3_penalty(pairs, self.n3_weight)


def n3_penalty(pairs, weight) -> ad.Node:
    """weight * sum of |component|^3 over the given complex tensors."""
    total = None
    for p in pairs:
        sq = ad.add(ad.mul(p.re, p.re), ad.mul(p.im, p.im))
        term = ad.reduce_sum(ad.powc(sq, 1.5))
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, weight)


MODEL_KINDS = {m.kind: m for m in (TuckerModel, ConvEModel, FiveStarModel)}


def build_model(kind, dim, num_entities, dropout=0.3, n3_weight=0.0,
                reshape_dims=None, rng=None, dtype=np.float32):
    if kind == "tucker":
        return TuckerModel(dim, dropout, rng=rng, dtype=dtype)
    if kind == "conve":
        return ConvEModel(dim, num_entities, dropout, reshape_dims=reshape_dims,
                          rng=rng, dtype=dtype)
    if kind == "fivestar":
        return FiveStarModel(dim, n3_weight, rng=rng, dtype=dtype)
    raise ValueError(f"unknown model kind {kind!r}")


def transfer_shared(source, target, rng=None):
    """Copy the relation-independent parameters of ``source`` into
    ``target``.

    TuckER moves its core tensor; ConvE moves kernel, projection, and both
    batchnorm sites while the tail bias is drawn fresh (the target KB has
    different entities); 5*E keeps everything in its embeddings, so
    nothing moves.  Mismatched kinds or dimensions are refused.
    """
    if source.kind != target.kind:
        raise TransferError(
            f"cannot transfer {source.kind!r} parameters into a {target.kind!r} model")
    if source.dim != target.dim:
        raise TransferError(
            f"dimension mismatch: source {source.dim}, target {target.dim}")
    if source.kind == "tucker":
        target.core_rht = source.core_rht.copy()
    elif source.kind == "conve":
        if (source.rows, source.cols) != (target.rows, target.cols):
            raise TransferError("reshape grids differ")
        target.kernel = source.kernel.copy()
        target.fc = source.fc.copy()
        target.bn_in_gamma = source.bn_in_gamma.copy()
        target.bn_in_beta = source.bn_in_beta.copy()
        target.bn_out_gamma = source.bn_out_gamma.copy()
        target.bn_out_beta = source.bn_out_beta.copy()
        target.bn_in_state = source.bn_in_state.copy()
        target.bn_out_state = source.bn_out_state.copy()
        rng = rng if rng is not None else np.random.default_rng(0)
        target.tail_bias = embedding_init(rng, (target.num_entities,), target.dtype)
    # fivestar: no shared parameters
    return target
