"""Decoder-only transformer over concatenated context/response embeddings.

The model consumes *token-space* vectors for the context slot and the
response slot. Learned position embeddings are added inside :func:`forward`,
so a context slot filled with merged response-aware vectors gets positions
exactly like plain word embeddings would.

Response token ``y_t`` is predicted from the hidden state one row before it
(the last context row predicts ``y_1``), which is what keeps the causal mask
honest when the ground-truth response is fed in as input.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class VocabularyError(ValueError):
    pass


class CapacityError(ValueError):
    pass


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 2000
    embed_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ff_dim: int = 256
    max_positions: int = 128
    dropout_rate: float = 0.0
    init_std: float = 0.02

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if min(self.vocab_size, self.embed_dim, self.n_layers, self.n_heads, self.ff_dim, self.max_positions) < 1:
            raise ValueError("model dimensions must be positive")
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ValueError(f"dropout_rate {self.dropout_rate} outside [0, 1]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class ParamSet:
    """Ordered name -> Tensor mapping shared by the model and the RA networks."""

    def __init__(self, config, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def __len__(self):
        return len(self.tensors)

    def named(self):
        return self.tensors.items()

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self):
        return type(self)(self.config, {k: Tensor(v.data, requires_grad=v.requires_grad) for k, v in self.tensors.items()})


class ModelParams(ParamSet):
    config: ModelConfig


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    L, V, F, std = config.embed_dim, config.vocab_size, config.ff_dim, config.init_std
    # residual projections are scaled down with depth
    resid_std = std / math.sqrt(2 * config.n_layers)

    def normal(*shape, s=std):
        return Tensor(rng.normal(0.0, s, size=shape), requires_grad=True)

    def const(value, *shape):
        return Tensor(np.full(shape, value), requires_grad=True)

    p: dict[str, Tensor] = {
        "tok_emb": normal(V, L),
        "pos_emb": normal(config.max_positions, L),
    }
    for i in range(config.n_layers):
        pre = f"layers.{i}."
        p[pre + "ln1.g"] = const(1.0, L)
        p[pre + "ln1.b"] = const(0.0, L)
        for name in ("q", "k", "v"):
            p[pre + f"attn.w{name}"] = normal(L, L)
            p[pre + f"attn.b{name}"] = const(0.0, L)
        p[pre + "attn.wo"] = normal(L, L, s=resid_std)
        p[pre + "attn.bo"] = const(0.0, L)
        p[pre + "ln2.g"] = const(1.0, L)
        p[pre + "ln2.b"] = const(0.0, L)
        p[pre + "ff.w1"] = normal(L, F)
        p[pre + "ff.b1"] = const(0.0, F)
        p[pre + "ff.w2"] = normal(F, L, s=resid_std)
        p[pre + "ff.b2"] = const(0.0, L)
    p["ln_f.g"] = const(1.0, L)
    p["ln_f.b"] = const(0.0, L)
    p["out.W"] = normal(L, V)
    p["out.b"] = const(0.0, V)
    for k, v in p.items():
        v.name = k
    return ModelParams(config, p)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = T.matmul(x, w)
    return y if b is None else T.add(y, b)


def attention(
    queries: Tensor,
    keys: Tensor,
    params: ParamSet,
    prefix: str,
    n_heads: int,
    mask: np.ndarray | None = None,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
    return_weights: bool = False,
):
    """Multi-head scaled dot-product attention on batched (B, T, L) inputs.

    ``keys`` supplies both keys and values. ``mask`` has shape (B, Tq, Tk),
    True where attention is allowed.
    """
    B, Tq, L = queries.shape
    Tk = keys.shape[1]
    d = L // n_heads
    q = linear(queries, params[prefix + "wq"], params[prefix + "bq"])
    k = linear(keys, params[prefix + "wk"], params[prefix + "bk"])
    v = linear(keys, params[prefix + "wv"], params[prefix + "bv"])
    q = T.permute(T.reshape(q, (B, Tq, n_heads, d)), (0, 2, 1, 3))
    k = T.permute(T.reshape(k, (B, Tk, n_heads, d)), (0, 2, 3, 1))
    v = T.permute(T.reshape(v, (B, Tk, n_heads, d)), (0, 2, 1, 3))
    scores = T.scale(T.matmul(q, k), 1.0 / math.sqrt(d))
    weights = T.softmax(scores, None if mask is None else mask[:, None, :, :])
    weights_used = T.dropout(weights, dropout_rate, rng)
    ctx = T.permute(T.matmul(weights_used, v), (0, 2, 1, 3))
    out = linear(T.reshape(ctx, (B, Tq, L)), params[prefix + "wo"], params[prefix + "bo"])
    if return_weights:
        return out, weights
    return out


def _block(h: Tensor, params: ModelParams, i: int, mask, dropout_rate, rng) -> Tensor:
    pre = f"layers.{i}."
    a = T.layer_norm(h, params[pre + "ln1.g"], params[pre + "ln1.b"])
    h = T.add(h, attention(a, a, params, pre + "attn.", params.config.n_heads, mask, dropout_rate, rng))
    f = T.layer_norm(h, params[pre + "ln2.g"], params[pre + "ln2.b"])
    f = linear(T.gelu(linear(f, params[pre + "ff.w1"], params[pre + "ff.b1"])), params[pre + "ff.w2"], params[pre + "ff.b2"])
    return T.add(h, T.dropout(f, dropout_rate, rng))


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------


def _check_ids(ids: np.ndarray, vocab_size: int) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        bad = ids[(ids < 0) | (ids >= vocab_size)][0]
        raise VocabularyError(f"token id {bad} outside vocabulary of size {vocab_size}")
    return ids


def token_embed(ids, params: ModelParams) -> Tensor:
    """Word embeddings only (no positions); works for any ids shape."""
    ids = _check_ids(ids, params.config.vocab_size)
    if ids.size == 0:
        return Tensor(np.zeros(ids.shape + (params.config.embed_dim,)))
    return T.embedding(params["tok_emb"], ids)


def embed(tokens, params: ModelParams, offset: int = 0) -> Tensor:
    """Token rows plus position rows starting at absolute position ``offset``."""
    ids = _check_ids(tokens, params.config.vocab_size).reshape(-1)
    if ids.size == 0:
        return Tensor(np.zeros((0, params.config.embed_dim)))
    if offset + ids.size > params.config.max_positions:
        raise CapacityError(f"positions up to {offset + ids.size} exceed max_positions {params.config.max_positions}")
    pos = np.arange(offset, offset + ids.size)
    return T.add(T.embedding(params["tok_emb"], ids), T.embedding(params["pos_emb"], pos))


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


@dataclass
class ForwardOutput:
    hidden: Tensor  # (.., m+n, L)
    logits: Tensor  # (.., n, V), row t predicts response token t
    probs: Tensor  # (.., n, V)
    next_logits: Tensor  # (.., V) from the last real position


def causal_mask(valid: np.ndarray) -> np.ndarray:
    """(B, T) validity -> (B, T, T) mask: causal, pads hidden from real queries.

    A pad query keeps its own diagonal so its softmax row is never empty.
    """
    B, Tn = valid.shape
    tri = np.tril(np.ones((Tn, Tn), dtype=bool))
    allowed = tri[None] & valid[:, None, :]
    allowed |= np.eye(Tn, dtype=bool)[None]
    return allowed


def forward(
    context_vectors: Tensor,
    response_vectors: Tensor,
    params: ModelParams,
    config: ModelConfig | None = None,
    *,
    context_mask: np.ndarray | None = None,
    response_mask: np.ndarray | None = None,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> ForwardOutput:
    """Run the stacked masked self-attention blocks over [context; response].

    Accepts (m, L)/(n, L) for a single example or (B, m, L)/(B, n, L) for a
    batch. In a batch, contexts must be left-padded and responses
    right-padded; masks are True on real positions.
    """
    config = config or params.config
    single = context_vectors.ndim == 2
    if single:
        context_vectors = T.reshape(context_vectors, (1,) + context_vectors.shape)
        response_vectors = T.reshape(response_vectors, (1,) + response_vectors.shape)
    B, m, L = context_vectors.shape
    n = response_vectors.shape[1]
    if response_vectors.shape[0] != B or response_vectors.shape[2] != L or L != config.embed_dim:
        raise T.DimensionError(f"forward: context {context_vectors.shape} vs response {response_vectors.shape}")
    if m < 1:
        raise ContractError("forward needs at least one context position")
    if m + n > config.max_positions:
        raise CapacityError(f"sequence length {m + n} exceeds max_positions {config.max_positions}")
    cmask = np.ones((B, m), dtype=bool) if context_mask is None else np.asarray(context_mask, dtype=bool).reshape(B, m)
    rmask = np.ones((B, n), dtype=bool) if response_mask is None else np.asarray(response_mask, dtype=bool).reshape(B, n)
    if not cmask[:, -1].all():
        raise ContractError("contexts must be left-padded (last context position real)")

    valid = np.concatenate([cmask, rmask], axis=1)
    positions = np.maximum(np.cumsum(valid, axis=1) - 1, 0)
    seq = T.concat([context_vectors, response_vectors], axis=1) if n else context_vectors
    h = T.add(seq, T.embedding(params["pos_emb"], positions))
    mask = causal_mask(valid)
    drop = config.dropout_rate if train else 0.0
    for i in range(config.n_layers):
        h = _block(h, params, i, mask, drop, rng)
    hidden = T.layer_norm(h, params["ln_f.g"], params["ln_f.b"])

    W, b = params["out.W"], params["out.b"]
    logits = linear(hidden[:, m - 1 : m + n - 1, :], W, b)
    probs = T.softmax(logits)
    last = valid.shape[1] - 1 - np.argmax(valid[:, ::-1], axis=1)
    next_logits = linear(hidden[np.arange(B), last, :], W, b)

    if single:
        return ForwardOutput(hidden[0], logits[0], probs[0], next_logits[0])
    return ForwardOutput(hidden, logits, probs, next_logits)


def nll_loss(probs: Tensor, targets, pad_mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over non-pad positions."""
    targets = np.asarray(targets, dtype=np.int64)
    if probs.shape[:-1] != targets.shape:
        raise T.DimensionError(f"nll_loss: probs {probs.shape} vs targets {targets.shape}")
    _check_ids(targets, probs.shape[-1])
    keep = np.ones(targets.shape, dtype=bool) if pad_mask is None else np.asarray(pad_mask, dtype=bool)
    count = int(keep.sum())
    if count == 0:
        raise ContractError("nll_loss: every position is padding")
    where = np.nonzero(keep)
    picked = probs[where + (targets[where],)]
    return T.scale(T.tsum(T.log(picked, floor=1e-12)), -1.0 / count)
