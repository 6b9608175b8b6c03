"""Response-aware network, its context-only predictor, and their losses.

The response-aware vectors are context-aligned: each context row queries the
(reconstructed) response rows, so the output has one row per context word.
The predictor is a per-row feedforward net that must learn to produce the
same vectors from the context alone, because no response exists at
generation time.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import ParamSet, attention, linear
from .tensor import Tensor


@dataclass(frozen=True)
class RaConfig:
    embed_dim: int = 64
    n_heads: int = 4
    hidden_dim: int = 128
    init_std: float = 0.02

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")

    @classmethod
    def for_embed_dim(cls, L: int, n_heads: int = 4, hidden_dim: int | None = None) -> RaConfig:
        return cls(embed_dim=L, n_heads=n_heads, hidden_dim=hidden_dim or 2 * L)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class RaParams(ParamSet):
    config: RaConfig


def init_ra_params(config: RaConfig, rng: np.random.Generator) -> RaParams:
    L, H, std = config.embed_dim, config.hidden_dim, config.init_std
    p: dict[str, Tensor] = {}
    for name in ("q", "k", "v", "o"):
        p[f"ra.w{name}"] = Tensor(rng.normal(0.0, std, size=(L, L)), requires_grad=True)
        p[f"ra.b{name}"] = Tensor(np.zeros(L), requires_grad=True)
    # predictor starts near the identity scale of word embeddings
    p["pred.w1"] = Tensor(rng.normal(0.0, 1.0 / math.sqrt(L), size=(L, H)), requires_grad=True)
    p["pred.b1"] = Tensor(np.zeros(H), requires_grad=True)
    p["pred.w2"] = Tensor(rng.normal(0.0, 1.0 / math.sqrt(H), size=(H, L)), requires_grad=True)
    p["pred.b2"] = Tensor(np.zeros(L), requires_grad=True)
    for k, v in p.items():
        v.name = k
    return RaParams(config, p)


def _batched(*ts: Tensor):
    single = ts[0].ndim == 2
    if single:
        ts = tuple(T.reshape(t, (1,) + t.shape) for t in ts)
    return single, ts


def response_aware(
    E_r: Tensor,
    E_x: Tensor,
    params: RaParams,
    *,
    response_mask: np.ndarray | None = None,
    return_weights: bool = False,
):
    """Context rows attend over response rows; returns one row per context word.

    No causal mask: the whole response is visible here during training.
    """
    if E_r.shape[-1] != E_x.shape[-1] or E_r.ndim != E_x.ndim or E_r.ndim == 3 and E_r.shape[0] != E_x.shape[0]:
        raise T.DimensionError(f"response_aware: E_r {E_r.shape} vs E_x {E_x.shape}")
    single, (r, x) = _batched(E_r, E_x)
    B, m, _ = x.shape
    n = r.shape[1]
    if n == 0:
        raise T.DimensionError("response_aware needs at least one response row")
    keys_ok = np.ones((B, n), dtype=bool) if response_mask is None else np.asarray(response_mask, dtype=bool).reshape(B, n)
    mask = np.broadcast_to(keys_ok[:, None, :], (B, m, n))
    out, weights = attention(x, r, params, "ra.", params.config.n_heads, mask, return_weights=True)
    if single:
        out, weights = out[0], weights[0]
    return (out, weights) if return_weights else out


def predict_response_aware(E_x: Tensor, params: RaParams) -> Tensor:
    """Per-position one-hidden-layer feedforward estimate of the response-aware rows."""
    h = T.gelu(linear(E_x, params["pred.w1"], params["pred.b1"]))
    return linear(h, params["pred.w2"], params["pred.b2"])


def merge(E_ra: Tensor, E_ra_pred: Tensor, lam: float) -> Tensor:
    """lam * E_ra + (1 - lam) * E_ra_pred."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda {lam} outside [0, 1]")
    if E_ra.shape != E_ra_pred.shape:
        raise T.DimensionError(f"merge: {E_ra.shape} vs {E_ra_pred.shape}")
    return T.add(T.scale(E_ra, lam), T.scale(E_ra_pred, 1.0 - lam))


def ra_loss(E_ra_pred: Tensor, E_ra, row_mask: np.ndarray | None = None) -> Tensor:
    """Mean squared deviation of the prediction from the response-aware target.

    The target is treated as a constant: no gradient reaches whatever produced
    it. ``row_mask`` (True = real context row) excludes padded rows; the mean
    runs over the kept rows times the embedding width.
    """
    target = E_ra.data if isinstance(E_ra, Tensor) else np.asarray(E_ra, dtype=float)
    if E_ra_pred.shape != target.shape:
        raise T.DimensionError(f"ra_loss: {E_ra_pred.shape} vs {target.shape}")
    sq = T.square(T.sub(E_ra_pred, Tensor(target)))
    L = target.shape[-1]
    if row_mask is None:
        return T.mean(sq)
    keep = np.asarray(row_mask, dtype=bool).reshape(target.shape[:-1])
    rows = int(keep.sum())
    if rows == 0:
        raise ValueError("ra_loss: no real context rows")
    full = np.broadcast_to(keep[..., None], sq.shape)
    masked = T.where(full, sq, Tensor(np.zeros(sq.shape)))
    return T.scale(T.tsum(masked), 1.0 / (rows * L))


def total_loss(loss_M, loss_RA, gamma: float):
    """gamma * loss_M + (1 - gamma) * loss_RA, for tensors or plain floats."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma {gamma} outside [0, 1]")
    if isinstance(loss_M, Tensor) or isinstance(loss_RA, Tensor):
        return T.add(T.scale(T._as_tensor(loss_M), gamma), T.scale(T._as_tensor(loss_RA), 1.0 - gamma))
    return gamma * loss_M + (1.0 - gamma) * loss_RA


@dataclass
class RaBundle:
    E_ra: Tensor
    E_ra_pred: Tensor
    E_m: Tensor
    lam: float


@dataclass
class LossBreakdown:
    loss_M: float
    loss_RA: float
    gamma: float
    loss_total: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)
