"""Scheduled sampling for a model that reads the whole response at once.

Stage 1 runs the model teacher-forced with gradients off and turns each
response position's distribution into a candidate embedding (the plain mean
of the K most probable words' embeddings). Stage 2 swaps each ground-truth
row for its candidate with probability ``p``, which grows with the epoch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import ContractError, ModelParams, forward
from .tensor import Tensor


@dataclass
class SampleSchedule:
    K: int = 5
    mu: float = 4.0
    epoch: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def __post_init__(self):
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if not self.mu > 0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        if self.epoch < 0:
            raise ValueError(f"epoch must be nonnegative, got {self.epoch}")


def replace_probability(sched: SampleSchedule | None = None, *, mu: float | None = None, epoch: int | None = None) -> float:
    """p = 1 / (1 + mu / exp(epoch / mu))."""
    if sched is not None:
        mu = sched.mu if mu is None else mu
        epoch = sched.epoch if epoch is None else epoch
    if mu is None or epoch is None:
        raise TypeError("replace_probability needs a schedule or both mu and epoch")
    if not mu > 0:
        raise ValueError(f"mu must be positive, got {mu}")
    # written with exp(-l/mu) so long schedules underflow to p = 1 instead of overflowing
    return 1.0 / (1.0 + mu * math.exp(-epoch / mu))


def top_k_ids(probs: np.ndarray, K: int) -> np.ndarray:
    """Ids of the K most probable tokens along the last axis; ties go to the lower id."""
    V = probs.shape[-1]
    if K > V:
        raise ContractError(f"K={K} exceeds vocabulary size {V}")
    order = np.argsort(-probs, axis=-1, kind="stable")
    return order[..., :K]


def candidate_embedding(probs_row, table, K: int) -> np.ndarray:
    """Uniform mean of the embedding rows of the K most probable tokens.

    Works on a single distribution (V,) or a stack (..., V). The result is a
    plain array: candidates enter the graph as constants.
    """
    probs = probs_row.data if isinstance(probs_row, Tensor) else np.asarray(probs_row, dtype=float)
    tab = table.data if isinstance(table, Tensor) else np.asarray(table, dtype=float)
    ids = top_k_ids(probs, K)
    return tab[ids].mean(axis=-2)


@dataclass
class ReconstructedResponse:
    E_r: Tensor
    replaced_mask: np.ndarray
    candidates: np.ndarray

    def apply(self, E_y: Tensor) -> Tensor:
        """Rebuild E_r from a fresh E_y with the same replacements."""
        return _assemble(E_y, self.candidates, self.replaced_mask)


def _assemble(E_y: Tensor, candidates: np.ndarray, replaced: np.ndarray) -> Tensor:
    if not replaced.any():
        return E_y
    full = np.broadcast_to(replaced[..., None], E_y.shape)
    return T.where(full, Tensor(candidates), E_y)


def reconstruct(
    E_x: Tensor,
    E_y: Tensor,
    params: ModelParams,
    sched: SampleSchedule,
    *,
    context_mask: np.ndarray | None = None,
    response_mask: np.ndarray | None = None,
    p: float | None = None,
) -> ReconstructedResponse:
    """Two-stage response reconstruction.

    One uniform draw per response position, in row-major order, from
    ``sched.rng``; a position is replaced when the draw is below ``p``.
    Padding positions consume a draw but are never replaced.
    """
    p = replace_probability(sched) if p is None else p
    with T.no_grad():
        out = forward(E_x.detach(), E_y.detach(), params, context_mask=context_mask, response_mask=response_mask)
        candidates = candidate_embedding(out.probs, params["tok_emb"], sched.K)
    draws = np.asarray(sched.rng.random(E_y.shape[:-1]), dtype=float).reshape(E_y.shape[:-1])
    replaced = draws < p
    if response_mask is not None:
        replaced &= np.asarray(response_mask, dtype=bool).reshape(replaced.shape)
    return ReconstructedResponse(_assemble(E_y, candidates, replaced), replaced, candidates)
