"""Greedy generation and corpus-level evaluation of a trained model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import EOS, EncodedPair
from .metrics import MetricsReport, evaluate_corpus, strip_special
from .model import ContractError, ModelParams, forward, token_embed
from .response_aware import RaParams, predict_response_aware


@dataclass(frozen=True)
class GenerationConfig:
    max_new_tokens: int = 32
    strategy: str = "greedy"
    stop_token: int = EOS

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.strategy != "greedy":
            raise ValueError(f"unsupported strategy {self.strategy!r}")


def context_slot(context_ids, params: ModelParams, ra_params: RaParams | None) -> T.Tensor:
    """Vectors placed in the context slot at generation time.

    With the response-aware networks this is the predictor's output;
    otherwise the plain word embeddings.
    """
    E_x = token_embed(np.asarray(context_ids, dtype=np.int64), params)
    return E_x if ra_params is None else predict_response_aware(E_x, ra_params)


def generate(
    context_ids: Sequence[int],
    params: ModelParams,
    ra_params: RaParams | None = None,
    config: GenerationConfig = GenerationConfig(),
) -> list[int]:
    """Greedy decoding; the stop token is included when produced."""
    ids = np.asarray(context_ids, dtype=np.int64).reshape(-1)
    if ids.size == 0:
        raise ContractError("generate needs a nonempty context")
    budget = min(config.max_new_tokens, params.config.max_positions - ids.size)
    out: list[int] = []
    with T.no_grad():
        ctx = context_slot(ids, params, ra_params)
        for _ in range(budget):
            resp = token_embed(np.asarray(out, dtype=np.int64), params)
            logits = forward(ctx, resp, params).next_logits.data
            tok = int(np.argmax(logits))
            out.append(tok)
            if tok == config.stop_token:
                break
    return out


def evaluate_model(
    pairs: Sequence[EncodedPair],
    params: ModelParams,
    ra_params: RaParams | None = None,
    config: GenerationConfig = GenerationConfig(),
) -> tuple[MetricsReport, list[list[int]]]:
    generations = [generate(p.context, params, ra_params, config) for p in pairs]
    report = evaluate_corpus(
        [strip_special(g) for g in generations],
        [strip_special(p.response) for p in pairs],
    )
    return report, generations
