import math

import numpy as np
import pytest

from conftest import make_batch
from oracles import transformer_logits_loops
from radlab import tensor as T
from radlab.model import (
    CapacityError,
    ContractError,
    ModelConfig,
    VocabularyError,
    embed,
    forward,
    init_params,
    nll_loss,
    token_embed,
)
from radlab.tensor import Tensor


def test_embed_empty_sequence(tiny_params):
    assert embed([], tiny_params).shape == (0, 8)


def test_embed_single_token_adds_position_zero(tiny_params):
    out = embed([6], tiny_params).data
    np.testing.assert_array_equal(out[0], tiny_params["tok_emb"].data[6] + tiny_params["pos_emb"].data[0])


def test_embed_offset_follows_concatenation(tiny_params):
    ctx = embed([5, 6, 2], tiny_params).data
    resp = embed([7, 3], tiny_params, offset=3).data
    whole = embed([5, 6, 2, 7, 3], tiny_params).data
    np.testing.assert_array_equal(np.vstack([ctx, resp]), whole)


def test_embed_rejects_out_of_vocab(tiny_params):
    with pytest.raises(VocabularyError):
        embed([11], tiny_params)


def test_forward_shapes():
    cfg = ModelConfig(vocab_size=7, embed_dim=4, n_layers=1, n_heads=2, ff_dim=8, max_positions=8)
    P = init_params(cfg, np.random.default_rng(0))
    out = forward(token_embed([5, 6, 2], P), token_embed([4, 3], P), P)
    assert out.hidden.shape == (5, 4)
    assert out.probs.shape == (2, 7)
    assert out.next_logits.shape == (7,)
    np.testing.assert_allclose(out.probs.data.sum(axis=1), 1.0, atol=1e-9)


def test_forward_logits_are_projection_of_hidden(tiny_params):
    out = forward(token_embed([5, 6, 2], tiny_params), token_embed([7, 8, 3], tiny_params), tiny_params)
    H = out.hidden.data
    expected = H[2:5] @ tiny_params["out.W"].data + tiny_params["out.b"].data
    np.testing.assert_allclose(out.logits.data, expected, rtol=0, atol=1e-13)


def test_forward_capacity_error(tiny_params):
    with pytest.raises(CapacityError):
        forward(token_embed([5] * 10, tiny_params), token_embed([6] * 7, tiny_params), tiny_params)


def test_single_head_single_layer_matches_scalar_oracle():
    cfg = ModelConfig(vocab_size=9, embed_dim=6, n_layers=1, n_heads=1, ff_dim=10, max_positions=10, init_std=0.4)
    P = init_params(cfg, np.random.default_rng(42))
    # nontrivial layer-norm affine terms
    rng = np.random.default_rng(1)
    for name, t in P.named():
        if name.endswith((".g", ".b", "bq", "bk", "bv", "bo", "b1", "b2")):
            t.data[...] = rng.normal(0.5 if name.endswith(".g") else 0.0, 0.3, size=t.shape)
    ctx, resp = token_embed([5, 7, 2], P), token_embed([6, 8, 3], P)
    got = forward(ctx, resp, P).logits.data
    want = transformer_logits_loops(ctx.data.tolist(), resp.data.tolist(), P)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-10)


def test_multi_head_two_layer_matches_scalar_oracle():
    cfg = ModelConfig(vocab_size=9, embed_dim=8, n_layers=2, n_heads=4, ff_dim=10, max_positions=10, init_std=0.4)
    P = init_params(cfg, np.random.default_rng(3))
    ctx, resp = token_embed([5, 2], P), token_embed([6, 7, 3], P)
    got = forward(ctx, resp, P).logits.data
    want = transformer_logits_loops(ctx.data.tolist(), resp.data.tolist(), P)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-10)


def test_perturbing_response_token_leaves_earlier_logits_unchanged(tiny_params, rng):
    ctx = token_embed([5, 6, 2], tiny_params)
    resp_ids = np.array([7, 8, 9, 3])
    base = forward(ctx, token_embed(resp_ids, tiny_params), tiny_params).logits.data
    for j in range(len(resp_ids)):
        noisy = token_embed(resp_ids, tiny_params).data.copy()
        noisy[j] = rng.normal(size=8) * 5
        out = forward(ctx, Tensor(noisy), tiny_params).logits.data
        # logits row t reads positions up to m - 1 + t, so rows t <= j are untouched
        np.testing.assert_array_equal(out[: j + 1], base[: j + 1])
        assert not np.array_equal(out[j + 1 :], base[j + 1 :]) or j == len(resp_ids) - 1


def test_batched_forward_matches_per_example(tiny_params, rng):
    batch = make_batch(rng, 11, [(3, 2), (5, 4), (1, 3)])
    E_x = token_embed(batch.context, tiny_params)
    E_y = token_embed(batch.response, tiny_params)
    out = forward(E_x, E_y, tiny_params, context_mask=batch.context_mask, response_mask=batch.response_mask)
    for b in range(3):
        ctx = batch.context[b][batch.context_mask[b]]
        resp = batch.response[b][batch.response_mask[b]]
        single = forward(token_embed(ctx, tiny_params), token_embed(resp, tiny_params), tiny_params)
        np.testing.assert_allclose(out.logits.data[b, : len(resp)], single.logits.data, rtol=0, atol=1e-12)
        np.testing.assert_allclose(out.next_logits.data[b], single.next_logits.data, rtol=0, atol=1e-12)


def test_right_padded_context_rejected(tiny_params):
    E = token_embed(np.array([[5, 6, 0]]), tiny_params)
    with pytest.raises(ContractError):
        forward(E, token_embed(np.array([[7]]), tiny_params), tiny_params, context_mask=np.array([[1, 1, 0]]))


def test_forward_deterministic_without_dropout(tiny_params):
    a = forward(token_embed([5, 2], tiny_params), token_embed([6, 3], tiny_params), tiny_params)
    b = forward(token_embed([5, 2], tiny_params), token_embed([6, 3], tiny_params), tiny_params)
    np.testing.assert_array_equal(a.logits.data, b.logits.data)


def test_dropout_only_in_training_mode(tiny_config):
    cfg = ModelConfig(**{**tiny_config.to_dict(), "dropout_rate": 0.5})
    P = init_params(cfg, np.random.default_rng(0))
    args = (token_embed([5, 2], P), token_embed([6, 3], P), P)
    ev = forward(*args, rng=np.random.default_rng(1)).logits.data
    np.testing.assert_array_equal(ev, forward(*args).logits.data)
    tr = forward(*args, train=True, rng=np.random.default_rng(1)).logits.data
    assert not np.array_equal(tr, ev)


# ---------------------------------------------------------------- loss


def test_nll_zero_for_certain_targets():
    probs = Tensor(np.eye(4)[[2, 0, 3]])
    assert nll_loss(probs, [2, 0, 3]).item() == 0.0


def test_nll_uniform_is_log_v():
    assert nll_loss(Tensor(np.full((5, 8), 1 / 8)), [1, 2, 3, 4, 5]).item() == pytest.approx(math.log(8), abs=1e-12)
    assert math.log(8) == pytest.approx(2.0794, abs=1e-4)


def test_nll_matches_direct_sum_with_padding(rng):
    logits = rng.normal(size=(2, 4, 6))
    probs = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    targets = rng.integers(0, 6, size=(2, 4))
    mask = np.array([[1, 1, 1, 0], [1, 1, 0, 0]], dtype=bool)
    want = 0.0
    count = 0
    for b in range(2):
        for t in range(4):
            if mask[b, t]:
                want -= math.log(probs[b, t, targets[b, t]])
                count += 1
    assert nll_loss(Tensor(probs), targets, mask).item() == pytest.approx(want / count, abs=1e-12)


def test_nll_all_padded_is_contract_error():
    with pytest.raises(ContractError):
        nll_loss(Tensor(np.full((2, 3), 1 / 3)), [0, 1], np.zeros(2, dtype=bool))


def test_nll_gradient_through_model(tiny_config):
    P = init_params(tiny_config, np.random.default_rng(5))
    tensors = [P["out.W"], P["layers.0.attn.wq"], P["tok_emb"]]

    def f():
        out = forward(token_embed([5, 2], P), token_embed([6, 3], P), P)
        return nll_loss(out.probs, [6, 3])

    assert T.grad_check(f, tensors) < 1e-5
