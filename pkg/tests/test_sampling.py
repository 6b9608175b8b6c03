import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_batch
from radlab import tensor as T
from radlab.model import ContractError, nll_loss, forward, token_embed
from radlab.sampling import SampleSchedule, candidate_embedding, reconstruct, replace_probability
from radlab.tensor import Tensor

# 1 / (1 + 4 / e), evaluated with mpmath at 30 digits
P_MU4_L4 = 0.404609675191689664821


class ZeroRng:
    def random(self, size=None):
        return np.zeros(size)


def test_first_epoch_probability():
    assert replace_probability(mu=4.0, epoch=0) == 0.2
    assert replace_probability(SampleSchedule(mu=4.0, epoch=0)) == 0.2


def test_probability_at_epoch_four():
    assert replace_probability(mu=4.0, epoch=4) == pytest.approx(P_MU4_L4, abs=1e-12)


def test_probability_limit():
    assert replace_probability(mu=4.0, epoch=100) > 0.9999


@given(st.floats(0.1, 50), st.integers(0, 200))
def test_probability_bounded_and_increasing(mu, l):
    p0, p1 = replace_probability(mu=mu, epoch=l), replace_probability(mu=mu, epoch=l + 1)
    # saturates to 1.0 in double precision once e^(l/mu) dwarfs mu
    assert 0.0 < p0 <= 1.0
    assert p1 >= p0


def test_schedule_validation():
    with pytest.raises(ValueError):
        SampleSchedule(mu=0.0)
    with pytest.raises(ValueError):
        SampleSchedule(K=0)


# ---------------------------------------------------------------- candidates


def brute_force_topk(probs, K):
    return sorted(range(len(probs)), key=lambda i: (-probs[i], i))[:K]


def test_candidate_k1_is_argmax_row(rng):
    table = rng.normal(size=(6, 3))
    probs = np.array([0.1, 0.1, 0.5, 0.1, 0.1, 0.1])
    np.testing.assert_array_equal(candidate_embedding(probs, table, 1), table[2])


def test_candidate_k_equals_v_is_column_mean(rng):
    table = rng.normal(size=(5, 3))
    probs = rng.dirichlet(np.ones(5))
    np.testing.assert_allclose(candidate_embedding(probs, table, 5), table.mean(axis=0), atol=1e-15)


def test_candidate_tie_broken_by_lower_id(rng):
    table = rng.normal(size=(5, 4))
    probs = [0.1, 0.4, 0.05, 0.4, 0.05]
    assert brute_force_topk(probs, 2) == [1, 3]
    np.testing.assert_allclose(candidate_embedding(probs, table, 2), (table[1] + table[3]) / 2, atol=1e-15)


def test_candidate_matches_brute_force_on_random_ties(rng):
    table = rng.normal(size=(8, 3))
    for _ in range(50):
        probs = rng.integers(0, 4, size=8).astype(float)
        probs /= probs.sum() or 1.0
        K = int(rng.integers(1, 9))
        want = table[brute_force_topk(list(probs), K)].mean(axis=0)
        np.testing.assert_allclose(candidate_embedding(probs, table, K), want, atol=1e-14)


def test_candidate_k_larger_than_vocab():
    with pytest.raises(ContractError):
        candidate_embedding(np.full(3, 1 / 3), np.zeros((3, 2)), 4)


def test_candidate_is_constant(tiny_params):
    probs = Tensor(np.full(11, 1 / 11), requires_grad=True)
    out = candidate_embedding(probs, tiny_params["tok_emb"], 3)
    assert isinstance(out, np.ndarray)


# ---------------------------------------------------------------- reconstruct


def _single(params):
    return token_embed([5, 6, 2], params), token_embed([7, 8, 9, 3], params)


def test_no_replacement_limit(tiny_params):
    E_x, E_y = _single(tiny_params)
    rec = reconstruct(E_x, E_y, tiny_params, SampleSchedule(K=2, mu=1e12, epoch=0, rng=np.random.default_rng(0)))
    assert not rec.replaced_mask.any()
    np.testing.assert_array_equal(rec.E_r.data, E_y.data)


def test_all_replacement_limit(tiny_params):
    E_x, E_y = _single(tiny_params)
    rec = reconstruct(E_x, E_y, tiny_params, SampleSchedule(K=2, mu=4.0, rng=ZeroRng()))
    assert rec.replaced_mask.all()
    with T.no_grad():
        probs = forward(E_x, E_y, tiny_params).probs.data
    for t in range(4):
        np.testing.assert_array_equal(rec.E_r.data[t], candidate_embedding(probs[t], tiny_params["tok_emb"], 2))


def test_replaced_mask_follows_rng_trace(tiny_params):
    E_x, E_y = _single(tiny_params)
    sched = SampleSchedule(K=3, mu=4.0, epoch=2, rng=np.random.default_rng(99))
    rec = reconstruct(E_x, E_y, tiny_params, sched)
    p = 1.0 / (1.0 + 4.0 / math.exp(2 / 4.0))
    trace = np.random.default_rng(99)
    expected = [trace.random() < p for _ in range(4)]
    assert rec.replaced_mask.tolist() == expected
    for t in range(4):
        if not expected[t]:
            np.testing.assert_array_equal(rec.E_r.data[t], E_y.data[t])


def test_replacement_fraction_converges_to_p(tiny_params):
    rng = np.random.default_rng(2024)
    sched = SampleSchedule(K=2, mu=4.0, epoch=3, rng=rng)
    p = replace_probability(sched)
    batch = make_batch(np.random.default_rng(0), 11, [(2, 10)] * 1000)
    E_x = token_embed(batch.context, tiny_params)
    E_y = token_embed(batch.response, tiny_params)
    rec = reconstruct(E_x, E_y, tiny_params, sched, context_mask=batch.context_mask, response_mask=batch.response_mask)
    n = rec.replaced_mask.size
    assert n == 10_000
    sigma = math.sqrt(p * (1 - p) / n)
    assert abs(rec.replaced_mask.mean() - p) < 3 * sigma


def test_padding_positions_never_replaced(tiny_params):
    batch = make_batch(np.random.default_rng(3), 11, [(2, 1), (3, 5)])
    E_x = token_embed(batch.context, tiny_params)
    E_y = token_embed(batch.response, tiny_params)
    rec = reconstruct(E_x, E_y, tiny_params, SampleSchedule(K=1, rng=ZeroRng()),
                      context_mask=batch.context_mask, response_mask=batch.response_mask)
    assert rec.replaced_mask.tolist() == batch.response_mask.tolist()


def test_stage_one_contributes_no_gradient(tiny_params):
    E_x, E_y = _single(tiny_params)
    rec = reconstruct(E_x, E_y, tiny_params, SampleSchedule(K=2, epoch=6, rng=np.random.default_rng(5)))
    assert rec.replaced_mask.any() and not rec.replaced_mask.all()

    def grads(E_r):
        T.zero_grad(tiny_params)
        out = forward(E_x, E_r, tiny_params)
        nll_loss(out.probs, [7, 8, 9, 3]).backward()
        return {k: (v.grad.copy() if v.grad is not None else None) for k, v in tiny_params.named()}

    via_sampling = grads(rec.E_r)
    # same rows, with stage 1 replaced by frozen constants
    full = np.broadcast_to(rec.replaced_mask[:, None], E_y.shape)
    ablated = grads(T.where(full, Tensor(rec.candidates.copy()), E_y))
    for k in via_sampling:
        np.testing.assert_array_equal(via_sampling[k], ablated[k])
