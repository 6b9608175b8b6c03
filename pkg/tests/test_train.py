import dataclasses
import json
import math
from pathlib import Path

import numpy as np
import pytest

from conftest import make_batch
from radlab import tensor as T
from radlab.data import EncodedPair
from radlab.decode import GenerationConfig
from radlab.model import ModelConfig, init_params
from radlab.response_aware import RaConfig, init_ra_params
from radlab.sampling import SampleSchedule
from radlab.tensor import Tensor
from radlab.train import (
    VARIANTS,
    Adam,
    LambdaSchedule,
    TrainConfig,
    TrainingDiverged,
    adam_update,
    compute_losses,
    lambda_at,
    run_ablation,
    train,
    train_step,
)

GOLDEN = Path(__file__).parent / "golden" / "train_step.json"


# ---------------------------------------------------------------- Adam


def test_adam_zero_gradient_is_a_no_op():
    w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    w.grad = np.zeros(2)
    opt = adam_update([w], lr=0.1)
    np.testing.assert_array_equal(w.data, [1.0, -2.0])
    assert not opt.m[0].any() and not opt.v[0].any()


def test_adam_first_step_size():
    w = Tensor(np.array([0.0]), requires_grad=True)
    w.grad = np.array([1.0])
    adam_update([w], lr=0.1)
    # m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
    assert w.data[0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)


def test_adam_quadratic_bowl():
    w = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adam([w], lr=0.05)
    for _ in range(2000):
        opt.zero_grad()
        T.square(T.sub(w, 3.0)).backward(np.ones(1))
        opt.step()
    assert abs(w.data[0] - 3.0) < 1e-3


def test_adam_nan_gradient_aborts():
    w = Tensor(np.array([0.0]), requires_grad=True)
    w.grad = np.array([np.nan])
    with pytest.raises(TrainingDiverged):
        Adam([w], 0.1).step()


# ---------------------------------------------------------------- lambda schedule


def test_lambda_schedule_points():
    s = LambdaSchedule(100, 0.2)
    assert lambda_at(0, s) == 1.0
    assert lambda_at(100, s) == 0.2
    assert lambda_at(10_000, s) == 0.2
    assert lambda_at(50, s) == pytest.approx(0.6, abs=1e-15)


def test_lambda_schedule_nonincreasing():
    s = LambdaSchedule(37, 0.2)
    vals = [lambda_at(i, s) for i in range(100)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    assert min(vals) == 0.2


# ---------------------------------------------------------------- one step


@pytest.fixture
def toy():
    cfg = ModelConfig(vocab_size=11, embed_dim=8, n_layers=1, n_heads=2, ff_dim=12, max_positions=16)
    batch = make_batch(np.random.default_rng(21), 11, [(3, 2), (4, 4), (2, 3)])
    return cfg, batch


def _golden_breakdown(cfg, batch, variant):
    use_ss, use_ra = VARIANTS[variant]
    tc = TrainConfig(learning_rate=1e-2, use_ss=use_ss, use_ra=use_ra, K=2)
    P = init_params(cfg, np.random.default_rng(0))
    R = init_ra_params(tc.ra_config(cfg.embed_dim), np.random.default_rng(1))
    opt = Adam(list(P) + (list(R) if use_ra else []), tc.learning_rate)
    sched = SampleSchedule(tc.K, tc.mu, 2, np.random.default_rng(2))
    first = train_step(batch, P, R if use_ra else None, opt, tc, lam=0.6, sched=sched)
    second = train_step(batch, P, R if use_ra else None, opt, tc, lam=0.6, sched=sched)
    return {"first": first.to_dict(), "second": second.to_dict()}


@pytest.mark.parametrize("variant", list(VARIANTS))
def test_train_step_matches_golden_file(toy, variant):
    cfg, batch = toy
    got = _golden_breakdown(cfg, batch, variant)
    want = json.loads(GOLDEN.read_text())[variant]
    for step in ("first", "second"):
        for k, v in want[step].items():
            assert got[step][k] == pytest.approx(v, abs=1e-12), (step, k)


def test_train_step_reduces_to_plain_fine_tuning(toy):
    cfg, batch = toy
    P = init_params(cfg, np.random.default_rng(0))
    g = compute_losses(batch, P, None, use_ss=False, use_ra=False, lam=1.0, gamma=0.5)
    assert g.loss_RA is None and g.gamma == 1.0 and g.loss_total is g.loss_M


def test_lambda_one_leaves_predictor_without_model_gradient(toy):
    cfg, batch = toy
    P = init_params(cfg, np.random.default_rng(0))
    R = init_ra_params(RaConfig.for_embed_dim(8, 2), np.random.default_rng(1))
    g = compute_losses(batch, P, R, use_ss=False, use_ra=True, lam=1.0, gamma=0.5)
    g.loss_M.backward()
    for name in ("pred.w1", "pred.b1", "pred.w2", "pred.b2"):
        assert R[name].grad is None or not R[name].grad.any()


def test_ss_only_changes_replaced_positions(toy):
    cfg, batch = toy
    P = init_params(cfg, np.random.default_rng(0))
    never = SampleSchedule(K=2, mu=1e12, rng=np.random.default_rng(0))
    base = compute_losses(batch, P, None, use_ss=False, use_ra=False, lam=1.0, gamma=1.0).breakdown()
    ss = compute_losses(batch, P, None, use_ss=True, use_ra=False, lam=1.0, gamma=1.0, sched=never).breakdown()
    assert ss == base


def test_loss_total_identity(toy):
    cfg, batch = toy
    P = init_params(cfg, np.random.default_rng(0))
    R = init_ra_params(RaConfig.for_embed_dim(8, 2), np.random.default_rng(1))
    lb = compute_losses(batch, P, R, use_ss=False, use_ra=True, lam=0.4, gamma=0.3).breakdown()
    assert lb.loss_total == pytest.approx(0.3 * lb.loss_M + 0.7 * lb.loss_RA, abs=1e-12)
    assert lb.loss_M >= 0 and lb.loss_RA >= 0


def test_non_finite_loss_reports_diagnostics(toy):
    cfg, batch = toy
    P = init_params(cfg, np.random.default_rng(0))
    P["out.W"].data[0, 0] = np.inf
    with pytest.raises(TrainingDiverged) as info:
        train_step(batch, P, None, Adam(list(P), 1e-3), TrainConfig(use_ss=False, use_ra=False), lam=1.0, step=4, batch_index=2)
    assert (info.value.step, info.value.batch_index) == (4, 2)


def test_diverged_message_carries_location():
    exc = TrainingDiverged("boom", step=7, batch_index=3, max_abs_grad=1.5)
    assert "step 7" in str(exc) and "batch 3" in str(exc) and exc.max_abs_grad == 1.5


def test_full_gradient_passes_grad_check(toy):
    cfg, batch = toy
    P = init_params(cfg, np.random.default_rng(0))
    R = init_ra_params(RaConfig.for_embed_dim(8, 2), np.random.default_rng(1))
    g0 = compute_losses(batch, P, R, use_ss=True, use_ra=True, lam=0.5, gamma=0.5,
                        sched=SampleSchedule(K=2, epoch=4, rng=np.random.default_rng(3)))
    plan, target = g0.plan, g0.bundle.E_ra.data.copy()

    def f():
        return compute_losses(batch, P, R, use_ss=True, use_ra=True, lam=0.5, gamma=0.5, plan=plan, ra_target=target).loss_total

    assert T.grad_check(f, list(P) + list(R)) < 1e-4


def test_two_layer_total_loss_passes_grad_check():
    cfg = ModelConfig(vocab_size=9, embed_dim=8, n_layers=2, n_heads=2, ff_dim=8, max_positions=12)
    batch = make_batch(np.random.default_rng(8), 9, [(2, 3), (3, 2)])
    P = init_params(cfg, np.random.default_rng(0))
    R = init_ra_params(RaConfig.for_embed_dim(8, 2), np.random.default_rng(1))
    g0 = compute_losses(batch, P, R, use_ss=True, use_ra=True, lam=0.3, gamma=0.5,
                        sched=SampleSchedule(K=2, epoch=6, rng=np.random.default_rng(2)))
    plan, target = g0.plan, g0.bundle.E_ra.data.copy()

    def f():
        return compute_losses(batch, P, R, use_ss=True, use_ra=True, lam=0.3, gamma=0.5, plan=plan, ra_target=target).loss_total

    assert T.grad_check(f, list(P) + list(R)) < 1e-4


# ---------------------------------------------------------------- full runs


def _copy_pairs(n, seed, vocab=12):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        k = int(rng.integers(2, 5))
        syms = rng.integers(5, vocab, size=k)
        out.append(EncodedPair(np.append(syms, 2), np.append(syms[::-1], 3)))
    return out


SMALL = ModelConfig(vocab_size=12, embed_dim=16, n_layers=1, n_heads=2, ff_dim=32, max_positions=16)


def test_report_invariants():
    cfg = TrainConfig(learning_rate=3e-3, batch_size=4, epochs=3, K=2, ra_heads=2)
    res = train(_copy_pairs(10, 0), SMALL, cfg)
    rep = res.report
    assert len(rep.epochs) == 3 and len(rep.lambda_trajectory) == 9
    lams = rep.lambda_trajectory
    assert lams[0] == 1.0 and all(a >= b for a, b in zip(lams, lams[1:])) and lams[-1] == 0.2
    ps = [e["p"] for e in rep.epochs]
    assert all(a < b for a, b in zip(ps, ps[1:])) and ps[0] == 0.2
    for e in rep.epochs:
        assert e["loss_total"] == pytest.approx(0.5 * e["loss_M"] + 0.5 * e["loss_RA"], abs=1e-12)
    summary = json.loads(rep.to_jsonl().splitlines()[-1])["summary"]
    assert summary["epochs"] == 3 and "wall_time" not in summary


def test_training_is_bit_reproducible():
    cfg = TrainConfig(learning_rate=3e-3, batch_size=4, epochs=2, K=2, ra_heads=2)
    a = train(_copy_pairs(10, 0), SMALL, cfg)
    b = train(_copy_pairs(10, 0), SMALL, cfg)
    assert a.report.to_jsonl() == b.report.to_jsonl()
    for (k, x), (_, y) in zip(a.params.named(), b.params.named()):
        assert x.data.tobytes() == y.data.tobytes(), k


def test_variants_share_initial_weights_and_order():
    base = train(_copy_pairs(8, 0), SMALL, TrainConfig(epochs=1, batch_size=4, use_ss=False, use_ra=False, learning_rate=1e-9))
    ra = train(_copy_pairs(8, 0), SMALL, TrainConfig(epochs=1, batch_size=4, use_ss=True, use_ra=True, K=2, ra_heads=2, learning_rate=1e-9))
    for (k, x), (_, y) in zip(base.params.named(), ra.params.named()):
        np.testing.assert_allclose(x.data, y.data, rtol=0, atol=1e-7, err_msg=k)


def test_memorises_ten_pairs():
    pairs = _copy_pairs(10, 1)
    cfg = TrainConfig(learning_rate=3e-3, batch_size=10, epochs=300, use_ss=False, use_ra=False)
    res = train(pairs, SMALL, cfg)
    assert res.report.epochs[-1]["loss_M"] < 0.1


def test_checkpoints_written(tmp_path):
    cfg = TrainConfig(learning_rate=3e-3, batch_size=4, epochs=3, K=2, ra_heads=2, checkpoint_every=1)
    train(_copy_pairs(6, 0), SMALL, cfg, checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["epoch-001.ckpt", "epoch-002.ckpt", "model.ckpt"]


def test_ablation_structure():
    pairs = _copy_pairs(12, 0)
    cfg = TrainConfig(learning_rate=3e-3, batch_size=6, epochs=2, K=2, ra_heads=2)
    res = run_ablation(pairs, pairs[:4], SMALL, cfg, seeds=[0, 1], gen_config=GenerationConfig(max_new_tokens=6), workers=2)
    lines = res.to_tsv().splitlines()
    assert len(lines) == 5
    assert lines[0].split("\t") == ["variant", "F1", "BLEU-1", "BLEU-2", "DISTINCT-1", "DISTINCT-2"]
    assert [ln.split("\t")[0] for ln in lines[1:]] == list(VARIANTS)
    assert all(len(ln.split("\t")) == 6 for ln in lines)
    assert len(res.per_seed) == 8 and len(res.reports) == 8
    serial = run_ablation(pairs, pairs[:4], SMALL, cfg, seeds=[0, 1], gen_config=GenerationConfig(max_new_tokens=6))
    assert serial.to_tsv() == res.to_tsv()
    mean_f1 = sum(r["f1"] for r in res.per_seed if r["variant"] == "base") / 2
    assert res.table["base"].f1 == pytest.approx(mean_f1, abs=1e-15)
    assert ("FLAG" in res.format()) == (not res.direction_ok)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(gamma=1.5)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    assert dataclasses.replace(TrainConfig(), use_ss=False, use_ra=True).variant == "+RA"
    assert math.isclose(TrainConfig().learning_rate, 3e-4)


@pytest.mark.slow
def test_every_variant_learns_copy_task(copy_ablation):
    scores = {name: rep.bleu1 for name, rep in copy_ablation.table.items()}
    assert all(v > 0.9 for v in scores.values()), scores
