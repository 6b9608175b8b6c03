"""Training engine: Adam, the lambda/p schedules, the per-variant step, and ablations."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from . import tensor as T
from ._io import atomic_write_text, dump_jsonl
from .data import Batch, EncodedPair, iter_batches, num_batches
from .decode import GenerationConfig, evaluate_model
from .metrics import MetricsReport
from .model import ModelConfig, ModelParams, forward, init_params, nll_loss, token_embed
from .response_aware import (
    LossBreakdown,
    RaBundle,
    RaConfig,
    RaParams,
    init_ra_params,
    merge,
    predict_response_aware,
    ra_loss,
    response_aware,
    total_loss,
)
from .sampling import ReconstructedResponse, SampleSchedule, reconstruct, replace_probability
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(ArithmeticError):
    def __init__(self, message: str, step: int = -1, batch_index: int = -1, max_abs_grad: float = float("nan")):
        super().__init__(f"{message} (step {step}, batch {batch_index}, max |grad| {max_abs_grad:.3e})")
        self.step = step
        self.batch_index = batch_index
        self.max_abs_grad = max_abs_grad


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    batch_size: int = 16
    epochs: int = 10
    gamma: float = 0.5
    mu: float = 4.0
    K: int = 5
    lambda_floor: float = 0.2
    use_ss: bool = True
    use_ra: bool = True
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 saves only the final checkpoint
    ra_heads: int = 4
    ra_hidden: int = 0  # 0 means twice the embedding width

    def __post_init__(self):
        for name in ("gamma", "lambda_floor"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.epochs < 1:
            raise ValueError("need at least one epoch")
        if self.batch_size < 1 or self.K < 1 or not self.mu > 0 or not self.learning_rate > 0:
            raise ValueError("batch_size, K, mu and learning_rate must be positive")

    @property
    def variant(self) -> str:
        return variant_name(self.use_ss, self.use_ra)

    def ra_config(self, embed_dim: int) -> RaConfig:
        return RaConfig.for_embed_dim(embed_dim, self.ra_heads, self.ra_hidden or None)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


VARIANTS = {"base": (False, False), "+SS": (True, False), "+RA": (False, True), "+SS+RA": (True, True)}


def variant_name(use_ss: bool, use_ra: bool) -> str:
    for name, flags in VARIANTS.items():
        if flags == (use_ss, use_ra):
            return name
    raise AssertionError


# ---------------------------------------------------------------------------
# optimiser and schedules
# ---------------------------------------------------------------------------


class Adam:
    """Adam with bias correction and per-tensor moment buffers."""

    def __init__(self, params: Sequence[Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        T.zero_grad(self.params)

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise TrainingDiverged(f"non-finite gradient in {p.name or 'parameter'}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_update(params: Sequence[Tensor], opt: Adam | None = None, lr: float = 1e-3) -> Adam:
    """Apply one Adam step using each tensor's ``.grad``; returns the optimiser state."""
    opt = opt or Adam(params, lr)
    opt.step()
    return opt


@dataclass(frozen=True)
class LambdaSchedule:
    steps_in_first_epoch: int
    floor: float = 0.2


def lambda_at(step: int, schedule: LambdaSchedule) -> float:
    """Linear decay from 1 to the floor over the first epoch, flat afterwards."""
    if step < 0:
        raise ValueError("step must be >= 0")
    S = schedule.steps_in_first_epoch
    if S <= 0 or step >= S:
        return schedule.floor
    return 1.0 - (1.0 - schedule.floor) * step / S


# ---------------------------------------------------------------------------
# one step
# ---------------------------------------------------------------------------


@dataclass
class StepGraph:
    loss_total: Tensor
    loss_M: Tensor
    loss_RA: Tensor | None
    gamma: float
    plan: ReconstructedResponse | None = None
    bundle: RaBundle | None = None

    def breakdown(self) -> LossBreakdown:
        lra = self.loss_RA.item() if self.loss_RA is not None else 0.0
        return LossBreakdown(self.loss_M.item(), lra, self.gamma, self.loss_total.item())


def compute_losses(
    batch: Batch,
    params: ModelParams,
    ra_params: RaParams | None,
    *,
    use_ss: bool,
    use_ra: bool,
    lam: float,
    gamma: float,
    sched: SampleSchedule | None = None,
    p: float | None = None,
    plan: ReconstructedResponse | None = None,
    ra_target: np.ndarray | None = None,
    dropout_rng: np.random.Generator | None = None,
) -> StepGraph:
    """Build the loss graph for one batch under a variant's flags.

    ``plan`` replays an earlier scheduled-sampling draw and ``ra_target``
    pins the response-aware regression target; both exist so a finite
    difference check can hold the constant inputs fixed.
    """
    cm, rm = batch.context_mask, batch.response_mask
    E_x = token_embed(batch.context, params)
    E_y = token_embed(batch.response, params)
    if use_ss:
        if plan is None:
            if sched is None:
                raise ValueError("scheduled sampling needs a SampleSchedule")
            plan = reconstruct(E_x, E_y, params, sched, context_mask=cm, response_mask=rm, p=p)
        E_r = plan.apply(E_y)
    else:
        E_r = E_y
    train = dropout_rng is not None
    if not use_ra:
        out = forward(E_x, E_r, params, context_mask=cm, response_mask=rm, train=train, rng=dropout_rng)
        loss_M = nll_loss(out.probs, batch.response, rm)
        return StepGraph(loss_M, loss_M, None, 1.0, plan)
    if ra_params is None:
        raise ValueError("response-aware variant needs RA parameters")
    E_ra = response_aware(E_r, E_x, ra_params, response_mask=rm)
    E_ra_pred = predict_response_aware(E_x, ra_params)
    E_m = merge(E_ra, E_ra_pred, lam)
    out = forward(E_m, E_r, params, context_mask=cm, response_mask=rm, train=train, rng=dropout_rng)
    loss_M = nll_loss(out.probs, batch.response, rm)
    loss_RA = ra_loss(E_ra_pred, E_ra.data if ra_target is None else ra_target, cm)
    loss = total_loss(loss_M, loss_RA, gamma)
    return StepGraph(loss, loss_M, loss_RA, gamma, plan, RaBundle(E_ra, E_ra_pred, E_m, lam))


def _max_abs_grad(params) -> float:
    vals = [np.nanmax(np.abs(p.grad)) for p in params if p.grad is not None and p.grad.size]
    return float(max(vals)) if vals else 0.0


def train_step(
    batch: Batch,
    params: ModelParams,
    ra_params: RaParams | None,
    opt: Adam,
    config: TrainConfig,
    *,
    lam: float,
    sched: SampleSchedule | None = None,
    dropout_rng: np.random.Generator | None = None,
    step: int = -1,
    batch_index: int = -1,
) -> LossBreakdown:
    opt.zero_grad()
    try:
        graph = compute_losses(
            batch,
            params,
            ra_params if config.use_ra else None,
            use_ss=config.use_ss,
            use_ra=config.use_ra,
            lam=lam,
            gamma=config.gamma,
            sched=sched,
            dropout_rng=dropout_rng,
        )
    except T.NumericError as exc:
        raise TrainingDiverged(f"non-finite forward pass: {exc}", step, batch_index, _max_abs_grad(opt.params)) from exc
    if not np.isfinite(graph.loss_total.data).all():
        raise TrainingDiverged("non-finite loss", step, batch_index, _max_abs_grad(opt.params))
    graph.loss_total.backward()
    try:
        opt.step()
    except TrainingDiverged as exc:
        raise TrainingDiverged(str(exc).split(" (")[0], step, batch_index, _max_abs_grad(opt.params)) from None
    return graph.breakdown()


# ---------------------------------------------------------------------------
# full runs
# ---------------------------------------------------------------------------


@dataclass
class TrainReport:
    seed: int
    variant: str
    gamma: float
    epochs: list[dict] = field(default_factory=list)
    lambda_trajectory: list[float] = field(default_factory=list)
    wall_time: float = 0.0

    def to_jsonl(self) -> str:
        """Epoch lines plus a summary line; wall time is left out so equal runs give equal bytes."""
        summary = {
            "summary": {
                "seed": self.seed,
                "variant": self.variant,
                "gamma": self.gamma,
                "epochs": len(self.epochs),
                "final_loss_total": self.epochs[-1]["loss_total"] if self.epochs else None,
                "p_trajectory": [e["p"] for e in self.epochs],
                "lambda_trajectory": self.lambda_trajectory,
            }
        }
        return dump_jsonl(list(self.epochs) + [summary])


@dataclass
class TrainResult:
    params: ModelParams
    ra_params: RaParams | None
    report: TrainReport
    model_config: ModelConfig
    train_config: TrainConfig


def _streams(seed: int):
    names = ("model", "ra", "data", "sampling", "dropout")
    return {k: np.random.default_rng(s) for k, s in zip(names, np.random.SeedSequence(seed).spawn(len(names)))}


def train(
    encoded: Sequence[EncodedPair],
    model_config: ModelConfig,
    config: TrainConfig,
    *,
    checkpoint_dir: str | Path | None = None,
    header_extra: dict | None = None,
) -> TrainResult:
    """Train one variant. Init, data order and sampling draw from separate
    streams split off ``config.seed``, so variants sharing a seed see the same
    initial weights and batch order."""
    if not encoded:
        raise ValueError("empty training corpus")
    t0 = time.perf_counter()
    rngs = _streams(config.seed)
    params = init_params(model_config, rngs["model"])
    ra_params = init_ra_params(config.ra_config(model_config.embed_dim), rngs["ra"]) if config.use_ra else None
    trainable = list(params) + (list(ra_params) if ra_params is not None else [])
    opt = Adam(trainable, config.learning_rate)
    dropout_rng = rngs["dropout"] if model_config.dropout_rate > 0 else None
    lam_sched = LambdaSchedule(num_batches(len(encoded), config.batch_size), config.lambda_floor)
    report = TrainReport(config.seed, config.variant, config.gamma if config.use_ra else 1.0)

    step = 0
    for epoch in range(config.epochs):
        sched = SampleSchedule(config.K, config.mu, epoch, rngs["sampling"])
        p = replace_probability(sched)
        sums = {"loss_M": [], "loss_RA": [], "loss_total": []}
        lams = []
        for bi, batch in enumerate(iter_batches(encoded, config.batch_size, rngs["data"])):
            lam = lambda_at(step, lam_sched)
            lb = train_step(
                batch, params, ra_params, opt, config,
                lam=lam, sched=sched, dropout_rng=dropout_rng, step=step, batch_index=bi,
            )
            for k in sums:
                sums[k].append(getattr(lb, k))
            lams.append(lam)
            step += 1
        rec = {k: math.fsum(v) / len(v) for k, v in sums.items()}
        rec.update(
            epoch=epoch,
            steps=len(lams),
            gamma=report.gamma,
            p=p,
            lambda_first=lams[0],
            lambda_last=lams[-1],
        )
        report.epochs.append(rec)
        report.lambda_trajectory.extend(lams)
        log.info(
            "[%s seed=%d] epoch %d/%d loss_M=%.4f loss_RA=%.4f total=%.4f p=%.3f lambda=%.3f",
            config.variant, config.seed, epoch + 1, config.epochs,
            rec["loss_M"], rec["loss_RA"], rec["loss_total"], p, lams[-1],
        )
        if checkpoint_dir and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0 and epoch + 1 < config.epochs:
            save_model(Path(checkpoint_dir) / f"epoch-{epoch + 1:03d}.ckpt", params, ra_params, config, header_extra, epoch + 1)
    report.wall_time = time.perf_counter() - t0
    if checkpoint_dir:
        save_model(Path(checkpoint_dir) / "model.ckpt", params, ra_params, config, header_extra, config.epochs)
    return TrainResult(params, ra_params, report, model_config, config)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_model(
    path: str | Path,
    params: ModelParams,
    ra_params: RaParams | None,
    train_config: TrainConfig | None = None,
    extra: dict | None = None,
    epochs_completed: int | None = None,
) -> None:
    tensors = {f"model.{k}": v for k, v in params.named()}
    if ra_params is not None:
        tensors.update({f"ra.{k}": v for k, v in ra_params.named()})
    header = {
        "model_config": params.config.to_dict(),
        "ra_config": ra_params.config.to_dict() if ra_params is not None else None,
        "train_config": train_config.to_dict() if train_config else None,
        "epochs_completed": epochs_completed,
        "extra": extra or {},
    }
    checkpoint.save(path, tensors, header)


def load_model(path: str | Path) -> tuple[ModelParams, RaParams | None, dict]:
    header, arrays = checkpoint.load(path)
    mcfg = ModelConfig(**header["model_config"])
    params = ModelParams(
        mcfg, {k[len("model."):]: Tensor(v, requires_grad=True) for k, v in arrays.items() if k.startswith("model.")}
    )
    ra_params = None
    if header.get("ra_config"):
        rcfg = RaConfig(**header["ra_config"])
        ra_params = RaParams(rcfg, {k[len("ra."):]: Tensor(v, requires_grad=True) for k, v in arrays.items() if k.startswith("ra.")})
    for ps in (params, ra_params):
        if ps is not None:
            for k, v in ps.named():
                v.name = k
    return params, ra_params, header


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------


METRIC_COLUMNS = ("F1", "BLEU-1", "BLEU-2", "DISTINCT-1", "DISTINCT-2")


@dataclass
class AblationResult:
    table: dict[str, MetricsReport]  # variant -> metrics averaged over seeds
    per_seed: list[dict]
    reports: dict[tuple[int, str], TrainReport]
    seeds: tuple[int, ...]

    @property
    def direction_ok(self) -> bool:
        """Whether +RA matches or beats base on F1 and BLEU-1."""
        ra, base = self.table["+RA"], self.table["base"]
        return ra.f1 >= base.f1 and ra.bleu1 >= base.bleu1

    def to_tsv(self) -> str:
        lines = ["\t".join(("variant",) + METRIC_COLUMNS)]
        for name, rep in self.table.items():
            lines.append("\t".join([name] + [repr(v) for v in rep.row()]))
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "seeds": list(self.seeds),
            "table": {k: v.to_dict() for k, v in self.table.items()},
            "per_seed": self.per_seed,
            "direction_ok": self.direction_ok,
        }

    def format(self) -> str:
        head = f"{'Model':<10} {'F1':>8} {'BLEU-1/2':>13} {'DISTINCT-1/2':>13}"
        rows = [head, "-" * len(head)]
        for name, r in self.table.items():
            rows.append(f"{name:<10} {100 * r.f1:8.3f} {r.bleu1:6.3f}/{r.bleu2:<6.3f} {r.distinct1:6.3f}/{r.distinct2:<6.3f}")
        if not self.direction_ok:
            rows.append("FLAG: +RA did not match or beat base on F1 and BLEU-1 at this scale")
        return "\n".join(rows)


def _mean_report(reports: Sequence[MetricsReport]) -> MetricsReport:
    vals = {k: math.fsum(getattr(r, k) for r in reports) / len(reports) for k in MetricsReport.METRICS}
    return MetricsReport(count=reports[0].count, **vals)


def run_ablation(
    train_pairs: Sequence[EncodedPair],
    test_pairs: Sequence[EncodedPair],
    model_config: ModelConfig,
    base_config: TrainConfig,
    *,
    seeds: Sequence[int] | None = None,
    gen_config: GenerationConfig = GenerationConfig(),
    workers: int = 1,
) -> AblationResult:
    """Train and evaluate base / +SS / +RA / +SS+RA under shared seeds and data order."""
    seeds = tuple(seeds) if seeds else (base_config.seed,)
    jobs = [(seed, name) for seed in seeds for name in VARIANTS]

    def run(job):
        seed, name = job
        use_ss, use_ra = VARIANTS[name]
        cfg = dataclasses.replace(base_config, use_ss=use_ss, use_ra=use_ra, seed=seed)
        res = train(train_pairs, model_config, cfg)
        metrics, _ = evaluate_model(test_pairs, res.params, res.ra_params, gen_config)
        log.info("[%s seed=%d] %s", name, seed, metrics.format())
        return res.report, metrics

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run, jobs))
    else:
        outcomes = [run(j) for j in jobs]

    reports, per_seed = {}, []
    by_variant: dict[str, list[MetricsReport]] = {name: [] for name in VARIANTS}
    for (seed, name), (rep, metrics) in zip(jobs, outcomes):
        reports[(seed, name)] = rep
        by_variant[name].append(metrics)
        per_seed.append({"seed": seed, "variant": name, **metrics.to_dict(scaled=False)})
    table = {name: _mean_report(ms) for name, ms in by_variant.items()}
    return AblationResult(table, per_seed, reports, seeds)


def write_report(path: str | Path, report: TrainReport) -> None:
    atomic_write_text(path, report.to_jsonl())
