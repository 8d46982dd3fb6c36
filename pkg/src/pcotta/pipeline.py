"""End-to-end stages shared by the CLI and the estimator facade."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import geometry as geo
from .adaptation import Adapter, AdaptationConfig, ContinualResult, run_continual
from .config import RunConfig
from .errors import ConfigError
from .model import MPMModel, encode_features, pretrain
from .prototypes import PrototypeBank, estimate_source_prototypes
from .tasks import TASKS, PromptPool, StreamSchedule, TaskKind, TaskSample, build_pretrain_set, build_stream_schedule

log = logging.getLogger(__name__)

REFERENCE_NOTES = {
    "reconstruction": "one-sided Chamfer to the sparse query input (subset consistency)",
    "denoising": "Chamfer to the outlier-filtered, kNN-smoothed query input",
    "registration": "Chamfer to the query input rotated onto the prompt target by ICP",
}

ABLATION_GRID = (
    ("baseline", dict(apm=False, gsfs=False, cpr=False)),
    ("apm", dict(apm=True, gsfs=False, cpr=False)),
    ("apm+gsfs", dict(apm=True, gsfs=True, cpr=False)),
    ("full", dict(apm=True, gsfs=True, cpr=True)),
)


def source_samples(cfg: RunConfig, seed: int) -> list[TaskSample]:
    d = cfg.data
    return build_pretrain_set(d.source_domains, d.pretrain_per_domain, seed, d.n_points)


def pretrain_model(cfg: RunConfig, seed: int, samples: Sequence[TaskSample] | None = None) -> tuple[MPMModel, list[float]]:
    samples = source_samples(cfg, seed) if samples is None else samples
    model = MPMModel(cfg.model, seed=seed)
    p = cfg.pretrain
    trace = pretrain(
        model, samples, epochs=p.epochs, batch_size=p.batch_size, seed=seed,
        lr=p.lr, weight_decay=p.weight_decay, testtime_fraction=p.testtime_fraction,
    )
    return model, trace


@dataclass
class BankArtifacts:
    model: MPMModel  # after the short tuning phase
    bank: PrototypeBank
    pool: PromptPool
    features: np.ndarray  # (N, M, C) source tokens behind z_s
    domains: list[str]
    tasks: list[int]
    trace: list[float]


def init_bank(cfg: RunConfig, model: MPMModel, seed: int, samples: Sequence[TaskSample] | None = None) -> BankArtifacts:
    """Tune on the sources for a few epochs, then average tokens per (domain, task)."""
    samples = source_samples(cfg, seed) if samples is None else list(samples)
    tuned = model.copy()
    tuned.set_trainable(True)
    b = cfg.bank
    trace = pretrain(tuned, samples, epochs=b.epochs, batch_size=cfg.pretrain.batch_size, seed=seed + 1,
                     lr=b.lr, weight_decay=b.weight_decay, testtime_fraction=cfg.pretrain.testtime_fraction)
    feats = np.stack([encode_features(tuned, s.query_input) for s in samples])
    domains = [s.query_domain for s in samples]
    tasks = [int(s.task) for s in samples]
    z_s = estimate_source_prototypes(feats, domains, tasks, cfg.data.source_domains)
    bank = PrototypeBank.from_source(z_s, b.quantity, seed, cfg.data.source_domains)
    pool = PromptPool(
        tasks=np.array(tasks, dtype=np.int64),
        inputs=[s.query_input for s in samples],
        targets=[s.query_target for s in samples],
        domains=domains,
        features=feats,
    )
    return BankArtifacts(tuned, bank, pool, feats, domains, tasks, trace)


def stream_schedule(cfg: RunConfig, model: MPMModel, pool: PromptPool, seed: int) -> StreamSchedule:
    d = cfg.data
    return build_stream_schedule(
        d.target_domains, d.stream_per_domain, d.rounds, seed, pool, lambda c: encode_features(model, c), d.n_points
    )


def adapt(
    cfg: RunConfig,
    model: MPMModel,
    bank: PrototypeBank,
    schedule: StreamSchedule,
    seed: int,
    frozen: bool = False,
    keep_predictions: bool = False,
    **overrides,
) -> tuple[ContinualResult, Adapter]:
    """Run the stream on copies of ``model`` and ``bank``; the inputs are never modified."""
    acfg = dataclasses.replace(cfg.adapt, **overrides)
    if frozen:
        acfg = dataclasses.replace(acfg, lr=0.0)
    adapter = Adapter(model.copy(), bank.copy(), acfg, seed=seed)
    result = run_continual(schedule, adapter, keep_predictions=keep_predictions, timing=cfg.run.record_timings)
    return result, adapter


ABLATION_FIELDS = ("kind", "setting", "S", "task", "cd_mean", "round1", "round_last")


def ablate(cfg: RunConfig, model: MPMModel, bank: PrototypeBank, schedule: StreamSchedule, seed: int) -> list[dict]:
    """Module grid at the configured S, then the prototype-quantity sweep with the full model."""
    rows, cache = [], {}
    last = cfg.data.rounds

    def record(kind, setting, S, report):
        for t in TASKS:
            rows.append({
                "kind": kind, "setting": setting, "S": S, "task": t.label,
                "cd_mean": report.mean_cd(t.label),
                "round1": report.mean_cd(t.label, 1),
                "round_last": report.mean_cd(t.label, last),
            })

    S0 = bank.S
    for name, switches in ABLATION_GRID:
        res, _ = adapt(cfg, model, bank, schedule, seed, **switches)
        cache[(name, S0)] = res.report
        record("module", name, S0, res.report)
    for S in cfg.ablate.quantities:
        if S < 0:
            raise ConfigError("prototype quantity must be >= 0")
        if S == S0:
            report = cache[("full", S0)]
        else:
            res, _ = adapt(cfg, model, bank.with_quantity(S, seed), schedule, seed, **dict(ABLATION_GRID)["full"])
            report = res.report
        record("quantity", f"S={S}", S, report)
    return rows


@dataclass
class FeatureRecord:
    name: str
    task: TaskKind
    pre: np.ndarray  # (M, C)
    post: np.ndarray  # (M, C)


def export_features(model: MPMModel, bank: PrototypeBank, clouds: Sequence[np.ndarray], tasks: Sequence,
                    names: Sequence[str] | None = None, config: AdaptationConfig | None = None) -> list[FeatureRecord]:
    """Token matrices before and after prototype shifting, one record per cloud."""
    from . import autodiff as ad

    adapter = Adapter(model.copy(), bank.copy(), config or AdaptationConfig(), seed=0)
    names = list(names) if names is not None else [f"cloud{i:04d}" for i in range(len(clouds))]
    if not (len(names) == len(clouds) == len(tasks)):
        raise ConfigError("clouds, tasks and names must align")
    out = []
    with ad.no_grad():
        for name, cloud, task in zip(names, clouds, tasks):
            k = TaskKind.parse(task)
            pre = encode_features(adapter.model, cloud)
            post = adapter.shift(ad.Tensor(pre), int(k)).shifted.data.astype(np.float32)
            out.append(FeatureRecord(name, k, pre, post))
    return out
