"""Gaussian splatted feature shifting, contrastive prototype repulsion and online adaptation.

One :class:`Adapter` owns the mutable test-time state (learnable prototypes,
attention parameters, optimizer moments).  :meth:`Adapter.step` processes a
single stream sample and :func:`run_continual` consumes a whole schedule in
order.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .blobs import read_blob, write_blob
from .errors import AdaptationError, ConfigError, InvariantViolation, ShapeError
from .model import MPMModel, MaskSpec, apply_mask, cloud_patches, forward, target_patches
from .prototypes import PrototypeBank, mix_prototypes, similarity
from .tasks import AdaptationReport, StreamSchedule, TaskKind, TaskSample, evaluate

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-4
ATTN_HIDDEN = 16
SMOOTH_K = 8


@dataclass
class AdaptationConfig:
    tau: float = 0.07
    alpha: float = 1.0
    omega_margin: float = 0.05
    lr: float = 1e-3
    weight_decay: float = 0.0
    apm: bool = True
    gsfs: bool = True
    cpr: bool = True
    update_norm: bool = False
    stats: str = "batch"  # or "running"
    stats_momentum: float = 0.9
    batch_size: int = 1
    fixed_weight: float = 0.5
    shift: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if self.stats not in ("batch", "running"):
            raise ConfigError(f"stats must be 'batch' or 'running', got {self.stats!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    @property
    def shifting(self) -> bool:
        return self.shift

    @property
    def effective_alpha(self) -> float:
        return self.alpha if self.cpr else 0.0


# ---------------------------------------------------------------- Gaussian attention


@dataclass
class GaussianAttentionStats:
    mu_s: ad.Tensor  # (K,)
    mu_l: ad.Tensor | None
    sigma_s: ad.Tensor
    sigma_l: ad.Tensor | None
    omega: float = 0.0


def _floored_std(x, axis: int) -> ad.Tensor:
    mu = ad.mean(x, axis=axis, keepdims=True)
    var = ad.mean(ad.square(x - mu), axis=axis)
    raw = ad.sqrt(var + 1e-30)
    return ad.where(raw.data > SIGMA_FLOOR, raw, SIGMA_FLOOR)


def gaussian_stats(s_s, s_l=None, omega: float = 0.0) -> GaussianAttentionStats:
    """Per-task mean and floored standard deviation over the node axis."""
    s_s = ad.as_tensor(s_s)
    s_l = None if s_l is None else ad.as_tensor(s_l)
    mu_s = ad.mean(s_s, axis=0)
    sig_s = _floored_std(s_s, 0)
    if s_l is None or s_l.shape[0] == 0:
        return GaussianAttentionStats(mu_s, None, sig_s, None, omega)
    return GaussianAttentionStats(mu_s, ad.mean(s_l, axis=0), sig_s, _floored_std(s_l, 0), omega)


def gaussian_density(s_s, s_l, stats: GaussianAttentionStats) -> ad.Tensor:
    """2-D Gaussian over (source, learnable) similarity at every node -> (R, S, K).

    Without learnable prototypes the 1-D density over the source axis is used
    and the result has shape (R, 1, K).
    """
    s_s = ad.as_tensor(s_s)
    zs = ad.square((s_s - stats.mu_s) / stats.sigma_s)  # (R, K)
    if s_l is None or stats.mu_l is None:
        norm = 1.0 / (math.sqrt(2 * math.pi)) / stats.sigma_s
        return ad.expand_dims(norm * ad.exp(-0.5 * zs), 1)
    zl = ad.square((ad.as_tensor(s_l) - stats.mu_l) / stats.sigma_l)  # (S, K)
    expo = ad.expand_dims(zs, 1) + ad.expand_dims(zl, 0)
    norm = 1.0 / (2 * math.pi) / (stats.sigma_s * stats.sigma_l)
    return norm * ad.exp(-0.5 * expo)


def gaussian_attention_coeff(s_s, s_l, stats: GaussianAttentionStats) -> ad.Tensor:
    """omega minus the node's Gaussian density; lower for nodes near the similarity means."""
    return stats.omega - gaussian_density(s_s, s_l, stats)


# ---------------------------------------------------------------- learnable edge weights


class AttentionParams:
    """Two 1x1 convolutions over the node axis with a logistic squash.

    The convolution path is added to the logit of the softmax-normalized
    coefficients and its output layer starts at zero, so the initial weights
    equal the softmax output exactly.
    """

    def __init__(self, nodes: int, hidden: int = ATTN_HIDDEN, seed: int = 0):
        rng = geo.rng_for(seed, 0xA77)
        self.nodes = nodes
        self.w1 = ad.Parameter(rng.normal(size=(nodes, hidden)) * math.sqrt(2.0 / nodes), name="attn.w1")
        self.b1 = ad.Parameter(np.zeros(hidden), name="attn.b1")
        self.w2 = ad.Parameter(np.zeros((hidden, nodes)), name="attn.w2")
        self.b2 = ad.Parameter(np.zeros(nodes), name="attn.b2")

    def parameters(self) -> list[ad.Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            p.assign(arrays[p.name])

    def copy(self) -> "AttentionParams":
        other = AttentionParams.__new__(AttentionParams)
        other.nodes = self.nodes
        for name in ("w1", "b1", "w2", "b2"):
            p = getattr(self, name)
            setattr(other, name, ad.Parameter(p.data.copy(), name=p.name, trainable=p.trainable))
        return other


def _logit(p) -> ad.Tensor:
    clipped = np.clip(p.data, 1e-6, 1 - 1e-6)
    inside = clipped == p.data
    q = ad.where(inside, p, clipped)
    return ad.log(q) - ad.log(1.0 - q)


def node_softmax(E) -> ad.Tensor:
    """Softmax over the flattened node axis for each task: (R, S, K) -> (K, R*S)."""
    R, S, K = E.shape
    flat = ad.transpose(ad.reshape(E, (R * S, K)), (1, 0))
    return ad.softmax_last(flat)


def edge_weights(E, params: AttentionParams) -> ad.Tensor:
    """Learnable edge weight in (0, 1) for every node -> (R, S, K)."""
    R, S, K = E.shape
    if params.nodes != R * S:
        raise ShapeError(f"attention module built for {params.nodes} nodes, got {R * S}")
    a = node_softmax(E)
    h = ad.relu(ad.linear(a, params.w1, params.b1))
    out = ad.sigmoid(_logit(a) + ad.linear(h, params.w2, params.b2))
    return ad.reshape(ad.transpose(out, (1, 0)), (R, S, K))


# ---------------------------------------------------------------- shifting and CPR


@dataclass
class ShiftResult:
    shifted: ad.Tensor  # (M, C)
    weights: ad.Tensor  # (R, S, K)
    coeffs: ad.Tensor  # (R, S, K)
    omega: float = 0.0


def shift_features(tokens, z_m, W, k: int) -> ad.Tensor:
    """Average over nodes of (1 - w) * tokens + w * node prototype, for task ``k``."""
    zm = z_m if isinstance(z_m, ad.Tensor) else ad.as_tensor(z_m)
    w = W if isinstance(W, ad.Tensor) else ad.as_tensor(W)
    tok = tokens if isinstance(tokens, ad.Tensor) else ad.as_tensor(tokens)
    if zm.ndim != 5 or w.shape != zm.shape[:3] or zm.shape[3:] != tok.shape:
        raise ShapeError(f"inconsistent shapes: tokens {tok.shape}, Z_m {zm.shape}, W {w.shape}")
    R, S = w.shape[:2]
    wk = ad.take(w, (slice(None), slice(None), k))  # (R, S)
    zk = ad.take(zm, (slice(None), slice(None), k))  # (R, S, M, C)
    mean_w = ad.mean(wk)
    pulled = ad.mean(ad.reshape(wk, (R, S, 1, 1)) * zk, axis=(0, 1))
    return (1.0 - mean_w) * tok + pulled


def cpr_loss(shifted, z_l, tau: float, k: int) -> ad.Tensor:
    """InfoNCE with the most similar learnable prototype as the positive."""
    zl = z_l if isinstance(z_l, ad.Tensor) else ad.as_tensor(z_l)
    S = zl.shape[0]
    if S < 2:
        return ad.Tensor(np.zeros((), dtype=np.float32))
    if tau <= 0:
        raise ConfigError("tau must be positive")
    protos = ad.take(zl, (slice(None), k))  # (S, M, C)
    cos = ad.mean(ad.sum_(ad.normalize_last(protos) * ad.normalize_last(shifted), axis=-1), axis=-1)  # (S,)
    logits = cos / tau
    t = int(np.argmax(logits.data))
    return -ad.take(ad.log_softmax_last(logits), t)


def total_loss(l_cd, l_pr, alpha: float) -> ad.Tensor:
    return l_cd + alpha * l_pr


# ---------------------------------------------------------------- self-supervised references


def smooth_cloud(cloud, k: int = SMOOTH_K) -> np.ndarray:
    """Statistical outlier removal then k-nearest-neighbour averaging."""
    p = geo.check_cloud(cloud).astype(np.float64)
    k = min(k, p.shape[0] - 1)
    d = geo._sqdist(p, p)
    nn = np.argsort(d, axis=1, kind="stable")[:, 1 : k + 1]
    spread = np.sqrt(np.take_along_axis(d, nn, axis=1)).mean(axis=1)
    keep = spread <= spread.mean() + 2 * spread.std()
    q = p[keep]
    k = min(k, q.shape[0] - 1)
    d = geo._sqdist(q, q)
    nn = np.argsort(d, axis=1, kind="stable")[:, : k + 1]
    return q[nn].mean(axis=1).astype(np.float32)


def reference_cloud(sample: TaskSample) -> np.ndarray:
    """Label-free stand-in for the query target used by the test-time Chamfer term."""
    task = TaskKind.parse(sample.task)
    if task is TaskKind.RECONSTRUCTION:
        return geo.check_cloud(sample.query_input)
    if task is TaskKind.DENOISING:
        return smooth_cloud(sample.query_input)
    rot = geo.icp_rotation(sample.query_input, sample.prompt_target)
    return geo.apply_transform(sample.query_input, rot)


def reference_loss(prediction, reference: np.ndarray, task: TaskKind) -> ad.Tensor:
    one_sided = TaskKind.parse(task) is TaskKind.RECONSTRUCTION
    return geo.chamfer_batch(prediction, reference, one_sided=one_sided)


# ---------------------------------------------------------------- the adapter


@dataclass
class StepResult:
    prediction: np.ndarray
    l_cd: float
    l_pr: float
    l_total: float
    omega: float
    w_min: float
    w_max: float
    shift: ShiftResult | None = None


class Adapter:
    """Owns the test-time state and runs one adaptation step per sample."""

    def __init__(self, model: MPMModel, bank: PrototypeBank, config: AdaptationConfig = AdaptationConfig(), seed: int = 0):
        self.model = model
        self.bank = bank
        self.config = config
        nodes = bank.R * max(bank.S, 1)
        self.attn = AttentionParams(nodes, seed=seed)
        self.model.set_trainable(False)
        if config.update_norm:
            self.model.set_trainable(True, self.model.norm_parameters())
        self.bank.z_s.trainable = False
        self.optimizer = ad.AdamW(self.trainable_parameters(), lr=config.lr, weight_decay=config.weight_decay)
        self.steps = 0
        self._running: dict[str, np.ndarray] | None = None

    def trainable_parameters(self) -> list[ad.Parameter]:
        params = [self.bank.z_l] + self.attn.parameters()
        if self.config.update_norm:
            params += self.model.norm_parameters()
        return params

    # -- frozen-state checksums
    def frozen_checksums(self) -> dict[str, str]:
        return {
            "z_s": self.bank.checksum("z_s"),
            "encoder": self.model.checksum("enc."),
            "phi": self.model.checksum("phi.") if not self.config.update_norm else self.model.checksum("phi.mix"),
        }

    # -- pipeline pieces
    def _stats(self, s_s, s_l) -> GaussianAttentionStats:
        if self.config.stats == "batch":
            stats = gaussian_stats(s_s, s_l)
        else:
            stats = self._running_stats(s_s, s_l)
        with ad.no_grad():
            peak = float(np.max(gaussian_density(s_s, s_l, stats).data))
        stats.omega = peak + self.config.omega_margin
        return stats

    def _running_stats(self, s_s, s_l) -> GaussianAttentionStats:
        """EMA of first and second moments pooled over nodes and samples; constants for autodiff."""
        cur = {"s": (s_s.data.mean(axis=0), np.square(s_s.data).mean(axis=0))}
        if s_l is not None:
            cur["l"] = (s_l.data.mean(axis=0), np.square(s_l.data).mean(axis=0))
        if self._running is None:
            self._running = cur
        else:
            m = self.config.stats_momentum
            self._running = {
                key: (m * self._running[key][0] + (1 - m) * c[0], m * self._running[key][1] + (1 - m) * c[1])
                for key, c in cur.items()
            }

        def moments(key):
            mu, sq = self._running[key]
            sigma = np.maximum(np.sqrt(np.maximum(sq - mu * mu, 0.0)), SIGMA_FLOOR)
            return ad.Tensor(mu), ad.Tensor(sigma)

        mu_s, sig_s = moments("s")
        if s_l is None:
            return GaussianAttentionStats(mu_s, None, sig_s, None)
        mu_l, sig_l = moments("l")
        return GaussianAttentionStats(mu_s, mu_l, sig_s, sig_l)

    def shift(self, tokens, k: int) -> ShiftResult:
        cfg, bank = self.config, self.bank
        R, S = bank.R, bank.S
        work = np.result_type(getattr(tokens, "data", tokens).dtype, bank.z_s.data.dtype, bank.z_l.data.dtype)
        # densities reach 1/(2 pi floor^2) ~ 1.6e7, where float32 cannot resolve the margin
        s_s = ad.astype(similarity(bank.z_s, tokens), np.float64)
        if S > 0:
            s_l = ad.astype(similarity(bank.z_l, tokens), np.float64)
        else:
            s_l = None
        if S > 0 and cfg.apm:
            z_m = mix_prototypes(bank.z_s, bank.z_l, ad.astype(s_s, work), ad.astype(s_l, work)).z_m
        else:
            # source-only nodes; with learnable prototypes present each source node is repeated per slot
            z_m = ad.broadcast_to(ad.expand_dims(bank.z_s, 1), (R, max(S, 1)) + bank.z_s.shape[1:])
        stats = self._stats(s_s, s_l)
        E = gaussian_attention_coeff(s_s, s_l, stats)
        if E.shape[1] != max(S, 1):
            E = ad.broadcast_to(E, (R, max(S, 1), bank.K))
        if float(np.min(E.data)) <= 0:
            raise AdaptationError(f"non-positive attention coefficient at step {self.steps}")
        if cfg.gsfs:
            W = ad.astype(edge_weights(E, self.attn), work)
        else:
            W = ad.Tensor(np.full(E.shape, cfg.fixed_weight, dtype=work))
        shifted = shift_features(tokens, z_m, W, k)
        if not np.all(np.isfinite(shifted.data)):
            raise AdaptationError(f"non-finite shifted features at step {self.steps}")
        return ShiftResult(shifted, W, E, stats.omega)

    def _forward(self, sample: TaskSample):
        model, dims = self.model, self.model.dims
        k = int(TaskKind.parse(sample.task))
        qi = cloud_patches(sample.query_input, dims)
        pi = cloud_patches(sample.prompt_input, dims)
        pt = target_patches(sample.prompt_target, pi.centers, dims)
        tokens = model.encode_groups(qi.groups, qi.centers)
        prompt_tokens = model.encode_groups(np.stack([pi.groups, pt.groups]), np.stack([pi.centers, pi.centers]))
        if self.config.shifting:
            sr = self.shift(tokens, k)
            query = sr.shifted
        else:
            sr, query = None, tokens
        seq = ad.concat([query, ad.Tensor(np.zeros_like(tokens.data)), ad.reshape(prompt_tokens, (2 * dims.M, dims.C))], axis=0)
        masked = apply_mask(seq, MaskSpec.test_time(dims.M), model["phi.mask_token"])
        centers = np.concatenate([qi.centers, qi.centers, pi.centers, pi.centers]).astype(np.float32)
        patches = forward(model, masked, centers)  # (M, g, 3)
        pred = ad.reshape(patches, (dims.M * dims.g, 3))
        l_cd = reference_loss(pred, reference_cloud(sample), sample.task)
        if sr is not None and self.bank.S >= 2 and self.config.effective_alpha > 0:
            l_pr = cpr_loss(sr.shifted, self.bank.z_l, self.config.tau, k)
        else:
            l_pr = ad.Tensor(np.zeros((), dtype=np.float32))
        loss = total_loss(l_cd, l_pr, self.config.effective_alpha)
        return pred, l_cd, l_pr, loss, sr

    def _updates_enabled(self) -> bool:
        return self.config.lr != 0.0 and (self.config.shifting or self.config.update_norm)

    def step(self, samples: TaskSample | Sequence[TaskSample]) -> list[StepResult]:
        """Predict each sample, then take one optimizer step on the mean loss."""
        batch = [samples] if isinstance(samples, TaskSample) else list(samples)
        results = []
        update = self._updates_enabled()
        if update:
            with ad.Tape() as tape:
                outs = [self._forward(s) for s in batch]
                loss = outs[0][3] if len(outs) == 1 else ad.mean(ad.stack([o[3] for o in outs]))
                tape.backward(loss)
        else:
            with ad.no_grad():
                outs = [self._forward(s) for s in batch]
        for pred, l_cd, l_pr, loss, sr in outs:
            value = float(loss.data)
            if not math.isfinite(value):
                raise AdaptationError(f"non-finite loss at step {self.steps}")
            w = sr.weights.data if sr is not None else np.zeros(1)
            results.append(
                StepResult(
                    pred.data.astype(np.float32).copy(),
                    float(l_cd.data),
                    float(l_pr.data),
                    value,
                    sr.omega if sr is not None else 0.0,
                    float(w.min()),
                    float(w.max()),
                    sr,
                )
            )
        if update:
            self.optimizer.step()
        self.steps += 1
        return results

    # -- persistence
    def save_state(self, stem, extra_meta: dict | None = None) -> None:
        arrays = {"bank.z_l": self.bank.z_l.data}
        arrays.update(self.attn.state_arrays())
        if self.config.update_norm:
            arrays.update({p.name: p.data for p in self.model.norm_parameters()})
        arrays.update({f"opt.{k}": v for k, v in self.optimizer.state_arrays().items()})
        meta = {"steps": self.steps, "nodes": self.attn.nodes}
        meta.update(extra_meta or {})
        write_blob(stem, arrays, meta)

    def load_state(self, stem) -> None:
        arrays, meta = read_blob(stem)
        if int(meta["nodes"]) != self.attn.nodes:
            raise ConfigError(f"adaptation state has {meta['nodes']} nodes, adapter has {self.attn.nodes}")
        self.bank.z_l.assign(arrays["bank.z_l"].reshape(self.bank.z_l.shape))
        self.attn.load_state_arrays(arrays)
        if self.config.update_norm:
            for p in self.model.norm_parameters():
                p.assign(arrays[p.name])
        self.optimizer.load_state_arrays({k[4:]: v for k, v in arrays.items() if k.startswith("opt.")})
        self.steps = int(meta["steps"])


def adapt_step(sample: TaskSample, adapter: Adapter) -> StepResult:
    return adapter.step(sample)[0]


# ---------------------------------------------------------------- continual run


TRACE_FIELDS = ("step", "round", "domain", "task", "l_cd", "l_pr", "l_total", "omega", "w_min", "w_max")


@dataclass
class ContinualResult:
    report: AdaptationReport
    trace: list[dict] = field(default_factory=list)
    cds: list[float] = field(default_factory=list)
    predictions: list[np.ndarray] = field(default_factory=list)

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=TRACE_FIELDS, lineterminator="\n")
            w.writeheader()
            for row in self.trace:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def run_continual(
    schedule: StreamSchedule,
    adapter: Adapter,
    keep_predictions: bool = False,
    timing: bool = False,
    check_frozen: bool = True,
) -> ContinualResult:
    """Consume ``schedule`` strictly in order, adapting after every batch."""
    before = adapter.frozen_checksums() if check_frozen else None
    items = list(schedule)
    bs = adapter.config.batch_size
    preds, targets, keys, secs, trace, cds = [], [], [], [], [], []
    for lo in range(0, len(items), bs):
        chunk = items[lo : lo + bs]
        t0 = time.perf_counter()
        try:
            results = adapter.step([it.sample for it in chunk])
        except AdaptationError as exc:
            raise AdaptationError(f"stream position {lo} (round {chunk[0].round}, {chunk[0].domain}): {exc}") from exc
        elapsed = (time.perf_counter() - t0) / len(chunk)
        for it, res in zip(chunk, results):
            task = TaskKind.parse(it.sample.task)
            preds.append(res.prediction)
            targets.append(it.sample.query_target)
            keys.append((it.round, it.domain, task))
            secs.append(elapsed if timing else 0.0)
            cds.append(geo.chamfer_value(res.prediction, it.sample.query_target))
            trace.append(
                {
                    "step": len(trace),
                    "round": it.round,
                    "domain": it.domain,
                    "task": task.label,
                    "l_cd": res.l_cd,
                    "l_pr": res.l_pr,
                    "l_total": res.l_total,
                    "omega": res.omega,
                    "w_min": res.w_min,
                    "w_max": res.w_max,
                }
            )
    if check_frozen and adapter.frozen_checksums() != before:
        raise InvariantViolation("frozen parameters changed during adaptation")
    report = evaluate(preds, targets, keys, secs)
    return ContinualResult(report, trace, cds, preds if keep_predictions else [])
