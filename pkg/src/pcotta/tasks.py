"""Task samples, context pairs, the continual stream schedule and CD reporting."""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import geometry as geo
from .blobs import read_blob, write_blob, checksum
from .errors import ConfigError, ContractError


class TaskKind(enum.IntEnum):
    RECONSTRUCTION = 0
    DENOISING = 1
    REGISTRATION = 2

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value) -> "TaskKind":
        if isinstance(value, TaskKind):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        try:
            return cls[str(value).upper()]
        except KeyError:
            raise ConfigError(f"unknown task {value!r}; expected one of {[t.name.lower() for t in cls]}") from None


TASKS = tuple(TaskKind)

DENOISE_SIGMA = 0.03
OUTLIER_RATE = 0.05
MAX_ROTATION = math.radians(45.0)


@dataclass
class TaskSample:
    task: TaskKind
    query_input: np.ndarray
    query_target: np.ndarray
    prompt_input: np.ndarray | None = None
    prompt_target: np.ndarray | None = None
    query_domain: str = ""
    prompt_domain: str = ""
    category: str = ""
    uid: int = 0

    def with_prompt(self, prompt_input, prompt_target, prompt_domain: str) -> "TaskSample":
        return TaskSample(
            self.task,
            self.query_input,
            self.query_target,
            prompt_input,
            prompt_target,
            self.query_domain,
            prompt_domain,
            self.category,
            self.uid,
        )


# ---------------------------------------------------------------- per-task pairs


def make_reconstruction_sample(spec: geo.ShapeSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Dense target and a random quarter of its points as the sparse input."""
    target = geo.generate_shape(spec)
    rng = geo.rng_for(seed, 0x11)
    keep = np.sort(rng.choice(target.shape[0], size=target.shape[0] // 4, replace=False))
    return target[keep].copy(), target


def make_denoising_sample(
    spec: geo.ShapeSpec, sigma: float, seed: int, outlier_rate: float = OUTLIER_RATE
) -> tuple[np.ndarray, np.ndarray]:
    """Clean target; input is the target with Gaussian jitter and uniform outliers in the unit ball."""
    if sigma < 0:
        raise ContractError("sigma must be non-negative")
    target = geo.generate_shape(spec)
    rng = geo.rng_for(seed, 0x22)
    noisy = target.astype(np.float64) + rng.normal(scale=sigma, size=target.shape)
    n_out = int(round(outlier_rate * target.shape[0]))
    if n_out:
        which = rng.choice(target.shape[0], size=n_out, replace=False)
        direction = rng.normal(size=(n_out, 3))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        radius = rng.uniform(0, 1, size=(n_out, 1)) ** (1 / 3)
        noisy[which] = direction * radius
    return noisy.astype(np.float32), target


def registration_transform(seed: int, max_angle: float = MAX_ROTATION) -> geo.RigidTransform:
    return geo.random_rotation(geo.rng_for(seed, 0x33), max_angle)


def make_registration_sample(
    spec: geo.ShapeSpec, seed: int, max_angle: float = MAX_ROTATION
) -> tuple[np.ndarray, np.ndarray]:
    """Canonical target; input is the target under a random rotation of at most ``max_angle``."""
    target = geo.generate_shape(spec)
    return geo.apply_transform(target, registration_transform(seed, max_angle)), target


def make_pair(task: TaskKind, spec: geo.ShapeSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    task = TaskKind.parse(task)
    if task is TaskKind.RECONSTRUCTION:
        return make_reconstruction_sample(spec, seed)
    if task is TaskKind.DENOISING:
        return make_denoising_sample(spec, DENOISE_SIGMA, seed)
    return make_registration_sample(spec, seed)


def _shape_seed(master: int, *keys: int) -> int:
    return int(geo.rng_for(master, *keys).integers(0, 2**62))


def _domain_key(domain: str) -> int:
    return sum((i + 1) * ord(c) for i, c in enumerate(domain))


# ---------------------------------------------------------------- sample sets


def build_domain_samples(domain: str, n: int, seed: int, n_points: int = 256, offset: int = 0) -> list[TaskSample]:
    """``n`` query pairs from one domain, cycling tasks then categories."""
    out = []
    for i in range(n):
        gi = offset + i
        task = TASKS[gi % len(TASKS)]
        category = geo.CATEGORIES[(gi // len(TASKS)) % len(geo.CATEGORIES)]
        s = _shape_seed(seed, _domain_key(domain), i)
        spec = geo.ShapeSpec(category, domain, s, n_points)
        q_in, q_tgt = make_pair(task, spec, s)
        out.append(TaskSample(task, q_in, q_tgt, query_domain=domain, category=category, uid=s))
    return out


def build_pretrain_set(
    source_domains: Sequence[str] = geo.SOURCE_STYLES, n_per_domain: int = 200, seed: int = 0, n_points: int = 256
) -> list[TaskSample]:
    """Query pairs from every source domain, each prompted from a different source domain."""
    if len(source_domains) < 2:
        raise ConfigError("pretraining needs at least two source domains")
    samples = []
    for d, domain in enumerate(source_domains):
        rng = geo.rng_for(seed, 0x99, d)
        others = [o for o in source_domains if o != domain]
        for i, s in enumerate(build_domain_samples(domain, n_per_domain, seed, n_points, offset=d * n_per_domain)):
            other = others[int(rng.integers(len(others)))] if len(others) > 1 else others[0]
            ps = _shape_seed(seed, _domain_key(other), 0x77, d, i)
            spec = geo.ShapeSpec(s.category, other, ps, n_points)
            p_in, p_tgt = make_pair(s.task, spec, ps)
            samples.append(s.with_prompt(p_in, p_tgt, other))
    return samples


# ---------------------------------------------------------------- prompt pool


def mean_token_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Mean over token rows of the row-wise cosine similarity; broadcasts leading axes."""
    def unit(x):
        n = np.linalg.norm(x, axis=-1, keepdims=True)
        return np.where(n > 0, x / np.where(n > 0, n, 1), 0)

    return np.mean(np.sum(unit(a) * unit(b), axis=-1), axis=-1)


@dataclass
class PromptPool:
    """Persisted source pairs with precomputed input-token features."""

    tasks: np.ndarray  # (P,)
    inputs: list[np.ndarray]
    targets: list[np.ndarray]
    domains: list[str]
    features: np.ndarray  # (P, M, C)

    def __len__(self) -> int:
        return len(self.inputs)

    @classmethod
    def from_samples(cls, samples: Sequence[TaskSample], encoder: Callable[[np.ndarray], np.ndarray]) -> "PromptPool":
        feats = np.stack([encoder(s.query_input) for s in samples]) if samples else np.zeros((0, 1, 1), np.float32)
        return cls(
            np.array([int(s.task) for s in samples], dtype=np.int64),
            [s.query_input for s in samples],
            [s.query_target for s in samples],
            [s.query_domain for s in samples],
            feats.astype(np.float32),
        )

    def nearest(self, tokens: np.ndarray, task: TaskKind) -> int:
        """Index of the same-task entry whose features best match ``tokens``."""
        cand = np.flatnonzero(self.tasks == int(task))
        if cand.size == 0:
            raise ConfigError(f"prompt pool has no entries for task {TaskKind(task).label}")
        scores = mean_token_cosine(self.features[cand], tokens[None])
        return int(cand[int(np.argmax(scores))])

    def checksum(self) -> str:
        arrays = {"features": self.features, "tasks": self.tasks.astype(np.float32)}
        for i, (a, b) in enumerate(zip(self.inputs, self.targets)):
            arrays[f"in.{i}"] = a
            arrays[f"tgt.{i}"] = b
        return checksum(arrays)

    def save(self, stem) -> None:
        arrays = {"features": self.features, "tasks": self.tasks.astype(np.float32)}
        for i, (a, b) in enumerate(zip(self.inputs, self.targets)):
            arrays[f"in.{i}"] = a
            arrays[f"tgt.{i}"] = b
        meta = {f"domain.{i}": d for i, d in enumerate(self.domains)}
        meta["count"] = len(self)
        write_blob(stem, arrays, meta)

    @classmethod
    def load(cls, stem) -> "PromptPool":
        arrays, meta = read_blob(stem)
        n = int(meta["count"])
        return cls(
            arrays["tasks"].astype(np.int64),
            [arrays[f"in.{i}"] for i in range(n)],
            [arrays[f"tgt.{i}"] for i in range(n)],
            [meta[f"domain.{i}"] for i in range(n)],
            arrays["features"],
        )


# ---------------------------------------------------------------- stream schedule


@dataclass
class StreamItem:
    round: int
    domain: str
    position: int
    sample: TaskSample
    prompt_index: int = -1


@dataclass
class StreamSchedule:
    items: list[StreamItem]
    rounds: int
    domains: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def blocks(self) -> list[tuple[int, str]]:
        seen = []
        for it in self.items:
            key = (it.round, it.domain)
            if not seen or seen[-1] != key:
                seen.append(key)
        return seen

    def identity(self) -> list[tuple]:
        return [(it.round, it.domain, it.sample.uid, int(it.sample.task), it.prompt_index) for it in self.items]


def build_stream_schedule(
    target_domains: Sequence[str] = geo.TARGET_STYLES,
    n_per_domain: int = 100,
    rounds: int = 3,
    seed: int = 0,
    prompt_pool: PromptPool | None = None,
    encoder: Callable[[np.ndarray], np.ndarray] | None = None,
    n_points: int = 256,
) -> StreamSchedule:
    """Rounds of domain blocks; every round revisits the same target samples.

    When ``prompt_pool`` and ``encoder`` are given each sample is paired with
    its nearest same-task pool entry by mean token cosine similarity.
    """
    if rounds < 1:
        raise ConfigError("rounds must be >= 1")
    if prompt_pool is not None and len(prompt_pool) == 0:
        raise ConfigError("prompt pool is empty")
    per_domain = {}
    for d, domain in enumerate(target_domains):
        samples = build_domain_samples(domain, n_per_domain, seed ^ 0x5EED, n_points, offset=0)
        order = geo.rng_for(seed, 0xB10C, d).permutation(len(samples))
        samples = [samples[i] for i in order]
        if prompt_pool is not None:
            if encoder is None:
                raise ConfigError("prompt selection needs an encoder")
            paired = []
            for s in samples:
                j = prompt_pool.nearest(encoder(s.query_input), s.task)
                paired.append((s.with_prompt(prompt_pool.inputs[j], prompt_pool.targets[j], prompt_pool.domains[j]), j))
            per_domain[domain] = paired
        else:
            per_domain[domain] = [(s, -1) for s in samples]
    items = []
    for r in range(1, rounds + 1):
        for domain in target_domains:
            for pos, (s, j) in enumerate(per_domain[domain]):
                items.append(StreamItem(r, domain, pos, s, j))
    return StreamSchedule(items, rounds, tuple(target_domains))


# ---------------------------------------------------------------- reporting


REPORT_FIELDS = ("round", "domain", "task", "cd_mean", "cd_std", "n", "seconds")


@dataclass
class ReportRow:
    round: int
    domain: str
    task: str
    cd_mean: float
    cd_std: float
    n: int
    seconds: float = 0.0


@dataclass
class AdaptationReport:
    rows: list[ReportRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        for r in self.rows:
            w.writerow([r.round, r.domain, r.task, repr(float(r.cd_mean)), repr(float(r.cd_std)), r.n, repr(float(r.seconds))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_json(self, path=None) -> str:
        text = json.dumps([asdict(r) for r in self.rows], indent=2) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "AdaptationReport":
        with open(path, newline="") as fh:
            rows = [
                ReportRow(int(d["round"]), d["domain"], d["task"], float(d["cd_mean"]), float(d["cd_std"]), int(d["n"]), float(d["seconds"]))
                for d in csv.DictReader(fh)
            ]
        return cls(rows)

    def table(self) -> str:
        """Human-readable table with CD scaled by 1e3."""
        lines = [f"{'round':>5}  {'domain':<7} {'task':<15} {'CD x1e3':>9} {'std':>8} {'n':>5}"]
        for r in self.rows:
            lines.append(f"{r.round:>5}  {r.domain:<7} {r.task:<15} {1e3 * r.cd_mean:>9.3f} {1e3 * r.cd_std:>8.3f} {r.n:>5}")
        return "\n".join(lines)

    def mean_cd(self, task: str | None = None, round: int | None = None) -> float:
        """Sample-weighted mean CD over the selected rows."""
        sel = [r for r in self.rows if (task is None or r.task == task) and (round is None or r.round == round)]
        n = sum(r.n for r in sel)
        return sum(r.cd_mean * r.n for r in sel) / n if n else float("nan")


def evaluate(
    predictions: Sequence,
    targets: Sequence,
    keys: Sequence[tuple],
    seconds: Sequence[float] | None = None,
) -> AdaptationReport:
    """Group per-sample Chamfer distances by (round, domain, task)."""
    if not (len(predictions) == len(targets) == len(keys)):
        raise ContractError(
            f"evaluate needs equal lengths, got {len(predictions)} predictions, {len(targets)} targets, {len(keys)} keys"
        )
    if seconds is not None and len(seconds) != len(keys):
        raise ContractError("seconds must align with keys")
    groups: dict[tuple, list[int]] = {}
    for i, key in enumerate(keys):
        if len(key) != 3:
            raise ContractError(f"key {key!r} is not a (round, domain, task) triple")
        r, d, t = key
        groups.setdefault((int(r), str(d), TaskKind.parse(t)), []).append(i)
    rows = []
    for (r, d, t), idx in groups.items():
        cds = np.array([geo.chamfer_value(predictions[i], targets[i]) for i in idx], dtype=np.float64)
        secs = float(sum(seconds[i] for i in idx)) if seconds is not None else 0.0
        rows.append(ReportRow(r, d, t.label, float(cds.mean()), float(cds.std()), len(idx), secs))
    domain_order = {d: i for i, d in enumerate(dict.fromkeys(k[1] for k in groups))}
    rows.sort(key=lambda row: (row.round, domain_order[row.domain], TaskKind.parse(row.task)))
    return AdaptationReport(rows)
