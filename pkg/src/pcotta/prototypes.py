"""Source/learnable prototype bank, token similarity and Automatic Prototype Mixture."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .blobs import checksum, read_blob, write_blob
from .errors import ConfigError, ContractError, EstimationError, ShapeError
from .tasks import TASKS, TaskKind

DEGENERATE_DENOM = 1e-6
LEARNABLE_INIT_SIGMA = 0.01


@dataclass
class PrototypeBank:
    """Frozen source prototypes ``z_s`` (R, K, M, C) and learnable ``z_l`` (S, K, M, C)."""

    z_s: ad.Parameter
    z_l: ad.Parameter
    domains: tuple[str, ...] = ()
    source_checksum: str = ""

    def __post_init__(self):
        self.z_s.trainable = False
        self.z_l.trainable = True
        if self.z_s.ndim != 4 or self.z_l.ndim != 4 or self.z_s.shape[1:] != self.z_l.shape[1:]:
            raise ShapeError(f"bank shapes disagree: z_s {self.z_s.shape}, z_l {self.z_l.shape}")

    @property
    def R(self) -> int:
        return self.z_s.shape[0]

    @property
    def S(self) -> int:
        return self.z_l.shape[0]

    @property
    def K(self) -> int:
        return self.z_s.shape[1]

    @property
    def M(self) -> int:
        return self.z_s.shape[2]

    @property
    def C(self) -> int:
        return self.z_s.shape[3]

    def dims(self) -> dict[str, int]:
        return {"R": self.R, "S": self.S, "K": self.K, "M": self.M, "C": self.C}

    def checksum(self, which: str = "z_s") -> str:
        return checksum({which: getattr(self, which).data})

    @classmethod
    def from_source(cls, z_s: np.ndarray, S: int = 2, seed: int = 0, domains: Sequence[str] = ()) -> "PrototypeBank":
        z_s = np.asarray(z_s, dtype=np.float32)
        return cls(
            ad.Parameter(z_s, name="bank.z_s", trainable=False),
            ad.Parameter(init_learnable(z_s, S, seed), name="bank.z_l"),
            tuple(domains),
            checksum({"z_s": z_s}),
        )

    def copy(self) -> "PrototypeBank":
        return PrototypeBank(
            ad.Parameter(self.z_s.data.copy(), name="bank.z_s", trainable=False),
            ad.Parameter(self.z_l.data.copy(), name="bank.z_l"),
            self.domains,
            self.source_checksum,
        )

    def with_quantity(self, S: int, seed: int = 0) -> "PrototypeBank":
        """Same source prototypes with a freshly initialized set of ``S`` learnable ones."""
        return PrototypeBank.from_source(self.z_s.data.copy(), S, seed, self.domains)


def init_learnable(z_s: np.ndarray, S: int, seed: int = 0, sigma: float = LEARNABLE_INIT_SIGMA) -> np.ndarray:
    """Mean of the source prototypes over domains plus small Gaussian noise, per learnable slot."""
    if S < 0:
        raise ConfigError("learnable prototype count must be >= 0")
    base = np.asarray(z_s, dtype=np.float64).mean(axis=0)
    rng = geo.rng_for(seed, 0xB4A2)
    return (base[None] + rng.normal(scale=sigma, size=(S,) + base.shape)).astype(np.float32)


def estimate_source_prototypes(
    features: np.ndarray | Sequence[np.ndarray],
    domains: Sequence[str],
    tasks: Sequence,
    domain_order: Sequence[str],
    n_tasks: int = len(TASKS),
) -> np.ndarray:
    """Token-position-wise mean feature per (domain, task) cell -> (R, K, M, C)."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 3:
        raise ShapeError(f"features must be (N, M, C), got {feats.shape}")
    if not (len(domains) == len(tasks) == feats.shape[0]):
        raise ContractError("features, domains and tasks must align")
    task_idx = np.array([int(TaskKind.parse(t)) for t in tasks])
    dom = np.array(list(domains))
    out = np.zeros((len(domain_order), n_tasks) + feats.shape[1:], dtype=np.float64)
    for i, d in enumerate(domain_order):
        for k in range(n_tasks):
            sel = (dom == d) & (task_idx == k)
            if not sel.any():
                raise EstimationError(f"no source samples for domain {d!r}, task {TaskKind(k).label}")
            out[i, k] = feats[sel].mean(axis=0)
    return out.astype(np.float32)


def estimate_from_model(model, samples, domain_order: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    """Encode every sample's query input and average per (domain, task); returns (z_s, features)."""
    from .model import encode_features

    feats = np.stack([encode_features(model, s.query_input) for s in samples])
    z_s = estimate_source_prototypes(feats, [s.query_domain for s in samples], [s.task for s in samples], domain_order)
    return z_s, feats


def repeat_tokens(tokens, x: int) -> ad.Tensor:
    """``x`` stacked copies of the (M, C) test tokens."""
    if x < 1:
        raise ContractError(f"repeat count must be >= 1, got {x}")
    t = tokens if isinstance(tokens, ad.Tensor) else ad.as_tensor(tokens)
    return ad.broadcast_to(ad.expand_dims(t, 0), (x,) + t.shape)


def similarity(prototypes, tokens) -> ad.Tensor:
    """Mean over tokens of the cosine between prototype row j and test row j -> (X, K)."""
    proto = prototypes if isinstance(prototypes, ad.Tensor) else ad.as_tensor(prototypes)
    tok = tokens if isinstance(tokens, ad.Tensor) else ad.as_tensor(tokens)
    if proto.ndim != 4 or tok.ndim != 2 or proto.shape[2:] != tok.shape:
        raise ShapeError(f"similarity needs (X, K, M, C) prototypes and (M, C) tokens, got {proto.shape} and {tok.shape}")
    X, K = proto.shape[:2]
    if X == 0:
        return ad.Tensor(np.zeros((0, K), dtype=proto.dtype))
    rep = ad.expand_dims(repeat_tokens(tok, X), 1)  # (X, 1, M, C)
    cos = ad.sum_(ad.normalize_last(proto) * ad.normalize_last(rep), axis=-1)
    return ad.mean(cos, axis=-1)


@dataclass
class MixedPrototypes:
    z_m: ad.Tensor  # (R, S, K, M, C)
    w_s: ad.Tensor  # (R, S, K)
    w_l: ad.Tensor  # (R, S, K)


def mix_prototypes(z_s, z_l, s_s, s_l) -> MixedPrototypes:
    """Similarity-balanced pairing of every source prototype with every learnable one."""
    zs = z_s if isinstance(z_s, ad.Tensor) else ad.as_tensor(z_s)
    zl = z_l if isinstance(z_l, ad.Tensor) else ad.as_tensor(z_l)
    ss = s_s if isinstance(s_s, ad.Tensor) else ad.as_tensor(s_s)
    sl = s_l if isinstance(s_l, ad.Tensor) else ad.as_tensor(s_l)
    a = ad.expand_dims(ss, 1)  # (R, 1, K)
    b = ad.expand_dims(sl, 0)  # (1, S, K)
    denom = a + b
    degenerate = np.abs(denom.data) < DEGENERATE_DENOM
    safe = ad.where(degenerate, 1.0, denom)
    w_s = ad.where(degenerate, 0.5, a / safe)
    w_l = 1.0 - w_s
    z_m = ad.expand_dims(ad.expand_dims(w_s, -1), -1) * ad.expand_dims(zs, 1) + ad.expand_dims(
        ad.expand_dims(w_l, -1), -1
    ) * ad.expand_dims(zl, 0)
    return MixedPrototypes(z_m, w_s, w_l)


def save_bank(bank: PrototypeBank, stem, extra_meta: dict | None = None) -> None:
    meta = {f"dims.{k}": v for k, v in bank.dims().items()}
    meta["domains"] = ",".join(bank.domains) or "-"
    meta["source_checksum"] = bank.source_checksum or "-"
    meta.update(extra_meta or {})
    write_blob(stem, {"z_s": bank.z_s.data, "z_l": bank.z_l.data}, meta)


def load_bank(stem, expected: dict[str, int] | None = None) -> PrototypeBank:
    arrays, meta = read_blob(stem)
    dims = {k: int(meta[f"dims.{k}"]) for k in ("R", "S", "K", "M", "C")}
    for key, value in (expected or {}).items():
        if dims[key] != value:
            raise ConfigError(f"bank {key}={dims[key]} does not match configured {key}={value}")
    z_s = arrays["z_s"].reshape(dims["R"], dims["K"], dims["M"], dims["C"])
    z_l = arrays["z_l"].reshape(dims["S"], dims["K"], dims["M"], dims["C"])
    domains = tuple(d for d in meta.get("domains", "-").split(",") if d and d != "-")
    src = meta.get("source_checksum", "-")
    return PrototypeBank(
        ad.Parameter(z_s, name="bank.z_s", trainable=False),
        ad.Parameter(z_l, name="bank.z_l"),
        domains,
        "" if src == "-" else src,
    )
