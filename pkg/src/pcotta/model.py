"""Patch encoder, token-mixing masked point model, masking policy and source pretraining.

The context sequence is four blocks of ``M`` tokens in a fixed order:
query input, query target, prompt input, prompt target.  Target clouds are
grouped around their input's patch centres, so row ``j`` of an input block
and row ``j`` of its target block describe the same neighbourhood.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .blobs import read_blob, write_blob, checksum
from .errors import ConfigError, ShapeError, SizeError, TrainingError

log = logging.getLogger(__name__)

ROLES = ("query_input", "query_target", "prompt_input", "prompt_target")
QUERY_INPUT, QUERY_TARGET, PROMPT_INPUT, PROMPT_TARGET = range(4)
MASK_RATIO = 0.7


@dataclass(frozen=True)
class ModelDims:
    M: int = 16
    C: int = 32
    g: int = 16
    hidden: int = 64

    def __post_init__(self):
        for name, v in asdict(self).items():
            if int(v) < 1:
                raise ConfigError(f"model dim {name} must be >= 1, got {v}")


# ---------------------------------------------------------------- patch geometry


def cloud_patches(cloud, dims: ModelDims) -> geo.PatchSet:
    """FPS centres (from the canonically ordered cloud) with their kNN groups."""
    p = geo.check_cloud(cloud)
    if p.shape[0] < max(dims.g, dims.M):
        raise SizeError(f"cloud has {p.shape[0]} points; encoding needs at least {max(dims.g, dims.M)}")
    p = p[geo.canonical_order(p)]
    centers = geo.farthest_point_sample(p, dims.M, start=0)
    return geo.knn_group(p, centers, dims.g)


def target_patches(target, centers: np.ndarray, dims: ModelDims) -> geo.PatchSet:
    t = geo.check_cloud(target)
    if t.shape[0] < dims.g:
        raise SizeError(f"target has {t.shape[0]} points; grouping needs at least {dims.g}")
    return geo.group_around(t, centers, dims.g)


@dataclass
class ContextGeometry:
    """Patch groups (4, M, g, 3) and centres (4, M, 3) for one context pair."""

    groups: np.ndarray
    centers: np.ndarray


def prepare_context(sample, dims: ModelDims, with_query_target: bool = True) -> ContextGeometry:
    qi = cloud_patches(sample.query_input, dims)
    pi = cloud_patches(sample.prompt_input, dims)
    pt = target_patches(sample.prompt_target, pi.centers, dims)
    if with_query_target and sample.query_target is not None:
        qt_groups = target_patches(sample.query_target, qi.centers, dims).groups
    else:
        qt_groups = np.zeros_like(qi.groups)
    groups = np.stack([qi.groups, qt_groups, pi.groups, pt.groups]).astype(np.float32)
    centers = np.stack([qi.centers, qi.centers, pi.centers, pi.centers]).astype(np.float32)
    return ContextGeometry(groups, centers)


# ---------------------------------------------------------------- tokens and masks


@dataclass
class TokenSequence:
    tokens: ad.Tensor  # (rows, C)
    roles: list[tuple[str, int, int]] = field(default_factory=list)

    @property
    def rows(self) -> int:
        return self.tokens.shape[-2]

    def block(self, role: str) -> ad.Tensor:
        for name, lo, hi in self.roles:
            if name == role:
                return self.tokens[lo:hi]
        raise KeyError(role)

    def split(self) -> list["TokenSequence"]:
        return [TokenSequence(self.tokens[lo:hi], [(name, 0, hi - lo)]) for name, lo, hi in self.roles]


def concat_context(q_in: TokenSequence, q_tgt: TokenSequence, p_in: TokenSequence, p_tgt: TokenSequence) -> TokenSequence:
    parts = [q_in, q_tgt, p_in, p_tgt]
    widths = {p.tokens.shape[-1] for p in parts}
    if len(widths) != 1:
        raise ShapeError(f"token width mismatch across blocks: {sorted(widths)}")
    roles, lo = [], 0
    for role, part in zip(ROLES, parts):
        name = part.roles[0][0] if part.roles else role
        roles.append((name, lo, lo + part.rows))
        lo += part.rows
    return TokenSequence(ad.concat([p.tokens for p in parts], axis=-2), roles)


class MaskMode(enum.Enum):
    PRETRAIN = "pretrain"
    TEST_TIME = "test_time"


@dataclass(frozen=True)
class MaskSpec:
    mask: np.ndarray  # bool (4M,)
    mode: MaskMode

    @classmethod
    def test_time(cls, M: int) -> "MaskSpec":
        m = np.zeros(4 * M, dtype=bool)
        m[M : 2 * M] = True
        return cls(m, MaskMode.TEST_TIME)

    @classmethod
    def pretrain(cls, M: int, rng: np.random.Generator, ratio: float = MASK_RATIO) -> "MaskSpec":
        total = 4 * M
        count = masked_count(total, ratio)
        m = np.zeros(total, dtype=bool)
        m[rng.choice(total, size=count, replace=False)] = True
        return cls(m, MaskMode.PRETRAIN)

    @classmethod
    def empty(cls, M: int) -> "MaskSpec":
        return cls(np.zeros(4 * M, dtype=bool), MaskMode.PRETRAIN)


def masked_count(maskable: int, ratio: float = MASK_RATIO) -> int:
    """Round-half-up count of masked positions."""
    return int(math.floor(ratio * maskable + 0.5))


def apply_mask(seq, spec: MaskSpec | np.ndarray, mask_token) -> ad.Tensor:
    """Replace masked rows of ``seq`` (..., 4M, C) by ``mask_token`` (C,)."""
    tokens = seq.tokens if isinstance(seq, TokenSequence) else seq
    mask = spec.mask if isinstance(spec, MaskSpec) else np.asarray(spec, dtype=bool)
    if mask.shape[-1] != tokens.shape[-2]:
        raise ShapeError(f"mask length {mask.shape[-1]} does not match sequence length {tokens.shape[-2]}")
    return ad.where(mask[..., None], mask_token, tokens)


# ---------------------------------------------------------------- the model


def _init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    return (rng.normal(size=shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> ad.Tensor:
    mu = ad.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = ad.mean(ad.square(xc), axis=-1, keepdims=True)
    return xc / ad.sqrt(var + eps) * gain + bias


class MPMModel:
    """Shared encoder F and token-mixing predictor Phi.

    Parameter names are prefixed ``enc.`` (encoder), ``phi.`` (mixing block
    and decoder) and ``phi.norm`` (normalization gains/biases inside Phi).
    """

    n_mix_layers = 2

    def __init__(self, dims: ModelDims = ModelDims(), seed: int = 0):
        self.dims = dims
        rng = geo.rng_for(seed, 0x40DE1)
        M, C, g, H = dims.M, dims.C, dims.g, dims.hidden
        p: dict[str, np.ndarray] = {
            "enc.w1": _init(rng, 3, (3, H)),
            "enc.b1": np.zeros(H, np.float32),
            "enc.w2": _init(rng, H, (H, C)),
            "enc.b2": np.zeros(C, np.float32),
            "enc.pos.w1": _init(rng, 3, (3, C)),
            "enc.pos.b1": np.zeros(C, np.float32),
            "enc.pos.w2": _init(rng, C, (C, C)),
            "enc.pos.b2": np.zeros(C, np.float32),
            "phi.mask_token": (rng.normal(size=C) * 0.02).astype(np.float32),
            "phi.role": (rng.normal(size=(4, C)) * 0.02).astype(np.float32),
            "phi.pos.w1": _init(rng, 3, (3, C)),
            "phi.pos.b1": np.zeros(C, np.float32),
            "phi.pos.w2": _init(rng, C, (C, C)),
            "phi.pos.b2": np.zeros(C, np.float32),
        }
        for layer in range(self.n_mix_layers):
            pre = f"phi.mix{layer}"
            p[f"phi.norm{layer}.gain"] = np.ones(C, np.float32)
            p[f"phi.norm{layer}.bias"] = np.zeros(C, np.float32)
            p[f"{pre}.self"] = _init(rng, 3 * C, (C, H))
            p[f"{pre}.ctx"] = _init(rng, 3 * C, (C, H))
            p[f"{pre}.pair"] = _init(rng, 3 * C, (C, H))
            p[f"{pre}.b"] = np.zeros(H, np.float32)
            p[f"{pre}.out"] = (_init(rng, H, (H, C)) * 0.5).astype(np.float32)
            p[f"{pre}.out_b"] = np.zeros(C, np.float32)
        p["phi.dec.w1"] = _init(rng, C, (C, H))
        p["phi.dec.b1"] = np.zeros(H, np.float32)
        p["phi.dec.w2"] = (_init(rng, H, (H, g * 3)) * 0.1).astype(np.float32)
        p["phi.dec.b2"] = np.zeros(g * 3, np.float32)
        self.params = {name: ad.Parameter(v, name=name) for name, v in p.items()}
        perm = np.concatenate([np.arange(M, 2 * M), np.arange(0, M), np.arange(3 * M, 4 * M), np.arange(2 * M, 3 * M)])
        self._partner = perm
        self._roles = np.repeat(np.arange(4), M)

    # -- parameter groups
    def parameters(self) -> list[ad.Parameter]:
        return list(self.params.values())

    def encoder_parameters(self) -> list[ad.Parameter]:
        return [p for n, p in self.params.items() if n.startswith("enc.")]

    def phi_parameters(self) -> list[ad.Parameter]:
        return [p for n, p in self.params.items() if n.startswith("phi.")]

    def norm_parameters(self) -> list[ad.Parameter]:
        return [p for n, p in self.params.items() if n.startswith("phi.norm")]

    def set_trainable(self, flag: bool, which: Sequence[ad.Parameter] | None = None) -> None:
        for p in which if which is not None else self.parameters():
            p.trainable = flag

    def __getitem__(self, name: str) -> ad.Parameter:
        return self.params[name]

    # -- network pieces
    def _mlp2(self, x, pre: str):
        P = self.params
        h = ad.relu(ad.linear(x, P[f"{pre}.w1"], P[f"{pre}.b1"]))
        return ad.linear(h, P[f"{pre}.w2"], P[f"{pre}.b2"])

    def encode_groups(self, groups, centers) -> ad.Tensor:
        """Tokens (..., M, C) from relative patch coordinates (..., M, g, 3) and centres (..., M, 3)."""
        feats = ad.max_(self._mlp2(groups, "enc"), axis=-2)
        return feats + self._mlp2(centers, "enc.pos")

    def predict_offsets(self, seq, centers, rows: np.ndarray | None = None) -> ad.Tensor:
        """Mix the (masked) sequence (B, 4M, C) and decode ``rows`` into (B, len(rows), g, 3) offsets."""
        P = self.params
        x = seq + P["phi.role"][self._roles] + self._mlp2(centers, "phi.pos")
        for layer in range(self.n_mix_layers):
            pre = f"phi.mix{layer}"
            h = layer_norm(x, P[f"phi.norm{layer}.gain"], P[f"phi.norm{layer}.bias"])
            ctx = ad.mean(h, axis=-2, keepdims=True)
            pair = ad.take(h, (Ellipsis, self._partner, slice(None)))
            z = ad.relu(h @ P[f"{pre}.self"] + ctx @ P[f"{pre}.ctx"] + pair @ P[f"{pre}.pair"] + P[f"{pre}.b"])
            x = x + ad.linear(z, P[f"{pre}.out"], P[f"{pre}.out_b"])
        if rows is not None:
            x = ad.take(x, (Ellipsis, rows, slice(None)))
        out = self._mlp2(x, "phi.dec")
        return ad.reshape(out, out.shape[:-1] + (self.dims.g, 3))

    # -- persistence
    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.params.items()}

    def checksum(self, which: str | None = None) -> str:
        return checksum({n: p.data for n, p in self.params.items() if which is None or n.startswith(which)})

    def copy(self) -> "MPMModel":
        other = MPMModel.__new__(MPMModel)
        other.dims = self.dims
        other.params = {n: ad.Parameter(p.data.copy(), name=n, trainable=p.trainable) for n, p in self.params.items()}
        other._partner = self._partner
        other._roles = self._roles
        return other

    def save(self, stem, extra_meta: dict | None = None) -> None:
        meta = {f"model_dims.{k}": v for k, v in asdict(self.dims).items()}
        meta.update(extra_meta or {})
        write_blob(stem, self.state_arrays(), meta)

    @classmethod
    def load(cls, stem, expected: ModelDims | None = None) -> "MPMModel":
        arrays, meta = read_blob(stem)
        try:
            dims = ModelDims(**{k: int(meta[f"model_dims.{k}"]) for k in ("M", "C", "g", "hidden")})
        except KeyError as exc:
            raise ConfigError(f"checkpoint {stem} lacks model_dims entry {exc}") from None
        if expected is not None and dims != expected:
            raise ConfigError(f"checkpoint dims {dims} do not match configured dims {expected}")
        model = cls(dims)
        for name, p in model.params.items():
            if name not in arrays:
                raise ConfigError(f"checkpoint {stem} lacks tensor {name}")
            p.assign(arrays[name])
        return model


# ---------------------------------------------------------------- functional API


def encode(cloud, model: MPMModel, role: str = "query_input") -> TokenSequence:
    """Patch tokens (M, C) of a single cloud."""
    ps = cloud_patches(cloud, model.dims)
    tokens = model.encode_groups(ps.groups, ps.centers)
    return TokenSequence(tokens, [(role, 0, model.dims.M)])


def encode_features(model: MPMModel, cloud) -> np.ndarray:
    with ad.no_grad():
        return encode(cloud, model).tokens.data.astype(np.float32)


def context_tokens(model: MPMModel, ctx: ContextGeometry) -> ad.Tensor:
    """(..., 4M, C) tokens for stacked context geometry (..., 4, M, g, 3)."""
    tok = model.encode_groups(ctx.groups, ctx.centers)
    return ad.reshape(tok, tok.shape[:-3] + (4 * model.dims.M, model.dims.C))


def forward(model: MPMModel, masked, centers: np.ndarray, rows: np.ndarray | None = None) -> ad.Tensor:
    """Predicted absolute patches; defaults to the query-target block (M, g, 3)."""
    M = model.dims.M
    tokens = masked.tokens if isinstance(masked, TokenSequence) else masked
    centers = np.asarray(centers, dtype=np.float32).reshape(tokens.shape[:-2] + (4 * M, 3))
    if rows is None:
        rows = np.arange(M, 2 * M)
    offsets = model.predict_offsets(tokens, centers, rows)
    return offsets + centers[..., rows, :][..., None, :]


# ---------------------------------------------------------------- pretraining


def _batch_geometry(contexts: Sequence[ContextGeometry]) -> ContextGeometry:
    return ContextGeometry(np.stack([c.groups for c in contexts]), np.stack([c.centers for c in contexts]))


def masked_patch_loss(model: MPMModel, ctx: ContextGeometry, masks: np.ndarray) -> ad.Tensor:
    """Mean per-patch Chamfer distance over the masked rows of a batch."""
    M, g = model.dims.M, model.dims.g
    seq = context_tokens(model, ctx)
    masked = apply_mask(seq, masks, model["phi.mask_token"])
    centers = ctx.centers.reshape(ctx.centers.shape[:-3] + (4 * M, 3))
    offsets = model.predict_offsets(masked, centers)
    gt = ctx.groups.reshape(ctx.groups.shape[:-4] + (4 * M, g, 3))
    pred = ad.take(offsets, masks)
    return ad.mean(geo.chamfer_batch(pred, gt[masks]))


def pretrain_masks(n: int, M: int, seed: int, epoch: int, testtime_fraction: float = 0.0) -> np.ndarray:
    rng = geo.rng_for(seed, 0x3A5C, epoch)
    masks = np.stack([MaskSpec.pretrain(M, rng).mask for _ in range(n)])
    if testtime_fraction > 0:
        flip = rng.uniform(size=n) < testtime_fraction
        masks[flip] = MaskSpec.test_time(M).mask
    return masks


def pretrain(
    model: MPMModel,
    samples: Sequence,
    epochs: int = 30,
    optimizer: ad.AdamW | None = None,
    batch_size: int = 16,
    seed: int = 0,
    lr: float = 1e-3,
    weight_decay: float = 0.05,
    testtime_fraction: float = 0.0,
    contexts: Sequence[ContextGeometry] | None = None,
) -> list[float]:
    """Minimize masked-patch Chamfer loss; returns the per-epoch mean loss."""
    if not samples:
        raise ConfigError("pretraining needs at least one sample")
    if epochs <= 0:
        return []
    contexts = list(contexts) if contexts is not None else [prepare_context(s, model.dims) for s in samples]
    n = len(contexts)
    steps = math.ceil(n / batch_size)
    if optimizer is None:
        optimizer = ad.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay, horizon=epochs * steps)
    trace = []
    for epoch in range(epochs):
        order = geo.rng_for(seed, 0xE90C, epoch).permutation(n)
        masks = pretrain_masks(n, model.dims.M, seed, epoch, testtime_fraction)
        total = 0.0
        for b in range(steps):
            idx = order[b * batch_size : (b + 1) * batch_size]
            batch = _batch_geometry([contexts[i] for i in idx])
            with ad.Tape() as tape:
                loss = masked_patch_loss(model, batch, masks[idx])
                tape.backward(loss)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"pretraining diverged at epoch {epoch + 1} (loss={value})")
            optimizer.step()
            total += value * len(idx)
        trace.append(total / n)
        log.info("pretrain epoch %d/%d loss %.6f", epoch + 1, epochs, trace[-1])
    return trace


def evaluate_masked_loss(model: MPMModel, samples: Sequence, seed: int = 0, contexts=None, batch_size: int = 64) -> float:
    """Mean masked-patch loss at the current weights, no updates."""
    contexts = list(contexts) if contexts is not None else [prepare_context(s, model.dims) for s in samples]
    masks = pretrain_masks(len(contexts), model.dims.M, seed, -1)
    total = 0.0
    with ad.no_grad():
        for lo in range(0, len(contexts), batch_size):
            batch = _batch_geometry(contexts[lo : lo + batch_size])
            total += float(masked_patch_loss(model, batch, masks[lo : lo + batch_size]).data) * len(contexts[lo : lo + batch_size])
    return total / len(contexts)
