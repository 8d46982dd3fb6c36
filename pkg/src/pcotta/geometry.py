"""Point-cloud containers, sampling/grouping kernels, Chamfer distance and shape synthesis.

Clouds are plain ``(N, 3)`` float32 arrays; :func:`check_cloud` is the
validation entry point used throughout the package.  All nearest-neighbour
ties are broken by the lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ContractError, ParseError, SizeError, ConfigError

CATEGORIES = ("sphere", "box", "cylinder", "cone", "torus", "capsule", "wedge")
STYLES = ("SRC_A", "SRC_B", "TGT_A", "TGT_B")
SOURCE_STYLES = ("SRC_A", "SRC_B")
TARGET_STYLES = ("TGT_A", "TGT_B")

# style -> (base sampling style, noise sigma, keep fraction)
STYLE_SIGNATURES = {
    "SRC_A": ("SRC_A", 0.0, 1.0),
    "SRC_B": ("SRC_B", 0.0, 1.0),
    "TGT_A": ("SRC_A", 0.02, 1.0),
    "TGT_B": ("SRC_B", 0.03, 0.85),
}


def rng_for(*keys: int) -> np.random.Generator:
    """Independent generator for a tuple of integer keys."""
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]))


def check_cloud(points, min_points: int = 1, name: str = "cloud") -> np.ndarray:
    """Validate and return ``points`` as a C-contiguous ``(N, 3)`` float32 array."""
    arr = np.asarray(points.data if isinstance(points, ad.Tensor) else points, dtype=np.float32)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ContractError(f"{name} must have shape (N, 3), got {arr.shape}")
    if arr.shape[0] < min_points:
        raise SizeError(f"{name} needs at least {min_points} points, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} contains non-finite coordinates")
    return np.ascontiguousarray(arr)


def normalize_cloud(points) -> np.ndarray:
    """Centre on the centroid and scale so the farthest point has radius 1."""
    p = check_cloud(points).astype(np.float64)
    p = p - p.mean(axis=0)
    r = np.sqrt((p * p).sum(axis=1)).max()
    if r > 0:
        p = p / r
    return p.astype(np.float32)


def canonical_order(points) -> np.ndarray:
    """Permutation sorting points lexicographically by (x, y, z)."""
    p = np.asarray(points)
    return np.lexsort((p[:, 2], p[:, 1], p[:, 0]))


# ---------------------------------------------------------------- rigid transforms


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-5) or abs(np.linalg.det(r) - 1) > 1e-5:
            raise ContractError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_axis_angle(cls, axis, angle: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        x, y, z = axis
        k = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
        rot = np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)
        return cls(rot, translation)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self`` after ``other``."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)


def random_rotation(rng: np.random.Generator, max_angle: float) -> RigidTransform:
    """Rotation by an angle uniform in [0, max_angle] about a uniformly random axis."""
    axis = rng.normal(size=3)
    while np.linalg.norm(axis) < 1e-8:
        axis = rng.normal(size=3)
    angle = rng.uniform(0.0, max_angle)
    return RigidTransform.from_axis_angle(axis, angle)


def apply_transform(cloud, t: RigidTransform) -> np.ndarray:
    p = check_cloud(cloud).astype(np.float64)
    return (p @ t.rotation.T + t.translation).astype(np.float32)


def kabsch(src, dst) -> RigidTransform:
    """Least-squares rigid transform mapping corresponding rows of ``src`` onto ``dst``."""
    a = np.asarray(src, dtype=np.float64)
    b = np.asarray(dst, dtype=np.float64)
    ca, cb = a.mean(axis=0), b.mean(axis=0)
    h = (a - ca).T @ (b - cb)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rot, cb - rot @ ca)


def icp_rotation(src, dst, iterations: int = 10) -> RigidTransform:
    """Rotation about the origin aligning ``src`` to ``dst`` by point-to-point ICP."""
    a = check_cloud(src).astype(np.float64)
    b = check_cloud(dst).astype(np.float64)
    rot = np.eye(3)
    for _ in range(iterations):
        moved = a @ rot.T
        nn = np.argmin(_sqdist(moved, b), axis=1)
        h = a.T @ b[nn]
        u, _, vt = np.linalg.svd(h)
        d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
        new = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
        if np.allclose(new, rot, atol=1e-9):
            rot = new
            break
        rot = new
    return RigidTransform(rot, np.zeros(3))


# ---------------------------------------------------------------- sampling and grouping


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def farthest_point_sample(cloud, m: int, start: int = 0) -> np.ndarray:
    """Greedy max-min selection of ``m`` indices beginning at ``start``."""
    p = check_cloud(cloud).astype(np.float64)
    n = p.shape[0]
    if not 1 <= m <= n:
        raise SizeError(f"cannot sample {m} of {n} points")
    if not 0 <= start < n:
        raise SizeError(f"start index {start} out of range for {n} points")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = start
    diff = p - p[start]
    mind = np.einsum("ij,ij->i", diff, diff)
    for i in range(1, m):
        nxt = int(np.argmax(mind))
        chosen[i] = nxt
        diff = p - p[nxt]
        mind = np.minimum(mind, np.einsum("ij,ij->i", diff, diff))
    return chosen


@dataclass
class PatchSet:
    """Patch centres and their ``g`` nearest neighbours, relative to the centre."""

    centers: np.ndarray  # (m, 3)
    groups: np.ndarray  # (m, g, 3)
    indices: np.ndarray  # (m, g) indices into the source cloud

    @property
    def m(self) -> int:
        return self.centers.shape[0]

    @property
    def g(self) -> int:
        return self.groups.shape[1]

    def absolute(self) -> np.ndarray:
        return self.groups + self.centers[:, None, :]


def knn_indices(cloud, centers: np.ndarray, g: int) -> np.ndarray:
    p = check_cloud(cloud).astype(np.float64)
    if g > p.shape[0] or g < 1:
        raise SizeError(f"cannot group {g} neighbours from {p.shape[0]} points")
    d = _sqdist(np.asarray(centers, dtype=np.float64), p)
    return np.argsort(d, axis=1, kind="stable")[:, :g]


def group_around(cloud, centers, g: int) -> PatchSet:
    """The ``g`` nearest points of ``cloud`` around arbitrary centre coordinates."""
    p = check_cloud(cloud)
    centers = np.asarray(centers, dtype=np.float32).reshape(-1, 3)
    idx = knn_indices(p, centers, g)
    groups = p[idx] - centers[:, None, :]
    return PatchSet(centers.copy(), groups.astype(np.float32), idx)


def knn_group(cloud, centers: np.ndarray, g: int) -> PatchSet:
    """Group the ``g`` nearest neighbours of each centre index."""
    p = check_cloud(cloud)
    centers = np.asarray(centers, dtype=np.int64)
    return group_around(p, p[centers], g)


# ---------------------------------------------------------------- Chamfer distance


def _chamfer_kernel(p: np.ndarray, q: np.ndarray):
    """Batched nearest-neighbour assignment; returns (d_pq, d_qp, nn_pq, nn_qp)."""
    diff = p[..., :, None, :].astype(np.float64) - q[..., None, :, :].astype(np.float64)
    d = np.einsum("...ijk,...ijk->...ij", diff, diff)
    nn_pq = np.argmin(d, axis=-1)
    nn_qp = np.argmin(d, axis=-2)
    d_pq = np.take_along_axis(d, nn_pq[..., None], axis=-1)[..., 0]
    d_qp = np.take_along_axis(d, nn_qp[..., None, :], axis=-2)[..., 0, :]
    return d_pq, d_qp, nn_pq, nn_qp


def chamfer_batch(p, q, one_sided: bool = False) -> ad.Tensor:
    """Per-item squared Chamfer distance between ``p`` (..., n, 3) and ``q`` (..., m, 3).

    With ``one_sided`` only the ``q -> p`` term is kept (every point of ``q``
    must be explained by ``p``).  Nearest-neighbour assignments are held
    constant in the backward pass.
    """
    pr = p.data if isinstance(p, ad.Tensor) else np.asarray(p)
    qr = q.data if isinstance(q, ad.Tensor) else np.asarray(q)
    if pr.shape[-2] == 0 or qr.shape[-2] == 0:
        raise ContractError("Chamfer distance needs non-empty clouds")
    dtype = np.result_type(pr.dtype, qr.dtype)
    n, m = pr.shape[-2], qr.shape[-2]
    d_pq, d_qp, nn_pq, nn_qp = _chamfer_kernel(pr, qr)
    value = d_qp.mean(axis=-1) if one_sided else d_pq.mean(axis=-1) + d_qp.mean(axis=-1)

    def vjp(g):
        g = np.asarray(g, dtype=np.float64)[..., None, None]
        pr64, qr64 = pr.astype(np.float64), qr.astype(np.float64)
        # q -> p term: each q point pulls its nearest p point
        q_near = np.take_along_axis(pr64, nn_qp[..., None], axis=-2)
        r2 = 2.0 * (q_near - qr64) / m
        gq = -r2
        gp = _scatter_rows(nn_qp, r2, n)
        if not one_sided:
            p_near = np.take_along_axis(qr64, nn_pq[..., None], axis=-2)
            r1 = 2.0 * (pr64 - p_near) / n
            gp = gp + r1
            gq = gq - _scatter_rows(nn_pq, r1, m)
        gp = (g * gp).astype(pr.dtype, copy=False)
        gq = (g * gq).astype(qr.dtype, copy=False)
        return ad._unbroadcast(gp, pr.shape), ad._unbroadcast(gq, qr.shape)

    return ad.make_op(value.astype(dtype), (p, q), vjp)


def _scatter_rows(idx: np.ndarray, vals: np.ndarray, size: int) -> np.ndarray:
    """Sum ``vals[..., k, :]`` into row ``idx[..., k]`` of a (..., size, 3) array."""
    lead = idx.shape[:-1]
    flat_idx = idx.reshape(-1, idx.shape[-1])
    batches = flat_idx.shape[0]
    flat = (flat_idx + np.arange(batches)[:, None] * size).ravel()
    flat_vals = vals.reshape(-1, 3)
    out = np.stack(
        [np.bincount(flat, weights=flat_vals[:, c], minlength=batches * size) for c in range(3)], axis=-1
    )
    return out.reshape(lead + (size, 3))


def chamfer_distance(p, g) -> ad.Tensor:
    """Symmetric squared Chamfer distance between two clouds, differentiable in both."""
    if isinstance(p, ad.Tensor):
        if p.ndim != 2 or p.shape[-1] != 3 or p.shape[0] == 0:
            raise ContractError(f"prediction must be a non-empty (N, 3) cloud, got {p.shape}")
    else:
        p = check_cloud(p, name="p")
    if not isinstance(g, ad.Tensor):
        g = check_cloud(g, name="g")
    return chamfer_batch(p, g)


def chamfer_value(p, g) -> float:
    return float(chamfer_distance(check_cloud(p), check_cloud(g)).data)


# ---------------------------------------------------------------- corruption and synthesis


def corrupt(cloud, noise_sigma: float, keep_fraction: float, seed: int) -> np.ndarray:
    """Gaussian jitter followed by a half-space drop down to ``keep_fraction`` of the points."""
    p = check_cloud(cloud).astype(np.float64)
    if noise_sigma < 0:
        raise ContractError("noise_sigma must be non-negative")
    if not 0 < keep_fraction <= 1:
        raise ContractError("keep_fraction must lie in (0, 1]")
    n_keep = int(round(keep_fraction * p.shape[0]))
    if n_keep < 8:
        raise SizeError(f"corruption would leave {n_keep} points (< 8)")
    rng = rng_for(seed, 0xC0)
    if noise_sigma > 0:
        p = p + rng.normal(scale=noise_sigma, size=p.shape)
    if n_keep < p.shape[0]:
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        order = np.argsort(p @ direction, kind="stable")
        p = p[np.sort(order[:n_keep])]
    return p.astype(np.float32)


@dataclass(frozen=True)
class ShapeSpec:
    category: str
    style: str
    seed: int
    point_count: int = 256

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ConfigError(f"unknown shape category {self.category!r}; expected one of {CATEGORIES}")
        if self.style not in STYLES:
            raise ConfigError(f"unknown domain style {self.style!r}; expected one of {STYLES}")
        if self.point_count < 8:
            raise ConfigError("point_count must be at least 8")


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _pick_by_area(rng, areas, n):
    areas = np.asarray(areas, dtype=np.float64)
    return rng.choice(len(areas), size=n, p=areas / areas.sum())


def _surface_pool(category: str, n: int, rng: np.random.Generator, jitter: np.ndarray) -> np.ndarray:
    """``n`` points uniform by area on the surface of one parametric family."""
    sx, sy, sz = jitter
    if category == "sphere":
        return _unit(rng.normal(size=(n, 3)))
    if category == "box":
        a, b, c = 1.0 * sx, 0.7 * sy, 0.5 * sz
        faces = _pick_by_area(rng, [b * c, b * c, a * c, a * c, a * b, a * b], n)
        u = rng.uniform(-1, 1, size=(n, 3)) * np.array([a, b, c])
        axis = faces // 2
        sign = np.where(faces % 2 == 0, 1.0, -1.0)
        u[np.arange(n), axis] = sign * np.array([a, b, c])[axis]
        return u
    if category == "cylinder":
        r, h = 0.5 * sx, 0.8 * sz
        part = _pick_by_area(rng, [2 * np.pi * r * 2 * h, np.pi * r * r, np.pi * r * r], n)
        th = rng.uniform(0, 2 * np.pi, n)
        rad = np.where(part == 0, r, r * np.sqrt(rng.uniform(0, 1, n)))
        z = np.where(part == 0, rng.uniform(-h, h, n), np.where(part == 1, h, -h))
        return np.stack([rad * np.cos(th), rad * np.sin(th), z], axis=1)
    if category == "cone":
        r, h = 0.6 * sx, 0.7 * sz
        slant = np.hypot(r, 2 * h)
        part = _pick_by_area(rng, [np.pi * r * slant, np.pi * r * r], n)
        th = rng.uniform(0, 2 * np.pi, n)
        s = np.sqrt(rng.uniform(0, 1, n))
        rad = r * s
        z = np.where(part == 0, h - 2 * h * s, -h)
        return np.stack([rad * np.cos(th), rad * np.sin(th), z], axis=1)
    if category == "torus":
        big, small = 0.7 * sx, 0.25 * sz
        out = np.empty((0, 3))
        while out.shape[0] < n:
            th = rng.uniform(0, 2 * np.pi, 2 * n)
            ph = rng.uniform(0, 2 * np.pi, 2 * n)
            keep = rng.uniform(0, 1, 2 * n) < (big + small * np.cos(th)) / (big + small)
            th, ph = th[keep], ph[keep]
            ring = big + small * np.cos(th)
            pts = np.stack([ring * np.cos(ph), ring * np.sin(ph), small * np.sin(th)], axis=1)
            out = np.concatenate([out, pts])
        return out[:n]
    if category == "capsule":
        r, h = 0.35 * sx, 0.5 * sz
        part = _pick_by_area(rng, [2 * np.pi * r * 2 * h, 4 * np.pi * r * r], n)
        th = rng.uniform(0, 2 * np.pi, n)
        side = np.stack([r * np.cos(th), r * np.sin(th), rng.uniform(-h, h, n)], axis=1)
        cap = _unit(rng.normal(size=(n, 3))) * r
        cap[:, 2] += np.where(cap[:, 2] >= 0, h, -h)
        return np.where((part == 0)[:, None], side, cap)
    if category == "wedge":
        a, b, c = 0.8 * sx, 0.5 * sy, 0.7 * sz
        # right-triangle cross-section in xz: (-a,-c), (a,-c), (-a,c); extruded along y
        hyp = np.hypot(2 * a, 2 * c)
        tri = 0.5 * (2 * a) * (2 * c)
        areas = [tri, tri, 2 * a * 2 * b, 2 * c * 2 * b, hyp * 2 * b]
        part = _pick_by_area(rng, areas, n)
        u, v = rng.uniform(0, 1, n), rng.uniform(0, 1, n)
        flip = u + v > 1
        u, v = np.where(flip, 1 - u, u), np.where(flip, 1 - v, v)
        tx, tz = -a + 2 * a * u, -c + 2 * c * v
        y = rng.uniform(-b, b, n)
        s = rng.uniform(0, 1, n)
        pts = np.empty((n, 3))
        pts[:, 0] = np.select([part <= 1, part == 2, part == 3], [tx, -a + 2 * a * s, -a * np.ones(n)], a - 2 * a * s)
        pts[:, 2] = np.select([part <= 1, part == 2, part == 3], [tz, -c * np.ones(n), -c + 2 * c * s], -c + 2 * c * s)
        pts[:, 1] = np.select([part == 0, part == 1], [b * np.ones(n), -b * np.ones(n)], y)
        return pts
    raise ConfigError(f"unknown shape category {category!r}")


def _base_sample(category: str, style: str, seed: int, n: int) -> np.ndarray:
    rng = rng_for(seed, CATEGORIES.index(category), 0x5A)
    jitter = np.ones(3) if category == "sphere" else rng.uniform(0.85, 1.15, size=3)
    biased = style == "SRC_B"
    if category == "sphere":
        # antipodal pairs keep the centroid at the centre exactly
        half = n // 2 if n % 2 == 0 else (n - 3) // 2
        pool = _surface_pool(category, 4 * half if biased else half, rng, jitter)
        if biased:
            w = np.exp(1.5 * pool[:, 2])
            pool = pool[np.sort(rng.choice(len(pool), size=half, replace=False, p=w / w.sum()))]
        pts = np.concatenate([pool, -pool])
        if n % 2:
            e1 = _unit(rng.normal(size=3))
            e2 = _unit(np.cross(e1, _unit(rng.normal(size=3))))
            ang = np.array([0, 2 * np.pi / 3, 4 * np.pi / 3])
            tri = np.cos(ang)[:, None] * e1 + np.sin(ang)[:, None] * e2
            pts = np.concatenate([pts, tri])
        return pts
    if biased:
        pool = _surface_pool(category, 4 * n, rng, jitter)
        span = np.ptp(pool[:, 2]) or 1.0
        w = np.exp(1.5 * 2 * (pool[:, 2] - pool[:, 2].min()) / span)
        return pool[np.sort(rng.choice(len(pool), size=n, replace=False, p=w / w.sum()))]
    return _surface_pool(category, n, rng, jitter)


def sample_clean(spec: ShapeSpec) -> np.ndarray:
    """The normalized, uncorrupted sampling for ``spec``'s base style."""
    base, _, _ = STYLE_SIGNATURES[spec.style]
    return normalize_cloud(_base_sample(spec.category, base, spec.seed, spec.point_count))


def generate_shape(spec: ShapeSpec) -> np.ndarray:
    """Deterministic cloud for ``spec`` carrying its domain signature."""
    if not isinstance(spec, ShapeSpec):
        raise ConfigError("generate_shape expects a ShapeSpec")
    cloud = sample_clean(spec)
    _, sigma, keep = STYLE_SIGNATURES[spec.style]
    if sigma > 0 or keep < 1:
        cloud = normalize_cloud(corrupt(cloud, sigma, keep, seed=spec.seed ^ 0x7A3))
    return cloud


# ---------------------------------------------------------------- XYZ I/O


def save_xyz(cloud, path) -> None:
    p = check_cloud(cloud)
    Path(path).write_text("".join(f"{x:.9g} {y:.9g} {z:.9g}\n" for x, y, z in p.tolist()))


def load_xyz(path) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ParseError(f"{path}: line {lineno}: expected 3 coordinates, got {len(parts)}")
        try:
            rows.append([float(v) for v in parts])
        except ValueError:
            raise ParseError(f"{path}: line {lineno}: non-numeric coordinate") from None
    if not rows:
        raise ParseError(f"{path}: no points found")
    return check_cloud(np.array(rows))
