"""Multiresolution vertex-feature grid with analytic feature gradients.

The field stores one raw feature vector (f_r, f_g, f_b, f_sigma) per grid
vertex at several resolutions.  A query trilinearly interpolates each level,
sums the per-level features, and activates: sigmoid for color, softplus for
density.  Gradients with respect to the stored features are derived by hand
(chain rule through the activations and the trilinear weights), so training
needs no autodiff framework.

Fine levels whose vertex count exceeds the table size fall back to a spatial
hash (XOR of coordinates times fixed primes, modulo table size); colliding
vertices share a feature slot and their gradients accumulate.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass

import numpy as np

FEATURE_DIM = 4  # (f_r, f_g, f_b, f_sigma) raw features per vertex
MIN_TABLE_SIZE = 16

# Classic spatial-hash primes (Teschner et al. style); coordinates are XORed
# after multiplication, then reduced modulo the table size.
_HASH_PRIMES = np.array([73856093, 19349663, 83492791], dtype=np.uint64)

# Corner offsets of a grid cell in (i, j, k) order, shape (8, 3).
_CORNERS = np.array(
    [[i, j, k] for k in (0, 1) for j in (0, 1) for i in (0, 1)], dtype=np.int64
)

CHECKPOINT_MAGIC = b"RFLD"
CHECKPOINT_VERSION = 1
_HEADER_FMT = "<4sH IIII 6d 32s"  # magic, version, n_min, n_max, L, T, aabb, sha256


class OutOfBoundsError(ValueError):
    """A queried position lies outside the field's bounding box."""


class CheckpointError(ValueError):
    """A field checkpoint file is malformed or truncated."""


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned box given by a center point and a half-extent vector."""

    center: np.ndarray
    half_extent: np.ndarray

    def __post_init__(self):
        center = np.asarray(self.center, dtype=np.float64).reshape(3)
        half = np.asarray(self.half_extent, dtype=np.float64).reshape(3)
        if not np.all(half > 0):
            raise ValueError(f"half_extent must be strictly positive, got {half}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "half_extent", half)

    @property
    def lo(self) -> np.ndarray:
        return self.center - self.half_extent

    @property
    def hi(self) -> np.ndarray:
        return self.center + self.half_extent

    @property
    def size(self) -> np.ndarray:
        return 2.0 * self.half_extent

    def contains(self, points: np.ndarray, atol: float = 0.0) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return np.all((pts >= self.lo - atol) & (pts <= self.hi + atol), axis=-1)

    def to_json(self) -> dict:
        return {"center": self.center.tolist(), "half_extent": self.half_extent.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "Aabb":
        return cls(np.asarray(obj["center"]), np.asarray(obj["half_extent"]))


@dataclass(frozen=True)
class LevelSchedule:
    """Geometric progression of grid resolutions between n_min and n_max."""

    n_min: int
    n_max: int
    resolutions: tuple[int, ...]

    @property
    def levels(self) -> int:
        return len(self.resolutions)

    @property
    def growth(self) -> float:
        """Per-level resolution ratio; 1.0 for a single level."""
        if self.levels < 2 or self.n_min == self.n_max:
            return 1.0
        return math.exp((math.log(self.n_max) - math.log(self.n_min)) / (self.levels - 1))


def level_resolutions(n_min: int, n_max: int, levels: int) -> LevelSchedule:
    """Builds the per-level resolutions N_l = round(n_min * growth**l).

    A single level degenerates to [n_min] (the growth exponent divides by
    levels - 1, which is undefined there).
    """
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    if n_min < 2:
        raise ValueError(f"n_min must be >= 2, got {n_min}")
    if n_min > n_max:
        raise ValueError(f"n_min ({n_min}) must not exceed n_max ({n_max})")
    if levels == 1:
        return LevelSchedule(n_min, n_max, (n_min,))
    b = math.exp((math.log(n_max) - math.log(n_min)) / (levels - 1))
    res = tuple(int(math.floor(n_min * b**level + 0.5)) for level in range(levels))
    return LevelSchedule(n_min, n_max, res)


def dense_vertex_count(resolution: int) -> int:
    """Vertices of a cubic grid with `resolution` cells per axis."""
    return (resolution + 1) ** 3


def hash_coords(coords: np.ndarray, table_size: int) -> np.ndarray:
    """Spatial hash of integer (i, j, k) coordinates into [0, table_size)."""
    c = np.asarray(coords, dtype=np.uint64)
    h = (c[..., 0] * _HASH_PRIMES[0]) ^ (c[..., 1] * _HASH_PRIMES[1]) ^ (
        c[..., 2] * _HASH_PRIMES[2]
    )
    return (h % np.uint64(table_size)).astype(np.int64)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form is stable for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def freq_encode(values, octaves: int) -> np.ndarray:
    """Sinusoidal encoding (sin(2^k pi v), cos(2^k pi v)) for k = 0..octaves-1.

    octaves = 0 passes the input through unchanged.  For vector inputs the
    octave blocks are concatenated along the last axis.
    """
    if octaves < 0:
        raise ValueError(f"octaves must be >= 0, got {octaves}")
    v = np.asarray(values, dtype=np.float64)
    if octaves == 0:
        return v.copy()
    parts = []
    for k in range(octaves):
        phase = (2.0**k) * np.pi * v
        parts.append(np.sin(phase))
        parts.append(np.cos(phase))
    return np.concatenate([np.atleast_1d(p) for p in parts], axis=-1)


class FieldCache:
    """Intermediates of a batched query, retained for the backward pass."""

    __slots__ = ("indices", "weights", "raw", "rgb", "sigma", "n_points")

    def __init__(self, indices, weights, raw, rgb, sigma, n_points):
        self.indices = indices  # per level: (M, 8) int64 store slots
        self.weights = weights  # per level: (M, 8) trilinear weights
        self.raw = raw          # (M, 4) summed pre-activation features
        self.rgb = rgb          # (M, 3) activated color
        self.sigma = sigma      # (M,) activated density
        self.n_points = n_points


class MultiresField:
    """Learnable radiance field over an axis-aligned box.

    Color is direction-independent (Lambertian); density is non-negative by
    construction.  All query/backward entry points are batched over points.
    """

    def __init__(
        self,
        schedule: LevelSchedule,
        aabb: Aabb,
        table_size: int = 2**19,
        features: list[np.ndarray] | None = None,
        seed: int = 0,
        init_scale: float = 1e-4,
        dtype=np.float64,
    ):
        if table_size < MIN_TABLE_SIZE:
            raise ValueError(f"table_size must be >= {MIN_TABLE_SIZE}, got {table_size}")
        self.schedule = schedule
        self.aabb = aabb
        self.table_size = int(table_size)
        self.level_sizes = [
            min(dense_vertex_count(n), self.table_size) for n in schedule.resolutions
        ]
        self.level_dense = [
            dense_vertex_count(n) <= self.table_size for n in schedule.resolutions
        ]
        if features is None:
            rng = np.random.default_rng(seed)
            self.stores = [
                rng.uniform(-init_scale, init_scale, size=(size, FEATURE_DIM)).astype(
                    dtype
                )
                for size in self.level_sizes
            ]
        else:
            if len(features) != len(self.level_sizes):
                raise ValueError("feature list does not match the level schedule")
            self.stores = []
            for size, arr in zip(self.level_sizes, features):
                a = np.asarray(arr, dtype=dtype)
                if a.shape != (size, FEATURE_DIM):
                    raise ValueError(
                        f"level store shape {a.shape} != expected {(size, FEATURE_DIM)}"
                    )
                self.stores.append(a)

    # ------------------------------------------------------------------ #
    # indexing

    def vertex_index(self, level: int, grid_coords) -> np.ndarray:
        """Store slot(s) of integer vertex coordinates at one level.

        Dense levels use row-major layout i + j*(N+1) + k*(N+1)^2; hashed
        levels use the spatial hash.  Coordinates must lie in [0, N_l].
        """
        coords = np.asarray(grid_coords, dtype=np.int64)
        n = self.schedule.resolutions[level]
        if np.any(coords < 0) or np.any(coords > n):
            raise IndexError(f"vertex coords out of range [0, {n}] at level {level}")
        return self._index_unchecked(level, coords)

    def _index_unchecked(self, level: int, coords: np.ndarray) -> np.ndarray:
        n = self.schedule.resolutions[level]
        if self.level_dense[level]:
            stride = n + 1
            return coords[..., 0] + stride * (coords[..., 1] + stride * coords[..., 2])
        return hash_coords(coords, self.table_size)

    # ------------------------------------------------------------------ #
    # forward / backward

    def _grid_setup(self, positions: np.ndarray, atol: float):
        pts = np.asarray(positions, dtype=np.float64)
        if pts.shape[-1] != 3:
            raise ValueError(f"positions must have a trailing dim of 3, got {pts.shape}")
        flat = pts.reshape(-1, 3)
        inside = self.aabb.contains(flat, atol=atol)
        if not np.all(inside):
            bad = flat[~inside][0]
            raise OutOfBoundsError(
                f"position {bad} outside field bounds "
                f"[{self.aabb.lo}, {self.aabb.hi}] (clip rays first)"
            )
        u = (flat - self.aabb.lo) / self.aabb.size
        return pts.shape[:-1], np.clip(u, 0.0, 1.0)

    def _level_corners(self, level: int, u: np.ndarray):
        n = self.schedule.resolutions[level]
        g = u * n
        i0 = np.minimum(np.floor(g).astype(np.int64), n - 1)
        f = g - i0
        corners = i0[:, None, :] + _CORNERS[None, :, :]  # (M, 8, 3)
        idx = self._index_unchecked(level, corners)
        wx = np.stack([1.0 - f[:, 0], f[:, 0]], axis=1)
        wy = np.stack([1.0 - f[:, 1], f[:, 1]], axis=1)
        wz = np.stack([1.0 - f[:, 2], f[:, 2]], axis=1)
        w = (
            wx[:, _CORNERS[:, 0]]
            * wy[:, _CORNERS[:, 1]]
            * wz[:, _CORNERS[:, 2]]
        )  # (M, 8)
        return idx, w

    def query(self, positions: np.ndarray, atol: float = 1e-9, with_cache: bool = False):
        """Field outputs at positions (..., 3) inside the bounding box.

        Returns (rgb (..., 3), sigma (...)) and, with with_cache=True, a
        FieldCache for the backward pass (the cache is flat over points).
        """
        shape, u = self._grid_setup(positions, atol)
        m = u.shape[0]
        raw = np.zeros((m, FEATURE_DIM), dtype=np.float64)
        indices = []
        weights = []
        for level in range(self.schedule.levels):
            idx, w = self._level_corners(level, u)
            feats = self.stores[level][idx]  # (M, 8, 4)
            raw += np.einsum("mk,mkf->mf", w, feats)
            if with_cache:
                indices.append(idx)
                weights.append(w)
        rgb = _sigmoid(raw[:, :3])
        sigma = _softplus(raw[:, 3])
        if with_cache:
            cache = FieldCache(indices, weights, raw, rgb, sigma, m)
            return rgb.reshape(shape + (3,)), sigma.reshape(shape), cache
        return rgb.reshape(shape + (3,)), sigma.reshape(shape)

    def backward(self, cache: FieldCache, d_rgb: np.ndarray, d_sigma: np.ndarray,
                 grads: list[np.ndarray] | None = None) -> list[np.ndarray]:
        """Accumulates d(loss)/d(features) for a cached query.

        d_rgb is (M, 3) and d_sigma (M,), flat over the cached points.  When
        `grads` is given the contributions are added into it; otherwise fresh
        zero-initialized per-level arrays are returned.
        """
        m = cache.n_points
        d_rgb = np.asarray(d_rgb, dtype=np.float64).reshape(m, 3)
        d_sigma = np.asarray(d_sigma, dtype=np.float64).reshape(m)
        d_raw = np.empty((m, FEATURE_DIM), dtype=np.float64)
        d_raw[:, :3] = d_rgb * cache.rgb * (1.0 - cache.rgb)  # sigmoid'
        d_raw[:, 3] = d_sigma * _sigmoid(cache.raw[:, 3])     # softplus'
        if grads is None:
            grads = self.zero_grads()
        for level in range(self.schedule.levels):
            idx = cache.indices[level].ravel()
            contrib = cache.weights[level][:, :, None] * d_raw[:, None, :]
            flat = contrib.reshape(-1, FEATURE_DIM)
            size = self.level_sizes[level]
            for c in range(FEATURE_DIM):
                grads[level][:, c] += np.bincount(idx, weights=flat[:, c], minlength=size)
        return grads

    def zero_grads(self) -> list[np.ndarray]:
        return [np.zeros_like(s) for s in self.stores]

    def spatial_gradient(self, positions: np.ndarray, h: np.ndarray | None = None):
        """Central-difference d(rgb, sigma)/d(position), step = half finest voxel.

        Probe points are clamped into the bounding box, so the estimate
        degrades within h of the boundary.  Returns (d_rgb (..., 3, 3) with
        axes [channel, position-axis], d_sigma (..., 3)).
        """
        pts = np.asarray(positions, dtype=np.float64)
        shape = pts.shape[:-1]
        flat = pts.reshape(-1, 3)
        if h is None:
            h = 0.5 * self.aabb.size / self.schedule.resolutions[-1]
        h = np.broadcast_to(np.asarray(h, dtype=np.float64), (3,))
        lo = self.aabb.lo + 1e-12 * self.aabb.size
        hi = self.aabb.hi - 1e-12 * self.aabb.size
        d_rgb = np.empty((flat.shape[0], 3, 3), dtype=np.float64)
        d_sigma = np.empty((flat.shape[0], 3), dtype=np.float64)
        for axis in range(3):
            step = np.zeros(3)
            step[axis] = h[axis]
            p_hi = np.clip(flat + step, lo, hi)
            p_lo = np.clip(flat - step, lo, hi)
            span = p_hi[:, axis] - p_lo[:, axis]
            span = np.where(span == 0.0, 1.0, span)
            rgb_hi, sig_hi = self.query(p_hi)
            rgb_lo, sig_lo = self.query(p_lo)
            d_rgb[:, :, axis] = (rgb_hi - rgb_lo) / span[:, None]
            d_sigma[:, axis] = (sig_hi - sig_lo) / span
        return d_rgb.reshape(shape + (3, 3)), d_sigma.reshape(shape + (3,))

    # ------------------------------------------------------------------ #
    # serialization

    def payload_bytes(self) -> bytes:
        parts = [np.ascontiguousarray(s, dtype="<f4").tobytes() for s in self.stores]
        return b"".join(parts)

    def model_id(self) -> str:
        """SHA-256 hex digest of the f32 feature payload (checkpoint identity)."""
        return hashlib.sha256(self.payload_bytes()).hexdigest()

    def save(self, path) -> str:
        """Writes the checkpoint; returns the model id."""
        payload = self.payload_bytes()
        digest = hashlib.sha256(payload).digest()
        header = struct.pack(
            _HEADER_FMT,
            CHECKPOINT_MAGIC,
            CHECKPOINT_VERSION,
            self.schedule.n_min,
            self.schedule.n_max,
            self.schedule.levels,
            self.table_size,
            *self.aabb.center.tolist(),
            *self.aabb.half_extent.tolist(),
            digest,
        )
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
        return digest.hex()


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_field(path, dtype=np.float64) -> MultiresField:
    """Loads a field checkpoint written by MultiresField.save."""
    with open(path, "rb") as fh:
        field, _ = read_field_from(fh, dtype=dtype)
    return field


def read_field_from(fh, dtype=np.float64):
    """Reads one field block from an open binary stream.

    Returns (field, model_id).  The stream is left positioned right after the
    feature payload so follow-on blocks (e.g. a deformation grid) can be read.
    """
    header = _read_exact(fh, struct.calcsize(_HEADER_FMT), "header")
    (magic, version, n_min, n_max, levels, table_size, cx, cy, cz, hx, hy, hz,
     digest) = struct.unpack(_HEADER_FMT, header)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    schedule = level_resolutions(n_min, n_max, levels)
    aabb = Aabb(np.array([cx, cy, cz]), np.array([hx, hy, hz]))
    sizes = [min(dense_vertex_count(n), table_size) for n in schedule.resolutions]
    payload = _read_exact(fh, sum(sizes) * FEATURE_DIM * 4, "feature payload")
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError("checkpoint payload does not match its stored SHA-256")
    features = []
    offset = 0
    for size in sizes:
        nbytes = size * FEATURE_DIM * 4
        arr = np.frombuffer(payload[offset : offset + nbytes], dtype="<f4")
        features.append(arr.reshape(size, FEATURE_DIM).astype(dtype))
        offset += nbytes
    field = MultiresField(schedule, aabb, table_size=table_size, features=features,
                          dtype=dtype)
    return field, digest.hex()


def checkpoint_model_id(path) -> str:
    """Model id recorded in a checkpoint header (payload is not re-hashed)."""
    with open(path, "rb") as fh:
        header = _read_exact(fh, struct.calcsize(_HEADER_FMT), "header")
    fields = struct.unpack(_HEADER_FMT, header)
    if fields[0] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {fields[0]!r}")
    return fields[-1].hex()


# ---------------------------------------------------------------------- #
# single-point convenience wrappers


def sample_field(field: MultiresField, x) -> tuple[np.ndarray, float]:
    """(rgb, sigma) at one position; raises OutOfBoundsError outside the box."""
    rgb, sigma = field.query(np.asarray(x, dtype=np.float64).reshape(3))
    return rgb, float(sigma)


def sample_field_backward(field: MultiresField, x, d_rgb, d_sigma: float):
    """Sparse per-level gradients for one position.

    Returns a list of (indices (8,), grads (8, 4)) pairs, one per level:
    exactly the 8 enclosing vertices of each level receive gradient.
    """
    pos = np.asarray(x, dtype=np.float64).reshape(1, 3)
    _, _, cache = field.query(pos, with_cache=True)
    d_rgb = np.asarray(d_rgb, dtype=np.float64).reshape(1, 3)
    d_sig = np.asarray([d_sigma], dtype=np.float64)
    d_raw = np.empty((1, FEATURE_DIM))
    d_raw[:, :3] = d_rgb * cache.rgb * (1.0 - cache.rgb)
    d_raw[:, 3] = d_sig * _sigmoid(cache.raw[:, 3])
    out = []
    for level in range(field.schedule.levels):
        idx = cache.indices[level][0]
        grads = cache.weights[level][0][:, None] * d_raw[0][None, :]
        out.append((idx.copy(), grads))
    return out
