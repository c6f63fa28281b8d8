"""Camera rays, box clipping, and discrete volume rendering.

Rendering composites stratified samples front to back: per segment
alpha_i = 1 - exp(-sigma_i * delta_i), transmittance T_i = prod_{j<i}(1-alpha_j),
weight w_i = T_i * alpha_i.  A pixel collects rgb = sum w_i c_i, opacity =
sum w_i, expected depth = sum(w_i t_i) / max(opacity, eps), and disparity =
opacity / max(depth, eps).  Depth and disparity are zeroed below an opacity
support threshold so empty pixels stay exactly zero.

The same kernel renders any object exposing `aabb` and
`query(positions) -> (rgb, sigma)`: learned fields and voxel-scene adapters
share this code path bit for bit.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .field import Aabb

OPACITY_SUPPORT_EPS = 1e-6  # below this, depth/disparity are defined as zero
DIV_EPS = 1e-10

DEFAULT_N_SAMPLES = 128

_RENDER_CHUNK = 32768  # rays per chunk when rendering whole frames


class RayPreconditionError(ValueError):
    """A ray handed to the renderer was not clipped to the field bounds."""


def worker_count() -> int:
    """Thread cap for frame rendering; RFLD_THREADS overrides the default."""
    env = os.environ.get("RFLD_THREADS")
    if env is not None:
        try:
            return max(1, int(env))
        except ValueError:
            return 1
    return max(1, min(4, os.cpu_count() or 1))


@dataclass(frozen=True)
class CameraPose:
    """Pinhole camera: world-from-camera rigid transform plus intrinsics.

    Camera convention: +x right, +y down, +z forward (pixel (u, v) maps to
    camera direction ((u+0.5-cx)/fx, (v+0.5-cy)/fy, 1)).
    """

    world_from_camera: np.ndarray  # (4, 4)
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        m = np.asarray(self.world_from_camera, dtype=np.float64).reshape(4, 4)
        r = m[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise ValueError("rotation block is not orthonormal")
        if np.linalg.det(r) < 0:
            raise ValueError("rotation block must have determinant +1")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        object.__setattr__(self, "world_from_camera", m)

    @property
    def position(self) -> np.ndarray:
        return self.world_from_camera[:3, 3]

    @property
    def rotation(self) -> np.ndarray:
        return self.world_from_camera[:3, :3]

    def with_intrinsics(self, fx: float, fy: float, cx: float, cy: float) -> "CameraPose":
        return CameraPose(self.world_from_camera, fx, fy, cx, cy)

    def scaled_to(self, width: int, height: int, ref_width: int, ref_height: int) -> "CameraPose":
        """Same view at a different pixel resolution (fov preserved)."""
        sx = width / ref_width
        sy = height / ref_height
        return CameraPose(self.world_from_camera, self.fx * sx, self.fy * sy,
                          self.cx * sx, self.cy * sy)


@dataclass(frozen=True)
class Ray:
    """Single ray with unit direction and parametric near/far bounds."""

    origin: np.ndarray
    direction: np.ndarray
    t_near: float = 0.0
    t_far: float = np.inf

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit length")
        if not (0.0 <= self.t_near < self.t_far):
            raise ValueError(f"need 0 <= t_near < t_far, got [{self.t_near}, {self.t_far}]")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)


@dataclass
class FrameMaps:
    """Per-view output maps; all arrays share (height, width) layout."""

    width: int
    height: int
    rgb: np.ndarray        # (H, W, 3) in [0, 1]
    opacity: np.ndarray    # (H, W) accumulated alpha
    depth: np.ndarray      # (H, W) expected termination distance
    disparity: np.ndarray  # (H, W) opacity / depth on the opacity support


def intrinsics_from_fov(width: int, height: int, fov_x_deg: float):
    """fx = fy from a horizontal field of view, principal point at the center."""
    fx = 0.5 * width / np.tan(0.5 * np.deg2rad(fov_x_deg))
    return fx, fx, 0.5 * width, 0.5 * height


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-from-camera matrix with +z pointing from eye to target."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm == 0:
        raise ValueError("eye and target coincide")
    z = forward / norm
    right = np.cross(z, np.asarray(up, dtype=np.float64))
    rnorm = np.linalg.norm(right)
    if rnorm < 1e-12:
        raise ValueError("view direction is parallel to the up vector")
    x = right / rnorm
    y = np.cross(z, x)
    m = np.eye(4)
    m[:3, 0] = x
    m[:3, 1] = y
    m[:3, 2] = z
    m[:3, 3] = eye
    return m


def orbit_trajectory(center, radius: float, height: float, frames: int, *,
                     width: int, height_px: int, fov_x_deg: float = 55.0
                     ) -> list[CameraPose]:
    """Poses evenly spaced on a circle, all looking at `center`, indexed 0..frames-1."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    if frames < 1:
        raise ValueError("frames must be >= 1")
    center = np.asarray(center, dtype=np.float64)
    fx, fy, cx, cy = intrinsics_from_fov(width, height_px, fov_x_deg)
    poses = []
    for i in range(frames):
        az = 2.0 * np.pi * i / frames
        eye = center + np.array([radius * np.cos(az), radius * np.sin(az), height])
        poses.append(CameraPose(look_at(eye, center), fx, fy, cx, cy))
    return poses


def generate_rays(pose: CameraPose, width: int, height: int):
    """One unit ray per pixel center; returns origins and directions (H, W, 3)."""
    if width < 1 or height < 1:
        raise ValueError("width and height must be >= 1")
    u = (np.arange(width) + 0.5 - pose.cx) / pose.fx
    v = (np.arange(height) + 0.5 - pose.cy) / pose.fy
    uu, vv = np.meshgrid(u, v)
    dirs_cam = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
    dirs = dirs_cam @ pose.rotation.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.position, dirs.shape).copy()
    return origins, dirs


def clip_rays_aabb(origins: np.ndarray, dirs: np.ndarray, box: Aabb,
                   t_near: float = 0.0, t_far: float = np.inf):
    """Slab intersection of rays with a box, intersected with [t_near, t_far].

    Returns (t0, t1, hit); entries of t0/t1 are meaningful only where hit.
    Entry parameters are clamped to be >= 0.
    """
    o = origins.reshape(-1, 3)
    d = dirs.reshape(-1, 3)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        ta = (box.lo - o) * inv
        tb = (box.hi - o) * inv
    # Rays parallel to a slab: inside -> (-inf, inf); outside -> miss.
    parallel = d == 0.0
    if np.any(parallel):
        inside = (o >= box.lo) & (o <= box.hi)
        ta = np.where(parallel, np.where(inside, -np.inf, np.inf), ta)
        tb = np.where(parallel, np.where(inside, np.inf, -np.inf), tb)
    lo = np.minimum(ta, tb)
    hi = np.maximum(ta, tb)
    t0 = np.maximum(lo.max(axis=-1), max(t_near, 0.0))
    t1 = np.minimum(hi.min(axis=-1), t_far)
    hit = t0 < t1
    shape = origins.shape[:-1]
    return t0.reshape(shape), t1.reshape(shape), hit.reshape(shape)


def clip_ray_aabb(ray: Ray, box: Aabb):
    """(t_entry, t_exit) of one ray against a box, or None on a miss."""
    t0, t1, hit = clip_rays_aabb(ray.origin[None, :], ray.direction[None, :], box,
                                 ray.t_near, ray.t_far)
    if not hit[0]:
        return None
    return float(t0[0]), float(t1[0])


class CompositeCache:
    """Intermediates of compositing, retained for the backward pass."""

    __slots__ = ("alpha", "trans", "weights", "colors", "delta")

    def __init__(self, alpha, trans, weights, colors, delta):
        self.alpha = alpha      # (R, S)
        self.trans = trans      # (R, S) transmittance before each sample
        self.weights = weights  # (R, S)
        self.colors = colors    # (R, S, 3)
        self.delta = delta      # (R, S)


def composite(sigma: np.ndarray, colors: np.ndarray, t_mid: np.ndarray,
              delta: np.ndarray, with_cache: bool = False):
    """Front-to-back alpha compositing of per-sample density and color.

    All inputs are (R, S)-shaped (colors with a trailing 3).  Returns
    (rgb (R, 3), opacity (R,), depth (R,), disparity (R,)) and optionally the
    cache needed by composite_backward.
    """
    alpha = -np.expm1(-sigma * delta)  # 1 - exp(-sigma*delta), exact near 0
    surv = 1.0 - alpha
    trans = np.cumprod(surv, axis=1)
    trans = np.concatenate([np.ones_like(trans[:, :1]), trans[:, :-1]], axis=1)
    weights = trans * alpha
    rgb = np.einsum("rs,rsc->rc", weights, colors)
    opacity = weights.sum(axis=1)
    depth = np.einsum("rs,rs->r", weights, t_mid) / np.maximum(opacity, DIV_EPS)
    support = opacity >= OPACITY_SUPPORT_EPS
    depth = np.where(support, depth, 0.0)
    disparity = np.where(support, opacity / np.maximum(depth, DIV_EPS), 0.0)
    out = (rgb, opacity, depth, disparity)
    if with_cache:
        return out, CompositeCache(alpha, trans, weights, colors, delta)
    return out


def composite_backward(cache: CompositeCache, d_rgb: np.ndarray):
    """Gradients of the composited rgb with respect to sample density/color.

    d_rgb is (R, 3).  Returns (d_sigma (R, S), d_colors (R, S, 3)).  Uses
    d(sigma_i) = delta_i * (T_{i+1} g_i - sum_{j>i} w_j g_j) with
    g_i = <d_rgb, c_i>, which avoids dividing by potentially-zero (1-alpha).
    """
    g = np.einsum("rc,rsc->rs", d_rgb, cache.colors)
    wg = cache.weights * g
    # suffix[i] = sum_{j>i} w_j g_j
    suffix = np.flip(np.cumsum(np.flip(wg, axis=1), axis=1), axis=1) - wg
    trans_next = cache.trans * (1.0 - cache.alpha)  # T_{i+1}
    d_sigma = cache.delta * (trans_next * g - suffix)
    d_colors = cache.weights[:, :, None] * d_rgb[:, None, :]
    return d_sigma, d_colors


def sample_ts(t0: np.ndarray, t1: np.ndarray, n_samples: int,
              jitter: np.ndarray | None = None):
    """Stratified sample parameters and segment lengths for clipped rays.

    With jitter=None the samples sit at stratum midpoints; otherwise jitter
    must be (R, S) uniform values in [0, 1) placing each sample in its stratum.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    span = (t1 - t0)[:, None]
    if jitter is None:
        offsets = (np.arange(n_samples) + 0.5) / n_samples
        t = t0[:, None] + span * offsets[None, :]
    else:
        offsets = (np.arange(n_samples)[None, :] + jitter) / n_samples
        t = t0[:, None] + span * offsets
    delta = np.broadcast_to(span / n_samples, t.shape)
    return t, delta


def render_rays(fieldlike, origins: np.ndarray, dirs: np.ndarray,
                t0: np.ndarray, t1: np.ndarray, n_samples: int,
                jitter: np.ndarray | None = None, with_cache: bool = False):
    """Renders a batch of pre-clipped rays against a field-like object.

    Returns (rgb (R, 3), opacity, depth, disparity) plus, with caches enabled,
    (field_cache, composite_cache, t (R, S)) for backpropagation.
    """
    t, delta = sample_ts(t0, t1, n_samples, jitter)
    pos = origins[:, None, :] + dirs[:, None, :] * t[:, :, None]
    if with_cache:
        rgb_s, sigma_s, fcache = fieldlike.query(pos, with_cache=True)
        maps, ccache = composite(sigma_s, rgb_s, t, delta, with_cache=True)
        return maps, (fcache, ccache, t)
    rgb_s, sigma_s = fieldlike.query(pos)
    return composite(sigma_s, rgb_s, t, delta)


def render_ray(fieldlike, ray: Ray, n_samples: int,
               jitter: np.ndarray | None = None):
    """Renders one ray whose [t_near, t_far] segment lies inside the field box.

    Raises RayPreconditionError when the segment is not clipped to the box.
    """
    box = fieldlike.aabb
    tol = 1e-6 * float(np.max(box.size))
    a = ray.origin + ray.t_near * ray.direction
    b = ray.origin + ray.t_far * ray.direction if np.isfinite(ray.t_far) else None
    if b is None or not (box.contains(a, atol=tol) and box.contains(b, atol=tol)):
        raise RayPreconditionError(
            "ray segment exits the field bounds; clip with clip_ray_aabb first"
        )
    jit = None if jitter is None else np.asarray(jitter, dtype=np.float64)[None, :]
    (rgb, opacity, depth, disparity) = render_rays(
        fieldlike,
        ray.origin[None, :],
        ray.direction[None, :],
        np.array([ray.t_near]),
        np.array([ray.t_far]),
        n_samples,
        jitter=jit,
    )
    return rgb[0], float(opacity[0]), float(depth[0]), float(disparity[0])


def _render_hit_block(fieldlike, origins, dirs, t0, t1, n_samples, jitter, warp):
    if warp is not None:
        t, delta = sample_ts(t0, t1, n_samples, jitter)
        pos = origins[:, None, :] + dirs[:, None, :] * t[:, :, None]
        pos = warp(pos)
        rgb_s, sigma_s = fieldlike.query(pos)
        return composite(sigma_s, rgb_s, t, delta)
    return render_rays(fieldlike, origins, dirs, t0, t1, n_samples, jitter=jitter)


def render_frame(fieldlike, pose: CameraPose, width: int, height: int,
                 n_samples: int = DEFAULT_N_SAMPLES, seed: int | None = None,
                 threads: int | None = None, warp=None) -> FrameMaps:
    """Renders all pixels of a view; rays that miss the box come out zero.

    With a seed, per-pixel stratification jitter is drawn once per frame (so
    results do not depend on chunking or thread count); without one, samples
    sit at stratum midpoints.  `warp` optionally remaps sample positions
    (used by the dynamic renderer) and must be vectorized over (..., 3).
    """
    origins, dirs = generate_rays(pose, width, height)
    o_flat = origins.reshape(-1, 3)
    d_flat = dirs.reshape(-1, 3)
    t0, t1, hit = clip_rays_aabb(o_flat, d_flat, fieldlike.aabb)
    n_pix = width * height
    rgb = np.zeros((n_pix, 3))
    opacity = np.zeros(n_pix)
    depth = np.zeros(n_pix)
    disparity = np.zeros(n_pix)
    hit_idx = np.flatnonzero(hit)
    if hit_idx.size:
        jitter_all = None
        if seed is not None:
            rng = np.random.default_rng(seed)
            jitter_all = rng.random((n_pix, n_samples))[hit_idx]
        n_threads = worker_count() if threads is None else max(1, threads)
        chunks = [
            hit_idx[i : i + _RENDER_CHUNK] for i in range(0, hit_idx.size, _RENDER_CHUNK)
        ]
        chunk_offsets = np.cumsum([0] + [c.size for c in chunks])

        def run(ci: int):
            sel = chunks[ci]
            lo = chunk_offsets[ci]
            jit = None if jitter_all is None else jitter_all[lo : lo + sel.size]
            return _render_hit_block(
                fieldlike, o_flat[sel], d_flat[sel], t0[sel], t1[sel],
                n_samples, jit, warp,
            )

        if n_threads > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=n_threads) as pool:
                results = list(pool.map(run, range(len(chunks))))
        else:
            results = [run(ci) for ci in range(len(chunks))]
        for sel, (c_rgb, c_op, c_de, c_di) in zip(chunks, results):
            rgb[sel] = c_rgb
            opacity[sel] = c_op
            depth[sel] = c_de
            disparity[sel] = c_di
    return FrameMaps(
        width=width,
        height=height,
        rgb=rgb.reshape(height, width, 3),
        opacity=opacity.reshape(height, width),
        depth=depth.reshape(height, width),
        disparity=disparity.reshape(height, width),
    )
