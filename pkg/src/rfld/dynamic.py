"""Dynamic scenes: a canonical field plus a time-keyed displacement grid.

A ray sample at position x and time t is looked up in the canonical field at
x + displacement(x, t).  The displacement field is a coarse vertex grid of
3-vectors per time key, trilinear in space and linear in time between keys;
the key at t = 0 is pinned to zero (it is excluded from the learnable
parameters), so time zero reproduces the canonical scene exactly.

During joint training, gradients reach the displacement grid through the
spatial sensitivity of the canonical field, estimated by central differences
with a step of half the finest canonical voxel (trilinear fields have
discontinuous exact spatial derivatives at cell faces; the finite difference
smooths those out).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .field import Aabb, MultiresField, _read_exact
from .render import (
    CameraPose,
    FrameMaps,
    composite_backward,
    render_frame,
    render_rays,
    sample_ts,
)
from .train import Adam, NonFiniteLossError, PosedImage, RayBank, TrainConfig, photometric_loss

DEFO_MAGIC = b"DFRM"
DEFO_VERSION = 1
_DEFO_HEADER_FMT = "<4sH III"  # magic, version, grid_res, time_keys, time_octaves


class DeformationField:
    """Time-conditioned displacement grid over the canonical bounding box.

    grid has shape (time_keys, D, D, D, 3); grid[0] stays identically zero.
    time_octaves records an optional sinusoidal time-encoding width for
    smoother variants; the base model interpolates keys linearly in time.
    """

    def __init__(self, aabb: Aabb, grid_res: int = 8, time_keys: int = 3,
                 time_octaves: int = 0, grid: np.ndarray | None = None):
        if grid_res < 2:
            raise ValueError(f"grid_res must be >= 2, got {grid_res}")
        if time_keys < 2:
            raise ValueError(f"time_keys must be >= 2, got {time_keys}")
        if time_octaves < 0:
            raise ValueError("time_octaves must be >= 0")
        self.aabb = aabb
        self.grid_res = grid_res
        self.time_keys = time_keys
        self.time_octaves = time_octaves
        if grid is None:
            self.grid = np.zeros((time_keys, grid_res, grid_res, grid_res, 3))
        else:
            g = np.asarray(grid, dtype=np.float64)
            if g.shape != (time_keys, grid_res, grid_res, grid_res, 3):
                raise ValueError(f"grid shape {g.shape} does not match the field")
            self.grid = g.copy()
            self.grid[0] = 0.0

    @property
    def key_times(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.time_keys)

    def learnable(self) -> np.ndarray:
        """View of the trainable keys (everything past the pinned t=0 key)."""
        return self.grid[1:]

    def max_step(self) -> float:
        """Lipschitz bound in time: max displacement change per unit t."""
        diffs = np.abs(np.diff(self.grid, axis=0)).max() if self.time_keys > 1 else 0.0
        return float(diffs * (self.time_keys - 1))

    def _space_setup(self, positions: np.ndarray):
        pts = np.asarray(positions, dtype=np.float64)
        flat = pts.reshape(-1, 3)
        d = self.grid_res
        u = np.clip((flat - self.aabb.lo) / self.aabb.size, 0.0, 1.0)
        g = u * (d - 1)
        i0 = np.minimum(g.astype(np.int64), d - 2)
        f = g - i0
        return pts.shape[:-1], i0, f

    def _time_setup(self, t: np.ndarray):
        m = self.time_keys
        seg = np.minimum((t * (m - 1)).astype(np.int64), m - 2)
        u = t * (m - 1) - seg
        return seg, u

    def displacement(self, positions: np.ndarray, t) -> np.ndarray:
        """Displacement vectors at (..., 3) positions and scalar or (...,) time."""
        shape, i0, f = self._space_setup(positions)
        tarr = np.broadcast_to(np.asarray(t, dtype=np.float64), shape).reshape(-1)
        if np.any(tarr < 0.0) or np.any(tarr > 1.0):
            raise ValueError("time must lie in [0, 1]")
        seg, u = self._time_setup(tarr)
        out = np.zeros((i0.shape[0], 3))
        for dz in (0, 1):
            for dy in (0, 1):
                for dx in (0, 1):
                    w = (
                        (f[:, 0] if dx else 1.0 - f[:, 0])
                        * (f[:, 1] if dy else 1.0 - f[:, 1])
                        * (f[:, 2] if dz else 1.0 - f[:, 2])
                    )
                    ix, iy, iz = i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz
                    lo = self.grid[seg, ix, iy, iz]
                    hi = self.grid[seg + 1, ix, iy, iz]
                    out += (w * (1.0 - u))[:, None] * lo + (w * u)[:, None] * hi
        return out.reshape(shape + (3,))

    def scatter_gradient(self, positions: np.ndarray, t: np.ndarray,
                         d_disp: np.ndarray, grad: np.ndarray) -> None:
        """Accumulates d(loss)/d(grid) into `grad` (same shape as the grid).

        Contributions aimed at the pinned t=0 key are dropped afterwards by
        the caller zeroing grad[0]; they would never be applied anyway.
        """
        shape, i0, f = self._space_setup(positions)
        tarr = np.broadcast_to(np.asarray(t, dtype=np.float64), shape).reshape(-1)
        seg, u = self._time_setup(tarr)
        dd = np.asarray(d_disp, dtype=np.float64).reshape(-1, 3)
        d = self.grid_res
        plane = d * d * d
        flat_grad = grad.reshape(-1, 3)
        for dz in (0, 1):
            for dy in (0, 1):
                for dx in (0, 1):
                    w = (
                        (f[:, 0] if dx else 1.0 - f[:, 0])
                        * (f[:, 1] if dy else 1.0 - f[:, 1])
                        * (f[:, 2] if dz else 1.0 - f[:, 2])
                    )
                    cell = ((i0[:, 0] + dx) * d + (i0[:, 1] + dy)) * d + (i0[:, 2] + dz)
                    for key_off, tw in ((0, 1.0 - u), (1, u)):
                        idx = (seg + key_off) * plane + cell
                        coeff = w * tw
                        for c in range(3):
                            flat_grad[:, c] += np.bincount(
                                idx, weights=coeff * dd[:, c], minlength=flat_grad.shape[0]
                            )


def deform(defo: DeformationField, x, t: float) -> np.ndarray:
    """Displacement at one position and time; exactly zero at t = 0."""
    if not (0.0 <= t <= 1.0):
        raise ValueError(f"time must lie in [0, 1], got {t}")
    if t == 0.0:
        return np.zeros(3)
    return defo.displacement(np.asarray(x, dtype=np.float64).reshape(3), t)


@dataclass
class DynamicDataset:
    """Posed images with per-image timestamps in [0, 1]."""

    images: list[PosedImage]

    def __post_init__(self):
        for img in self.images:
            if not (0.0 <= img.time <= 1.0):
                raise ValueError(f"timestamp {img.time} outside [0, 1]")


def _clamp_into(aabb: Aabb, positions: np.ndarray) -> np.ndarray:
    margin = 1e-12 * aabb.size
    return np.clip(positions, aabb.lo + margin, aabb.hi - margin)


def render_dynamic(canonical: MultiresField, defo: DeformationField,
                   pose: CameraPose, t: float, width: int, height: int,
                   n_samples: int, seed: int | None = None,
                   threads: int | None = None) -> FrameMaps:
    """Renders the deformed scene at time t through the static kernel.

    t = 0 takes the undeformed path, so the output is bit-identical to
    render_frame on the canonical field.
    """
    if not (0.0 <= t <= 1.0):
        raise ValueError(f"time must lie in [0, 1], got {t}")
    warp = None
    if t != 0.0:
        def warp(pos):
            return _clamp_into(canonical.aabb,
                               pos + defo.displacement(pos, t))
    return render_frame(canonical, pose, width, height, n_samples=n_samples,
                        seed=seed, threads=threads, warp=warp)


def train_dynamic(canonical: MultiresField, defo: DeformationField,
                  dataset: DynamicDataset, config: TrainConfig,
                  checkpoint_path=None, progress_every: int = 0) -> list[float]:
    """Joint optimization of the canonical field and the displacement grid."""
    bank = RayBank(canonical.aabb, dataset.images)
    rng = np.random.default_rng(config.seed)
    params = list(canonical.stores) + [defo.learnable()]
    optimizer = Adam(params, config.learning_rate, config.beta1, config.beta2,
                     config.eps)
    losses: list[float] = []
    fd_step = 0.5 * canonical.aabb.size / canonical.schedule.resolutions[-1]
    for it in range(config.iterations):
        origins, dirs, t0, t1, hit, gt, times = bank.batch(rng, config.rays_per_batch)
        loss = _dynamic_step(canonical, defo, optimizer, origins, dirs, t0, t1,
                             hit, gt, times, config.n_samples, rng, fd_step)
        if not math.isfinite(loss):
            raise NonFiniteLossError(f"loss diverged to {loss}", iteration=it)
        losses.append(loss)
        if progress_every and (it + 1) % progress_every == 0:
            print(f"iter {it + 1}/{config.iterations}  loss {loss:.6g}", flush=True)
    if checkpoint_path is not None:
        save_dynamic(canonical, defo, checkpoint_path)
    return losses


def _dynamic_step(canonical, defo, optimizer, origins, dirs, t0, t1, hit, gt,
                  times, n_samples, rng, fd_step) -> float:
    n = origins.shape[0]
    pred = np.zeros((n, 3))
    hit_idx = np.flatnonzero(hit)
    defo_grad = np.zeros_like(defo.grid)
    field_grads = None
    if hit_idx.size:
        jitter = rng.random((hit_idx.size, n_samples))
        t, delta = sample_ts(t0[hit_idx], t1[hit_idx], n_samples, jitter)
        pos = origins[hit_idx, None, :] + dirs[hit_idx, None, :] * t[:, :, None]
        t_samp = np.broadcast_to(times[hit_idx, None], t.shape)
        disp = defo.displacement(pos, t_samp)
        warped = _clamp_into(canonical.aabb, pos + disp)
        from .render import composite  # local import avoids a cycle at module load

        rgb_s, sigma_s, fcache = canonical.query(warped, with_cache=True)
        maps, ccache = composite(sigma_s, rgb_s, t, delta, with_cache=True)
        pred[hit_idx] = maps[0]
        loss = photometric_loss(pred, gt)
        if not math.isfinite(loss):
            return loss
        d_pred = (2.0 / pred.size) * (pred - gt)
        d_sigma, d_colors = composite_backward(ccache, d_pred[hit_idx])
        field_grads = canonical.backward(fcache, d_colors.reshape(-1, 3),
                                         d_sigma.reshape(-1))
        # Deformation gradient: chain through the canonical field's spatial
        # sensitivity.  Samples with exactly-zero upstream signal (saturated
        # transmittance) and samples at t = 0 (zero time weight on learnable
        # keys) are skipped; both have identically zero gradient.
        flat_pos = warped.reshape(-1, 3)
        flat_t = np.asarray(t_samp).reshape(-1)
        flat_dsig = d_sigma.reshape(-1)
        flat_dcol = d_colors.reshape(-1, 3)
        active = ((flat_dsig != 0.0) | np.any(flat_dcol != 0.0, axis=1)) & (flat_t > 0.0)
        act_idx = np.flatnonzero(active)
        if act_idx.size:
            d_rgb_dx, d_sig_dx = canonical.spatial_gradient(flat_pos[act_idx], h=fd_step)
            d_disp = (
                np.einsum("mc,mcp->mp", flat_dcol[act_idx], d_rgb_dx)
                + flat_dsig[act_idx, None] * d_sig_dx
            )
            defo.scatter_gradient(pos.reshape(-1, 3)[act_idx], flat_t[act_idx],
                                  d_disp, defo_grad)
            defo_grad[0] = 0.0
    else:
        loss = photometric_loss(pred, gt)
    if field_grads is None:
        field_grads = canonical.zero_grads()
    optimizer.update(field_grads + [defo_grad[1:]])
    return loss


# ---------------------------------------------------------------------- #
# checkpoint: canonical field block followed by a deformation block


def save_dynamic(canonical: MultiresField, defo: DeformationField, path) -> str:
    """Writes the canonical checkpoint with the displacement grid appended."""
    model_id = canonical.save(path)
    payload = np.ascontiguousarray(defo.grid, dtype="<f4").tobytes()
    header = struct.pack(_DEFO_HEADER_FMT, DEFO_MAGIC, DEFO_VERSION,
                         defo.grid_res, defo.time_keys, defo.time_octaves)
    with open(path, "ab") as fh:
        fh.write(header)
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
    return model_id


def load_dynamic(path) -> tuple[MultiresField, DeformationField]:
    from .field import read_field_from

    with open(path, "rb") as fh:
        canonical, _ = read_field_from(fh)
        header = _read_exact(fh, struct.calcsize(_DEFO_HEADER_FMT), "deformation header")
        magic, version, grid_res, time_keys, octaves = struct.unpack(
            _DEFO_HEADER_FMT, header
        )
        if magic != DEFO_MAGIC:
            raise ValueError(f"bad deformation magic {magic!r}")
        if version != DEFO_VERSION:
            raise ValueError(f"unsupported deformation version {version}")
        (nbytes,) = struct.unpack("<I", _read_exact(fh, 4, "deformation size"))
        payload = _read_exact(fh, nbytes, "deformation payload")
    grid = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(
        time_keys, grid_res, grid_res, grid_res, 3
    )
    defo = DeformationField(canonical.aabb, grid_res, time_keys, octaves, grid=grid)
    return canonical, defo
