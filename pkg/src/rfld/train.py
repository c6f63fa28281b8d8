"""Photometric training of a grid field from posed images.

Each step draws a minibatch of pixels uniformly (with replacement) over all
images, renders their rays with stratified jitter, and takes one Adam step on
the mean squared color error.  The backward pass is fully hand-derived: loss
-> compositing weights -> per-sample density/color -> vertex features.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .field import MultiresField
from .images import load_image_rgb, to_u8, write_ppm
from .render import CameraPose, clip_rays_aabb, composite_backward, generate_rays, render_rays


class NonFiniteLossError(RuntimeError):
    """The loss became NaN/inf; carries the iteration index when known."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2500
    rays_per_batch: int = 768
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-15
    n_samples: int = 48
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1 or self.rays_per_batch < 1 or self.n_samples < 2:
            raise ValueError("iterations, rays_per_batch and n_samples must be positive")
        if self.learning_rate <= 0 or self.eps <= 0:
            raise ValueError("learning_rate and eps must be positive")
        for b in (self.beta1, self.beta2):
            if not (0.0 < b < 1.0):
                raise ValueError(f"Adam betas must lie in (0, 1), got {b}")

    def to_json(self) -> dict:
        return {
            "iterations": self.iterations,
            "rays_per_batch": self.rays_per_batch,
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "n_samples": self.n_samples,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        return cls(**obj)


@dataclass
class PosedImage:
    pose: CameraPose
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    time: float = 0.0


class Adam:
    """In-place Adam over a list of parameter arrays."""

    def __init__(self, params: list[np.ndarray], learning_rate: float,
                 beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-15):
        self.params = params
        self.lr = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.step_count = 0

    def matches(self, params: list[np.ndarray]) -> bool:
        return len(params) == len(self.params) and all(
            p is q for p, q in zip(params, self.params)
        )

    def update(self, grads: list[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ValueError("gradient list does not match the parameter list")
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def photometric_loss(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean squared error over rays and color channels."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.size == 0:
        raise ValueError("empty batch")
    if pred.shape != gt.shape:
        raise ValueError(f"batch shapes differ: {pred.shape} vs {gt.shape}")
    diff = pred - gt
    return float(np.mean(diff * diff))


class RayBank:
    """Pre-clipped rays and target colors for every pixel of a dataset."""

    def __init__(self, field_aabb, dataset: list[PosedImage]):
        if not dataset:
            raise ValueError("dataset must contain at least one image")
        origins, dirs, colors, times = [], [], [], []
        h0, w0 = dataset[0].image.shape[:2]
        for img in dataset:
            if img.image.shape[:2] != (h0, w0):
                raise ValueError("all dataset images must share one resolution")
            o, d = generate_rays(img.pose, img.image.shape[1], img.image.shape[0])
            origins.append(o.reshape(-1, 3))
            dirs.append(d.reshape(-1, 3))
            colors.append(np.asarray(img.image, dtype=np.float64).reshape(-1, 3))
            times.append(np.full(h0 * w0, img.time))
        self.origins = np.concatenate(origins)
        self.dirs = np.concatenate(dirs)
        self.colors = np.concatenate(colors)
        self.times = np.concatenate(times)
        self.t0, self.t1, self.hit = clip_rays_aabb(self.origins, self.dirs, field_aabb)

    @property
    def n_rays(self) -> int:
        return self.origins.shape[0]

    def batch(self, rng: np.random.Generator, size: int):
        sel = rng.integers(0, self.n_rays, size=size)
        return (self.origins[sel], self.dirs[sel], self.t0[sel], self.t1[sel],
                self.hit[sel], self.colors[sel], self.times[sel])


def train_step(field: MultiresField, origins, dirs, t0, t1, hit, gt,
               optimizer: Adam, n_samples: int,
               rng: np.random.Generator | None = None) -> float:
    """One optimization step over a batch of pre-clipped rays.

    Rays that miss the bounding box render black and contribute no gradient.
    Returns the pre-update loss.
    """
    if not optimizer.matches(field.stores):
        raise ValueError("optimizer state was built for different parameters")
    n = origins.shape[0]
    pred = np.zeros((n, 3))
    hit_idx = np.flatnonzero(hit)
    fcache = ccache = None
    if hit_idx.size:
        jitter = None
        if rng is not None:
            jitter = rng.random((hit_idx.size, n_samples))
        maps, (fcache, ccache, _) = render_rays(
            field, origins[hit_idx], dirs[hit_idx], t0[hit_idx], t1[hit_idx],
            n_samples, jitter=jitter, with_cache=True,
        )
        pred[hit_idx] = maps[0]
    loss = photometric_loss(pred, gt)
    if not math.isfinite(loss):
        raise NonFiniteLossError(f"loss diverged to {loss}")
    if hit_idx.size:
        d_pred = (2.0 / pred.size) * (pred - gt)
        d_sigma, d_colors = composite_backward(ccache, d_pred[hit_idx])
        grads = field.backward(fcache, d_colors.reshape(-1, 3), d_sigma.reshape(-1))
        optimizer.update(grads)
    else:
        optimizer.update(field.zero_grads())
    return loss


def train(field: MultiresField, dataset: list[PosedImage], config: TrainConfig,
          checkpoint_path=None, progress_every: int = 0) -> list[float]:
    """Optimizes the field in place; returns the per-iteration loss history."""
    bank = RayBank(field.aabb, dataset)
    rng = np.random.default_rng(config.seed)
    optimizer = Adam(field.stores, config.learning_rate, config.beta1,
                     config.beta2, config.eps)
    losses: list[float] = []
    for it in range(config.iterations):
        origins, dirs, t0, t1, hit, gt, _ = bank.batch(rng, config.rays_per_batch)
        try:
            loss = train_step(field, origins, dirs, t0, t1, hit, gt,
                              optimizer, config.n_samples, rng)
        except NonFiniteLossError as exc:
            raise NonFiniteLossError(str(exc), iteration=it) from None
        losses.append(loss)
        if progress_every and (it + 1) % progress_every == 0:
            print(f"iter {it + 1}/{config.iterations}  loss {loss:.6g}", flush=True)
    if checkpoint_path is not None:
        field.save(checkpoint_path)
    return losses


def write_loss_csv(path, losses: list[float]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("iter,loss\n")
        for i, loss in enumerate(losses):
            fh.write(f"{i},{loss!r}\n")


# ---------------------------------------------------------------------- #
# dataset directory format (transforms.json + image files)
#
# transforms.json follows the common synthetic-dataset layout: a global
# camera_angle_x plus one camera-to-world matrix per frame, stored in the
# OpenGL convention (camera looks along -z, y up).  Internally cameras look
# along +z with y down, so loading/saving flips the y and z columns.

_GL_FLIP = np.diag([1.0, -1.0, -1.0])


def _pose_to_gl(pose: CameraPose) -> np.ndarray:
    m = pose.world_from_camera.copy()
    m[:3, :3] = m[:3, :3] @ _GL_FLIP
    return m


def _pose_from_gl(matrix: np.ndarray, fx, fy, cx, cy) -> CameraPose:
    m = np.asarray(matrix, dtype=np.float64).reshape(4, 4).copy()
    m[:3, :3] = m[:3, :3] @ _GL_FLIP
    return CameraPose(m, fx, fy, cx, cy)


def save_dataset(dirpath, dataset: list[PosedImage]) -> None:
    """Writes images as PPM plus a transforms.json index."""
    root = Path(dirpath)
    root.mkdir(parents=True, exist_ok=True)
    if not dataset:
        raise ValueError("dataset must contain at least one image")
    w = dataset[0].image.shape[1]
    fx = dataset[0].pose.fx
    frames = []
    for i, item in enumerate(dataset):
        name = f"r_{i}.ppm"
        write_ppm(root / name, to_u8(item.image))
        frames.append({
            "file_path": name,
            "time": item.time,
            "transform_matrix": _pose_to_gl(item.pose).tolist(),
        })
    meta = {
        "camera_angle_x": 2.0 * math.atan(0.5 * w / fx),
        "frames": frames,
    }
    with open(root / "transforms.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")


def load_dataset(dirpath) -> list[PosedImage]:
    root = Path(dirpath)
    with open(root / "transforms.json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    angle_x = float(meta["camera_angle_x"])
    out = []
    for frame in meta["frames"]:
        path = root / frame["file_path"]
        if not path.exists():
            for ext in (".ppm", ".png"):
                cand = root / (frame["file_path"] + ext)
                if cand.exists():
                    path = cand
                    break
        image = load_image_rgb(path)
        h, w = image.shape[:2]
        fx = 0.5 * w / math.tan(0.5 * angle_x)
        pose = _pose_from_gl(frame["transform_matrix"], fx, fx, w / 2.0, h / 2.0)
        out.append(PosedImage(pose, image, time=float(frame.get("time", 0.0))))
    return out
