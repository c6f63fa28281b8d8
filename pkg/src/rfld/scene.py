"""Procedural voxel scenes: dataset source and brute-force rendering oracle.

Scenes are rasterized from primitive lists onto a cubic voxel grid (density +
albedo at voxel centers) and rendered through the exact same compositing
kernel as learned fields, via a trilinear-lookup adapter.  Keeping one code
path means oracle-vs-field comparisons measure field error only, never
quadrature differences.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from .field import Aabb
from .render import CameraPose, FrameMaps, render_frame

PRIMITIVE_KINDS = ("box", "sphere", "cylinder")

SCENE_MAGIC = b"VOXS"
SCENE_VERSION = 1


class SceneError(ValueError):
    """A scene specification violates its invariants."""


@dataclass(frozen=True)
class Primitive:
    """One solid shape: axis-aligned box, sphere, or z-axis cylinder.

    `size` is the full extent per axis; spheres use size[0] as diameter and
    cylinders size[0] as diameter, size[2] as height.
    """

    kind: str
    center: np.ndarray
    size: np.ndarray
    albedo: np.ndarray
    density: float

    def __post_init__(self):
        if self.kind not in PRIMITIVE_KINDS:
            raise SceneError(f"unknown primitive kind {self.kind!r}")
        center = np.asarray(self.center, dtype=np.float64).reshape(3)
        size = np.asarray(self.size, dtype=np.float64).reshape(3)
        albedo = np.asarray(self.albedo, dtype=np.float64).reshape(3)
        if np.any(size <= 0):
            raise SceneError(f"primitive size must be positive, got {size}")
        if self.density < 0:
            raise SceneError(f"density must be non-negative, got {self.density}")
        if np.any(albedo < 0) or np.any(albedo > 1):
            raise SceneError(f"albedo must lie in [0, 1], got {albedo}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "albedo", albedo)

    def extent(self) -> tuple[np.ndarray, np.ndarray]:
        """Conservative world-space min/max corners of the shape."""
        half = self.size / 2.0
        if self.kind == "sphere":
            half = np.full(3, self.size[0] / 2.0)
        elif self.kind == "cylinder":
            r = self.size[0] / 2.0
            half = np.array([r, r, self.size[2] / 2.0])
        return self.center - half, self.center + half

    def contains(self, points: np.ndarray, rotation: np.ndarray | None = None,
                 translation: np.ndarray | None = None) -> np.ndarray:
        """Membership test, optionally under a rigid motion of the shape.

        The motion rotates the shape about its own center and then translates
        it; points are pulled back into the base frame for the test.
        """
        p = np.asarray(points, dtype=np.float64)
        local = p - self.center
        if translation is not None:
            local = local - translation
        if rotation is not None:
            local = local @ rotation  # R^-1 = R^T, applied from the right
        if self.kind == "box":
            return np.all(np.abs(local) <= self.size / 2.0, axis=-1)
        if self.kind == "sphere":
            r = self.size[0] / 2.0
            return np.einsum("...i,...i->...", local, local) <= r * r
        r = self.size[0] / 2.0
        radial = local[..., 0] ** 2 + local[..., 1] ** 2 <= r * r
        return radial & (np.abs(local[..., 2]) <= self.size[2] / 2.0)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "center": self.center.tolist(),
            "size": self.size.tolist(),
            "albedo": self.albedo.tolist(),
            "density": self.density,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Primitive":
        return cls(obj["kind"], obj["center"], obj["size"], obj["albedo"],
                   float(obj["density"]))


@dataclass(frozen=True)
class SceneSpec:
    """Deterministic recipe for a voxel scene; empty space has zero density."""

    seed: int
    resolution: int
    bounds: Aabb
    primitives: tuple[Primitive, ...] = ()

    def __post_init__(self):
        if self.resolution < 2:
            raise SceneError(f"resolution must be >= 2, got {self.resolution}")
        object.__setattr__(self, "primitives", tuple(self.primitives))

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "resolution": self.resolution,
            "bounds": self.bounds.to_json(),
            "primitives": [p.to_json() for p in self.primitives],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SceneSpec":
        return cls(
            seed=int(obj["seed"]),
            resolution=int(obj["resolution"]),
            bounds=Aabb.from_json(obj["bounds"]),
            primitives=tuple(Primitive.from_json(p) for p in obj.get("primitives", [])),
        )


def load_scene_spec(path) -> SceneSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return SceneSpec.from_json(json.load(fh))


def save_scene_spec(spec: SceneSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(spec.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass(frozen=True)
class MotionTrack:
    """Rigid keyframed motion of one primitive over normalized time.

    Keyframe m carries a translation and a rotation angle about a fixed axis
    through the primitive's center.  Keyframe times must strictly increase
    and the t=0 keyframe must be the identity (zero translation and angle);
    between keyframes both parts interpolate linearly.
    """

    primitive_index: int
    times: np.ndarray          # (K,)
    translations: np.ndarray   # (K, 3)
    angles_deg: np.ndarray     # (K,)
    axis: np.ndarray = dc_field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        trans = np.asarray(self.translations, dtype=np.float64).reshape(-1, 3)
        angles = np.asarray(self.angles_deg, dtype=np.float64).reshape(-1)
        axis = np.asarray(self.axis, dtype=np.float64).reshape(3)
        if times.size < 1 or np.any(np.diff(times) <= 0):
            raise SceneError("keyframe times must be strictly increasing")
        if times[0] != 0.0:
            raise SceneError("first keyframe must sit at t = 0")
        if trans.shape[0] != times.size or angles.size != times.size:
            raise SceneError("keyframe arrays must share one length")
        if np.any(trans[0] != 0.0) or angles[0] != 0.0:
            raise SceneError("t = 0 keyframe must be the identity pose")
        n = np.linalg.norm(axis)
        if n == 0:
            raise SceneError("rotation axis must be nonzero")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "translations", trans)
        object.__setattr__(self, "angles_deg", angles)
        object.__setattr__(self, "axis", axis / n)

    def pose_at(self, t: float) -> tuple[np.ndarray, float]:
        """(translation, angle_deg) at normalized time t in [0, 1]."""
        if not (0.0 <= t <= 1.0):
            raise SceneError(f"time must lie in [0, 1], got {t}")
        times = self.times
        if t <= times[0]:
            return self.translations[0].copy(), float(self.angles_deg[0])
        if t >= times[-1]:
            return self.translations[-1].copy(), float(self.angles_deg[-1])
        j = int(np.searchsorted(times, t, side="right") - 1)
        u = (t - times[j]) / (times[j + 1] - times[j])
        trans = (1.0 - u) * self.translations[j] + u * self.translations[j + 1]
        angle = (1.0 - u) * self.angles_deg[j] + u * self.angles_deg[j + 1]
        return trans, float(angle)


def _axis_angle_matrix(axis: np.ndarray, angle_deg: float) -> np.ndarray:
    theta = np.deg2rad(angle_deg)
    c, s = np.cos(theta), np.sin(theta)
    x, y, z = axis
    k = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    return np.eye(3) * c + s * k + (1 - c) * np.outer(axis, axis)


@dataclass
class VoxelScene:
    """Ground-truth grid: density and albedo sampled at voxel centers."""

    resolution: int
    density: np.ndarray  # (n, n, n) >= 0
    albedo: np.ndarray   # (n, n, n, 3) in [0, 1]
    bounds: Aabb
    spec: SceneSpec | None = None

    def __post_init__(self):
        n = self.resolution
        if n < 2:
            raise SceneError(f"resolution must be >= 2, got {n}")
        if self.density.shape != (n, n, n) or self.albedo.shape != (n, n, n, 3):
            raise SceneError("density/albedo shapes do not match the resolution")
        if np.any(self.density < 0):
            raise SceneError("density must be non-negative everywhere")
        if np.any(self.albedo < 0) or np.any(self.albedo > 1):
            raise SceneError("albedo must lie in [0, 1]")

    def voxel_centers(self) -> np.ndarray:
        """World coordinates of all voxel centers, shape (n, n, n, 3)."""
        return _voxel_centers(self.resolution, self.bounds)

    @property
    def voxel_size(self) -> np.ndarray:
        return self.bounds.size / self.resolution


def _voxel_centers(resolution: int, bounds: Aabb) -> np.ndarray:
    axes = [
        bounds.lo[a] + (np.arange(resolution) + 0.5) * bounds.size[a] / resolution
        for a in range(3)
    ]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1)


def generate_scene(spec: SceneSpec) -> VoxelScene:
    """Rasterizes the primitive list; later primitives overwrite earlier ones."""
    return _rasterize(spec, poses=None)


def _rasterize(spec: SceneSpec,
               poses: dict[int, tuple[np.ndarray, np.ndarray]] | None) -> VoxelScene:
    n = spec.resolution
    centers = _voxel_centers(n, spec.bounds)
    density = np.zeros((n, n, n), dtype=np.float64)
    albedo = np.zeros((n, n, n, 3), dtype=np.float64)
    for index, prim in enumerate(spec.primitives):
        rotation = translation = None
        if poses is not None and index in poses:
            translation, rotation = poses[index]
        lo, hi = prim.extent()
        if translation is not None:
            # rotation happens about the primitive center, so the rotated
            # shape stays within the circumscribed ball of the base extent
            half = np.max(hi - lo) / 2.0 * np.sqrt(3.0)
            lo = prim.center + translation - half
            hi = prim.center + translation + half
        if np.any(lo < spec.bounds.lo - 1e-12) or np.any(hi > spec.bounds.hi + 1e-12):
            raise SceneError(
                f"primitive {index} ({prim.kind}) extends outside the scene bounds"
            )
        inside = prim.contains(centers, rotation=rotation, translation=translation)
        density[inside] = prim.density
        albedo[inside] = prim.albedo
    return VoxelScene(n, density, albedo, spec.bounds, spec=spec)


def animate_scene(scene: VoxelScene, track: MotionTrack, t: float) -> VoxelScene:
    """Re-voxelizes the scene with the tracked primitive at its pose for time t.

    Stateless: the input scene is untouched.  t = 0 returns a scene equal to
    the input (the identity keyframe takes a fast path so voxelization is
    bit-identical).
    """
    if not (0.0 <= t <= 1.0):
        raise SceneError(f"time must lie in [0, 1], got {t}")
    if scene.spec is None:
        raise SceneError("scene lacks its generating spec; cannot re-voxelize")
    if not (0 <= track.primitive_index < len(scene.spec.primitives)):
        raise SceneError(f"track targets primitive {track.primitive_index}, "
                         f"but the scene has {len(scene.spec.primitives)}")
    translation, angle = track.pose_at(t)
    if np.all(translation == 0.0) and angle == 0.0:
        return _rasterize(scene.spec, poses=None)
    rotation = _axis_angle_matrix(track.axis, angle)
    return _rasterize(scene.spec, poses={track.primitive_index: (translation, rotation)})


class VoxelSceneField:
    """Adapts a voxel scene to the renderer's field protocol.

    Queries trilinearly interpolate density and albedo between voxel centers
    (edge-clamped), which makes the analytic ground truth piecewise-smooth in
    exactly the way the renderer sees it.
    """

    def __init__(self, scene: VoxelScene):
        self.scene = scene
        self.aabb = scene.bounds

    def query(self, positions: np.ndarray, with_cache: bool = False):
        if with_cache:
            raise NotImplementedError("the scene oracle is not trainable")
        pts = np.asarray(positions, dtype=np.float64)
        shape = pts.shape[:-1]
        flat = pts.reshape(-1, 3)
        n = self.scene.resolution
        u = (flat - self.aabb.lo) / self.aabb.size
        g = np.clip(u * n - 0.5, 0.0, n - 1.0)
        i0 = np.minimum(g.astype(np.int64), n - 2)
        f = g - i0
        density = self.scene.density
        albedo = self.scene.albedo
        rgb = np.zeros((flat.shape[0], 3))
        sigma = np.zeros(flat.shape[0])
        for dz in (0, 1):
            for dy in (0, 1):
                for dx in (0, 1):
                    w = (
                        (f[:, 0] if dx else 1.0 - f[:, 0])
                        * (f[:, 1] if dy else 1.0 - f[:, 1])
                        * (f[:, 2] if dz else 1.0 - f[:, 2])
                    )
                    ix, iy, iz = i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz
                    sigma += w * density[ix, iy, iz]
                    rgb += w[:, None] * albedo[ix, iy, iz]
        return rgb.reshape(shape + (3,)), sigma.reshape(shape)


def trace_ground_truth(scene: VoxelScene, pose: CameraPose, width: int, height: int,
                       samples_per_ray: int, seed: int | None = None,
                       threads: int | None = None) -> FrameMaps:
    """Analytic render of a voxel scene via the shared compositing kernel."""
    if samples_per_ray < 2:
        raise ValueError("samples_per_ray must be >= 2")
    return render_frame(VoxelSceneField(scene), pose, width, height,
                        n_samples=samples_per_ray, seed=seed, threads=threads)


# ---------------------------------------------------------------------- #
# binary scene container


def save_scene(scene: VoxelScene, path) -> None:
    """Writes a deterministic binary container (little-endian f32 grids)."""
    n = scene.resolution
    header = struct.pack(
        "<4sHI6d",
        SCENE_MAGIC,
        SCENE_VERSION,
        n,
        *scene.bounds.center.tolist(),
        *scene.bounds.half_extent.tolist(),
    )
    spec_json = b""
    if scene.spec is not None:
        spec_json = json.dumps(scene.spec.to_json(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(struct.pack("<I", len(spec_json)))
        fh.write(spec_json)
        fh.write(np.ascontiguousarray(scene.density, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(scene.albedo, dtype="<f4").tobytes())


def load_scene(path) -> VoxelScene:
    with open(path, "rb") as fh:
        head = fh.read(struct.calcsize("<4sHI6d"))
        magic, version, n, cx, cy, cz, hx, hy, hz = struct.unpack("<4sHI6d", head)
        if magic != SCENE_MAGIC:
            raise SceneError(f"bad scene magic {magic!r}")
        if version != SCENE_VERSION:
            raise SceneError(f"unsupported scene version {version}")
        (spec_len,) = struct.unpack("<I", fh.read(4))
        spec = None
        if spec_len:
            spec = SceneSpec.from_json(json.loads(fh.read(spec_len).decode("utf-8")))
        count = n * n * n
        density = np.frombuffer(fh.read(count * 4), dtype="<f4").astype(np.float64)
        albedo = np.frombuffer(fh.read(count * 12), dtype="<f4").astype(np.float64)
    bounds = Aabb(np.array([cx, cy, cz]), np.array([hx, hy, hz]))
    return VoxelScene(n, density.reshape(n, n, n), albedo.reshape(n, n, n, 3),
                      bounds, spec=spec)
