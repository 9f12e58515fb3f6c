"""Synthetic bin scenes and single-view partial clouds.

Scenes hold ground-truth superquadrics resting on a bin floor, placed by
rejection sampling so no two interpenetrate. A virtual pinhole camera
renders each view by z-buffering dense surface samples of all objects plus
the bin geometry; the per-pixel winners, grouped by instance, are the
partial clouds — each point lies exactly on its object's surface, so the
generator is its own ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import IoFailure, PlacementFailure
from .geometry import (
    Pose,
    ScaleParams,
    ShapeParams,
    Superquadric,
    axis_rotation,
    implicit_value,
    rotvec_to_rotation,
    sample_surface,
)
from .pointcloud import PointCloud, write_ply
from .rng import substream
from .storage import write_json

# Objects are rejected if any surface sample of one falls deeper than this
# implicit value under another (small negative = grazing contact allowed).
PENETRATION_TOL = -0.05
# Placement uses a stricter margin so the post-hoc invariant check, which
# draws its own samples, stays clear of the tolerance.
_PLACEMENT_TOL = -0.03
_PLACEMENT_SAMPLES = 2000

DEFAULT_RENDER_SAMPLES = 24000


@dataclass(frozen=True)
class BinSpec:
    inner_x: float = 0.40
    inner_y: float = 0.40
    wall_height: float = 0.12
    wall_thickness: float = 0.01
    pose: Pose = field(default_factory=Pose.identity)

    def __post_init__(self):
        if min(self.inner_x, self.inner_y, self.wall_height, self.wall_thickness) <= 0:
            raise ValueError("bin dimensions must be positive")


@dataclass(frozen=True)
class CameraSpec:
    pose: Pose
    focal: float = 600.0  # pixels
    principal: tuple = (320.0, 240.0)
    resolution: tuple = (640, 480)
    near: float = 0.05
    far: float = 2.0
    view_id: int = 0

    def __post_init__(self):
        if self.focal <= 0:
            raise ValueError("focal length must be positive")
        if self.resolution[0] < 64 or self.resolution[1] < 64:
            raise ValueError("resolution must be at least 64x64")
        if not (0 < self.near < self.far):
            raise ValueError("need 0 < near < far")

    @property
    def optical_axis(self) -> np.ndarray:
        return self.pose.rotation[:, 2]


@dataclass
class Scene:
    bin: BinSpec
    objects: list  # [(id, Superquadric)]
    seed: int
    all_placed: bool = True

    def to_dict(self) -> dict:
        return {
            "format": 1,
            "seed": int(self.seed),
            "all_placed": bool(self.all_placed),
            "bin": {
                "inner_x": self.bin.inner_x,
                "inner_y": self.bin.inner_y,
                "wall_height": self.bin.wall_height,
                "wall_thickness": self.bin.wall_thickness,
            },
            "objects": [{"id": int(i), "sq": sq.to_dict()} for i, sq in self.objects],
        }


@dataclass
class DatasetSample:
    partial_cloud: PointCloud
    gt: Superquadric
    view_id: int
    occlusion_ratio: float
    object_id: int = 0


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------

def _random_superquadric(rng, eps_range, scale_range) -> tuple:
    eps = rng.uniform(eps_range[0], eps_range[1], size=2)
    draws = rng.uniform(scale_range[0], scale_range[1], size=3)
    # ax >= ay canonical form: the shape is unchanged under swapping the
    # xy semi-axes and rotating 90 deg about z, so fix the representative.
    ax, ay = max(draws[0], draws[1]), min(draws[0], draws[1])
    return ShapeParams(eps[0], eps[1]), ScaleParams(ax, ay, draws[2])


def _resting_height(shape, scale, yaw_rot, rng) -> float:
    probe = Superquadric(shape, scale, Pose(yaw_rot, np.zeros(3)))
    pts = sample_surface(probe, 2000, int(rng.integers(2**31))).points
    return -float(pts[:, 2].min())


def _penetrates(sq_a: Superquadric, sq_b: Superquadric, seed: int) -> bool:
    pa = sample_surface(sq_a, _PLACEMENT_SAMPLES, seed).points
    pb = sample_surface(sq_b, _PLACEMENT_SAMPLES, seed + 1).points
    if np.any(implicit_value(sq_b, pa) < _PLACEMENT_TOL):
        return True
    return bool(np.any(implicit_value(sq_a, pb) < _PLACEMENT_TOL))


def generate_scene(
    bin_spec: BinSpec,
    n_objects: int,
    seed: int,
    eps_range=(0.2, 1.8),
    scale_range=(0.015, 0.06),
    max_attempts: int = 200,
) -> Scene:
    """Random convex superquadrics resting on the bin floor.

    Each object gets random exponents and semi-axes, a random yaw, and a
    random xy position inside the walls; its height is set so the lowest
    surface point touches the floor. Placements that interpenetrate an
    existing object are rejected, up to max_attempts per object; a scene
    that cannot take all its objects is emitted short with all_placed
    False. Deterministic given seed.
    """
    if n_objects < 1:
        raise ValueError("n_objects must be >= 1")
    objects = []
    all_placed = True
    for obj_id in range(n_objects):
        rng = substream(seed, "scene", "object", obj_id)
        placed = False
        for _ in range(max_attempts):
            shape, scale = _random_superquadric(rng, eps_range, scale_range)
            yaw = rng.uniform(0.0, 2.0 * np.pi)
            rot = axis_rotation(2, yaw)
            margin = max(scale.ax, scale.ay)
            half_x = bin_spec.inner_x / 2.0 - margin
            half_y = bin_spec.inner_y / 2.0 - margin
            if half_x <= 0 or half_y <= 0:
                continue
            xy = rng.uniform([-half_x, -half_y], [half_x, half_y])
            z = _resting_height(shape, scale, rot, rng)
            sq = Superquadric(shape, scale, Pose(rot, np.array([xy[0], xy[1], z])))
            if any(_penetrates(sq, other, seed + 7919 * obj_id) for _, other in objects):
                continue
            objects.append((obj_id, sq))
            placed = True
            break
        if not placed:
            all_placed = False
    if not objects:
        raise PlacementFailure("no object could be placed in the bin")
    return Scene(bin_spec, objects, seed, all_placed)


# ---------------------------------------------------------------------------
# Viewpoints
# ---------------------------------------------------------------------------

_TOP_DOWN_ROT = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])


def sample_viewpoints(
    base_height: float,
    jitter_deg: float = 15.0,
    seed: int = 0,
    center=(0.0, 0.0, 0.0),
    **camera_kwargs,
) -> list:
    """Six camera poses near the top-down view over `center`.

    View 0 looks straight down; views 1-5 tilt the optical axis by a
    uniform angle in (0, jitter_deg] at a uniform random azimuth, keeping
    the optical axis through the bin center at distance base_height.
    """
    rng = substream(seed, "viewpoints")
    center = np.asarray(center, dtype=float)
    cams = []
    for view_id in range(6):
        if view_id == 0:
            rot = _TOP_DOWN_ROT.copy()
        else:
            tilt = rng.uniform(0.0, np.radians(jitter_deg))
            tilt = max(tilt, 1e-6)  # open interval: strictly > 0
            azimuth = rng.uniform(0.0, 2.0 * np.pi)
            axis = np.array([-np.sin(azimuth), np.cos(azimuth), 0.0])
            from .geometry import rotvec_to_rotation

            rot = rotvec_to_rotation(axis * tilt) @ _TOP_DOWN_ROT
        forward = rot[:, 2]
        position = center - base_height * forward
        cams.append(
            CameraSpec(pose=Pose(rot, position), view_id=view_id, **camera_kwargs)
        )
    return cams


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _bin_surface_points(bin_spec: BinSpec, pitch: float = 0.0025) -> np.ndarray:
    """Dense samples on the bin floor and walls (z-buffer competitors only)."""
    hx, hy = bin_spec.inner_x / 2.0, bin_spec.inner_y / 2.0
    th, hgt = bin_spec.wall_thickness, bin_spec.wall_height
    xs = np.arange(-hx - th, hx + th + pitch / 2, pitch)
    ys = np.arange(-hy - th, hy + th + pitch / 2, pitch)
    zs = np.arange(0.0, hgt + pitch / 2, pitch)

    floor = np.stack(np.meshgrid(xs, ys, [0.0], indexing="ij"), axis=-1).reshape(-1, 3)
    walls = []
    for x_face in (-hx, hx, -hx - th, hx + th):
        walls.append(np.stack(np.meshgrid([x_face], ys, zs, indexing="ij"), axis=-1).reshape(-1, 3))
    for y_face in (-hy, hy, -hy - th, hy + th):
        walls.append(np.stack(np.meshgrid(xs, [y_face], zs, indexing="ij"), axis=-1).reshape(-1, 3))
    top = np.stack(np.meshgrid(xs, ys, [hgt], indexing="ij"), axis=-1).reshape(-1, 3)
    rim = top[(np.abs(top[:, 0]) >= hx) | (np.abs(top[:, 1]) >= hy)]
    pts = np.concatenate([floor] + walls + [rim], axis=0)
    return bin_spec.pose.apply(pts)


def _project(cam: CameraSpec, points: np.ndarray):
    """Pixel indices and forward depth; invalid points get pixel -1."""
    q = cam.pose.invert_apply(points)
    z = q[:, 2]
    w, h = cam.resolution
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.floor(cam.focal * q[:, 0] / z + cam.principal[0]).astype(np.int64)
        v = np.floor(cam.focal * q[:, 1] / z + cam.principal[1]).astype(np.int64)
    ok = (z >= cam.near) & (z <= cam.far) & (u >= 0) & (u < w) & (v >= 0) & (v < h)
    pix = np.where(ok, v * w + u, -1)
    return pix, z


def _visible_count_solo(pix: np.ndarray, depth: np.ndarray) -> int:
    """Pixels an object wins rendered alone (self-occlusion only)."""
    ok = pix >= 0
    if not np.any(ok):
        return 0
    return int(np.unique(pix[ok]).size)


def render_partial_cloud(
    scene: Scene, cam: CameraSpec, n_samples: int = DEFAULT_RENDER_SAMPLES
) -> list:
    """Z-buffer render of a scene into per-instance partial clouds.

    Each object contributes n_samples dense surface points; per pixel the
    nearest point across all objects and the bin geometry wins. Winning
    points keep their exact 3D surface coordinates. Fully hidden objects
    yield no sample. occlusion_ratio is 1 - visible/solo-visible pixels.
    """
    clouds = []
    pix_all, depth_all, owner_all = [], [], []
    solo_counts = {}
    for obj_id, sq in scene.objects:
        rng_seed = substream(scene.seed, "render", cam.view_id, obj_id)
        pts = sample_surface(sq, n_samples, int(rng_seed.integers(2**31))).points
        pix, depth = _project(cam, pts)
        solo_counts[obj_id] = _visible_count_solo(pix, depth)
        clouds.append((obj_id, pts))
        pix_all.append(pix)
        depth_all.append(depth)
        owner_all.append(np.full(pts.shape[0], obj_id, dtype=np.int64))

    bin_pts = _bin_surface_points(scene.bin)
    pix, depth = _project(cam, bin_pts)
    pix_all.append(pix)
    depth_all.append(depth)
    owner_all.append(np.full(bin_pts.shape[0], -1, dtype=np.int64))

    pix = np.concatenate(pix_all)
    depth = np.concatenate(depth_all)
    owner = np.concatenate(owner_all)
    valid = pix >= 0

    w, h = cam.resolution
    zbuf = np.full(w * h, np.inf)
    winner = np.full(w * h, -2, dtype=np.int64)  # global point index
    order = np.argsort(-depth[valid], kind="stable")
    vi = np.nonzero(valid)[0][order]  # far-to-near: nearest written last
    zbuf[pix[vi]] = depth[vi]
    winner[pix[vi]] = vi

    won = winner[winner >= 0]
    visible = np.zeros(pix.shape[0], dtype=bool)
    visible[won] = True

    samples = []
    offset = 0
    for obj_id, pts in clouds:
        n = pts.shape[0]
        vis_mask = visible[offset : offset + n]
        offset += n
        solo = solo_counts[obj_id]
        n_vis = int(vis_mask.sum())
        if n_vis == 0 or solo == 0:
            continue
        occlusion = float(np.clip(1.0 - n_vis / solo, 0.0, 1.0))
        cloud = PointCloud(pts[vis_mask], np.full(n_vis, obj_id, dtype=np.int64))
        gt = dict(scene.objects)[obj_id]
        samples.append(DatasetSample(cloud, gt, cam.view_id, occlusion, obj_id))
    return samples


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

SCALE_GRID = np.round(np.arange(0.50, 2.0001, 0.05), 2)
NOISE_SIGMA_RANGE = (0.001, 0.005)


def _augment_with(
    sample: DatasetSample,
    factors: np.ndarray,
    sigma: float,
    delta_xy: np.ndarray,
    noise_rng,
) -> DatasetSample:
    """Deterministic augmentation core; `augment` draws the parameters.

    Applies, in order: per-axis scaling in the object's local frame (so
    the scaled ground truth still generates the cloud exactly), isotropic
    Gaussian noise on the cloud only, then a rigid xy translation of both.
    """
    sq = sample.gt
    R, t = sq.pose.rotation, sq.pose.translation
    factors = np.asarray(factors, dtype=float)

    local = (sample.partial_cloud.points - t) @ R
    scaled = (local * factors) @ R.T + t
    if sigma > 0:
        scaled = scaled + noise_rng.normal(0.0, sigma, size=scaled.shape)
    delta = np.array([delta_xy[0], delta_xy[1], 0.0])
    moved = scaled + delta

    new_scale = ScaleParams(
        sq.scale.ax * factors[0], sq.scale.ay * factors[1], sq.scale.az * factors[2]
    )
    new_gt = Superquadric(sq.shape, new_scale, Pose(R, t + delta))
    cloud = PointCloud(moved, None if sample.partial_cloud.labels is None else sample.partial_cloud.labels.copy())
    return DatasetSample(cloud, new_gt, sample.view_id, sample.occlusion_ratio, sample.object_id)


def augment(sample: DatasetSample, seed: int, bin_spec: BinSpec | None = None) -> DatasetSample:
    """Randomized training augmentation of one sample.

    Per-axis scale factors come from the grid {0.50, 0.55, ..., 2.00};
    noise sigma is uniform in [1, 5] mm; the object is re-centered at a
    uniform xy position inside the bin footprint. Deterministic per seed.
    """
    bin_spec = bin_spec or BinSpec()
    rng = substream(seed, "augment")
    factors = rng.choice(SCALE_GRID, size=3)
    sigma = rng.uniform(*NOISE_SIGMA_RANGE)

    sq = sample.gt
    margin = max(sq.scale.ax * factors[0], sq.scale.ay * factors[1])
    half_x = max(bin_spec.inner_x / 2.0 - margin, 0.0)
    half_y = max(bin_spec.inner_y / 2.0 - margin, 0.0)
    target_xy = rng.uniform([-half_x, -half_y], [half_x, half_y])
    delta_xy = target_xy - sq.pose.translation[:2]
    return _augment_with(sample, factors, sigma, delta_xy, rng)


# ---------------------------------------------------------------------------
# Dataset export
# ---------------------------------------------------------------------------

def export_dataset(
    scenes: list,
    out_dir,
    base_height: float = 0.8,
    n_views: int = 6,
    n_render_samples: int = DEFAULT_RENDER_SAMPLES,
    augment_samples: bool = False,
) -> dict:
    """Write scenes to disk as PLY partial clouds + JSON ground truths.

    Layout: out_dir/scene_{i:04}/view_{j}/obj_{k}.ply and obj_{k}.json,
    with a manifest.json at the root listing every emitted pair. Returns
    the manifest dict.
    """
    import os

    out_dir = os.fspath(out_dir)
    rows = []
    for scene_idx, scene in enumerate(scenes):
        cams = sample_viewpoints(base_height, seed=substream(scene.seed, "views").integers(2**31))
        for cam in cams[:n_views]:
            samples = render_partial_cloud(scene, cam, n_render_samples)
            for s in samples:
                if augment_samples:
                    s = augment(s, int(substream(scene.seed, "aug", cam.view_id, s.object_id).integers(2**31)), scene.bin)
                rel_dir = f"scene_{scene_idx:04d}/view_{cam.view_id}"
                cloud_rel = f"{rel_dir}/obj_{s.object_id}.ply"
                sq_rel = f"{rel_dir}/obj_{s.object_id}.json"
                try:
                    write_ply(s.partial_cloud, os.path.join(out_dir, cloud_rel))
                    write_json(os.path.join(out_dir, sq_rel), s.gt.to_dict())
                except OSError as err:
                    raise IoFailure(f"{os.path.join(out_dir, cloud_rel)}: {err}") from err
                rows.append(
                    {
                        "scene": scene_idx,
                        "view": cam.view_id,
                        "object": s.object_id,
                        "occlusion_ratio": round(s.occlusion_ratio, 9),
                        "cloud": cloud_rel,
                        "sq": sq_rel,
                    }
                )
        write_json(
            os.path.join(out_dir, f"scene_{scene_idx:04d}", "scene.json"), scene.to_dict()
        )
    manifest = {"format": 1, "n_scenes": len(scenes), "rows": rows}
    write_json(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest
