"""Synthetic road scenes rendered by ray casting.

World frame = LiDAR frame: x forward, y left, z up, origin on the road surface
below the sensors. The road is a convex polygon on z = 0; the terrain outside
it sits at ``curb_height`` (0 gives a flat world). Obstacles are axis-aligned
boxes standing on z = 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data, geometry

SKY, ROAD, TERRAIN, CURB, OBSTACLE = 0, 1, 2, 3, 4
MAX_RANGE = 80.0
_INTENSITY = {ROAD: 0.2, TERRAIN: 0.35, CURB: 0.5, OBSTACLE: 0.7}


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    length: float  # extent along x
    width: float  # extent along y
    height: float

    def __post_init__(self):
        if self.height <= 0 or self.length <= 0 or self.width <= 0:
            raise ValueError("obstacle extents must be positive")


@dataclass
class SceneSpec:
    road: tuple | None = None  # convex polygon [(x, y), ...] on z = 0; None = random per sample
    obstacles: tuple | None = None  # fixed boxes; None = ``n_obstacles`` random boxes per sample
    n_obstacles: int = 3
    lidar_lines: int = 64
    jitter: float = 0.02
    brightness_corruption: bool = False
    curb_height: float = 0.15
    width: int = 64
    height: int = 64
    hfov_deg: float = 60.0
    azimuth_step_deg: float = 0.6
    cam_height: float = 1.65
    lidar_height: float = 1.73
    texture_noise: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.road is not None:
            poly = np.asarray(self.road, dtype=np.float64)
            if poly.ndim != 2 or poly.shape[0] < 3 or abs(_signed_area(poly)) < 1e-9:
                raise ValueError("road polygon is empty or degenerate")
        if self.lidar_lines < 1:
            raise ValueError("lidar_lines must be >= 1")


@dataclass
class SynthScene:
    rgb_u8: np.ndarray  # (H, W, 3)
    mask: np.ndarray  # (H, W) uint8
    cloud: geometry.PointCloud
    calib: geometry.Calibration
    kind: np.ndarray  # (H, W) surface class per pixel
    road: np.ndarray
    obstacles: list = field(default_factory=list)


@dataclass
class SynthDataset:
    scenes: list
    samples: list  # data.Sample

    def __len__(self):
        return len(self.samples)


def _signed_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _halfplanes(poly: np.ndarray):
    """Outward normals n and offsets c with inside <=> n . p <= c for every edge (convex polygon)."""
    if _signed_area(poly) < 0:
        poly = poly[::-1]
    e = np.roll(poly, -1, axis=0) - poly
    normals = np.stack([e[:, 1], -e[:, 0]], axis=1)
    offsets = np.sum(normals * poly, axis=1)
    return normals, offsets


def inside_polygon(pts: np.ndarray, poly: np.ndarray) -> np.ndarray:
    n, c = _halfplanes(np.asarray(poly, dtype=np.float64))
    return np.all(pts @ n.T <= c + 1e-12, axis=-1)


def camera_calibration(spec: SceneSpec) -> geometry.Calibration:
    f = spec.width / (2.0 * np.tan(np.radians(spec.hfov_deg) / 2))
    cx, cy = spec.width / 2.0, spec.height * 0.3
    proj = np.array([[f, 0, cx, 0], [0, f, cy, 0], [0, 0, 1, 0]], dtype=np.float64)
    tr = np.array([[0, -1, 0, 0], [0, 0, -1, spec.cam_height], [1, 0, 0, 0]], dtype=np.float64)
    return geometry.Calibration(proj, np.eye(3), tr)


def cast(origin, dirs, road, boxes, curb_height):
    """Nearest surface along each ray: returns (t, kind, hit_index). ``dirs`` is (N, 3)."""
    n = dirs.shape[0]
    t_best = np.full(n, np.inf)
    kind = np.full(n, SKY, dtype=np.int64)
    hit = np.full(n, -1, dtype=np.int64)
    oz = origin[2]
    dz = dirs[:, 2]
    down = dz < -1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = np.where(down, -oz / dz, np.inf)
        p0 = np.where(down[:, None], origin[:2] + t0[:, None] * dirs[:, :2], 0.0)
        in0 = down & inside_polygon(p0, road)
        if curb_height > 0:
            tc = np.where(down, (curb_height - oz) / dz, np.inf)
            pc = np.where(down[:, None], origin[:2] + tc[:, None] * dirs[:, :2], 0.0)
            inc = down & inside_polygon(pc, road)
            terrain = down & ~inc
            wall = inc & ~in0
            t_ground = np.where(terrain, tc, np.where(in0, t0, np.inf))
            k_ground = np.where(terrain, TERRAIN, np.where(in0, ROAD, SKY))
            if wall.any():
                nrm, off = _halfplanes(np.asarray(road, dtype=np.float64))
                a, b = pc[wall], p0[wall]
                na, nb = a @ nrm.T, b @ nrm.T
                exiting = nb > off
                s = np.where(exiting, (off - na) / np.where(exiting, nb - na, 1.0), np.inf).min(axis=1)
                s = np.clip(s, 0.0, 1.0)
                t_ground[wall] = tc[wall] + s * (t0[wall] - tc[wall])
                k_ground[wall] = CURB
        else:
            t_ground = np.where(down, t0, np.inf)
            k_ground = np.where(in0, ROAD, np.where(down, TERRAIN, SKY))
    t_best, kind = t_ground, k_ground
    for bi, bx in enumerate(boxes):
        lo = np.array([bx.x - bx.length / 2, bx.y - bx.width / 2, 0.0])
        hi = np.array([bx.x + bx.length / 2, bx.y + bx.width / 2, bx.height])
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t1 = (lo - origin) * inv
            t2 = (hi - origin) * inv
        tmin = np.nanmax(np.minimum(t1, t2), axis=1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=1)
        ok = (tmax >= np.maximum(tmin, 0)) & (tmin > 0) & (tmin < t_best)
        t_best = np.where(ok, tmin, t_best)
        kind = np.where(ok, OBSTACLE, kind)
        hit = np.where(ok, bi, hit)
    far = t_best * np.linalg.norm(dirs, axis=1) > MAX_RANGE
    kind = np.where(far, SKY, kind)
    t_best = np.where(far, np.inf, t_best)
    return t_best, kind, hit


def pixel_rays(spec: SceneSpec, calib: geometry.Calibration):
    """World-frame direction through every pixel centre, (H*W, 3) row-major."""
    f, cx, cy = calib.proj[0, 0], calib.proj[0, 2], calib.proj[1, 2]
    v, u = np.mgrid[0 : spec.height, 0 : spec.width]
    xc = (u.ravel() + 0.5 - cx) / f
    yc = (v.ravel() + 0.5 - cy) / f
    return np.stack([np.ones_like(xc), -xc, -yc], axis=1)


def lidar_rays(spec: SceneSpec):
    elev = np.radians(np.linspace(2.0, -24.8, spec.lidar_lines))
    half = spec.hfov_deg / 2 + 5.0
    az = np.radians(np.arange(-half, half + 1e-9, spec.azimuth_step_deg))
    e, a = np.meshgrid(elev, az, indexing="ij")
    return np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1).reshape(-1, 3)


def random_road(rng) -> np.ndarray:
    near_x, far_x = 1.0, 60.0
    near_c = rng.uniform(-1.5, 1.5)
    far_c = rng.uniform(-8.0, 8.0)
    near_w = rng.uniform(2.5, 4.0)
    far_w = rng.uniform(1.5, 3.0)
    return np.array(
        [[near_x, near_c - near_w], [far_x, far_c - far_w], [far_x, far_c + far_w], [near_x, near_c + near_w]]
    )


def random_obstacles(rng, road: np.ndarray, count: int) -> list:
    boxes = []
    for _ in range(count):
        x = rng.uniform(6.0, 30.0)
        frac = (x - road[0, 0]) / (road[1, 0] - road[0, 0])
        left = road[3, 1] + frac * (road[2, 1] - road[3, 1])
        right = road[0, 1] + frac * (road[1, 1] - road[0, 1])
        where = rng.uniform()
        if where < 0.4:  # on a road edge
            y = left if rng.uniform() < 0.5 else right
        elif where < 0.7:  # on the road
            y = rng.uniform(right, left)
        else:  # off road
            y = rng.uniform(right - 6.0, left + 6.0)
        boxes.append(
            Box(x=x, y=y, length=rng.uniform(1.0, 4.0), width=rng.uniform(0.8, 2.0), height=rng.uniform(0.5, 2.0))
        )
    return boxes


_TERRAIN_PALETTE = np.array(
    [[0.30, 0.45, 0.22], [0.45, 0.40, 0.30], [0.42, 0.42, 0.42], [0.36, 0.36, 0.38], [0.50, 0.48, 0.44]]
)


def render_scene(spec: SceneSpec, rng) -> SynthScene:
    calib = camera_calibration(spec)
    road = np.asarray(spec.road, dtype=np.float64) if spec.road is not None else random_road(rng)
    boxes = list(spec.obstacles) if spec.obstacles is not None else random_obstacles(rng, road, spec.n_obstacles)

    # camera
    cam_origin = np.array([0.0, 0.0, spec.cam_height])
    dirs = pixel_rays(spec, calib)
    _, kind, hit = cast(cam_origin, dirs, road, boxes, spec.curb_height)
    road_col = np.clip(np.array([0.36, 0.36, 0.38]) + rng.normal(0, 0.03, 3), 0, 1)
    terrain_col = np.clip(_TERRAIN_PALETTE[rng.integers(len(_TERRAIN_PALETTE))] + rng.normal(0, 0.03, 3), 0, 1)
    sky_col = np.array([0.60, 0.72, 0.90])
    curb_col = np.array([0.65, 0.65, 0.62])
    box_cols = np.clip(rng.uniform(0.1, 0.9, (max(1, len(boxes)), 3)), 0, 1)
    img = np.empty((dirs.shape[0], 3))
    img[kind == SKY] = sky_col
    img[kind == ROAD] = road_col
    img[kind == TERRAIN] = terrain_col
    img[kind == CURB] = curb_col
    if boxes:
        ob = kind == OBSTACLE
        img[ob] = box_cols[hit[ob]]
    img += rng.normal(0.0, spec.texture_noise, img.shape)
    if spec.brightness_corruption:
        img *= rng.uniform(0.3, 0.7)
    img = np.clip(img, 0.0, 1.0).reshape(spec.height, spec.width, 3)
    rgb_u8 = np.round(img * 255).astype(np.uint8)
    kind = kind.reshape(spec.height, spec.width)

    # lidar
    lid_origin = np.array([0.0, 0.0, spec.lidar_height])
    ldirs = lidar_rays(spec)
    t, lkind, _ = cast(lid_origin, ldirs, road, boxes, spec.curb_height)
    ok = lkind != SKY
    pts = lid_origin + t[ok, None] * ldirs[ok]
    if spec.jitter > 0:
        pts = pts + rng.normal(0.0, spec.jitter, pts.shape)
    inten = np.array([_INTENSITY[k] for k in lkind[ok]]) if ok.any() else np.zeros(0)
    cloud = geometry.PointCloud(np.column_stack([pts, inten]) if ok.any() else np.zeros((0, 4)))

    return SynthScene(
        rgb_u8=rgb_u8,
        mask=(kind == ROAD).astype(np.uint8),
        cloud=cloud,
        calib=calib,
        kind=kind,
        road=road,
        obstacles=boxes,
    )


def scene_to_sample(scene: SynthScene, radius=geometry.DEFAULT_RADIUS, clip=geometry.DEFAULT_CLIP,
                    densify=False, knn_k=geometry.DEFAULT_KNN_K, source="") -> data.Sample:
    h, w = scene.mask.shape
    adi = geometry.cloud_to_adi(scene.cloud, scene.calib, w, h, radius=radius, clip=clip, densify=densify, knn_k=knn_k)
    rgb = (scene.rgb_u8.astype(np.float32) / 255.0).transpose(2, 0, 1)
    return data.Sample(rgb=np.ascontiguousarray(rgb), adi=adi[None], mask=scene.mask.copy(), source=source)


def synth_generate(spec: SceneSpec, n: int, **geo) -> SynthDataset:
    """Render ``n`` seed-deterministic scenes and their preprocessed samples."""
    if n < 1:
        raise ValueError("n must be >= 1")
    children = np.random.SeedSequence(spec.seed).spawn(n)
    scenes, samples = [], []
    for i, child in enumerate(children):
        scene = render_scene(spec, np.random.default_rng(child))
        scenes.append(scene)
        samples.append(scene_to_sample(scene, source=f"synth_{i:06d}", **geo))
    return SynthDataset(scenes=scenes, samples=samples)


def write_dataset(root, dataset: SynthDataset, prefix: str = "synth"):
    root = Path(root)
    for i, scene in enumerate(dataset.scenes):
        data.write_sample_files(root, f"{prefix}_{i:06d}", scene.rgb_u8, scene.mask, scene.cloud, scene.calib)
    return root
