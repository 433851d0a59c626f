"""LiDAR projection, altitude-difference images and sparse-map densification."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels

DEFAULT_RADIUS = 2
DEFAULT_CLIP = 2.0
DEFAULT_KNN_K = 3


class CloudFormatError(ValueError):
    pass


class CalibrationError(ValueError):
    pass


@dataclass
class PointCloud:
    """(N, 4) array of x, y, z, intensity in the LiDAR frame (z up)."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        if not np.all(np.isfinite(pts[:, :3])):
            raise ValueError("point cloud contains non-finite coordinates")
        self.points = pts

    def __len__(self):
        return self.points.shape[0]


@dataclass
class Calibration:
    proj: np.ndarray  # 3x4
    rect: np.ndarray  # 3x3
    lidar_to_cam: np.ndarray  # 3x4

    def __post_init__(self):
        self.proj = np.asarray(self.proj, dtype=np.float64).reshape(3, 4)
        self.rect = np.asarray(self.rect, dtype=np.float64).reshape(3, 3)
        self.lidar_to_cam = np.asarray(self.lidar_to_cam, dtype=np.float64).reshape(3, 4)
        if not np.allclose(self.rect @ self.rect.T, np.eye(3), atol=1e-4):
            raise CalibrationError("rectification matrix is not orthonormal")

    def matrix(self) -> np.ndarray:
        """3x4 composition proj . rect(4x4) . lidar_to_cam(4x4)."""
        r = np.eye(4)
        r[:3, :3] = self.rect
        t = np.eye(4)
        t[:3, :] = self.lidar_to_cam
        return self.proj @ r @ t

    @classmethod
    def identity(cls, proj) -> "Calibration":
        return cls(proj=proj, rect=np.eye(3), lidar_to_cam=np.hstack([np.eye(3), np.zeros((3, 1))]))


@dataclass
class SparseAltitudeMap:
    """Per-pixel altitude (LiDAR-frame z) and depth; ``occupied`` marks cells with a record."""

    altitude: np.ndarray
    depth: np.ndarray
    occupied: np.ndarray

    @property
    def height(self) -> int:
        return self.altitude.shape[0]

    @property
    def width(self) -> int:
        return self.altitude.shape[1]

    @classmethod
    def empty(cls, width: int, height: int) -> "SparseAltitudeMap":
        return cls(np.zeros((height, width)), np.zeros((height, width)), np.zeros((height, width), dtype=bool))

    @classmethod
    def from_cells(cls, width: int, height: int, cells: dict) -> "SparseAltitudeMap":
        """Build from ``{(x, y): altitude}`` or ``{(x, y): (altitude, depth)}``."""
        m = cls.empty(width, height)
        for (x, y), v in cells.items():
            alt, dep = (v, 1.0) if np.isscalar(v) else v
            m.altitude[y, x] = alt
            m.depth[y, x] = dep
            m.occupied[y, x] = True
        return m

    def occupancy_ratio(self) -> float:
        return float(self.occupied.mean())


# -- file formats -------------------------------------------------------------


def read_velodyne(path) -> PointCloud:
    blob = Path(path).read_bytes()
    if len(blob) % 16:
        raise CloudFormatError(f"{path}: size is not a multiple of 16 bytes")
    return PointCloud(np.frombuffer(blob, dtype="<f4").reshape(-1, 4))


def write_velodyne(path, cloud: PointCloud):
    cloud.points.astype("<f4").tofile(path)


def read_calibration(path) -> Calibration:
    fields = {}
    for line in Path(path).read_text().splitlines():
        if ":" not in line:
            continue
        key, _, rest = line.partition(":")
        try:
            fields[key.strip()] = np.array([float(v) for v in rest.split()])
        except ValueError as exc:
            raise CalibrationError(f"{path}: cannot parse values for {key!r}") from exc
    need = {"P2": 12, "R0_rect": 9, "Tr_velo_to_cam": 12}
    for key, n in need.items():
        if key not in fields:
            raise CalibrationError(f"{path}: missing {key}")
        if fields[key].size != n:
            raise CalibrationError(f"{path}: {key} has {fields[key].size} values, expected {n}")
    return Calibration(fields["P2"], fields["R0_rect"], fields["Tr_velo_to_cam"])


def write_calibration(path, calib: Calibration):
    def fmt(a):
        return " ".join(f"{v:.12e}" for v in np.asarray(a).ravel())

    Path(path).write_text(
        f"P2: {fmt(calib.proj)}\nR0_rect: {fmt(calib.rect)}\nTr_velo_to_cam: {fmt(calib.lidar_to_cam)}\n"
    )


# -- operations ---------------------------------------------------------------


def project_points(cloud: PointCloud, calib: Calibration, width: int, height: int) -> SparseAltitudeMap:
    if width <= 0 or height <= 0:
        raise ValueError("image size must be positive")
    mat = calib.matrix()
    if np.allclose(mat[2], 0.0):
        raise CalibrationError("degenerate calibration: projective row is zero")
    out = SparseAltitudeMap.empty(width, height)
    if len(cloud) == 0:
        return out
    pts = cloud.points
    homo = np.hstack([pts[:, :3], np.ones((len(pts), 1))])
    uvw = homo @ mat.T
    depth = uvw[:, 2]
    front = depth > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.floor(uvw[:, 0] / depth)
        v = np.floor(uvw[:, 1] / depth)
    keep = front & (u >= 0) & (u < width) & (v >= 0) & (v < height)
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        return out
    flat = v[idx].astype(np.int64) * width + u[idx].astype(np.int64)
    win = _kernels.active().zbuffer(flat, depth[idx])
    sel = idx[win]
    pix = flat[win]
    out.altitude.ravel()[pix] = pts[sel, 2]
    out.depth.ravel()[pix] = depth[sel]
    out.occupied.ravel()[pix] = True
    return out


def compute_adi(amap: SparseAltitudeMap, radius: int = DEFAULT_RADIUS) -> np.ndarray:
    """Altitude-difference image: mean over occupied window neighbours of |dZ| / pixel distance."""
    if radius < 1:
        raise ValueError("radius must be >= 1")
    return _kernels.active().adi(amap.altitude, amap.occupied, int(radius))


def knn_densify(amap: SparseAltitudeMap, k: int = DEFAULT_KNN_K) -> SparseAltitudeMap:
    """Fill blank pixels with inverse-distance weighted altitude/depth of the k nearest occupied pixels."""
    n_occ = int(amap.occupied.sum())
    if n_occ < k:
        raise ValueError(f"knn_densify needs at least {k} occupied cells, map has {n_occ}")
    out = SparseAltitudeMap(amap.altitude.copy(), amap.depth.copy(), np.ones_like(amap.occupied))
    if n_occ == amap.occupied.size:
        return out
    blank, nbr, dist = _kernels.active().knn(amap.occupied, k)
    wts = 1.0 / dist
    wsum = wts.sum(axis=1)
    out.altitude.ravel()[blank] = (wts * amap.altitude.ravel()[nbr]).sum(axis=1) / wsum
    out.depth.ravel()[blank] = (wts * amap.depth.ravel()[nbr]).sum(axis=1) / wsum
    return out


def normalize_adi(adi: np.ndarray, clip: float = DEFAULT_CLIP) -> np.ndarray:
    if clip <= 0:
        raise ValueError("clip must be positive")
    return np.minimum(adi, clip) / clip


def cloud_to_adi(
    cloud: PointCloud,
    calib: Calibration,
    width: int,
    height: int,
    radius: int = DEFAULT_RADIUS,
    clip: float = DEFAULT_CLIP,
    densify: bool = False,
    knn_k: int = DEFAULT_KNN_K,
) -> np.ndarray:
    """Project, optionally densify, and return the normalized ADI as float32 (H, W)."""
    amap = project_points(cloud, calib, width, height)
    if densify and amap.occupied.sum() >= knn_k:
        amap = knn_densify(amap, knn_k)
    return normalize_adi(compute_adi(amap, radius), clip).astype(np.float32)
