"""Dataset layout, image I/O and sample preprocessing.

Directory layout (KITTI road convention, also written by the synthetic generator)::

    root/image_2/<stem>.{png,ppm}
    root/velodyne/<stem>.bin
    root/calib/<stem>.txt
    root/gt_image_2/<stem>.{png,ppm,pgm}   (KITTI style <prefix>_road_<id> also accepted)
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry

log = logging.getLogger(__name__)

DEFAULT_SIZE = (64, 64)  # (height, width)
PAPER_SIZE = (384, 1280)
ROAD_THRESHOLD = 127
IMAGE_EXTS = (".png", ".ppm", ".pgm")


class DataError(ValueError):
    pass


class ImageFormatError(DataError):
    pass


# -- PGM / PPM ----------------------------------------------------------------


def _to_u8(img) -> np.ndarray:
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        return arr
    return np.clip(np.round(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_image(path, img):
    """Write (H, W) as binary PGM or (H, W, 3) as binary PPM. Float input in [0, 1] is quantized to 8 bits."""
    arr = _to_u8(img)
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ImageFormatError(f"cannot write image of shape {arr.shape}")
    h, w = arr.shape[:2]
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def _header_tokens(data: bytes, count: int, path):
    tokens = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: malformed header")
        tokens.append(data[start:pos])
    return tokens, pos + 1  # single whitespace byte after maxval


def read_pnm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:2] not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: not a binary PGM/PPM file (magic {data[:2]!r})")
    tokens, pos = _header_tokens(data, 4, path)
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise ImageFormatError(f"{path}: malformed header") from exc
    if maxval != 255 or w <= 0 or h <= 0:
        raise ImageFormatError(f"{path}: unsupported header (w={w}, h={h}, maxval={maxval})")
    ch = 1 if tokens[0] == b"P5" else 3
    need = w * h * ch
    payload = data[pos : pos + need]
    if len(payload) != need:
        raise ImageFormatError(f"{path}: truncated payload ({len(payload)} of {need} bytes)")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape(h, w) if ch == 1 else arr.reshape(h, w, 3)


def read_image(path) -> np.ndarray:
    """uint8 image (H, W) or (H, W, 3). PNG is read through Pillow."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        try:
            from PIL import Image
        except ImportError as exc:  # pragma: no cover
            raise DataError("reading PNG files needs Pillow") from exc
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)
    return read_pnm(path)


def write_mask(path, mask):
    write_image(path, np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8))


def read_mask(path) -> np.ndarray:
    img = read_image(path)
    if img.ndim == 3:
        raise ImageFormatError(f"{path}: mask must be single-channel")
    return (img > ROAD_THRESHOLD).astype(np.uint8)


# -- resizing -----------------------------------------------------------------


def _bilinear_axis(n_in: int, n_out: int):
    x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    x = np.clip(x, 0, n_in - 1)
    i0 = np.floor(x).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, x - i0


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize over the first two axes (half-pixel centres)."""
    img = np.asarray(img, dtype=np.float32)
    if img.shape[:2] == (height, width):
        return img.copy()
    y0, y1, fy = _bilinear_axis(img.shape[0], height)
    x0, x1, fx = _bilinear_axis(img.shape[1], width)
    extra = (None,) * (img.ndim - 2)
    fy = fy[(slice(None), None) + extra].astype(np.float32)
    fx = fx[(None, slice(None)) + extra].astype(np.float32)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def resize_nearest(img: np.ndarray, height: int, width: int) -> np.ndarray:
    img = np.asarray(img)
    if img.shape[:2] == (height, width):
        return img.copy()
    ys = np.minimum((np.arange(height) * img.shape[0]) // height, img.shape[0] - 1)
    xs = np.minimum((np.arange(width) * img.shape[1]) // width, img.shape[1] - 1)
    return img[ys][:, xs]


# -- samples and manifests ----------------------------------------------------


@dataclass
class Sample:
    rgb: np.ndarray  # (3, H, W) float32 in [0, 1]
    adi: np.ndarray  # (1, H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    source: str = ""

    def __post_init__(self):
        h, w = self.mask.shape
        if self.rgb.shape[1:] != (h, w) or self.adi.shape[1:] != (h, w):
            raise DataError(f"sample {self.source!r}: misaligned extents {self.rgb.shape} {self.adi.shape} {self.mask.shape}")

    @property
    def size(self) -> tuple[int, int]:
        return self.mask.shape


@dataclass
class ManifestEntry:
    stem: str
    image: Path
    cloud: Path
    calib: Path
    label: Path


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)
    split: str = "train"
    root: Path | None = None

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def _find(dirpath: Path, stem: str, exts) -> Path | None:
    for ext in exts:
        p = dirpath / f"{stem}{ext}"
        if p.exists():
            return p
    return None


def _label_for(gt_dir: Path, stem: str) -> Path | None:
    p = _find(gt_dir, stem, IMAGE_EXTS)
    if p is None and "_" in stem:
        prefix, _, num = stem.rpartition("_")
        p = _find(gt_dir, f"{prefix}_road_{num}", IMAGE_EXTS)
    return p


def load_manifest(root, split: str = "train") -> DatasetManifest:
    root = Path(root)
    dirs = {k: root / k for k in ("image_2", "velodyne", "calib", "gt_image_2")}
    missing_dirs = [k for k, d in dirs.items() if not d.is_dir()]
    if missing_dirs:
        raise DataError(f"{root}: missing directories {missing_dirs}")
    stems = sorted({p.stem for p in dirs["image_2"].iterdir() if p.suffix.lower() in IMAGE_EXTS})
    entries = []
    for stem in stems:
        image = _find(dirs["image_2"], stem, IMAGE_EXTS)
        cloud = _find(dirs["velodyne"], stem, (".bin",))
        calib = _find(dirs["calib"], stem, (".txt",))
        label = _label_for(dirs["gt_image_2"], stem)
        if None in (image, cloud, calib, label):
            log.warning("skipping %s: incomplete file set", stem)
            continue
        entries.append(ManifestEntry(stem, image, cloud, calib, label))
    if not entries:
        raise DataError(f"{root}: no complete samples found")
    return DatasetManifest(entries=entries, split=split, root=root)


def _check_size(target_size):
    h, w = target_size
    if h % 16 or w % 16 or h <= 0 or w <= 0:
        raise DataError(f"target size {h}x{w} must be positive multiples of 16")


def label_to_mask(label: np.ndarray) -> np.ndarray:
    """Road iff the road channel (blue for KITTI colour labels, the only channel for grey masks) exceeds 127."""
    road = label[..., 2] if label.ndim == 3 else label
    return (road > ROAD_THRESHOLD).astype(np.uint8)


def load_sample(
    entry: ManifestEntry,
    target_size=DEFAULT_SIZE,
    radius: int = geometry.DEFAULT_RADIUS,
    clip: float = geometry.DEFAULT_CLIP,
    densify: bool = False,
    knn_k: int = geometry.DEFAULT_KNN_K,
) -> Sample:
    _check_size(target_size)
    h, w = target_size
    try:
        img = read_image(entry.image)
        label = read_image(entry.label)
        cloud = geometry.read_velodyne(entry.cloud)
    except OSError as exc:
        raise DataError(f"{entry.stem}: unreadable file: {exc}") from exc
    calib = geometry.read_calibration(entry.calib)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    src_h, src_w = img.shape[:2]
    rgb = resize_bilinear(img.astype(np.float32) / 255.0, h, w)
    mask = label_to_mask(resize_nearest(label, h, w))
    # project at native resolution, then rescale the intrinsics row-wise to the target grid
    scale = np.diag([w / src_w, h / src_h, 1.0])
    calib_t = geometry.Calibration(scale @ calib.proj, calib.rect, calib.lidar_to_cam)
    adi = geometry.cloud_to_adi(cloud, calib_t, w, h, radius=radius, clip=clip, densify=densify, knn_k=knn_k)
    return Sample(
        rgb=np.clip(rgb, 0.0, 1.0).transpose(2, 0, 1).astype(np.float32),
        adi=adi[None],
        mask=mask,
        source=entry.stem,
    )


def load_dataset(root, target_size=DEFAULT_SIZE, split="train", **geo) -> list[Sample]:
    return [load_sample(e, target_size, **geo) for e in load_manifest(root, split)]


def write_sample_files(root, stem: str, rgb_u8: np.ndarray, mask: np.ndarray, cloud, calib):
    """Write one sample in the dataset layout (PPM image, PGM mask, .bin cloud, calib text)."""
    root = Path(root)
    for d in ("image_2", "velodyne", "calib", "gt_image_2"):
        (root / d).mkdir(parents=True, exist_ok=True)
    write_image(root / "image_2" / f"{stem}.ppm", rgb_u8)
    write_mask(root / "gt_image_2" / f"{stem}.pgm", mask)
    geometry.write_velodyne(root / "velodyne" / f"{stem}.bin", cloud)
    geometry.write_calibration(root / "calib" / f"{stem}.txt", calib)


def stack(samples: list[Sample]):
    """Batch arrays (rgb N,3,H,W; adi N,1,H,W; mask N,H,W)."""
    return (
        np.stack([s.rgb for s in samples]),
        np.stack([s.adi for s in samples]),
        np.stack([s.mask for s in samples]),
    )
