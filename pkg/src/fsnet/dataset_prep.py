"""Turn raw face images plus landmark/segmentation annotations into training
records: face mask, landmark image, foreground mask and the cropped image.

Coordinates are ``(x, y)`` = ``(column, row)`` with pixel centres on integer
coordinates.  A pixel belongs to a polygon or disk when its centre does
(boundary included).
"""

from __future__ import annotations

import enum
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import cv2
import numpy as np
from PIL import Image
from scipy import ndimage

from .config import PrepareConfig
from .errors import (
    BadDimensions,
    DegenerateHull,
    DetectionFailed,
    FSNetError,
    SegmentationUnavailable,
)

# 68-point iBUG ordering, 0-based.
CONTOUR = tuple(range(0, 17))
RIGHT_BROW = tuple(range(17, 22))
LEFT_BROW = tuple(range(22, 27))
NOSE = tuple(range(27, 36))
RIGHT_EYE = tuple(range(36, 42))
LEFT_EYE = tuple(range(42, 48))
MOUTH = tuple(range(48, 68))
NOSE_TIP = 30
MOUTH_CORNERS = (48, 54)
FACE_HULL_POINTS = RIGHT_EYE + LEFT_EYE + NOSE + MOUTH  # 41 points

_HULL_EPS = 1e-9

MANIFEST = "manifest.json"
_SUBDIRS = {
    "image": "images",
    "face_mask": "face_masks",
    "landmark_image": "landmarks",
    "foreground_mask": "foreground",
}


class SourceTag(str, enum.Enum):
    external_detector = "external_detector"
    precomputed_file = "precomputed_file"
    synthetic = "synthetic"


@dataclass(frozen=True)
class Landmarks68:
    points: np.ndarray
    source_tag: SourceTag = SourceTag.precomputed_file

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (68, 2):
            raise ValueError(f"expected 68x2 landmark array, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("landmark coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "source_tag", SourceTag(self.source_tag))

    def transformed(self, scale_x, scale_y, offset_x, offset_y) -> "Landmarks68":
        pts = self.points * [scale_x, scale_y] + [offset_x, offset_y]
        return Landmarks68(pts, self.source_tag)


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


# ---------------------------------------------------------------- geometry


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Counter-clockwise hull vertices (monotone chain), collinear points dropped."""
    pts = np.unique(np.asarray(points, dtype=np.float64), axis=0)
    if len(pts) < 3:
        raise DegenerateHull("need at least three distinct points")
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list[np.ndarray] = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[np.ndarray] = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = np.array(lower[:-1] + upper[:-1])
    if len(hull) < 3 or abs(polygon_area(hull)) < _HULL_EPS:
        raise DegenerateHull("points are collinear")
    return hull


def polygon_area(vertices: np.ndarray) -> float:
    x, y = vertices[:, 0], vertices[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def polygon_centroid(vertices: np.ndarray) -> np.ndarray:
    x, y = vertices[:, 0], vertices[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    c = x * yn - xn * y
    area = 0.5 * c.sum()
    if abs(area) < _HULL_EPS:
        raise DegenerateHull("zero-area polygon")
    return np.array([((x + xn) * c).sum(), ((y + yn) * c).sum()]) / (6.0 * area)


def stretch_polygon(vertices, sx, sy, center=None) -> np.ndarray:
    """Scale polygon vertices about ``center`` (default: area centroid)."""
    vertices = np.asarray(vertices, dtype=np.float64)
    if center is None:
        center = polygon_centroid(vertices)
    return (vertices - center) * [sx, sy] + center


def rasterize_convex_polygon(vertices: np.ndarray, size) -> np.ndarray:
    """Boolean mask of pixels whose centre lies in the CCW convex polygon."""
    h, w = size
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    inside = np.ones((h, w), dtype=bool)
    nxt = np.roll(vertices, -1, axis=0)
    for (x0, y0), (x1, y1) in zip(vertices, nxt):
        edge_len = np.hypot(x1 - x0, y1 - y0)
        cross = (x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0)
        inside &= cross >= -_HULL_EPS * max(edge_len, 1.0)
    return inside


def disk_footprint(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return xx * xx + yy * yy <= r * r


def rasterize_disks(centers: np.ndarray, radius: float, size) -> np.ndarray:
    h, w = size
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.zeros((h, w), dtype=bool)
    r2 = float(radius) ** 2
    for cx, cy in centers:
        out |= (xs - cx) ** 2 + (ys - cy) ** 2 <= r2
    return out


def face_hull(landmarks: Landmarks68) -> np.ndarray:
    return convex_hull(landmarks.points[list(FACE_HULL_POINTS)])


def build_face_mask(
    landmarks: Landmarks68,
    size,
    stretch=(1.3, 1.4),
    dilation_fraction: float = 0.03,
) -> np.ndarray:
    """Binary face mask: hull of the 41 eye/nose/mouth points, stretched about
    its centroid, then dilated by a disk of radius ``round(fraction * W)``."""
    h, w = size
    hull = stretch_polygon(face_hull(landmarks), *stretch)
    mask = rasterize_convex_polygon(hull, (h, w))
    radius = round_half_up(dilation_fraction * w)
    if radius > 0:
        mask = ndimage.binary_dilation(mask, structure=disk_footprint(radius))
    if not mask.any():
        raise DegenerateHull("face mask is empty inside the image")
    return mask.astype(np.float32)


def landmark_centers(landmarks: Landmarks68) -> np.ndarray:
    """The 22 splatted positions: eye centres, nose tip, mouth corners, contour."""
    p = landmarks.points
    internal = np.stack(
        [
            p[list(RIGHT_EYE)].mean(axis=0),
            p[list(LEFT_EYE)].mean(axis=0),
            p[NOSE_TIP],
            p[MOUTH_CORNERS[0]],
            p[MOUTH_CORNERS[1]],
        ]
    )
    return np.concatenate([internal, p[list(CONTOUR)]], axis=0)


def build_landmark_image(
    landmarks: Landmarks68, size, radius_fraction: float = 0.03
) -> np.ndarray:
    h, w = size
    radius = round_half_up(radius_fraction * w)
    return rasterize_disks(landmark_centers(landmarks), radius, (h, w)).astype(
        np.float32
    )


# ---------------------------------------------------------- crop / resize


def _check_crop(image, cfg: PrepareConfig):
    h, w = image.shape[:2]
    if h < cfg.crop_top + cfg.crop_size or w < cfg.crop_left + cfg.crop_size:
        raise BadDimensions(
            f"image {w}x{h} is smaller than the crop window "
            f"({cfg.crop_left},{cfg.crop_top})+{cfg.crop_size}"
        )


def crop_and_resize(
    image: np.ndarray, cfg: PrepareConfig = PrepareConfig(), interpolation=cv2.INTER_LINEAR
) -> np.ndarray:
    """Square crop at (crop_left, crop_top), then bilinear resize to image_size."""
    image = np.asarray(image)
    _check_crop(image, cfg)
    t, l, s = cfg.crop_top, cfg.crop_left, cfg.crop_size
    crop = np.ascontiguousarray(image[t : t + s, l : l + s]).astype(np.float32)
    n = cfg.image_size
    if s == n:
        return crop
    return cv2.resize(crop, (n, n), interpolation=interpolation)


def crop_transform(cfg: PrepareConfig):
    """(scale, offset_x, offset_y) mapping source-frame points to output pixels,
    consistent with cv2's half-pixel-centred resize."""
    k = cfg.image_size / cfg.crop_size
    ox = (0.5 - cfg.crop_left) * k - 0.5
    oy = (0.5 - cfg.crop_top) * k - 0.5
    return k, ox, oy


def letterbox(image: np.ndarray, width: int, height: int, fill=0.0):
    """Resize to fit inside width x height keeping aspect, pad the rest.

    Returns the padded image and (scale, offset_x, offset_y) for point mapping.
    """
    h, w = image.shape[:2]
    scale = min(width / w, height / h)
    nw, nh = max(1, round_half_up(w * scale)), max(1, round_half_up(h * scale))
    resized = cv2.resize(
        np.asarray(image, dtype=np.float32), (nw, nh), interpolation=cv2.INTER_LINEAR
    )
    out = np.full((height, width) + image.shape[2:], fill, dtype=np.float32)
    x0, y0 = (width - nw) // 2, (height - nh) // 2
    out[y0 : y0 + nh, x0 : x0 + nw] = resized.reshape(out[y0 : y0 + nh, x0 : x0 + nw].shape)
    sx, sy = nw / w, nh / h
    return out, (sx, sy, x0 + 0.5 * sx - 0.5, y0 + 0.5 * sy - 0.5)


def to_output_frame(image: np.ndarray, cfg: PrepareConfig):
    """Bring an image of any accepted size into the output frame.

    Returns the float image and an (sx, sy, ox, oy) map for source points.
    """
    h, w = image.shape[:2]
    n = cfg.image_size
    if (h, w) == (n, n):
        return np.asarray(image, dtype=np.float32), (1.0, 1.0, 0.0, 0.0)
    pre = (1.0, 1.0, 0.0, 0.0)
    if (h, w) != (cfg.source_height, cfg.source_width):
        if not cfg.center_fit:
            raise BadDimensions(
                f"expected {cfg.source_width}x{cfg.source_height} or {n}x{n}, got {w}x{h}"
            )
        image, pre = letterbox(image, cfg.source_width, cfg.source_height)
    out = crop_and_resize(image, cfg)
    k, ox, oy = crop_transform(cfg)
    sx, sy, px, py = pre
    return out, (sx * k, sy * k, px * k + ox, py * k + oy)


# ------------------------------------------------------ pluggable clients


class LandmarkDetector(Protocol):
    def detect(self, image: np.ndarray) -> np.ndarray | None: ...


class Segmenter(Protocol):
    def segment(self, image: np.ndarray) -> np.ndarray | None: ...


@dataclass
class PrecomputedLandmarks:
    """Detector backed by an annotation file; ignores the pixels."""

    points: np.ndarray | None
    source_tag: SourceTag = SourceTag.precomputed_file

    def detect(self, image):
        return self.points


@dataclass
class PrecomputedMask:
    path: str | Path | None

    def segment(self, image):
        if self.path is None or not Path(self.path).exists():
            return None
        return read_mask(self.path)


def detect_landmarks(image: np.ndarray, detector_client: LandmarkDetector) -> Landmarks68:
    pts = detector_client.detect(image)
    if pts is None:
        raise DetectionFailed("no face found")
    tag = getattr(detector_client, "source_tag", SourceTag.external_detector)
    return Landmarks68(np.asarray(pts, dtype=np.float64), tag)


def foreground_mask(
    image: np.ndarray, segmenter_client: Segmenter | None, fallback: str = "fail"
) -> np.ndarray:
    """Binary person mask in the frame of ``image``; see ``fallback`` for misses."""
    mask = None if segmenter_client is None else segmenter_client.segment(image)
    if mask is None:
        if fallback == "ones":
            return np.ones(image.shape[:2], dtype=np.float32)
        raise SegmentationUnavailable("no foreground mask available")
    mask = np.asarray(mask, dtype=np.float32)
    if mask.shape != image.shape[:2]:
        raise BadDimensions(f"mask shape {mask.shape} != image shape {image.shape[:2]}")
    return (mask >= 0.5).astype(np.float32)


# ----------------------------------------------------------------- records


@dataclass
class FaceRecord:
    image: np.ndarray  # HxWx3 float32 in [0, 1]
    face_mask: np.ndarray  # HxW {0, 1}
    landmark_image: np.ndarray  # HxW {0, 1}
    foreground_mask: np.ndarray  # HxW {0, 1}
    identity_label: int
    name: str = ""

    @property
    def face_part(self) -> np.ndarray:
        return self.image * self.face_mask[..., None]

    @property
    def nonface_part(self) -> np.ndarray:
        return self.image * (1.0 - self.face_mask[..., None])


@dataclass
class Annotation:
    identity: int
    landmarks: np.ndarray | None
    foreground_path: Path | None = None
    name: str = ""

    @classmethod
    def from_file(cls, path: str | Path) -> "Annotation":
        path = Path(path)
        data = json.loads(path.read_text())
        lm = data.get("landmarks")
        fg = data.get("foreground_mask")
        return cls(
            identity=int(data["identity"]),
            landmarks=None if lm is None else np.asarray(lm, dtype=np.float64),
            foreground_path=None if fg is None else path.parent / fg,
            name=path.stem,
        )

    def to_json(self, foreground_rel: str | None = None) -> dict:
        return {
            "identity": int(self.identity),
            "landmarks": None if self.landmarks is None else self.landmarks.tolist(),
            "foreground_mask": foreground_rel,
        }


def quantize(image: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so records survive a PNG round trip bit-exactly."""
    q = np.clip(np.floor(np.asarray(image, dtype=np.float64) * 255.0 + 0.5), 0, 255)
    return (q / 255.0).astype(np.float32)


def prepare_record(
    image: np.ndarray,
    annotation: Annotation,
    config: PrepareConfig = PrepareConfig(),
    detector: LandmarkDetector | None = None,
    segmenter: Segmenter | None = None,
) -> FaceRecord:
    """Raw image (float [0,1] or uint8) -> FaceRecord in the output frame."""
    image = np.asarray(image)
    if image.dtype == np.uint8:
        image = image.astype(np.float32) / 255.0
    if image.ndim != 3 or image.shape[2] != 3:
        raise BadDimensions(f"expected HxWx3 image, got {image.shape}")
    detector = detector or PrecomputedLandmarks(annotation.landmarks)
    segmenter = segmenter or PrecomputedMask(annotation.foreground_path)

    lm_src = detect_landmarks(image, detector)
    out_image, (sx, sy, ox, oy) = to_output_frame(image, config)
    lm = lm_src.transformed(sx, sy, ox, oy)
    n = config.image_size
    face = build_face_mask(
        lm, (n, n), (config.stretch_x, config.stretch_y), config.dilation_fraction
    )
    landmark_img = build_landmark_image(lm, (n, n), config.landmark_radius_fraction)

    fg_src = foreground_mask(image, segmenter, config.fallback_foreground)
    fg, _ = to_output_frame(fg_src, config)
    fg = (fg >= 0.5).astype(np.float32)

    return FaceRecord(
        image=quantize(np.clip(out_image, 0.0, 1.0)),
        face_mask=face,
        landmark_image=landmark_img,
        foreground_mask=fg,
        identity_label=annotation.identity,
        name=annotation.name,
    )


# --------------------------------------------------------------------- I/O


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L"), dtype=np.uint8) >= 128).astype(np.float32)


def write_image(path, image: np.ndarray) -> None:
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.floor(arr.astype(np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0.5).astype(np.uint8) * 255, mode="L").save(
        path, format="PNG"
    )


def save_record(record: FaceRecord, out_dir) -> dict:
    out_dir = Path(out_dir)
    entry = {"name": record.name, "identity": int(record.identity_label)}
    for key, sub in _SUBDIRS.items():
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
        rel = f"{sub}/{record.name}.png"
        if key == "image":
            write_image(out_dir / rel, record.image)
        else:
            write_mask(out_dir / rel, getattr(record, key))
        entry[key] = rel
    return entry


def load_record(entry: dict, root) -> FaceRecord:
    root = Path(root)
    return FaceRecord(
        image=read_image(root / entry["image"]).astype(np.float32) / 255.0,
        face_mask=read_mask(root / entry["face_mask"]),
        landmark_image=read_mask(root / entry["landmark_image"]),
        foreground_mask=read_mask(root / entry["foreground_mask"]),
        identity_label=int(entry["identity"]),
        name=entry["name"],
    )


def load_dataset(root, split: str | None = None) -> list[FaceRecord]:
    root = Path(root)
    manifest = json.loads((root / MANIFEST).read_text())
    return [
        load_record(e, root)
        for e in manifest["records"]
        if split is None or e["split"] == split
    ]


def raw_items(input_dir) -> list[tuple[Path, Path]]:
    """(image, sidecar) pairs in a raw directory, sorted by name."""
    input_dir = Path(input_dir)
    items = []
    for sidecar in sorted(input_dir.glob("*.json")):
        if sidecar.name == MANIFEST:
            continue
        img = sidecar.with_suffix(".png")
        if img.exists():
            items.append((img, sidecar))
    return items


def _prepare_one(args):
    img_path, sidecar, out_dir, cfg = args
    ann = Annotation.from_file(sidecar)
    try:
        rec = prepare_record(read_image(img_path), ann, cfg)
    except FSNetError as exc:
        return None, {"name": ann.name, "reason": f"{type(exc).__name__}: {exc}"}
    return save_record(rec, out_dir), None


@dataclass
class PrepareReport:
    written: int
    skipped: list[dict] = field(default_factory=list)
    manifest_path: Path | None = None


def split_names(names: Sequence[str], test_fraction: float, seed: int) -> dict[str, str]:
    names = sorted(names)
    n_test = round_half_up(test_fraction * len(names))
    perm = np.random.default_rng(seed).permutation(len(names))
    test = {names[i] for i in perm[:n_test]}
    return {n: ("test" if n in test else "train") for n in names}


def prepare_dataset(input_dir, output_dir, config: PrepareConfig = PrepareConfig(), workers: int = 1) -> PrepareReport:
    """Prepare every annotated image in ``input_dir``; failures are skipped and counted."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(img, side, output_dir, config) for img, side in raw_items(input_dir)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_prepare_one, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = [_prepare_one(j) for j in jobs]

    entries = [e for e, _ in results if e is not None]
    skipped = [s for _, s in results if s is not None]
    splits = split_names([e["name"] for e in entries], config.test_fraction, config.split_seed)
    for e in entries:
        e["split"] = splits[e["name"]]
    manifest = {
        "version": 1,
        "image_size": config.image_size,
        "records": entries,
        "skipped": skipped,
    }
    path = output_dir / MANIFEST
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp, path)
    return PrepareReport(written=len(entries), skipped=skipped, manifest_path=path)
