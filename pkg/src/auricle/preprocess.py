"""Canonical ear-crop preprocessing: mask, align, side-normalize, resize, CLAHE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy.ndimage import map_coordinates
from sklearn.base import BaseEstimator

from .dataset import ImageRecord, load_annotation
from .validation import check_mask, check_rgb_image, check_uint8_image, to_rgb

TARGET_SIZE = 224


@dataclass(frozen=True)
class ClaheParams:
    clip_limit: float = 2.0  # multiple of the uniform bin height
    tiles_x: int = 8
    tiles_y: int = 8

    def __post_init__(self):
        if self.clip_limit < 1.0:
            raise ValueError("clip_limit must be >= 1")
        if self.tiles_x < 1 or self.tiles_y < 1:
            raise ValueError("tile counts must be >= 1")


@dataclass(frozen=True)
class OrientationEstimate:
    angle_deg: float  # major principal axis vs image-vertical, positive clockwise
    degenerate: bool


@dataclass(frozen=True)
class EarImage:
    pixels: np.ndarray  # 224 x 224 x 3 uint8
    source: str  # record key
    applied_rotation_deg: float
    flipped: bool

    def __post_init__(self):
        px = check_rgb_image(self.pixels, "EarImage.pixels")
        if px.shape != (TARGET_SIZE, TARGET_SIZE, 3):
            raise ValueError(f"EarImage must be {TARGET_SIZE}x{TARGET_SIZE}x3, got {px.shape}")


# --- color space (ITU-R BT.601, full-range integer approximation) ------------


def rgb_to_ycbcr(img: np.ndarray):
    """Split an RGB image into integer luma and chroma planes."""
    img = check_rgb_image(img)
    r = img[..., 0].astype(np.int32)
    g = img[..., 1].astype(np.int32)
    b = img[..., 2].astype(np.int32)
    y = (77 * r + 150 * g + 29 * b + 128) >> 8
    cb = 128 + ((-43 * r - 85 * g + 128 * b + 128) >> 8)
    cr = 128 + ((128 * r - 107 * g - 21 * b + 128) >> 8)
    clip = lambda p: np.clip(p, 0, 255).astype(np.uint8)
    return clip(y), clip(cb), clip(cr)


def ycbcr_to_rgb(y: np.ndarray, cb: np.ndarray, cr: np.ndarray) -> np.ndarray:
    y = y.astype(np.int32)
    cb = cb.astype(np.int32) - 128
    cr = cr.astype(np.int32) - 128
    r = y + ((359 * cr + 128) >> 8)
    g = y - ((88 * cb + 183 * cr + 128) >> 8)
    b = y + ((454 * cb + 128) >> 8)
    out = np.stack([r, g, b], axis=-1)
    return np.clip(out, 0, 255).astype(np.uint8)


def luma(img: np.ndarray) -> np.ndarray:
    """Integer BT.601 luma plane of an RGB image."""
    return rgb_to_ycbcr(img)[0]


# --- geometry ----------------------------------------------------------------


def apply_mask(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero out every pixel outside the mask."""
    image = check_uint8_image(image)
    mask = check_mask(mask)
    if image.shape[:2] != mask.shape:
        raise ValueError(
            f"dimension mismatch: image {image.shape[:2]} vs mask {mask.shape}"
        )
    if not mask.any():
        raise ValueError("empty mask")
    if image.ndim == 3:
        return np.where(mask[:, :, None], image, 0)
    return np.where(mask, image, 0)


def estimate_orientation(mask: np.ndarray) -> OrientationEstimate:
    """Principal-axis orientation of the true pixels.

    The angle is measured from image-vertical, positive clockwise, in
    (-90, 90]; masks with eigenvalue ratio below 1.05 are flagged degenerate
    and report 0.
    """
    mask = check_mask(mask)
    rows, cols = np.nonzero(mask)
    if rows.size < 2:
        raise ValueError("orientation needs at least 2 true pixels")
    x = cols.astype(np.float64)
    y = rows.astype(np.float64)
    xc = x - x.mean()
    yc = y - y.mean()
    n = x.size
    cov = np.array([[xc @ xc, xc @ yc], [xc @ yc, yc @ yc]]) / n
    evals, evecs = np.linalg.eigh(cov)
    lmin, lmax = float(evals[0]), float(evals[1])
    if lmax <= 0.0:
        return OrientationEstimate(0.0, True)
    if lmin > 0.0 and lmax / lmin < 1.05:
        return OrientationEstimate(0.0, True)
    vx, vy = evecs[:, 1]
    angle = -np.degrees(np.arctan2(vx, vy))
    if angle <= -90.0:
        angle += 180.0
    elif angle > 90.0:
        angle -= 180.0
    return OrientationEstimate(float(angle), False)


def _foreground(image: np.ndarray) -> np.ndarray:
    if image.ndim == 3:
        return np.any(image > 0, axis=2)
    return image > 0


def _rotate_about(image: np.ndarray, angle_deg: float, cx: float, cy: float) -> np.ndarray:
    """Rotate image content by -angle_deg (visually) about (cx, cy), bilinear,
    black fill, on a canvas padded enough to keep all content."""
    h, w = image.shape[:2]
    pad = int(np.ceil(np.hypot(h, w)))
    padded = np.zeros((h + 2 * pad, w + 2 * pad) + image.shape[2:], dtype=image.dtype)
    padded[pad:pad + h, pad:pad + w] = image
    cx += pad
    cy += pad
    ph, pw = padded.shape[:2]
    yy, xx = np.mgrid[0:ph, 0:pw].astype(np.float64)
    theta = np.deg2rad(angle_deg)
    c, s = np.cos(theta), np.sin(theta)
    dx, dy = xx - cx, yy - cy
    src_x = cx + c * dx - s * dy
    src_y = cy + s * dx + c * dy
    if padded.ndim == 2:
        out = map_coordinates(padded.astype(np.float64), [src_y, src_x], order=1, cval=0.0)
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    chans = [
        map_coordinates(padded[:, :, k].astype(np.float64), [src_y, src_x], order=1, cval=0.0)
        for k in range(padded.shape[2])
    ]
    return np.clip(np.rint(np.stack(chans, axis=2)), 0, 255).astype(np.uint8)


def align_and_crop(masked: np.ndarray, est: OrientationEstimate) -> np.ndarray:
    """Rotate the foreground upright about its centroid, then tight-crop."""
    masked = check_uint8_image(masked)
    fg = _foreground(masked)
    if not fg.any():
        raise ValueError("image is entirely black")
    if not est.degenerate and est.angle_deg != 0.0:
        rows, cols = np.nonzero(fg)
        rotated = _rotate_about(masked, est.angle_deg, cols.mean(), rows.mean())
    else:
        rotated = masked
    fg = _foreground(rotated)
    rows, cols = np.nonzero(fg)
    return rotated[rows.min():rows.max() + 1, cols.min():cols.max() + 1].copy()


def normalize_side(image: np.ndarray, side: str) -> np.ndarray:
    """Mirror right ears horizontally so all crops share the left-ear frame."""
    if side == "R":
        return np.ascontiguousarray(image[:, ::-1])
    if side == "L":
        return image.copy()
    raise ValueError(f"side must be 'L' or 'R': {side!r}")


def resize_bilinear(image: np.ndarray, target: int = TARGET_SIZE) -> np.ndarray:
    """Direct-stretch bilinear resize with corner-aligned sampling."""
    image = check_uint8_image(image)
    h, w = image.shape[:2]
    if h < 1 or w < 1:
        raise ValueError("input image is empty")
    src_r = np.arange(target) * ((h - 1) / (target - 1)) if h > 1 else np.zeros(target)
    src_c = np.arange(target) * ((w - 1) / (target - 1)) if w > 1 else np.zeros(target)
    r0 = np.floor(src_r).astype(np.intp)
    c0 = np.floor(src_c).astype(np.intp)
    r0 = np.minimum(r0, h - 1)
    c0 = np.minimum(c0, w - 1)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (src_r - r0)[:, None]
    fc = (src_c - c0)[None, :]
    img = image.astype(np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    out = np.empty((target, target, img.shape[2]), dtype=np.float64)
    rr0, rr1 = r0[:, None], r1[:, None]
    cc0, cc1 = c0[None, :], c1[None, :]
    for k in range(img.shape[2]):
        p00 = img[rr0, cc0, k]
        p01 = img[rr0, cc1, k]
        p10 = img[rr1, cc0, k]
        p11 = img[rr1, cc1, k]
        # difference form is exact for constant neighbourhoods
        out[:, :, k] = p00 + fc * (p01 - p00) + fr * (p10 - p00) + fr * fc * (p00 + p11 - p01 - p10)
    out = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    if image.ndim == 2:
        return out[:, :, 0]
    return out


# --- CLAHE --------------------------------------------------------------------


def _tile_edges(n: int, tiles: int) -> list[int]:
    return [i * n // tiles for i in range(tiles + 1)]


def _tile_mapping(tile: np.ndarray, clip_limit: float) -> np.ndarray:
    """256-entry intensity mapping for one tile (clip, redistribute, equalize)."""
    n_tile = tile.size
    hist = np.bincount(tile.ravel(), minlength=256).astype(np.float64)
    occupied = np.flatnonzero(hist)
    # cdf_min = N at the first occupied bin <=> constant tile: identity rule
    if hist[occupied[0]] == n_tile:
        return np.arange(256, dtype=np.float64)
    limit = clip_limit * n_tile / 256.0
    excess = float(np.sum(np.maximum(hist - limit, 0.0)))
    clipped = np.minimum(hist, limit) + excess / 256.0
    cdf = np.cumsum(clipped)
    cdf_min = float(cdf[np.flatnonzero(clipped)[0]])
    denom = n_tile - cdf_min
    if denom <= 0.0:
        return np.arange(256, dtype=np.float64)
    mapping = np.floor((cdf - cdf_min) / denom * 255.0 + 0.5)
    return np.clip(mapping, 0.0, 255.0)


def clahe_luma(plane: np.ndarray, params: ClaheParams) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization of one 8-bit plane.

    Tiles get individually clipped/redistributed equalization mappings; each
    pixel is remapped by bilinear interpolation of the four surrounding tile
    mappings (clamped at the borders).
    """
    plane = np.asarray(plane)
    if plane.dtype != np.uint8 or plane.ndim != 2:
        raise ValueError("clahe_luma expects an 8-bit 2-D plane")
    h, w = plane.shape
    ty, tx = params.tiles_y, params.tiles_x
    row_edges = _tile_edges(h, ty)
    col_edges = _tile_edges(w, tx)
    heights = np.diff(row_edges)
    widths = np.diff(col_edges)
    if heights.min() < 2 or widths.min() < 2:
        raise ValueError(f"tile smaller than 2x2 pixels for {h}x{w} with {ty}x{tx} tiles")

    mappings = np.empty((ty, tx, 256), dtype=np.float64)
    for i in range(ty):
        for j in range(tx):
            tile = plane[row_edges[i]:row_edges[i + 1], col_edges[j]:col_edges[j + 1]]
            mappings[i, j] = _tile_mapping(tile, params.clip_limit)

    centers_y = (np.asarray(row_edges[:-1]) + np.asarray(row_edges[1:])) / 2.0
    centers_x = (np.asarray(col_edges[:-1]) + np.asarray(col_edges[1:])) / 2.0

    pos_y = np.arange(h, dtype=np.float64) + 0.5
    pos_x = np.arange(w, dtype=np.float64) + 0.5
    i1 = np.clip(np.searchsorted(centers_y, pos_y), 0, ty - 1)
    i0 = np.clip(i1 - 1, 0, ty - 1)
    j1 = np.clip(np.searchsorted(centers_x, pos_x), 0, tx - 1)
    j0 = np.clip(j1 - 1, 0, tx - 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        fy = np.where(i1 > i0, (pos_y - centers_y[i0]) / (centers_y[i1] - centers_y[i0]), 0.0)
        fx = np.where(j1 > j0, (pos_x - centers_x[j0]) / (centers_x[j1] - centers_x[j0]), 0.0)
    fy = np.clip(fy, 0.0, 1.0)[:, None]
    fx = np.clip(fx, 0.0, 1.0)[None, :]

    v = plane.astype(np.intp)
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    m00 = mappings[i0[rows], j0[cols], v]
    m01 = mappings[i0[rows], j1[cols], v]
    m10 = mappings[i1[rows], j0[cols], v]
    m11 = mappings[i1[rows], j1[cols], v]
    out = m00 + fx * (m01 - m00) + fy * (m10 - m00) + fy * fx * (m00 + m11 - m01 - m10)
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def clahe(image: np.ndarray, params: ClaheParams) -> np.ndarray:
    """CLAHE on the luma plane of an RGB image; chroma passes through."""
    image = check_rgb_image(image)
    y, cb, cr = rgb_to_ycbcr(image)
    y2 = clahe_luma(y, params)
    if np.array_equal(y2, y):
        # nothing changed in luma: return the input untouched rather than
        # taking a lossy trip through the integer chroma reconstruction
        return image.copy()
    return ycbcr_to_rgb(y2, cb, cr)


# --- full chain ---------------------------------------------------------------


def preprocess_image(image: np.ndarray, mask: np.ndarray, side: str,
                     params: ClaheParams) -> tuple[np.ndarray, OrientationEstimate]:
    """Run mask -> orient -> align/crop -> side -> resize -> CLAHE on arrays."""
    image = to_rgb(image)
    masked = apply_mask(image, mask)
    est = estimate_orientation(mask)
    aligned = align_and_crop(masked, est)
    sided = normalize_side(aligned, side)
    resized = resize_bilinear(sided, TARGET_SIZE)
    enhanced = clahe(resized, params)
    return enhanced, est


def preprocess_record(record: ImageRecord, params: ClaheParams, root=".") -> EarImage:
    """Load a record's files and produce its canonical EarImage."""
    from pathlib import Path

    root = Path(root)
    img = np.asarray(Image.open(root / record.image_path))
    if img.ndim == 3 and img.shape[2] == 4:
        img = img[:, :, :3]
    img = to_rgb(img.astype(np.uint8))
    h, w = img.shape[:2]
    mask = load_annotation(root / record.annotation_path, width=w, height=h)
    pixels, est = preprocess_image(img, mask, record.side, params)
    return EarImage(
        pixels=pixels,
        source=record.key,
        applied_rotation_deg=0.0 if est.degenerate else -est.angle_deg,
        flipped=record.side == "R",
    )


class EarPreprocessor(BaseEstimator):
    """Stateless sklearn-style wrapper over the preprocessing chain."""

    def __init__(self, root=".", clip_limit=2.0, tiles_x=8, tiles_y=8):
        self.root = root
        self.clip_limit = clip_limit
        self.tiles_x = tiles_x
        self.tiles_y = tiles_y

    def fit(self, X=None, y=None):
        return self

    def transform(self, records) -> list[EarImage]:
        params = ClaheParams(self.clip_limit, self.tiles_x, self.tiles_y)
        return [preprocess_record(r, params, self.root) for r in records]
