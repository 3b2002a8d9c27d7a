"""Dataset manifests, ear-region annotations, and the synthetic longitudinal generator."""

from __future__ import annotations

import csv
import datetime as dt
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

MANIFEST_COLUMNS = (
    "subject_id",
    "session",
    "capture_date",
    "age_years",
    "sex",
    "side",
    "image_path",
    "annotation_path",
)

SEXES = ("F", "M", "U")
SIDES = ("L", "R")


@dataclass(frozen=True)
class ImageRecord:
    subject_id: str
    session: int
    capture_date: dt.date
    age_years: float  # NaN when unknown
    sex: str
    side: str
    image_path: str  # relative to the manifest directory
    annotation_path: str

    def __post_init__(self):
        if not self.subject_id:
            raise ValueError("subject_id is empty")
        if self.session < 1:
            raise ValueError(f"session out of range: {self.session}")
        if np.isfinite(self.age_years) and self.age_years < 0:
            raise ValueError(f"age_years must be nonnegative: {self.age_years}")
        if self.sex not in SEXES:
            raise ValueError(f"sex must be one of {SEXES}: {self.sex!r}")
        if self.side not in SIDES:
            raise ValueError(f"side must be one of {SIDES}: {self.side!r}")
        if not self.image_path or not self.annotation_path:
            raise ValueError("image_path and annotation_path must be nonempty")

    @property
    def key(self) -> str:
        """Record key used in embedding stores and score files."""
        return f"{self.subject_id}/{self.session}/{Path(self.image_path).stem}"

    def __eq__(self, other):
        if not isinstance(other, ImageRecord):
            return NotImplemented
        ages_equal = (
            self.age_years == other.age_years
            or (np.isnan(self.age_years) and np.isnan(other.age_years))
        )
        return ages_equal and all(
            getattr(self, f) == getattr(other, f)
            for f in ("subject_id", "session", "capture_date", "sex", "side",
                      "image_path", "annotation_path")
        )

    def __hash__(self):
        return hash((self.subject_id, self.session, self.image_path))


@dataclass
class Manifest:
    records: list[ImageRecord]
    session_spacing_months: int = 6
    root: Path = field(default_factory=Path, compare=False)

    def __post_init__(self):
        if self.session_spacing_months < 1:
            raise ValueError("session_spacing_months must be positive")

    @property
    def max_session(self) -> int:
        return max((r.session for r in self.records), default=0)

    @property
    def sessions(self) -> list[int]:
        return sorted({r.session for r in self.records})

    def by_session(self, session: int) -> list[ImageRecord]:
        return [r for r in self.records if r.session == session]

    def resolve_image(self, record: ImageRecord) -> Path:
        return self.root / record.image_path

    def resolve_annotation(self, record: ImageRecord) -> Path:
        return self.root / record.annotation_path

    def validate_files(self):
        """Check that every record's image and annotation exist on disk."""
        missing = []
        for r in self.records:
            for p in (self.resolve_image(r), self.resolve_annotation(r)):
                if not p.is_file():
                    missing.append(str(p))
        if missing:
            raise FileNotFoundError(
                f"{len(missing)} referenced file(s) missing, first: {missing[0]}"
            )


def parse_manifest(path, session_spacing_months: int = 6) -> Manifest:
    """Read a manifest CSV (see README for the schema) into a Manifest."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in MANIFEST_COLUMNS if c not in header]
        if missing:
            raise ValueError(f"manifest missing required column(s): {', '.join(missing)}")
        records = []
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            try:
                session = int(row["session"])
                date = dt.date.fromisoformat(row["capture_date"])
                age_text = (row["age_years"] or "").strip()
                age = float(age_text) if age_text else float("nan")
                record = ImageRecord(
                    subject_id=row["subject_id"],
                    session=session,
                    capture_date=date,
                    age_years=age,
                    sex=row["sex"],
                    side=row["side"],
                    image_path=row["image_path"],
                    annotation_path=row["annotation_path"],
                )
            except ValueError as exc:
                raise ValueError(f"{path.name} line {lineno}: {exc}") from exc
            dup_key = (record.subject_id, record.session, record.image_path)
            if dup_key in seen:
                raise ValueError(
                    f"{path.name} line {lineno}: duplicate (subject_id, session, image_path) {dup_key}"
                )
            seen.add(dup_key)
            records.append(record)
    if not records:
        warnings.warn(f"manifest {path} has a header but no records", stacklevel=2)
    return Manifest(records, session_spacing_months, root=path.parent)


def write_manifest(manifest: Manifest, path):
    """Write a Manifest back to CSV in the external schema."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in manifest.records:
            age = "" if np.isnan(r.age_years) else format(r.age_years, "g")
            writer.writerow([
                r.subject_id, r.session, r.capture_date.isoformat(), age,
                r.sex, r.side, r.image_path, r.annotation_path,
            ])


# --- polygon annotations ----------------------------------------------------


def load_polygon(path) -> np.ndarray:
    """Load a polygon JSON annotation; returns an (n, 2) float array of (x, y)."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    points = np.asarray(data["points"], dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2 or points.shape[0] < 3:
        raise ValueError(f"{path}: polygon needs >= 3 (x, y) points")
    return points


def polygon_area(points: np.ndarray) -> float:
    """Signed shoelace area."""
    x, y = points[:, 0], points[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _segments_cross(p1, p2, q1, q2) -> bool:
    """Proper intersection test for open segments (shared endpoints excluded)."""

    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1 = orient(q1, q2, p1)
    d2 = orient(q1, q2, p2)
    d3 = orient(p1, p2, q1)
    d4 = orient(p1, p2, q2)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and d1 != 0 and d2 != 0 and d3 != 0 and d4 != 0


def is_simple_polygon(points: np.ndarray) -> bool:
    """True when no two non-adjacent edges properly intersect."""
    n = len(points)
    edges = [(points[i], points[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue  # adjacent edges share a vertex
            if _segments_cross(*edges[i], *edges[j]):
                return False
    return True


def rasterize_polygon(points: np.ndarray, width: int, height: int) -> np.ndarray:
    """Rasterize a simple polygon to a boolean mask.

    A pixel is set iff its center (col + 0.5, row + 0.5) lies inside the
    polygon under the even-odd rule; boundary pixels are resolved by the
    center-point test itself.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2:
        raise ValueError("polygon points must be an (n, 2) array")
    if len(points) < 3:
        raise ValueError("polygon needs at least 3 points")
    if width < 1 or height < 1:
        raise ValueError("mask dimensions must be positive")
    if abs(polygon_area(points)) == 0.0:
        raise ValueError("zero-area polygon (collinear points)")
    if not is_simple_polygon(points):
        raise ValueError("polygon is self-intersecting")
    if (points[:, 0].min() < 0 or points[:, 1].min() < 0
            or points[:, 0].max() > width or points[:, 1].max() > height):
        raise ValueError("polygon vertex outside image bounds")

    px = np.arange(width, dtype=np.float64) + 0.5
    py = np.arange(height, dtype=np.float64) + 0.5
    inside = np.zeros((height, width), dtype=bool)
    n = len(points)
    for i in range(n):
        x1, y1 = points[i]
        x2, y2 = points[(i - 1) % n]
        straddles = (y1 > py) != (y2 > py)  # (height,)
        if not straddles.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = (x2 - x1) * (py - y1) / (y2 - y1) + x1
        crossing = straddles[:, None] & (px[None, :] < xint[:, None])
        inside ^= crossing
    if not inside.any():
        raise ValueError("empty mask: polygon covers no pixel center")
    return inside


def load_annotation(path, width: int | None = None, height: int | None = None) -> np.ndarray:
    """Load an ear annotation as a boolean mask.

    Polygon JSON is rasterized (image dimensions required); grayscale mask
    images are thresholded at nonzero.
    """
    path = Path(path)
    if path.suffix.lower() == ".json":
        if width is None or height is None:
            raise ValueError("image dimensions required to rasterize a polygon annotation")
        return rasterize_polygon(load_polygon(path), width, height)
    mask = np.asarray(Image.open(path).convert("L"))
    if width is not None and mask.shape != (height, width):
        raise ValueError(
            f"mask dimensions {mask.shape[::-1]} do not match image ({width}, {height})"
        )
    mask = mask > 0
    if not mask.any():
        raise ValueError(f"{path}: empty mask")
    return mask


# --- synthetic longitudinal data --------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int
    n_collections: int = 1
    samples_per_subject_per_collection: int = 2
    drift_per_collection: float = 0.0
    image_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be positive")
        if self.n_collections < 1:
            raise ValueError("n_collections must be >= 1")
        if self.samples_per_subject_per_collection < 1:
            raise ValueError("samples_per_subject_per_collection must be positive")
        if not 0.0 <= self.drift_per_collection <= 1.0:
            raise ValueError("drift_per_collection must be in [0, 1]")
        if self.image_size < 32:
            raise ValueError("image_size must be >= 32")
        if self.seed < 0:
            raise ValueError("seed must be an unsigned integer")


_BASE_DATE = dt.date(2024, 1, 15)


def _session_date(session: int, spacing_months: int) -> dt.date:
    months = (_BASE_DATE.month - 1) + spacing_months * (session - 1)
    return dt.date(_BASE_DATE.year + months // 12, months % 12 + 1, _BASE_DATE.day)


def _ellipse_polygon(cx, cy, a, b, alpha_rad, n_vertices=24):
    t = np.linspace(0.0, 2.0 * np.pi, n_vertices, endpoint=False)
    ex, ey = a * np.cos(t), b * np.sin(t)
    c, s = np.cos(alpha_rad), np.sin(alpha_rad)
    # visually-clockwise rotation in image coords (x right, y down)
    x = cx + c * ex - s * ey
    y = cy + s * ex + c * ey
    return np.stack([x, y], axis=1)


def _make_ridge_field(rng, n_waves: int = 16):
    """Subject-specific stationary texture: random plane waves in physical
    ear coordinates. Growing the ear samples a wider field patch, so texture
    decorrelates smoothly (and monotonically) with scale drift."""
    freqs = 2.0 * np.pi / rng.uniform(12.0, 30.0, n_waves)
    angles = rng.uniform(0.0, 2.0 * np.pi, n_waves)
    phases = rng.uniform(0.0, 2.0 * np.pi, n_waves)
    amps = rng.uniform(0.5, 1.0, n_waves)
    amps *= 38.0 / np.sqrt(np.sum(amps ** 2) / 2.0)
    return freqs, angles, phases, amps


def _eval_ridge_field(field, ex, ey):
    freqs, angles, phases, amps = field
    out = np.zeros_like(ex)
    for f, ang, ph, amp in zip(freqs, angles, phases, amps):
        out += amp * np.cos(f * (np.cos(ang) * ex + np.sin(ang) * ey) + ph)
    return out


def _render_phantom(size, cx, cy, a, b, alpha_rad, field,
                    lobes, lobe_phase, rim_pos, rim_width, radial_slope, rng):
    """Render one ear phantom: filled ellipse carrying the subject's ridge
    field, angular lobes and a bright helix rim, on a dim noisy background."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    c, s = np.cos(alpha_rad), np.sin(alpha_rad)
    u = (c * dx + s * dy) / a
    v = (-s * dx + c * dy) / b
    rho = np.sqrt(u * u + v * v)
    theta = np.arctan2(v, u)

    img = 12.0 + 8.0 * (xx / size) + rng.normal(0.0, 1.5, (size, size))
    inside = rho <= 1.0
    ridges = _eval_ridge_field(field, u * a, v * b)  # physical ear-local coords
    lobe_mod = 0.6 + 0.4 * np.sin(lobes * theta + lobe_phase)
    rim = np.exp(-(((rho - rim_pos) / rim_width) ** 2))
    tone = 95.0 + ridges * lobe_mod + 52.0 * rim + radial_slope * rho
    tone = tone + rng.normal(0.0, 1.5, (size, size))
    img = np.where(inside, tone, img)
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def generate_synthetic(cfg: SynthConfig, out_dir) -> Manifest:
    """Generate a seeded synthetic longitudinal ear dataset.

    Writes grayscale PNGs, polygon JSON annotations and manifest.csv under
    out_dir; output is a pure function of cfg (bit-identical on reruns).
    Shape parameters grow by (1 + drift_per_collection * (session - 1)) while
    the ridge wavelength stays fixed, so appearance drifts across sessions.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "annotations").mkdir(parents=True, exist_ok=True)

    size = cfg.image_size
    max_scale = 1.0 + cfg.drift_per_collection * (cfg.n_collections - 1)
    records = []
    subject_seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_subjects)
    for si in range(cfg.n_subjects):
        rng = np.random.default_rng(subject_seeds[si])
        subject_id = f"S{si + 1:03d}"
        base_b = rng.uniform(0.20, 0.26) * size
        base_b = min(base_b, 0.44 * size / max_scale)
        ratio = rng.uniform(1.7, 2.4)
        base_a = base_b / ratio
        alpha = np.deg2rad(rng.uniform(-25.0, 25.0))
        field = _make_ridge_field(rng)
        lobes = int(rng.integers(2, 8))
        lobe_phase = rng.uniform(0.0, 2.0 * np.pi)
        rim_pos = rng.uniform(0.80, 0.90)
        rim_width = rng.uniform(0.06, 0.10)
        radial_slope = rng.uniform(-25.0, 25.0)
        base_age = float(np.round(rng.uniform(4.0, 14.0), 1))
        side = "L" if rng.random() < 0.5 else "R"
        sex = "F" if si % 2 == 0 else "M"

        for session in range(1, cfg.n_collections + 1):
            scale = 1.0 + cfg.drift_per_collection * (session - 1)
            a, b = base_a * scale, base_b * scale
            for sample in range(cfg.samples_per_subject_per_collection):
                cx = size / 2.0 + rng.uniform(-1.5, 1.5)
                cy = size / 2.0 + rng.uniform(-1.5, 1.5)
                jitter = np.deg2rad(rng.uniform(-1.0, 1.0))
                img = _render_phantom(
                    size, cx, cy, a, b, alpha + jitter, field,
                    lobes, lobe_phase, rim_pos, rim_width, radial_slope, rng,
                )
                stem = f"{subject_id}_c{session}_i{sample:02d}"
                image_rel = f"images/{stem}.png"
                ann_rel = f"annotations/{stem}.json"
                Image.fromarray(img, mode="L").save(out_dir / image_rel)
                polygon = _ellipse_polygon(cx, cy, a, b, alpha + jitter)
                polygon = np.clip(polygon, 0.0, size - 1e-6)
                with open(out_dir / ann_rel, "w", encoding="utf-8") as fh:
                    json.dump(
                        {"label": "ear",
                         "points": [[round(float(x), 3), round(float(y), 3)] for x, y in polygon]},
                        fh,
                    )
                    fh.write("\n")
                records.append(ImageRecord(
                    subject_id=subject_id,
                    session=session,
                    capture_date=_session_date(session, 6),
                    age_years=base_age + 0.5 * (session - 1),
                    sex=sex,
                    side=side,
                    image_path=image_rel,
                    annotation_path=ann_rel,
                ))

    manifest = Manifest(records, session_spacing_months=6, root=out_dir)
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest
