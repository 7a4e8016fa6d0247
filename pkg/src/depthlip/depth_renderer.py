"""Weak-perspective depth rasterization of face meshes plus training-time
mouth-region masking and augmentation.

The camera maps object coordinates to pixels as ``u = scale*x + tx``,
``v = scale*y + ty`` (v is the image row) and stores ``z + depth_offset`` as
the per-pixel depth.  A pixel is covered by a triangle iff its center
``(ix + 0.5, iy + 0.5)`` lies inside the projected triangle, with the
top-left rule deciding centers that fall exactly on an edge.  Overlaps
resolve to the minimum (nearest) interpolated depth, which makes the result
independent of triangle order and of how pixel rows are partitioned across
threads.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import FormatError
from .morphable_model import BasisSet, ExpressionTrack, FaceMesh, IdentityCoeffs, swap_expression

NO_HIT = np.inf
# largest value written to disk; anything at or above reads back as no-hit
SENTINEL_ON_DISK = np.float32(3.4e38)

FULL_MOUTH_POINTS = 80


@dataclass
class Camera:
    """Weak-perspective camera: uniform scale, 2-D translation, depth offset."""

    scale: float
    tx: float = 0.0
    ty: float = 0.0
    depth_offset: float = 0.0

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError(f"camera scale must be positive, got {self.scale}")

    def project(self, vertices):
        """Project (N, 3) object-space vertices to pixel (u, v) and depth."""
        v = np.asarray(vertices, dtype=np.float64)
        u = self.scale * v[:, 0] + self.tx
        vv = self.scale * v[:, 1] + self.ty
        d = v[:, 2] + self.depth_offset
        return u, vv, d


@dataclass
class DepthMap:
    """Per-pixel nearest-surface depth; uncovered pixels hold +inf (or 0 after masking)."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise ValueError(f"depth map must be a 2-D grid, got shape {self.values.shape}")

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


@dataclass
class MouthPolygon:
    """Closed loop of (x, y) pixel coordinates delineating the mouth area."""

    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if self.points.shape[0] < 3:
            raise ValueError(f"polygon needs at least 3 points, got {self.points.shape[0]}")
        if not np.isfinite(self.points).all():
            raise ValueError("polygon contains non-finite coordinates")


def _is_tie_edge(du, dv):
    # Tie rule for pixel centers exactly on an edge, stated for triangles
    # normalized so edge functions are >= 0 inside (u right, v down): the
    # horizontal edge traversed rightward is the top edge, an edge moving
    # upward bounds the triangle on its left.
    return (dv == 0.0 and du > 0.0) or dv < 0.0


def _rasterize_rows(u, v, d, tris, width, row_start, row_stop):
    """Rasterize all triangles into rows [row_start, row_stop); returns the band."""
    band = np.full((row_stop - row_start, width), NO_HIT, dtype=np.float64)
    for i0, i1, i2 in tris:
        x0, y0, z0 = u[i0], v[i0], d[i0]
        x1, y1, z1 = u[i1], v[i1], d[i1]
        x2, y2, z2 = u[i2], v[i2], d[i2]
        area2 = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if area2 == 0.0:
            continue
        if area2 < 0.0:
            x1, y1, z1, x2, y2, z2 = x2, y2, z2, x1, y1, z1
            area2 = -area2
        # pixel-center bounding box clipped to this row band
        ix_lo = max(int(np.ceil(min(x0, x1, x2) - 0.5)), 0)
        ix_hi = min(int(np.floor(max(x0, x1, x2) - 0.5)), width - 1)
        iy_lo = max(int(np.ceil(min(y0, y1, y2) - 0.5)), row_start)
        iy_hi = min(int(np.floor(max(y0, y1, y2) - 0.5)), row_stop - 1)
        if ix_lo > ix_hi or iy_lo > iy_hi:
            continue
        px = np.arange(ix_lo, ix_hi + 1, dtype=np.float64) + 0.5
        py = (np.arange(iy_lo, iy_hi + 1, dtype=np.float64) + 0.5)[:, None]
        e01 = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
        e12 = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
        e20 = (x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)
        cover = np.ones(e01.shape, dtype=bool)
        for e, du, dv in ((e01, x1 - x0, y1 - y0),
                          (e12, x2 - x1, y2 - y1),
                          (e20, x0 - x2, y0 - y2)):
            if _is_tie_edge(du, dv):
                cover &= e >= 0.0
            else:
                cover &= e > 0.0
        if not cover.any():
            continue
        depth = (e12 * z0 + e20 * z1 + e01 * z2) / area2
        sub = band[iy_lo - row_start:iy_hi + 1 - row_start, ix_lo:ix_hi + 1]
        np.minimum(sub, np.where(cover, depth, NO_HIT), out=sub)
    return band


def rasterize_depth(mesh: FaceMesh, camera: Camera, width, height, threads=1) -> DepthMap:
    """Z-buffer the mesh through the camera into a width x height depth map.

    Covered pixels hold the minimum barycentrically interpolated depth over
    all covering triangles; uncovered pixels hold the no-hit sentinel.
    """
    if width < 1 or height < 1:
        raise ValueError(f"image dimensions must be positive, got {width}x{height}")
    u, v, d = camera.project(mesh.vertices)
    tris = np.asarray(mesh.triangles, dtype=np.int64).reshape(-1, 3)
    if threads <= 1 or height == 1:
        return DepthMap(_rasterize_rows(u, v, d, tris, width, 0, height))
    n_bands = min(threads, height)
    bounds = np.linspace(0, height, n_bands + 1, dtype=int)
    out = np.empty((height, width), dtype=np.float64)
    with ThreadPoolExecutor(max_workers=n_bands) as pool:
        futures = [pool.submit(_rasterize_rows, u, v, d, tris, width, bounds[k], bounds[k + 1])
                   for k in range(n_bands)]
        for k, fut in enumerate(futures):
            out[bounds[k]:bounds[k + 1]] = fut.result()
    return DepthMap(out)


def polygon_cover_mask(polygon: MouthPolygon, width, height):
    """Boolean (height, width) grid: pixel centers inside the polygon (even-odd rule)."""
    px = np.arange(width, dtype=np.float64) + 0.5
    py = np.arange(height, dtype=np.float64) + 0.5
    inside = np.zeros((height, width), dtype=bool)
    pts = polygon.points
    n = pts.shape[0]
    for i in range(n):
        x0, y0 = pts[i]
        x1, y1 = pts[(i + 1) % n]
        if y0 == y1:
            continue
        crossing_rows = (y0 > py) != (y1 > py)
        if not crossing_rows.any():
            continue
        yr = py[crossing_rows]
        x_at = x0 + (yr - y0) * (x1 - x0) / (y1 - y0)
        inside[crossing_rows] ^= px[None, :] < x_at[:, None]
    return inside


def mask_mouth_region(depth: DepthMap, mouth: MouthPolygon) -> DepthMap:
    """Zero everything outside the mouth polygon; sentinels inside become 0."""
    inside = polygon_cover_mask(mouth, depth.width, depth.height)
    vals = np.where(np.isfinite(depth.values), depth.values, 0.0)
    return DepthMap(np.where(inside, vals, 0.0))


def perturb_depth(depth: DepthMap, shift, max_shift) -> DepthMap:
    """Translate the map by integer pixels (dx, dy), zero-filling the exposed border."""
    dx, dy = int(shift[0]), int(shift[1])
    if abs(dx) > max_shift or abs(dy) > max_shift:
        raise ValueError(f"shift {shift} exceeds max_shift {max_shift}")
    h, w = depth.values.shape
    out = np.zeros((h, w), dtype=np.float64)
    span_x, span_y = w - abs(dx), h - abs(dy)
    if span_x > 0 and span_y > 0:
        sx, sy = max(0, -dx), max(0, -dy)
        tx, ty = max(0, dx), max(0, dy)
        out[ty:ty + span_y, tx:tx + span_x] = depth.values[sy:sy + span_y, sx:sx + span_x]
    return DepthMap(out)


def draw_shift(rng_seed, max_shift):
    """Seeded uniform integer shift with |dx|, |dy| <= max_shift."""
    rng = np.random.default_rng(rng_seed)
    return tuple(int(s) for s in rng.integers(-max_shift, max_shift + 1, size=2))


def dropout_depth(depth: DepthMap, rng_seed, p):
    """With seeded probability p, replace the whole map by zeros.

    Returns (map, dropped).  The undropped branch returns the input object
    unchanged.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout probability must be in [0, 1], got {p}")
    dropped = bool(np.random.default_rng(rng_seed).random() < p)
    if dropped:
        return DepthMap(np.zeros_like(depth.values)), True
    return depth, False


def render_track(basis: BasisSet, alpha: IdentityCoeffs, track: ExpressionTrack,
                 camera: Camera, size, threads=1):
    """Depth map per track frame: swap in each expression, rasterize, keep order."""
    width, height = size
    maps = []
    for beta in track.frames:
        mesh = swap_expression(basis, alpha, beta)
        maps.append(rasterize_depth(mesh, camera, width, height, threads=threads))
    return maps


# ---------------------------------------------------------------------------
# PFM I/O: grayscale "Pf", dims line, scale "-1.0" (little-endian), rows
# stored bottom-to-top.  The no-hit sentinel is written as 3.4e38.
# ---------------------------------------------------------------------------


def write_pfm(path, depth: DepthMap):
    vals = depth.values.astype(np.float32)
    vals = np.where(np.isfinite(vals), vals, SENTINEL_ON_DISK)
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{depth.width} {depth.height}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(vals[::-1].astype("<f4").tobytes())


def read_pfm(path) -> DepthMap:
    with open(path, "rb") as f:
        header = f.readline().rstrip()
        if header != b"Pf":
            raise FormatError(f"{path}: expected grayscale PFM magic 'Pf', got {header!r}")
        dims = f.readline().split()
        if len(dims) != 2:
            raise FormatError(f"{path}: malformed PFM dimension line")
        width, height = int(dims[0]), int(dims[1])
        if width < 1 or height < 1:
            raise FormatError(f"{path}: invalid PFM dimensions {width}x{height}")
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        payload = f.read(4 * width * height)
        if len(payload) != 4 * width * height:
            raise FormatError(f"{path}: truncated PFM payload")
    vals = np.frombuffer(payload, dtype=dtype).reshape(height, width)[::-1]
    vals = vals.astype(np.float64)
    return DepthMap(np.where(vals >= float(SENTINEL_ON_DISK), NO_HIT, vals))


# ---------------------------------------------------------------------------
# mouth keypoint CSV: one row per frame, "frame_idx, x0, y0, x1, y1, ...".
# ---------------------------------------------------------------------------


def load_mouth_csv(path, full_scale=False):
    """Read per-frame mouth polygons; returns {frame_idx: MouthPolygon}."""
    polygons = {}
    with open(path, "r", newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            cells = [c.strip() for c in row if c.strip() != ""]
            if not cells:
                continue
            if len(cells) < 7 or len(cells) % 2 == 0:
                raise FormatError(
                    f"{path}:{lineno}: need frame_idx plus >=3 x,y pairs, got {len(cells)} cells")
            try:
                idx = int(cells[0])
                coords = np.array([float(c) for c in cells[1:]], dtype=np.float64)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric cell") from None
            pts = coords.reshape(-1, 2)
            if full_scale and pts.shape[0] != FULL_MOUTH_POINTS:
                raise FormatError(
                    f"{path}:{lineno}: full-scale mode expects {FULL_MOUTH_POINTS} points, "
                    f"got {pts.shape[0]}")
            polygons[idx] = MouthPolygon(pts)
    if not polygons:
        raise FormatError(f"{path}: no landmark rows")
    return polygons


def write_mouth_csv(path, polygons):
    """Write {frame_idx: MouthPolygon} in ascending frame order."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        for idx in sorted(polygons):
            flat = polygons[idx].points.ravel()
            writer.writerow([idx] + [repr(float(v)) for v in flat])
