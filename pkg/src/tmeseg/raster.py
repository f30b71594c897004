"""Raster containers and the image-processing primitives shared downstream.

Rasters are plain numpy arrays indexed ``[row, col]``:

* RGB tile      -- ``(H, W, 3) uint8``
* bit mask      -- ``(H, W) bool``
* label raster  -- ``(H, W) uint8`` of class ids
* instance ids  -- ``(H, W) int32`` (0 = no instance)

All operations are pure functions of their inputs and safe to run on
independent workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage


# ---------------------------------------------------------------------------
# Containers
# ---------------------------------------------------------------------------


@dataclass
class LogitStack:
    """Named stack of float32 logit planes, one per class channel.

    ``planes`` has shape ``(C, H, W)``; ``class_ids[i]`` names plane ``i``.
    """

    class_ids: tuple[int, ...]
    planes: np.ndarray

    def __post_init__(self):
        self.class_ids = tuple(int(c) for c in self.class_ids)
        self.planes = np.asarray(self.planes, dtype=np.float32)
        if self.planes.ndim != 3 or self.planes.shape[0] != len(self.class_ids):
            raise ValueError("planes must be (C, H, W) with one plane per channel")
        if len(set(self.class_ids)) != len(self.class_ids):
            raise ValueError("channel class ids must be distinct")
        self._index = {c: i for i, c in enumerate(self.class_ids)}

    @property
    def height(self) -> int:
        return self.planes.shape[1]

    @property
    def width(self) -> int:
        return self.planes.shape[2]

    def has(self, class_id: int) -> bool:
        return class_id in self._index

    def plane(self, class_id: int) -> np.ndarray:
        try:
            return self.planes[self._index[class_id]]
        except KeyError:
            raise KeyError(f"logit stack has no channel for class id {class_id}")

    def require_finite(self) -> None:
        if not np.isfinite(self.planes).all():
            raise ValueError("logit planes contain NaN or Inf")

    def crop(self, y0: int, x0: int, h: int, w: int) -> "LogitStack":
        return LogitStack(self.class_ids, self.planes[:, y0 : y0 + h, x0 : x0 + w])


@dataclass
class InstanceAttrs:
    pixel_count: int
    centroid: tuple[float, float]  # (row, col)
    teacher_type: Optional[int] = None


@dataclass
class InstanceMap:
    """Integer instance-id raster plus per-instance attribute records."""

    ids: np.ndarray
    attrs: dict[int, InstanceAttrs] = field(default_factory=dict)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int32)
        if self.ids.ndim != 2:
            raise ValueError("instance ids must be a 2-d raster")

    @property
    def height(self) -> int:
        return self.ids.shape[0]

    @property
    def width(self) -> int:
        return self.ids.shape[1]

    @property
    def instance_ids(self) -> list[int]:
        return sorted(self.attrs)

    @classmethod
    def from_ids(
        cls, ids: np.ndarray, teacher_types: Optional[dict[int, Optional[int]]] = None
    ) -> "InstanceMap":
        """Build the attribute table (counts, centroids) from an id raster."""
        ids = np.asarray(ids, dtype=np.int32)
        attrs: dict[int, InstanceAttrs] = {}
        present = np.unique(ids)
        present = present[present > 0]
        if present.size:
            counts = np.bincount(ids.ravel())
            rows, cols = np.nonzero(ids)
            vals = ids[rows, cols]
            row_sum = np.bincount(vals, weights=rows, minlength=counts.size)
            col_sum = np.bincount(vals, weights=cols, minlength=counts.size)
            for gid in present.tolist():
                n = int(counts[gid])
                attrs[gid] = InstanceAttrs(
                    pixel_count=n,
                    centroid=(row_sum[gid] / n, col_sum[gid] / n),
                    teacher_type=(teacher_types or {}).get(gid),
                )
        return cls(ids, attrs)

    def validate(self) -> None:
        present = set(np.unique(self.ids).tolist()) - {0}
        if present - set(self.attrs):
            raise ValueError("raster contains ids without attribute records")
        if 0 in self.attrs:
            raise ValueError("id 0 is reserved for no-instance")
        counts = np.bincount(self.ids.ravel())
        for gid, a in self.attrs.items():
            n = int(counts[gid]) if gid < counts.size else 0
            if n != a.pixel_count:
                raise ValueError(
                    f"instance {gid}: pixel_count {a.pixel_count} != raster count {n}"
                )


def as_bitmask(arr: np.ndarray) -> np.ndarray:
    m = np.asarray(arr)
    if m.ndim != 2 or m.dtype != np.bool_:
        raise ValueError("bit mask must be a 2-d bool array")
    return m


def check_rgb_tile(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError("RGB tile must be (H, W, 3) uint8")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError("RGB tile must be at least 1x1")
    return img


# ---------------------------------------------------------------------------
# Smoothing and thresholding
# ---------------------------------------------------------------------------


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Normalized 1-d Gaussian taps with radius ceil(3*sigma)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    radius = math.ceil(3.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur per channel, reflect edges, rounded to uint8.

    Kernel radius is ceil(3*sigma). Computation runs in float64 so the
    result is independent of channel order and input strides.
    """
    check_rgb_tile(img)
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    radius = math.ceil(3.0 * sigma)
    out = np.empty_like(img)
    for ch in range(3):
        sm = ndimage.gaussian_filter(
            img[:, :, ch].astype(np.float64), sigma, mode="reflect", radius=radius
        )
        out[:, :, ch] = np.clip(np.rint(sm), 0, 255).astype(np.uint8)
    return out


def grayscale(img: np.ndarray) -> np.ndarray:
    """Rounded mean of R, G, B as uint8."""
    check_rgb_tile(img)
    return np.rint(img.astype(np.float64).sum(axis=2) / 3.0).astype(np.uint8)


def otsu_threshold(gray: np.ndarray) -> int:
    """Threshold maximizing between-class variance over the 256-bin histogram.

    The split is ``{<= t}`` vs ``{> t}``; among equally good thresholds the
    smallest is returned. A single-valued raster returns that value. The
    variance comparison runs in exact integer arithmetic (the between-class
    variance is proportional to (s0*w1 - s1*w0)^2 / (w0*w1)), so the
    maximizer is reproducible bit-for-bit.
    """
    gray = np.asarray(gray)
    if gray.size == 0:
        raise ValueError("raster is empty")
    if gray.dtype != np.uint8:
        raise ValueError("otsu_threshold expects 8-bit values")
    hist = np.bincount(gray.ravel(), minlength=256).tolist()
    nonzero = [v for v in range(256) if hist[v]]
    if len(nonzero) == 1:
        return nonzero[0]
    total = sum(hist)
    grand = sum(v * hist[v] for v in range(256))
    w0 = 0
    s0 = 0
    best_t, best_num, best_den = 0, -1, 1
    for t in range(256):
        w0 += hist[t]
        s0 += t * hist[t]
        w1 = total - w0
        if w0 == 0 or w1 == 0:
            continue
        num = (s0 * w1 - (grand - s0) * w0) ** 2
        den = w0 * w1
        if num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t


# ---------------------------------------------------------------------------
# Connected components and contours
# ---------------------------------------------------------------------------

_STRUCT4 = ndimage.generate_binary_structure(2, 1)
_STRUCT8 = ndimage.generate_binary_structure(2, 2)


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 4:
        return _STRUCT4
    if connectivity == 8:
        return _STRUCT8
    raise ValueError("connectivity must be 4 or 8")


def connected_components(mask: np.ndarray, connectivity: int = 8) -> InstanceMap:
    """Label maximal connected true-regions, ids in raster-scan order.

    Ids start at 1 and follow the order in which each component's first
    pixel is met scanning rows left to right.
    """
    mask = as_bitmask(mask)
    labeled, n = ndimage.label(mask, structure=_structure(connectivity))
    if n == 0:
        return InstanceMap(np.zeros(mask.shape, dtype=np.int32), {})
    flat = labeled.ravel()
    first = np.full(n + 1, flat.size, dtype=np.int64)
    idx = np.nonzero(flat)[0]
    # reversed so earlier occurrences overwrite later ones
    first[flat[idx[::-1]]] = idx[::-1]
    order = np.argsort(first[1:], kind="stable")  # old label-1 -> rank
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[order + 1] = np.arange(1, n + 1, dtype=np.int32)
    return InstanceMap.from_ids(remap[labeled])


@dataclass
class Contour:
    """Filled pixel set of one 8-connected component."""

    pixels: np.ndarray  # (N, 2) int rows of (row, col)
    area: int


def contours(mask: np.ndarray) -> list[Contour]:
    """One contour per 8-connected component; holes count toward the area."""
    mask = as_bitmask(mask)
    labeled, n = ndimage.label(mask, structure=_STRUCT8)
    out: list[Contour] = []
    if n == 0:
        return out
    slices = ndimage.find_objects(labeled)
    for i, sl in enumerate(slices, start=1):
        comp = labeled[sl] == i
        filled = ndimage.binary_fill_holes(comp)
        rr, cc = np.nonzero(filled)
        pixels = np.stack([rr + sl[0].start, cc + sl[1].start], axis=1)
        out.append(Contour(pixels=pixels, area=int(pixels.shape[0])))
    return out


# ---------------------------------------------------------------------------
# Convex hulls
# ---------------------------------------------------------------------------


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Convex hull via monotone chain; vertices counter-clockwise.

    ``points`` is (N, 2) of (x, y). Degenerate inputs give a single point
    or a 2-vertex segment. Counter-clockwise is in the mathematical (x, y)
    plane, i.e. positive shoelace area.
    """
    pts = np.asarray(points, dtype=np.int64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 1:
        raise ValueError("points must be a non-empty (N, 2) array")
    uniq = np.unique(pts, axis=0)  # sorts lexicographically by (x, y)
    if uniq.shape[0] == 1:
        return uniq
    pl = [tuple(p) for p in uniq.tolist()]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list[tuple[int, int]] = []
    for p in pl:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[tuple[int, int]] = []
    for p in reversed(pl):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 2:  # all points collinear collapse to the two extremes
        hull = [pl[0], pl[-1]]
    return np.asarray(hull, dtype=np.int64)


def rasterize_hull(hull: np.ndarray, extent: tuple[int, int]) -> np.ndarray:
    """Fill pixels whose integer centers lie inside or on the hull.

    ``extent`` is (width, height); the mask is returned as (H, W) bool.
    Handles point and segment degeneracies exactly (integer arithmetic).
    """
    width, height = extent
    mask = np.zeros((height, width), dtype=bool)
    hull = np.asarray(hull, dtype=np.int64)
    xs, ys = hull[:, 0], hull[:, 1]
    x0 = max(int(xs.min()), 0)
    x1 = min(int(xs.max()), width - 1)
    y0 = max(int(ys.min()), 0)
    y1 = min(int(ys.max()), height - 1)
    if x0 > x1 or y0 > y1:
        return mask
    gx, gy = np.meshgrid(
        np.arange(x0, x1 + 1, dtype=np.int64),
        np.arange(y0, y1 + 1, dtype=np.int64),
    )
    if hull.shape[0] == 1:
        inside = (gx == xs[0]) & (gy == ys[0])
    elif hull.shape[0] == 2:
        dx, dy = xs[1] - xs[0], ys[1] - ys[0]
        cross = dx * (gy - ys[0]) - dy * (gx - xs[0])
        dot = dx * (gx - xs[0]) + dy * (gy - ys[0])
        inside = (cross == 0) & (dot >= 0) & (dot <= dx * dx + dy * dy)
    else:
        inside = np.ones(gx.shape, dtype=bool)
        for i in range(hull.shape[0]):
            ax, ay = hull[i]
            bx, by = hull[(i + 1) % hull.shape[0]]
            # CCW polygon: interior is left of every edge
            inside &= (bx - ax) * (gy - ay) - (by - ay) * (gx - ax) >= 0
            if not inside.any():
                break
    mask[y0 : y1 + 1, x0 : x1 + 1] = inside
    return mask


# ---------------------------------------------------------------------------
# Distance bands
# ---------------------------------------------------------------------------


def distance_band(region: np.ndarray, radius_um: float, mpp: float) -> np.ndarray:
    """Pixels outside ``region`` within ``radius_um`` of its nearest pixel.

    Distances are exact Euclidean (two-pass squared EDT); the radius is
    converted to pixels as ``radius_um / mpp``.
    """
    region = as_bitmask(region)
    if radius_um <= 0:
        raise ValueError("radius_um must be positive")
    if mpp <= 0:
        raise ValueError("mpp must be positive")
    if not region.any():
        return np.zeros_like(region)
    outside = ~region
    if not outside.any():
        return np.zeros_like(region)
    dist = ndimage.distance_transform_edt(outside)
    return outside & (dist <= radius_um / mpp)
