"""Line and abnormal-point (abpt) defect geometry, sampling and rasterization.

A defect layer holds a coverage ``alpha`` in [0, 1] and an alpha-premultiplied
colour. Its hard geometry (``alpha > 0``) is the label mask.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

COLORS = {
    "black": (0, 0, 0),
    "white": (255, 255, 255),
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 0, 255),
}
OPACITIES = tuple(round(k / 10, 1) for k in range(1, 11))
WIDTH_RANGE = (3, 33)
THRESHOLDS = tuple(range(50, 201, 10))
KMEANS_ITERS = 50
KMEANS_RESTARTS = 10
LINE_CLASS = 1
ABPT_CLASS = 2


class NoEdgePoints(UserWarning):
    """The pattern has no threshold transitions, so no abpt defect can be placed."""


@dataclass(frozen=True)
class LineDefect:
    """A screen-spanning line whose centre moves linearly from ``x_top`` (row 0) to ``x_bottom``."""

    x_top: float
    x_bottom: float
    width: int
    color: str
    opacity: float


@dataclass(frozen=True)
class BlobDefect:
    """A disc of diameter ``width`` centred at (``cy``, ``cx``)."""

    cx: float
    cy: float
    width: int
    color: str
    opacity: float


@dataclass
class DefectLayer:
    alpha: np.ndarray  # (H, W) coverage in [0, 1]
    premultiplied: np.ndarray  # (H, W, 3) alpha * colour

    @classmethod
    def empty(cls, shape) -> "DefectLayer":
        h, w = shape[:2]
        return cls(np.zeros((h, w)), np.zeros((h, w, 3)))

    def paint(self, region: np.ndarray, color: str, opacity: float) -> None:
        """Composite a flat colour with the given opacity over ``region``."""
        a = opacity * region
        self.premultiplied = a[..., None] * np.array(COLORS[color], dtype=np.float64) \
            + (1 - a[..., None]) * self.premultiplied
        self.alpha = a + (1 - a) * self.alpha


def line_region(shape, line: LineDefect) -> np.ndarray:
    """Pixels covered by ``line``: exactly ``width`` columns per row when inside the image."""
    h, w = shape[:2]
    t = np.arange(h) / max(h - 1, 1)
    centre = line.x_top + (line.x_bottom - line.x_top) * t
    x = np.arange(w)[None, :]
    left = centre[:, None] - line.width / 2
    return (x >= left) & (x < left + line.width)


def blob_region(shape, blob: BlobDefect) -> np.ndarray:
    h, w = shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    r = blob.width / 2
    return (yy - blob.cy) ** 2 + (xx - blob.cx) ** 2 <= r * r


def strip_bounds(width: int, k: int):
    """Integer [lo, hi) column ranges of ``k`` equal vertical strips."""
    return [((i * width) // k, ((i + 1) * width) // k) for i in range(k)]


def _attributes(rng, max_width=WIDTH_RANGE[1]):
    color = list(COLORS)[int(rng.integers(len(COLORS)))]
    opacity = OPACITIES[int(rng.integers(len(OPACITIES)))]
    width = int(rng.integers(WIDTH_RANGE[0], min(WIDTH_RANGE[1], max_width) + 1))
    return color, opacity, width


def sample_lines(shape, k: int, rng: np.random.Generator) -> list[LineDefect]:
    """One line per vertical strip, kept one column clear of the strip's right edge.

    The line centre is drawn uniformly inside the strip and the bottom end
    deviates from the top by at most a quarter of the strip width, so lines
    from different strips never touch.
    """
    if k < 0:
        raise ValueError(f"line area count must be >= 0, got {k}")
    lines = []
    for lo, hi in strip_bounds(shape[1], k):
        room = hi - lo - 1
        if room < WIDTH_RANGE[0]:
            raise ValueError(f"strip of {hi - lo} px cannot hold a line of width {WIDTH_RANGE[0]}")
        color, opacity, width = _attributes(rng, room)
        c_lo, c_hi = lo + width / 2, hi - 1 - width / 2
        x_top = float(rng.uniform(c_lo, c_hi))
        jitter = (hi - lo) / 4
        x_bottom = float(rng.uniform(max(c_lo, x_top - jitter), min(c_hi, x_top + jitter)))
        lines.append(LineDefect(x_top, x_bottom, width, color, opacity))
    return lines


def edge_points(gray: np.ndarray, thresholds=THRESHOLDS) -> np.ndarray:
    """(P, 2) array of distinct (y, x) pixels on the boundary of any thresholded map.

    A pixel is a boundary pixel for threshold t when ``gray >= t`` differs
    from at least one of its 4-neighbours inside the image.
    """
    gray = np.asarray(gray)
    edges = np.zeros(gray.shape, dtype=bool)
    for t in thresholds:
        b = gray >= t
        dy = b[1:] != b[:-1]
        dx = b[:, 1:] != b[:, :-1]
        edges[1:] |= dy
        edges[:-1] |= dy
        edges[:, 1:] |= dx
        edges[:, :-1] |= dx
    return np.argwhere(edges)


def to_gray(image: np.ndarray) -> np.ndarray:
    """ITU-R BT.601 luma of an RGB image, rounded to integers."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        return np.round(img)
    return np.round(img @ np.array([0.299, 0.587, 0.114]))


def _lloyd(pts: np.ndarray, k: int, rng: np.random.Generator, iters: int):
    centroids = np.empty((k, pts.shape[1]))
    centroids[0] = pts[rng.integers(len(pts))]
    closest = ((pts - centroids[0]) ** 2).sum(1)
    for j in range(1, k):
        total = closest.sum()
        idx = rng.integers(len(pts)) if total == 0 else rng.choice(len(pts), p=closest / total)
        centroids[j] = pts[idx]
        closest = np.minimum(closest, ((pts - centroids[j]) ** 2).sum(1))
    for _ in range(iters):
        dist = ((pts[:, None, :] - centroids[None]) ** 2).sum(-1)
        labels = dist.argmin(axis=1)  # argmin returns the first minimum
        new = centroids.copy()
        for j in range(k):
            members = pts[labels == j]
            if len(members):
                new[j] = members.mean(axis=0)
        if np.array_equal(new, centroids):
            break
        centroids = new
    dist = ((pts[:, None, :] - centroids[None]) ** 2).sum(-1)
    labels = dist.argmin(axis=1)
    return centroids, labels, float(dist[np.arange(len(pts)), labels].sum())


def kmeans(points: np.ndarray, k: int, rng: np.random.Generator, iters: int = KMEANS_ITERS,
           restarts: int = KMEANS_RESTARTS):
    """Lloyd's algorithm with k-means++ seeding, keeping the best of ``restarts`` runs.

    Assignments break distance ties toward the lowest centroid index; a
    centroid that loses all its points keeps its previous position. Among
    restarts the lowest inertia wins, the earliest on ties.
    Returns (centroids (k, D), labels (P,)).
    """
    pts = np.asarray(points, dtype=np.float64)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(pts) == 0:
        raise ValueError("k-means needs at least one point")
    best = None
    for _ in range(max(1, restarts)):
        run = _lloyd(pts, k, rng, iters)
        if best is None or run[2] < best[2]:
            best = run
    return best[0], best[1]


def sample_blobs(clean: np.ndarray, clusters: int, rng: np.random.Generator) -> list[BlobDefect]:
    """One disc per k-means cluster of threshold-boundary points of ``clean``."""
    if clusters < 1:
        raise ValueError(f"cluster count must be >= 1, got {clusters}")
    points = edge_points(to_gray(clean))
    if len(points) == 0:
        warnings.warn("no threshold transitions in the pattern; abpt layer left empty", NoEdgePoints)
        return []
    centroids, _ = kmeans(points, clusters, rng)
    blobs = []
    for cy, cx in centroids:
        color, opacity, width = _attributes(rng)
        blobs.append(BlobDefect(float(cx), float(cy), width, color, opacity))
    return blobs


def render_defects(shape, lines=(), blobs=()):
    """Rasterize lines then blobs; returns (DefectLayer, uint8 class mask)."""
    layer = DefectLayer.empty(shape)
    mask = np.zeros(shape[:2], dtype=np.uint8)
    for line in lines:
        region = line_region(shape, line)
        layer.paint(region, line.color, line.opacity)
        mask[region] = LINE_CLASS
    for blob in blobs:
        region = blob_region(shape, blob)
        layer.paint(region, blob.color, blob.opacity)
        mask[region] = ABPT_CLASS
    return layer, mask


def generate_line_defects(clean: np.ndarray, k: int, rng: np.random.Generator):
    """Line layer with ``k`` strips over ``clean``; returns (DefectLayer, mask)."""
    return render_defects(clean.shape, lines=sample_lines(clean.shape, k, rng))


def generate_abpt_defects(clean: np.ndarray, clusters: int, rng: np.random.Generator):
    """abpt layer with ``clusters`` blobs placed on ``clean``'s edges; returns (DefectLayer, mask)."""
    return render_defects(clean.shape, blobs=sample_blobs(clean, clusters, rng))
