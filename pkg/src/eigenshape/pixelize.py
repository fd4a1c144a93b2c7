"""Canonicalization (scale, main-axis alignment, flip normalization) and rasterization."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import DomainShape, flatten_boundary, resample_closed

N_BOUNDARY_SAMPLES = 512
AXIS_TIE_TOL = 1e-9
FLIP_TIE_TOL = 1e-9
DEFAULT_MARGIN = 0.02
DEFAULT_SUPERSAMPLE = 8


class DegenerateShape(Exception):
    """Bounding box has zero extent."""


class AmbiguousAxes(Exception):
    """Covariance eigenvalues too close to define principal axes."""


@dataclass
class CanonicalTransform:
    """Record of the map from original coordinates to the canonical frame.

    Applied in order: subtract ``pre_translation``, multiply by ``rotation``,
    reflect about ``flip_center``, scale by ``scale``, add ``post_translation``.
    """

    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.eye(2))
    flip_x: bool = False
    flip_y: bool = False
    pre_translation: np.ndarray = field(default_factory=lambda: np.zeros(2))
    post_translation: np.ndarray = field(default_factory=lambda: np.zeros(2))
    flip_center: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def apply(self, points: np.ndarray) -> np.ndarray:
        out = (points - self.pre_translation) @ self.rotation
        out = _apply_flips(out, self.flip_x, self.flip_y, self.flip_center)
        return out * self.scale + self.post_translation

    def summary(self) -> dict:
        return {
            "scale": float(self.scale),
            "rotation": self.rotation.tolist(),
            "flip_x": bool(self.flip_x),
            "flip_y": bool(self.flip_y),
        }


@dataclass
class PixelImage:
    """d x d grayscale raster in [0, 1]; row 0 is the bottom of the frame."""

    d: int
    values: np.ndarray  # (d, d)
    transform: CanonicalTransform

    @property
    def mask(self) -> np.ndarray:
        return self.values > 0


def fit_unit_square(boundary: np.ndarray, margin: float = DEFAULT_MARGIN):
    """Uniformly scale and center the boundary so its bbox sits inside [0,1]^2.

    The longer bbox side becomes exactly 1 - 2*margin. Returns
    (boundary', scale, post_translation).
    """
    lo = boundary.min(axis=0)
    hi = boundary.max(axis=0)
    extent = hi - lo
    if extent[0] <= 0 or extent[1] <= 0:
        raise DegenerateShape(f"bounding box extents {extent} must be positive")
    s = (1.0 - 2.0 * margin) / float(extent.max())
    center = 0.5 * (lo + hi)
    post = 0.5 - s * center
    return boundary * s + post, s, post


def rescale_eigenvalue(lam: float, s: float) -> float:
    """Map an eigenvalue of the canonical (scaled-by-s) domain back to the original."""
    if s <= 0:
        raise ValueError("scale must be positive")
    return lam * s * s


def main_axis_align(boundary: np.ndarray, n_samples: int = N_BOUNDARY_SAMPLES):
    """Rotate the boundary so its principal axes align with x (minor) and y (major).

    Covariance is built from n_samples uniform-arc-length boundary points with
    the unbiased 1/(n-1) normalization; eigenvector columns come sorted by
    ascending eigenvalue, each sign-fixed so its largest-magnitude entry is
    positive. Returns (boundary', rotation); raises AmbiguousAxes when the
    covariance eigenvalues are within 1e-9 of each other.
    """
    q = resample_closed(boundary, n_samples)
    q_bar = q.mean(axis=0)
    centered = q - q_bar
    m = centered.T @ centered / (n_samples - 1)
    evals, evecs = np.linalg.eigh(m)  # ascending
    if evals[1] - evals[0] < AXIS_TIE_TOL:
        raise AmbiguousAxes(f"covariance eigenvalue gap {evals[1] - evals[0]:.3e}")
    for col in range(2):
        j = np.argmax(np.abs(evecs[:, col]))
        if evecs[j, col] < 0:
            evecs[:, col] = -evecs[:, col]
    return (boundary - q_bar) @ evecs, evecs


def _apply_flips(points: np.ndarray, flip_x: bool, flip_y: bool, center: np.ndarray):
    out = points.copy()
    if flip_x:
        out[:, 0] = 2.0 * center[0] - out[:, 0]
    if flip_y:
        out[:, 1] = 2.0 * center[1] - out[:, 1]
    return out


def flip_normalize(boundary: np.ndarray, n_samples: int = N_BOUNDARY_SAMPLES):
    """Reflect so x-std is smaller on the left half and y-std smaller on the lower half.

    Half membership and standard deviations (ddof=1) are computed on the
    uniform-arc-length resampling. Returns (boundary', flip_x, flip_y, center).
    """
    q = resample_closed(boundary, n_samples)
    center = q.mean(axis=0)

    def half_std(coords: np.ndarray, split: np.ndarray, axis: int) -> tuple[float, float]:
        lower = coords[split < 0, axis]
        upper = coords[split > 0, axis]
        sl = float(np.std(lower, ddof=1)) if lower.size > 1 else 0.0
        su = float(np.std(upper, ddof=1)) if upper.size > 1 else 0.0
        return sl, su

    sx_left, sx_right = half_std(q, q[:, 0] - center[0], 0)
    sy_low, sy_high = half_std(q, q[:, 1] - center[1], 1)
    flip_x = sx_left - sx_right > FLIP_TIE_TOL
    flip_y = sy_low - sy_high > FLIP_TIE_TOL
    return _apply_flips(boundary, flip_x, flip_y, center), flip_x, flip_y, center


def inside_grid(boundary: np.ndarray, n: int) -> np.ndarray:
    """Even-odd inside test at the n x n grid of pixel centers (scanline sweep).

    Row 0 is the bottom; entry (i, j) tests the point ((j+0.5)/n, (i+0.5)/n).
    """
    a, b = boundary[:-1], boundary[1:]
    xs = (np.arange(n) + 0.5) / n
    xa, xb = a[:, 0][:, None], b[:, 0][:, None]
    straddle = (xa > xs) != (xb > xs)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (xs - xa) / (xb - xa)
    ycross = a[:, 1][:, None] + t * (b[:, 1][:, None] - a[:, 1][:, None])
    out = np.zeros((n, n), dtype=bool)
    centers = xs
    for col in range(n):
        levels = np.sort(ycross[straddle[:, col], col])
        if levels.size:
            out[:, col] = np.searchsorted(levels, centers, side="right") % 2 == 1
    return out


def rasterize_binary(boundary: np.ndarray, d: int, sigma: int = DEFAULT_SUPERSAMPLE,
                     transform: CanonicalTransform | None = None) -> PixelImage:
    """1 for pixels lying entirely inside the domain, 0 for all others.

    Complete containment is resolved on the sigma x sigma subpixel centers: a
    pixel is 1 only when every subpixel center falls inside. Partially covered
    boundary pixels are 0, so nearby narrow shapes collapse to the same image
    (the failure mode detailed pixelization exists to fix).
    """
    if sigma < 1 or int(sigma) != sigma:
        raise ValueError("supersample factor must be a positive integer")
    sigma = int(sigma)
    hi = inside_grid(boundary, sigma * d)
    values = hi.reshape(d, sigma, d, sigma).all(axis=(1, 3)).astype(float)
    return PixelImage(d=d, values=values, transform=transform or CanonicalTransform())


def rasterize_detailed(boundary: np.ndarray, d: int, sigma: int = DEFAULT_SUPERSAMPLE,
                       transform: CanonicalTransform | None = None) -> PixelImage:
    """Binary rasterization at sigma*d followed by sigma x sigma average pooling.

    Each value is the fraction of the sigma^2 subpixel centers inside the
    domain, so boundary pixels carry the covered-area proportion. The mean of
    the raster is an unbiased area estimate (relative error ~1e-4 at sigma=8).
    """
    if sigma < 1 or int(sigma) != sigma:
        raise ValueError("supersample factor must be a positive integer")
    sigma = int(sigma)
    hi = inside_grid(boundary, sigma * d)
    values = hi.astype(float).reshape(d, sigma, d, sigma).mean(axis=(1, 3))
    return PixelImage(d=d, values=values, transform=transform or CanonicalTransform())


def canonicalize(shape: DomainShape, d: int, detailed: bool = True, align: bool = True,
                 sigma: int = DEFAULT_SUPERSAMPLE, margin: float | None = None,
                 flatten_tol: float = 1e-3) -> PixelImage:
    """Full preprocessing pipeline: flatten, align, flip-normalize, fit, rasterize."""
    boundary = flatten_boundary(shape, flatten_tol)
    t = CanonicalTransform()
    if align:
        q_bar = resample_closed(boundary, N_BOUNDARY_SAMPLES).mean(axis=0)
        try:
            boundary, rotation = main_axis_align(boundary)
        except AmbiguousAxes:
            rotation = np.eye(2)
            boundary = boundary - q_bar
        t.pre_translation = q_bar
        t.rotation = rotation
        boundary, t.flip_x, t.flip_y, t.flip_center = flip_normalize(boundary)
    boundary, t.scale, t.post_translation = fit_unit_square(
        boundary, margin=(1.0 / d if margin is None else margin)
    )
    if detailed:
        return rasterize_detailed(boundary, d, sigma, transform=t)
    return rasterize_binary(boundary, d, transform=t)


def canonical_boundary(shape: DomainShape, d: int, align: bool = True,
                       margin: float | None = None,
                       flatten_tol: float = 1e-3) -> tuple[np.ndarray, CanonicalTransform]:
    """The canonical-frame polyline and transform without rasterizing."""
    img = canonicalize(shape, d, detailed=False, align=align, margin=margin,
                       flatten_tol=flatten_tol)
    return img.transform.apply(flatten_boundary(shape, flatten_tol)), img.transform


def write_pgm(image: PixelImage, path) -> None:
    """Binary PGM (P5, maxval 255); row 0 is written last so viewers show it upright."""
    data = np.clip(np.rint(image.values * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{image.d} {image.d}\n255\n".encode("ascii"))
        f.write(data[::-1].tobytes())
