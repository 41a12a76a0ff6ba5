"""Thin-plate-spline fitting, evaluation, rasterization, and TPS-based
inversion of dense warp fields.

The kernel is Bookstein's U(r) = r^2 log r^2 with U(0) = 0.  A fitted spline
maps R^2 -> R^2 as

    f(p) = affine_part . [x, y, 1]^T + sum_i kernel_weights[i] * U(|p - src_i|)

and is obtained from the bordered system [[K + reg*I, P], [P^T, 0]] solved
with a partially pivoted dense factorization.  Affine correspondence sets are
reproduced exactly (all kernel weights vanish), which is what makes the
field-inversion round trip on affine warps tight.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DegenerateWarpError, WarpSolveError
from .field import SamplingField, grid_coords

MAX_CONDITION = 1e12
_EVAL_CHUNK = 65536


def _kernel(r_sq: np.ndarray) -> np.ndarray:
    """U as a function of squared radius: s * log(s), 0 at s = 0."""
    out = np.zeros_like(r_sq)
    pos = r_sq > 0
    out[pos] = r_sq[pos] * np.log(r_sq[pos])
    return out


def _check_points(src: np.ndarray) -> None:
    n = src.shape[0]
    if n < 3:
        raise DegenerateWarpError(f"need at least 3 control points, got {n}")
    d = cdist(src, src)
    np.fill_diagonal(d, np.inf)
    i, j = np.unravel_index(np.argmin(d), d.shape)
    if d[i, j] < 1e-9:
        raise DegenerateWarpError(
            f"duplicate control points {src[i].tolist()} and {src[j].tolist()}")
    centered = src - src.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[-1] <= 1e-9 * max(sv[0], 1.0):
        raise DegenerateWarpError("control points are collinear")


@dataclass(frozen=True)
class ThinPlateSpline:
    control_points_src: np.ndarray  # (n, 2)
    control_points_dst: np.ndarray  # (n, 2)
    affine_part: np.ndarray         # (2, 3), applied to [x, y, 1]
    kernel_weights: np.ndarray      # (n, 2)
    regularization: float

    @property
    def n_points(self) -> int:
        return self.control_points_src.shape[0]


def _solve_system(src: np.ndarray, dst: np.ndarray, regularization: float):
    n = src.shape[0]
    k = _kernel(cdist(src, src) ** 2) + regularization * np.eye(n)
    p = np.hstack([np.ones((n, 1)), src])
    lmat = np.zeros((n + 3, n + 3))
    lmat[:n, :n] = k
    lmat[:n, n:] = p
    lmat[n:, :n] = p.T
    rhs = np.vstack([dst, np.zeros((3, 2))])
    cond = np.linalg.cond(lmat)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        d = cdist(src, src)
        np.fill_diagonal(d, np.inf)
        i, j = np.unravel_index(np.argmin(d), d.shape)
        raise WarpSolveError(
            f"TPS system condition {cond:.3g} exceeds {MAX_CONDITION:.0e}; "
            f"closest points {src[i].tolist()} and {src[j].tolist()}")
    return np.linalg.solve(lmat, rhs), lmat


def fit_tps(src, dst, regularization: float = 0.0) -> ThinPlateSpline:
    """Fit a TPS mapping src[i] -> dst[i].

    With regularization 0 the map interpolates every correspondence; positive
    values trade data fidelity for smoothness via (K + reg*I) on the kernel
    block.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if src.shape != dst.shape:
        raise ValueError(f"src {src.shape} and dst {dst.shape} disagree")
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(dst))):
        raise ValueError("control points must be finite")
    if regularization < 0:
        raise ValueError("regularization must be nonnegative")
    _check_points(src)
    sol, _ = _solve_system(src, dst, regularization)
    n = src.shape[0]
    weights = sol[:n]
    # solution rows n..n+2 hold [const; coef_x; coef_y] per output component
    affine = np.vstack([sol[n + 1].T, sol[n + 2].T]).T  # (2, 2)
    affine_part = np.hstack([affine, sol[n][:, None]])  # (2, 3)
    return ThinPlateSpline(src, dst, affine_part, weights, float(regularization))


def eval_tps(tps: ThinPlateSpline, pts) -> np.ndarray:
    """Evaluate the spline at (m, 2) points; total on finite inputs."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    out = np.empty_like(pts)
    lin = tps.affine_part[:, :2]
    const = tps.affine_part[:, 2]
    for start in range(0, pts.shape[0], _EVAL_CHUNK):
        chunk = pts[start:start + _EVAL_CHUNK]
        u = _kernel(cdist(chunk, tps.control_points_src) ** 2)
        out[start:start + _EVAL_CHUNK] = chunk @ lin.T + const + u @ tps.kernel_weights
    return out


def tps_jacobian_field(tps: ThinPlateSpline, width: int, height: int,
                       delta: float = 0.1) -> "JacobianField":
    """Per-pixel warp Jacobian from small central shifts of the continuous
    spline (the smooth-approximation route; raster fields are differentiated
    by field.jacobian_of_field instead)."""
    from .field import DET_EPSILON, JacobianField
    if delta <= 0:
        raise ValueError("delta must be positive")
    pts = grid_coords(width, height).reshape(-1, 2)
    cols = []
    for axis in range(2):
        shift = np.zeros(2)
        shift[axis] = delta
        cols.append((eval_tps(tps, pts + shift) - eval_tps(tps, pts - shift))
                    / (2.0 * delta))
    mats = np.stack(cols, axis=-1).reshape(height, width, 2, 2)
    det = mats[..., 0, 0] * mats[..., 1, 1] - mats[..., 0, 1] * mats[..., 1, 0]
    return JacobianField(mats, np.abs(det) >= DET_EPSILON)


def tps_to_field(tps: ThinPlateSpline, width: int, height: int) -> SamplingField:
    """Rasterize the spline at every pixel center of a width x height grid."""
    if width < 1 or height < 1:
        raise ValueError(f"grid must be at least 1x1, got {width}x{height}")
    pts = grid_coords(width, height).reshape(-1, 2)
    return SamplingField(eval_tps(tps, pts).reshape(height, width, 2))


def tps_raster_basis(src, regularization: float, width: int, height: int) -> np.ndarray:
    """(H*W, n) matrix B with rasterized_map = B @ dst for any destination
    set over the fixed source control points (the fit is linear in dst)."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    _check_points(src)
    n = src.shape[0]
    _, lmat = _solve_system(src, np.zeros((n, 2)), regularization)
    linv_cols = np.linalg.inv(lmat)[:, :n]
    pts = grid_coords(width, height).reshape(-1, 2)
    out = np.empty((pts.shape[0], n))
    for start in range(0, pts.shape[0], _EVAL_CHUNK):
        chunk = pts[start:start + _EVAL_CHUNK]
        e = np.hstack([_kernel(cdist(chunk, src) ** 2),
                       np.ones((chunk.shape[0], 1)), chunk])
        out[start:start + _EVAL_CHUNK] = e @ linv_cols
    return out


def inversion_stride(width: int, height: int, target_points: int = 320,
                     minimum: int = 8) -> int:
    """Stride keeping the inversion fit at no more than a few hundred samples;
    8 px at desk scale, coarser for large grids."""
    stride = minimum
    while ((width + stride - 1) // stride) * ((height + stride - 1) // stride) > target_points:
        stride += 1
    return stride


def invert_field_via_tps(f: SamplingField, grid_stride: int | None = None,
                         regularization: float = 1e-3) -> ThinPlateSpline:
    """Fit a TPS on swapped grid samples (field(p) -> p) so that composing it
    after the field approximates the identity.  The default regularization
    smooths sampling noise from folded regions; affine fields invert exactly
    regardless.
    """
    if grid_stride is None:
        grid_stride = inversion_stride(f.width, f.height)
    if grid_stride < 1:
        raise ValueError("grid stride must be at least 1")
    ys = np.arange(0, f.height, grid_stride)
    xs = np.arange(0, f.width, grid_stride)
    gx, gy = np.meshgrid(xs, ys)
    dst = np.stack([gx, gy], axis=-1).reshape(-1, 2).astype(np.float64)
    src = f.values[gy.ravel(), gx.ravel()]
    try:
        return fit_tps(src, dst, regularization)
    except DegenerateWarpError as exc:
        raise DegenerateWarpError(f"field is not invertible: {exc}") from exc


def load_correspondence(path) -> tuple[np.ndarray, np.ndarray]:
    """Parse a correspondence file: JSON array of {"src": [x, y], "dst": [x, y]}
    in source-keyframe pixel coordinates."""
    with open(path) as fh:
        entries = json.load(fh)
    if not isinstance(entries, list):
        raise ValueError(f"{path}: expected a JSON array of point pairs")
    src, dst = [], []
    for idx, e in enumerate(entries):
        try:
            src.append([float(e["src"][0]), float(e["src"][1])])
            dst.append([float(e["dst"][0]), float(e["dst"][1])])
        except (KeyError, TypeError, IndexError) as exc:
            raise ValueError(f"{path}: malformed entry {idx}: {e!r}") from exc
    return np.asarray(src), np.asarray(dst)


def save_correspondence(path, src, dst) -> None:
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    entries = [{"src": list(s), "dst": list(d)} for s, d in zip(src.tolist(), dst.tolist())]
    with open(path, "w") as fh:
        json.dump(entries, fh, indent=1)
