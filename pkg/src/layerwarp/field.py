"""Dense warp-field algebra.

Two grid-valued representations are used throughout:

* ``SamplingField`` stores, for every pixel of an output grid, the absolute
  (x, y) coordinate of the input grid to read from (backward warping).
* ``DeformationField`` stores per-pixel displacement vectors; adding the
  identity grid turns it into a sampling field.

A field named "X to Y" lives on the Y grid and its values name X
coordinates.  The Jacobian of the forward map X->Y is then the per-pixel
inverse of the Jacobian of the stored field, which is why
``push_through_warp`` inverts the differentiated field before applying it.

Coordinates are in pixels, x right, y down, origin at the top-left pixel
center.  ``values[y, x, 0]`` is the x coordinate, ``values[y, x, 1]`` the y
coordinate.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

DET_EPSILON = 1e-6


def _as_grid(values: np.ndarray, channels: int, name: str) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 3 or values.shape[2] != channels:
        raise ValueError(f"{name} must have shape (H, W, {channels}), got {values.shape}")
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{name} contains non-finite values")
    return values


@dataclass(frozen=True)
class SamplingField:
    """Per-pixel absolute source coordinates on an output grid."""

    values: np.ndarray  # (H, W, 2)

    def __post_init__(self):
        object.__setattr__(self, "values", _as_grid(self.values, 2, "sampling field"))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class DeformationField:
    """Per-pixel displacement vectors, optionally flagged where upstream
    Jacobians were degenerate (``valid is None`` means all valid)."""

    values: np.ndarray  # (H, W, 2)
    valid: np.ndarray | None = None  # (H, W) bool

    def __post_init__(self):
        object.__setattr__(self, "values", _as_grid(self.values, 2, "deformation field"))
        if self.valid is not None:
            v = np.asarray(self.valid, dtype=bool)
            if v.shape != self.values.shape[:2]:
                raise ValueError("validity mask shape mismatch")
            object.__setattr__(self, "valid", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class JacobianField:
    """Per-pixel 2x2 matrices with a validity flag per pixel."""

    matrices: np.ndarray  # (H, W, 2, 2)
    validity: np.ndarray  # (H, W) bool

    def __post_init__(self):
        m = np.asarray(self.matrices, dtype=np.float64)
        if m.ndim != 4 or m.shape[2:] != (2, 2):
            raise ValueError(f"jacobian field must have shape (H, W, 2, 2), got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("jacobian field contains non-finite values")
        v = np.asarray(self.validity, dtype=bool)
        if v.shape != m.shape[:2]:
            raise ValueError("validity mask shape mismatch")
        object.__setattr__(self, "matrices", m)
        object.__setattr__(self, "validity", v)

    @property
    def height(self) -> int:
        return self.matrices.shape[0]

    @property
    def width(self) -> int:
        return self.matrices.shape[1]


def grid_coords(width: int, height: int) -> np.ndarray:
    """(H, W, 2) array of pixel-center coordinates."""
    if width < 1 or height < 1:
        raise ValueError(f"grid must be at least 1x1, got {width}x{height}")
    xs, ys = np.meshgrid(np.arange(width, dtype=np.float64),
                         np.arange(height, dtype=np.float64))
    return np.stack([xs, ys], axis=-1)


def identity_field(width: int, height: int) -> SamplingField:
    return SamplingField(grid_coords(width, height))


def as_sampling_field(d: DeformationField) -> SamplingField:
    """F(p) = p + d(p)."""
    return SamplingField(grid_coords(d.width, d.height) + d.values)


def as_deformation_field(f: SamplingField) -> DeformationField:
    """d(p) = F(p) - p."""
    return DeformationField(f.values - grid_coords(f.width, f.height))


def scale_deformation(d: DeformationField, t: float) -> DeformationField:
    """Scale every displacement by t (shape interpolation primitive)."""
    if not np.isfinite(t):
        raise ValueError("scale factor must be finite")
    return DeformationField(t * d.values, valid=d.valid)


# ---------------------------------------------------------------------------
# Bilinear sampling

def _bilinear(image: np.ndarray, xy: np.ndarray, border: str,
              with_cache: bool = False):
    """Bilinear lookup of ``image`` at positions ``xy`` (N, 2).

    border "clamp" clips coordinates to the image rectangle; "zero" treats
    everything outside as zero.  With ``with_cache`` a dict of intermediates
    is returned for hand-derived gradients (see optimize module).
    """
    image = np.asarray(image, dtype=np.float64)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[..., None]
    h, w, c = image.shape
    xy = np.asarray(xy, dtype=np.float64)
    x_raw = xy[..., 0]
    y_raw = xy[..., 1]

    if border == "clamp":
        x = np.clip(x_raw, 0.0, w - 1.0)
        y = np.clip(y_raw, 0.0, h - 1.0)
        # position gradients vanish where the clamp is active
        pos_mask_x = (x_raw > 0.0) & (x_raw < w - 1.0)
        pos_mask_y = (y_raw > 0.0) & (y_raw < h - 1.0)
    elif border == "zero":
        x = x_raw
        y = y_raw
        pos_mask_x = np.ones_like(x, dtype=bool)
        pos_mask_y = np.ones_like(y, dtype=bool)
    else:
        raise ValueError(f"unknown border policy {border!r}")

    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    x1 = x0 + 1
    y1 = y0 + 1

    def corner(ix, iy):
        if border == "zero":
            inb = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
            ixc = np.clip(ix, 0, w - 1)
            iyc = np.clip(iy, 0, h - 1)
            vals = image[iyc, ixc] * inb[..., None]
            return vals, iyc * w + ixc, inb
        ixc = np.clip(ix, 0, w - 1)
        iyc = np.clip(iy, 0, h - 1)
        vals = image[iyc, ixc]
        return vals, iyc * w + ixc, np.ones_like(ix, dtype=bool)

    v00, i00, m00 = corner(x0, y0)
    v10, i10, m10 = corner(x1, y0)
    v01, i01, m01 = corner(x0, y1)
    v11, i11, m11 = corner(x1, y1)

    w00 = (1 - fx) * (1 - fy)
    w10 = fx * (1 - fy)
    w01 = (1 - fx) * fy
    w11 = fx * fy

    out = (v00 * w00[..., None] + v10 * w10[..., None]
           + v01 * w01[..., None] + v11 * w11[..., None])
    if squeeze:
        out = out[..., 0]
    if not with_cache:
        return out
    cache = dict(fx=fx, fy=fy,
                 vals=(v00, v10, v01, v11),
                 idx=(i00, i10, i01, i11),
                 masks=(m00, m10, m01, m11),
                 weights=(w00, w10, w01, w11),
                 pos_mask_x=pos_mask_x, pos_mask_y=pos_mask_y,
                 image_shape=(h, w, c), squeeze=squeeze)
    return out, cache


def _bilinear_grad_positions(cache, seed: np.ndarray) -> np.ndarray:
    """d(seed . out)/d(xy) for a cached bilinear evaluation; seed matches the
    output shape."""
    v00, v10, v01, v11 = cache["vals"]
    fx, fy = cache["fx"], cache["fy"]
    if cache["squeeze"]:
        seed = np.asarray(seed)[..., None]
    dfx = (v10 - v00) * (1 - fy)[..., None] + (v11 - v01) * fy[..., None]
    dfy = (v01 - v00) * (1 - fx)[..., None] + (v11 - v10) * fx[..., None]
    gx = np.sum(dfx * seed, axis=-1) * cache["pos_mask_x"]
    gy = np.sum(dfy * seed, axis=-1) * cache["pos_mask_y"]
    return np.stack([gx, gy], axis=-1)


def _bilinear_scatter_image(cache, seed: np.ndarray) -> np.ndarray:
    """Adjoint of the image lookup: scatter seed into an image-shaped grad."""
    h, w, c = cache["image_shape"]
    if cache["squeeze"]:
        seed = np.asarray(seed)[..., None]
    grad = np.zeros((h * w, c), dtype=np.float64)
    for wk, ik, mk in zip(cache["weights"], cache["idx"], cache["masks"]):
        contrib = seed * (wk * mk)[..., None]
        np.add.at(grad, ik.ravel(), contrib.reshape(-1, c))
    grad = grad.reshape(h, w, c)
    if cache["squeeze"]:
        grad = grad[..., 0]
    return grad


def sample(field: SamplingField, image: np.ndarray, border: str = "clamp") -> np.ndarray:
    """Warp ``image`` by the sampling field: out(p) = bilinear(image, field(p))."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim not in (2, 3) or image.size == 0:
        raise ValueError("image must be a non-empty (H, W) or (H, W, C) raster")
    return _bilinear(image, field.values, border)


# ---------------------------------------------------------------------------
# Jacobians

def _directional_diff(values: np.ndarray, axis: int, step: int) -> np.ndarray:
    """Central differences with one-sided fallback at the borders."""
    n = values.shape[axis]
    if n <= step:
        raise ValueError(f"grid too small ({n}) for difference step {step}")
    out = np.empty_like(values)
    sl = [slice(None)] * values.ndim

    def ax(a, b=None):
        s = sl.copy()
        s[axis] = slice(a, b)
        return tuple(s)

    out[ax(step, n - step)] = (values[ax(2 * step, None)] - values[ax(0, n - 2 * step)]) / (2.0 * step)
    out[ax(0, step)] = (values[ax(step, 2 * step)] - values[ax(0, step)]) / float(step)
    out[ax(n - step, None)] = (values[ax(n - step, None)] - values[ax(n - 2 * step, n - step)]) / float(step)
    return out


def jacobian_of_field(f: SamplingField, dx: int = 1, dy: int = 1,
                      det_epsilon: float = DET_EPSILON) -> JacobianField:
    """Per-pixel Jacobian of the stored field: column 0 = d field/dx,
    column 1 = d field/dy.  Pixels whose |det| falls below det_epsilon are
    flagged invalid (not raised: folds are expected in estimated warps)."""
    if dx <= 0 or dy <= 0:
        raise ValueError("difference steps must be positive")
    ddx = _directional_diff(f.values, axis=1, step=int(dx))
    ddy = _directional_diff(f.values, axis=0, step=int(dy))
    mats = np.stack([ddx, ddy], axis=-1)  # (H, W, 2, 2): [:, :, comp, axis]
    det = mats[..., 0, 0] * mats[..., 1, 1] - mats[..., 0, 1] * mats[..., 1, 0]
    return JacobianField(mats, np.abs(det) >= det_epsilon)


def invert_jacobians(j: JacobianField, det_epsilon: float = DET_EPSILON) -> JacobianField:
    """Per-pixel 2x2 inverse; degenerate pixels become identity and are
    flagged invalid."""
    m = j.matrices
    det = m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]
    ok = j.validity & (np.abs(det) >= det_epsilon)
    safe_det = np.where(ok, det, 1.0)
    inv = np.empty_like(m)
    inv[..., 0, 0] = m[..., 1, 1] / safe_det
    inv[..., 0, 1] = -m[..., 0, 1] / safe_det
    inv[..., 1, 0] = -m[..., 1, 0] / safe_det
    inv[..., 1, 1] = m[..., 0, 0] / safe_det
    eye = np.zeros_like(m)
    eye[..., 0, 0] = 1.0
    eye[..., 1, 1] = 1.0
    inv = np.where(ok[..., None, None], inv, eye)
    return JacobianField(inv, ok)


def transform_vectors(j: JacobianField, d: DeformationField) -> DeformationField:
    """out(p) = J(p) . d(p); invalid pixels pass d through unchanged."""
    if (j.height, j.width) != (d.height, d.width):
        raise ValueError(f"jacobian grid {j.height}x{j.width} does not match "
                         f"deformation grid {d.height}x{d.width}")
    out = np.einsum("hwij,hwj->hwi", j.matrices, d.values)
    out = np.where(j.validity[..., None], out, d.values)
    valid = j.validity if d.valid is None else (j.validity & d.valid)
    return DeformationField(out, valid=valid)


def push_through_warp(d_src: DeformationField, w: SamplingField,
                      dx: int = 1, dy: int = 1) -> DeformationField:
    """Move a deformation onto the grid of ``w`` (one propagation hop).

    The vectors are resampled at w(p) and re-expressed in the destination
    coordinate system by the forward-map Jacobian, i.e. the per-pixel inverse
    of the differentiated sampling field.  Fold pixels keep the resampled
    vector and are flagged through ``valid``.
    """
    resampled = sample(w, d_src.values, border="clamp")
    jac = invert_jacobians(jacobian_of_field(w, dx=dx, dy=dy))
    return transform_vectors(jac, DeformationField(resampled))


# ---------------------------------------------------------------------------
# LWF1 format: magic "LWF1", u32le width/height/channels, float32le row-major
# samples (2 = fields, 3 = color rasters on the guidance wire, 4 = Jacobians);
# 4-channel payloads carry a trailing width*height validity byte block.

_LWF_MAGIC = b"LWF1"


def lwf_to_bytes(array: np.ndarray, validity: np.ndarray | None = None) -> bytes:
    array = np.asarray(array, dtype=np.float64)
    if array.ndim == 4 and array.shape[2:] == (2, 2):
        array = array.reshape(array.shape[0], array.shape[1], 4)
    if array.ndim != 3 or array.shape[2] not in (2, 3, 4):
        raise ValueError(f"expected (H, W, 2|3|4) field, got {array.shape}")
    h, w, c = array.shape
    if c == 4:
        if validity is None:
            validity = np.ones((h, w), dtype=bool)
        if validity.shape != (h, w):
            raise ValueError("validity shape mismatch")
    elif validity is not None:
        raise ValueError("validity is only stored for 4-channel fields")
    parts = [_LWF_MAGIC, struct.pack("<III", w, h, c), array.astype("<f4").tobytes()]
    if c == 4:
        parts.append(np.asarray(validity, dtype=np.uint8).tobytes())
    return b"".join(parts)


def lwf_from_bytes(buf: bytes):
    """Decode an LWF1 payload; returns (array, validity-or-None)."""
    if buf[:4] != _LWF_MAGIC:
        raise ValueError(f"not an LWF1 payload (magic {buf[:4]!r})")
    w, h, c = struct.unpack("<III", buf[4:16])
    if c not in (2, 3, 4):
        raise ValueError(f"unsupported channel count {c}")
    end = 16 + w * h * c * 4
    data = np.frombuffer(buf[16:end], dtype="<f4")
    if data.size != w * h * c:
        raise ValueError("truncated payload")
    array = data.reshape(h, w, c).astype(np.float64)
    validity = None
    if c == 4:
        vbytes = np.frombuffer(buf[end:end + w * h], dtype=np.uint8)
        if vbytes.size != w * h:
            raise ValueError("truncated validity block")
        validity = vbytes.reshape(h, w).astype(bool)
    return array, validity


def write_lwf(path, array: np.ndarray, validity: np.ndarray | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(lwf_to_bytes(array, validity))


def read_lwf(path):
    """Read an LWF1 file; returns (array, validity-or-None)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    try:
        return lwf_from_bytes(buf)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from exc
