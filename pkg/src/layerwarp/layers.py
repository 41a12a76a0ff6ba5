"""Layered video data model and rendering.

A video is two canonical atlases (foreground object and complete background)
plus, per frame, a bidirectional pair of UV sampling fields and an alpha map.
Frames are reconstructed by sampling each atlas through the atlas-to-frame UV
and alpha blending; editing replaces the foreground atlas and deforms the UV
and alpha before the same blend.

Frame indices are 1-based throughout, matching the on-disk %04d numbering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import (DeformationField, SamplingField, _bilinear,
                    as_deformation_field, as_sampling_field, grid_coords, sample)
from .tps import ThinPlateSpline, fit_tps, tps_to_field

ALPHA_FG_THRESHOLD = 0.5


def _check_raster01(img: np.ndarray, name: str, channels: int | None = 3) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if channels is None:
        if img.ndim != 2:
            raise ValueError(f"{name} must be a single-channel (H, W) raster")
    else:
        if img.ndim != 3 or img.shape[2] != channels:
            raise ValueError(f"{name} must have shape (H, W, {channels})")
    if not np.all(np.isfinite(img)):
        raise ValueError(f"{name} contains non-finite values")
    if img.min() < -1e-9 or img.max() > 1 + 1e-9:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return np.clip(img, 0.0, 1.0)


@dataclass(frozen=True)
class AtlasLayer:
    """Canonical texture of one layer; coverage marks pixels actually
    observed or edited."""

    image: np.ndarray            # (H, W, 3) in [0, 1]
    coverage: np.ndarray | None = None  # (H, W) bool; None means complete

    def __post_init__(self):
        img = _check_raster01(self.image, "atlas image")
        object.__setattr__(self, "image", img)
        cov = self.coverage
        if cov is None:
            cov = np.ones(img.shape[:2], dtype=bool)
        else:
            cov = np.asarray(cov, dtype=bool)
            if cov.shape != img.shape[:2]:
                raise ValueError("coverage shape does not match atlas image")
        object.__setattr__(self, "coverage", cov)

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass(frozen=True)
class LayeredVideo:
    fg_atlas: AtlasLayer
    bg_atlas: AtlasLayer
    frame_size: tuple[int, int]            # (W, H)
    uv_atlas_to_frame: tuple[SamplingField, ...]  # frame grid -> atlas coords
    uv_frame_to_atlas: tuple[SamplingField, ...]  # atlas grid -> frame coords
    alpha: tuple[np.ndarray, ...]          # per frame (H, W) in [0, 1]
    keyframe_index: int                    # 1-based

    def __post_init__(self):
        n = len(self.uv_atlas_to_frame)
        if n < 2:
            raise ValueError("a layered video needs at least 2 frames")
        if len(self.uv_frame_to_atlas) != n or len(self.alpha) != n:
            raise ValueError("per-frame collections disagree on frame count")
        w, h = self.frame_size
        alphas = []
        for i, a in enumerate(self.alpha):
            a = _check_raster01(a, f"alpha[{i}]", channels=None)
            if a.shape != (h, w):
                raise ValueError(f"alpha[{i}] shape {a.shape} != frame size {(h, w)}")
            alphas.append(a)
        object.__setattr__(self, "alpha", tuple(alphas))
        for i, f in enumerate(self.uv_atlas_to_frame):
            if (f.height, f.width) != (h, w):
                raise ValueError(f"uv_atlas_to_frame[{i}] is not on the frame grid")
        ah, aw = self.fg_atlas.image.shape[:2]
        for i, f in enumerate(self.uv_frame_to_atlas):
            if (f.height, f.width) != (ah, aw):
                raise ValueError(f"uv_frame_to_atlas[{i}] is not on the atlas grid")
        if not (1 <= self.keyframe_index <= n):
            raise ValueError(f"keyframe index {self.keyframe_index} outside [1, {n}]")
        if not self.bg_atlas.coverage.all():
            raise ValueError("background atlas must be complete (full coverage)")
        object.__setattr__(self, "uv_atlas_to_frame", tuple(self.uv_atlas_to_frame))
        object.__setattr__(self, "uv_frame_to_atlas", tuple(self.uv_frame_to_atlas))

    @property
    def n_frames(self) -> int:
        return len(self.uv_atlas_to_frame)

    def check_frame_index(self, j: int) -> None:
        if not (1 <= j <= self.n_frames):
            raise ValueError(f"frame index {j} outside [1, {self.n_frames}]")

    def bidirectional_error(self, j: int) -> float:
        """Max |f2a(a2f(p)) - p| over foreground pixels of frame j."""
        self.check_frame_index(j)
        a2f = self.uv_atlas_to_frame[j - 1]
        # read the f2a field (a 2-channel image on the atlas grid) at the
        # atlas positions named by a2f
        back = _bilinear(self.uv_frame_to_atlas[j - 1].values, a2f.values, "clamp")
        fg = self.alpha[j - 1] > ALPHA_FG_THRESHOLD
        if not fg.any():
            return 0.0
        w, h = self.frame_size
        err = np.linalg.norm(back - grid_coords(w, h), axis=-1)
        return float(err[fg].max())

    def validate(self, tolerance: float = 0.5) -> None:
        """Deep consistency check: bidirectional UV agreement on the
        foreground support of every frame."""
        for j in range(1, self.n_frames + 1):
            err = self.bidirectional_error(j)
            if err > tolerance:
                raise ValueError(
                    f"frame {j}: UV round trip off by {err:.3f} px (> {tolerance})")


@dataclass(frozen=True)
class EditBundle:
    """A single edited keyframe with the correspondence that carries its
    shape change back to the source shape."""

    keyframe_index: int
    source_keyframe: np.ndarray   # (H, W, 3)
    edited_keyframe: np.ndarray   # (H, W, 3)
    source_mask: np.ndarray       # (H, W) in {0, 1}
    target_mask: np.ndarray       # (H, W) in {0, 1}
    correspondence: ThinPlateSpline | tuple[np.ndarray, np.ndarray]

    def __post_init__(self):
        src_img = _check_raster01(self.source_keyframe, "source keyframe")
        dst_img = _check_raster01(self.edited_keyframe, "edited keyframe")
        if src_img.shape != dst_img.shape:
            raise ValueError("source and edited keyframes disagree on shape")
        object.__setattr__(self, "source_keyframe", src_img)
        object.__setattr__(self, "edited_keyframe", dst_img)
        for name in ("source_mask", "target_mask"):
            m = np.asarray(getattr(self, name), dtype=np.float64)
            if m.shape != src_img.shape[:2]:
                raise ValueError(f"{name} shape does not match the keyframes")
            if not np.all(np.isin(m, (0.0, 1.0))):
                raise ValueError(f"{name} must be binary")
            object.__setattr__(self, name, m)

    @property
    def frame_shape(self) -> tuple[int, int]:
        return self.source_keyframe.shape[:2]

    def correspondence_tps(self, regularization: float = 0.0) -> ThinPlateSpline:
        if isinstance(self.correspondence, ThinPlateSpline):
            return self.correspondence
        src, dst = self.correspondence
        return fit_tps(src, dst, regularization)

    def deformation_field(self) -> DeformationField:
        """Rasterized keyframe deformation: p + d(p) is where the edited image
        holds the content for source-shape pixel p."""
        h, w = self.frame_shape
        f = tps_to_field(self.correspondence_tps(), w, h)
        return as_deformation_field(f)

    def deformed_target_mask(self) -> np.ndarray:
        """Target mask pulled into source shape by the correspondence."""
        f = as_sampling_field(self.deformation_field())
        return sample(f, self.target_mask, border="zero")

    def correspondence_iou(self) -> float:
        """IoU of the deformed target mask against the source mask; reported
        at ingestion, never enforced."""
        warped = self.deformed_target_mask() > 0.5
        src = self.source_mask > 0.5
        union = np.logical_or(warped, src).sum()
        if union == 0:
            return 1.0
        return float(np.logical_and(warped, src).sum() / union)


def render_frame(video: LayeredVideo, j: int) -> np.ndarray:
    """Reconstruct frame j: sample both atlases through the frame's UV and
    alpha blend."""
    video.check_frame_index(j)
    uv = video.uv_atlas_to_frame[j - 1]
    fg = sample(uv, video.fg_atlas.image)
    bg = sample(uv, video.bg_atlas.image)
    a = video.alpha[j - 1][..., None]
    return fg * a + bg * (1.0 - a)


def backproject_to_atlas(frame_image: np.ndarray, video: LayeredVideo, j: int) -> AtlasLayer:
    """Pull a frame image onto the atlas grid through the frame-to-atlas UV.

    Coverage marks atlas pixels whose sampled frame location lies inside the
    frame rectangle and on foreground support (alpha > 0.5).
    """
    video.check_frame_index(j)
    frame_image = np.asarray(frame_image, dtype=np.float64)
    w, h = video.frame_size
    if frame_image.shape[:2] != (h, w):
        raise ValueError(f"frame image shape {frame_image.shape[:2]} != {(h, w)}")
    uv = video.uv_frame_to_atlas[j - 1]
    image = np.clip(sample(uv, frame_image), 0.0, 1.0)
    pos = uv.values
    inside = ((pos[..., 0] >= 0) & (pos[..., 0] <= w - 1)
              & (pos[..., 1] >= 0) & (pos[..., 1] <= h - 1))
    alpha_at = sample(uv, video.alpha[j - 1])
    return AtlasLayer(image, inside & (alpha_at > ALPHA_FG_THRESHOLD))


def render_edited_frame(video: LayeredVideo, edited_fg: AtlasLayer,
                        uv_t: SamplingField, alpha_t: np.ndarray, j: int) -> np.ndarray:
    """Render an edited frame: foreground from the edited atlas through the
    deformed UV, background atlas through the frame's original UV."""
    video.check_frame_index(j)
    w, h = video.frame_size
    if (uv_t.height, uv_t.width) != (h, w):
        raise ValueError("deformed UV is not on the frame grid")
    alpha_t = np.asarray(alpha_t, dtype=np.float64)
    if alpha_t.shape != (h, w):
        raise ValueError("deformed alpha is not on the frame grid")
    fg = sample(uv_t, edited_fg.image)
    bg = sample(video.uv_atlas_to_frame[j - 1], video.bg_atlas.image)
    a = np.clip(alpha_t, 0.0, 1.0)[..., None]
    return fg * a + bg * (1.0 - a)
