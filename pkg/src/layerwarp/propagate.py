"""Edit propagation through atlas space.

The pipeline: warp the edited keyframe into source shape, back-project it to
an edited atlas, push the keyframe deformation into atlas space and from
there onto every frame, invert each per-frame deformation (TPS, hole-free) to
deform the UV and alpha maps, and render.  Scaling the per-frame deformations
before the UV step interpolates between the source and edited shapes.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateWarpError, PipelineError
from .field import (DeformationField, SamplingField, as_sampling_field,
                    push_through_warp, sample, scale_deformation)
from .layers import (AtlasLayer, EditBundle, LayeredVideo, backproject_to_atlas,
                     render_edited_frame)
from .tps import inversion_stride, invert_field_via_tps, tps_to_field

DEGENERATE_WARN_FRACTION = 0.05
DEFAULT_INVERSION_REG = 1e-3


def _frame_map(fn, items):
    """Apply fn per frame, threaded when LW_THREADS allows; output order is
    fixed by the input order regardless of scheduling."""
    try:
        workers = int(os.environ.get("LW_THREADS", "1"))
    except ValueError:
        workers = 1
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


@dataclass(frozen=True)
class PropagationResult:
    edited_atlas: AtlasLayer
    atlas_deformation: DeformationField
    per_frame_deformation: tuple[DeformationField, ...]
    per_frame_uv_t: tuple[SamplingField, ...]
    per_frame_alpha_t: tuple[np.ndarray, ...]
    edited_frames: tuple[np.ndarray, ...]
    degenerate_fractions: tuple[float, ...]
    warnings: tuple[str, ...]
    inversion_grid_stride: int
    inversion_regularization: float

    @property
    def n_frames(self) -> int:
        return len(self.edited_frames)


def warp_edit_to_source(bundle: EditBundle) -> np.ndarray:
    """Resample the edited keyframe into source shape:
    out(p) = edited(p + d(p))."""
    try:
        d = bundle.deformation_field()
    except DegenerateWarpError as exc:
        raise DegenerateWarpError(f"keyframe correspondence: {exc}") from exc
    warped = sample(as_sampling_field(d), bundle.edited_keyframe, border="clamp")
    return np.clip(warped, 0.0, 1.0)


def build_edited_atlas(video: LayeredVideo, warped_edit: np.ndarray) -> AtlasLayer:
    """Back-project the source-shaped edit at the keyframe; atlas pixels the
    keyframe never saw keep the original foreground content and are left
    uncovered for the optimization stage to fill."""
    bp = backproject_to_atlas(warped_edit, video, video.keyframe_index)
    image = np.where(bp.coverage[..., None], bp.image, video.fg_atlas.image)
    return AtlasLayer(image, bp.coverage)


def propagate_deformation(video: LayeredVideo, d_k: DeformationField
                          ) -> tuple[DeformationField, list[DeformationField]]:
    """Two-stage spread of the keyframe deformation: keyframe grid -> atlas
    grid via the keyframe's frame-to-atlas UV, then atlas grid -> every frame
    via each atlas-to-frame UV."""
    w, h = video.frame_size
    if (d_k.height, d_k.width) != (h, w):
        raise ValueError("keyframe deformation is not on the frame grid")
    k = video.keyframe_index
    atlas_d = push_through_warp(d_k, video.uv_frame_to_atlas[k - 1])
    frame_ds = _frame_map(
        lambda uv: push_through_warp(atlas_d, uv), video.uv_atlas_to_frame)
    return atlas_d, frame_ds


def deform_uv_and_alpha(video: LayeredVideo, d_j: DeformationField, j: int,
                        grid_stride: int | None = None,
                        regularization: float = DEFAULT_INVERSION_REG
                        ) -> tuple[SamplingField, np.ndarray]:
    """Deform frame j's UV and alpha by the inverse of its deformation.

    The inverse direction is what backward sampling needs: the deformed UV at
    a target-shape pixel must name the atlas coordinate of the matching
    source-shape position.
    """
    video.check_frame_index(j)
    w, h = video.frame_size
    try:
        inv_tps = invert_field_via_tps(as_sampling_field(d_j),
                                       grid_stride=grid_stride,
                                       regularization=regularization)
    except DegenerateWarpError as exc:
        raise DegenerateWarpError(f"frame {j}: {exc}") from exc
    inv_field = tps_to_field(inv_tps, w, h)
    uv_t = SamplingField(sample(inv_field, video.uv_atlas_to_frame[j - 1].values,
                                border="clamp"))
    alpha_t = np.clip(sample(inv_field, video.alpha[j - 1], border="zero"), 0.0, 1.0)
    return uv_t, alpha_t


def propagate_edit(video: LayeredVideo, bundle: EditBundle,
                   grid_stride: int | None = None,
                   regularization: float = DEFAULT_INVERSION_REG) -> PropagationResult:
    """Run the full propagation; deterministic given its inputs."""
    if bundle.keyframe_index != video.keyframe_index:
        raise ValueError(
            f"bundle keyframe {bundle.keyframe_index} != video keyframe "
            f"{video.keyframe_index}")
    w, h = video.frame_size
    if bundle.frame_shape != (h, w):
        raise ValueError("edit bundle is not at the video frame size")
    if grid_stride is None:
        grid_stride = inversion_stride(w, h)

    try:
        warped = warp_edit_to_source(bundle)
    except Exception as exc:
        raise PipelineError("warp-edit", str(exc)) from exc
    try:
        edited_atlas = build_edited_atlas(video, warped)
    except Exception as exc:
        raise PipelineError("edited-atlas", str(exc)) from exc
    try:
        atlas_d, frame_ds = propagate_deformation(video, bundle.deformation_field())
    except Exception as exc:
        raise PipelineError("propagate-deformation", str(exc)) from exc

    fractions = []
    warnings = []
    for j, d in enumerate(frame_ds, start=1):
        frac = 0.0 if d.valid is None else float(1.0 - d.valid.mean())
        fractions.append(frac)
        if frac > DEGENERATE_WARN_FRACTION:
            warnings.append(
                f"frame {j}: {frac:.1%} degenerate warp pixels (threshold "
                f"{DEGENERATE_WARN_FRACTION:.0%})")

    def per_frame(args):
        j, d_j = args
        uv_t, alpha_t = deform_uv_and_alpha(video, d_j, j,
                                            grid_stride=grid_stride,
                                            regularization=regularization)
        frame = render_edited_frame(video, edited_atlas, uv_t, alpha_t, j)
        return uv_t, alpha_t, frame

    try:
        outputs = _frame_map(per_frame, list(enumerate(frame_ds, start=1)))
    except DegenerateWarpError as exc:
        raise PipelineError("uv-alpha-deformation", str(exc)) from exc
    except Exception as exc:
        raise PipelineError("render", str(exc)) from exc

    return PropagationResult(
        edited_atlas=edited_atlas,
        atlas_deformation=atlas_d,
        per_frame_deformation=tuple(frame_ds),
        per_frame_uv_t=tuple(o[0] for o in outputs),
        per_frame_alpha_t=tuple(o[1] for o in outputs),
        edited_frames=tuple(np.clip(o[2], 0.0, 1.0) for o in outputs),
        degenerate_fractions=tuple(fractions),
        warnings=tuple(warnings),
        inversion_grid_stride=grid_stride,
        inversion_regularization=regularization)


def interpolate_shape(result: PropagationResult, video: LayeredVideo,
                      t: float) -> list[np.ndarray]:
    """Re-render with every per-frame deformation scaled by t in [0, 1]:
    t = 0 shows the edited appearance in the source shape, t = 1 reproduces
    the propagated frames bit for bit."""
    if not (0.0 <= t <= 1.0):
        raise ValueError(f"interpolation parameter {t} outside [0, 1]")

    def per_frame(args):
        j, d_j = args
        uv_t, alpha_t = deform_uv_and_alpha(
            video, scale_deformation(d_j, t), j,
            grid_stride=result.inversion_grid_stride,
            regularization=result.inversion_regularization)
        frame = render_edited_frame(video, result.edited_atlas, uv_t, alpha_t, j)
        return np.clip(frame, 0.0, 1.0)

    return _frame_map(per_frame,
                      list(enumerate(result.per_frame_deformation, start=1)))


def is_identity_bundle(bundle: EditBundle, tolerance: float = 1e-9) -> bool:
    """True when the bundle encodes no edit at all."""
    if not np.allclose(bundle.source_keyframe, bundle.edited_keyframe, atol=1e-6):
        return False
    d = bundle.deformation_field()
    return float(np.abs(d.values).max()) <= max(tolerance, 1e-6)
