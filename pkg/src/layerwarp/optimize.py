"""Guided refinement of the edited atlas, its deformation, and the keyframe
correspondence.

Three parameter blocks are optimized jointly, mirroring the two refinement
heads of the method: an appearance residual added to the initial edited atlas
and a deformation residual added to the initial atlas-space deformation (the
atlas head), plus per-control-point offsets on the correspondence
destinations (the correspondence head).  The atlas head drives the rendering
of the selected frames; the correspondence head is scored by the semantic
mask loss against the source mask.  Gradients are hand-derived through the
whole chain (TPS raster basis -> warp-field pushes -> TPS field inversion ->
bilinear sampling -> blend -> losses).

A pluggable guidance provider supplies an extra per-pixel gradient on each
rendered frame.  It enters the backward pass as d(loss)/d(rendered) and is
never differentiated itself; the reported scalar objective is the weighted
sum of the three analytic losses only.

Two quantities are treated as locally constant during differentiation: the
warp Jacobians of the stored UV fields (they do not depend on the parameters
at all) and the geometry of the per-frame field inversion (inverse positions
and their Jacobian are frozen at the current iterate, and a delta in the
forward deformation perturbs the inverse to first order through them).  The
finite-difference contract in the tests runs under the same freezing.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field, replace

import numpy as np
import requests

from .errors import (GuidanceContractError, OptimizationDivergedError)
from .field import (DeformationField, SamplingField, _bilinear,
                    _bilinear_grad_positions, _bilinear_scatter_image,
                    as_sampling_field, grid_coords, invert_jacobians,
                    jacobian_of_field, lwf_from_bytes, lwf_to_bytes,
                    push_through_warp, sample)
from .layers import AtlasLayer, EditBundle, LayeredVideo, render_edited_frame
from .propagate import (DEFAULT_INVERSION_REG, PropagationResult,
                        build_edited_atlas, deform_uv_and_alpha,
                        propagate_edit, warp_edit_to_source)
from .tps import (inversion_stride, invert_field_via_tps, tps_raster_basis,
                  tps_to_field)

DEFAULT_ITERATIONS = 800
DEFAULT_STEP_SIZE = 1e-2
DEFAULT_OFFSET_STEP = 1e-1
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
SIGN_DEAD_ZONE = 1e-9


def _sign(x: np.ndarray) -> np.ndarray:
    """L1 subgradient with residuals at the floating-point noise floor
    treated as exact zeros (a numerically consistent start must not produce
    full-magnitude subgradient seeds from round-off dust)."""
    return np.where(np.abs(x) > SIGN_DEAD_ZONE, np.sign(x), 0.0)


# ---------------------------------------------------------------------------
# Losses

@dataclass(frozen=True)
class LossWeights:
    keyframe: float = 1e6
    atlas_tv: float = 1e3
    semantic: float = 1e3

    def __post_init__(self):
        if min(self.keyframe, self.atlas_tv, self.semantic) <= 0:
            raise ValueError("loss weights must be positive")


def loss_keyframe(rendered_k: np.ndarray, target_k: np.ndarray) -> float:
    """Mean absolute difference over all pixels and channels."""
    rendered_k = np.asarray(rendered_k, dtype=np.float64)
    target_k = np.asarray(target_k, dtype=np.float64)
    if rendered_k.shape != target_k.shape:
        raise ValueError(f"shape mismatch {rendered_k.shape} vs {target_k.shape}")
    return float(np.abs(rendered_k - target_k).mean())


def loss_tv(atlas: np.ndarray) -> float:
    """Total variation: mean over pixels of |horizontal diff| + |vertical
    diff|, summed over channels."""
    atlas = np.asarray(atlas, dtype=np.float64)
    if atlas.size == 0:
        raise ValueError("empty raster")
    img = atlas if atlas.ndim == 3 else atlas[..., None]
    h, w = img.shape[:2]
    dh = np.abs(img[:, 1:] - img[:, :-1]).sum()
    dv = np.abs(img[1:, :] - img[:-1, :]).sum()
    return float((dh + dv) / (h * w))


def loss_tv_gradient(atlas: np.ndarray) -> np.ndarray:
    img = atlas if atlas.ndim == 3 else atlas[..., None]
    h, w = img.shape[:2]
    grad = np.zeros_like(img)
    sh = _sign(img[:, 1:] - img[:, :-1])
    grad[:, 1:] += sh
    grad[:, :-1] -= sh
    sv = _sign(img[1:, :] - img[:-1, :])
    grad[1:, :] += sv
    grad[:-1, :] -= sv
    grad /= (h * w)
    return grad if atlas.ndim == 3 else grad[..., 0]


def loss_semantic(deformed_target_mask: np.ndarray, source_mask: np.ndarray) -> float:
    """Mean absolute difference between the deformed target mask and the
    source mask."""
    a = np.asarray(deformed_target_mask, dtype=np.float64)
    b = np.asarray(source_mask, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.abs(a - b).mean())


def weighted_total(l_k: float, l_a: float, l_sc: float,
                   weights: LossWeights = LossWeights()) -> float:
    return weights.keyframe * l_k + weights.atlas_tv * l_a + weights.semantic * l_sc


# ---------------------------------------------------------------------------
# State

@dataclass(frozen=True)
class OptimizationState:
    appearance_residual: np.ndarray   # (Ha, Wa, 3)
    deformation_residual: np.ndarray  # (Ha, Wa, 2)
    control_offsets: np.ndarray       # (n_ctrl, 2)
    weights: LossWeights = LossWeights()
    step_size: float = DEFAULT_STEP_SIZE
    iteration: int = 0

    def __post_init__(self):
        for name in ("appearance_residual", "deformation_residual", "control_offsets"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class StateGradient:
    appearance_residual: np.ndarray
    deformation_residual: np.ndarray
    control_offsets: np.ndarray

    def norm(self) -> float:
        return float(np.sqrt(
            (self.appearance_residual ** 2).sum()
            + (self.deformation_residual ** 2).sum()
            + (self.control_offsets ** 2).sum()))


# ---------------------------------------------------------------------------
# Guidance providers

def _check_guidance_raster(raster, rendered: np.ndarray, j: int) -> np.ndarray:
    raster = np.asarray(raster, dtype=np.float64)
    if raster.shape != rendered.shape:
        raise GuidanceContractError(
            f"frame {j}: guidance shape {raster.shape} != rendered {rendered.shape}")
    if not np.all(np.isfinite(raster)):
        raise GuidanceContractError(f"frame {j}: guidance contains non-finite values")
    return raster


def guidance_zero():
    """Provider contributing nothing (pure constraint-driven refinement)."""
    def provider(rendered: np.ndarray, j: int) -> np.ndarray:
        return np.zeros_like(rendered)
    return provider


def guidance_target_image(reference_frames: dict[int, np.ndarray]):
    """Provider pulling each rendered frame toward a fixed reference:
    the gradient of 0.5 * ||rendered - reference||^2."""
    refs = {int(j): np.asarray(img, dtype=np.float64)
            for j, img in reference_frames.items()}

    def provider(rendered: np.ndarray, j: int) -> np.ndarray:
        if j not in refs:
            raise GuidanceContractError(f"no reference frame for index {j}")
        if refs[j].shape != rendered.shape:
            raise GuidanceContractError(
                f"frame {j}: reference shape {refs[j].shape} != {rendered.shape}")
        return rendered - refs[j]
    return provider


def guidance_http(url: str, timeout: float = 10.0):
    """Provider round-tripping frames to an external scorer: POST /guidance
    with an LWF1-encoded frame and frame-index header, LWF1 gradient back."""
    endpoint = url.rstrip("/") + "/guidance"

    def provider(rendered: np.ndarray, j: int) -> np.ndarray:
        try:
            resp = requests.post(
                endpoint, data=lwf_to_bytes(rendered),
                headers={"X-Frame-Index": str(j),
                         "Content-Type": "application/octet-stream"},
                timeout=timeout)
        except requests.RequestException as exc:
            raise GuidanceContractError(f"guidance request failed: {exc}") from exc
        if not (200 <= resp.status_code < 300):
            raise GuidanceContractError(
                f"guidance endpoint returned {resp.status_code}")
        try:
            raster, _ = lwf_from_bytes(resp.content)
        except ValueError as exc:
            raise GuidanceContractError(f"bad guidance payload: {exc}") from exc
        return raster
    return provider


def select_frames(n_frames: int, keyframe: int, count: int = 3) -> list[int]:
    """Uniform spread always containing the first frame, the keyframe, and
    the last frame."""
    if count < 1:
        raise ValueError("need at least one frame")
    chosen = {1, keyframe, n_frames}
    for t in np.linspace(1, n_frames, count):
        if len(chosen) >= count:
            break
        chosen.add(int(round(t)))
    ordered = sorted(chosen)
    while len(ordered) > max(count, 3):
        ordered.remove(next(f for f in ordered if f not in (1, keyframe, n_frames)))
    return ordered


# ---------------------------------------------------------------------------
# Fixed-position bilinear gather (positions never depend on the parameters)

class _Gather:
    def __init__(self, image_shape_hw: tuple[int, int], positions: np.ndarray,
                 border: str):
        dummy = np.zeros(image_shape_hw)
        _, cache = _bilinear(dummy, positions, border, with_cache=True)
        self._cache = cache
        self._hw = image_shape_hw
        self._out_shape = positions.shape[:-1]

    def pull(self, image: np.ndarray) -> np.ndarray:
        c = self._cache
        flat = image.reshape(self._hw[0] * self._hw[1], -1)
        out = np.zeros(c["idx"][0].shape + (flat.shape[1],))
        for wk, ik, mk in zip(c["weights"], c["idx"], c["masks"]):
            out += flat[ik] * (wk * mk)[..., None]
        if image.ndim == 2:
            return out[..., 0]
        return out

    def push(self, seed: np.ndarray) -> np.ndarray:
        c = self._cache
        channels = 1 if seed.ndim == len(self._out_shape) else seed.shape[-1]
        flat_seed = seed.reshape(-1, channels)
        grad = np.zeros((self._hw[0] * self._hw[1], channels))
        for wk, ik, mk in zip(c["weights"], c["idx"], c["masks"]):
            np.add.at(grad, ik.ravel(), flat_seed * (wk * mk).reshape(-1, 1))
        if channels == 1 and seed.ndim == len(self._out_shape):
            return grad.reshape(self._hw)
        return grad.reshape(self._hw + (channels,))


def _mat_vec(mats: np.ndarray, vecs: np.ndarray) -> np.ndarray:
    return np.einsum("hwij,hwj->hwi", mats, vecs)


def _mat_t_vec(mats: np.ndarray, vecs: np.ndarray) -> np.ndarray:
    return np.einsum("hwji,hwj->hwi", mats, vecs)


# ---------------------------------------------------------------------------
# Workspace: constants of (video, bundle, frames)

class Workspace:
    """Precomputed constants plus the differentiable forward/backward pass."""

    def __init__(self, video: LayeredVideo, bundle: EditBundle,
                 frames: list[int] | None = None,
                 corr_regularization: float = 0.0,
                 grid_stride: int | None = None,
                 inversion_regularization: float = DEFAULT_INVERSION_REG):
        if bundle.keyframe_index != video.keyframe_index:
            raise ValueError("bundle and video disagree on the keyframe")
        self.video = video
        self.bundle = bundle
        self.k = video.keyframe_index
        self.frames = list(frames) if frames else select_frames(
            video.n_frames, self.k, 3)
        for j in self.frames:
            video.check_frame_index(j)
        if self.k not in self.frames:
            self.frames.append(self.k)
            self.frames.sort()
        w, h = video.frame_size
        self.frame_hw = (h, w)
        self.grid_stride = grid_stride or inversion_stride(w, h)
        self.inversion_reg = inversion_regularization

        # initial correspondence and its linear rasterization
        tps0 = bundle.correspondence_tps(corr_regularization)
        self.ctrl_src = tps0.control_points_src
        self.ctrl_dst = tps0.control_points_dst
        self.corr_reg = corr_regularization
        self.grid_k = grid_coords(w, h)
        self.d_k_base = tps_to_field(tps0, w, h).values - self.grid_k
        self.basis = tps_raster_basis(self.ctrl_src, corr_regularization, w, h)

        # edited atlas base and initial atlas deformation, both frozen at the
        # initial correspondence (the residual grids refine them)
        self.atlas_base = build_edited_atlas(video, warp_edit_to_source(bundle))
        ah, aw = self.atlas_base.image.shape[:2]
        self.atlas_hw = (ah, aw)
        self.d_atlas_initial = push_through_warp(
            DeformationField(self.d_k_base),
            video.uv_frame_to_atlas[self.k - 1]).values

        # stage 2 and render constants per selected frame
        self.per_frame = {}
        for j in self.frames:
            uv = video.uv_atlas_to_frame[j - 1]
            jac = invert_jacobians(jacobian_of_field(uv))
            self.per_frame[j] = dict(
                gather2=_Gather(self.atlas_hw, uv.values, "clamp"),
                m2=jac.matrices, m2_valid=jac.validity,
                uv_image=uv.values,
                alpha=video.alpha[j - 1],
                bg=sample(uv, video.bg_atlas.image))

    # -- state helpers ------------------------------------------------------

    def initial_state(self, weights: LossWeights = LossWeights(),
                      step_size: float = DEFAULT_STEP_SIZE) -> OptimizationState:
        ah, aw = self.atlas_hw
        return OptimizationState(
            appearance_residual=np.zeros((ah, aw, 3)),
            deformation_residual=np.zeros((ah, aw, 2)),
            control_offsets=np.zeros_like(self.ctrl_src),
            weights=weights, step_size=step_size, iteration=0)

    # -- forward chain ------------------------------------------------------

    def _keyframe_deformation(self, state: OptimizationState) -> np.ndarray:
        h, w = self.frame_hw
        delta = (self.basis @ state.control_offsets).reshape(h, w, 2)
        return self.d_k_base + delta

    def _atlas_deformation(self, state: OptimizationState) -> np.ndarray:
        return self.d_atlas_initial + state.deformation_residual

    def _frame_deformation(self, j: int, d_atlas: np.ndarray) -> np.ndarray:
        pf = self.per_frame[j]
        pulled = pf["gather2"].pull(d_atlas)
        return np.where(pf["m2_valid"][..., None], _mat_vec(pf["m2"], pulled), pulled)

    def freeze(self, state: OptimizationState) -> dict:
        """Inversion geometry at the given iterate: exact inverse fields, their
        Jacobians, and the gather at the frozen inverse positions."""
        d_atlas = self._atlas_deformation(state)
        frozen = {"frames": {}}
        for j in self.frames:
            d_j = self._frame_deformation(j, d_atlas)
            inv_tps = invert_field_via_tps(
                as_sampling_field(DeformationField(d_j)),
                grid_stride=self.grid_stride,
                regularization=self.inversion_reg)
            h, w = self.frame_hw
            inv0 = tps_to_field(inv_tps, w, h).values
            jinv = jacobian_of_field(SamplingField(inv0)).matrices
            gather3 = _Gather(self.frame_hw, inv0, "clamp")
            frozen["frames"][j] = dict(
                inv0=inv0, jinv=jinv, gather3=gather3,
                d0_at_x0=gather3.pull(d_j))
        return frozen

    def evaluate(self, frozen: dict, state: OptimizationState) -> "ForwardPass":
        """Forward pass with frozen inversion geometry; exact at the freeze
        point, first-order in the deformation away from it."""
        h, w = self.frame_hw
        d_k = self._keyframe_deformation(state)
        d_atlas = self._atlas_deformation(state)

        raw_atlas = self.atlas_base.image + state.appearance_residual
        refined_atlas = np.clip(raw_atlas, 0.0, 1.0)
        clip_mask = (raw_atlas > 0.0) & (raw_atlas < 1.0)

        # semantic loss: target mask pulled back by the refined correspondence
        sc_pos = self.grid_k + d_k
        warped_mask, sc_cache = _bilinear(self.bundle.target_mask, sc_pos,
                                          "zero", with_cache=True)

        fp = ForwardPass(self, state)
        fp.d_k = d_k
        fp.d_atlas = d_atlas
        fp.refined_atlas = refined_atlas
        fp.clip_mask = clip_mask
        fp.warped_mask = warped_mask
        fp.sc_cache = sc_cache

        for j in self.frames:
            fz = frozen["frames"][j]
            pf = self.per_frame[j]
            d_j = self._frame_deformation(j, d_atlas)
            d_at_x0 = fz["gather3"].pull(d_j)
            inv_pos = fz["inv0"] - _mat_vec(fz["jinv"], d_at_x0 - fz["d0_at_x0"])

            uv_t, uv_cache = _bilinear(pf["uv_image"], inv_pos, "clamp",
                                       with_cache=True)
            alpha_raw, alpha_cache = _bilinear(pf["alpha"], inv_pos, "zero",
                                               with_cache=True)
            alpha_t = np.clip(alpha_raw, 0.0, 1.0)
            alpha_clip_mask = (alpha_raw > 0.0) & (alpha_raw < 1.0)
            fg, fg_cache = _bilinear(refined_atlas, uv_t, "clamp", with_cache=True)
            rendered = fg * alpha_t[..., None] + pf["bg"] * (1.0 - alpha_t[..., None])

            fp.frames[j] = dict(
                d_j=d_j, inv_pos=inv_pos, uv_t=uv_t, alpha_t=alpha_t,
                fg=fg, rendered=rendered,
                uv_cache=uv_cache, alpha_cache=alpha_cache, fg_cache=fg_cache,
                alpha_clip_mask=alpha_clip_mask)

        fp.l_k = loss_keyframe(fp.frames[self.k]["rendered"],
                               self.bundle.edited_keyframe)
        fp.l_a = loss_tv(refined_atlas)
        fp.l_sc = loss_semantic(warped_mask, self.bundle.source_mask)
        return fp

    def gradient(self, frozen: dict, fp: "ForwardPass",
                 guidance_rasters: dict[int, np.ndarray] | None = None
                 ) -> StateGradient:
        """Backward pass matching ``evaluate`` under the same freezing."""
        state = fp.state
        wts = state.weights
        h, w = self.frame_hw
        ah, aw = self.atlas_hw
        guidance_rasters = guidance_rasters or {}

        grad_app = np.zeros((ah, aw, 3))
        grad_def = np.zeros((ah, aw, 2))
        s_datlas = np.zeros((ah, aw, 2))
        s_dk = np.zeros((h, w, 2))

        # L_A
        grad_app += wts.atlas_tv * loss_tv_gradient(fp.refined_atlas)

        # L_SC
        n_mask = fp.warped_mask.size
        s_sc = wts.semantic * _sign(fp.warped_mask - self.bundle.source_mask) / n_mask
        s_dk += _bilinear_grad_positions(fp.sc_cache, s_sc)

        for j in self.frames:
            fr = fp.frames[j]
            fz = frozen["frames"][j]
            pf = self.per_frame[j]

            seed = np.zeros((h, w, 3))
            if j == self.k:
                n_k = fr["rendered"].size
                seed += wts.keyframe * _sign(
                    fr["rendered"] - self.bundle.edited_keyframe) / n_k
            if j in guidance_rasters:
                seed = seed + guidance_rasters[j]
            if not seed.any():
                continue

            a = fr["alpha_t"][..., None]
            s_fg = seed * a
            s_alpha = np.sum(seed * (fr["fg"] - pf["bg"]), axis=-1)

            # fg = bilinear(refined_atlas, uv_t)
            grad_app += _bilinear_scatter_image(fr["fg_cache"], s_fg)
            s_uvt = _bilinear_grad_positions(fr["fg_cache"], s_fg)

            # uv_t and alpha_t both read at inv_pos
            s_inv = _bilinear_grad_positions(fr["uv_cache"], s_uvt)
            s_inv += _bilinear_grad_positions(
                fr["alpha_cache"], s_alpha * fr["alpha_clip_mask"])

            # inv_pos = inv0 - Jinv (d_j(x0) - d0(x0))
            s_dsamp = -_mat_t_vec(fz["jinv"], s_inv)
            s_dj = fz["gather3"].push(s_dsamp)

            # d_j = M2 * gather2(d_atlas)
            s_pull2 = np.where(pf["m2_valid"][..., None],
                               _mat_t_vec(pf["m2"], s_dj), s_dj)
            s_datlas += pf["gather2"].push(s_pull2)

        # d_atlas = d_atlas_initial + deformation_residual
        grad_def += s_datlas

        # d_k = d_k_base + (basis @ offsets); only the mask loss reads d_k
        grad_off = self.basis.T @ s_dk.reshape(-1, 2)

        # appearance residual passes through the clip
        grad_app *= fp.clip_mask
        return StateGradient(grad_app, grad_def, grad_off)


class ForwardPass:
    """Intermediates of one ``Workspace.evaluate`` call."""

    def __init__(self, workspace: Workspace, state: OptimizationState):
        self.workspace = workspace
        self.state = state
        self.frames: dict[int, dict] = {}
        self.l_k = self.l_a = self.l_sc = 0.0

    @property
    def scalar(self) -> float:
        return weighted_total(self.l_k, self.l_a, self.l_sc, self.state.weights)

    def rendered(self, j: int) -> np.ndarray:
        return self.frames[j]["rendered"]

    def objective_with_guidance(self, guidance_rasters: dict[int, np.ndarray]) -> float:
        """Scalar used by the finite-difference contract: the weighted losses
        plus the guidance rasters dotted with the rendered frames."""
        total = self.scalar
        for j, g in guidance_rasters.items():
            total += float(np.sum(g * self.frames[j]["rendered"]))
        return total


def total_objective(state: OptimizationState, video: LayeredVideo,
                    bundle: EditBundle, frames: list[int], guidance
                    ) -> tuple[float, StateGradient]:
    """One forward/backward evaluation at ``state``; the scalar is the
    weighted analytic loss, the gradient additionally carries the injected
    guidance term."""
    ws = Workspace(video, bundle, frames)
    frozen = ws.freeze(state)
    fp = ws.evaluate(frozen, state)
    rasters = {j: _check_guidance_raster(guidance(fp.rendered(j), j),
                                         fp.rendered(j), j)
               for j in ws.frames}
    return fp.scalar, ws.gradient(frozen, fp, rasters)


# ---------------------------------------------------------------------------
# Optimization loop

def optimize(video: LayeredVideo, bundle: EditBundle,
             frames: list[int] | None = None,
             guidance=None,
             iterations: int = DEFAULT_ITERATIONS,
             step_size: float = DEFAULT_STEP_SIZE,
             offset_step_size: float = DEFAULT_OFFSET_STEP,
             weights: LossWeights = LossWeights(),
             workspace: Workspace | None = None
             ) -> tuple[OptimizationState, list[tuple]]:
    """Adaptive-moment descent from zero-initialized residuals and offsets.

    Returns the final state and a loss trace of (iteration, L_k, L_A, L_SC,
    weighted total) rows, one per iteration, evaluated before each step.
    """
    if iterations < 0:
        raise ValueError("iterations must be nonnegative")
    guidance = guidance or guidance_zero()
    ws = workspace or Workspace(video, bundle, frames)
    state = ws.initial_state(weights=weights, step_size=step_size)
    trace: list[tuple] = []
    if iterations == 0:
        return state, trace

    blocks = ("appearance_residual", "deformation_residual", "control_offsets")
    steps = {"appearance_residual": step_size,
             "deformation_residual": step_size,
             "control_offsets": offset_step_size}
    m = {b: np.zeros_like(getattr(state, b)) for b in blocks}
    v = {b: np.zeros_like(getattr(state, b)) for b in blocks}

    for it in range(iterations):
        frozen = ws.freeze(state)
        fp = ws.evaluate(frozen, state)
        total = fp.scalar
        if not np.isfinite(total):
            raise OptimizationDivergedError(it)
        trace.append((it, fp.l_k, fp.l_a, fp.l_sc, total))

        rasters = {}
        for j in ws.frames:
            rasters[j] = _check_guidance_raster(
                guidance(fp.rendered(j), j), fp.rendered(j), j)
        grad = ws.gradient(frozen, fp, rasters)

        updates = {}
        t = it + 1
        for b in blocks:
            g = getattr(grad, b)
            m[b] = ADAM_BETA1 * m[b] + (1 - ADAM_BETA1) * g
            v[b] = ADAM_BETA2 * v[b] + (1 - ADAM_BETA2) * g * g
            m_hat = m[b] / (1 - ADAM_BETA1 ** t)
            v_hat = v[b] / (1 - ADAM_BETA2 ** t)
            updates[b] = getattr(state, b) - steps[b] * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        state = replace(state, iteration=t, **updates)
    return state, trace


def render_refined(video: LayeredVideo, bundle: EditBundle,
                   state: OptimizationState,
                   grid_stride: int | None = None,
                   regularization: float = DEFAULT_INVERSION_REG
                   ) -> PropagationResult:
    """Re-run the propagation for every frame with the refined atlas
    appearance and deformation; at a zero state this reproduces
    ``propagate_edit`` exactly."""
    base = propagate_edit(video, bundle, grid_stride=grid_stride,
                          regularization=regularization)
    if not state.appearance_residual.any() and not state.deformation_residual.any():
        return base

    atlas_image = np.clip(base.edited_atlas.image + state.appearance_residual, 0, 1)
    atlas = AtlasLayer(atlas_image, base.edited_atlas.coverage)
    d_atlas = DeformationField(
        base.atlas_deformation.values + state.deformation_residual,
        valid=base.atlas_deformation.valid)

    frame_ds, uv_ts, alpha_ts, rendered = [], [], [], []
    for j in range(1, video.n_frames + 1):
        d_j = push_through_warp(d_atlas, video.uv_atlas_to_frame[j - 1])
        uv_t, alpha_t = deform_uv_and_alpha(
            video, d_j, j, grid_stride=base.inversion_grid_stride,
            regularization=base.inversion_regularization)
        frame_ds.append(d_j)
        uv_ts.append(uv_t)
        alpha_ts.append(alpha_t)
        rendered.append(np.clip(
            render_edited_frame(video, atlas, uv_t, alpha_t, j), 0, 1))

    fractions = tuple(0.0 if d.valid is None else float(1.0 - d.valid.mean())
                      for d in frame_ds)
    return PropagationResult(
        edited_atlas=atlas, atlas_deformation=d_atlas,
        per_frame_deformation=tuple(frame_ds), per_frame_uv_t=tuple(uv_ts),
        per_frame_alpha_t=tuple(alpha_ts), edited_frames=tuple(rendered),
        degenerate_fractions=fractions, warnings=base.warnings,
        inversion_grid_stride=base.inversion_grid_stride,
        inversion_regularization=base.inversion_regularization)
