import numpy as np
import pytest

from layerwarp.errors import PipelineError
from layerwarp.field import (DeformationField, as_sampling_field, grid_coords,
                             sample, scale_deformation)
from layerwarp.layers import EditBundle, render_frame
from layerwarp.propagate import (build_edited_atlas, deform_uv_and_alpha,
                                 interpolate_shape, is_identity_bundle,
                                 propagate_deformation, propagate_edit,
                                 warp_edit_to_source)
from layerwarp.synth import (apply_affine, generate_scene, identity_bundle,
                             scene_s1, scene_s2, translation)


def fg_support(video, j):
    return video.alpha[j - 1] > 0.5


def test_warp_edit_identity(s1):
    video, _, oracle = s1
    bundle = identity_bundle(video, oracle)
    out = warp_edit_to_source(bundle)
    assert np.abs(out - bundle.edited_keyframe).max() < 1e-9


def test_warp_edit_translation_recovers_source(s1):
    video, bundle, oracle = s1
    k = video.keyframe_index
    src = bundle.source_keyframe
    # edit moved the content right by 3, so the correspondence (source pos ->
    # target pos) is p -> p + (3, 0) and the warp recovers the source
    shifted = np.zeros_like(src)
    shifted[:, 3:] = src[:, :-3]
    pts = np.array([(5.0, 5.0), (40.0, 5.0), (5.0, 40.0), (40.0, 40.0)])
    b = EditBundle(k, src, shifted, bundle.source_mask, bundle.source_mask.copy(),
                   (pts, pts + [3.0, 0.0]))
    out = warp_edit_to_source(b)
    assert np.abs(out[:, :45] - src[:, :45]).max() < 1e-9


def test_warp_edit_mask_iou_s1(s1):
    _, bundle, _ = s1
    assert bundle.correspondence_iou() > 0.99


def test_build_edited_atlas_no_edit(s1):
    video, _, oracle = s1
    k = video.keyframe_index
    atlas = build_edited_atlas(video, render_frame(video, k))
    diff = np.abs(atlas.image - video.fg_atlas.image)[atlas.coverage]
    assert diff.mean() < 3 / 255
    # motion exposes atlas area outside any one frame
    assert atlas.coverage.mean() < 1.0
    # uncovered pixels keep the original content
    assert np.array_equal(atlas.image[~atlas.coverage],
                          video.fg_atlas.image[~atlas.coverage])


def test_build_edited_atlas_recolor_lands_on_object(s1):
    video, bundle, oracle = s1
    warped = warp_edit_to_source(bundle)
    atlas = build_edited_atlas(video, warped)
    # strictly interior object pixels carry the recolored texture
    from scipy.ndimage import binary_erosion
    k = video.keyframe_index
    obj = oracle.spec.mask.contains(grid_coords(64, 64))
    interior = binary_erosion(obj, iterations=3) & atlas.coverage
    diff = np.abs(atlas.image - oracle.fg_recolored)[interior]
    assert diff.mean() < 2 / 255


def test_propagate_deformation_zero(s1):
    video, _, _ = s1
    zero = DeformationField(np.zeros((48, 48, 2)))
    atlas_d, frame_ds = propagate_deformation(video, zero)
    assert np.abs(atlas_d.values).max() < 1e-12
    for d in frame_ds:
        assert np.abs(d.values).max() < 1e-12


def test_propagate_deformation_translation_scene(s1):
    video, bundle, oracle = s1
    _, frame_ds = propagate_deformation(video, bundle.deformation_field())
    k = video.keyframe_index
    d_k = oracle.frame_deformation(k).values
    for j in range(1, video.n_frames + 1):
        # translation Jacobians are identity: vectors resample unchanged
        shift = 2.0 * (j - k)
        fg = fg_support(video, j)
        got = frame_ds[j - 1].values
        pts = grid_coords(48, 48) - [shift, 0.0]
        from layerwarp.field import _bilinear
        expect = _bilinear(d_k, pts.reshape(-1, 2), "clamp").reshape(48, 48, 2)
        assert np.abs(got - expect)[fg].max() < 1e-9


def test_propagate_deformation_matches_oracle(s1, s2):
    for video, bundle, oracle in (s1, s2):
        _, frame_ds = propagate_deformation(video, bundle.deformation_field())
        for j in range(1, video.n_frames + 1):
            d = frame_ds[j - 1]
            err = np.linalg.norm(d.values - oracle.frame_deformation(j).values,
                                 axis=-1)
            fg = fg_support(video, j)
            valid = fg if d.valid is None else (fg & d.valid)
            assert (err[valid] < 0.1).mean() >= 0.99
            assert err[valid].max() < 0.01


def test_deform_uv_alpha_zero_deformation(s1):
    video, _, _ = s1
    zero = DeformationField(np.zeros((48, 48, 2)))
    uv_t, alpha_t = deform_uv_and_alpha(video, zero, 3)
    assert np.abs(uv_t.values - video.uv_atlas_to_frame[2].values).max() < 1e-6
    assert np.abs(alpha_t - video.alpha[2]).max() < 1e-6


def test_deform_uv_alpha_translation_support():
    # constant t->s deformation (-5, 0): the target shape sits at the source
    # support displaced by the same (-5, 0), and alpha follows it
    video, bundle, oracle = generate_scene(scene_s1())
    j = 4
    d = DeformationField(np.tile([-5.0, 0.0], (48, 48, 1)))
    _, alpha_t = deform_uv_and_alpha(video, d, j)
    src = video.alpha[j - 1] > 0.5
    got = alpha_t > 0.5
    expect = np.zeros_like(src)
    expect[:, :-5] = src[:, 5:]
    agree = np.logical_and(got, expect).sum() / np.logical_or(got, expect).sum()
    assert agree > 0.95


def test_deform_uv_alpha_mask_iou_oracle(s2):
    video, bundle, oracle = s2
    _, frame_ds = propagate_deformation(video, bundle.deformation_field())
    for j in range(1, video.n_frames + 1):
        _, alpha_t = deform_uv_and_alpha(video, frame_ds[j - 1], j)
        got = alpha_t > 0.5
        expect = oracle.target_alpha(j) > 0.5
        iou = np.logical_and(got, expect).sum() / np.logical_or(got, expect).sum()
        assert iou > 0.95


def test_propagate_edit_no_edit_fixed_point(s1, s2):
    for video, _, oracle in (s1, s2):
        res = propagate_edit(video, identity_bundle(video, oracle))
        for j in range(1, video.n_frames + 1):
            err = np.abs(res.edited_frames[j - 1] - render_frame(video, j)).mean()
            assert err < 3 / 255


def test_propagate_edit_matches_oracle_renders(s2):
    video, bundle, oracle = s2
    res = propagate_edit(video, bundle)
    for j in range(1, video.n_frames + 1):
        support = oracle.target_alpha(j) > 0.5
        err = np.abs(res.edited_frames[j - 1] - oracle.target_frame(j))[support].mean()
        assert err < 4 / 255


def test_propagate_edit_keyframe_self_consistency(s1, s2):
    for video, bundle, oracle in (s1, s2):
        res = propagate_edit(video, bundle)
        k = video.keyframe_index
        support = bundle.target_mask > 0.5
        err = np.abs(res.edited_frames[k - 1] - bundle.edited_keyframe)[support].mean()
        assert err < 4 / 255


def test_propagate_edit_rejects_mismatched_keyframe(s1):
    video, bundle, _ = s1
    bad = EditBundle(1, bundle.source_keyframe, bundle.edited_keyframe,
                     bundle.source_mask, bundle.target_mask, bundle.correspondence)
    with pytest.raises(ValueError):
        propagate_edit(video, bad)


def test_propagate_error_carries_stage_name(s1):
    video, bundle, _ = s1
    src, dst = bundle.correspondence
    collinear = np.stack([np.linspace(0, 40, len(src)),
                          np.linspace(0, 40, len(src))], axis=-1)
    bad = EditBundle(video.keyframe_index, bundle.source_keyframe,
                     bundle.edited_keyframe, bundle.source_mask,
                     bundle.target_mask, (collinear, collinear))
    with pytest.raises(PipelineError) as err:
        propagate_edit(video, bad)
    assert "warp-edit" in str(err.value)


def test_interpolate_endpoints(s2):
    video, bundle, oracle = s2
    res = propagate_edit(video, bundle)
    ones = interpolate_shape(res, video, 1.0)
    for a, b in zip(ones, res.edited_frames):
        assert np.array_equal(a, b)
    zeros = interpolate_shape(res, video, 0.0)
    from layerwarp.layers import render_edited_frame
    for j in range(1, video.n_frames + 1):
        base = render_edited_frame(video, res.edited_atlas,
                                   video.uv_atlas_to_frame[j - 1],
                                   video.alpha[j - 1], j)
        assert np.abs(zeros[j - 1] - base).mean() < 1 / 255


def test_interpolate_rejects_bad_t(s2):
    video, bundle, _ = s2
    res = propagate_edit(video, bundle)
    with pytest.raises(ValueError):
        interpolate_shape(res, video, 1.5)


def test_interpolate_centroid_midpoint(s2):
    video, bundle, oracle = s2
    res = propagate_edit(video, bundle)

    def centroid_of_alpha(t, j):
        _, alpha_t = deform_uv_and_alpha(
            video, scale_deformation(res.per_frame_deformation[j - 1], t), j,
            grid_stride=res.inversion_grid_stride,
            regularization=res.inversion_regularization)
        m = alpha_t > 0.5
        ys, xs = np.nonzero(m)
        return np.array([xs.mean(), ys.mean()])

    for j in (1, 4, 8):
        c0 = centroid_of_alpha(0.0, j)
        c1 = centroid_of_alpha(1.0, j)
        ch = centroid_of_alpha(0.5, j)
        assert np.linalg.norm(ch - 0.5 * (c0 + c1)) < 0.5


def test_interpolate_monotone_support_area(s2):
    video, bundle, oracle = s2
    res = propagate_edit(video, bundle)
    j = video.keyframe_index
    areas = []
    for t in np.linspace(0, 1, 5):
        _, alpha_t = deform_uv_and_alpha(
            video, scale_deformation(res.per_frame_deformation[j - 1], t), j)
        areas.append((alpha_t > 0.5).sum())
    lo, hi = min(areas[0], areas[-1]), max(areas[0], areas[-1])
    for a in areas:
        assert lo - 2 <= a <= hi + 2


def test_degenerate_fraction_reporting(s1):
    video, bundle, _ = s1
    res = propagate_edit(video, bundle)
    assert len(res.degenerate_fractions) == video.n_frames
    assert max(res.degenerate_fractions) == 0.0
    assert res.warnings == ()


def test_is_identity_bundle(s1):
    video, bundle, oracle = s1
    assert is_identity_bundle(identity_bundle(video, oracle))
    assert not is_identity_bundle(bundle)


def test_propagate_threaded_matches_sequential(s1, monkeypatch):
    video, bundle, _ = s1
    seq = propagate_edit(video, bundle)
    monkeypatch.setenv("LW_THREADS", "4")
    par = propagate_edit(video, bundle)
    for a, b in zip(seq.edited_frames, par.edited_frames):
        assert np.array_equal(a, b)
