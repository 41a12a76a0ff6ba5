import json

import numpy as np
import pytest

from layerwarp.layers import render_frame
from layerwarp.synth import (MaskShape, SceneSpec, apply_affine, compose_affine,
                             generate_scene, identity_bundle, invert_affine,
                             rotation_about, scale_about, scene_s1, scene_s2,
                             spec_from_json, spec_to_json, translation)

from oracles import affine_compose, affine_invert


def test_affine_helpers_match_reference():
    rng = np.random.default_rng(0)
    a = np.hstack([np.eye(2) + rng.normal(0, 0.2, (2, 2)), rng.normal(0, 3, (2, 1))])
    b = np.hstack([np.eye(2) + rng.normal(0, 0.2, (2, 2)), rng.normal(0, 3, (2, 1))])
    assert np.allclose(compose_affine(a, b), affine_compose(a, b))
    assert np.allclose(invert_affine(a), affine_invert(a))
    pts = rng.normal(0, 10, (5, 2))
    assert np.allclose(apply_affine(compose_affine(a, invert_affine(a)), pts), pts,
                       atol=1e-9)


def test_rotation_and_scale_constructors():
    rot = rotation_about(90.0, (2.0, 2.0))
    assert np.allclose(apply_affine(rot, [(2, 2)]), [(2, 2)], atol=1e-12)
    assert np.allclose(apply_affine(rot, [(3, 2)]), [(2, 3)], atol=1e-12)
    sc = scale_about(2.0, 1.0, (5.0, 0.0))
    assert np.allclose(apply_affine(sc, [(5, 7)]), [(5, 7)])
    assert np.allclose(apply_affine(sc, [(6, 7)]), [(7, 7)])


def test_scene_reconstruction_oracle(s1, s2):
    for video, _, oracle in (s1, s2):
        for j in range(1, video.n_frames + 1):
            err = np.abs(render_frame(video, j) - oracle.source_frame(j)).mean()
            assert err < 2 / 255


def test_scene_reconstruction_on_other_textures():
    for kind in ("noise", "checker"):
        spec = scene_s1(texture_kind=kind, texture_seed=3)
        video, bundle, oracle = generate_scene(spec)
        for j in (1, 4, 8):
            err = np.abs(render_frame(video, j) - oracle.source_frame(j)).mean()
            assert err < 2 / 255


def test_identity_edit_bundle(s1):
    video, _, oracle = s1
    bundle = identity_bundle(video, oracle)
    assert np.array_equal(bundle.source_keyframe, bundle.edited_keyframe)
    d = bundle.deformation_field()
    assert np.abs(d.values).max() < 1e-9


def test_oracle_keyframe_deformation_is_edit(s1):
    video, bundle, oracle = s1
    k = video.keyframe_index
    d = oracle.frame_deformation(k)
    spec = oracle.spec
    from layerwarp.field import grid_coords
    w, h = spec.frame_size
    pts = grid_coords(w, h)
    expect = apply_affine(spec.edit, pts) - pts
    assert np.allclose(d.values, expect, atol=1e-9)


def test_oracle_zero_for_identity_edit(s1):
    video, _, oracle = s1
    from dataclasses import replace
    from layerwarp.synth import AffineOracle
    spec = replace(oracle.spec, edit=np.array([[1.0, 0, 0], [0, 1.0, 0]]),
                   recolor="none")
    ident = AffineOracle(spec, oracle.fg_texture, oracle.bg_texture, oracle.alphas)
    for j in (1, 5, 8):
        assert np.abs(ident.frame_deformation(j).values).max() < 1e-9
        assert np.allclose(ident.target_frame(j), ident.source_frame(j), atol=1e-12)


def test_oracle_s2_composition_matches_matrices(s2):
    video, bundle, oracle = s2
    j = 7
    spec = oracle.spec
    k = spec.keyframe_index
    h_ref = affine_compose(
        spec.motions[j - 1],
        affine_compose(affine_invert(spec.motions[k - 1]),
                       affine_compose(spec.edit,
                                      affine_compose(spec.motions[k - 1],
                                                     affine_invert(spec.motions[j - 1])))))
    assert np.allclose(oracle.frame_map(j), h_ref, atol=1e-10)


def test_correspondence_matches_oracle_on_mask(s1, s2):
    for video, bundle, oracle in (s1, s2):
        k = video.keyframe_index
        d_corr = bundle.deformation_field()
        d_oracle = oracle.frame_deformation(k)
        on_mask = bundle.source_mask > 0.5
        err = np.linalg.norm(d_corr.values - d_oracle.values, axis=-1)[on_mask]
        assert err.max() < 1e-6


def test_target_area_ratio_s1(s1):
    video, bundle, oracle = s1
    k = video.keyframe_index
    src_area = (video.alpha[k - 1] > 0.5).sum()
    tgt_area = (oracle.target_alpha(k) > 0.5).sum()
    assert abs(tgt_area / src_area - 1.25) < 0.03 * 1.25


def test_scene_determinism():
    a = generate_scene(scene_s2())
    b = generate_scene(scene_s2())
    assert np.array_equal(a[0].fg_atlas.image, b[0].fg_atlas.image)
    assert np.array_equal(a[1].edited_keyframe, b[1].edited_keyframe)
    for j in range(a[0].n_frames):
        assert np.array_equal(a[0].alpha[j], b[0].alpha[j])
        assert np.array_equal(a[0].uv_atlas_to_frame[j].values,
                              b[0].uv_atlas_to_frame[j].values)


def test_spec_rejects_singular_motion():
    with pytest.raises(ValueError):
        SceneSpec(frame_size=(16, 16), frame_count=2,
                  motions=(translation(0, 0), np.zeros((2, 3))),
                  keyframe_index=1,
                  edit=translation(1, 0),
                  mask=MaskShape("disk", (8, 8), 3))


def test_spec_json_round_trip(tmp_path):
    spec = scene_s2()
    data = spec_to_json(spec)
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(data))
    spec2 = spec_from_json(json.loads(path.read_text()))
    a = generate_scene(spec)
    b = generate_scene(spec2)
    assert np.array_equal(a[0].fg_atlas.image, b[0].fg_atlas.image)
    for j in range(8):
        assert np.array_equal(a[0].alpha[j], b[0].alpha[j])
    assert np.array_equal(a[1].target_mask, b[1].target_mask)


def test_spec_json_presets():
    data = {
        "frame_size": [32, 32], "frame_count": 4, "keyframe": 2,
        "motion": {"kind": "rotate-translate", "step": [1, 0], "degrees": 3,
                   "pivot": [12, 12]},
        "edit": {"scale": [1.1, 1.0], "about": [13, 12]},
        "mask": {"shape": "disk", "center": [12, 12], "radius": 6},
        "atlas_size": [40, 40],
    }
    spec = spec_from_json(data)
    video, bundle, oracle = generate_scene(spec)
    assert video.n_frames == 4
    assert video.fg_atlas.image.shape == (40, 40, 3)


def test_mask_shapes():
    disk = MaskShape("disk", (5, 5), 3)
    assert disk.contains(np.array([(5, 5)]))[0]
    assert not disk.contains(np.array([(9, 5)]))[0]
    rect = MaskShape("rounded-rect", (5, 5), 1.0, half_size=(3, 2))
    assert rect.contains(np.array([(7.5, 5)]))[0]
    assert not rect.contains(np.array([(8.5, 5)]))[0]
    blob = MaskShape("blob", (5, 5), 3, seed=2)
    inside = blob.contains(np.array([(5, 5)]))
    assert inside[0]
