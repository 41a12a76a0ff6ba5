import numpy as np
import pytest

from layerwarp import (DegenerateWarpError, SamplingField, WarpSolveError,
                       eval_tps, fit_tps, identity_field, invert_field_via_tps,
                       tps_to_field)
from layerwarp.tps import load_correspondence, save_correspondence

from oracles import (affine_apply, affine_invert, affine_sampling_values,
                     dense_tps_eval, dense_tps_reference)

CORNERS64 = np.array([(0, 0), (63, 0), (0, 63), (63, 63)], float)
FIVE_SRC = np.array([(0, 0), (10, 0), (0, 10), (10, 10), (5, 5)], float)
FIVE_DST = np.array([(0, 0), (10, 0), (0, 10), (10, 10), (5, 7)], float)
# frozen from the dense lstsq reference in oracles.py
FIVE_EVAL_CENTER = np.array([2.5, 3.6771414182523174])


def test_fit_identity_corners():
    tps = fit_tps(CORNERS64, CORNERS64, 0.0)
    assert np.allclose(tps.affine_part, [[1, 0, 0], [0, 1, 0]], atol=1e-9)
    assert np.allclose(tps.kernel_weights, 0.0, atol=1e-9)


def test_fit_translation_corners():
    tps = fit_tps(CORNERS64, CORNERS64 + [3.0, 0.0], 0.0)
    pts = np.array([(1.5, 2.5), (40, 10), (63, 63)], float)
    assert np.allclose(eval_tps(tps, pts), pts + [3.0, 0.0], atol=1e-9)
    assert np.allclose(tps.kernel_weights, 0.0, atol=1e-8)


def test_fit_five_point_matches_dense_reference():
    tps = fit_tps(FIVE_SRC, FIVE_DST, 0.0)
    w_ref, a_ref = dense_tps_reference(FIVE_SRC, FIVE_DST, 0.0)
    assert np.allclose(tps.kernel_weights, w_ref, atol=1e-8)
    assert np.allclose(eval_tps(tps, [(5, 5)]), [(5, 7)], atol=1e-6)
    assert np.allclose(eval_tps(tps, [(2.5, 2.5)]), [FIVE_EVAL_CENTER], atol=1e-6)
    assert np.allclose(dense_tps_eval(FIVE_SRC, w_ref, a_ref, [(2.5, 2.5)]),
                       [FIVE_EVAL_CENTER], atol=1e-9)


def test_interpolation_reproduces_all_controls():
    rng = np.random.default_rng(11)
    src = rng.uniform(0, 60, size=(9, 2))
    dst = src + rng.normal(0, 2.0, size=(9, 2))
    tps = fit_tps(src, dst, 0.0)
    assert np.max(np.abs(eval_tps(tps, src) - dst)) < 1e-6


def test_side_conditions():
    rng = np.random.default_rng(3)
    src = rng.uniform(0, 40, size=(7, 2))
    dst = src + rng.normal(0, 3.0, size=(7, 2))
    tps = fit_tps(src, dst, 0.0)
    w = tps.kernel_weights
    assert np.all(np.abs(w.sum(axis=0)) < 1e-8)
    assert np.all(np.abs(src.T @ w) < 1e-8)


def test_affine_set_has_no_kernel_weights():
    mat = np.array([[1.1, 0.2, -3.0], [-0.1, 0.9, 5.0]])
    rng = np.random.default_rng(5)
    src = rng.uniform(0, 50, size=(8, 2))
    tps = fit_tps(src, affine_apply(mat, src), 0.0)
    assert np.max(np.abs(tps.kernel_weights)) < 1e-8
    assert np.allclose(tps.affine_part, mat, atol=1e-8)


def test_degenerate_configurations():
    with pytest.raises(DegenerateWarpError):
        fit_tps([(0, 0), (1, 1), (2, 2), (3, 3)], [(0, 0), (1, 1), (2, 2), (3, 3)])
    with pytest.raises(DegenerateWarpError):
        fit_tps([(0, 0), (0, 0), (1, 2)], [(0, 0), (0, 0), (1, 2)])
    with pytest.raises(DegenerateWarpError):
        fit_tps([(0, 0), (1, 1)], [(0, 0), (1, 1)])


def test_near_duplicate_raises_solver_or_degenerate():
    pts = np.array([(0, 0), (10, 0), (0, 10), (10, 10), (5, 5), (5, 5 + 2e-9)])
    with pytest.raises((WarpSolveError, DegenerateWarpError)):
        fit_tps(pts, pts, 0.0)


def test_eval_identity_and_translation():
    ident = fit_tps(CORNERS64, CORNERS64, 0.0)
    assert np.allclose(eval_tps(ident, [(7, 9)]), [(7, 9)], atol=1e-9)
    trans = fit_tps(CORNERS64, CORNERS64 + [3.0, 0.0], 0.0)
    assert np.allclose(eval_tps(trans, [(0, 0), (5, 5)]), [(3, 0), (8, 5)], atol=1e-9)


def test_eval_is_lipschitz_on_grid():
    tps = fit_tps(FIVE_SRC, FIVE_DST, 0.0)
    f = tps_to_field(tps, 24, 24).values
    assert np.all(np.isfinite(f))
    step_x = np.abs(np.diff(f, axis=1)).max()
    step_y = np.abs(np.diff(f, axis=0)).max()
    assert max(step_x, step_y) < 10.0  # finite local stretch on the domain


def test_tps_to_field_identity_and_translation():
    ident = fit_tps(CORNERS64, CORNERS64, 0.0)
    assert np.allclose(tps_to_field(ident, 4, 4).values, identity_field(4, 4).values,
                       atol=1e-9)
    trans = fit_tps(CORNERS64, CORNERS64 + [3.0, 0.0], 0.0)
    f = tps_to_field(trans, 2, 2).values
    expect = identity_field(2, 2).values + [3.0, 0.0]
    assert np.allclose(f, expect, atol=1e-9)


def test_tps_to_field_matches_pointwise_eval():
    tps = fit_tps(FIVE_SRC, FIVE_DST, 0.0)
    f = tps_to_field(tps, 11, 11)
    for y in range(11):
        for x in range(11):
            assert np.allclose(f.values[y, x], eval_tps(tps, [(x, y)])[0], atol=1e-9)


def test_tps_to_field_rejects_empty_grid():
    tps = fit_tps(CORNERS64, CORNERS64, 0.0)
    with pytest.raises(ValueError):
        tps_to_field(tps, 0, 4)


def test_invert_identity_field():
    inv = invert_field_via_tps(identity_field(32, 32), grid_stride=8)
    pts = np.array([(0, 0), (10.5, 3.25), (31, 31)])
    assert np.max(np.abs(eval_tps(inv, pts) - pts)) < 1e-9


def test_invert_translation_field():
    f = SamplingField(identity_field(32, 32).values + [5.0, 0.0])
    inv = invert_field_via_tps(f, grid_stride=8)
    grid = identity_field(32, 32).values.reshape(-1, 2)
    round_trip = eval_tps(inv, f.values.reshape(-1, 2))
    assert np.max(np.abs(round_trip - grid)) < 1e-6


def test_invert_affine_field_matches_closed_form_inverse():
    mat = np.array([[1.25, 0.0, -4.0], [0.0, 1.0, 0.0]])
    f = SamplingField(affine_sampling_values(mat, 64, 64))
    inv = invert_field_via_tps(f, grid_stride=8)
    samples = f.values[::8, ::8].reshape(-1, 2)
    grid = identity_field(64, 64).values[::8, ::8].reshape(-1, 2)
    assert np.max(np.abs(eval_tps(inv, samples) - grid)) < 1e-4
    probe = np.array([(3.7, 9.1), (50.2, 33.3)])
    assert np.allclose(eval_tps(inv, probe), affine_apply(affine_invert(mat), probe),
                       atol=1e-6)


def test_invert_random_affine_fields_round_trip():
    rng = np.random.default_rng(7)
    for _ in range(5):
        lin = np.eye(2) + rng.normal(0, 0.15, size=(2, 2))
        mat = np.hstack([lin, rng.normal(0, 4, size=(2, 1))])
        f = SamplingField(affine_sampling_values(mat, 48, 40))
        inv = invert_field_via_tps(f)
        samples = f.values.reshape(-1, 2)
        grid = identity_field(48, 40).values.reshape(-1, 2)
        assert np.max(np.abs(eval_tps(inv, samples) - grid)) < 1e-4


def test_invert_constant_field_is_degenerate():
    f = SamplingField(np.full((16, 16, 2), 3.0))
    with pytest.raises(DegenerateWarpError):
        invert_field_via_tps(f, grid_stride=4)


def test_correspondence_file_round_trip(tmp_path):
    src = np.array([(0, 0), (10, 0), (0, 10), (5.5, 4.25)])
    dst = src + [1.0, -2.0]
    path = tmp_path / "correspondence.json"
    save_correspondence(path, src, dst)
    src2, dst2 = load_correspondence(path)
    assert np.allclose(src, src2)
    assert np.allclose(dst, dst2)
    tps = fit_tps(src2, dst2, 0.0)
    assert np.allclose(eval_tps(tps, [(2, 2)]), [(3, 0)], atol=1e-8)


def test_correspondence_file_rejects_garbage(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('[{"src": [0, 0]}]')
    with pytest.raises(ValueError):
        load_correspondence(path)
