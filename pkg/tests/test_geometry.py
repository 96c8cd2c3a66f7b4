import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import grad_check
from deepnrsfm.data import SynthConfig, generate
from deepnrsfm.diffmath import Tape, mul, sum_all, tensor
from deepnrsfm.errors import AllOccluded, DegenerateSpectrum, NonPositiveDepth
from deepnrsfm.geometry import (Camera, PoseEstimate, complete_rotation, is_rotation, project,
                                project_so3, project_stiefel_3x2, random_rotation,
                                recover_translation_orthogonal, recover_translation_perspective)


def test_project_examples():
    assert np.allclose(project(np.array([[2.0, 4.0, 4.0]]), Camera.PERSPECTIVE), [[0.5, 1.0]])
    assert np.array_equal(project(np.array([[1.0, 2.0, 3.0]]), "ortho"), [[1.0, 2.0]])
    with pytest.raises(NonPositiveDepth):
        project(np.array([[1.0, 1.0, 0.0]]), "persp")


def test_random_rotations_are_rotations(rng):
    for R in random_rotation(rng, 50):
        assert is_rotation(R)


def test_translation_single_visible_point():
    W = np.array([[0.3, -0.2], [9.0, 9.0]])
    rotated = np.array([[0.1, 0.2, 0.5], [0.4, 0.4, 0.4]])
    t = recover_translation_perspective(W, [1, 0], rotated, 2.0)
    # occluded point contributes its own x', y'
    assert np.allclose(t, [0.3 * 2.5 + 0.4, -0.2 * 2.5 + 0.4])
    only = recover_translation_perspective(W[:1], [1], rotated[:1], 2.0)
    assert np.allclose(only, [0.3 * 2.5, -0.2 * 2.5])
    with pytest.raises(AllOccluded):
        recover_translation_perspective(W, [0, 0], rotated, 2.0)


@pytest.mark.parametrize("occlusion", [0.0, 0.5])
def test_translation_recovers_generator_truth(occlusion):
    ds, truth = generate(SynthConfig(N=50, camera="persp", occlusion_rate=occlusion, seed=3))
    for n, rec in enumerate(ds.records):
        rotated = truth.S[n] @ truth.R[n]
        t = recover_translation_perspective(rec.points2d, rec.vis, rotated, truth.t[n, 2])
        assert np.abs(t - truth.t[n, :2]).max() < 1e-9


def test_translation_full_visibility_matches_back_projection_mean(rng):
    ds, truth = generate(SynthConfig(N=5, camera="persp", seed=4))
    W, rotated, tz = ds.records[0].points2d, truth.S[0] @ truth.R[0], truth.t[0, 2]
    mean_back = np.mean(W * (rotated[:, 2:] + tz), axis=0)
    assert np.allclose(recover_translation_perspective(W, np.ones(len(W)), rotated, tz),
                       mean_back, atol=1e-12)


def test_orthogonal_translation_recovers_truth():
    ds, truth = generate(SynthConfig(N=20, occlusion_rate=0.4, seed=5))
    for n, rec in enumerate(ds.records):
        t = recover_translation_orthogonal(rec.points2d, rec.vis, (truth.S[n] @ truth.R[n])[:, :2])
        assert np.abs(t - truth.t[n, :2]).max() < 1e-12


def test_object_centric_constraint():
    ds, truth = generate(SynthConfig(N=30, camera="persp", seed=6))
    for n, rec in enumerate(ds.records):
        assert np.abs(rec.gt3d.mean(axis=0) - truth.t[n]).max() < 1e-9
        pose = PoseEstimate(truth.S[n], truth.R[n], truth.t[n], truth.phi_L[n])
        assert np.abs(pose.camera_shape().mean(axis=0) - pose.t).max() < 1e-9


def test_perspective_approaches_orthogonal_far_away(rng):
    S = rng.standard_normal((15, 3))
    S -= S.mean(axis=0)
    r = np.linalg.norm(S, axis=1).max()
    d = 1e4 * r
    cam = S + [0, 0, d]
    persp = project(cam, "persp")
    ortho = project(cam, "ortho") / d
    assert np.linalg.norm(persp - ortho) / np.linalg.norm(ortho) < 1e-3


def test_project_so3_examples(rng):
    assert np.allclose(project_so3(np.eye(3)), np.eye(3), atol=1e-15)
    R0 = random_rotation(rng)
    assert np.allclose(project_so3(2 * R0), R0, atol=1e-13)


def test_project_so3_beats_random_rotations(rng):
    A = rng.standard_normal((3, 3))
    R = project_so3(A)
    best = np.linalg.norm(A - R)
    samples = random_rotation(rng, 100_000)
    assert np.all(np.linalg.norm(A - samples, axis=(1, 2)) >= best - 1e-12)


def test_project_stiefel_examples(rng):
    E = np.eye(3)[:, :2]
    assert np.allclose(project_stiefel_3x2(E), E, atol=1e-15)
    Q = random_rotation(rng)[:, :2]
    assert np.allclose(project_stiefel_3x2(3 * Q), Q, atol=1e-13)
    A = rng.standard_normal((3, 2))
    F = project_stiefel_3x2(A)
    frames = random_rotation(rng, 50_000)[:, :, :2]
    assert np.all(np.linalg.norm(A - frames, axis=(1, 2)) >= np.linalg.norm(A - F) - 1e-12)
    assert is_rotation(complete_rotation(F))


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, (3, 3), elements=st.floats(-10, 10)))
def test_project_so3_always_rotation(A):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateSpectrum)
        R = project_so3(A)
    assert is_rotation(R, 1e-9)


def test_projection_gradients_separated_spectrum(rng):
    A = np.diag([3.0, 2.0, 1.0]) + 0.1 * rng.standard_normal((3, 3))
    W = rng.standard_normal((3, 3))
    assert grad_check(lambda a: sum_all(mul(project_so3(a), W)), [A]) < 1e-3
    B = np.array([[3.0, 0.1], [0.2, 1.5], [0.3, -0.4]])
    W2 = rng.standard_normal((3, 2))
    assert grad_check(lambda a: sum_all(mul(project_stiefel_3x2(a), W2)), [B]) < 1e-3


def test_projection_gradient_with_reflection(rng):
    A = np.diag([3.0, 2.0, -1.0]) + 0.05 * rng.standard_normal((3, 3))
    W = rng.standard_normal((3, 3))
    assert grad_check(lambda a: sum_all(mul(project_so3(a), W)), [A]) < 1e-3


def test_degenerate_spectrum_uses_straight_through():
    A = np.diag([1.0, 1.0, -1.0])      # flip needed with a tie: not unique
    x = tensor(A, requires_grad=True)
    g_up = np.arange(9.0).reshape(3, 3)
    with pytest.warns(DegenerateSpectrum):
        with Tape() as tape:
            out = sum_all(mul(project_so3(x), g_up))
    g, = tape.gradient(out, [x])
    assert tape.find("project_so3")[0].meta["mode"] == "straight_through"
    assert np.array_equal(g, g_up) and np.all(np.isfinite(g))


def test_rank_deficient_stiefel_warns_and_is_finite():
    A = np.array([[1.0, 2.0], [0.0, 0.0], [0.0, 0.0]])
    x = tensor(A, requires_grad=True)
    with pytest.warns(DegenerateSpectrum):
        with Tape() as tape:
            out = sum_all(project_stiefel_3x2(x))
    assert np.all(np.isfinite(tape.gradient(out, [x])[0]))
    assert tape.find("project_stiefel_3x2")[0].meta["mode"] == "straight_through"


def test_zero_upstream_gives_zero_gradient(rng):
    x = tensor(rng.standard_normal((3, 3)), requires_grad=True)
    with Tape() as tape:
        R = project_so3(x)
    g, = tape.gradient(R, [x], seed=np.zeros((3, 3)))
    assert not g.any()


def test_batched_projection_modes_per_call(rng):
    A = np.stack([np.diag([3.0, 2.0, 1.0]), np.diag([1.0, 1.0, -1.0])])
    with pytest.warns(DegenerateSpectrum):
        with Tape() as tape:
            sum_all(project_so3(tensor(A, requires_grad=True)))
    assert list(tape.find("project_so3")[0].meta["mode"]) == ["closed_form", "straight_through"]
