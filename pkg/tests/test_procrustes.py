import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boxcalib.geometry import (Intrinsics, RigidPose, VertexMap, axis_angle, deproject,
                               random_rotation, rotation_angle)
from boxcalib.procrustes import (Correspondences, DegenerateConfigurationError,
                                 alignment_residual, hard_correspondences, kabsch, loss_3d,
                                 one_hot, soft_correspondences)

from _util import loss3d_fd_error, loss3d_problems, random_prob_map, rendered_views

seeds = st.integers(0, 2**32 - 1)


def soft_oracle(probs, vm, eps=1e-6):
    """Triple loop over classes, rows and columns."""
    kp1, h, w = probs.shape
    c = np.zeros((3, kp1 - 1))
    valid = np.zeros(kp1 - 1, dtype=bool)
    for k in range(1, kp1):
        num = np.zeros(3)
        mass = 0.0
        for i in range(h):
            for j in range(w):
                if vm.valid[i, j]:
                    num += probs[k, i, j] * vm.points[:, i, j]
                    mass += probs[k, i, j]
        if mass >= eps:
            c[:, k - 1] = num / mass
            valid[k - 1] = True
    return c, valid


def test_soft_correspondences_match_triple_loop():
    rng = np.random.default_rng(0)
    model, views = rendered_views(3, 20, 15, seed=1)
    for pose, k, depth, labels in views:
        probs = random_prob_map(labels, model.num_classes, rng)
        vm = deproject(depth, k)
        corr = soft_correspondences(probs, vm)
        c, valid = soft_oracle(probs, vm)
        assert np.array_equal(corr.valid, valid)
        assert np.abs(corr.points - c).max() < 1e-12


def test_soft_correspondences_hand_example():
    # 1 x 3 image, background + 2 sides; the middle pixel has no depth
    pts = np.array([[[0.0, 9.0, 2.0]], [[0.0, 9.0, 0.0]], [[1.0, 0.0, 3.0]]])
    vm = VertexMap(pts, np.array([[True, False, True]]))
    probs = np.array([
        [[0.5, 0.2, 0.0]],
        [[0.5, 0.8, 0.25]],   # side 1: weights 0.5 and 0.25
        [[0.0, 0.0, 0.75]],   # side 2: only the last pixel
    ])
    corr = soft_correspondences(probs, vm)
    # (0.5 * (0, 0, 1) + 0.25 * (2, 0, 3)) / 0.75
    assert np.allclose(corr.points[:, 0], [2 / 3, 0.0, 5 / 3])
    assert np.allclose(corr.points[:, 1], [2.0, 0.0, 3.0])
    assert corr.valid.tolist() == [True, True]


def test_soft_correspondences_flag_low_mass():
    vm = VertexMap(np.ones((3, 1, 2)), np.array([[True, True]]))
    # side 1 mass 1.2e-6 clears the threshold, side 2 mass 8e-7 does not
    probs = np.array([[[1.0, 1.0]], [[6e-7, 6e-7]], [[4e-7, 4e-7]]])
    corr = soft_correspondences(probs, vm)
    assert corr.valid.tolist() == [True, False]
    assert np.all(corr.points[:, 1] == 0)


def test_soft_correspondences_reject_misregistered_maps():
    vm = VertexMap(np.ones((3, 2, 2)), np.ones((2, 2), bool))
    with pytest.raises(ValueError):
        soft_correspondences(np.ones((3, 2, 3)), vm)


def test_one_hot_consistency_on_rendered_views():
    model, views = rendered_views(10, 64, 48, seed=4)
    for pose, k, depth, labels in views:
        vm = deproject(depth, k)
        soft = soft_correspondences(one_hot(labels, model.num_classes), vm)
        hard, _ = hard_correspondences(labels, vm, model.num_classes)
        assert np.array_equal(soft.valid, hard.valid)
        assert np.abs(soft.points - hard.points).max() < 1e-12


def test_hard_correspondences_visibility_threshold():
    labels = np.array([[1, 1, 1, 2]])
    vm = VertexMap(np.arange(12, dtype=float).reshape(3, 1, 4), np.ones((1, 4), bool))
    corr, mask = hard_correspondences(labels, vm, 4, min_pixels=2)
    assert corr.valid.tolist() == [True, True, False]
    assert mask[0].tolist() == [1, 0, 0]
    assert np.allclose(corr.points[:, 0], [1.0, 5.0, 9.0])


# --------------------------------------------------------------------------
# Kabsch


def _construction(rng, k=21, visible=None):
    s = rng.uniform(-1, 1, size=(3, k))
    truth = RigidPose(random_rotation(rng), rng.uniform(-3, 3, size=3))
    c = truth.rotation.T @ (s - truth.translation[:, None])  # camera-space keypoints
    vis = np.zeros(k)
    idx = rng.choice(k, size=visible or k, replace=False)
    vis[idx] = 1
    return c, s, np.repeat(vis[None], 3, axis=0), truth


@settings(max_examples=200, deadline=None)
@given(seeds, st.integers(3, 21))
def test_kabsch_recovers_exact_pose(seed, visible):
    rng = np.random.default_rng(seed)
    c, s, mask, truth = _construction(rng, visible=visible)
    # invisible columns carry garbage that must be ignored
    c[:, mask[0] == 0] = rng.normal(size=(3, int((mask[0] == 0).sum()))) * 100
    est = kabsch(c, s, mask)
    assert rotation_angle(est.rotation @ truth.rotation.T) < 1e-9
    assert np.linalg.norm(est.translation - truth.translation) < 1e-9


def test_kabsch_needs_three_non_collinear_points():
    rng = np.random.default_rng(0)
    c, s, mask, _ = _construction(rng, visible=2)
    with pytest.raises(DegenerateConfigurationError, match="need 3"):
        kabsch(c, s, mask)
    line = np.outer([1.0, 2.0, 3.0], np.arange(4.0))
    with pytest.raises(DegenerateConfigurationError, match="collinear"):
        kabsch(line, rng.normal(size=(3, 4)), np.ones((3, 4)))


def test_kabsch_respects_correspondence_validity():
    rng = np.random.default_rng(5)
    c, s, mask, truth = _construction(rng, k=6)
    valid = np.array([True, True, True, True, False, False])
    c[:, ~valid] = 0.0
    est = kabsch(Correspondences(c, valid), s, mask)
    assert rotation_angle(est.rotation @ truth.rotation.T) < 1e-9


def euler_zyz(a, b, g):
    def rz(t):
        return np.array([[np.cos(t), -np.sin(t), 0], [np.sin(t), np.cos(t), 0], [0, 0, 1]])

    def ry(t):
        return np.array([[np.cos(t), 0, np.sin(t)], [0, 1, 0], [-np.sin(t), 0, np.cos(t)]])

    return rz(a) @ ry(b) @ rz(g)


def grid_best_rotation(c_hat, s_hat):
    """Coarse ZYZ Euler grid (10 deg) refined by a 1 deg local grid."""
    def cost(rs):
        return ((s_hat[None] - rs @ c_hat[None]) ** 2).sum(axis=(1, 2))

    coarse = np.radians(np.arange(0, 360, 10))
    tilt = np.radians(np.arange(0, 181, 10))
    rs = np.array([euler_zyz(a, b, g) for a in coarse for b in tilt for g in coarse])
    best = rs[np.argmin(cost(rs))]
    fine = np.radians(np.arange(-10, 11, 1))
    local = np.array([axis_angle([1, 0, 0], x) @ axis_angle([0, 1, 0], y) @ axis_angle([0, 0, 1], z)
                      for x in fine for y in fine for z in fine])
    rs = local @ best
    costs = cost(rs)
    return rs[np.argmin(costs)], costs.min()


def test_kabsch_reflection_case_against_rotation_grid():
    rng = np.random.default_rng(7)
    s = rng.uniform(-1, 1, size=(3, 8))
    s[2] *= 0.3
    # mirror image plus noise: the best orthogonal map is a reflection
    c = np.diag([1.0, 1.0, -1.0]) @ s + 0.01 * rng.normal(size=s.shape)
    c_hat = c - c.mean(axis=1, keepdims=True)
    s_hat = s - s.mean(axis=1, keepdims=True)
    u, _, vt = np.linalg.svd(c_hat @ s_hat.T)
    assert np.linalg.det(vt.T @ u.T) < 0  # the unconstrained solution is improper

    est = kabsch(c, s, np.ones((3, 8)))
    assert np.isclose(np.linalg.det(est.rotation), 1.0)
    r_grid, grid_cost = grid_best_rotation(c_hat, s_hat)
    est_cost = ((s_hat - est.rotation @ c_hat) ** 2).sum()
    assert est_cost <= grid_cost + 1e-12
    assert np.degrees(rotation_angle(est.rotation @ r_grid.T)) < 1.5


def test_alignment_residual_zero_for_exact_pose():
    rng = np.random.default_rng(1)
    c, s, mask, truth = _construction(rng)
    assert alignment_residual(c, s, mask, truth) < 1e-12


# --------------------------------------------------------------------------
# 3D loss


def test_loss_value_matches_kabsch_residual():
    for probs, vm, s, mask in loss3d_problems(5, size=32, seed=2):
        res = loss_3d(probs, vm, s, mask)
        corr = soft_correspondences(probs, vm)
        vis = (mask[0] > 0) & corr.valid
        pose = kabsch(corr, s, mask)
        rms = alignment_residual(corr.points, s, vis[None].repeat(3, 0), pose)
        assert np.isclose(res.value, rms * np.sqrt(vis.sum()), rtol=1e-10)


def test_loss_gradient_matches_finite_differences():
    for probs, vm, s, mask in loss3d_problems(3, seed=3):
        err, res = loss3d_fd_error(probs, vm, s, mask)
        assert not res.degenerate
        assert err < 1e-5


def test_loss_gradient_center_all_mode():
    probs, vm, s, mask = loss3d_problems(1, seed=8)[0]
    err, res = loss3d_fd_error(probs, vm, s, mask, center_all=True)
    assert err < 1e-5
    assert res.value != loss_3d(probs, vm, s, mask).value


def test_loss_rigid_invariance():
    rng = np.random.default_rng(3)
    for probs, vm, s, mask in loss3d_problems(3, size=24, seed=6):
        g = RigidPose(random_rotation(rng), rng.normal(size=3))
        moved = VertexMap(np.einsum("ij,jhw->ihw", g.rotation, vm.points)
                          + g.translation[:, None, None] * vm.valid, vm.valid)
        a = loss_3d(probs, vm, s, mask)
        b = loss_3d(probs, moved, s, mask)
        assert np.isclose(a.value, b.value, rtol=1e-9)
        assert np.abs(a.grad - b.grad).max() < 1e-9 * np.abs(a.grad).max()


def test_loss_ignores_masked_columns():
    rng = np.random.default_rng(4)
    probs, vm, s, mask = loss3d_problems(1, size=24, seed=9)[0]
    hidden = np.flatnonzero(mask[0] > 0)[0]
    mask = mask.copy()
    mask[:, hidden] = 0
    a = loss_3d(probs, vm, s, mask)
    other = probs.copy()
    other[hidden + 1] *= rng.uniform(0.1, 2.0, size=other.shape[1:])
    b = loss_3d(other, vm, s, mask)
    assert np.isclose(a.value, b.value, rtol=1e-12)
    assert not a.grad[hidden + 1].any()
    assert not a.grad[0].any()  # background never contributes


def test_loss_degenerate_samples_contribute_nothing():
    probs, vm, s, mask = loss3d_problems(1, size=24, seed=10)[0]
    two = np.zeros_like(mask)
    two[:, np.flatnonzero(mask[0])[:2]] = 1
    res = loss_3d(probs, vm, s, two)
    assert res.degenerate and res.value == 0.0 and not res.grad.any()


def test_loss_zero_for_perfect_keypoints():
    model, [(pose, k, depth, labels)] = rendered_views(1, 64, 48, seed=12)
    vm = deproject(depth, k)
    corr, mask = hard_correspondences(labels, vm, model.num_classes, 1)
    # model points placed exactly at the observed keypoints, mapped to the GCS
    s = pose.rotation @ corr.points + pose.translation[:, None]
    res = loss_3d(one_hot(labels, model.num_classes), vm, s, mask)
    assert res.value < 1e-9
