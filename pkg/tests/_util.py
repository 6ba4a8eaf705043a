"""Shared oracles and fixtures-by-function for the test modules."""

import numpy as np

from boxcalib.geometry import default_intrinsics
from boxcalib.structure import DegenerateViewError, PoseSamplerConfig, render, sample_pose


def numeric_grad(f, x, eps=1e-6):
    """Central differences of the scalar f() w.r.t. every entry of x (in place)."""
    g = np.zeros_like(x, dtype=float)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        a = f()
        flat[i] = old - eps
        b = f()
        flat[i] = old
        gf[i] = (a - b) / (2 * eps)
    return g


def rel_error(a, b):
    """max |a - b| normalized by the larger of the two max magnitudes."""
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-300)
    return float(np.abs(a - b).max() / scale)


def rendered_views(count, width, height, seed=0, sampler=None):
    """(pose, intrinsics, depth, labels) for ``count`` non-degenerate sampled views."""
    from boxcalib.structure import default_structure
    model = default_structure()
    k = default_intrinsics(width, height)
    cfg = sampler or PoseSamplerConfig()
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        pose = sample_pose(cfg, rng)
        try:
            depth, labels = render(model, pose, k)
        except DegenerateViewError:
            continue
        out.append((pose, k, depth, labels))
    return model, out


def _fd_check(forward, backward, inputs, rng, eps=1e-6):
    """Largest relative error of backward() against central differences.

    ``forward(*inputs)`` returns (out, cache); ``backward(dout, cache)`` returns
    one gradient or a tuple of gradients aligned with ``inputs``.  The scalar
    probed is sum(out * dout) for a fixed random dout.
    """
    out, cache = forward(*inputs)
    dout = rng.uniform(-1, 1, np.shape(out))
    grads = backward(dout, cache)
    if not isinstance(grads, tuple):
        grads = (grads,)
    worst = 0.0
    for x, g in zip(inputs, grads):
        if g is None:
            continue
        num = numeric_grad(lambda: float((forward(*inputs)[0] * dout).sum()), x, eps)
        worst = max(worst, rel_error(g, num))
    return worst


def kernel_gradient_errors(seed=0):
    """Finite-difference relative error of every autodiff kernel, in float64."""
    from boxcalib import autodiff as ad
    from boxcalib.segnet import loss_seg

    rng = np.random.default_rng(seed)
    u = lambda *shape: rng.uniform(-1, 1, shape)
    errors = {}

    errors["conv3x3"] = _fd_check(ad.conv2d_forward, ad.conv2d_backward,
                                  [u(2, 3, 5, 6), u(4, 3, 3, 3), u(4)], rng)
    errors["conv1x1"] = _fd_check(lambda x, w: ad.conv2d_forward(x, w, None),
                                  lambda d, c: ad.conv2d_backward(d, c)[:2],
                                  [u(2, 3, 4, 4), u(5, 3, 1, 1)], rng)
    # distinct values so no pooling window has a tie within +-eps
    pool_in = rng.permutation(2 * 3 * 4 * 6).reshape(2, 3, 4, 6) * 0.01
    errors["maxpool"] = _fd_check(ad.maxpool_forward, ad.maxpool_backward, [pool_in], rng)
    errors["upsample"] = _fd_check(ad.upsample_forward, ad.upsample_backward, [u(2, 3, 3, 4)], rng)
    relu_in = u(2, 3, 4, 4)
    relu_in[np.abs(relu_in) < 1e-3] = 0.5  # keep clear of the kink
    errors["relu"] = _fd_check(ad.relu_forward, ad.relu_backward, [relu_in], rng)
    errors["sigmoid"] = _fd_check(ad.sigmoid_forward, ad.sigmoid_backward, [3 * u(2, 3, 4, 4)], rng)
    errors["softmax"] = _fd_check(ad.softmax_forward, ad.softmax_backward, [3 * u(2, 5, 3, 3)], rng)
    errors["mul"] = _fd_check(ad.mul_forward, ad.mul_backward, [u(2, 3, 4, 4), u(2, 1, 4, 4)], rng)
    errors["add"] = _fd_check(ad.add_forward, ad.add_backward, [u(2, 3, 4, 4), u(1, 3, 1, 1)], rng)
    errors["concat"] = _fd_check(ad.concat_forward, ad.concat_backward,
                                 [u(2, 2, 3, 3), u(2, 4, 3, 3)], rng)

    # loss_seg: gradient w.r.t. the logits feeding a channel softmax
    logits = 2 * u(2, 6, 4, 5)
    labels = rng.integers(0, 6, size=(2, 4, 5))
    f = lambda: loss_seg(ad.softmax_forward(logits)[0], labels)[0]
    _, g = loss_seg(ad.softmax_forward(logits)[0], labels)
    errors["loss_seg"] = rel_error(g, numeric_grad(f, logits))
    return errors


def random_prob_map(labels, num_classes, rng, sharpness=3.0):
    """Softmax of noisy one-hot logits, (C, H, W) float64."""
    logits = rng.normal(size=(num_classes,) + labels.shape)
    logits += sharpness * (np.arange(num_classes)[:, None, None] == labels[None])
    e = np.exp(logits - logits.max(axis=0))
    return e / e.sum(axis=0)


def loss3d_problems(count, size=16, seed=0, min_visible=3):
    """(probs, vertex map, model points, mask) built on rendered views."""
    from boxcalib.geometry import deproject
    from boxcalib.structure import visibility_mask

    rng = np.random.default_rng(seed)
    model, views = rendered_views(4 * count, size, size, seed=seed)
    out = []
    for pose, k, depth, labels in views:
        mask = visibility_mask(labels, model, min_pixels=1)
        if mask[0].sum() < min_visible:
            continue
        probs = random_prob_map(labels, model.num_classes, rng)
        out.append((probs, deproject(depth, k), model.side_centers, mask))
        if len(out) == count:
            return out
    raise RuntimeError("not enough views with visible sides")


def loss3d_fd_error(probs, vm, model_points, mask, eps=1e-6, **kw):
    from boxcalib.procrustes import loss_3d
    res = loss_3d(probs, vm, model_points, mask, **kw)
    p = probs.copy()
    num = numeric_grad(lambda: loss_3d(p, vm, model_points, mask, **kw).value, p, eps)
    return rel_error(res.grad, num), res


# four cameras around the structure, alternating heights so that every camera
# sees horizontal faces (a camera level with the box tops leaves its vertical
# translation unconstrained by point-to-plane terms)
RING = [(20.0, 0.4), (110.0, 0.7), (200.0, 0.4), (290.0, 0.7)]


def ring_views(width=320, height=240, radius=2.0, ring=RING):
    from boxcalib.calibration import View
    from boxcalib.geometry import default_intrinsics
    from boxcalib.structure import default_structure, look_at, render

    model = default_structure()
    k = default_intrinsics(width, height)
    views = []
    for i, (phi, h) in enumerate(ring):
        p = np.radians(phi)
        pose = look_at([radius * np.cos(p), h, radius * np.sin(p)], [0.0, 0.0, 0.0])
        depth, _ = render(model, pose, k)
        views.append(View(f"cam{i}", depth, k, pose))
    return model, views


def perturb(pose, rng, degrees=3.0, meters=0.03):
    """Rotate the camera about its own center by ``degrees`` (random axis) and
    shift it by ``meters`` (random direction)."""
    from boxcalib.geometry import RigidPose, axis_angle

    dr = axis_angle(rng.normal(size=3), np.radians(degrees))
    dt = rng.normal(size=3)
    dt *= meters / np.linalg.norm(dt)
    return RigidPose(pose.rotation @ dr, pose.translation + dt)


def fused_rms(views, poses, model, spacing=0.005):
    from boxcalib.geometry import deproject
    from boxcalib.metrics import rms_dist

    cloud = np.concatenate([poses[v.camera_id].apply(deproject(v.depth, v.intrinsics).valid_points())
                            for v in views])
    return rms_dist(cloud, model.surface_cloud(spacing).points)
