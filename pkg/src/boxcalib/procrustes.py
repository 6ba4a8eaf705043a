"""Soft correspondences, masked orthogonal Procrustes and the 3D keypoint loss.

Keypoints are 3 x K matrices whose column k is the 3D position of labeled
side k (class id k + 1); the background class never yields a keypoint.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .geometry import RigidPose

log = logging.getLogger(__name__)

MASS_EPS = 1e-6


class DegenerateConfigurationError(ValueError):
    """Fewer than three usable correspondences, or they are collinear."""


@dataclass(frozen=True, eq=False)
class Correspondences:
    points: np.ndarray  # 3 x K
    valid: np.ndarray   # K bools

    @property
    def K(self):
        return self.points.shape[1]


def soft_correspondences(probs, vertices, mass_eps=MASS_EPS):
    """Probability-weighted mean of the valid vertices, per class.

    ``probs`` is the (K+1) x H x W probability map including background
    channel 0; ``vertices`` a VertexMap.  Classes whose total probability
    over valid pixels is below ``mass_eps`` are flagged invalid and get a
    zero column.
    """
    probs = np.asarray(probs)
    if probs.shape[1:] != vertices.shape:
        raise ValueError(f"probability map {probs.shape[1:]} and vertex map {vertices.shape} "
                         "are not co-registered")
    w = probs[1:].reshape(probs.shape[0] - 1, -1) * vertices.valid.reshape(1, -1)
    v = vertices.points.reshape(3, -1)
    mass = w.sum(axis=1)
    valid = mass >= mass_eps
    num = v @ w.T
    c = np.zeros_like(num)
    c[:, valid] = num[:, valid] / mass[valid]
    return Correspondences(c, valid)


def one_hot(labels, num_classes):
    labels = np.asarray(labels)
    return (np.arange(num_classes)[:, None, None] == labels[None]).astype(float)


def hard_correspondences(labels, vertices, num_classes, min_pixels=16):
    """Per-label centroid of the valid vertices, plus the visibility mask.

    Classes with fewer than ``min_pixels`` valid pixels are invisible.
    """
    labels = np.asarray(labels)
    K = num_classes - 1
    lab = labels[vertices.valid].astype(np.int64)
    pts = vertices.points[:, vertices.valid]
    counts = np.bincount(lab, minlength=num_classes)[1:num_classes].astype(float)
    sums = np.stack([np.bincount(lab, weights=pts[i], minlength=num_classes)[1:num_classes]
                     for i in range(3)])
    valid = counts > 0
    c = np.zeros((3, K))
    c[:, valid] = sums[:, valid] / counts[valid]
    vis = (counts >= min_pixels).astype(float)
    return Correspondences(c, valid), np.repeat(vis[None], 3, axis=0)


def _visible(mask, corr=None):
    vis = np.asarray(mask)[0] > 0.5
    if corr is not None:
        vis = vis & corr.valid
    return vis


def _rotation(c_hat, s_hat):
    """argmin_R ||s_hat - R c_hat||_F over proper rotations."""
    h = c_hat @ s_hat.T
    u, sv, vt = np.linalg.svd(h)
    v = vt.T
    d = np.sign(np.linalg.det(v @ u.T))
    if d == 0:
        d = 1.0
    return v @ np.diag([1.0, 1.0, d]) @ u.T, sv


def _check_rank(c_hat, s_hat, tol=1e-9):
    for name, x in (("keypoints", c_hat), ("model points", s_hat)):
        sv = np.linalg.svd(x, compute_uv=False)
        scale = max(sv[0], 1e-300)
        if sv[0] < tol or sv[1] / scale < tol:
            raise DegenerateConfigurationError(f"{name} are collinear or coincident")


def kabsch(corr, model_points, mask):
    """Rigid pose mapping visible camera-space keypoints onto the model points."""
    c = corr.points if isinstance(corr, Correspondences) else np.asarray(corr)
    vis = _visible(mask, corr if isinstance(corr, Correspondences) else None)
    if vis.sum() < 3:
        raise DegenerateConfigurationError(f"only {int(vis.sum())} visible correspondences; need 3")
    cv = c[:, vis]
    sv = np.asarray(model_points)[:, vis]
    c_bar = cv.mean(axis=1, keepdims=True)
    s_bar = sv.mean(axis=1, keepdims=True)
    _check_rank(cv - c_bar, sv - s_bar)
    r, _ = _rotation(cv - c_bar, sv - s_bar)
    t = s_bar[:, 0] - r @ c_bar[:, 0]
    return RigidPose(r, t)


def alignment_residual(corr_points, model_points, mask, pose):
    vis = _visible(mask)
    d = pose.apply(corr_points[:, vis].T) - model_points[:, vis].T
    return float(np.sqrt((d ** 2).sum(axis=1).mean()))


@dataclass
class Loss3D:
    value: float
    grad: np.ndarray  # same shape as the probability map
    degenerate: bool = False
    rotation: np.ndarray | None = None


def loss_3d(probs, vertices, model_points, mask, center_all=False, mass_eps=MASS_EPS):
    """Masked Procrustes keypoint loss and its gradient w.r.t. ``probs``.

    The loss is ||M . (S_hat - R C_hat)||_F with C from soft correspondences,
    both sets centered over the visible columns, and R the optimal rotation
    for those columns.  Because R minimizes the loss over rotations, its
    first-order variation does not contribute, so R is held fixed when
    differentiating.

    ``center_all`` centers over all K columns instead (comparison mode only;
    the rotation is then still fit on the visible columns).

    Samples with fewer than three usable visible columns, or a degenerate
    configuration, contribute zero loss and zero gradient.
    """
    probs = np.asarray(probs, dtype=float)
    grad = np.zeros_like(probs)
    corr = soft_correspondences(probs, vertices, mass_eps)
    vis = _visible(mask, corr)
    if vis.sum() < 3:
        log.debug("loss_3d: %d visible columns, skipping sample", int(vis.sum()))
        return Loss3D(0.0, grad, degenerate=True)
    s = np.asarray(model_points, dtype=float)
    c = corr.points
    if center_all:
        c_bar = c.mean(axis=1, keepdims=True)
        s_bar = s.mean(axis=1, keepdims=True)
    else:
        c_bar = c[:, vis].mean(axis=1, keepdims=True)
        s_bar = s[:, vis].mean(axis=1, keepdims=True)
    c_hat = (c - c_bar)[:, vis]
    s_hat = (s - s_bar)[:, vis]
    try:
        _check_rank(c_hat, s_hat)
    except DegenerateConfigurationError as exc:
        log.debug("loss_3d: %s, skipping sample", exc)
        return Loss3D(0.0, grad, degenerate=True)
    r, _ = _rotation(c_hat, s_hat)
    resid = s_hat - r @ c_hat
    value = float(np.sqrt((resid ** 2).sum()))
    if value == 0.0:
        return Loss3D(0.0, grad, rotation=r)

    # dL/dC_hat for the visible columns
    g_hat = -(r.T @ resid) / value
    K = c.shape[1]
    g_c = np.zeros((3, K))
    if center_all:
        g_c[:, vis] = g_hat
        g_c -= g_hat.sum(axis=1, keepdims=True) / K
    else:
        # visible residuals sum to zero, so the centering term vanishes
        g_c[:, vis] = g_hat - g_hat.mean(axis=1, keepdims=True)

    # dC[:, k]/dP[k, p] = (V_p - C_k) / mass_k on valid pixels
    valid = vertices.valid.reshape(-1)
    v = vertices.points.reshape(3, -1)
    mass = (probs[1:].reshape(K, -1) * valid).sum(axis=1)
    active = np.flatnonzero(g_c.any(axis=0) & corr.valid)
    gk = g_c[:, active]
    proj = gk.T @ v - (gk * c[:, active]).sum(axis=0)[:, None]
    g = np.zeros((K, v.shape[1]))
    g[active] = proj / mass[active, None] * valid
    grad[1:] = g.reshape(K, *probs.shape[1:])
    return Loss3D(value, grad, rotation=r)
