"""Per-camera initial pose estimation and multi-view point-to-plane refinement."""

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import RigidPose, axis_angle, deproject, orthonormalize
from .procrustes import DegenerateConfigurationError, alignment_residual, hard_correspondences, kabsch

log = logging.getLogger(__name__)

CALIBRATION_FORMAT = "boxcalib.calibration/v1"


class CalibrationError(RuntimeError):
    def __init__(self, camera_id, message):
        super().__init__(f"camera {camera_id}: {message}")
        self.camera_id = camera_id


@dataclass
class View:
    camera_id: str
    depth: np.ndarray
    intrinsics: object
    gt_pose: RigidPose | None = None


@dataclass
class PoseEstimate:
    pose: RigidPose
    diagnostics: dict


def pose_from_labels(labels, depth, k, model, min_pixels=16):
    """Hard correspondences from a label map, then Kabsch against the side centers."""
    vm = deproject(depth, k)
    corr, mask = hard_correspondences(labels, vm, model.num_classes, min_pixels)
    pose = kabsch(corr, model.side_centers, mask)
    counts = np.bincount(np.asarray(labels)[vm.valid].ravel(), minlength=model.num_classes)
    diag = {
        "visible_sides": int(mask[0].sum()),
        "side_pixels": {int(c): int(counts[c]) for c in range(1, model.num_classes) if counts[c]},
        "kabsch_rmse": alignment_residual(corr.points, model.side_centers, mask, pose),
    }
    return PoseEstimate(pose, diag)


def estimate_pose(depth, k, net, model, min_pixels=16):
    """Network forward -> argmax labels -> hard correspondences -> Kabsch."""
    cfg = net.cfg
    if depth.shape != (cfg.height, cfg.width):
        raise ValueError(f"depth is {depth.shape[1]}x{depth.shape[0]}, network expects "
                         f"{cfg.width}x{cfg.height}")
    probs = net.predict(depth)
    labels = probs.argmax(axis=0)
    return pose_from_labels(labels, depth, k, model, min_pixels)


# --------------------------------------------------------------------------
# ICP


@dataclass(frozen=True)
class ICPConfig:
    max_iter: int = 30
    max_corr_dist: float = 0.05
    normal_k: int = 12
    convergence_eps: float = 1e-5
    anchor_spacing: float = 0.005
    use_anchor: bool = True
    # correspondence gate for the first sweep, shrunk by ``coarse_decay`` per
    # sweep down to max_corr_dist; None disables the schedule
    coarse_corr_dist: float | None = None
    coarse_decay: float = 0.7

    def gate(self, sweep):
        if self.coarse_corr_dist is None:
            return self.max_corr_dist
        return max(self.max_corr_dist, self.coarse_corr_dist * self.coarse_decay ** sweep)


@dataclass
class CalibrationResult:
    poses: dict
    diagnostics: dict = field(default_factory=dict)
    initial: dict = field(default_factory=dict)


def estimate_normals(points, k=12, viewpoint=np.zeros(3)):
    """PCA normals from the k nearest neighbors, oriented toward ``viewpoint``."""
    k = min(k, len(points))
    _, idx = cKDTree(points).query(points, k=k)
    nb = points[idx]
    nb = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb)
    _, vecs = np.linalg.eigh(cov)
    n = vecs[:, :, 0]
    flip = ((viewpoint - points) * n).sum(axis=1) < 0
    n[flip] *= -1
    return n


def _exp_so3(w):
    angle = np.linalg.norm(w)
    if angle < 1e-15:
        return np.eye(3)
    return axis_angle(w / angle, angle)


class _Target:
    """A cloud with normals, stored in its own frame with a fixed KD-tree."""

    def __init__(self, points, normals):
        self.points = points
        self.normals = normals
        self.tree = cKDTree(points)


def _point_to_plane_step(src, tgt, nrm):
    """Least-squares increment (w, t) minimizing sum(n . (p + w x p + t - q))^2."""
    r = ((src - tgt) * nrm).sum(axis=1)
    jac = np.hstack([np.cross(src, nrm), nrm])
    a = jac.T @ jac
    b = -jac.T @ r
    x = np.linalg.lstsq(a, b, rcond=None)[0]
    return x[:3], x[3:], r


def refine_icp(views, initial, cfg=ICPConfig(), model=None):
    """Jointly refine camera poses with point-to-plane ICP.

    In each sweep every camera is registered against the union of all other
    cameras' clouds (and the structure's surface, which stays fixed and pins
    the global frame); increments are computed from the poses at the start
    of the sweep and applied together at its end.
    """
    if len(views) < 2:
        raise ValueError("refinement needs at least two views")
    ids = [v.camera_id for v in views]
    if len(set(ids)) != len(ids):
        raise ValueError("camera ids must be unique")
    clouds = {}
    for v in views:
        pts = deproject(v.depth, v.intrinsics).valid_points()
        if len(pts) < cfg.normal_k:
            clouds[v.camera_id] = None
            continue
        clouds[v.camera_id] = _Target(pts, estimate_normals(pts, cfg.normal_k))
    anchor = None
    if cfg.use_anchor and model is not None:
        surf = model.surface_cloud(cfg.anchor_spacing)
        anchor = _Target(surf.points, surf.normals)

    poses = {cid: initial[cid] for cid in ids}
    diag = {cid: {"icp_iterations": 0, "icp_rms": None, "lost_correspondences": False}
            for cid in ids}
    prev_total = None
    for it in range(cfg.max_iter):
        gate = cfg.gate(it)
        increments = {}
        total = 0.0
        for cid in ids:
            src_c = clouds[cid]
            if src_c is None:
                diag[cid]["lost_correspondences"] = True
                continue
            pose = poses[cid]
            src = pose.apply(src_c.points)
            best_d = np.full(len(src), np.inf)
            best_q = np.zeros_like(src)
            best_n = np.zeros_like(src)
            targets = [(anchor, RigidPose.identity())] if anchor is not None else []
            targets += [(clouds[o], poses[o]) for o in ids if o != cid and clouds[o] is not None]
            for tgt, tpose in targets:
                local = (src - tpose.translation) @ tpose.rotation
                d, idx = tgt.tree.query(local, k=1, distance_upper_bound=gate)
                better = d < best_d
                if not better.any():
                    continue
                j = idx[better]
                best_d[better] = d[better]
                best_q[better] = tpose.apply(tgt.points[j])
                best_n[better] = tgt.normals[j] @ tpose.rotation.T
            ok = np.isfinite(best_d)
            if ok.sum() < 6:
                diag[cid]["lost_correspondences"] = True
                log.warning("camera %s: no correspondences within %.3f m", cid, gate)
                continue
            w, t, r = _point_to_plane_step(src[ok], best_q[ok], best_n[ok])
            increments[cid] = (w, t)
            total += float((r ** 2).sum())
            diag[cid]["icp_rms"] = float(np.sqrt(np.mean(r ** 2)))
            diag[cid]["icp_correspondences"] = int(ok.sum())
        if prev_total is not None and total > prev_total * 1.05:
            log.info("sweep %d: point-to-plane residual rose from %.4g to %.4g", it, prev_total, total)
        prev_total = total
        step = 0.0
        for cid, (w, t) in increments.items():
            dr = _exp_so3(w)
            p = poses[cid]
            poses[cid] = RigidPose(orthonormalize(dr @ p.rotation), dr @ p.translation + t)
            diag[cid]["icp_iterations"] = it + 1
            step = max(step, float(np.linalg.norm(w) + np.linalg.norm(t)))
        log.debug("sweep %d: residual %.4g, max step %.3g", it, total, step)
        if step < cfg.convergence_eps and gate <= cfg.max_corr_dist:
            break
    return CalibrationResult(poses, diag, dict(initial))


# --------------------------------------------------------------------------
# calibration documents


def _pose_json(pose):
    return pose.matrix.tolist()


def calibration_to_json(initial, refined, diagnostics):
    """``initial``/``refined``: {camera id: RigidPose or None}."""
    cams = {}
    for cid in sorted(set(initial) | set(refined) | set(diagnostics)):
        ini = initial.get(cid)
        ref = refined.get(cid)
        cams[cid] = {
            "initial": _pose_json(ini) if ini is not None else None,
            "refined": _pose_json(ref) if ref is not None else None,
            "diagnostics": diagnostics.get(cid, {}),
        }
    return {"format": CALIBRATION_FORMAT, "cameras": cams}


def load_calibration(doc):
    if isinstance(doc, (str, bytes)):
        doc = json.loads(doc)
    if doc.get("format") != CALIBRATION_FORMAT:
        raise ValueError(f"unsupported calibration format {doc.get('format')!r}")
    out = {"initial": {}, "refined": {}, "diagnostics": {}}
    for cid, entry in doc["cameras"].items():
        for key in ("initial", "refined"):
            if entry.get(key) is not None:
                out[key][cid] = RigidPose.from_matrix(entry[key])
        out["diagnostics"][cid] = entry.get("diagnostics", {})
    return out
