"""Scoring a segmentation network on held-out views."""

import logging
from dataclasses import dataclass

import numpy as np

from .geometry import deproject, pose_error
from .metrics import MetricReport, miou, miou_rerender, rmse_corr
from .procrustes import DegenerateConfigurationError, hard_correspondences, kabsch

log = logging.getLogger(__name__)


@dataclass
class ViewScore:
    miou_rerender: float
    miou_gt: float
    rmse_corr: float | None
    rot_deg: float | None
    trans_m: float | None
    degenerate: bool


def score_view(pred, sample, model, min_pixels=16):
    """Score one predicted label map against its view.

    A view whose predicted correspondences are degenerate scores mIoU-rerender 0
    and has no RMSE.
    """
    vm = deproject(sample.depth, sample.intrinsics)
    gt_iou = miou(pred, sample.labels, model.num_classes)
    corr, mask = hard_correspondences(pred, vm, model.num_classes, min_pixels)
    try:
        pose = kabsch(corr, model.side_centers, mask)
    except DegenerateConfigurationError:
        return ViewScore(0.0, gt_iou, None, None, None, True)
    rr = miou_rerender(pred, model, pose, sample.intrinsics)
    rot, trans = pose_error(pose, sample.pose)
    return ViewScore(rr.miou, gt_iou, rmse_corr(corr.points, model.side_centers, mask, pose),
                     rot, trans, rr.degenerate)


def evaluate_network(net, samples, model, min_pixels=16, batch=16):
    """Returns (reports by metric name, list of ViewScore)."""
    scores = []
    for i in range(0, len(samples), batch):
        chunk = samples[i:i + batch]
        probs = net.predict(np.stack([s.depth for s in chunk]))
        for s, p in zip(chunk, probs):
            scores.append(score_view(p.argmax(axis=0), s, model, min_pixels))
    reports = {name: MetricReport(name) for name in ("miou_rerender", "miou_gt", "rmse_corr")}
    for i, sc in enumerate(scores):
        reports["miou_rerender"].add(sc.miou_rerender, i)
        reports["miou_gt"].add(sc.miou_gt, i)
        if sc.rmse_corr is not None:
            reports["rmse_corr"].add(sc.rmse_corr, i)
    return reports, scores
