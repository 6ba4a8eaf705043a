"""Segmentation, correspondence and point-cloud alignment metrics."""

import csv
import json
import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .structure import DegenerateViewError, render

log = logging.getLogger(__name__)


def miou(a, b, num_classes=None, include_background=False):
    """Mean IoU over the classes present in either label map.

    Returns 1.0 when neither map contains a counted class.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"label maps differ in shape: {a.shape} vs {b.shape}")
    n = num_classes or int(max(a.max(initial=0), b.max(initial=0))) + 1
    # joint histogram: entry (i, j) counts pixels with a == i and b == j
    hist = np.bincount(a.ravel().astype(np.int64) * n + b.ravel().astype(np.int64),
                       minlength=n * n).reshape(n, n)
    inter = np.diag(hist).astype(float)
    union = hist.sum(axis=0) + hist.sum(axis=1) - inter
    classes = np.arange(n) if include_background else np.arange(1, n)
    classes = classes[union[classes] > 0]
    if len(classes) == 0:
        return 1.0
    return float(np.mean(inter[classes] / union[classes]))


class RerenderScore(NamedTuple):
    miou: float
    degenerate: bool


def miou_rerender(pred, model, est_pose, k, include_background=False):
    """mIoU between predicted labels and the structure rendered from ``est_pose``."""
    if est_pose is None:
        return RerenderScore(0.0, True)
    try:
        _, rendered = render(model, est_pose, k)
    except DegenerateViewError as exc:
        log.warning("re-render failed: %s", exc)
        return RerenderScore(0.0, True)
    return RerenderScore(miou(pred, rendered, model.num_classes, include_background), False)


def rmse_corr(corr_points, model_points, mask, pose):
    """RMS distance between visible aligned keypoints and their model points."""
    vis = np.asarray(mask)[0] > 0.5
    if not vis.any():
        raise ValueError("no visible correspondences")
    c = np.asarray(corr_points)[:, vis]
    s = np.asarray(model_points)[:, vis]
    d = pose.rotation @ c + pose.translation[:, None] - s
    return float(np.sqrt((d ** 2).sum(axis=0).mean()))


def _points(cloud):
    p = getattr(cloud, "points", cloud)
    p = np.asarray(p, dtype=float).reshape(-1, 3)
    if len(p) == 0:
        raise ValueError("point cloud is empty")
    return p


def rms_dist(a, b):
    """sqrt(mean over v in A of min over u in B of |v - u|^2)."""
    pa, pb = _points(a), _points(b)
    d, _ = cKDTree(pb).query(pa, k=1)
    return float(np.sqrt(np.mean(d ** 2)))


def rms_dist_bruteforce(a, b, chunk=512):
    pa, pb = _points(a), _points(b)
    best = np.empty(len(pa))
    for i in range(0, len(pa), chunk):
        diff = pa[i:i + chunk, None, :] - pb[None, :, :]
        best[i:i + chunk] = (diff ** 2).sum(axis=2).min(axis=1)
    return float(np.sqrt(best.mean()))


def hausdorff_rms(a, b):
    return max(rms_dist(a, b), rms_dist(b, a))


@dataclass
class MetricReport:
    name: str
    values: list = field(default_factory=list)
    ids: list = field(default_factory=list)

    @property
    def mean(self):
        return float(np.mean(self.values)) if self.values else float("nan")

    @property
    def std(self):
        return float(np.std(self.values)) if self.values else float("nan")

    @property
    def rsd(self):
        m = self.mean
        return self.std / m if m > 0 else float("nan")

    def add(self, value, sample_id=None):
        self.values.append(float(value))
        self.ids.append(sample_id if sample_id is not None else len(self.ids))

    def summary(self):
        return {"metric": self.name, "count": len(self.values), "mean": self.mean,
                "std": self.std, "rsd": self.rsd}


def write_reports(reports, csv_path, json_path, extra=None):
    """Per-sample rows (one column per metric) plus a mean/STD/RSD summary.

    ``extra`` is merged into the JSON document as-is.
    """
    ids = []
    for r in reports:
        for i in r.ids:
            if i not in ids:
                ids.append(i)
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample"] + [r.name for r in reports])
        for sid in ids:
            row = [sid]
            for r in reports:
                vals = dict(zip(r.ids, r.values))
                row.append(f"{vals[sid]:.6g}" if sid in vals else "")
            w.writerow(row)
    with open(json_path, "w") as f:
        doc = {"format": "boxcalib.metrics/v1", "reports": [r.summary() for r in reports]}
        doc.update(extra or {})
        json.dump(doc, f, indent=2)
