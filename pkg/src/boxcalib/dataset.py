"""On-disk synthetic datasets: a JSON manifest plus raw depth and label rasters.

Layout::

    <dir>/manifest.json
    <dir>/depth/<id>.u16     little-endian uint16 millimeters, row-major
    <dir>/labels/<id>.u8     uint8 class ids, row-major
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Intrinsics, RigidPose, load_depth_mm, save_depth_mm
from .segnet import Sample, make_sample, sample_seed
from .structure import NoiseConfig, PoseSamplerConfig, load_structure

log = logging.getLogger(__name__)

DATASET_FORMAT = "boxcalib.dataset/v1"


@dataclass
class Dataset:
    root: Path
    manifest: dict
    model: object
    pool: list

    @property
    def ids(self):
        return [s["id"] for s in self.manifest["samples"]]

    def __len__(self):
        return len(self.manifest["samples"])

    def entry(self, i):
        return self.manifest["samples"][i]

    def sample(self, i):
        e = self.entry(i)
        k = self.pool[e["intrinsics"]]
        depth = load_depth_mm(self.root / e["depth"], k.width, k.height)
        raw = np.fromfile(self.root / e["labels"], dtype=np.uint8)
        if raw.size != k.width * k.height:
            raise ValueError(f"{e['labels']}: expected {k.width * k.height} pixels, found {raw.size}")
        return Sample(depth, raw.reshape(k.height, k.width), k,
                      RigidPose.from_matrix(e["pose"]), int(e["seed"]))

    def samples(self):
        return [self.sample(i) for i in range(len(self))]


def write_label_raster(path, labels):
    np.asarray(labels, dtype=np.uint8).tofile(path)


def generate_dataset(out, model, sampler, noise, pool, count, seed):
    """Render ``count`` samples into ``out``; sample i uses seed sample_seed(seed, 0, i)."""
    if count < 0:
        raise ValueError("sample count must be non-negative")
    out = Path(out)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(count):
        sid = f"{i:06d}"
        s = make_sample(model, sampler, noise, pool, sample_seed(seed, 0, i))
        save_depth_mm(out / "depth" / f"{sid}.u16", s.depth)
        write_label_raster(out / "labels" / f"{sid}.u8", s.labels)
        entries.append({"id": sid, "depth": f"depth/{sid}.u16", "labels": f"labels/{sid}.u8",
                        "pose": s.pose.matrix.tolist(), "seed": s.seed,
                        "intrinsics": pool.index(s.intrinsics)})
    manifest = {
        "format": DATASET_FORMAT,
        "structure": model.to_dict(),
        "intrinsics_pool": [k.to_dict() for k in pool],
        "sampler": sampler.to_dict(),
        "noise": noise.to_dict(),
        "master_seed": seed,
        "samples": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    log.info("wrote %d samples to %s", count, out)
    return manifest


def load_dataset(root):
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise ValueError(f"unsupported dataset format {manifest.get('format')!r}")
    model = load_structure(manifest["structure"])
    pool = [Intrinsics.from_dict(d) for d in manifest["intrinsics_pool"]]
    for e in manifest["samples"]:
        for key in ("depth", "labels"):
            if not (root / e[key]).is_file():
                raise FileNotFoundError(f"manifest lists missing file {e[key]}")
        if not 0 <= e["intrinsics"] < len(pool):
            raise ValueError(f"sample {e['id']}: intrinsics index {e['intrinsics']} out of range")
    return Dataset(root, manifest, model, pool)


def regenerate(dataset, i):
    """Re-render sample ``i`` from its recorded seed (depth still in meters)."""
    m = dataset.manifest
    return make_sample(dataset.model, PoseSamplerConfig.from_dict(m["sampler"]),
                       NoiseConfig.from_dict(m["noise"]), dataset.pool,
                       int(dataset.entry(i)["seed"]))
