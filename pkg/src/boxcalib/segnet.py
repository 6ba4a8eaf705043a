"""Encoder / residual bottleneck / decoder segmentation network with soft attention.

The attention branch turns the last residual block's activations into a
single-channel sigmoid mask.  The mask gates those activations and, after
nearest upsampling, gates the (upsampled + skip) activations of every decoder
stage.  Decoder convolutions and the classifier have no bias, so a zero mask
yields zero logits and a uniform class distribution.
"""

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import deproject, intrinsics_pool
from .procrustes import loss_3d
from .structure import NoiseConfig, PoseSamplerConfig, augment, render, sample_pose, visibility_mask

log = logging.getLogger(__name__)

PROB_EPS = 1e-12


@dataclass(frozen=True)
class NetworkConfig:
    preset: str
    height: int
    width: int
    num_classes: int
    widths: tuple        # channels per resolution level, finest first
    enc_convs: tuple     # 3x3 convs per encoder level
    res_blocks: int
    dec_convs: tuple     # 3x3 convs per decoder level (finest first, excludes bottleneck)
    max_depth: float = 4.0

    def __post_init__(self):
        pools = len(self.widths) - 1
        if len(self.enc_convs) != pools + 1 or len(self.dec_convs) != pools:
            raise ValueError("stage lists do not match the number of pooling stages")
        f = 2 ** pools
        if self.height % f or self.width % f:
            raise ValueError(f"input {self.width}x{self.height} not divisible by {f} "
                             f"({pools} pooling stages)")
        if self.num_classes < 2:
            raise ValueError("need at least one side class plus background")

    @property
    def pools(self):
        return len(self.widths) - 1

    def to_dict(self):
        return asdict(self)


def network_config(preset, height, width, num_classes=22):
    if preset == "paper":
        # 14 encoder convs, 4 residual blocks, 13 decoder convs + classifier
        return NetworkConfig("paper", height, width, num_classes,
                             widths=(32, 64, 128, 256, 256), enc_convs=(3, 3, 3, 3, 2),
                             res_blocks=4, dec_convs=(4, 3, 3, 3))
    if preset == "micro":
        return NetworkConfig("micro", height, width, num_classes,
                             widths=(8, 16, 32, 32), enc_convs=(1, 1, 1, 1),
                             res_blocks=2, dec_convs=(1, 1, 1))
    raise ValueError(f"unknown preset {preset!r}")


def normalize_depth(depth, cfg):
    """(N, H, W) meters -> (N, 1, H, W) in [0, 1]; invalid stays 0."""
    x = np.clip(np.asarray(depth) / cfg.max_depth, 0.0, 1.0)
    return x[:, None]


class _Residual:
    """Pre-activated block: x + conv(relu(conv(relu(x))))."""

    def __init__(self, name, ch, rng, dtype):
        self.relu1, self.relu2 = ad.ReLU(), ad.ReLU()
        self.conv1 = ad.Conv2d(f"{name}.conv1", ch, ch, 3, True, rng, dtype)
        self.conv2 = ad.Conv2d(f"{name}.conv2", ch, ch, 3, True, rng, dtype)

    def parameters(self):
        return self.conv1.parameters() + self.conv2.parameters()

    def forward(self, x):
        h = self.conv2.forward(self.relu2.forward(self.conv1.forward(self.relu1.forward(x))))
        return x + h

    def backward(self, dy):
        d = self.relu1.backward(self.conv1.backward(self.relu2.backward(self.conv2.backward(dy))))
        return dy + d


class SegNet:
    def __init__(self, cfg, seed=0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        w = cfg.widths
        L = cfg.pools
        self.enc = []
        cin = 1
        for lvl in range(L + 1):
            stage = []
            for i in range(cfg.enc_convs[lvl]):
                stage.append((ad.Conv2d(f"enc{lvl}.{i}", cin, w[lvl], 3, True, rng, dtype), ad.ReLU()))
                cin = w[lvl]
            self.enc.append(stage)
        self.pool = [ad.MaxPool() for _ in range(L)]
        self.res = [_Residual(f"res{i}", w[L], rng, dtype) for i in range(cfg.res_blocks)]
        self.att_conv = ad.Conv2d("attention", w[L], 1, 1, True, rng, dtype)
        self.att_sig = ad.Sigmoid()
        self.gate_bottom = ad.Mul()
        self.up = [ad.Upsample() for _ in range(L)]
        self.mask_up = [ad.Upsample() for _ in range(L)]
        self.gate = [ad.Mul() for _ in range(L)]
        self.dec = []
        for lvl in range(L):
            stage = []
            cin = w[lvl + 1] + w[lvl]
            for i in range(cfg.dec_convs[lvl]):
                stage.append((ad.Conv2d(f"dec{lvl}.{i}", cin, w[lvl], 3, False, rng, dtype), ad.ReLU()))
                cin = w[lvl]
            self.dec.append(stage)
        self.classifier = ad.Conv2d("classifier", w[0], cfg.num_classes, 1, False, rng, dtype)
        self.softmax = ad.ChannelSoftmax()

    def parameters(self):
        ps = []
        for stage in self.enc:
            for conv, _ in stage:
                ps += conv.parameters()
        for blk in self.res:
            ps += blk.parameters()
        ps += self.att_conv.parameters()
        for stage in self.dec:
            for conv, _ in stage:
                ps += conv.parameters()
        ps += self.classifier.parameters()
        return ps

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        return {p.name: p.data for p in self.parameters()}

    def load_state_dict(self, state):
        for p in self.parameters():
            if p.name not in state:
                raise KeyError(f"checkpoint lacks parameter {p.name!r}")
            if state[p.name].shape != p.shape:
                raise ad.ShapeError(f"{p.name}: checkpoint shape {state[p.name].shape} != {p.shape}")
            p.data[...] = state[p.name]

    def forward(self, x):
        """x: (N, 1, H, W) normalized depth.  Returns (logits, probs, mask)."""
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1:] != (1, cfg.height, cfg.width):
            raise ad.ShapeError(f"network expects (N, 1, {cfg.height}, {cfg.width}), got {x.shape}")
        h = x.astype(self.dtype, copy=False)
        L = cfg.pools
        skips = []
        for lvl in range(L + 1):
            for conv, relu in self.enc[lvl]:
                h = relu.forward(conv.forward(h))
            if lvl < L:
                skips.append(h)
                h = self.pool[lvl].forward(h)
        for blk in self.res:
            h = blk.forward(h)
        mask = self.att_sig.forward(self.att_conv.forward(h))
        h = self.gate_bottom.forward(h, mask)
        mk = mask
        self._cat_split = [None] * L
        for lvl in reversed(range(L)):
            h = self.up[lvl].forward(h)
            mk = self.mask_up[lvl].forward(mk)
            h, self._cat_split[lvl] = ad.concat_forward(h, skips[lvl])
            h = self.gate[lvl].forward(h, mk)
            for conv, relu in self.dec[lvl]:
                h = relu.forward(conv.forward(h))
        self._last_decoder = h
        logits = self.classifier.forward(h)
        probs = self.softmax.forward(logits)
        return logits, probs, mask[:, 0]

    def backward(self, dlogits):
        """Backpropagate a gradient w.r.t. the logits; returns d(input)."""
        L = self.cfg.pools
        dh = self.classifier.backward(dlogits.astype(self.dtype, copy=False))
        dskips = [None] * L
        dmask = None
        for lvl in range(L):
            for conv, relu in reversed(self.dec[lvl]):
                dh = conv.backward(relu.backward(dh))
            dh, dmk = self.gate[lvl].backward(dh)
            dh, dskips[lvl] = ad.concat_backward(dh, self._cat_split[lvl])
            dh = self.up[lvl].backward(dh)
            dmask = dmk if dmask is None else dmask + dmk
            dmask = self.mask_up[lvl].backward(dmask)
        dh, dmk = self.gate_bottom.backward(dh)
        dmask = dmk if dmask is None else dmask + dmk
        dh = dh + self.att_conv.backward(self.att_sig.backward(dmask))
        for blk in reversed(self.res):
            dh = blk.backward(dh)
        for lvl in reversed(range(L + 1)):
            if lvl < L:
                dh = self.pool[lvl].backward(dh) + dskips[lvl]
            for conv, relu in reversed(self.enc[lvl]):
                dh = conv.backward(relu.backward(dh))
        return dh

    def predict(self, depth):
        """Class probabilities for (H, W) or (N, H, W) depth maps in meters."""
        depth = np.asarray(depth)
        single = depth.ndim == 2
        if single:
            depth = depth[None]
        _, probs, _ = self.forward(normalize_depth(depth, self.cfg))
        return probs[0] if single else probs


def loss_seg(probs, labels):
    """Mean per-pixel negative log-likelihood and its gradient w.r.t. the logits.

    ``probs`` is (C, H, W) or (N, C, H, W) softmax output, ``labels`` the
    matching integer class map.
    """
    probs = np.asarray(probs)
    labels = np.asarray(labels).astype(np.int64)
    batched = probs.ndim == 4
    if not batched:
        probs, labels = probs[None], labels[None]
    if probs.shape[2:] != labels.shape[1:] or probs.shape[0] != labels.shape[0]:
        raise ValueError(f"probabilities {probs.shape} and labels {labels.shape} do not match")
    p_gt = np.take_along_axis(probs, labels[:, None], axis=1)[:, 0]
    n_pix = labels.size
    value = float(-np.log(np.maximum(p_gt, PROB_EPS)).sum() / n_pix)
    grad = probs.copy()
    np.put_along_axis(grad, labels[:, None], p_gt[:, None] - 1.0, axis=1)
    grad /= n_pix
    return value, (grad if batched else grad[0])


# --------------------------------------------------------------------------
# data


@dataclass
class Sample:
    depth: np.ndarray      # augmented network input
    labels: np.ndarray     # clean ground truth
    intrinsics: object
    pose: object
    seed: int


def sample_seed(master, iteration, index):
    return int(np.random.SeedSequence([master, iteration, index]).generate_state(1)[0])


def make_sample(model, sampler, noise, pool, seed):
    rng = np.random.default_rng(seed)
    k = pool[int(rng.integers(len(pool)))]
    pose = sample_pose(sampler, rng)
    depth, labels = render(model, pose, k)
    depth = augment(depth, labels, noise, rng)
    return Sample(depth, labels, k, pose, seed)


def _make_sample_args(args):
    return make_sample(*args)


class SyntheticStream:
    """Infinite stream of rendered + augmented views, one seed per sample.

    Sample ``i`` of iteration ``t`` is a pure function of (seed, t, i), so
    batches do not depend on the number of workers.
    """

    def __init__(self, model, sampler=None, noise=None, pool=None, seed=0, workers=0,
                 width=128, height=96):
        self.model = model
        self.sampler = sampler or PoseSamplerConfig()
        self.noise = noise or NoiseConfig()
        self.pool = pool or intrinsics_pool(width, height)
        self.seed = seed
        self.workers = workers
        self._executor = ProcessPoolExecutor(workers) if workers > 1 else None

    def batch(self, iteration, size):
        args = [(self.model, self.sampler, self.noise, self.pool, sample_seed(self.seed, iteration, i))
                for i in range(size)]
        if self._executor is not None:
            return list(self._executor.map(_make_sample_args, args))
        return [make_sample(*a) for a in args]

    def close(self):
        if self._executor is not None:
            self._executor.shutdown()


class ListDataset:
    """Fixed samples (e.g. loaded from disk), cycled in a seeded order."""

    def __init__(self, samples, seed=0):
        if not samples:
            raise ValueError("dataset is empty")
        self.samples = list(samples)
        self.seed = seed

    def batch(self, iteration, size):
        rng = np.random.default_rng([self.seed, iteration])
        idx = rng.integers(0, len(self.samples), size=size)
        return [self.samples[i] for i in idx]


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    lam: float = 0.1
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.99
    batch: int = 16
    iterations: int = 1000
    seed: int = 0
    min_pixels: int = 16
    log_every: int = 50

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class StepResult:
    l_seg: float
    l_3d: float
    l_total: float
    degenerate: int = 0


def batch_arrays(samples, net_cfg):
    depth = np.stack([s.depth for s in samples])
    labels = np.stack([s.labels for s in samples]).astype(np.int64)
    return normalize_depth(depth, net_cfg), labels


def evaluate_loss(net, samples, model, lam, min_pixels, backward=False):
    """Forward the batch, compute the losses and optionally backpropagate."""
    x, labels = batch_arrays(samples, net.cfg)
    _, probs, _ = net.forward(x)
    l_seg, dlogits = loss_seg(probs, labels)
    n = len(samples)
    l3d_sum = 0.0
    dprobs = np.zeros(probs.shape, dtype=np.float64)
    degenerate = 0
    for i, s in enumerate(samples):
        vm = deproject(s.depth, s.intrinsics)
        mask = visibility_mask(s.labels, model, min_pixels)
        res = loss_3d(probs[i].astype(np.float64), vm, model.side_centers, mask)
        degenerate += res.degenerate
        l3d_sum += res.value
        dprobs[i] = res.grad / n
    l_3d = l3d_sum / n
    total = l_seg + lam * l_3d
    if backward:
        if lam > 0:
            dlogits = dlogits + lam * ad.softmax_backward(dprobs, probs.astype(np.float64))
        net.backward(dlogits)
    return StepResult(l_seg, l_3d, total, degenerate)


def train(dataset, net_cfg, train_cfg, model, log_path=None, net=None, callback=None):
    """Minimize L_seg + lambda * L_3D with Adam.

    Returns (net, history) where history holds one dict per iteration.  With
    lambda = 0 the 3D loss is still computed and logged but not applied.
    """
    net = net or SegNet(net_cfg, seed=train_cfg.seed)
    params = net.parameters()
    state = ad.OptimizerState(lr=train_cfg.lr, beta1=train_cfg.beta1, beta2=train_cfg.beta2)
    history = []
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["iteration", "L_seg", "L_3D", "L_total", "wall_ms"])
    try:
        for it in range(train_cfg.iterations):
            t0 = time.perf_counter()
            samples = dataset.batch(it, train_cfg.batch)
            net.zero_grad()
            r = evaluate_loss(net, samples, model, train_cfg.lam, train_cfg.min_pixels, backward=True)
            if not np.isfinite(r.l_total):
                raise TrainingDivergedError(
                    f"non-finite loss at iteration {it} (L_seg={r.l_seg}, L_3D={r.l_3d}); "
                    f"batch sample seeds {[s.seed for s in samples]}")
            ad.adam_step([p.data for p in params], [p.grad for p in params], state)
            wall = (time.perf_counter() - t0) * 1000
            row = {"iteration": it, "L_seg": r.l_seg, "L_3D": r.l_3d, "L_total": r.l_total,
                   "wall_ms": wall}
            history.append(row)
            if writer is not None:
                writer.writerow([it, f"{r.l_seg:.6g}", f"{r.l_3d:.6g}", f"{r.l_total:.6g}", f"{wall:.1f}"])
            if train_cfg.log_every and it % train_cfg.log_every == 0:
                log.info("iter %d  L_seg %.4f  L_3D %.4f  L_total %.4f  (%.0f ms)",
                         it, r.l_seg, r.l_3d, r.l_total, wall)
                if fh is not None:
                    fh.flush()
            if callback is not None:
                callback(it, net, row)
    finally:
        if fh is not None:
            fh.close()
    return net, history


def save_network(path, net):
    ad.save_checkpoint(path, net.state_dict())


def load_network(path, net_cfg):
    net = SegNet(net_cfg)
    net.load_state_dict(ad.load_checkpoint(path))
    return net
