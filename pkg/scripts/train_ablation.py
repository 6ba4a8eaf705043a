"""Train the lambda-ablation pair of micro networks on one synthetic stream.

Both runs share the stream seed and the initialization seed, so the only
difference is the weight of the 3D loss.  Checkpoints are written every
``--save-every`` iterations to ``<out>/lam<lambda>/``.
"""

import argparse
import json
import logging
from pathlib import Path

from boxcalib.segnet import (SegNet, SyntheticStream, TrainConfig, network_config, save_network,
                             train)
from boxcalib.structure import default_structure

log = logging.getLogger("train_ablation")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--lambda", dest="lam", type=float, required=True)
    ap.add_argument("--iterations", type=int, default=15000)
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--save-every", type=int, default=1000)
    ap.add_argument("--out", type=Path, default=Path("artifacts/ablation"))
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")

    model = default_structure()
    net_cfg = network_config("micro", 96, 128, model.num_classes)
    train_cfg = TrainConfig(lam=args.lam, lr=args.lr, batch=args.batch, iterations=args.iterations,
                            seed=args.seed, log_every=100)
    out = args.out / f"lam{args.lam:g}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(
        {"network": net_cfg.to_dict(), "train": vars(train_cfg), "stream_seed": args.seed},
        indent=2, default=str))
    stream = SyntheticStream(model, seed=args.seed, width=net_cfg.width, height=net_cfg.height)

    def checkpoint(it, net, row):
        if (it + 1) % args.save_every == 0:
            save_network(out / f"iter{it + 1:06d}.bxck", net)
            save_network(out / "latest.bxck", net)

    net = SegNet(net_cfg, seed=args.seed)
    train(stream, net_cfg, train_cfg, model, log_path=out / "train_log.csv", net=net,
          callback=checkpoint)
    save_network(out / "final.bxck", net)


if __name__ == "__main__":
    main()
