"""Grid over learning rate and loss weights for the toy ViT on the noise stream.

    python scripts/sweep.py --checkpoint run/model.fwd --samples 8192 \
        --lr 1e-4 3e-4 1e-3 3e-3 1e-2 --weights 1,0.4 0.05,1 0,1

Prints one row per setting with the final running accuracy next to NoAdapt.
The layer set comes from DRLS on the contrast shift unless --layers is given.
"""

import argparse
import time

from fwdadapt.checkpoint import load_checkpoint
from fwdadapt.data import Corruption, SyntheticDataset, make_drls_sets
from fwdadapt.drls import select_layers
from fwdadapt.models import ParamSelection
from fwdadapt.sfaa import LossWeights, aligned_layers, compute_source_stats
from fwdadapt.stream import AdaptConfig, adapt_stream, evaluate_stream, final_accuracy, make_schedule, materialize
from fwdadapt.zoo import ZooConfig


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", type=int, default=4096)
    p.add_argument("--corruption", default="gaussian_noise")
    p.add_argument("--lr", type=float, nargs="+", default=[1e-3])
    p.add_argument("--weights", nargs="+", default=["0.05,1"], help="lambda1,lambda2 pairs")
    p.add_argument("--layers", type=lambda s: [int(t) for t in s.split(",")])
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    model = load_checkpoint(args.checkpoint).model
    ds = SyntheticDataset(0)
    src, _ = ds.sample_batch("source_holdout", 64, seed=args.seed + 1)
    stats = compute_source_stats(model, src, range(model.n_layers))
    layers = args.layers
    if layers is None:
        d_id, d_ood = make_drls_sets(ds, 64, Corruption("contrast", 5), args.seed)
        layers = select_layers(model, d_id, d_ood)[1].selected
    stream = materialize(make_schedule("standard", [args.corruption], 5, args.seed, args.samples), ds)
    print(f"layers {layers}  noadapt {final_accuracy(evaluate_stream(model, stream)):.4f}")
    print(f"{'lr':>8} {'l1':>6} {'l2':>6} {'final':>8} {'sec':>6}")
    for lr in args.lr:
        for pair in args.weights:
            w = LossWeights(*(float(v) for v in pair.split(",")))
            m = model.copy()
            st = stats.subset(aligned_layers(layers, m.n_layers)) if w.align > 0 else None
            t0 = time.perf_counter()
            recs = adapt_stream(m, ParamSelection(m, layers), st, stream,
                                AdaptConfig(ZooConfig(5, 0.01, lr, args.seed), w))
            print(f"{lr:>8g} {w.entropy:>6g} {w.align:>6g} {final_accuracy(recs):>8.4f} "
                  f"{time.perf_counter() - t0:>6.1f}")


if __name__ == "__main__":
    main()
