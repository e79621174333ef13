"""Accuracy drop from single-domain to mixed-domain streams, with and without gating."""

import numpy as np

from datta.adaptation import AdaptationConfig
from datta.datagen import ScenarioSpec
from datta.harness import run_experiment

from _common import MIX4, checkpoint, emit, parser


def main():
    p = parser(__doc__)
    p.add_argument("--lrs", default="1e-4,1e-3", help="comma-separated learning rates")
    args = p.parse_args()
    ckpt = checkpoint(args.ckpt)
    rows = []
    for lr in (float(v) for v in args.lrs.split(",")):
        for method in ("tent", "datta"):
            cfg = AdaptationConfig(method=method, lr=lr)
            acc = {}
            for kind, extra in (("single", dict(kind="non_iid", delta=100.0)), ("mixed", dict(kind="dynamic"))):
                acc[kind] = np.mean([run_experiment(ckpt, ScenarioSpec(domains=MIX4, num_batches=args.batches,
                                                                       seed=s, **extra), cfg)[1]["mean_acc"]
                                     for s in range(args.seeds)])
            rows.append([method, lr, f"{100 * acc['single']:.2f}", f"{100 * acc['mixed']:.2f}",
                         f"{100 * (acc['single'] - acc['mixed']):.2f}"])
    emit(["method", "lr", "single_acc", "mixed_acc", "gap"], rows, args.out)


if __name__ == "__main__":
    main()
