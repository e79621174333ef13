"""Accuracy of every method on mixed-domain and single-domain streams (seed means)."""

import numpy as np

from datta.adaptation import AdaptationConfig
from datta.datagen import ScenarioSpec
from datta.harness import run_experiment

from _common import MIX4, checkpoint, emit, parser

METHODS = {
    "source": AdaptationConfig(method="source"),
    "tbn": AdaptationConfig(method="bn_stats", bn_stats_a=0.0),
    "alpha_bn": AdaptationConfig(method="bn_stats", bn_stats_a=0.5),
    "iabn": AdaptationConfig(method="iabn_only"),
    "unmix": AdaptationConfig(method="unmix"),
    "tent": AdaptationConfig(method="tent"),
    "datta": AdaptationConfig(),
}


def main():
    args = parser(__doc__).parse_args()
    ckpt = checkpoint(args.ckpt)
    scenarios = {
        "dynamic": lambda s: ScenarioSpec("dynamic", MIX4, num_batches=args.batches, seed=s),
        "dynamic_s": lambda s: ScenarioSpec("dynamic_s", MIX4, num_batches=args.batches, seed=s),
        "single": lambda s: ScenarioSpec("non_iid", MIX4, num_batches=args.batches, seed=s, delta=100.0),
    }
    rows = []
    for name, cfg in METHODS.items():
        row = [name]
        for make in scenarios.values():
            accs = [run_experiment(ckpt, make(s), cfg)[1]["mean_acc"] for s in range(args.seeds)]
            row.append(f"{100 * np.mean(accs):.2f}")
        rows.append(row)
    emit(["method", *scenarios], rows, args.out)


if __name__ == "__main__":
    main()
