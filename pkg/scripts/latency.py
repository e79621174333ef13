"""Mean per-batch wall time of each method on the mixed-domain stream."""

import numpy as np

from datta.adaptation import AdaptationConfig
from datta.datagen import ScenarioSpec
from datta.harness import run_experiment

from _common import MIX4, checkpoint, emit, parser


def main():
    args = parser(__doc__).parse_args()
    ckpt = checkpoint(args.ckpt)
    base = None
    rows = []
    for method, cfg in (("bn_stats", AdaptationConfig(method="bn_stats", bn_stats_a=0.0)),
                        ("tent", AdaptationConfig(method="tent")), ("datta", AdaptationConfig()),
                        ("unmix", AdaptationConfig(method="unmix"))):
        ms = np.mean([run_experiment(ckpt, ScenarioSpec("dynamic", MIX4, num_batches=args.batches, seed=s),
                                     cfg)[1]["mean_latency_ms"] for s in range(args.seeds)])
        base = base or ms
        rows.append([method, f"{ms:.2f}", f"{ms / base:.2f}"])
    emit(["method", "ms_per_batch", "relative_to_bn_stats"], rows, args.out)


if __name__ == "__main__":
    main()
