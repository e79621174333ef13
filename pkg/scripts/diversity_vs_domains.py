"""Mean diversity score of test batches as the number of mixed domains grows."""

import numpy as np

from datta.adaptation import diversity_of
from datta.datagen import CORRUPTIONS, Domain, ScenarioSpec, build_stream
from datta.normalizers import compute_batch_stats

from _common import checkpoint, emit, parser


def main():
    p = parser(__doc__)
    p.add_argument("--severity", type=int, default=5)
    p.add_argument("--subsets", type=int, default=8, help="random domain subsets per M")
    args = p.parse_args()
    ckpt = checkpoint(args.ckpt)
    model = ckpt.model
    rows = []
    for m in (1, 2, 4, 8):
        per_seed = []
        for seed in range(args.seeds):
            rng = np.random.default_rng([seed, m])
            scores = []
            for rep in range(args.subsets):
                idx = [rep % len(CORRUPTIONS)] if m == 1 else rng.permutation(len(CORRUPTIONS))[:m]
                doms = [Domain(CORRUPTIONS[i], args.severity) for i in idx]
                spec = ScenarioSpec("dynamic" if m > 1 else "non_iid", doms, num_batches=2,
                                    seed=seed * 100 + rep, delta=100.0)
                for b in build_stream(spec, ckpt.task):
                    f0 = model.stem(b.x)
                    scores.append(diversity_of(model, f0, compute_batch_stats(f0)))
            per_seed.append(np.mean(scores))
        rows.append([m, f"{np.mean(per_seed):.4f}", f"{np.std(per_seed):.4f}"])
    emit(["domains", "mean_score", "std_over_seeds"], rows, args.out)


if __name__ == "__main__":
    main()
