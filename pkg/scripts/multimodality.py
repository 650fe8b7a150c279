"""Train SENT and SDEC on the variation corpus over several seeds.

Prints per-seed sample diversity, dataset rate and dev ELBO, then the
medians used by the directional comparisons.
"""
import argparse
import time

from stochdec import experiments as ex


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=list(ex.VARIATION_SEEDS))
    ap.add_argument("--kinds", nargs="+", default=["SENT", "SDEC"])
    ap.add_argument("--samples", type=int, default=100)
    args = ap.parse_args()
    train_c, _ = ex.variation_corpora()
    summary = {}
    for kind in args.kinds:
        for seed in args.seeds:
            t0 = time.perf_counter()
            early = ex.run_variation(kind, seed, max_steps=50)
            result = ex.run_variation(kind, seed)
            div = ex.sample_diversity(result, train_c, args.samples)
            row = dict(div.as_dict(), rate_early=ex.dataset_rate(early, train_c),
                       rate_final=ex.dataset_rate(result, train_c),
                       dev_elbo=ex.final_dev_metric(result),
                       seconds=time.perf_counter() - t0)
            summary.setdefault(kind, []).append(row)
            print(kind, seed, " ".join(f"{k}={v:.4f}" for k, v in row.items()), flush=True)
    for kind, rows in summary.items():
        keys = rows[0].keys()
        print(kind, "median", " ".join(f"{k}={ex.median_of([r[k] for r in rows]):.4f}"
                                       for k in keys))


if __name__ == "__main__":
    main()
