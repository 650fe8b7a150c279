"""Train BASELINE on the 200-pair copy corpus and report dev token accuracy."""
import argparse
import time

from stochdec import experiments as ex


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[1])
    ap.add_argument("--steps", type=int, default=ex.COPY_CONFIG.max_steps)
    args = ap.parse_args()
    for seed in args.seeds:
        t0 = time.perf_counter()
        result, acc = ex.run_copy_task(seed, max_steps=args.steps)
        print(f"seed {seed}: dev token accuracy {acc:.4f}, final loss "
              f"{result.losses[-1]:.4f}, {time.perf_counter() - t0:.1f}s", flush=True)


if __name__ == "__main__":
    main()
